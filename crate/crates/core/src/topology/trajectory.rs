use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_into, NoiseSchedule, TimeMeasure};
use crate::error::{ensure, Error, Result};
use crate::gmm::Dataset;
use crate::io::{atomic_write, f64s_to_le_bytes, le_bytes_to_f64s, read_json, sidecar_path, write_json};
use crate::losses::sample_time;
use crate::model::ScoreNet;
use crate::optim::{train, OptimizerConfig, TrainObserver, TrainOutcome};
use crate::rng::{fill_normal, Streams};

/// Largest evaluation subset.
pub const MAX_SUBSET: usize = 3000;

/// A fixed evaluation subset with one `(t_i, g_i)` draw per datapoint.
///
/// The subset comes from stream `("trajectory-subset", 0)` of `noise_seed`
/// (all points when `n <= MAX_SUBSET`) and the draw for datapoint `id` from
/// `("trajectory-draw", id)`.
#[derive(Debug, Clone)]
pub struct TrajectoryProbe {
    subset_ids: Vec<usize>,
    times: Vec<f64>,
    noises: Array2<f64>,
    xs: Array2<f64>,
    noise_seed: u64,
}

impl TrajectoryProbe {
    pub fn new(data: &Dataset, nu: &TimeMeasure, noise_seed: u64) -> Result<Self> {
        let n = data.n();
        let d = data.d();
        let streams = Streams::new(noise_seed);
        let subset_ids: Vec<usize> = if n <= MAX_SUBSET {
            (0..n).collect()
        } else {
            let mut ids = sample(&mut streams.rng("trajectory-subset", 0), n, MAX_SUBSET).into_vec();
            ids.sort_unstable();
            ids
        };
        let k = subset_ids.len();
        let mut times = Vec::with_capacity(k);
        let mut noises = Array2::zeros((k, d));
        let mut xs = Array2::zeros((k, d));
        for (r, &id) in subset_ids.iter().enumerate() {
            let mut rng = streams.rng("trajectory-draw", id as u64);
            times.push(sample_time(nu, &mut rng));
            fill_normal(&mut rng, noises.row_mut(r).as_slice_mut().expect("contiguous"));
            let z = data.point(id).to_vec();
            forward_into(
                &z,
                times[r],
                noises.row(r).as_slice().expect("contiguous"),
                xs.row_mut(r).as_slice_mut().expect("contiguous"),
            );
        }
        Ok(Self {
            subset_ids,
            times,
            noises,
            xs,
            noise_seed,
        })
    }

    pub fn subset_ids(&self) -> &[usize] {
        &self.subset_ids
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.subset_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subset_ids.is_empty()
    }

    /// Per-sample epsilon losses of `net` on the fixed draws.
    pub fn losses(&self, net: &ScoreNet) -> Result<Vec<f64>> {
        let eps = net.eps_batch(&self.times, self.xs.view())?;
        Ok((&eps - &self.noises).rows().into_iter().map(|r| r.dot(&r)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub k0: usize,
    pub k1: usize,
    pub subset_ids: Vec<usize>,
    pub fixed_times: Vec<f64>,
    pub noise_seed: u64,
    /// Gradient norm at iterate `k0 + j` before update `j`; one shorter than
    /// the number of iterates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norms: Option<Vec<f64>>,
}

/// Per-iterate loss vectors for iterates `k0..=k1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    losses: Array2<f64>,
    meta: TrajectorySidecar,
}

impl TrajectoryRecord {
    pub fn new(losses: Array2<f64>, meta: TrajectorySidecar) -> Result<Self> {
        let (k, n_sub) = losses.dim();
        ensure(k >= 1 && n_sub >= 1, || format!("record must be non-empty, got {k} x {n_sub}"))?;
        ensure(meta.k1 + 1 == meta.k0 + k, || format!("iterates {}..={} do not match {k} rows", meta.k0, meta.k1))?;
        ensure(meta.subset_ids.len() == n_sub && meta.fixed_times.len() == n_sub, || {
            "subset metadata does not match row length".into()
        })?;
        ensure(losses.iter().all(|v| v.is_finite()), || "record has non-finite losses".into())?;
        Ok(Self { losses, meta })
    }

    pub fn losses(&self) -> &Array2<f64> {
        &self.losses
    }

    pub fn meta(&self) -> &TrajectorySidecar {
        &self.meta
    }

    /// Number of iterates.
    pub fn len(&self) -> usize {
        self.losses.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.nrows() == 0
    }

    pub fn n_sub(&self) -> usize {
        self.losses.ncols()
    }

    /// Little-endian rows at `path`, metadata at `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let flat: Vec<f64> = self.losses.iter().copied().collect();
        atomic_write(path, &f64s_to_le_bytes(&flat))?;
        write_json(&sidecar_path(path), &self.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: TrajectorySidecar = read_json(&sidecar_path(path))?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let flat = le_bytes_to_f64s(&bytes)?;
        let n_sub = meta.subset_ids.len();
        if n_sub == 0 || flat.len() % n_sub != 0 {
            return Err(Error::Schema(format!("{} values do not form rows of {n_sub}", flat.len())));
        }
        let losses = Array2::from_shape_vec((flat.len() / n_sub, n_sub), flat)
            .map_err(|e| Error::Schema(e.to_string()))?;
        Self::new(losses, meta).map_err(|e| Error::Schema(e.to_string()))
    }
}

/// Training observer that evaluates the probe after every update.
pub struct TrajectoryRecorder<'a> {
    probe: &'a TrajectoryProbe,
    rows: Vec<Vec<f64>>,
    grad_norms: Vec<f64>,
    k0: usize,
}

impl<'a> TrajectoryRecorder<'a> {
    /// Starts with the losses of `net` as iterate `k0`.
    pub fn new(probe: &'a TrajectoryProbe, net: &ScoreNet, k0: usize) -> Result<Self> {
        Ok(Self {
            probe,
            rows: vec![probe.losses(net)?],
            grad_norms: Vec::new(),
            k0,
        })
    }

    pub fn finish(self) -> Result<TrajectoryRecord> {
        let k = self.rows.len();
        let n_sub = self.probe.len();
        let flat: Vec<f64> = self.rows.into_iter().flatten().collect();
        let losses = Array2::from_shape_vec((k, n_sub), flat).map_err(|e| Error::Size(e.to_string()))?;
        TrajectoryRecord::new(
            losses,
            TrajectorySidecar {
                k0: self.k0,
                k1: self.k0 + k - 1,
                subset_ids: self.probe.subset_ids.clone(),
                fixed_times: self.probe.times.clone(),
                noise_seed: self.probe.noise_seed,
                grad_norms: Some(self.grad_norms),
            },
        )
    }
}

impl TrainObserver for TrajectoryRecorder<'_> {
    fn after_step(&mut self, _: usize, net: &ScoreNet, _: f64, sq_grad_norm: f64) -> Result<()> {
        self.rows.push(self.probe.losses(net)?);
        self.grad_norms.push(sq_grad_norm.sqrt());
        Ok(())
    }
}

/// Continue training `net` for `steps` updates and record every iterate,
/// starting with `net` itself as iterate `k0`.
#[allow(clippy::too_many_arguments)]
pub fn record_trajectory(
    net: ScoreNet,
    data: &Dataset,
    schedule: &NoiseSchedule,
    config: &OptimizerConfig,
    steps: usize,
    k0: usize,
    noise_seed: u64,
    streams: &Streams,
) -> Result<(TrajectoryRecord, TrainOutcome)> {
    let probe = TrajectoryProbe::new(data, &schedule.nu_measure(), noise_seed)?;
    let mut recorder = TrajectoryRecorder::new(&probe, &net, k0)?;
    let outcome = train(net, data, schedule, &config.with_iterations(steps), streams, &mut recorder)?;
    Ok((recorder.finish()?, outcome))
}
