use ndarray::Array2;
use rand::seq::index::sample;

use super::{adam_step, sgld_step, AdamState, GradStats, OptimizerConfig};
use crate::diffusion::{forward_into, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gmm::Dataset;
use crate::losses::sample_time;
use crate::model::ScoreNet;
use crate::rng::{fill_normal, Streams};

/// Training stops with [`Error::Diverged`] once the minibatch loss exceeds this.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Called after every parameter update.
pub trait TrainObserver {
    /// `step` is the index of the update just applied; `net` holds the new
    /// parameters, `loss` and `sq_grad_norm` refer to the parameters before it.
    fn after_step(&mut self, step: usize, net: &ScoreNet, loss: f64, sq_grad_norm: f64) -> Result<()>;
}

impl TrainObserver for () {
    fn after_step(&mut self, _: usize, _: &ScoreNet, _: f64, _: f64) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(usize, &ScoreNet, f64, f64) -> Result<()>> TrainObserver for F {
    fn after_step(&mut self, step: usize, net: &ScoreNet, loss: f64, sq_grad_norm: f64) -> Result<()> {
        self(step, net, loss, sq_grad_norm)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ScoreNet,
    pub stats: GradStats,
}

/// Minimize the epsilon loss on `data`. Each step draws a minibatch and, per
/// datapoint, one time `t ~ Unif(schedule times)` and one Gaussian `G`.
///
/// Minibatch and forward noise come from stream `("train-batch", 0)` and the
/// Langevin noise from `("sgld-noise", 0)` of `streams`.
pub fn train(
    mut net: ScoreNet,
    data: &Dataset,
    schedule: &NoiseSchedule,
    config: &OptimizerConfig,
    streams: &Streams,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.d() != net.dim() {
        return Err(Error::InvalidArgument(format!("dataset dimension {} vs network {}", data.d(), net.dim())));
    }
    let n = data.n();
    let d = data.d();
    let b = config.batch_size().min(n);
    let nu = schedule.nu_measure();
    let mut batch_rng = streams.rng("train-batch", 0);
    let mut noise_rng = streams.rng("sgld-noise", 0);
    let mut adam = AdamState::new(net.params().len());
    let mut grad = vec![0.0; net.params().len()];
    let mut stats = GradStats::default();
    let mut times = vec![0.0; b];
    let mut xs = Array2::<f64>::zeros((b, d));
    let mut gs = Array2::<f64>::zeros((b, d));

    for k in 0..config.iterations() {
        let indices: Vec<usize> = if b == n { (0..n).collect() } else { sample(&mut batch_rng, n, b).into_vec() };
        for (r, &i) in indices.iter().enumerate() {
            times[r] = sample_time(&nu, &mut batch_rng);
            fill_normal(&mut batch_rng, gs.row_mut(r).as_slice_mut().expect("contiguous"));
            let z = data.point(i);
            forward_into(
                z.as_slice().expect("contiguous"),
                times[r],
                gs.row(r).as_slice().expect("contiguous"),
                xs.row_mut(r).as_slice_mut().expect("contiguous"),
            );
        }
        let loss = match net.backprop_into(&times, xs.view(), gs.view(), None, &mut grad) {
            Ok(loss) => loss,
            Err(Error::NumericalFailure { .. }) => return Err(Error::Diverged { step: k, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged { step: k, loss });
        }
        let sq: f64 = grad.iter().map(|g| g * g).sum();
        if let Some(max) = config.clip() {
            let norm = sq.sqrt();
            if norm > max {
                let s = max / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        match config {
            OptimizerConfig::Sgld(c) => sgld_step(net.params_mut(), &grad, c, k, &mut noise_rng)?,
            OptimizerConfig::Adam(c) => adam_step(net.params_mut(), &grad, &mut adam, c, k)?,
        }
        if let Some(i) = net.params().as_slice().iter().position(|p| !p.is_finite()) {
            return Err(Error::numerical(Some(k), format!("parameter {i} became non-finite")));
        }
        stats.push(sq, loss, config.step_size(k));
        observer.after_step(k, &net, loss, sq)?;
    }
    Ok(TrainOutcome { net, stats })
}
