use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{RunConfig, RunManifest};
use crate::diffusion::{ei_backward_sample, NoiseSchedule};
use crate::error::Result;
use crate::estimate::Estimate;
use crate::gmm::{sample_gmm, Dataset};
use crate::io::{write_cloud, write_json};
use crate::losses::{epsilon_loss, McConfig};
use crate::model::{save_checkpoint, NetScore, ScoreNet};
use crate::optim::{heuristic_beta, last_window_avg, proxy_b, proxy_b_sqrt_n, sgld_bound_rhs, train, GradStats, OptimizerConfig};
use crate::ot::{w2_exact, SampleCloud};
use crate::rng::Streams;
use crate::topology::{record_trajectory, scale_key, standard_scales, topology_report, BoundParams, TopologyReport, TrajectoryRecord};

/// Iterations averaged for the windowed gradient-norm statistic.
const GRAD_WINDOW: usize = 1000;

pub struct TrainedRun {
    pub seed: u64,
    pub data: Dataset,
    pub schedule: NoiseSchedule,
    pub net: ScoreNet,
    pub stats: GradStats,
}

/// Train one seed of `config`. The network is initialized from stream family
/// `("init", 0)` and trained with `("train", 0)`.
pub fn train_run(config: &RunConfig, seed: u64) -> Result<TrainedRun> {
    let schedule = config.schedule.build()?;
    let data = config.train_data(seed)?;
    let root = Streams::new(seed);
    let net = ScoreNet::init(config.arch_for(&schedule), root.derive("init", 0).seed())?;
    let outcome = train(net, &data, &schedule, &config.optimizer, &root.derive("train", 0), &mut ())?;
    Ok(TrainedRun {
        seed,
        data,
        schedule,
        net: outcome.net,
        stats: outcome.stats,
    })
}

/// Per-run metrics; one row of the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub n: usize,
    pub eta: f64,
    /// Inverse temperature; `b / eta` for Adam.
    pub beta: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub train_loss: Estimate,
    pub test_loss: Estimate,
    /// Test minus train epsilon loss.
    pub gen_gap: Estimate,
    pub mean_sq_grad_norm: f64,
    pub window_sq_grad_norm: f64,
    pub b_proxy: f64,
    pub b_proxy_sqrt_n: f64,
    pub sgld_bound: Option<f64>,
    pub e1: Option<f64>,
    pub pmag_sqrt_n: Option<f64>,
    pub pmag_small: Option<f64>,
    pub lifetime_bound: Option<f64>,
    pub w2: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunMetrics {
    /// Values in the order of [`super::AGGREGATE_COLUMNS`] after `cell, seed, status`.
    pub(crate) fn csv_values(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            self.eta.to_string(),
            self.beta.to_string(),
            self.batch_size.to_string(),
            self.iterations.to_string(),
            self.train_loss.value.to_string(),
            self.test_loss.value.to_string(),
            self.gen_gap.value.to_string(),
            self.gen_gap.stderr.to_string(),
            self.mean_sq_grad_norm.to_string(),
            self.window_sq_grad_norm.to_string(),
            self.b_proxy.to_string(),
            self.b_proxy_sqrt_n.to_string(),
            opt(self.sgld_bound),
            opt(self.e1),
            opt(self.pmag_sqrt_n),
            opt(self.pmag_small),
            opt(self.lifetime_bound),
            opt(self.w2),
            String::new(),
        ]
    }
}

/// Everything [`evaluate_run`] produces.
pub struct Evaluation {
    pub metrics: RunMetrics,
    pub trajectory: Option<(TrajectoryRecord, TopologyReport)>,
    pub generated: Option<ndarray::Array2<f64>>,
}

/// Train/test epsilon losses, gradient proxies, trajectory topology and the
/// W2 distance of generated samples to fresh data.
pub fn evaluate_run(config: &RunConfig, run: &TrainedRun) -> Result<Evaluation> {
    let root = Streams::new(run.seed);
    let nu = run.schedule.nu_measure();
    let n = run.data.n();
    let eval_mc = |tag: &str| McConfig::new(config.mc.eval_draws, root.derive(tag, 0).seed());
    let train_loss = epsilon_loss(&run.net, &run.data, &nu, &eval_mc("eval-train"))?;
    let test = config.test_data(run.seed, n)?;
    let test_loss = epsilon_loss(&run.net, &test, &nu, &eval_mc("eval-test"))?;
    let gen_gap = Estimate::combine_independent(&[(1.0, test_loss), (-1.0, train_loss)]);

    let iterations = run.stats.len();
    let steps = &run.stats.step_sizes;
    let eta = if iterations == 0 {
        config.optimizer.step_size(0)
    } else if steps.iter().all(|&h| h == steps[0]) {
        steps[0]
    } else {
        run.stats.partial_sums()[iterations] / iterations as f64
    };
    let batch_size = config.optimizer.batch_size().min(n);
    let beta = match &config.optimizer {
        OptimizerConfig::Sgld(c) => c.beta,
        OptimizerConfig::Adam(_) => heuristic_beta(batch_size, eta),
    };
    let mean_sq = if iterations == 0 { 0.0 } else { run.stats.mean_sq_grad_norm() };
    let window_sq = if iterations == 0 { 0.0 } else { last_window_avg(&run.stats, GRAD_WINDOW) };
    let sgld_bound = match &config.optimizer {
        OptimizerConfig::Sgld(c) => Some(sgld_bound_rhs(&run.stats, c, config.bounds.tau, config.bounds.delta, n)?),
        OptimizerConfig::Adam(_) => None,
    };

    let trajectory = match &config.trajectory {
        Some(t) if t.steps > 0 => {
            let noise_seed = t.noise_seed.unwrap_or_else(|| root.derive("trajectory-noise", 0).seed());
            let (record, _) = record_trajectory(
                run.net.clone(),
                &run.data,
                &run.schedule,
                &config.optimizer,
                t.steps,
                iterations,
                noise_seed,
                &root.derive("trajectory", 0),
            )?;
            let params = BoundParams::new(config.bounds.loss_bound, config.bounds.delta, 1.0);
            let report = topology_report(&record, n, &params)?;
            Some((record, report))
        }
        _ => None,
    };

    let generated = if config.mc.w2_samples > 0 {
        let m = config.mc.w2_samples;
        let inference = config.schedule.with_steps(config.inference_steps).build()?;
        Some(ei_backward_sample(&NetScore::gamma(&run.net), &inference, m, &root.derive("sample", 0))?)
    } else {
        None
    };
    let w2 = match &generated {
        Some(g) => {
            let reference = sample_gmm(&config.spec, g.nrows(), &root.derive("w2-reference", 0))?;
            Some(w2_exact(&SampleCloud::new(g.clone())?, &SampleCloud::new(reference.points().clone())?)?.w2)
        }
        None => None,
    };

    let scales = standard_scales(n);
    let topo = trajectory.as_ref().map(|(_, r)| r);
    let metrics = RunMetrics {
        seed: run.seed,
        n,
        eta,
        beta,
        batch_size,
        iterations,
        train_loss,
        test_loss,
        gen_gap,
        mean_sq_grad_norm: mean_sq,
        window_sq_grad_norm: window_sq,
        b_proxy: proxy_b(n, eta, beta, mean_sq),
        b_proxy_sqrt_n: proxy_b_sqrt_n(n, eta, beta, mean_sq),
        sgld_bound,
        e1: topo.map(|r| r.e1),
        pmag_sqrt_n: topo.and_then(|r| r.pmag.get(&scale_key(scales[0])).copied()),
        pmag_small: topo.and_then(|r| r.pmag.get(&scale_key(scales[1])).copied()),
        lifetime_bound: topo.map(|r| r.bounds.lifetime_bound),
        w2,
    };
    Ok(Evaluation {
        metrics,
        trajectory,
        generated,
    })
}

/// Train and evaluate one seed, writing every artifact and a manifest to `dir`.
pub fn run_single(config: &RunConfig, seed: u64, dir: &Path) -> Result<RunMetrics> {
    let mut manifest = RunManifest::new("run", serde_json::to_value(config)?, Some(seed));
    if let Some(p) = &config.dataset {
        manifest.add_input("dataset", p)?;
    }
    let clock = Instant::now();
    let run = train_run(config, seed)?;
    manifest.timing.insert("train_seconds".into(), clock.elapsed().as_secs_f64());
    save_checkpoint(&dir.join("model.ckpt"), &run.net, seed, run.stats.len() as u64)?;
    manifest.add_artifact("checkpoint", dir, "model.ckpt")?;
    run.stats.write_csv(&dir.join("grad_stats.csv"))?;
    manifest.add_artifact("grad_stats", dir, "grad_stats.csv")?;

    let clock = Instant::now();
    let eval = evaluate_run(config, &run)?;
    manifest.timing.insert("eval_seconds".into(), clock.elapsed().as_secs_f64());
    if let Some((record, report)) = &eval.trajectory {
        record.save(&dir.join("trajectory.bin"))?;
        manifest.add_artifact("trajectory", dir, "trajectory.bin")?;
        write_json(&dir.join("topology.json"), report)?;
        manifest.add_artifact("topology", dir, "topology.json")?;
        manifest.note("k0", record.meta().k0)?;
        manifest.note("k1", record.meta().k1)?;
    }
    if let Some(g) = &eval.generated {
        write_cloud(&dir.join("samples.bin"), g, Some(seed))?;
        manifest.add_artifact("samples", dir, "samples.bin")?;
    }
    write_json(&dir.join("metrics.json"), &eval.metrics)?;
    manifest.add_artifact("metrics", dir, "metrics.json")?;
    manifest.write(&dir.join("manifest.json"))?;
    Ok(eval.metrics)
}
