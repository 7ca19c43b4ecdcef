//! SGLD and Adam with gradient-norm bookkeeping, and the gradient-norm
//! generalization bound with its proxies.

mod train;

pub use train::{train, TrainObserver, TrainOutcome};

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Step sizes `eta_k`: constant, or a table with one entry per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSizes {
    Constant(f64),
    Table(Vec<f64>),
}

impl StepSizes {
    pub fn at(&self, k: usize) -> f64 {
        match self {
            StepSizes::Constant(eta) => *eta,
            StepSizes::Table(t) => t[k],
        }
    }

    fn validate(&self, iterations: usize) -> Result<f64> {
        let values: &[f64] = match self {
            StepSizes::Constant(eta) => std::slice::from_ref(eta),
            StepSizes::Table(t) => {
                if t.len() < iterations {
                    return Err(Error::Config(format!(
                        "step-size table has {} entries for {iterations} iterations",
                        t.len()
                    )));
                }
                &t[..iterations.min(t.len())]
            }
        };
        if let Some(eta) = values.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(Error::Config(format!("step sizes must be finite and non-negative, got {eta}")));
        }
        Ok(values.iter().copied().fold(0.0, f64::max))
    }
}

/// `theta <- (1 - a eta) theta - eta g + sqrt(2 eta / beta) xi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    pub eta: StepSizes,
    /// Weight-decay coefficient `a`.
    pub a: f64,
    /// Inverse temperature.
    pub beta: f64,
    /// Standard deviation `sigma_0` of the initialization law; only enters
    /// the precondition `sigma_0 sqrt(beta a) <= sqrt 2`.
    pub init_std: f64,
    /// Minibatch size; `batch_size >= n` means full batch.
    pub batch_size: usize,
    pub iterations: usize,
    /// Optional maximum gradient norm.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl SgldConfig {
    pub fn new(eta: f64, beta: f64, batch_size: usize, iterations: usize) -> Self {
        Self {
            eta: StepSizes::Constant(eta),
            a: 0.0,
            beta,
            init_std: 1.0,
            batch_size,
            iterations,
            clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max_eta = self.eta.validate(self.iterations)?;
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("inverse temperature must be positive, got {}", self.beta)));
        }
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return Err(Error::Config(format!("regularization must be non-negative, got {}", self.a)));
        }
        if max_eta * self.a >= 1.0 {
            return Err(Error::Config(format!("need sup_k eta_k a < 1, got {}", max_eta * self.a)));
        }
        if self.a > 0.0 && self.init_std * (self.beta * self.a).sqrt() > std::f64::consts::SQRT_2 {
            return Err(Error::Config(format!(
                "need sigma_0 sqrt(beta a) <= sqrt 2, got {}",
                self.init_std * (self.beta * self.a).sqrt()
            )));
        }
        validate_common(self.batch_size, self.clip)
    }
}

fn validate_common(batch_size: usize, clip: Option<f64>) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if let Some(c) = clip {
        if !(c > 0.0) {
            return Err(Error::Config(format!("clipping norm must be positive, got {c}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: StepSizes,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default)]
    pub clip: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64, batch_size: usize, iterations: usize) -> Self {
        Self {
            lr: StepSizes::Constant(lr),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            batch_size,
            iterations,
            clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate(self.iterations)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        validate_common(self.batch_size, self.clip)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgld(SgldConfig),
    Adam(AdamConfig),
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Sgld(c) => c.validate(),
            OptimizerConfig::Adam(c) => c.validate(),
        }
    }

    pub fn iterations(&self) -> usize {
        match self {
            OptimizerConfig::Sgld(c) => c.iterations,
            OptimizerConfig::Adam(c) => c.iterations,
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            OptimizerConfig::Sgld(c) => c.batch_size,
            OptimizerConfig::Adam(c) => c.batch_size,
        }
    }

    pub fn clip(&self) -> Option<f64> {
        match self {
            OptimizerConfig::Sgld(c) => c.clip,
            OptimizerConfig::Adam(c) => c.clip,
        }
    }

    pub fn step_size(&self, k: usize) -> f64 {
        match self {
            OptimizerConfig::Sgld(c) => c.eta.at(k),
            OptimizerConfig::Adam(c) => c.lr.at(k),
        }
    }

    /// The same optimizer run for a different number of iterations; a step
    /// table is continued with its last entry.
    pub fn with_iterations(&self, iterations: usize) -> Self {
        let extend = |s: &StepSizes| match s {
            StepSizes::Constant(e) => StepSizes::Constant(*e),
            StepSizes::Table(t) => {
                let last = *t.last().unwrap_or(&0.0);
                StepSizes::Table((0..iterations).map(|k| *t.get(k).unwrap_or(&last)).collect())
            }
        };
        match self {
            OptimizerConfig::Sgld(c) => OptimizerConfig::Sgld(SgldConfig {
                eta: extend(&c.eta),
                iterations,
                ..c.clone()
            }),
            OptimizerConfig::Adam(c) => OptimizerConfig::Adam(AdamConfig {
                lr: extend(&c.lr),
                iterations,
                ..c.clone()
            }),
        }
    }
}

fn check_grad(grad: &[f64], k: usize) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical(Some(k), "non-finite gradient"));
    }
    Ok(())
}

/// One SGLD update at iteration `k`, in place.
pub fn sgld_step(params: &mut [f64], grad: &[f64], config: &SgldConfig, k: usize, rng: &mut StreamRng) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::Size(format!("{} parameters, {} gradient entries", params.len(), grad.len())));
    }
    check_grad(grad, k)?;
    let eta = config.eta.at(k);
    let shrink = 1.0 - config.a * eta;
    let noise = (2.0 * eta / config.beta).sqrt();
    for (p, g) in params.iter_mut().zip(grad) {
        let xi: f64 = StandardNormal.sample(rng);
        *p = shrink * *p - eta * g + noise * xi;
    }
    Ok(())
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update at iteration `k` (0-based), in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, config: &AdamConfig, k: usize) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(Error::Size("parameter, gradient and Adam state lengths differ".into()));
    }
    check_grad(grad, k)?;
    let lr = config.lr.at(k);
    let t = (k + 1) as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

/// Per-step training statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradStats {
    pub sq_grad_norms: Vec<f64>,
    pub losses: Vec<f64>,
    pub step_sizes: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsRow {
    step: usize,
    sq_grad_norm: f64,
    train_loss: f64,
}

impl GradStats {
    pub fn push(&mut self, sq_grad_norm: f64, loss: f64, step_size: f64) {
        self.sq_grad_norms.push(sq_grad_norm);
        self.losses.push(loss);
        self.step_sizes.push(step_size);
    }

    pub fn len(&self) -> usize {
        self.sq_grad_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sq_grad_norms.is_empty()
    }

    pub fn mean_sq_grad_norm(&self) -> f64 {
        self.sq_grad_norms.iter().sum::<f64>() / self.len().max(1) as f64
    }

    /// `S_k = sum_{j<k} eta_j` for `k = 0..=K`, with compensated summation.
    pub fn partial_sums(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() + 1);
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        out.push(0.0);
        for &eta in &self.step_sizes {
            let t = sum + eta;
            comp += if sum.abs() >= eta.abs() { (sum - t) + eta } else { (eta - t) + sum };
            sum = t;
            out.push(sum + comp);
        }
        out
    }

    /// `S_K - S_k` for `k = 0..K`, summed from the tail.
    pub fn tail_sums(&self) -> Vec<f64> {
        let k = self.len();
        let mut out = vec![0.0; k];
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for j in (0..k).rev() {
            let eta = self.step_sizes[j];
            let t = sum + eta;
            comp += if sum.abs() >= eta.abs() { (sum - t) + eta } else { (eta - t) + sum };
            sum = t;
            out[j] = sum + comp;
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(["step", "sq_grad_norm", "train_loss"])
            .map_err(|e| Error::Schema(e.to_string()))?;
        for (step, (&g, &l)) in self.sq_grad_norms.iter().zip(&self.losses).enumerate() {
            w.serialize(StatsRow {
                step,
                sq_grad_norm: g,
                train_loss: l,
            })
            .map_err(|e| Error::Schema(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Schema(e.to_string()))?;
        crate::io::atomic_write(path, &bytes)
    }

    /// Reads norms and losses; step sizes are not stored in the CSV.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let mut stats = GradStats::default();
        for (i, row) in r.deserialize::<StatsRow>().enumerate() {
            let row = row.map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
            if row.step != i {
                return Err(Error::Schema(format!("{}: expected step {i}, found {}", path.display(), row.step)));
            }
            stats.push(row.sq_grad_norm, row.train_loss, f64::NAN);
        }
        Ok(stats)
    }
}

/// Mean of the last `min(window, K)` squared gradient norms.
pub fn last_window_avg(stats: &GradStats, window: usize) -> f64 {
    let k = stats.len();
    if k == 0 || window == 0 {
        return 0.0;
    }
    let tail = &stats.sq_grad_norms[k - window.min(k)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// `(2 tau / sqrt n) sqrt((beta/2) sum_k eta_k e^{-(a/2)(S_K - S_k)} |g_k|^2 + log(3/delta))`
/// with the observed squared norms in place of their expectations.
pub fn sgld_bound_rhs(stats: &GradStats, config: &SgldConfig, tau: f64, delta: f64, n: usize) -> Result<f64> {
    // The confidence term log(3/delta) stays positive up to delta = 3.
    if !(tau > 0.0) || !(delta > 0.0 && delta < 3.0) || n == 0 {
        return Err(Error::InvalidArgument(format!("need tau > 0, delta in (0, 3), n >= 1; got {tau}, {delta}, {n}")));
    }
    let tails = stats.tail_sums();
    let sum: f64 = (0..stats.len())
        .map(|k| stats.step_sizes[k] * (-0.5 * config.a * tails[k]).exp() * stats.sq_grad_norms[k])
        .sum();
    Ok(2.0 * tau / (n as f64).sqrt() * (0.5 * config.beta * sum + (3.0 / delta).ln()).sqrt())
}

/// `B(n, eta) = sqrt(eta beta avg) / n`.
pub fn proxy_b(n: usize, eta: f64, beta: f64, avg_sq_grad: f64) -> f64 {
    (eta * beta * avg_sq_grad).sqrt() / n as f64
}

/// The same proxy with the `1/sqrt(n)` rate of the bound itself.
pub fn proxy_b_sqrt_n(n: usize, eta: f64, beta: f64, avg_sq_grad: f64) -> f64 {
    (eta * beta * avg_sq_grad).sqrt() / (n as f64).sqrt()
}

/// Inverse temperature `b / eta` matched to minibatch noise.
pub fn heuristic_beta(batch_size: usize, eta: f64) -> f64 {
    batch_size as f64 / eta
}
