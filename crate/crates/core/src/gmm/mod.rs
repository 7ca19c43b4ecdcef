//! Gaussian-mixture data distributions with closed-form diffused scores.
//!
//! Both the true data law (an isotropic mixture) and the empirical measure of a
//! dataset stay Gaussian mixtures under the Ornstein-Uhlenbeck flow:
//! a component `N(m, s2 I)` becomes `N(e^{-t} m, (s2 e^{-2t} + 1 - e^{-2t}) I)`,
//! and a data point `Z` becomes `N(e^{-t} Z, (1 - e^{-2t}) I)`. All scores and
//! log-densities are computed through [`DiffusedMixture`] with log-sum-exp
//! responsibilities.

mod mc;
mod score;

pub use mc::{fisher_identity_check, fisher_mc, kl_mc, FisherIdentityReport};
pub use score::{
    empirical_diffused_score, log_density_at_time, true_diffused_score, MixtureScore,
};

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{read_cloud, write_cloud};
use crate::rng::Streams;

/// Mixture weights of the nine-component benchmark in four dimensions.
pub const NINE_COMPONENT_WEIGHTS: [f64; 9] = [0.01, 0.1, 0.3, 0.2, 0.02, 0.15, 0.02, 0.15, 0.05];
/// Component standard deviation of the benchmark.
pub const NINE_COMPONENT_SIGMA: f64 = 0.05;

/// `sum_j w_j N(m_j, sigma2 I_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub d: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sigma2: f64,
    /// Seed the means were drawn with, when they were drawn.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, sigma2: f64) -> Result<Self> {
        let spec = Self {
            d: means.first().map_or(0, Vec::len),
            weights,
            means,
            sigma2,
            seed: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Means drawn once, uniformly from `[-1, 1]^d`, from `seed`.
    pub fn with_uniform_means(weights: Vec<f64>, d: usize, sigma2: f64, seed: u64) -> Result<Self> {
        let mut rng = Streams::new(seed).rng("gmm-means", 0);
        let means = (0..weights.len())
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let mut spec = Self::new(weights, means, sigma2)?;
        spec.seed = Some(seed);
        Ok(spec)
    }

    /// Nine components in `R^4`, benchmark weights, `sigma = 0.05`.
    pub fn nine_component(seed: u64) -> Self {
        Self::with_uniform_means(NINE_COMPONENT_WEIGHTS.to_vec(), 4, NINE_COMPONENT_SIGMA * NINE_COMPONENT_SIGMA, seed)
            .expect("benchmark mixture is valid")
    }

    /// A single Gaussian `N(mean, sigma2 I)`.
    pub fn gaussian(mean: Vec<f64>, sigma2: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], sigma2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d == 0 {
            return bad("mixture dimension must be positive".into());
        }
        if self.weights.is_empty() || self.weights.len() != self.means.len() {
            return bad("need one weight per mean".into());
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return bad("weights must be positive".into());
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("weights sum to {total}, expected 1"));
        }
        if self.means.iter().any(|m| m.len() != self.d || m.iter().any(|v| !v.is_finite())) {
            return bad("every mean must be a finite vector of dimension d".into());
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Effective support radius `max_j |m_j| + 6 sigma`.
    pub fn support_radius(&self) -> f64 {
        let max_norm = self
            .means
            .iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        max_norm + 6.0 * self.sigma()
    }

    /// Content hash identifying this spec.
    pub fn id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    /// One draw: pick a component, add Gaussian noise.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut j = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        let sigma = self.sigma();
        for (o, m) in out.iter_mut().zip(&self.means[j]) {
            let g: f64 = StandardNormal.sample(rng);
            *o = m + sigma * g;
        }
    }

    /// Draw conditioned on `|x| <= support_radius()`, by rejection.
    pub fn draw_truncated<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let r2 = self.support_radius().powi(2);
        loop {
            self.draw(rng, out);
            if out.iter().map(|v| v * v).sum::<f64>() <= r2 {
                return;
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Sampled { spec_id: String, seed: u64, truncated: bool },
    External { source: String },
}

/// A finite sample `Z_1..Z_n`, one point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Array2<f64>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(points: Array2<f64>, provenance: Provenance) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::InvalidArgument("dataset must be non-empty".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset has non-finite entries".into()));
        }
        Ok(Self { points, provenance })
    }

    pub fn external(points: Array2<f64>, source: impl Into<String>) -> Result<Self> {
        Self::new(
            points,
            Provenance::External {
                source: source.into(),
            },
        )
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }
    pub fn n(&self) -> usize {
        self.points.nrows()
    }
    pub fn d(&self) -> usize {
        self.points.ncols()
    }
    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    /// Binary cloud at `path` with sidecar `{m, d, seed}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let seed = match &self.provenance {
            Provenance::Sampled { seed, .. } => Some(*seed),
            Provenance::External { .. } => None,
        };
        write_cloud(path, &self.points, seed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (points, _) = read_cloud(path)?;
        Self::external(points, path.display().to_string())
    }
}

/// I.i.d. draws from `spec`. Point `i` uses stream `("data", i)`.
pub fn sample_gmm(spec: &GmmSpec, n: usize, streams: &Streams) -> Result<Dataset> {
    sample_impl(spec, n, streams, false)
}

/// As [`sample_gmm`], restricted to the ball of radius `support_radius()`.
pub fn sample_gmm_truncated(spec: &GmmSpec, n: usize, streams: &Streams) -> Result<Dataset> {
    sample_impl(spec, n, streams, true)
}

fn sample_impl(spec: &GmmSpec, n: usize, streams: &Streams, truncated: bool) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    let mut points = Array2::zeros((n, spec.d));
    for (i, mut row) in points.rows_mut().into_iter().enumerate() {
        let mut rng = streams.rng("data", i as u64);
        let slot = row.as_slice_mut().expect("standard layout");
        if truncated {
            spec.draw_truncated(&mut rng, slot);
        } else {
            spec.draw(&mut rng, slot);
        }
    }
    Dataset::new(
        points,
        Provenance::Sampled {
            spec_id: spec.id(),
            seed: streams.seed(),
            truncated,
        },
    )
}

/// An isotropic Gaussian mixture: `sum_j exp(log_w_j) N(c_j, var I)`.
#[derive(Debug, Clone)]
pub struct DiffusedMixture {
    log_weights: Vec<f64>,
    centers: Array2<f64>,
    var: f64,
}

impl DiffusedMixture {
    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    /// Lebesgue score at `x`; `scratch` must have one slot per component.
    pub fn score_into(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let inv2v = 0.5 / self.var;
        let mut best = f64::NEG_INFINITY;
        for (j, (c, lw)) in self.centers.rows().into_iter().zip(&self.log_weights).enumerate() {
            let mut d2 = 0.0;
            for (xi, ci) in x.iter().zip(c.iter()) {
                let diff = xi - ci;
                d2 += diff * diff;
            }
            let l = lw - d2 * inv2v;
            scratch[j] = l;
            if l > best {
                best = l;
            }
        }
        let mut total = 0.0;
        for s in scratch.iter_mut() {
            *s = (*s - best).exp();
            total += *s;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, r) in self.centers.rows().into_iter().zip(scratch.iter()) {
            if *r == 0.0 {
                continue;
            }
            let r = r / total;
            for ((o, xi), ci) in out.iter_mut().zip(x).zip(c.iter()) {
                *o -= r * (xi - ci);
            }
        }
        for o in out.iter_mut() {
            *o /= self.var;
        }
    }

    /// Log-density with respect to Lebesgue measure.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let inv2v = 0.5 / self.var;
        let terms: Vec<f64> = self
            .centers
            .rows()
            .into_iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| {
                let d2: f64 = x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                lw - d2 * inv2v
            })
            .collect();
        let best = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = best + terms.iter().map(|v| (v - best).exp()).sum::<f64>().ln();
        let d = self.dim() as f64;
        lse - 0.5 * d * (2.0 * std::f64::consts::PI * self.var).ln()
    }

    pub fn components(&self) -> usize {
        self.log_weights.len()
    }
}

/// A distribution whose Ornstein-Uhlenbeck marginals are Gaussian mixtures.
pub trait Diffusible: Sync {
    fn dim(&self) -> usize;

    /// Law at forward time `t`.
    fn diffused(&self, t: f64) -> Result<DiffusedMixture>;

    /// `E |X_0|^2`.
    fn second_moment(&self) -> f64;

    /// One draw of `X_0`.
    fn draw_origin(&self, rng: &mut crate::rng::StreamRng, out: &mut [f64]);
}

impl Diffusible for GmmSpec {
    fn dim(&self) -> usize {
        self.d
    }

    fn diffused(&self, t: f64) -> Result<DiffusedMixture> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!("time must be non-negative, got {t}")));
        }
        let decay = (-t).exp();
        let var = self.sigma2 * (-2.0 * t).exp() - (-2.0 * t).exp_m1();
        let mut centers = Array2::zeros((self.means.len(), self.d));
        for (mut row, m) in centers.rows_mut().into_iter().zip(&self.means) {
            for (c, v) in row.iter_mut().zip(m) {
                *c = decay * v;
            }
        }
        Ok(DiffusedMixture {
            log_weights: self.weights.iter().map(|w| w.ln()).collect(),
            centers,
            var,
        })
    }

    fn second_moment(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * (m.iter().map(|v| v * v).sum::<f64>() + self.d as f64 * self.sigma2))
            .sum()
    }

    fn draw_origin(&self, rng: &mut crate::rng::StreamRng, out: &mut [f64]) {
        self.draw(rng, out);
    }
}

impl Diffusible for Dataset {
    fn dim(&self) -> usize {
        self.d()
    }

    fn diffused(&self, t: f64) -> Result<DiffusedMixture> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "empirical marginal is atomic at t = {t}; need t > 0"
            )));
        }
        let decay = (-t).exp();
        let n = self.n();
        Ok(DiffusedMixture {
            log_weights: vec![-(n as f64).ln(); n],
            centers: self.points.mapv(|v| decay * v),
            var: -(-2.0 * t).exp_m1(),
        })
    }

    fn second_moment(&self) -> f64 {
        self.points.rows().into_iter().map(|r| r.dot(&r)).sum::<f64>() / self.n() as f64
    }

    fn draw_origin(&self, rng: &mut crate::rng::StreamRng, out: &mut [f64]) {
        let i = rng.random_range(0..self.n());
        for (o, v) in out.iter_mut().zip(self.points.row(i)) {
            *o = *v;
        }
    }
}
