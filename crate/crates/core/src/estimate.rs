//! Monte Carlo estimates with standard errors.

use serde::{Deserialize, Serialize};

/// A Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    /// Number of draws behind the estimate.
    #[serde(rename = "M")]
    pub m: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            stderr: 0.0,
            m: 0,
        }
    }

    /// Sample mean and standard error of the mean.
    pub fn from_samples(samples: &[f64]) -> Self {
        let m = samples.len();
        if m == 0 {
            return Self::exact(f64::NAN);
        }
        let mean = samples.iter().sum::<f64>() / m as f64;
        let var = if m > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64
        } else {
            0.0
        };
        Self {
            value: mean,
            stderr: (var / m as f64).sqrt(),
            m,
        }
    }

    /// Linear combination of independent estimates.
    pub fn combine_independent(terms: &[(f64, Estimate)]) -> Self {
        let value = terms.iter().map(|(c, e)| c * e.value).sum();
        let var: f64 = terms.iter().map(|(c, e)| (c * e.stderr).powi(2)).sum();
        Self {
            value,
            stderr: var.sqrt(),
            m: terms.iter().map(|(_, e)| e.m).sum(),
        }
    }

    /// Whether `|value - target| <= k * stderr`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.stderr
    }
}

/// Per-cell moments of a vector of integrands, for stratified estimators.
///
/// Each cell carries a weight `c` and `m` draws of a `k`-vector. The estimate of
/// any linear combination `a` of the integrands is `sum_c c * mean_c(a . v)`
/// with variance `sum_c c^2 var_c(a . v) / m_c`, so paired (common random
/// number) differences get their true, usually much smaller, standard error.
#[derive(Debug, Clone, Default)]
pub struct Stratified {
    k: usize,
    cells: Vec<Cell>,
}

#[derive(Debug, Clone)]
struct Cell {
    weight: f64,
    m: usize,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

impl Stratified {
    pub fn new(k: usize) -> Self {
        Self { k, cells: Vec::new() }
    }

    /// Add a cell from `m` rows of `k` values stored row-major.
    pub fn push_cell(&mut self, weight: f64, values: &[f64]) {
        let k = self.k;
        let m = values.len() / k;
        let mut mean = vec![0.0; k];
        for row in values.chunks_exact(k) {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in mean.iter_mut() {
            *a /= m as f64;
        }
        let mut cov = vec![0.0; k * k];
        if m > 1 {
            for row in values.chunks_exact(k) {
                for i in 0..k {
                    let di = row[i] - mean[i];
                    for j in i..k {
                        cov[i * k + j] += di * (row[j] - mean[j]);
                    }
                }
            }
            for i in 0..k {
                for j in i..k {
                    let c = cov[i * k + j] / (m - 1) as f64;
                    cov[i * k + j] = c;
                    cov[j * k + i] = c;
                }
            }
        }
        self.cells.push(Cell { weight, m, mean, cov });
    }

    pub fn draws(&self) -> usize {
        self.cells.iter().map(|c| c.m).sum()
    }

    /// Estimate of `sum_i coeffs[i] * integrand_i`.
    pub fn combination(&self, coeffs: &[f64]) -> Estimate {
        let k = self.k;
        let mut value = 0.0;
        let mut var = 0.0;
        for c in &self.cells {
            let mut mean = 0.0;
            let mut v = 0.0;
            for i in 0..k {
                mean += coeffs[i] * c.mean[i];
                for j in 0..k {
                    v += coeffs[i] * coeffs[j] * c.cov[i * k + j];
                }
            }
            value += c.weight * mean;
            if c.m > 0 {
                var += c.weight * c.weight * v.max(0.0) / c.m as f64;
            }
        }
        Estimate {
            value,
            stderr: var.sqrt(),
            m: self.draws(),
        }
    }

    pub fn term(&self, i: usize) -> Estimate {
        let mut coeffs = vec![0.0; self.k];
        coeffs[i] = 1.0;
        self.combination(&coeffs)
    }
}
