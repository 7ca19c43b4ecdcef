//! Trajectory-based complexities: loss-vector pseudometric on optimizer
//! iterates, minimum-spanning-tree lifetime sums, positive magnitude, and the
//! bounds built from them.

mod magnitude;
mod trajectory;

pub use magnitude::{positive_magnitude, MagnitudeReport, DEDUP_TOLERANCE, JITTER};
pub use trajectory::{record_trajectory, TrajectoryProbe, TrajectoryRecord, TrajectoryRecorder, TrajectorySidecar, MAX_SUBSET};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Dense symmetric distance matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    k: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// From a row-major `k x k` array; symmetry is not re-checked.
    pub fn from_dense(k: usize, values: Vec<f64>) -> Result<Self> {
        ensure(values.len() == k * k, || format!("{} values for a {k} x {k} matrix", values.len()))?;
        ensure(values.iter().all(|v| v.is_finite() && *v >= 0.0), || "distances must be finite and non-negative".into())?;
        Ok(Self { k, values })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Rows and columns reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k;
        let mut values = vec![0.0; k * k];
        for (a, &i) in perm.iter().enumerate() {
            for (b, &j) in perm.iter().enumerate() {
                values[a * k + b] = self.get(i, j);
            }
        }
        Self { k, values }
    }
}

/// `rho(w, w') = (1/n_sub) sum_i |l_i(w) - l_i(w')|` between the rows of the
/// record's loss matrix.
pub fn pseudometric_matrix(record: &TrajectoryRecord) -> DistanceMatrix {
    let losses = record.losses();
    let k = losses.nrows();
    let n_sub = losses.ncols() as f64;
    let mut values = vec![0.0; k * k];
    values.par_chunks_mut(k.max(1)).enumerate().for_each(|(i, row)| {
        let li = losses.row(i);
        for (j, out) in row.iter_mut().enumerate().skip(i + 1) {
            *out = li.iter().zip(losses.row(j)).map(|(a, b)| (a - b).abs()).sum::<f64>() / n_sub;
        }
    });
    for i in 0..k {
        for j in 0..i {
            values[i * k + j] = values[j * k + i];
        }
    }
    DistanceMatrix { k, values }
}

/// Total edge cost of a minimum spanning tree (dense Prim); 0 for one point.
pub fn mst_lifetime_sum(dist: &DistanceMatrix) -> f64 {
    let k = dist.len();
    if k <= 1 {
        return 0.0;
    }
    let mut in_tree = vec![false; k];
    let mut best = vec![f64::INFINITY; k];
    best[0] = 0.0;
    let mut total = 0.0;
    for _ in 0..k {
        let mut u = usize::MAX;
        let mut min = f64::INFINITY;
        for v in 0..k {
            if !in_tree[v] && best[v] < min {
                min = best[v];
                u = v;
            }
        }
        in_tree[u] = true;
        total += min;
        for v in 0..k {
            if !in_tree[v] {
                let d = dist.get(u, v);
                if d < best[v] {
                    best[v] = d;
                }
            }
        }
    }
    total
}

/// `{sqrt(n), 1e-2}`.
pub fn standard_scales(n: usize) -> [f64; 2] {
    [(n as f64).sqrt(), 1e-2]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// Uniform bound `B` on the loss.
    pub b: f64,
    pub delta: f64,
    /// Surrogate for the mutual-information term; 0 means "not estimated".
    pub mutual_information: f64,
    /// Magnitude scale `r`.
    pub r: f64,
    /// Constant `L` in `PMag(L r W)`.
    pub lipschitz: f64,
}

impl BoundParams {
    pub fn new(b: f64, delta: f64, r: f64) -> Self {
        Self {
            b,
            delta,
            mutual_information: 0.0,
            r,
            lipschitz: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.b > 0.0, || format!("loss bound must be positive, got {}", self.b))?;
        ensure(self.delta > 0.0 && self.delta < 1.0, || format!("delta must lie in (0, 1), got {}", self.delta))?;
        ensure(self.r > 0.0, || format!("scale must be positive, got {}", self.r))?;
        ensure(self.mutual_information >= 0.0, || "mutual information surrogate must be non-negative".into())?;
        ensure(self.lipschitz > 0.0, || "L must be positive".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundVariant {
    /// `B sqrt((log(1 + 4 sqrt(n) E1 / B) + 1 + I + log(1/delta)) / n)`; the
    /// argument is `E1`.
    Lifetime,
    /// `(2/r) log PMag(L r W) + r B^2 / n + 3 B sqrt((I + log(1/delta)) / n)`;
    /// the argument is `PMag(L r W)`.
    Magnitude,
}

/// Evaluate a trajectory bound with unit hidden constants.
pub fn topology_bound_rhs(complexity: f64, params: &BoundParams, n: usize, variant: BoundVariant) -> Result<f64> {
    params.validate()?;
    ensure(n >= 1, || "n must be at least 1".into())?;
    let nf = n as f64;
    let conf = (1.0 / params.delta).ln();
    let b = params.b;
    Ok(match variant {
        BoundVariant::Lifetime => {
            ensure(complexity >= 0.0, || format!("E1 must be non-negative, got {complexity}"))?;
            b * (((1.0 + 4.0 * nf.sqrt() / b * complexity).ln() + 1.0 + params.mutual_information + conf) / nf).sqrt()
        }
        BoundVariant::Magnitude => {
            ensure(complexity > 0.0, || format!("PMag must be positive, got {complexity}"))?;
            2.0 / params.r * complexity.ln() + params.r * b * b / nf + 3.0 * b * ((params.mutual_information + conf) / nf).sqrt()
        }
    })
}

/// The magnitude bound minimized over `r` in a log-spaced grid; returns `(r, value)`.
pub fn magnitude_bound_minimized(dist: &DistanceMatrix, params: &BoundParams, n: usize, grid: &[f64]) -> Result<(f64, f64)> {
    ensure(!grid.is_empty(), || "scale grid is empty".into())?;
    let mut best = (f64::NAN, f64::INFINITY);
    for &r in grid {
        let p = BoundParams { r, ..*params };
        let pmag = positive_magnitude(dist, params.lipschitz * r)?.value;
        let v = topology_bound_rhs(pmag, &p, n, BoundVariant::Magnitude)?;
        if v < best.1 {
            best = (r, v);
        }
    }
    Ok(best)
}

/// `count` log-spaced points from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyBounds {
    pub lifetime_bound: f64,
    /// Magnitude bound at each standard scale.
    pub magnitude_bound: BTreeMap<String, f64>,
    /// `(r, value)` of the magnitude bound minimized over a scale grid, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude_bound_min: Option<(f64, f64)>,
    pub params: BoundParams,
    pub up_to_constant: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyReport {
    #[serde(rename = "E1")]
    pub e1: f64,
    #[serde(rename = "PMag")]
    pub pmag: BTreeMap<String, f64>,
    pub condition_number: BTreeMap<String, f64>,
    pub bounds: TopologyBounds,
    pub iterates: usize,
    pub n_sub: usize,
    pub n: usize,
}

pub(crate) fn scale_key(r: f64) -> String {
    format!("{r}")
}

/// Complexities of a recorded trajectory and the bounds at the standard
/// scales. `n` is the training-set size.
pub fn topology_report(record: &TrajectoryRecord, n: usize, params: &BoundParams) -> Result<TopologyReport> {
    topology_report_at(record, n, params, &standard_scales(n), None)
}

/// As [`topology_report`] at the given scales, optionally adding the magnitude bound
/// minimized over `magnitude_grid`.
pub fn topology_report_at(
    record: &TrajectoryRecord,
    n: usize,
    params: &BoundParams,
    scales: &[f64],
    magnitude_grid: Option<&[f64]>,
) -> Result<TopologyReport> {
    let dist = pseudometric_matrix(record);
    let e1 = mst_lifetime_sum(&dist);
    let mut pmag = BTreeMap::new();
    let mut condition_number = BTreeMap::new();
    let mut magnitude_bound = BTreeMap::new();
    for &r in scales {
        let m = positive_magnitude(&dist, params.lipschitz * r)?;
        let p = BoundParams { r, ..*params };
        magnitude_bound.insert(scale_key(r), topology_bound_rhs(m.value, &p, n, BoundVariant::Magnitude)?);
        pmag.insert(scale_key(r), m.value);
        condition_number.insert(scale_key(r), m.condition_number);
    }
    let magnitude_bound_min = magnitude_grid.map(|g| magnitude_bound_minimized(&dist, params, n, g)).transpose()?;
    Ok(TopologyReport {
        e1,
        pmag,
        condition_number,
        bounds: TopologyBounds {
            lifetime_bound: topology_bound_rhs(e1, params, n, BoundVariant::Lifetime)?,
            magnitude_bound,
            magnitude_bound_min,
            params: *params,
            up_to_constant: true,
        },
        iterates: record.len(),
        n_sub: record.n_sub(),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(k: usize, f: impl Fn(usize, usize) -> f64) -> DistanceMatrix {
        let mut v = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    v[i * k + j] = f(i.min(j), i.max(j));
                }
            }
        }
        DistanceMatrix::from_dense(k, v).unwrap()
    }

    #[test]
    fn mst_examples() {
        assert_eq!(mst_lifetime_sum(&dense(1, |_, _| 0.0)), 0.0);
        let tri = dense(3, |i, j| match (i, j) {
            (0, 1) => 1.0,
            (0, 2) => 2.0,
            _ => 3.0,
        });
        assert_eq!(mst_lifetime_sum(&tri), 3.0);
    }

    #[test]
    fn bound_examples() {
        let p = BoundParams::new(1.0, 1.0 / std::f64::consts::E, 1.0);
        let v = topology_bound_rhs(1.0, &p, 100, BoundVariant::Magnitude).unwrap();
        assert!((v - 0.31).abs() < 1e-12);
        let p = BoundParams::new(2.0, 0.05, 1.0);
        let v = topology_bound_rhs(0.0, &p, 50, BoundVariant::Lifetime).unwrap();
        assert!((v - 2.0 * ((1.0 + 20f64.ln()) / 50.0).sqrt()).abs() < 1e-12);
        let mut prev = 0.0;
        for e1 in [0.0, 0.1, 1.0, 10.0] {
            let v = topology_bound_rhs(e1, &p, 50, BoundVariant::Lifetime).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert!(topology_bound_rhs(1.0, &BoundParams::new(0.0, 0.05, 1.0), 10, BoundVariant::Lifetime).is_err());
    }

    #[test]
    fn scales() {
        assert_eq!(standard_scales(4096), [64.0, 0.01]);
        assert_eq!(standard_scales(1), [1.0, 0.01]);
        let g = log_grid(0.01, 100.0, 5);
        assert!((g[2] - 1.0).abs() < 1e-12 && (g[4] - 100.0).abs() < 1e-9);
    }
}
