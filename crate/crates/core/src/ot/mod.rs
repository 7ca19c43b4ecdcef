//! Exact Wasserstein-2 between equal-size point clouds, and correlation
//! statistics.

mod lap;

pub use lap::{solve as solve_assignment, Assignment};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest cloud accepted by [`w2_exact`] unless a cap is given.
pub const DEFAULT_W2_CAP: usize = 4096;
/// Largest cloud accepted by [`w2_bruteforce`].
pub const BRUTEFORCE_MAX: usize = 8;

/// `m x d` points, all finite, `m >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    points: Array2<f64>,
}

impl SampleCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::InvalidArgument(format!("empty point cloud {:?}", points.dim())));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("point cloud has non-finite entries".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn m(&self) -> usize {
        self.points.nrows()
    }

    pub fn d(&self) -> usize {
        self.points.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2Report {
    pub m: usize,
    pub d: usize,
    pub w2: f64,
    pub w2_sq: f64,
    pub solver_iterations: u64,
}

fn check_pair(x: &SampleCloud, y: &SampleCloud) -> Result<()> {
    if x.m() != y.m() {
        return Err(Error::InvalidArgument(format!("clouds differ in size: {} vs {}", x.m(), y.m())));
    }
    if x.d() != y.d() {
        return Err(Error::InvalidArgument(format!("clouds differ in dimension: {} vs {}", x.d(), y.d())));
    }
    Ok(())
}

/// Row-major squared Euclidean distances.
pub fn sq_cost_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Vec<f64> {
    let m = x.nrows();
    let mut cost = vec![0.0; m * y.nrows()];
    cost.par_chunks_mut(y.nrows().max(1)).enumerate().for_each(|(i, row)| {
        let xi = x.row(i);
        for (c, yj) in row.iter_mut().zip(y.rows()) {
            *c = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    cost
}

/// W2 between the uniform measures on `x` and `y`, by optimal assignment.
pub fn w2_exact(x: &SampleCloud, y: &SampleCloud) -> Result<W2Report> {
    w2_exact_capped(x, y, DEFAULT_W2_CAP)
}

pub fn w2_exact_capped(x: &SampleCloud, y: &SampleCloud, cap: usize) -> Result<W2Report> {
    check_pair(x, y)?;
    let m = x.m();
    if m > cap {
        return Err(Error::Size(format!("cloud of {m} points exceeds the cap of {cap}")));
    }
    let cost = sq_cost_matrix(x.points(), y.points());
    let a = lap::solve(m, &cost);
    let w2_sq = (a.cost / m as f64).max(0.0);
    Ok(W2Report {
        m,
        d: x.d(),
        w2: w2_sq.sqrt(),
        w2_sq,
        solver_iterations: a.iterations,
    })
}

/// W2 by exhaustive search over all permutations (`m <= 8`).
pub fn w2_bruteforce(x: &SampleCloud, y: &SampleCloud) -> Result<f64> {
    check_pair(x, y)?;
    let m = x.m();
    if m > BRUTEFORCE_MAX {
        return Err(Error::Size(format!("exhaustive search limited to {BRUTEFORCE_MAX} points, got {m}")));
    }
    let cost = sq_cost_matrix(x.points(), y.points());
    // Heap's algorithm over column permutations.
    let mut perm: Vec<usize> = (0..m).collect();
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum::<f64>();
    let mut best = total(&perm);
    let mut c = vec![0usize; m];
    let mut i = 0;
    while i < m {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((best / m as f64).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub pearson: f64,
    pub spearman: f64,
}

/// Pearson and Spearman correlation; ties get average ranks.
pub fn correlations(xs: &[f64], ys: &[f64]) -> Result<Correlations> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument("correlations need at least 3 pairs".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("correlation input has non-finite values".into()));
    }
    Ok(Correlations {
        pearson: pearson(xs, ys)?,
        spearman: pearson(&ranks(xs), &ranks(ys))?,
    })
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a series has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties averaged.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            out[k] = avg;
        }
        start = end;
    }
    out
}
