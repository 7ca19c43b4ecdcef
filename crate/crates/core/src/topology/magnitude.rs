use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::DistanceMatrix;
use crate::error::{ensure, Error, Result};

/// Points closer than this are merged before solving.
pub const DEDUP_TOLERANCE: f64 = 1e-12;
/// Diagonal shift used when the kernel system is singular.
pub const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeReport {
    /// Sum of the positive parts of the weighting vector.
    pub value: f64,
    pub scale: f64,
    /// Points remaining after deduplication.
    pub points: usize,
    /// Estimated 1-norm condition number of the kernel matrix.
    pub condition_number: f64,
    pub jittered: bool,
}

/// Greedy representatives: a point is kept unless it lies within
/// [`DEDUP_TOLERANCE`] of an earlier kept point.
fn dedup(dist: &DistanceMatrix) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..dist.len() {
        if kept.iter().all(|&j| dist.get(i, j) >= DEDUP_TOLERANCE) {
            kept.push(i);
        }
    }
    kept
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Hager's estimate of `|A^{-1}|_1` for symmetric `A`, using an existing
/// solver.
fn inverse_one_norm(k: usize, solve: impl Fn(&DVector<f64>) -> Option<DVector<f64>>) -> Option<f64> {
    let mut x = DVector::from_element(k, 1.0 / k as f64);
    let mut estimate = 0.0;
    for _ in 0..5 {
        let y = solve(&x)?;
        estimate = y.iter().map(|v| v.abs()).sum::<f64>();
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let z = solve(&xi)?;
        let (j, zmax) = z.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, v)| {
            if v.abs() > acc.1 {
                (i, v.abs())
            } else {
                acc
            }
        });
        if zmax <= z.dot(&x) {
            break;
        }
        x = DVector::zeros(k);
        x[j] = 1.0;
    }
    Some(estimate)
}

/// Solve `sum_b exp(-r rho(a, b)) beta(b) = 1` and return `sum_a max(beta(a), 0)`.
pub fn positive_magnitude(dist: &DistanceMatrix, r: f64) -> Result<MagnitudeReport> {
    ensure(r > 0.0 && r.is_finite(), || format!("scale must be positive, got {r}"))?;
    ensure(!dist.is_empty(), || "magnitude of an empty space".into())?;
    let kept = dedup(dist);
    let k = kept.len();
    let kernel = DMatrix::from_fn(k, k, |a, b| (-r * dist.get(kept[a], kept[b])).exp());
    let ones = DVector::from_element(k, 1.0);

    for jitter in [0.0, JITTER] {
        let mut m = kernel.clone();
        if jitter > 0.0 {
            for i in 0..k {
                m[(i, i)] += jitter;
            }
        }
        let norm = one_norm(&m);
        let lu = m.lu();
        let Some(beta) = lu.solve(&ones) else { continue };
        if beta.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let inv = inverse_one_norm(k, |v| lu.solve(v)).unwrap_or(f64::INFINITY);
        return Ok(MagnitudeReport {
            value: beta.iter().map(|b| b.max(0.0)).sum(),
            scale: r,
            points: k,
            condition_number: norm * inv,
            jittered: jitter > 0.0,
        });
    }
    Err(Error::MagnitudeUndefined)
}
