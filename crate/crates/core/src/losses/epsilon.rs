use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use super::McConfig;
use crate::diffusion::{conditional_score_into, forward_into, Convention, TimeMeasure};
use crate::error::{Error, Result};
use crate::estimate::{Estimate, Stratified};
use crate::gmm::Dataset;
use crate::model::ScoreNet;
use crate::rng::fill_normal;
use crate::score::ScoreField;

const POINTS_PER_TASK: usize = 64;

/// Draw an atom time from `measure`.
pub(crate) fn sample_time<R: Rng + ?Sized>(measure: &TimeMeasure, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, w) in measure.atoms() {
        acc += w;
        if u < acc {
            return t;
        }
    }
    measure.atoms().last().expect("non-empty measure").0
}

/// `(1/n) sum_i E |eps(t, X_t^{Z_i}) - G|^2` with `t ~ nu` and fresh `G` for
/// each of the `samples_per_atom` draws per datapoint. Datapoint `i` draws
/// from stream `("eps-loss", i)`.
pub fn epsilon_loss(net: &ScoreNet, data: &Dataset, nu: &TimeMeasure, mc: &McConfig) -> Result<Estimate> {
    mc.validate()?;
    if data.d() != net.dim() {
        return Err(Error::InvalidArgument(format!("dataset dimension {} vs network {}", data.d(), net.dim())));
    }
    let streams = mc.streams();
    let m = mc.samples_per_atom;
    let d = data.d();
    let n = data.n();
    let chunks: Vec<Vec<(f64, Vec<f64>)>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(POINTS_PER_TASK)
        .map(|idx| {
            let rows = idx.len() * m;
            let mut times = Vec::with_capacity(rows);
            let mut g = Array2::<f64>::zeros((rows, d));
            let mut xs = Array2::<f64>::zeros((rows, d));
            for (a, &i) in idx.iter().enumerate() {
                let mut rng = streams.rng("eps-loss", i as u64);
                let z = data.point(i);
                let z = z.as_slice().expect("contiguous");
                for j in 0..m {
                    let r = a * m + j;
                    if mc.antithetic && j % 2 == 1 {
                        times.push(times[r - 1]);
                        let prev = g.row(r - 1).mapv(|v| -v);
                        g.row_mut(r).assign(&prev);
                    } else {
                        times.push(sample_time(nu, &mut rng));
                        fill_normal(&mut rng, g.row_mut(r).as_slice_mut().expect("contiguous"));
                    }
                    forward_into(
                        z,
                        times[r],
                        g.row(r).as_slice().expect("contiguous"),
                        xs.row_mut(r).as_slice_mut().expect("contiguous"),
                    );
                }
            }
            let eps = net.eps_batch(&times, xs.view())?;
            let losses: Vec<f64> = (&eps - &g).rows().into_iter().map(|r| r.dot(&r)).collect();
            Ok(losses
                .chunks_exact(m)
                .map(|cell| {
                    let values = if mc.antithetic {
                        cell.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect()
                    } else {
                        cell.to_vec()
                    };
                    (1.0 / n as f64, values)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut strat = Stratified::new(1);
    for (w, values) in chunks.into_iter().flatten() {
        strat.push_cell(w, &values);
    }
    let e = strat.term(0);
    if !e.value.is_finite() {
        return Err(Error::numerical(None, "non-finite epsilon loss"));
    }
    Ok(e)
}

/// Per-row `|eps(t_b, X_b) - g_b|^2` with `X_b = forward(x0_b, t_b, g_b)` for
/// fixed draws.
pub fn epsilon_losses_fixed(net: &ScoreNet, x0s: ArrayView2<f64>, times: &[f64], noises: ArrayView2<f64>) -> Result<Vec<f64>> {
    if x0s.dim() != noises.dim() || times.len() != x0s.nrows() {
        return Err(Error::Size("fixed draws have inconsistent shapes".into()));
    }
    let mut xs = Array2::<f64>::zeros(x0s.raw_dim());
    for (b, mut row) in xs.rows_mut().into_iter().enumerate() {
        let z = x0s.row(b).to_vec();
        let g = noises.row(b).to_vec();
        forward_into(&z, times[b], &g, row.as_slice_mut().expect("contiguous"));
    }
    let eps = net.eps_batch(times, xs.view())?;
    Ok((&eps - &noises).rows().into_iter().map(|r| r.dot(&r)).collect())
}

/// Per-row `|s(t_b, X_b) - 2 grad log p~_{t|0}(X_b | x0_b)|^2` on the same fixed
/// draws as [`epsilon_losses_fixed`], with the target in `convention`.
pub fn denoising_losses_fixed<S: ScoreField + ?Sized>(
    score: &S,
    x0s: ArrayView2<f64>,
    times: &[f64],
    noises: ArrayView2<f64>,
    convention: Convention,
) -> Result<Vec<f64>> {
    if x0s.dim() != noises.dim() || times.len() != x0s.nrows() || score.dim() != x0s.ncols() {
        return Err(Error::Size("fixed draws have inconsistent shapes".into()));
    }
    let d = x0s.ncols();
    let mut by_time: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (b, t) in times.iter().enumerate() {
        by_time.entry(t.to_bits()).or_default().push(b);
    }
    let mut out = vec![0.0; times.len()];
    let mut target = vec![0.0; d];
    for (bits, rows) in by_time {
        let t = f64::from_bits(bits);
        let mut xs = Array2::<f64>::zeros((rows.len(), d));
        for (r, &b) in rows.iter().enumerate() {
            let z = x0s.row(b).to_vec();
            let g = noises.row(b).to_vec();
            forward_into(&z, t, &g, xs.row_mut(r).as_slice_mut().expect("contiguous"));
        }
        let s = score.eval(t, xs.view())?;
        for (r, &b) in rows.iter().enumerate() {
            let x = xs.row(r).to_vec();
            let z = x0s.row(b).to_vec();
            conditional_score_into(&x, &z, t, convention, &mut target);
            out[b] = s.row(r).iter().zip(&target).map(|(a, c)| (a - 2.0 * c).powi(2)).sum();
        }
    }
    Ok(out)
}
