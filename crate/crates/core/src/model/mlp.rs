//! Batched forward and reverse pass.
//!
//! Rows of a batch often share a diffusion time, so the time pathway and the
//! per-block time projections are computed once per distinct time and
//! gathered onto the rows; the reverse pass scatters their gradients back.

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

use super::{Linear, ScoreNet, Slot};
use crate::error::{Error, Result};

fn weight(p: &[f64], s: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &p[s.offset..s.offset + s.rows * s.cols]).expect("slot shape")
}

fn bias(p: &[f64], s: Slot) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[s.offset..s.offset + s.rows])
}

fn weight_mut(p: &mut [f64], s: Slot) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut p[s.offset..s.offset + s.rows * s.cols]).expect("slot shape")
}

fn bias_mut(p: &mut [f64], s: Slot) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut p[s.offset..s.offset + s.rows])
}

/// `x W^T + b`, row by row.
fn affine(p: &[f64], l: Linear, x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&weight(p, l.w).t());
    z += &bias(p, l.b);
    z
}

/// Accumulate the parameter gradient of `z = x W^T + b` given `dz`.
fn accumulate(grad: &mut [f64], l: Linear, dz: ArrayView2<f64>, x: ArrayView2<f64>) {
    general_mat_mul(1.0, &dz.t(), &x, 1.0, &mut weight_mut(grad, l.w));
    bias_mut(grad, l.b).scaled_add(1.0, &dz.sum_axis(Axis(0)));
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of `1000 t / horizon`: cosines then sines over
/// geometrically spaced frequencies from 1 down to 1/10000.
fn embed(times: &[f64], dim: usize, horizon: f64) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((times.len(), dim));
    for (mut row, &t) in out.rows_mut().into_iter().zip(times) {
        let u = 1000.0 * t / horizon;
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            let (sin, cos) = (u * freq).sin_cos();
            row[k] = cos;
            row[half + k] = sin;
        }
    }
    out
}

fn distinct(times: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut seen: HashMap<u64, usize> = HashMap::new();
    let mut uniq = Vec::new();
    let index = times
        .iter()
        .map(|&t| {
            *seen.entry(t.to_bits()).or_insert_with(|| {
                uniq.push(t);
                uniq.len() - 1
            })
        })
        .collect();
    (uniq, index)
}

struct TimePath {
    emb: Array2<f64>,
    u1: Array2<f64>,
    v1: Array2<f64>,
    temb: Array2<f64>,
    index: Vec<usize>,
}

pub(super) struct Cache {
    time: TimePath,
    hs: Vec<Array2<f64>>,
    z1s: Vec<Array2<f64>>,
    a1s: Vec<Array2<f64>>,
    z2s: Vec<Array2<f64>>,
}

pub(super) fn forward(
    net: &ScoreNet,
    times: &[f64],
    xs: ArrayView2<f64>,
    keep: bool,
) -> Result<(Array2<f64>, Option<Cache>)> {
    let arch = &net.arch;
    let slots = &net.slots;
    let p = net.params.as_slice();

    let (uniq, index) = distinct(times);
    let emb = embed(&uniq, arch.time_embed_dim, arch.horizon);
    let u1 = affine(p, slots.time1, emb.view());
    let v1 = if arch.time_activation { u1.mapv(silu) } else { u1.clone() };
    let temb = affine(p, slots.time2, v1.view());

    let mut h = affine(p, slots.input, xs);
    let cap = if keep { slots.blocks.len() } else { 0 };
    let (mut hs, mut z1s, mut a1s, mut z2s) =
        (Vec::with_capacity(cap + 1), Vec::with_capacity(cap), Vec::with_capacity(cap), Vec::with_capacity(cap));
    for block in &slots.blocks {
        let z1 = affine(p, block.a, h.view());
        let tau = affine(p, block.time, temb.view());
        let mut a1 = z1.mapv(silu);
        for (mut row, &u) in a1.rows_mut().into_iter().zip(&index) {
            row += &tau.row(u);
        }
        let z2 = affine(p, block.b, a1.view());
        let mut next = h.clone();
        Zip::from(&mut next).and(&z2).for_each(|n, &z| *n += silu(z));
        if keep {
            hs.push(h);
            z1s.push(z1);
            a1s.push(a1);
            z2s.push(z2);
        }
        h = next;
    }
    let out = affine(p, slots.output, h.view());
    if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::numerical(None, format!("non-finite network output at row {}", pos / arch.d)));
    }
    let cache = keep.then(|| {
        hs.push(h);
        Cache {
            time: TimePath {
                emb,
                u1,
                v1,
                temb,
                index,
            },
            hs,
            z1s,
            a1s,
            z2s,
        }
    });
    Ok((out, cache))
}

pub(super) fn loss_and_grad(
    net: &ScoreNet,
    times: &[f64],
    xs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    weights: Option<&[f64]>,
    grad: &mut [f64],
) -> Result<f64> {
    let (out, cache) = forward(net, times, xs, true)?;
    let cache = cache.expect("cache requested");
    let slots = &net.slots;
    let p = net.params.as_slice();
    let batch = xs.nrows() as f64;

    let mut dout = &out - &targets;
    let mut loss = 0.0;
    for (b, mut row) in dout.rows_mut().into_iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[b]);
        loss += w * row.dot(&row);
        row *= 2.0 * w / batch;
    }
    loss /= batch;
    if !loss.is_finite() {
        return Err(Error::numerical(None, "non-finite loss"));
    }

    grad.fill(0.0);
    let h_last = cache.hs.last().expect("at least the input layer");
    accumulate(grad, slots.output, dout.view(), h_last.view());
    let mut dh = dout.dot(&weight(p, slots.output.w));

    let time = &cache.time;
    let mut dtemb = Array2::<f64>::zeros(time.temb.raw_dim());
    for (j, block) in slots.blocks.iter().enumerate().rev() {
        let mut dz2 = dh.clone();
        Zip::from(&mut dz2).and(&cache.z2s[j]).for_each(|g, &z| *g *= silu_prime(z));
        accumulate(grad, block.b, dz2.view(), cache.a1s[j].view());
        let da1 = dz2.dot(&weight(p, block.b.w));

        let mut dtau = Array2::<f64>::zeros((time.temb.nrows(), da1.ncols()));
        for (row, &u) in da1.rows().into_iter().zip(&time.index) {
            let mut target = dtau.row_mut(u);
            target += &row;
        }
        accumulate(grad, block.time, dtau.view(), time.temb.view());
        general_mat_mul(1.0, &dtau, &weight(p, block.time.w), 1.0, &mut dtemb);

        let mut dz1 = da1;
        Zip::from(&mut dz1).and(&cache.z1s[j]).for_each(|g, &z| *g *= silu_prime(z));
        accumulate(grad, block.a, dz1.view(), cache.hs[j].view());
        general_mat_mul(1.0, &dz1, &weight(p, block.a.w), 1.0, &mut dh);
    }
    accumulate(grad, slots.input, dh.view(), xs);

    accumulate(grad, slots.time2, dtemb.view(), time.v1.view());
    let mut du1 = dtemb.dot(&weight(p, slots.time2.w));
    if net.arch.time_activation {
        Zip::from(&mut du1).and(&time.u1).for_each(|g, &u| *g *= silu_prime(u));
    }
    accumulate(grad, slots.time1, du1.view(), time.emb.view());

    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical(None, "non-finite gradient"));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params_with_output_scale, MlpArch};
    use crate::rng::{normal_vec, Streams};
    use rand::Rng;

    fn random_net(seed: u64, time_activation: bool) -> ScoreNet {
        let mut arch = MlpArch::new(3, 2.0);
        arch.hidden = 16;
        arch.time_embed_dim = 8;
        arch.time_activation = time_activation;
        let mut params = init_params_with_output_scale(&arch, seed, 1.0).unwrap();
        // Nonzero biases so their gradients are exercised.
        let mut rng = Streams::new(seed).rng("bias", 0);
        for v in params.as_mut_slice().iter_mut().filter(|v| **v == 0.0) {
            *v = 0.1 * rng.random_range(-1.0..1.0);
        }
        ScoreNet::new(arch, params).unwrap()
    }

    fn random_batch(seed: u64, b: usize, d: usize) -> (Vec<f64>, Array2<f64>, Array2<f64>, Vec<f64>) {
        let mut rng = Streams::new(seed).rng("batch", 0);
        // A few repeated times, as in training.
        let pool: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..2.0)).collect();
        let times = (0..b).map(|_| pool[rng.random_range(0..3)]).collect();
        let xs = Array2::from_shape_vec((b, d), normal_vec(&mut rng, b * d)).unwrap();
        let ys = Array2::from_shape_vec((b, d), normal_vec(&mut rng, b * d)).unwrap();
        let ws = (0..b).map(|_| rng.random_range(0.5..2.0)).collect();
        (times, xs, ys, ws)
    }

    fn loss_at(net: &ScoreNet, params: &[f64], batch: &(Vec<f64>, Array2<f64>, Array2<f64>, Vec<f64>)) -> f64 {
        let mut probe = net.clone();
        probe.set_params(params).unwrap();
        let out = probe.eps_batch(&batch.0, batch.1.view()).unwrap();
        let mut total = 0.0;
        for (b, w) in batch.3.iter().enumerate() {
            let diff = &out.row(b) - &batch.2.row(b);
            total += w * diff.dot(&diff);
        }
        total / batch.3.len() as f64
    }

    #[test]
    fn gradient_matches_central_differences() {
        for (seed, act) in [(1, true), (2, false), (3, true)] {
            let net = random_net(seed, act);
            let batch = random_batch(seed, 7, 3);
            let (loss, grad) = net
                .backprop_eps_loss(&batch.0, batch.1.view(), batch.2.view(), Some(&batch.3))
                .unwrap();
            assert!((loss - loss_at(&net, net.params().as_slice(), &batch)).abs() < 1e-12 * loss.max(1.0));
            let mut rng = Streams::new(seed).rng("coords", 0);
            let base = net.params().as_slice().to_vec();
            for _ in 0..50 {
                let i = rng.random_range(0..base.len());
                let step = 1e-6;
                let mut plus = base.clone();
                plus[i] += step;
                let mut minus = base.clone();
                minus[i] -= step;
                let fd = (loss_at(&net, &plus, &batch) - loss_at(&net, &minus, &batch)) / (2.0 * step);
                let g = grad.as_slice()[i];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
                assert!(rel < 1e-5, "coordinate {i}: analytic {g}, numeric {fd}");
            }
        }
    }

    #[test]
    fn embedding_values() {
        let e = embed(&[0.0, 1.0], 4, 2.0);
        assert_eq!(e.row(0).to_vec(), vec![1.0, 1.0, 0.0, 0.0]);
        // u = 500, frequencies 1 and 1/100
        assert!((e[[1, 0]] - 500f64.cos()).abs() < 1e-12);
        assert!((e[[1, 3]] - 5f64.sin()).abs() < 1e-12);
        let odd = embed(&[0.3], 5, 1.0);
        assert_eq!(odd[[0, 4]], 0.0);
    }

    #[test]
    fn distinct_times() {
        let (u, idx) = distinct(&[0.5, 0.1, 0.5, 0.2, 0.1]);
        assert_eq!(u, vec![0.5, 0.1, 0.2]);
        assert_eq!(idx, vec![0, 1, 0, 2, 1]);
    }

    #[test]
    fn silu_derivative() {
        for x in [-30.0, -2.0, -0.1, 0.0, 0.7, 5.0, 40.0] {
            let fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((silu_prime(x) - fd).abs() < 1e-8, "{x}");
        }
        assert_eq!(silu(-800.0), 0.0);
    }
}
