use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Diffusible, GmmSpec};
use crate::diffusion::{conditional_score_into, forward_into, Convention};
use crate::error::{Error, Result};
use crate::estimate::Estimate;
use crate::rng::{fill_normal, Streams};
use crate::score::ScoreField;

/// Relative Fisher information `E_p |score_p - score_q|^2` by Monte Carlo.
pub fn fisher_mc<R, P, Q, S>(score_p: P, score_q: Q, mut sampler_p: S, m: usize, rng: &mut R) -> Result<Estimate>
where
    R: Rng + ?Sized,
    P: Fn(&[f64]) -> Vec<f64>,
    Q: Fn(&[f64]) -> Vec<f64>,
    S: FnMut(&mut R) -> Vec<f64>,
{
    if m < 2 {
        return Err(Error::InvalidArgument("need at least 2 Monte Carlo draws".into()));
    }
    let mut values = Vec::with_capacity(m);
    for i in 0..m {
        let x = sampler_p(rng);
        let a = score_p(&x);
        let b = score_q(&x);
        let v: f64 = a.iter().zip(&b).map(|(u, w)| (u - w).powi(2)).sum();
        if !v.is_finite() {
            return Err(Error::numerical(Some(i), "score in Fisher information estimate"));
        }
        values.push(v);
    }
    Ok(Estimate::from_samples(&values))
}

/// `KL(mu | gamma^d)` by Monte Carlo over `x ~ mu`.
pub fn kl_mc<R: Rng + ?Sized>(spec: &GmmSpec, m: usize, rng: &mut R) -> Result<Estimate> {
    if m < 2 {
        return Err(Error::InvalidArgument("need at least 2 Monte Carlo draws".into()));
    }
    let mix = spec.diffused(0.0)?;
    let d = spec.d as f64;
    let log_norm = 0.5 * d * (2.0 * std::f64::consts::PI).ln();
    let mut x = vec![0.0; spec.d];
    let values: Vec<f64> = (0..m)
        .map(|_| {
            spec.draw(rng, &mut x);
            let log_gamma = -0.5 * x.iter().map(|v| v * v).sum::<f64>() - log_norm;
            mix.log_density(&x) - log_gamma
        })
        .collect();
    Ok(Estimate::from_samples(&values))
}

/// Both sides of `E<psi(X_t), grad log p~_t(X_t)> = E<psi(X_t), grad log p~_{t|0}(X_t|X_0)>`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FisherIdentityReport {
    pub t: f64,
    pub marginal: Estimate,
    pub conditional: Estimate,
    /// Paired difference `marginal - conditional`; zero in expectation.
    pub difference: Estimate,
}

/// Monte Carlo check of the Fisher identity for the forward process started
/// at `source`, with test field `psi` evaluated at `(t, X_t)`.
pub fn fisher_identity_check<D, F>(psi: &F, source: &D, t: f64, m: usize, streams: &Streams) -> Result<FisherIdentityReport>
where
    D: Diffusible + ?Sized,
    F: ScoreField + ?Sized,
{
    if m < 2 {
        return Err(Error::InvalidArgument("need at least 2 Monte Carlo draws".into()));
    }
    let d = source.dim();
    let mut rng = streams.rng("fisher-identity", 0);
    let mut origins = Array2::zeros((m, d));
    let mut xs = Array2::zeros((m, d));
    let mut g = vec![0.0; d];
    for (mut z, mut x) in origins.rows_mut().into_iter().zip(xs.rows_mut()) {
        let zs = z.as_slice_mut().expect("contiguous");
        source.draw_origin(&mut rng, zs);
        fill_normal(&mut rng, &mut g);
        forward_into(zs, t, &g, x.as_slice_mut().expect("contiguous"));
    }
    let field = psi.eval(t, xs.view())?;
    let mix = source.diffused(t)?;
    let mut scratch = vec![0.0; mix.components()];
    let mut marg = vec![0.0; d];
    let mut cond = vec![0.0; d];
    let mut lhs = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    let mut diff = Vec::with_capacity(m);
    for i in 0..m {
        let x = xs.row(i);
        let x = x.as_slice().expect("contiguous");
        mix.score_into(x, &mut scratch, &mut marg);
        Convention::Gamma.apply(x, &mut marg);
        conditional_score_into(x, origins.row(i).as_slice().expect("contiguous"), t, Convention::Gamma, &mut cond);
        let p = field.row(i);
        let a: f64 = p.iter().zip(&marg).map(|(u, v)| u * v).sum();
        let b: f64 = p.iter().zip(&cond).map(|(u, v)| u * v).sum();
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::numerical(Some(i), "Fisher identity integrand"));
        }
        lhs.push(a);
        rhs.push(b);
        diff.push(a - b);
    }
    Ok(FisherIdentityReport {
        t,
        marginal: Estimate::from_samples(&lhs),
        conditional: Estimate::from_samples(&rhs),
        difference: Estimate::from_samples(&diff),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::true_diffused_score;
    use crate::rng::normal_vec;
    use crate::score::PointwiseScore;

    #[test]
    fn fisher_of_gaussian_against_standard() {
        let mut rng = Streams::new(1).rng("t", 0);
        let zero = fisher_mc(|x: &[f64]| x.iter().map(|v| -v).collect(), |x: &[f64]| x.iter().map(|v| -v).collect(), |r: &mut _| normal_vec(r, 3), 100, &mut rng).unwrap();
        assert_eq!(zero.value, 0.0);

        // I(N(m, vI) | N(0, I)) = |m|^2 + d (v - 1)^2 / v
        let m = [0.5, -1.0];
        let v: f64 = 0.3;
        let expected = 1.25 + 2.0 * (v - 1.0).powi(2) / v;
        let mut rng = Streams::new(2).rng("t", 0);
        let est = fisher_mc(
            |x: &[f64]| x.iter().zip(&m).map(|(xi, mi)| -(xi - mi) / v).collect(),
            |x: &[f64]| x.iter().map(|xi| -xi).collect(),
            |r: &mut _| normal_vec(r, 2).iter().zip(&m).map(|(g, mi)| mi + v.sqrt() * g).collect(),
            20_000,
            &mut rng,
        )
        .unwrap();
        assert!(est.within(expected, 3.0), "{est:?} vs {expected}");
    }

    #[test]
    fn fisher_of_mixture_is_finite() {
        let spec = GmmSpec::nine_component(0);
        let mut rng = Streams::new(3).rng("t", 0);
        let est = fisher_mc(
            |x: &[f64]| true_diffused_score(&spec, 0.0, x, Convention::Lebesgue).unwrap(),
            |x: &[f64]| x.iter().map(|v| -v).collect(),
            |r: &mut _| {
                let mut out = vec![0.0; 4];
                spec.draw(r, &mut out);
                out
            },
            2000,
            &mut rng,
        )
        .unwrap();
        assert!(est.value.is_finite() && est.value > 0.0);
        assert!(fisher_mc(|x: &[f64]| x.to_vec(), |x: &[f64]| x.to_vec(), |r: &mut _| normal_vec(r, 1), 1, &mut rng).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let mut rng = Streams::new(5).rng("t", 0);
        let std = GmmSpec::gaussian(vec![0.0, 0.0], 1.0).unwrap();
        let e = kl_mc(&std, 5000, &mut rng).unwrap();
        assert!(e.value.abs() < 1e-12);

        let m = [0.3, -0.7, 1.0];
        let v: f64 = 0.5;
        let spec = GmmSpec::gaussian(m.to_vec(), v).unwrap();
        let d = 3.0;
        let expected = 0.5 * (d * v + m.iter().map(|x| x * x).sum::<f64>() - d - d * v.ln());
        let e = kl_mc(&spec, 50_000, &mut rng).unwrap();
        assert!(e.within(expected, 3.0), "{e:?} vs {expected}");
        assert!(e.value >= -3.0 * e.stderr);
    }

    #[test]
    fn fisher_identity_affine_test_field() {
        let spec = GmmSpec::with_uniform_means(vec![0.3, 0.3, 0.4], 2, 0.05, 2).unwrap();
        let psi = PointwiseScore::new(2, |_t, x| ndarray::arr1(&[0.7 * x[0] - 0.2 * x[1] + 0.1, 0.4 * x[1] + 1.3]));
        for t in [0.1, 0.5, 1.5] {
            let r = fisher_identity_check(&psi, &spec, t, 20_000, &Streams::new(7)).unwrap();
            assert!(r.difference.within(0.0, 3.0), "t = {t}: {r:?}");
        }
    }
}
