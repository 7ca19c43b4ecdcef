//! Right-hand sides of the KL, empirical-gap and discretized-gap bounds.
//! Hidden universal constants are set to 1 and flagged in the reports.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{FisherPair, McConfig};
use crate::diffusion::{forward_into, Convention, NoiseSchedule, TimeMeasure};
use crate::error::{ensure, Error, Result};
use crate::estimate::Estimate;
use crate::gmm::{fisher_mc, true_diffused_score, Dataset, Diffusible, GmmSpec};
use crate::ot::{w2_exact_capped, SampleCloud, DEFAULT_W2_CAP};
use crate::rng::fill_normal;

/// `e^{-2T} KL(mu | gamma) + T eps_s + h I(mu | gamma)`, up to a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlBoundReport {
    pub kl_term: f64,
    pub score_term: f64,
    pub discretization_term: f64,
    pub total: f64,
    pub up_to_constant: bool,
}

pub fn kl_bound_report(eps_s: f64, kl_mu_gamma: f64, fisher_mu_gamma: f64, horizon: f64, h: f64) -> Result<KlBoundReport> {
    ensure(horizon > 0.0, || format!("horizon must be positive, got {horizon}"))?;
    ensure(h >= 0.0, || format!("step must be non-negative, got {h}"))?;
    let kl_term = (-2.0 * horizon).exp() * kl_mu_gamma;
    let score_term = horizon * eps_s;
    let discretization_term = h * fisher_mu_gamma;
    Ok(KlBoundReport {
        kl_term,
        score_term,
        discretization_term,
        total: kl_term + score_term + discretization_term,
        up_to_constant: true,
    })
}

/// `int e^{-2t} dmeasure(t)`.
fn decay_integral(measure: &TimeMeasure) -> f64 {
    measure.integrate(|t| (-2.0 * t).exp())
}

/// `4 D^2 sqrt(log(1/delta) / 2n) int e^{-2t} dmeasure(t)`.
pub fn gap_concentration_term(radius: f64, n: usize, delta: f64, measure: &TimeMeasure) -> Result<f64> {
    ensure(delta > 0.0 && delta < 1.0, || format!("delta must lie in (0, 1), got {delta}"))?;
    ensure(n >= 1, || "dataset size must be at least 1".into())?;
    ensure(radius >= 0.0, || format!("radius must be non-negative, got {radius}"))?;
    Ok(4.0 * radius * radius * ((1.0 / delta).ln() / (2.0 * n as f64)).sqrt() * decay_integral(measure))
}

/// `Delta_hat <= 4 D^2 sqrt(log(1/delta)/2n) int e^{-2t} + 4 int Delta J_t`,
/// where `Delta J_t = I(p_t | gamma) - I(p_t^(n) | gamma)`.
///
/// `Delta_hat` equals the Fisher term plus
/// `4 int e^{-2t} (E_n|Z|^2 - E|Z|^2)` exactly; the report carries that
/// identity's residual as a diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapBoundReport {
    pub delta: f64,
    pub n: usize,
    pub d: usize,
    pub radius: f64,
    pub lhs: Estimate,
    pub concentration_term: f64,
    pub fisher_term: Estimate,
    pub rhs: Estimate,
    /// rhs - lhs on shared draws.
    pub margin: Estimate,
    pub holds: bool,
    pub moment_term: f64,
    pub identity_residual: Estimate,
    pub mc: McConfig,
}

/// The radius `D` is the support radius of the (truncated) mixture.
pub fn gap_bound_report(
    data: &Dataset,
    spec: &GmmSpec,
    measure: &TimeMeasure,
    delta: f64,
    mc: &McConfig,
) -> Result<GapBoundReport> {
    let radius = spec.support_radius();
    let concentration_term = gap_concentration_term(radius, data.n(), delta, measure)?;
    let pair = FisherPair::compute(data, spec, measure, mc)?;
    let lhs = pair.combination(0.0, 0.0, 1.0, -1.0);
    let lhs = Estimate {
        value: pair.combination(0.0, 0.0, 1.0, 0.0).value - pair.combination(0.0, 0.0, 0.0, 1.0).value,
        ..lhs
    };
    let fisher_term = pair.combination(1.0, -1.0, 0.0, 0.0);
    let rhs = Estimate {
        value: fisher_term.value + concentration_term,
        ..fisher_term
    };
    let mut margin = pair.combination(1.0, -1.0, -1.0, 1.0);
    margin.value += concentration_term;
    let moment_term = 4.0 * measure.integrate(|t| (-2.0 * t).exp()) * (data.second_moment() - spec.second_moment());
    let mut identity_residual = pair.combination(-1.0, 1.0, 1.0, -1.0);
    identity_residual.value -= moment_term;
    Ok(GapBoundReport {
        delta,
        n: data.n(),
        d: data.d(),
        radius,
        lhs,
        concentration_term,
        fisher_term,
        rhs,
        holds: margin.value >= -3.0 * margin.stderr,
        margin,
        moment_term,
        identity_residual,
        mc: *mc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationConstants {
    /// `d / (1 - e^{-2h}) + D^2 + d`
    pub k1_sq: f64,
    /// `D^2 + d log(T / h) + h d`
    pub k2_sq: f64,
}

pub fn discretization_constants(d: usize, radius: f64, h: f64, horizon: f64) -> Result<DiscretizationConstants> {
    ensure(h > 0.0 && h <= horizon, || format!("need 0 < h <= T, got h = {h}, T = {horizon}"))?;
    let d = d as f64;
    let r2 = radius * radius;
    Ok(DiscretizationConstants {
        k1_sq: d / (-(-2.0 * h).exp_m1()) + r2 + d,
        k2_sq: r2 + d * (horizon / h).ln() + h * d,
    })
}

/// Terms of the discretized gap bound
/// `(D^2 + K1^2) sqrt(log(1/delta)/2n) + (h/T) I(mu|gamma) + K1^2 log(1/delta)/n
///  + (W^2 + K2 sqrt(h) W) / (T h)`, with `W = W2(p_{h/2}, p_{h/2}^(n))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscretizedGapReport {
    pub d: usize,
    pub n: usize,
    pub radius: f64,
    pub h: f64,
    pub horizon: f64,
    pub delta: f64,
    pub k1_sq: f64,
    pub k2_sq: f64,
    pub w: f64,
    pub w_samples: usize,
    pub fisher_mu_gamma: Estimate,
    pub concentration_summand: f64,
    pub fisher_summand: f64,
    pub deviation_summand: f64,
    pub transport_summand: f64,
    pub total: f64,
    pub up_to_constant: bool,
}

/// `h` is the smallest step of the schedule (the step nearest the data).
/// `W` is the exact W2 between `w_samples` draws of each diffused measure.
pub fn discretized_gap_report(
    data: &Dataset,
    spec: &GmmSpec,
    schedule: &NoiseSchedule,
    delta: f64,
    mc: &McConfig,
    w_samples: usize,
) -> Result<DiscretizedGapReport> {
    mc.validate()?;
    ensure(delta > 0.0 && delta < 1.0, || format!("delta must lie in (0, 1), got {delta}"))?;
    ensure(w_samples >= 1, || "need at least one transport sample".into())?;
    if data.d() != spec.d {
        return Err(Error::InvalidArgument("dataset and mixture dimensions differ".into()));
    }
    let d = spec.d;
    let n = data.n();
    let radius = spec.support_radius();
    let h = schedule.min_step();
    let horizon = schedule.horizon();
    let k = discretization_constants(d, radius, h, horizon)?;

    let streams = mc.streams();
    let t = 0.5 * h;
    let mut pop = Array2::<f64>::zeros((w_samples, d));
    let mut emp = Array2::<f64>::zeros((w_samples, d));
    let mut z = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut rng = streams.rng("w2-population", 0);
    for mut row in pop.rows_mut() {
        spec.draw_origin(&mut rng, &mut z);
        fill_normal(&mut rng, &mut g);
        forward_into(&z, t, &g, row.as_slice_mut().expect("contiguous"));
    }
    let mut rng = streams.rng("w2-empirical", 0);
    for mut row in emp.rows_mut() {
        data.draw_origin(&mut rng, &mut z);
        fill_normal(&mut rng, &mut g);
        forward_into(&z, t, &g, row.as_slice_mut().expect("contiguous"));
    }
    let w = w2_exact_capped(&SampleCloud::new(pop)?, &SampleCloud::new(emp)?, w_samples.max(DEFAULT_W2_CAP))?.w2;

    let mut rng = streams.rng("fisher-mu", 0);
    let fisher_mu_gamma = fisher_mc(
        |x: &[f64]| true_diffused_score(spec, 0.0, x, Convention::Lebesgue).expect("valid point"),
        |x: &[f64]| x.iter().map(|v| -v).collect(),
        |r: &mut _| {
            let mut out = vec![0.0; d];
            spec.draw(r, &mut out);
            out
        },
        mc.samples_per_atom,
        &mut rng,
    )?;

    let log_inv_delta = (1.0 / delta).ln();
    let concentration_summand = (radius * radius + k.k1_sq) * (log_inv_delta / (2.0 * n as f64)).sqrt();
    let fisher_summand = h / horizon * fisher_mu_gamma.value;
    let deviation_summand = k.k1_sq * log_inv_delta / n as f64;
    let transport_summand = (w * w + k.k2_sq.sqrt() * h.sqrt() * w) / (horizon * h);
    Ok(DiscretizedGapReport {
        d,
        n,
        radius,
        h,
        horizon,
        delta,
        k1_sq: k.k1_sq,
        k2_sq: k.k2_sq,
        w,
        w_samples,
        fisher_mu_gamma,
        concentration_summand,
        fisher_summand,
        deviation_summand,
        transport_summand,
        total: concentration_summand + fisher_summand + deviation_summand + transport_summand,
        up_to_constant: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_report_arithmetic() {
        let r = kl_bound_report(0.1, 1.0, 5.0, 2.0, 0.2).unwrap();
        assert!((r.kl_term - 0.018316).abs() < 1e-6);
        assert!((r.score_term - 0.2).abs() < 1e-12);
        assert!((r.discretization_term - 1.0).abs() < 1e-12);
        assert!(r.up_to_constant);
        let zero = kl_bound_report(0.0, 1.0, 5.0, 50.0, 0.0).unwrap();
        assert!(zero.total < 1e-40);
        let twice = kl_bound_report(0.1, 1.0, 5.0, 2.0, 0.4).unwrap();
        assert!((twice.discretization_term - 2.0 * r.discretization_term).abs() < 1e-12);
        assert!(kl_bound_report(0.1, 1.0, 5.0, 0.0, 0.2).is_err());
    }

    #[test]
    fn constants() {
        let k = discretization_constants(4, 1.3, 0.2, 2.0).unwrap();
        let expected = 4.0 / (1.0 - (-0.4f64).exp()) + 1.69 + 4.0;
        assert!((k.k1_sq - expected).abs() < 1e-12);
        assert!((k.k1_sq - 17.82).abs() < 0.01);
        assert!((k.k2_sq - (1.69 + 4.0 * 10f64.ln() + 0.8)).abs() < 1e-12);
        let mut prev = 0.0;
        for h in [1.0, 0.5, 0.2, 0.1, 0.01] {
            let k = discretization_constants(4, 1.3, h, 2.0).unwrap();
            assert!(k.k1_sq > prev);
            prev = k.k1_sq;
        }
        assert!(discretization_constants(4, 1.3, 3.0, 2.0).is_err());
    }

    #[test]
    fn concentration_term() {
        let m = TimeMeasure::new(vec![(0.2, 1.0), (0.4, 1.0)]).unwrap();
        let integral = 0.5 * ((-0.4f64).exp() + (-0.8f64).exp());
        let v = gap_concentration_term(1.3, 1024, 0.05, &m).unwrap();
        let expected = 4.0 * 1.69 * ((20f64).ln() / 2048.0).sqrt() * integral;
        assert!((v - expected).abs() < 1e-14);
        assert!(gap_concentration_term(1.3, 1024, 1.0, &m).is_err());
    }
}
