//! Ornstein-Uhlenbeck forward process, noise schedules, time measures and the
//! exponential-integrator backward sampler.
//!
//! The forward process is `dX = -X dt + sqrt(2) dB`, so that
//! `X_t = e^{-t} X_0 + sqrt(1 - e^{-2t}) G`. Scores are reported either with
//! respect to Lebesgue measure or relative to the standard Gaussian; the two
//! differ by `+x`.

mod sampler;
mod schedule;

pub use sampler::ei_backward_sample;
pub use schedule::{
    alpha, cosine_alpha_bar, NoiseSchedule, ScheduleFile, ScheduleKind, TimeMeasure,
    DEFAULT_COSINE_OFFSET, DEFAULT_RATIO_CAP,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference measure a score is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// Gradient of the log-density with respect to Lebesgue measure.
    Lebesgue,
    /// Gradient of the log-density relative to the standard Gaussian:
    /// Lebesgue score plus `x`.
    #[default]
    Gamma,
}

impl Convention {
    /// Convert a Lebesgue score at `x` into this convention, in place.
    #[inline]
    pub fn apply(self, x: &[f64], score: &mut [f64]) {
        if self == Convention::Gamma {
            for (s, xi) in score.iter_mut().zip(x) {
                *s += xi;
            }
        }
    }
}

/// `sqrt(alpha(t)) x0 + sqrt(1 - alpha(t)) g`.
pub fn forward_sample(x0: &[f64], t: f64, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x0.len()];
    forward_into(x0, t, g, &mut out);
    out
}

#[inline]
pub(crate) fn forward_into(x0: &[f64], t: f64, g: &[f64], out: &mut [f64]) {
    let a = (-t).exp();
    let b = (-(-2.0 * t).exp_m1()).sqrt();
    for ((o, &x), &n) in out.iter_mut().zip(x0).zip(g) {
        *o = a * x + b * n;
    }
}

/// Score of the transition density `N(e^{-t} x0, (1 - e^{-2t}) I)` at `x`.
pub fn conditional_score(x: &[f64], x0: &[f64], t: f64, convention: Convention) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "conditional score is singular at t = {t}; need t > 0"
        )));
    }
    if x.len() != x0.len() {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let mut out = vec![0.0; x.len()];
    conditional_score_into(x, x0, t, convention, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn conditional_score_into(
    x: &[f64],
    x0: &[f64],
    t: f64,
    convention: Convention,
    out: &mut [f64],
) {
    let decay = (-t).exp();
    let var = -(-2.0 * t).exp_m1();
    for ((o, &xi), &zi) in out.iter_mut().zip(x).zip(x0) {
        *o = -(xi - decay * zi) / var;
    }
    convention.apply(x, out);
}
