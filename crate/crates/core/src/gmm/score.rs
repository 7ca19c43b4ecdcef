use ndarray::{Array2, ArrayView2};

use super::{Dataset, Diffusible, GmmSpec};
use crate::diffusion::Convention;
use crate::error::{Error, Result};
use crate::score::ScoreField;

fn check_point(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::InvalidArgument(format!(
            "point has dimension {}, expected {d}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("point has non-finite entries".into()));
    }
    Ok(())
}

fn score_of<D: Diffusible + ?Sized>(
    source: &D,
    t: f64,
    x: &[f64],
    convention: Convention,
) -> Result<Vec<f64>> {
    check_point(x, source.dim())?;
    let mix = source.diffused(t)?;
    let mut scratch = vec![0.0; mix.components()];
    let mut out = vec![0.0; x.len()];
    mix.score_into(x, &mut scratch, &mut out);
    convention.apply(x, &mut out);
    Ok(out)
}

/// Score of the diffused data law `p_t` (without the factor 2). `t = 0` gives
/// the score of the mixture itself.
pub fn true_diffused_score(spec: &GmmSpec, t: f64, x: &[f64], convention: Convention) -> Result<Vec<f64>> {
    score_of(spec, t, x, convention)
}

/// Score of the diffused empirical measure `p_t^(n)`; requires `t > 0`.
pub fn empirical_diffused_score(
    data: &Dataset,
    t: f64,
    x: &[f64],
    convention: Convention,
) -> Result<Vec<f64>> {
    score_of(data, t, x, convention)
}

/// Log-density of the diffused law with respect to Lebesgue measure.
pub fn log_density_at_time<D: Diffusible + ?Sized>(source: &D, t: f64, x: &[f64]) -> Result<f64> {
    check_point(x, source.dim())?;
    Ok(source.diffused(t)?.log_density(x))
}

/// Analytic score field `factor * grad log p_t` of a spec or dataset, in a
/// given convention. `factor = 2` yields the drift used by the sampler and by
/// the score-matching functionals.
#[derive(Debug, Clone, Copy)]
pub struct MixtureScore<'a, D: ?Sized> {
    pub source: &'a D,
    pub convention: Convention,
    pub factor: f64,
}

impl<'a, D: Diffusible + ?Sized> MixtureScore<'a, D> {
    pub fn new(source: &'a D, convention: Convention, factor: f64) -> Self {
        Self {
            source,
            convention,
            factor,
        }
    }

    /// `2 grad log p~_t`, the model target.
    pub fn model_target(source: &'a D) -> Self {
        Self::new(source, Convention::Gamma, 2.0)
    }
}

impl<D: Diffusible + ?Sized> ScoreField for MixtureScore<'_, D> {
    fn dim(&self) -> usize {
        self.source.dim()
    }

    fn eval(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mix = self.source.diffused(t)?;
        let d = self.dim();
        let mut out = Array2::zeros((xs.nrows(), d));
        let mut scratch = vec![0.0; mix.components()];
        let mut buf = vec![0.0; d];
        let mut xbuf = vec![0.0; d];
        for (mut o, x) in out.rows_mut().into_iter().zip(xs.rows()) {
            for (b, v) in xbuf.iter_mut().zip(x.iter()) {
                *b = *v;
            }
            mix.score_into(&xbuf, &mut scratch, &mut buf);
            self.convention.apply(&xbuf, &mut buf);
            for (oi, bi) in o.iter_mut().zip(&buf) {
                *oi = self.factor * bi;
            }
        }
        Ok(out)
    }
}
