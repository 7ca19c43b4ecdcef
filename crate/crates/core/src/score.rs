//! Pluggable score functions.
//!
//! A [`ScoreField`] maps a diffusion time and a batch of points (one per row)
//! to a batch of score vectors. Every estimator and the backward sampler work
//! against this trait, so analytic oracles, trained networks and test stubs are
//! interchangeable.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub trait ScoreField: Sync {
    fn dim(&self) -> usize;

    /// Scores at every row of `xs`, all at time `t`.
    fn eval(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn eval_point(&self, t: f64, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let xs = x.insert_axis(ndarray::Axis(0));
        let out = self.eval(t, xs)?;
        Ok(out.row(0).to_owned())
    }
}

impl<S: ScoreField + ?Sized> ScoreField for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        (**self).eval(t, xs)
    }
}

impl<S: ScoreField + ?Sized + Send> ScoreField for Box<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        (**self).eval(t, xs)
    }
}

/// The zero field.
#[derive(Debug, Clone, Copy)]
pub struct ZeroScore {
    pub dim: usize,
}

impl ScoreField for ZeroScore {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, _t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros(xs.raw_dim()))
    }
}

/// A score given point by point through a closure.
pub struct PointwiseScore<F> {
    dim: usize,
    f: F,
}

impl<F> PointwiseScore<F>
where
    F: Fn(f64, ArrayView1<f64>) -> Array1<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ScoreField for PointwiseScore<F>
where
    F: Fn(f64, ArrayView1<f64>) -> Array1<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(xs.raw_dim());
        for (mut o, x) in out.rows_mut().into_iter().zip(xs.rows()) {
            let v = (self.f)(t, x);
            if v.len() != self.dim {
                return Err(Error::InvalidArgument(format!(
                    "score closure returned {} entries, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            o.assign(&v);
        }
        Ok(out)
    }
}

/// `factor * inner + offset`.
pub struct Affine<S> {
    pub inner: S,
    pub factor: f64,
    pub offset: Option<Array1<f64>>,
}

impl<S: ScoreField> Affine<S> {
    pub fn scaled(inner: S, factor: f64) -> Self {
        Self {
            inner,
            factor,
            offset: None,
        }
    }

    pub fn shifted(inner: S, offset: Array1<f64>) -> Self {
        Self {
            inner,
            factor: 1.0,
            offset: Some(offset),
        }
    }
}

impl<S: ScoreField> ScoreField for Affine<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = self.inner.eval(t, xs)?;
        if self.factor != 1.0 {
            out.mapv_inplace(|v| v * self.factor);
        }
        if let Some(c) = &self.offset {
            out += c;
        }
        Ok(out)
    }
}
