//! Time-conditioned MLP in the epsilon parameterization.
//!
//! The network predicts the forward noise `eps(t, x)`; the score it stands for
//! is `s(t, x) = -2 eps(t, x) / sqrt(1 - alpha(t))`, i.e. twice the Lebesgue
//! score of the diffused law. [`NetScore`] exposes either convention to the
//! estimators and the sampler.

mod checkpoint;
mod mlp;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{alpha, Convention};
use crate::error::{Error, Result};
use crate::rng::Streams;
use crate::score::ScoreField;

/// Below this `1 - alpha(t)` the epsilon-to-score conversion is refused.
pub const MIN_ONE_MINUS_ALPHA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub d: usize,
    pub n_blocks: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    /// Times enter the embedding as `t / horizon`.
    pub horizon: f64,
    /// SiLU between the two time layers.
    pub time_activation: bool,
}

impl MlpArch {
    /// Three blocks of width 32 with a 32-dimensional time embedding.
    pub fn new(d: usize, horizon: f64) -> Self {
        Self {
            d,
            n_blocks: 3,
            hidden: 32,
            time_embed_dim: 32,
            horizon,
            time_activation: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_blocks == 0 || self.hidden == 0 || self.time_embed_dim == 0 {
            return Err(Error::InvalidArgument(format!("all network dimensions must be >= 1: {self:?}")));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        Slots::new(self).len
    }

    pub fn layout(&self) -> Layout {
        Slots::new(self).layout()
    }
}

/// Location of one tensor inside the flat parameter array. Matrices are
/// row-major `rows x cols` and act as `y = W x`; biases have `cols = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSlot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSlot {
    pub fn size(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub slots: Vec<TensorSlot>,
    pub len: usize,
}

impl Layout {
    pub fn get(&self, name: &str) -> Option<&TensorSlot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

/// Flat parameter array with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len {
            return Err(Error::Size(format!(
                "parameter array has {} entries, layout needs {}",
                values.len(),
                layout.len
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(None, format!("parameter {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self {
            values: vec![0.0; other.len()],
            layout: other.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// The entries of the named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.values[s.offset..s.offset + s.size()])
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// `N(0, 2 / fan_in)` weights, zero biases and a zero output layer.
pub fn init_params(arch: &MlpArch, seed: u64) -> Result<ParamVector> {
    init_params_with_output_scale(arch, seed, 0.0)
}

/// As [`init_params`], with the output weights drawn like the others and
/// multiplied by `output_scale` instead of zeroed.
pub fn init_params_with_output_scale(arch: &MlpArch, seed: u64, output_scale: f64) -> Result<ParamVector> {
    arch.validate()?;
    let layout = Arc::new(arch.layout());
    let mut rng = Streams::new(seed).rng("init", 0);
    let mut values = vec![0.0; layout.len];
    for slot in &layout.slots {
        if slot.cols == 1 {
            continue;
        }
        let scale = if slot.name == "output.weight" { output_scale } else { 1.0 };
        if scale == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, (2.0 / slot.cols as f64).sqrt()).expect("positive std");
        for v in &mut values[slot.offset..slot.offset + slot.size()] {
            *v = scale * normal.sample(&mut rng);
        }
    }
    ParamVector::new(values, layout)
}

#[derive(Debug, Clone)]
pub struct ScoreNet {
    arch: MlpArch,
    params: ParamVector,
    slots: Slots,
}

impl ScoreNet {
    pub fn new(arch: MlpArch, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        let slots = Slots::new(&arch);
        if params.len() != slots.len || *params.layout() != slots.layout() {
            return Err(Error::Size(format!(
                "parameter vector of length {} does not match the architecture ({} parameters)",
                params.len(),
                slots.len
            )));
        }
        Ok(Self { arch, params, slots })
    }

    /// Freshly initialized network.
    pub fn init(arch: MlpArch, seed: u64) -> Result<Self> {
        let params = init_params(&arch, seed)?;
        Self::new(arch, params)
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.arch.d
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.params.as_mut_slice()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Size(format!("expected {} parameters, got {}", self.params.len(), values.len())));
        }
        self.params.as_mut_slice().copy_from_slice(values);
        Ok(())
    }

    /// `eps(t, x)` for a single point.
    pub fn eps_forward(&self, t: f64, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let xs = x.insert_axis(ndarray::Axis(0));
        Ok(self.eps_batch(&[t], xs)?.row(0).to_owned())
    }

    /// `eps(times[b], xs[b])` for every row `b`.
    pub fn eps_batch(&self, times: &[f64], xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(times, xs)?;
        mlp::forward(self, times, xs, false).map(|(out, _)| out)
    }

    /// `eps` at one common time for all rows.
    pub fn eps_at(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.eps_batch(&vec![t; xs.nrows()], xs)
    }

    /// `s(t, x) = -2 eps(t, x) / sqrt(1 - alpha(t))`.
    pub fn score(&self, t: f64, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let eps = self.eps_forward(t, x)?;
        score_from_eps(t, eps.view())
    }

    /// Mean weighted squared error `(1/B) sum_b w_b |eps(t_b, x_b) - target_b|^2`
    /// and its gradient with respect to the parameters.
    pub fn backprop_eps_loss(
        &self,
        times: &[f64],
        xs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        weights: Option<&[f64]>,
    ) -> Result<(f64, ParamVector)> {
        let mut grad = ParamVector::zeros_like(&self.params);
        let loss = self.backprop_into(times, xs, targets, weights, grad.as_mut_slice())?;
        Ok((loss, grad))
    }

    /// As [`Self::backprop_eps_loss`], overwriting `grad` in place.
    pub fn backprop_into(
        &self,
        times: &[f64],
        xs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        weights: Option<&[f64]>,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_batch(times, xs)?;
        if xs.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if targets.dim() != xs.dim() {
            return Err(Error::Size(format!("targets {:?} do not match inputs {:?}", targets.dim(), xs.dim())));
        }
        if let Some(w) = weights {
            if w.len() != xs.nrows() {
                return Err(Error::Size(format!("{} weights for a batch of {}", w.len(), xs.nrows())));
            }
        }
        if grad.len() != self.params.len() {
            return Err(Error::Size(format!("gradient buffer of {} for {} parameters", grad.len(), self.params.len())));
        }
        mlp::loss_and_grad(self, times, xs, targets, weights, grad)
    }

    fn check_batch(&self, times: &[f64], xs: ArrayView2<f64>) -> Result<()> {
        if xs.ncols() != self.arch.d {
            return Err(Error::Size(format!("inputs have dimension {}, network expects {}", xs.ncols(), self.arch.d)));
        }
        if times.len() != xs.nrows() {
            return Err(Error::Size(format!("{} times for {} inputs", times.len(), xs.nrows())));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(format!("time must be finite, got {t}")));
        }
        Ok(())
    }
}

/// `-2 eps / sqrt(1 - alpha(t))`.
pub fn score_from_eps(t: f64, eps: ArrayView1<f64>) -> Result<Array1<f64>> {
    let factor = eps_to_score_factor(t)?;
    Ok(eps.mapv(|e| factor * e))
}

fn eps_to_score_factor(t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("score needs t > 0, got {t}")));
    }
    let one_minus_alpha = -(-2.0 * t).exp_m1();
    if one_minus_alpha < MIN_ONE_MINUS_ALPHA {
        return Err(Error::NearSingularTime { t, one_minus_alpha });
    }
    debug_assert!((one_minus_alpha - (1.0 - alpha(t))).abs() < 1e-12);
    Ok(-2.0 / one_minus_alpha.sqrt())
}

/// A network viewed as a [`ScoreField`]: `-2 eps / sqrt(1 - alpha)`, plus `2x`
/// in the Gaussian-relative convention.
#[derive(Debug, Clone, Copy)]
pub struct NetScore<'a> {
    pub net: &'a ScoreNet,
    pub convention: Convention,
}

impl<'a> NetScore<'a> {
    pub fn new(net: &'a ScoreNet, convention: Convention) -> Self {
        Self { net, convention }
    }

    /// The convention of the loss functionals and the sampler.
    pub fn gamma(net: &'a ScoreNet) -> Self {
        Self::new(net, Convention::Gamma)
    }
}

impl ScoreField for NetScore<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn eval(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let factor = eps_to_score_factor(t)?;
        let mut out = self.net.eps_at(t, xs)?;
        out.mapv_inplace(|e| factor * e);
        if self.convention == Convention::Gamma {
            out.scaled_add(2.0, &xs);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Linear {
    pub w: Slot,
    pub b: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Block {
    pub a: Linear,
    pub time: Linear,
    pub b: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Slots {
    pub time1: Linear,
    pub time2: Linear,
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub output: Linear,
    pub len: usize,
    names: Vec<(String, Slot)>,
}

impl Slots {
    fn new(arch: &MlpArch) -> Self {
        let mut offset = 0;
        let mut names = Vec::new();
        let mut linear = |name: String, rows: usize, cols: usize| {
            let w = Slot { offset, rows, cols };
            offset += rows * cols;
            let b = Slot { offset, rows, cols: 1 };
            offset += rows;
            names.push((format!("{name}.weight"), w));
            names.push((format!("{name}.bias"), b));
            Linear { w, b }
        };
        let (e, h, d) = (arch.time_embed_dim, arch.hidden, arch.d);
        let time1 = linear("time.0".into(), e, e);
        let time2 = linear("time.1".into(), e, e);
        let input = linear("input".into(), h, d);
        let blocks = (0..arch.n_blocks)
            .map(|j| Block {
                a: linear(format!("block.{j}.lin_a"), h, h),
                time: linear(format!("block.{j}.time"), h, e),
                b: linear(format!("block.{j}.lin_b"), h, h),
            })
            .collect();
        let output = linear("output".into(), d, h);
        Self {
            time1,
            time2,
            input,
            blocks,
            output,
            len: offset,
            names,
        }
    }

    fn layout(&self) -> Layout {
        Layout {
            slots: self
                .names
                .iter()
                .map(|(name, s)| TensorSlot {
                    name: name.clone(),
                    offset: s.offset,
                    rows: s.rows,
                    cols: s.cols,
                })
                .collect(),
            len: self.len,
        }
    }
}
