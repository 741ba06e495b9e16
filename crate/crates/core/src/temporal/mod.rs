//! Temporal modalities: microstructure residuals between neighbouring frames
//! and optical-flow residuals.

pub mod flo;
pub mod flow;

use candle_core::Tensor;
use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

pub use flo::{CachedFlow, PrecomputedFlow};
pub use flow::{FlowEstimator, FlowField, HornSchunck};

use crate::datagen::Frame;
use crate::error::{invalid, Result};
use crate::nn::fir::{FirRecipe, FirTrunk};
use crate::nn::layers::Conv2d;
use crate::nn::params::Scope;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    /// Stem width, then the output widths of the first three (stride-2) blocks;
    /// the fourth block keeps the last width at stride 1.
    pub widths: [usize; 4],
    pub recipe: FirRecipe,
    /// Apply a learned 1×1 fusion conv to the concatenated temporal residuals.
    pub fusion_conv: bool,
    pub flow_order: FlowOrder,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self { widths: [8, 16, 32, 64], recipe: FirRecipe::default(), fusion_conv: false, flow_order: FlowOrder::Final }
    }
}

/// g_r: a residual 3×3 stem, conv/norm/SiLU, then four FIR blocks (÷8).
#[derive(Debug, Clone)]
pub struct TemporalTrunk {
    pre: Conv2d,
    trunk: FirTrunk,
}

impl TemporalTrunk {
    pub fn new(scope: &mut Scope<'_>, cfg: &TemporalConfig) -> Result<Self> {
        let [stem, a, b, c] = cfg.widths;
        let pre = Conv2d::new(&mut scope.sub("pre"), 3, 3, 3, 1, true)?;
        let trunk = FirTrunk::new(&mut scope.sub("trunk"), 3, stem, &[(a, 2), (b, 2), (c, 2), (c, 1)], cfg.recipe)?;
        Ok(Self { pre, trunk })
    }

    /// (B, 3, H, W) → (B, 64, H/8, W/8).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(invalid!("frame size {h}x{w} is not divisible by 8"));
        }
        let x = (x + self.pre.forward(x)?)?;
        self.trunk.forward(&x)
    }

    pub fn out_channels(&self) -> usize {
        self.trunk.out_channels()
    }
}

/// T_t from trunk outputs of I_{t−1}, I_t, I_{t+1}: forward half then backward half.
pub fn temporal_residuals(prev: &Tensor, cur: &Tensor, next: &Tensor) -> Result<Tensor> {
    if prev.dims() != cur.dims() || next.dims() != cur.dims() {
        return Err(invalid!(
            "temporal window shapes differ: {:?} / {:?} / {:?}",
            prev.dims(),
            cur.dims(),
            next.dims()
        ));
    }
    Ok(Tensor::cat(&[(cur - prev)?, (cur - next)?], 1)?)
}

/// Frame index `t + offset`, replicating the clip ends.
pub fn window_index(len: usize, t: usize, offset: isize) -> usize {
    (t as isize + offset).clamp(0, len as isize - 1) as usize
}

/// Argument order of ν in the residual equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowOrder {
    /// ν(I_{t−1}, I_t) − ν(I_{t−2}, I_{t−1}) and ν(I_{t+1}, I_t) − ν(I_{t+2}, I_{t+1}).
    #[default]
    Final,
    /// ν(I_t, I_{t−1}) − ν(I_{t−1}, I_{t−2}) and ν(I_t, I_{t+1}) − ν(I_{t+1}, I_{t+2}).
    Legacy,
}

/// The (from, to) frame pairs whose flows make up O_t, in the order
/// [forward minuend, forward subtrahend, backward minuend, backward subtrahend].
pub fn flow_pairs(len: usize, t: usize, order: FlowOrder) -> [(usize, usize); 4] {
    let i = |o| window_index(len, t, o);
    let pairs = [(i(-1), i(0)), (i(-2), i(-1)), (i(1), i(0)), (i(2), i(1))];
    match order {
        FlowOrder::Final => pairs,
        FlowOrder::Legacy => pairs.map(|(a, b)| (b, a)),
    }
}

/// ν for a pair, with ν(X, X) short-circuited to zero when the indices coincide.
pub fn pair_flow(frames: &[Frame], from: usize, to: usize, nu: &dyn FlowEstimator) -> Result<FlowField> {
    if from == to {
        let (_, h, w) = frames[from].dim();
        return Ok(FlowField::zeros(h, w));
    }
    nu.flow(frames, from, to)
}

/// Full-resolution O_t, shape (4, H, W): forward (u, v) then backward (u, v).
pub fn flow_residuals(frames: &[Frame], t: usize, nu: &dyn FlowEstimator, order: FlowOrder) -> Result<Array3<f32>> {
    if t >= frames.len() {
        return Err(invalid!("frame index {t} outside clip of {} frames", frames.len()));
    }
    let dims = frames[0].dim();
    if frames.iter().any(|f| f.dim() != dims) {
        return Err(invalid!("clip frames have mismatched shapes"));
    }
    let [a, b, c, d] = flow_pairs(frames.len(), t, order);
    let get = |(from, to)| pair_flow(frames, from, to, nu);
    let forward = get(a)?.sub(&get(b)?);
    let backward = get(c)?.sub(&get(d)?);
    let (_, h, w) = dims;
    let mut out = Array3::zeros((4, h, w));
    out.slice_mut(s![0..2, .., ..]).assign(&forward.to_array());
    out.slice_mut(s![2..4, .., ..]).assign(&backward.to_array());
    Ok(out)
}

/// Non-overlapping `factor`×`factor` average pooling of a (C, H, W) array.
pub fn avg_pool(x: &Array3<f32>, factor: usize) -> Result<Array3<f32>> {
    let (c, h, w) = x.dim();
    if h % factor != 0 || w % factor != 0 {
        return Err(invalid!("{h}x{w} is not divisible by {factor}"));
    }
    let norm = 1.0 / (factor * factor) as f32;
    Ok(Array3::from_shape_fn((c, h / factor, w / factor), |(ch, y, x0)| {
        x.slice(s![ch, y * factor..(y + 1) * factor, x0 * factor..(x0 + 1) * factor]).sum() * norm
    }))
}
