//! Detection, localization and camera-model pretraining heads.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::msh::{grid_to_tokens, tokens_to_grid};
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::params::Scope;
use crate::nn::resample::resize_bilinear;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    pub detect_hidden: usize,
    pub localize_hidden: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self { detect_hidden: 64, localize_hidden: 64 }
    }
}

/// conv → SiLU → 2× pool → conv → SiLU → [global mean ⧺ global max] → MLP → sigmoid.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl DetectionHead {
    pub fn new(scope: &mut Scope<'_>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut scope.sub("conv1"), dim, hidden, 3, 1, true)?,
            conv2: Conv2d::new(&mut scope.sub("conv2"), hidden, hidden, 3, 1, true)?,
            fc1: Linear::new(&mut scope.sub("fc1"), 2 * hidden, hidden)?,
            fc2: Linear::new(&mut scope.sub("fc2"), hidden, 1)?,
        })
    }

    /// (B, D, n, m) → logits (B,).
    pub fn logits(&self, g: &Tensor) -> Result<Tensor> {
        let mut h = self.conv1.forward(g)?.silu()?;
        let (_, _, gh, gw) = h.dims4()?;
        if gh >= 2 && gw >= 2 && gh % 2 == 0 && gw % 2 == 0 {
            h = h.avg_pool2d(2)?;
        }
        let h = self.conv2.forward(&h)?.silu()?;
        let pooled = Tensor::cat(&[h.mean((2, 3))?, h.flatten_from(2)?.max(D::Minus1)?], 1)?;
        let z = self.fc1.forward(&pooled)?.silu()?;
        Ok(self.fc2.forward(&z)?.squeeze(1)?)
    }

    /// Scores p_c ∈ (0, 1), one per batch item.
    pub fn forward(&self, g: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(g)?)?)
    }
}

/// Upsamples G to ξ's grid, concatenates ξ, runs a small conv stack, and
/// bilinearly upsamples the single-channel logits ×8.
#[derive(Debug, Clone)]
pub struct LocalizationHead {
    conv1: Conv2d,
    conv2: Conv2d,
    last: Conv2d,
}

impl LocalizationHead {
    pub fn new(scope: &mut Scope<'_>, dim: usize, xi_channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut scope.sub("conv1"), dim + xi_channels, hidden, 3, 1, true)?,
            conv2: Conv2d::new(&mut scope.sub("conv2"), hidden, hidden / 2, 3, 1, true)?,
            last: Conv2d::new(&mut scope.sub("last"), hidden / 2, 1, 1, 1, true)?,
        })
    }

    /// Mask logits (B, H, W).
    pub fn logits(&self, g: &Tensor, xi: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        let (_, _, fh, fw) = xi.dims4()?;
        let (h, w) = target;
        if h != 8 * fh || w != 8 * fw {
            return Err(invalid!("target {h}x{w} is not 8x the feature grid {fh}x{fw}"));
        }
        let up = resize_bilinear(g, fh, fw)?;
        let x = Tensor::cat(&[&up, xi], 1)?;
        let x = self.conv1.forward(&x)?.silu()?;
        let x = self.conv2.forward(&x)?.silu()?;
        let x = self.last.forward(&x)?;
        Ok(resize_bilinear(&x, h, w)?.squeeze(1)?)
    }

    /// m̂ ∈ [0, 1]^{H×W} per batch item.
    pub fn forward(&self, g: &Tensor, xi: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(g, xi, target)?)?)
    }
}

/// Detection score taken as the largest pixel probability of a mask.
pub fn score_from_mask(mask: &[f32]) -> Result<f32> {
    if mask.is_empty() {
        return Err(invalid!("score_from_mask: empty mask"));
    }
    Ok(mask.iter().copied().fold(f32::NEG_INFINITY, f32::max))
}

/// Per-scale camera-model classifiers used only while pretraining.
#[derive(Debug, Clone)]
pub struct PretrainHeads {
    scales: Vec<u32>,
    heads: Vec<(Linear, Linear)>,
    classes: usize,
}

impl PretrainHeads {
    pub fn new(scope: &mut Scope<'_>, dim: usize, hidden: usize, classes: usize, scales: &[u32]) -> Result<Self> {
        let heads = scales
            .iter()
            .map(|k| {
                let mut s = scope.sub(&format!("scale{k}"));
                Ok((Linear::new(&mut s.sub("fc1"), dim, hidden)?, Linear::new(&mut s.sub("fc2"), hidden, classes)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { scales: scales.to_vec(), heads, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn scales(&self) -> &[u32] {
        &self.scales
    }

    /// Grids ψ^(k) (B, D, 2^k, 2^k), one per configured scale → logits (B, C, 2^k, 2^k).
    pub fn forward(&self, grids: &[Tensor]) -> Result<Vec<Tensor>> {
        if grids.len() != self.scales.len() {
            return Err(invalid!("expected {} pooled grids, got {}", self.scales.len(), grids.len()));
        }
        grids
            .iter()
            .zip(&self.scales)
            .zip(&self.heads)
            .map(|((g, &k), (fc1, fc2))| {
                let (_, _, h, w) = g.dims4()?;
                let n = 1usize << k;
                if h != n || w != n {
                    return Err(Error::Shape(format!("scale {k} grid must be {n}x{n}, got {h}x{w}")));
                }
                let z = fc2.forward(&fc1.forward(&grid_to_tokens(g)?)?.silu()?)?;
                tokens_to_grid(&z, h, w)
            })
            .collect()
    }
}
