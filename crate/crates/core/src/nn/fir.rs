//! Fused inverted-residual (FIR) blocks and the trunks built from them.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{ChannelNorm, Conv2d, SqueezeExcite};
use super::params::Scope;
use crate::error::Result;

/// Block recipe shared by every trunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirRecipe {
    pub expansion: usize,
    /// Squeeze width as a fraction of the block input width; 0 disables SE.
    pub se_ratio: f64,
}

impl Default for FirRecipe {
    fn default() -> Self {
        Self { expansion: 4, se_ratio: 0.25 }
    }
}

/// 3×3 expand conv (carrying the stride) → norm → SiLU → SE → 1×1 project → norm,
/// with an identity shortcut when shapes allow.
#[derive(Debug, Clone)]
pub struct FirBlock {
    expand: Conv2d,
    norm1: ChannelNorm,
    se: Option<SqueezeExcite>,
    project: Conv2d,
    norm2: ChannelNorm,
    shortcut: bool,
}

impl FirBlock {
    pub fn new(scope: &mut Scope<'_>, cin: usize, cout: usize, stride: usize, recipe: FirRecipe) -> Result<Self> {
        let hidden = cin * recipe.expansion.max(1);
        let squeeze = (cin as f64 * recipe.se_ratio).round() as usize;
        Ok(Self {
            expand: Conv2d::new(&mut scope.sub("expand"), cin, hidden, 3, stride, false)?,
            norm1: ChannelNorm::new(&mut scope.sub("norm1"), hidden)?,
            se: if recipe.se_ratio > 0.0 {
                Some(SqueezeExcite::new(&mut scope.sub("se"), hidden, squeeze.max(1))?)
            } else {
                None
            },
            project: Conv2d::new(&mut scope.sub("project"), hidden, cout, 1, 1, false)?,
            norm2: ChannelNorm::new(&mut scope.sub("norm2"), cout)?,
            shortcut: cin == cout && stride == 1,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.norm1.forward(&self.expand.forward(x)?)?.silu()?;
        if let Some(se) = &self.se {
            h = se.forward(&h)?;
        }
        let h = self.norm2.forward(&self.project.forward(&h)?)?;
        if self.shortcut {
            Ok((h + x)?)
        } else {
            Ok(h)
        }
    }
}

/// Stem conv → norm → SiLU, then FIR blocks.
#[derive(Debug, Clone)]
pub struct FirTrunk {
    stem: Conv2d,
    stem_norm: ChannelNorm,
    blocks: Vec<FirBlock>,
    out_channels: usize,
    stride: usize,
}

impl FirTrunk {
    /// `blocks` lists `(out_channels, stride)` per block.
    pub fn new(
        scope: &mut Scope<'_>,
        cin: usize,
        stem: usize,
        blocks: &[(usize, usize)],
        recipe: FirRecipe,
    ) -> Result<Self> {
        let stem_conv = Conv2d::new(&mut scope.sub("stem"), cin, stem, 3, 1, false)?;
        let stem_norm = ChannelNorm::new(&mut scope.sub("stem_norm"), stem)?;
        let mut width = stem;
        let mut built = Vec::with_capacity(blocks.len());
        for (i, &(cout, stride)) in blocks.iter().enumerate() {
            built.push(FirBlock::new(&mut scope.sub(&format!("block{i}")), width, cout, stride, recipe)?);
            width = cout;
        }
        Ok(Self {
            stem: stem_conv,
            stem_norm,
            blocks: built,
            out_channels: width,
            stride: blocks.iter().map(|b| b.1).product(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem_norm.forward(&self.stem.forward(x)?)?.silu()?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        Ok(h)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Total spatial downsampling factor.
    pub fn stride(&self) -> usize {
        self.stride
    }
}
