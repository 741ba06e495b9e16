//! Full network: four forensic modalities fused into ξ, the scale hierarchy,
//! and the detection/localization heads. Also the pretraining network built
//! from the spatial trunk alone.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::heads::{DetectionHead, HeadsConfig, LocalizationHead, PretrainHeads};
use crate::msh::{pool_to_scale_permissive, Msh, MshConfig, Routing};
use crate::nn::layers::Conv2d;
use crate::nn::params::ParamStore;
use crate::spatial::{ContextModule, SpatialConfig, SpatialResidual};
use crate::temporal::{temporal_residuals, TemporalConfig, TemporalTrunk};

pub const FLOW_CHANNELS: usize = 4;

/// Parameter-name prefix of the spatial residual trunk.
pub const SPATIAL_PREFIX: &str = "spatial";
/// Parameter-name prefix of the pretraining classifier heads.
pub const PRETRAIN_PREFIX: &str = "pretrain";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub spatial: SpatialConfig,
    pub temporal: TemporalConfig,
    pub msh: MshConfig,
    pub heads: HeadsConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.msh.validate()?;
        if self.heads.localize_hidden < 2 || self.heads.detect_hidden == 0 {
            return Err(invalid!("head widths must be positive (localize_hidden ≥ 2)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFlag {
    NoSpatialResidual,
    NoRgbContext,
    NoTemporalResidual,
    NoOptflowResidual,
    StandardTransformer,
    NoMsh,
    FineToCoarse,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 7] = [
        Self::NoSpatialResidual,
        Self::NoRgbContext,
        Self::NoTemporalResidual,
        Self::NoOptflowResidual,
        Self::StandardTransformer,
        Self::NoMsh,
        Self::FineToCoarse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoSpatialResidual => "no_spatial_residual",
            Self::NoRgbContext => "no_rgb_context",
            Self::NoTemporalResidual => "no_temporal_residual",
            Self::NoOptflowResidual => "no_optflow_residual",
            Self::StandardTransformer => "standard_transformer",
            Self::NoMsh => "no_msh",
            Self::FineToCoarse => "fine_to_coarse",
        }
    }
}

impl fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| invalid!("unknown ablation flag {s:?}"))
    }
}

/// A validated set of ablation flags.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AblationFlag>", into = "Vec<AblationFlag>")]
pub struct Ablation {
    flags: Vec<AblationFlag>,
}

impl Ablation {
    pub fn new(flags: impl IntoIterator<Item = AblationFlag>) -> Result<Self> {
        let mut flags: Vec<_> = flags.into_iter().collect();
        flags.sort();
        flags.dedup();
        let a = Self { flags };
        let has = |f| a.has(f);
        if has(AblationFlag::StandardTransformer) && has(AblationFlag::FineToCoarse) {
            return Err(invalid!("contradictory ablations: standard_transformer and fine_to_coarse"));
        }
        if has(AblationFlag::NoMsh) && (has(AblationFlag::StandardTransformer) || has(AblationFlag::FineToCoarse)) {
            return Err(invalid!("contradictory ablations: no_msh cannot be combined with another hierarchy flag"));
        }
        let modalities = [
            AblationFlag::NoSpatialResidual,
            AblationFlag::NoRgbContext,
            AblationFlag::NoTemporalResidual,
            AblationFlag::NoOptflowResidual,
        ];
        if modalities.iter().all(|&f| has(f)) {
            return Err(invalid!("ablations remove every input modality"));
        }
        Ok(a)
    }

    /// Parses a comma-separated flag list; empty input is the identity.
    pub fn parse(list: &str) -> Result<Self> {
        Self::new(list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?)
    }

    pub fn has(&self, flag: AblationFlag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn flags(&self) -> &[AblationFlag] {
        &self.flags
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn routing(&self) -> Routing {
        if self.has(AblationFlag::StandardTransformer) {
            Routing::Standard
        } else if self.has(AblationFlag::NoMsh) {
            Routing::NoMsh
        } else if self.has(AblationFlag::FineToCoarse) {
            Routing::FineToCoarse
        } else {
            Routing::CoarseToFine
        }
    }
}

impl TryFrom<Vec<AblationFlag>> for Ablation {
    type Error = Error;

    fn try_from(v: Vec<AblationFlag>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Ablation> for Vec<AblationFlag> {
    fn from(a: Ablation) -> Self {
        a.flags
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.flags.iter().map(|f| f.name()).collect();
        f.write_str(&names.join(","))
    }
}

/// One batch of analysis windows centred on frame t.
///
/// `prev`, `cur`, `next`: (B, 3, H, W); `flow`: O_t pooled to (B, 4, H/8, W/8).
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub prev: Tensor,
    pub cur: Tensor,
    pub next: Tensor,
    pub flow: Tensor,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.cur.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_size(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.cur.dims4()?;
        Ok((h, w))
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// p_c, (B,).
    pub score: Tensor,
    /// m̂, (B, H, W).
    pub mask: Tensor,
}

/// Channel ranges of F, C, T and O inside ξ.
pub fn modality_ranges(cfg: &ModelConfig) -> [(usize, usize); 4] {
    let f = *crate::spatial::FIR_WIDTHS.last().expect("widths");
    let c = cfg.spatial.context_channels;
    let t = 2 * cfg.temporal.widths[3];
    [(0, f), (f, f + c), (f + c, f + c + t), (f + c + t, f + c + t + FLOW_CHANNELS)]
}

pub struct Model {
    cfg: ModelConfig,
    ablation: Ablation,
    pub spatial: SpatialResidual,
    context: ContextModule,
    temporal: TemporalTrunk,
    fusion: Option<Conv2d>,
    msh: Msh,
    detect: DetectionHead,
    localize: LocalizationHead,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, ablation: Ablation) -> Result<Self> {
        cfg.validate()?;
        let mut root = store.root();
        let spatial = SpatialResidual::new(&mut root.sub(SPATIAL_PREFIX), &cfg.spatial)?;
        let context = ContextModule::new(&mut root.sub("context"), &cfg.spatial)?;
        let temporal = TemporalTrunk::new(&mut root.sub("temporal"), &cfg.temporal)?;
        let t_width = 2 * temporal.out_channels();
        let fusion = if cfg.temporal.fusion_conv {
            Some(Conv2d::new(&mut root.sub("temporal_fusion"), t_width, t_width, 1, 1, true)?)
        } else {
            None
        };
        let xi = spatial.out_channels() + context.out_channels() + t_width + FLOW_CHANNELS;
        let msh = Msh::new(&mut root.sub("msh"), xi, &cfg.msh, ablation.routing())?;
        let d = cfg.msh.embed_dim;
        let detect = DetectionHead::new(&mut root.sub("detect"), d, cfg.heads.detect_hidden)?;
        let localize = LocalizationHead::new(&mut root.sub("localize"), d, xi, cfg.heads.localize_hidden)?;
        Ok(Self { cfg: cfg.clone(), ablation, spatial, context, temporal, fusion, msh, detect, localize })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn ablation(&self) -> &Ablation {
        &self.ablation
    }

    pub fn xi_channels(&self) -> usize {
        modality_ranges(&self.cfg)[3].1
    }

    /// ξ = F ⧺ C ⧺ T ⧺ O with ablated modalities zeroed; (B, D_ξ, H/8, W/8).
    pub fn fuse(&self, batch: &WindowBatch) -> Result<Tensor> {
        let (h, w) = batch.frame_size()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(invalid!("frame size {h}x{w} is not divisible by 32"));
        }
        let b = batch.len();
        let (fh, fw) = (h / 8, w / 8);
        if batch.flow.dims() != [b, FLOW_CHANNELS, fh, fw] {
            return Err(Error::Shape(format!("flow residuals {:?}, expected {:?}", batch.flow.dims(), [b, FLOW_CHANNELS, fh, fw])));
        }
        let ranges = modality_ranges(&self.cfg);
        let zeros = |r: (usize, usize)| Tensor::zeros((b, r.1 - r.0, fh, fw), batch.cur.dtype(), batch.cur.device());
        let f = if self.ablation.has(AblationFlag::NoSpatialResidual) {
            zeros(ranges[0])?
        } else {
            self.spatial.forward(&batch.cur)?
        };
        let c = if self.ablation.has(AblationFlag::NoRgbContext) {
            zeros(ranges[1])?
        } else {
            self.context.forward(&batch.cur)?
        };
        let t = if self.ablation.has(AblationFlag::NoTemporalResidual) {
            zeros(ranges[2])?
        } else {
            let all = self.temporal.forward(&Tensor::cat(&[&batch.prev, &batch.cur, &batch.next], 0)?)?;
            let t = temporal_residuals(&all.narrow(0, 0, b)?, &all.narrow(0, b, b)?, &all.narrow(0, 2 * b, b)?)?;
            match &self.fusion {
                Some(conv) => conv.forward(&t)?,
                None => t,
            }
        };
        let o = if self.ablation.has(AblationFlag::NoOptflowResidual) {
            zeros(ranges[3])?
        } else {
            batch.flow.clone()
        };
        Ok(Tensor::cat(&[&f, &c, &t, &o], 1)?)
    }

    pub fn forward_logits(&self, batch: &WindowBatch) -> Result<(Tensor, Tensor)> {
        let xi = self.fuse(batch)?;
        let out = self.msh.forward(&xi)?;
        let score = self.detect.logits(&out.head_input)?;
        let mask = self.localize.logits(&out.head_input, &xi, batch.frame_size()?)?;
        Ok((score, mask))
    }

    pub fn forward(&self, batch: &WindowBatch) -> Result<ModelOutput> {
        let (score, mask) = self.forward_logits(batch)?;
        Ok(ModelOutput { score: candle_nn::ops::sigmoid(&score)?, mask: candle_nn::ops::sigmoid(&mask)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub scales: Vec<u32>,
    pub lambdas: Vec<f64>,
    pub hidden: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            scales: crate::losses::PRETRAIN_SCALES.to_vec(),
            lambdas: crate::losses::PRETRAIN_LAMBDAS.to_vec(),
            hidden: 64,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.len() != self.lambdas.len() {
            return Err(invalid!("pretraining needs one λ per scale ({} scales, {} weights)", self.scales.len(), self.lambdas.len()));
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0)) {
            return Err(invalid!("pretraining weights must be positive"));
        }
        Ok(())
    }
}

/// Spatial trunk plus per-scale camera-model classifiers.
pub struct PretrainModel {
    pub spatial: SpatialResidual,
    heads: PretrainHeads,
    cfg: PretrainConfig,
}

impl PretrainModel {
    pub fn new(store: &mut ParamStore, spatial: &SpatialConfig, cfg: &PretrainConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut root = store.root();
        let trunk = SpatialResidual::new(&mut root.sub(SPATIAL_PREFIX), spatial)?;
        let heads =
            PretrainHeads::new(&mut root.sub(PRETRAIN_PREFIX), trunk.out_channels(), cfg.hidden, classes, &cfg.scales)?;
        Ok(Self { spatial: trunk, heads, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.cfg
    }

    pub fn classes(&self) -> usize {
        self.heads.classes()
    }

    /// ψ^(k) of F_t for every pretraining scale.
    pub fn grids(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let f = self.spatial.forward(x)?;
        self.cfg.scales.iter().map(|&k| pool_to_scale_permissive(&f, k)).collect()
    }

    /// θ^(k) logits, (B, C, 2^k, 2^k) per scale.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.heads.forward(&self.grids(x)?)
    }
}

/// Builds a tiny model for tests.
#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        msh: MshConfig { scales: vec![0, 1, 2, 3], embed_dim: 16, heads: 2, layers_per_scale: 1, flat_layers: 1, mlp_ratio: 2 },
        heads: HeadsConfig { detect_hidden: 8, localize_hidden: 8 },
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn batch(b: usize, h: usize, w: usize) -> WindowBatch {
        let d = Device::Cpu;
        let r = |s| Tensor::rand(0f32, 1.0, (b, 3, h, w), &d).unwrap().affine(1.0, s).unwrap();
        WindowBatch {
            prev: r(0.0),
            cur: r(0.01),
            next: r(0.02),
            flow: Tensor::randn(0f32, 0.1, (b, 4, h / 8, w / 8), &d).unwrap(),
        }
    }

    #[test]
    fn fused_width_and_channel_layout() {
        let cfg = tiny_config();
        assert_eq!(modality_ranges(&cfg), [(0, 256), (256, 320), (320, 448), (448, 452)]);
        let mut ps = ParamStore::new(DType::F32, 1);
        let model = Model::new(&mut ps, &cfg, Ablation::default()).unwrap();
        let b = batch(2, 64, 64);
        let xi = model.fuse(&b).unwrap();
        assert_eq!(xi.dims(), &[2, 452, 8, 8]);
        let f = model.spatial.forward(&b.cur).unwrap();
        let diff = (xi.narrow(1, 0, 256).unwrap() - f).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn modality_ablation_zeroes_channels() {
        let cfg = tiny_config();
        let mut ps = ParamStore::new(DType::F32, 1);
        let abl = Ablation::parse("no_optflow_residual").unwrap();
        let model = Model::new(&mut ps, &cfg, abl).unwrap();
        let xi = model.fuse(&batch(1, 64, 64)).unwrap();
        assert_eq!(xi.dims(), &[1, 452, 8, 8]);
        let o = xi.narrow(1, 448, 4).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(o.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn contradictory_flags_rejected() {
        assert!(Ablation::parse("standard_transformer,fine_to_coarse").is_err());
        assert!(Ablation::parse("no_msh,fine_to_coarse").is_err());
        assert!(Ablation::parse("bogus").is_err());
        assert!(Ablation::parse("").unwrap().is_empty());
        assert_eq!(Ablation::parse("").unwrap().routing(), Routing::CoarseToFine);
    }

    #[test]
    fn outputs_match_frame_size() {
        let cfg = tiny_config();
        let mut ps = ParamStore::new(DType::F32, 1);
        let model = Model::new(&mut ps, &cfg, Ablation::default()).unwrap();
        let out = model.forward(&batch(2, 64, 96)).unwrap();
        assert_eq!(out.score.dims(), &[2]);
        assert_eq!(out.mask.dims(), &[2, 64, 96]);
        assert!(model.forward(&batch(1, 48, 64)).is_err());
    }

    #[test]
    fn pretrain_logit_grids() {
        let mut ps = ParamStore::new(DType::F32, 1);
        let m = PretrainModel::new(&mut ps, &SpatialConfig::default(), &PretrainConfig::default(), 4).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let out = m.forward(&x).unwrap();
        let dims: Vec<_> = out.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 4, 8, 8], vec![2, 4, 16, 16], vec![2, 4, 32, 32]]);
    }
}
