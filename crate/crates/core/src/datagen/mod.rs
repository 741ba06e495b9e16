//! Deterministic synthetic data for both training stages.
//!
//! Every generator is a pure function of its configuration and seed.

pub mod camera;
pub mod codec;
pub mod io;
pub mod manipulate;
pub mod scene;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use camera::{make_camera_dataset, CameraDataset, CameraModelSpec};
pub use codec::Quality;
pub use manipulate::{make_manipulated_clip, EditOp, ManipulationConfig};
pub use scene::{Scene, SceneConfig};

use crate::error::{invalid, Result};

/// RGB frame, shape (3, H, W), values in [0, 1].
pub type Frame = Array3<f32>;
/// Binary mask, shape (H, W); 1 marks a manipulated pixel.
pub type Mask = Array2<u8>;

pub const MIN_CLIP_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationTag {
    Authentic,
    Splice,
    Edit,
    TemporalInpaint,
}

impl ManipulationTag {
    pub fn name(self) -> &'static str {
        match self {
            ManipulationTag::Authentic => "authentic",
            ManipulationTag::Splice => "splice",
            ManipulationTag::Edit => "edit",
            ManipulationTag::TemporalInpaint => "temporal_inpaint",
        }
    }
}

impl std::str::FromStr for ManipulationTag {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        [Self::Authentic, Self::Splice, Self::Edit, Self::TemporalInpaint]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| invalid!("unknown manipulation tag {s:?}"))
    }
}

/// How a generated clip was made; lets manipulations re-render its scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSource {
    pub scene: Scene,
    pub camera: CameraModelSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
    pub labels: Vec<u8>,
    pub tag: ManipulationTag,
    pub seed: u64,
    pub source: Option<ClipSource>,
    /// Free-form generator settings echoed into the metadata sidecar.
    pub config: serde_json::Value,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.dim().1)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.dim().2)
    }

    pub fn is_authentic(&self) -> bool {
        self.masks.iter().all(|m| m.iter().all(|&v| v == 0))
    }

    /// Checks the structural invariants: length, sizes, label/mask agreement.
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < MIN_CLIP_LEN {
            return Err(invalid!("clip has {} frames, need at least {MIN_CLIP_LEN}", self.frames.len()));
        }
        if self.masks.len() != self.frames.len() || self.labels.len() != self.frames.len() {
            return Err(invalid!("clip frame/mask/label counts disagree"));
        }
        let (h, w) = (self.height(), self.width());
        check_dims(h, w, 32)?;
        for (t, (f, m)) in self.frames.iter().zip(&self.masks).enumerate() {
            if f.dim() != (3, h, w) || m.dim() != (h, w) {
                return Err(invalid!("frame {t} has inconsistent shape"));
            }
            let nonzero = m.iter().any(|&v| v != 0);
            if nonzero != (self.labels[t] == 1) {
                return Err(invalid!("frame {t}: label {} disagrees with mask", self.labels[t]));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_dims(h: usize, w: usize, multiple: usize) -> Result<()> {
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(invalid!("frame size {h}x{w} must be a positive multiple of {multiple}"));
    }
    Ok(())
}

/// splitmix64 of `seed` combined with `salt`.
pub fn sub_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x632be59bd9b4e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Renders and captures an unmanipulated clip.
pub fn make_authentic_clip(cfg: &SceneConfig, camera: &CameraModelSpec, seed: u64) -> Result<VideoClip> {
    check_dims(cfg.height, cfg.width, 32)?;
    if cfg.frames < MIN_CLIP_LEN {
        return Err(invalid!("clip length {} below minimum {MIN_CLIP_LEN}", cfg.frames));
    }
    let scene = Scene::random(cfg, seed);
    Ok(clip_from_scene(scene, camera, cfg.frames, seed))
}

pub fn clip_from_scene(scene: Scene, camera: &CameraModelSpec, frames: usize, seed: u64) -> VideoClip {
    let rendered: Vec<Frame> =
        (0..frames).map(|t| camera.capture(&scene.render(t), sub_seed(seed, 1000 + t as u64))).collect();
    let (h, w) = (scene.height, scene.width);
    VideoClip {
        masks: vec![Mask::zeros((h, w)); frames],
        labels: vec![0; frames],
        frames: rendered,
        tag: ManipulationTag::Authentic,
        seed,
        source: Some(ClipSource { scene, camera: camera.clone() }),
        config: serde_json::json!({ "camera_model": camera.model_id, "frames": frames }),
    }
}

/// Re-encodes every frame at ladder level `quality`; masks and labels are kept.
pub fn reencode_clip(clip: &VideoClip, quality: u32) -> Result<VideoClip> {
    let q = Quality::try_from(quality)?;
    let mut out = clip.clone();
    for f in &mut out.frames {
        *f = codec::reencode_frame(f, q);
    }
    Ok(out)
}

/// Settings for a mixed training/evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipSetConfig {
    pub authentic: usize,
    pub manipulated: usize,
    pub kinds: Vec<ManipulationTag>,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sprites: usize,
    pub camera_models: usize,
    pub area_fraction_range: (f64, f64),
    pub edit_ops: Vec<EditOp>,
}

impl Default for ClipSetConfig {
    fn default() -> Self {
        Self {
            authentic: 100,
            manipulated: 100,
            kinds: vec![ManipulationTag::Splice, ManipulationTag::Edit, ManipulationTag::TemporalInpaint],
            height: 64,
            width: 64,
            frames: 9,
            sprites: 2,
            camera_models: 4,
            area_fraction_range: (0.08, 0.25),
            edit_ops: vec![EditOp::Blur, EditOp::Noise],
        }
    }
}

/// Authentic clips first, then manipulated clips cycling through `kinds`.
pub fn make_clip_set(cfg: &ClipSetConfig, seed: u64) -> Result<Vec<VideoClip>> {
    if cfg.manipulated > 0 && cfg.kinds.is_empty() {
        return Err(invalid!("manipulated clips requested but no manipulation kinds given"));
    }
    if cfg.kinds.contains(&ManipulationTag::Authentic) {
        return Err(invalid!("'authentic' is not a manipulation kind"));
    }
    if cfg.camera_models == 0 {
        return Err(invalid!("need at least one camera model"));
    }
    let scene_cfg = SceneConfig {
        height: cfg.height,
        width: cfg.width,
        frames: cfg.frames,
        sprites: cfg.sprites,
        ..SceneConfig::default()
    };
    let mut clips = Vec::with_capacity(cfg.authentic + cfg.manipulated);
    for i in 0..cfg.authentic + cfg.manipulated {
        let clip_seed = sub_seed(seed, i as u64);
        let camera = CameraModelSpec::for_model(i % cfg.camera_models);
        let base = make_authentic_clip(&scene_cfg, &camera, clip_seed)?;
        if i < cfg.authentic {
            clips.push(base);
            continue;
        }
        let j = i - cfg.authentic;
        let kind = cfg.kinds[j % cfg.kinds.len()];
        let mcfg = ManipulationConfig {
            kind,
            area_fraction_range: cfg.area_fraction_range,
            edit_ops: cfg.edit_ops.clone(),
            splice_source: sub_seed(seed, 0x5011ce + i as u64),
            temporal_independence: true,
        };
        clips.push(make_manipulated_clip(&base, &mcfg, sub_seed(clip_seed, 0x3a41))?);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn authentic_clip_is_valid() {
        let clip = make_authentic_clip(&SceneConfig::default(), &CameraModelSpec::for_model(0), 1).unwrap();
        clip.validate().unwrap();
        assert!(clip.is_authentic());
        assert_eq!(clip.len(), 9);
    }

    #[test]
    fn clip_set_layout() {
        let cfg = ClipSetConfig { authentic: 2, manipulated: 3, ..ClipSetConfig::default() };
        let clips = make_clip_set(&cfg, 5).unwrap();
        let tags: Vec<_> = clips.iter().map(|c| c.tag).collect();
        assert_eq!(
            tags,
            vec![
                ManipulationTag::Authentic,
                ManipulationTag::Authentic,
                ManipulationTag::Splice,
                ManipulationTag::Edit,
                ManipulationTag::TemporalInpaint
            ]
        );
        for c in &clips {
            c.validate().unwrap();
        }
    }

    #[test]
    fn reencode_keeps_masks_and_orders_error() {
        let base = make_authentic_clip(&SceneConfig::default(), &CameraModelSpec::for_model(0), 3).unwrap();
        let clip = make_manipulated_clip(&base, &ManipulationConfig::new(ManipulationTag::Edit), 3).unwrap();
        assert_eq!(reencode_clip(&clip, 0).unwrap(), clip);
        let mae = |q: u32| {
            let r = reencode_clip(&clip, q).unwrap();
            assert_eq!(r.masks, clip.masks);
            assert_eq!(r.labels, clip.labels);
            let total: f64 = r
                .frames
                .iter()
                .zip(&clip.frames)
                .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>())
                .sum();
            total / (clip.len() * 3 * 64 * 64) as f64
        };
        assert!(mae(3) > mae(2));
        assert!(reencode_clip(&clip, 7).is_err());
    }

    #[test]
    fn odd_sizes_rejected() {
        let cfg = SceneConfig { height: 48, ..SceneConfig::default() };
        assert!(make_authentic_clip(&cfg, &CameraModelSpec::for_model(0), 1).is_err());
    }
}
