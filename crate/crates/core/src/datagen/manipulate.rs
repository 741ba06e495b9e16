//! Region manipulations applied to authentic clips.
//!
//! A single static region (rectangle or ellipse) is chosen per clip. Ground
//! truth is the set of region pixels whose value actually changed, so masks
//! never claim pixels the manipulation left untouched.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::camera::CameraModelSpec;
use super::codec::quantize_8bit;
use super::scene::{Scene, SceneConfig, Shape};
use super::{sub_seed, Frame, ManipulationTag, Mask, VideoClip};
use crate::error::{invalid, Result};

const MAX_REGION_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Blur,
    Sharpen,
    Contrast,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationConfig {
    pub kind: ManipulationTag,
    pub area_fraction_range: (f64, f64),
    pub edit_ops: Vec<EditOp>,
    /// Seed of the donor clip for splices.
    pub splice_source: u64,
    /// Regenerate the region content independently for every frame.
    pub temporal_independence: bool,
}

impl ManipulationConfig {
    pub fn new(kind: ManipulationTag) -> Self {
        Self {
            kind,
            area_fraction_range: (0.05, 0.2),
            edit_ops: vec![EditOp::Blur],
            splice_source: 0,
            temporal_independence: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_fraction_range;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(invalid!("area_fraction_range must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"));
        }
        if self.kind == ManipulationTag::Authentic {
            return Err(invalid!("manipulation kind cannot be 'authentic'"));
        }
        if self.kind == ManipulationTag::Edit && self.edit_ops.is_empty() {
            return Err(invalid!("edit manipulation needs at least one edit op"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Region {
    shape: Shape,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

impl Region {
    fn random(rng: &mut ChaCha8Rng, height: usize, width: usize, target: f64) -> Self {
        let shape = if rng.random_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse };
        let area = target * (height * width) as f64;
        // ellipse covers pi/4 of its bounding box
        let box_area = if shape == Shape::Ellipse { area * 4.0 / std::f64::consts::PI } else { area };
        let aspect = rng.random_range(0.6..1.6);
        let w = (box_area * aspect).sqrt().min(width as f64);
        let h = (box_area / w).min(height as f64);
        let x0 = rng.random_range(0.0..=(width as f64 - w).max(0.0));
        let y0 = rng.random_range(0.0..=(height as f64 - h).max(0.0));
        Self { shape, x0, y0, w, h }
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (dx, dy) = ((px - self.x0) / self.w, (py - self.y0) / self.h);
        if !(0.0..1.0).contains(&dx) || !(0.0..1.0).contains(&dy) {
            return false;
        }
        match self.shape {
            Shape::Rectangle => true,
            Shape::Ellipse => (2.0 * dx - 1.0).powi(2) + (2.0 * dy - 1.0).powi(2) <= 1.0,
        }
    }

    fn mask(&self, height: usize, width: usize) -> Mask {
        Array2::from_shape_fn((height, width), |(y, x)| self.contains(x, y) as u8)
    }
}

fn fraction(mask: &Mask) -> f64 {
    mask.iter().filter(|&&v| v != 0).count() as f64 / mask.len() as f64
}

/// Applies `cfg.kind` to an authentic clip. The region is drawn from `seed`;
/// all frames are manipulated and labelled 1.
pub fn make_manipulated_clip(base: &VideoClip, cfg: &ManipulationConfig, seed: u64) -> Result<VideoClip> {
    cfg.validate()?;
    if !base.is_authentic() {
        return Err(invalid!("base clip must be authentic (all masks zero)"));
    }
    base.validate()?;
    let (h, w) = (base.height(), base.width());
    let (lo, hi) = cfg.area_fraction_range;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0x7e610));
    for attempt in 0..MAX_REGION_ATTEMPTS {
        // aim inside the range so rasterisation and unchanged pixels keep us in bounds
        let target = rng.random_range(lo + 0.2 * (hi - lo)..hi - 0.05 * (hi - lo));
        let region = Region::random(&mut rng, h, w, target);
        let region_mask = region.mask(h, w);
        let f = fraction(&region_mask);
        if f < lo || f > hi {
            continue;
        }
        let frames = render_manipulation(base, cfg, &region_mask, sub_seed(seed, attempt as u64))?;
        let masks: Vec<Mask> = frames
            .iter()
            .zip(&base.frames)
            .map(|(m, b)| changed_pixels(m, b, &region_mask))
            .collect();
        if masks.iter().all(|m| (lo..=hi).contains(&fraction(m))) {
            let mut config = base.config.clone();
            if let Some(obj) = config.as_object_mut() {
                obj.insert("manipulation".into(), serde_json::to_value(cfg).unwrap_or_default());
            }
            return Ok(VideoClip {
                labels: vec![1; frames.len()],
                frames,
                masks,
                tag: cfg.kind,
                seed,
                source: base.source.clone(),
                config,
            });
        }
    }
    Err(invalid!(
        "could not place a {} region with area fraction in ({lo}, {hi}) on a {h}x{w} frame after {MAX_REGION_ATTEMPTS} attempts",
        cfg.kind.name()
    ))
}

fn changed_pixels(manipulated: &Frame, base: &Frame, region: &Mask) -> Mask {
    Array2::from_shape_fn(region.dim(), |(y, x)| {
        let differs = (0..3).any(|c| manipulated[[c, y, x]] != base[[c, y, x]]);
        (region[[y, x]] != 0 && differs) as u8
    })
}

fn composite(base: &Frame, content: &Frame, region: &Mask) -> Frame {
    let mut out = base.clone();
    for ((c, y, x), v) in out.indexed_iter_mut() {
        if region[[y, x]] != 0 {
            *v = content[[c, y, x]];
        }
    }
    out
}

fn render_manipulation(base: &VideoClip, cfg: &ManipulationConfig, region: &Mask, seed: u64) -> Result<Vec<Frame>> {
    let (h, w) = (base.height(), base.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cfg.kind {
        ManipulationTag::Splice => {
            let base_model = base.source.as_ref().map_or(0, |s| s.camera.model_id);
            let donor_camera = CameraModelSpec::for_model(base_model + 1 + rng.random_range(0..3usize));
            let scene_cfg = SceneConfig { height: h, width: w, frames: base.len(), ..SceneConfig::default() };
            let donor = Scene::random(&scene_cfg, cfg.splice_source);
            Ok(base
                .frames
                .iter()
                .enumerate()
                .map(|(t, frame)| {
                    let content = donor_camera.capture(&donor.render(t), sub_seed(cfg.splice_source, t as u64));
                    composite(frame, &content, region)
                })
                .collect())
        }
        ManipulationTag::Edit => {
            let op = cfg.edit_ops[rng.random_range(0..cfg.edit_ops.len())];
            Ok(base
                .frames
                .iter()
                .enumerate()
                .map(|(t, frame)| {
                    let noise_seed = if cfg.temporal_independence { sub_seed(seed, t as u64) } else { seed };
                    composite(frame, &apply_edit(frame, op, noise_seed), region)
                })
                .collect())
        }
        ManipulationTag::TemporalInpaint => {
            let fill_scene = match &base.source {
                Some(src) => src.scene.clone(),
                None => Scene::random(
                    &SceneConfig { height: h, width: w, frames: 1, sprites: 0, ..SceneConfig::default() },
                    seed,
                ),
            };
            let camera = base.source.as_ref().map_or_else(|| CameraModelSpec::for_model(0), |s| s.camera.clone());
            // same texture statistics as the surrounding background, new phases
            let fixed = fill_scene.background.rephased(&mut rng);
            Ok(base
                .frames
                .iter()
                .enumerate()
                .map(|(t, frame)| {
                    let texture = if cfg.temporal_independence {
                        fill_scene.background.rephased(&mut rng)
                    } else {
                        fixed.clone()
                    };
                    let raw = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                        fill_scene.background_with(&texture, x, y, c).clamp(0.0, 1.0)
                    });
                    let content = camera.capture(&raw, sub_seed(seed, 0x1a7 + t as u64));
                    composite(frame, &content, region)
                })
                .collect())
        }
        ManipulationTag::Authentic => Err(invalid!("manipulation kind cannot be 'authentic'")),
    }
}

fn convolve3(frame: &Frame, kernel: [[f32; 3]; 3]) -> Frame {
    let (channels, h, w) = frame.dim();
    Array3::from_shape_fn((channels, h, w), |(c, y, x)| {
        let mut acc = 0.0;
        for (ky, row) in kernel.iter().enumerate() {
            let sy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
            for (kx, k) in row.iter().enumerate() {
                let sx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                acc += k * frame[[c, sy, sx]];
            }
        }
        acc
    })
}

/// Whole-frame edit; the caller composites it into the region.
pub fn apply_edit(frame: &Frame, op: EditOp, seed: u64) -> Frame {
    let mut out = match op {
        EditOp::Blur => {
            let k = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]].map(|r| r.map(|v: f32| v / 16.0));
            convolve3(&convolve3(frame, k), k)
        }
        EditOp::Sharpen => {
            let k = [[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]];
            convolve3(frame, k)
        }
        EditOp::Contrast => {
            let mean = frame.mean().unwrap_or(0.5);
            frame.mapv(|v| mean + 1.6 * (v - mean))
        }
        EditOp::Noise => {
            let normal = Normal::new(0.0f32, 0.04).expect("finite std");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            frame.mapv(|v| v + normal.sample(&mut rng))
        }
    };
    quantize_8bit(&mut out);
    out
}
