//! Simulated capture pipelines standing in for distinct camera models.
//!
//! Pipeline: fixed 3x3 filter, gamma, additive Gaussian noise, block-DCT
//! re-encode, 8-bit quantisation. Each stage leaves its own microstructure.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::codec::{quantize_8bit, reencode_frame, Quality};
use super::scene::{Scene, SceneConfig};
use super::{check_dims, sub_seed, Frame};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModelSpec {
    pub model_id: usize,
    pub filter_kernel: [[f32; 3]; 3],
    pub gamma: f32,
    pub noise_std: f32,
    pub quality: Quality,
}

const FILTERS: [[[f32; 3]; 3]; 6] = [
    // box blur
    [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]],
    // horizontal blur
    [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]],
    // sharpen (normalised below)
    [[0.0, -1.0, 0.0], [-1.0, 8.0, -1.0], [0.0, -1.0, 0.0]],
    // vertical blur
    [[0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
    // diagonal blur
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    // cross blur
    [[0.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 0.0]],
];

impl CameraModelSpec {
    /// The deterministic spec of camera model `model_id`. Distinct ids give
    /// distinct (kernel, gamma, noise, quality) tuples.
    pub fn for_model(model_id: usize) -> Self {
        let family = FILTERS[model_id % FILTERS.len()];
        let strength = 0.6 + 0.2 * (model_id / FILTERS.len()) as f32;
        let sum: f32 = family.iter().flatten().sum();
        let mut kernel = [[0.0f32; 3]; 3];
        for (y, row) in kernel.iter_mut().enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                let identity = if x == 1 && y == 1 { 1.0 } else { 0.0 };
                *v = (1.0 - strength) * identity + strength * family[y][x] / sum;
            }
        }
        Self {
            model_id,
            filter_kernel: kernel,
            gamma: [0.85, 1.0, 1.2, 0.92, 1.1][model_id % 5],
            noise_std: [0.006, 0.014, 0.01, 0.02][model_id % 4],
            quality: Quality::LADDER[model_id % 3],
        }
    }

    /// Runs the capture pipeline on a raw scene frame. `noise_seed` picks the
    /// sensor-noise realisation.
    pub fn capture(&self, raw: &Frame, noise_seed: u64) -> Frame {
        let (channels, h, w) = raw.dim();
        let mut out = Array3::<f32>::zeros((channels, h, w));
        let noise = Normal::new(0.0f32, self.noise_std.max(0.0)).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f32;
                    for (ky, row) in self.filter_kernel.iter().enumerate() {
                        let sy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                        for (kx, k) in row.iter().enumerate() {
                            let sx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                            acc += k * raw[[c, sy, sx]];
                        }
                    }
                    let v = acc.clamp(0.0, 1.0).powf(self.gamma);
                    out[[c, y, x]] = v + noise.sample(&mut rng);
                }
            }
        }
        quantize_8bit(&mut out);
        reencode_frame(&out, self.quality)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraDataset {
    pub frames: Vec<Frame>,
    pub labels: Vec<usize>,
    pub specs: Vec<CameraModelSpec>,
    pub seed: u64,
}

impl CameraDataset {
    pub fn num_classes(&self) -> usize {
        self.specs.len()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.specs.len()];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }
}

/// Frames grouped by model. Scene content for frame `i` of every model is
/// drawn from a seed that never sees the model id.
pub fn make_camera_dataset(
    num_models: usize,
    frames_per_model: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<CameraDataset> {
    if num_models < 2 {
        return Err(invalid!("need ≥2 camera models, got {num_models}"));
    }
    check_dims(size.0, size.1, 32)?;
    let specs: Vec<_> = (0..num_models).map(CameraModelSpec::for_model).collect();
    let scene_cfg = SceneConfig { height: size.0, width: size.1, frames: 1, ..SceneConfig::default() };
    let mut frames = Vec::with_capacity(num_models * frames_per_model);
    let mut labels = Vec::with_capacity(num_models * frames_per_model);
    for spec in &specs {
        for i in 0..frames_per_model {
            // scene index runs over all frames so every model sees different content
            let scene_index = (spec.model_id * frames_per_model + i) as u64;
            let scene = Scene::random(&scene_cfg, sub_seed(seed, scene_index));
            let raw = scene.render(0);
            frames.push(spec.capture(&raw, sub_seed(sub_seed(seed, scene_index), 0xca3e)));
            labels.push(spec.model_id);
        }
    }
    Ok(CameraDataset { frames, labels, specs, seed })
}
