//! Lossy re-encoding by 8x8 block-DCT coefficient quantisation.

use serde::{Deserialize, Serialize};

use super::Frame;
use crate::error::{invalid, Error};

const BLOCK: usize = 8;

/// Discrete quality ladder, indexed 0 (lossless) .. 3 (strong).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Lossless,
    Light,
    Medium,
    Strong,
}

impl Quality {
    pub const LADDER: [Quality; 4] = [Quality::Lossless, Quality::Light, Quality::Medium, Quality::Strong];

    pub fn level(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Lossless => "lossless",
            Quality::Light => "light",
            Quality::Medium => "medium",
            Quality::Strong => "strong",
        }
    }

    /// Quantiser step for the DC coefficient, in units of full-scale intensity.
    fn base_step(self) -> Option<f32> {
        match self {
            Quality::Lossless => None,
            Quality::Light => Some(0.012),
            Quality::Medium => Some(0.035),
            Quality::Strong => Some(0.09),
        }
    }
}

impl TryFrom<u32> for Quality {
    type Error = Error;
    fn try_from(level: u32) -> Result<Self, Error> {
        Quality::LADDER
            .get(level as usize)
            .copied()
            .ok_or_else(|| invalid!("unknown quality level {level} (ladder is 0..=3)"))
    }
}

impl std::str::FromStr for Quality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        if let Ok(level) = s.parse::<u32>() {
            return Quality::try_from(level);
        }
        Quality::LADDER
            .iter()
            .copied()
            .find(|q| q.name() == s)
            .ok_or_else(|| invalid!("unknown quality level {s:?}"))
    }
}

fn dct_basis() -> [[f32; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    for (k, row) in m.iter_mut().enumerate() {
        let scale = if k == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = (scale
                * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * BLOCK) as f64).cos())
                as f32;
        }
    }
    m
}

/// Snap intensities to the 8-bit grid.
pub fn quantize_8bit(frame: &mut Frame) {
    frame.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

/// Re-encodes a frame at `quality`. Lossless returns an exact copy; every
/// other level rounds the result to 8 bits. Frame sides must be multiples of 8.
pub fn reencode_frame(frame: &Frame, quality: Quality) -> Frame {
    let Some(step) = quality.base_step() else {
        return frame.clone();
    };
    let basis = dct_basis();
    let (channels, h, w) = frame.dim();
    let mut out = frame.clone();
    let mut block = [[0.0f32; BLOCK]; BLOCK];
    let mut tmp = [[0.0f32; BLOCK]; BLOCK];
    for c in 0..channels {
        for by in (0..h - h % BLOCK).step_by(BLOCK) {
            for bx in (0..w - w % BLOCK).step_by(BLOCK) {
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = frame[[c, by + y, bx + x]];
                    }
                }
                // forward: C = B X Bᵀ
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        tmp[i][j] = (0..BLOCK).map(|n| basis[i][n] * block[n][j]).sum();
                    }
                }
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        let coeff: f32 = (0..BLOCK).map(|n| tmp[i][n] * basis[j][n]).sum();
                        let q = step * (1.0 + 0.5 * (i + j) as f32);
                        block[i][j] = (coeff / q).round() * q;
                    }
                }
                // inverse: X = Bᵀ C B
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        tmp[i][j] = (0..BLOCK).map(|k| basis[k][i] * block[k][j]).sum();
                    }
                }
                for y in 0..BLOCK {
                    for x in 0..BLOCK {
                        let v: f32 = (0..BLOCK).map(|k| tmp[y][k] * basis[k][x]).sum();
                        out[[c, by + y, bx + x]] = v;
                    }
                }
            }
        }
    }
    quantize_8bit(&mut out);
    out
}
