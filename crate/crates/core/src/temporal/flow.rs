//! Optical flow fields and the built-in coarse-to-fine Horn–Schunck estimator.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::datagen::Frame;
use crate::error::{Error, Result};

/// Dense flow from a source frame to a target frame; `u` is horizontal.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f32>,
    pub v: Array2<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { u: Array2::zeros((height, width)), v: Array2::zeros((height, width)) }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.u.dim()
    }

    pub fn sub(&self, other: &FlowField) -> FlowField {
        FlowField { u: &self.u - &other.u, v: &self.v - &other.v }
    }

    /// Stacks as (2, H, W) with channel order (u, v).
    pub fn to_array(&self) -> Array3<f32> {
        let (h, w) = self.dim();
        let mut out = Array3::zeros((2, h, w));
        out.slice_mut(s![0, .., ..]).assign(&self.u);
        out.slice_mut(s![1, .., ..]).assign(&self.v);
        out
    }
}

/// A source of optical flow ν(X, Y), the motion carrying frame `from` onto
/// frame `to` of a clip. Implementations must be shareable across workers.
pub trait FlowEstimator: Send + Sync {
    fn name(&self) -> &str;

    fn flow(&self, frames: &[Frame], from: usize, to: usize) -> Result<FlowField>;
}

pub fn grayscale(frame: &Frame) -> Array2<f32> {
    let (_, h, w) = frame.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * frame[[0, y, x]] + 0.587 * frame[[1, y, x]] + 0.114 * frame[[2, y, x]]
    })
}

/// Coarse-to-fine Horn–Schunck with backward warping between levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HornSchunck {
    pub levels: usize,
    pub iterations: usize,
    /// Smoothness weight α² (intensities in [0, 1]).
    pub alpha2: f32,
}

impl Default for HornSchunck {
    fn default() -> Self {
        Self { levels: 3, iterations: 30, alpha2: 2e-3 }
    }
}

fn check_finite(img: &Array2<f32>, from: usize, to: usize) -> Result<()> {
    if let Some(i) = img.iter().position(|v| !v.is_finite()) {
        return Err(Error::Flow { from, to, reason: format!("non-finite input pixel at index {i}") });
    }
    Ok(())
}

fn downsample(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    let (oh, ow) = ((h / 2).max(1), (w / 2).max(1));
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let (y0, x0) = ((2 * y).min(h - 1), (2 * x).min(w - 1));
        let (y1, x1) = ((2 * y + 1).min(h - 1), (2 * x + 1).min(w - 1));
        0.25 * (img[[y0, x0]] + img[[y0, x1]] + img[[y1, x0]] + img[[y1, x1]])
    })
}

fn sample(img: &Array2<f32>, x: f32, y: f32) -> f32 {
    let (h, w) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Upsamples a flow component to (h, w), rescaling displacements.
fn upsample_flow(f: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (fh, fw) = f.dim();
    let (sy, sx) = (fh as f32 / h as f32, fw as f32 / w as f32);
    let gain = w as f32 / fw as f32;
    Array2::from_shape_fn((h, w), |(y, x)| {
        gain * sample(f, (x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5)
    })
}

fn central_diff(img: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = img.dim();
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        0.5 * (img[[y, (x + 1).min(w - 1)]] - img[[y, x.saturating_sub(1)]])
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        0.5 * (img[[(y + 1).min(h - 1), x]] - img[[y.saturating_sub(1), x]])
    });
    (gx, gy)
}

/// Weighted neighbourhood mean used by the Horn–Schunck update.
fn local_mean(f: &Array2<f32>) -> Array2<f32> {
    let (h, w) = f.dim();
    let at = |y: isize, x: isize| f[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1)) / 6.0
            + (at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) + at(y + 1, x + 1)) / 12.0
    })
}

impl HornSchunck {
    pub fn estimate(&self, x: &Array2<f32>, y: &Array2<f32>) -> FlowField {
        let mut px = vec![x.clone()];
        let mut py = vec![y.clone()];
        for _ in 1..self.levels.max(1) {
            let (h, w) = px.last().unwrap().dim();
            if h < 8 || w < 8 {
                break;
            }
            px.push(downsample(px.last().unwrap()));
            py.push(downsample(py.last().unwrap()));
        }
        let (ch, cw) = px.last().unwrap().dim();
        let mut flow = FlowField::zeros(ch, cw);
        for (lx, ly) in px.iter().zip(&py).rev() {
            let (h, w) = lx.dim();
            if flow.dim() != (h, w) {
                flow = FlowField { u: upsample_flow(&flow.u, h, w), v: upsample_flow(&flow.v, h, w) };
            }
            self.refine(lx, ly, &mut flow);
        }
        flow
    }

    fn refine(&self, x: &Array2<f32>, y: &Array2<f32>, flow: &mut FlowField) {
        let (h, w) = x.dim();
        let warped = Array2::from_shape_fn((h, w), |(r, c)| {
            sample(y, c as f32 + flow.u[[r, c]], r as f32 + flow.v[[r, c]])
        });
        let (gx0, gy0) = central_diff(x);
        let (gx1, gy1) = central_diff(&warped);
        let ix = (&gx0 + &gx1) * 0.5;
        let iy = (&gy0 + &gy1) * 0.5;
        let it = &warped - x;
        let (u0, v0) = (flow.u.clone(), flow.v.clone());
        let mut du = Array2::<f32>::zeros((h, w));
        let mut dv = Array2::<f32>::zeros((h, w));
        for _ in 0..self.iterations {
            // smoothness acts on the total flow u0 + du
            let ubar = local_mean(&(&u0 + &du)) - &u0;
            let vbar = local_mean(&(&v0 + &dv)) - &v0;
            for ((r, c), d) in du.indexed_iter_mut() {
                let (gx, gy) = (ix[[r, c]], iy[[r, c]]);
                let num = gx * ubar[[r, c]] + gy * vbar[[r, c]] + it[[r, c]];
                let den = self.alpha2 + gx * gx + gy * gy;
                *d = ubar[[r, c]] - gx * num / den;
                dv[[r, c]] = vbar[[r, c]] - gy * num / den;
            }
        }
        flow.u = u0 + du;
        flow.v = v0 + dv;
    }
}

impl FlowEstimator for HornSchunck {
    fn name(&self) -> &str {
        "horn_schunck"
    }

    fn flow(&self, frames: &[Frame], from: usize, to: usize) -> Result<FlowField> {
        let (Some(a), Some(b)) = (frames.get(from), frames.get(to)) else {
            return Err(Error::Flow { from, to, reason: format!("clip has only {} frames", frames.len()) });
        };
        if a.dim() != b.dim() {
            return Err(Error::Flow { from, to, reason: "frame shapes differ".into() });
        }
        let (x, y) = (grayscale(a), grayscale(b));
        check_finite(&x, from, to)?;
        check_finite(&y, from, to)?;
        Ok(self.estimate(&x, &y))
    }
}
