//! Separable linear resampling (adaptive average pooling, bilinear resize).
//!
//! Both are expressed as `R_h · X · R_wᵀ` with small dense interpolation
//! matrices so they stay differentiable through plain matmuls.

use candle_core::Tensor;

use crate::error::Result;

/// Row-major (output × input) weights of 1-D adaptive average pooling.
///
/// Window `i` spans `[floor(i·n/m), ceil((i+1)·n/m))`; when `m > n` windows
/// overlap and cells are replicated.
pub fn adaptive_pool_weights(input: usize, output: usize) -> Vec<f64> {
    let mut w = vec![0.0; output * input];
    for i in 0..output {
        let start = (i * input) / output;
        let end = ((i + 1) * input).div_ceil(output);
        let len = (end - start) as f64;
        for j in start..end {
            w[i * input + j] = 1.0 / len;
        }
    }
    w
}

/// Row-major (output × input) weights of 1-D bilinear resizing with
/// half-pixel centres (`align_corners = false`) and edge clamping.
pub fn bilinear_weights(input: usize, output: usize) -> Vec<f64> {
    let mut w = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        w[i * input + i0] += 1.0 - frac;
        w[i * input + i1] += frac;
    }
    w
}

fn matrix(weights: Vec<f64>, rows: usize, cols: usize, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(weights, (rows, cols), like.device())?.to_dtype(like.dtype())?)
}

/// Applies `rows` (out_h × H) and `cols` (out_w × W) to the two trailing dims of a 4-D tensor.
fn separable(x: &Tensor, rows: Vec<f64>, out_h: usize, cols: Vec<f64>, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let rh = matrix(rows, out_h, h, x)?;
    let rw = matrix(cols, out_w, w, x)?;
    let y = x.broadcast_matmul(&rw.t()?)?;
    Ok(rh.broadcast_matmul(&y)?)
}

pub fn adaptive_avg_pool2d(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    separable(x, adaptive_pool_weights(h, out_h), out_h, adaptive_pool_weights(w, out_w), out_w)
}

pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    separable(x, bilinear_weights(h, out_h), out_h, bilinear_weights(w, out_w), out_w)
}
