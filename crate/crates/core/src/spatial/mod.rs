//! Spatial modalities: constrained-filter forensic residual features F_t and
//! RGB context features C_t.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::conv::conv2d;
use crate::nn::fir::{FirRecipe, FirTrunk};
use crate::nn::layers::Conv2d;
use crate::nn::params::{ParamStore, Scope};

pub const FILTER_SIZE: usize = 5;
const TAPS: usize = FILTER_SIZE * FILTER_SIZE;
const CENTER: usize = TAPS / 2;
const DEGENERATE_SUM: f64 = 1e-8;

pub const FIR_WIDTHS: [usize; 5] = [24, 48, 64, 128, 256];
pub const FIR_STRIDES: [usize; 4] = [2, 2, 2, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialConfig {
    pub n_filters: usize,
    pub context_channels: usize,
    /// Stem width followed by the widths of the three stride-2 context blocks.
    pub context_widths: [usize; 4],
    pub recipe: FirRecipe,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self { n_filters: 6, context_channels: 64, context_widths: [16, 24, 32, 48], recipe: FirRecipe::default() }
    }
}

/// Projects one 5×5 kernel in place: centre 0, off-centre taps rescaled to
/// sum 1. A kernel whose off-centre sum is (numerically) zero is reset to
/// the uniform predictor; returns whether that happened.
pub fn project_kernel(k: &mut [f64]) -> bool {
    debug_assert_eq!(k.len(), TAPS);
    k[CENTER] = 0.0;
    let sum: f64 = k.iter().sum();
    let degenerate = !sum.is_finite() || sum.abs() < DEGENERATE_SUM;
    if degenerate {
        k.fill(1.0 / (TAPS - 1) as f64);
        k[CENTER] = 0.0;
    } else {
        k.iter_mut().for_each(|v| *v /= sum);
    }
    degenerate
}

/// Rounds a projected kernel to f32 and folds the rounding error of the
/// off-centre sum into the smallest-magnitude tap, whose spacing is finest.
fn round_to_f32(k: &mut [f64]) {
    k.iter_mut().for_each(|v| *v = *v as f32 as f64);
    let j = (0..TAPS).filter(|&i| i != CENTER).min_by(|&a, &b| k[a].abs().total_cmp(&k[b].abs())).expect("taps");
    for _ in 0..3 {
        let rest: f64 = k.iter().sum::<f64>() - k[j];
        let target = (1.0 - rest) as f32 as f64;
        if target == k[j] {
            break;
        }
        k[j] = target;
    }
}

/// Projects every 5×5 slice of an (N_f, C, 5, 5) bank. Returns the projected
/// bank and the number of kernels that had to be reinitialised.
pub fn project_constrained(weights: &Tensor) -> Result<(Tensor, usize)> {
    let dims = weights.dims().to_vec();
    if dims.len() != 4 || dims[2] != FILTER_SIZE || dims[3] != FILTER_SIZE {
        return Err(invalid!("constrained filter bank must be (N, C, 5, 5), got {dims:?}"));
    }
    let mut values = weights.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let single = weights.dtype() == candle_core::DType::F32;
    let mut reinit = 0;
    for (i, kernel) in values.chunks_mut(TAPS).enumerate() {
        if project_kernel(kernel) {
            log::warn!("constrained kernel {i} had zero off-centre sum; reinitialised");
            reinit += 1;
        }
        if single {
            round_to_f32(kernel);
        }
    }
    let t = Tensor::from_vec(values, dims, weights.device())?.to_dtype(weights.dtype())?;
    Ok((t, reinit))
}

/// Largest deviation of a bank from the constraint (|centre| and |sum − 1|).
pub fn constraint_violation(weights: &Tensor) -> Result<f64> {
    let values = weights.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    Ok(values
        .chunks(TAPS)
        .map(|k| {
            let sum: f64 = k.iter().enumerate().filter(|(i, _)| *i != CENTER).map(|(_, v)| v).sum();
            k[CENTER].abs().max((sum - 1.0).abs())
        })
        .fold(0.0, f64::max))
}

/// Bank of constrained prediction filters Φ; the layer applies δ − Φ.
#[derive(Debug, Clone)]
pub struct ConstrainedConv {
    weight: Tensor,
    name: String,
}

impl ConstrainedConv {
    pub fn new(scope: &mut Scope<'_>, n_filters: usize, channels: usize) -> Result<Self> {
        let name = scope.full_name("weight");
        let mut rng = scope.rng("weight");
        let mut values: Vec<f64> = (0..n_filters * channels * TAPS).map(|_| rng.random_range(0.0..1.0)).collect();
        for kernel in values.chunks_mut(TAPS) {
            project_kernel(kernel);
        }
        let weight = scope.from_values("weight", &[n_filters, channels, FILTER_SIZE, FILTER_SIZE], values)?;
        Ok(Self { weight, name })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn param_name(&self) -> &str {
        &self.name
    }

    /// Re-imposes the constraint on the stored weights; returns reinitialised kernel count.
    pub fn project(&self, store: &ParamStore) -> Result<usize> {
        let (projected, reinit) = project_constrained(&self.weight.detach())?;
        store.set(&self.name, &projected)?;
        Ok(reinit)
    }

    /// δ − Φ for every slice.
    pub fn residual_kernel(&self) -> Result<Tensor> {
        let dims = self.weight.dims();
        let mut delta = vec![0.0f64; TAPS];
        delta[CENTER] = 1.0;
        let delta = Tensor::from_vec(delta, (1, 1, FILTER_SIZE, FILTER_SIZE), self.weight.device())?
            .to_dtype(self.weight.dtype())?;
        Ok(delta.broadcast_sub(&self.weight)?.reshape(dims)?)
    }

    /// (B, C, H, W) → (B, N_f, H, W). Borders are replicate-padded so a
    /// constant frame maps to zero everywhere.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pad = FILTER_SIZE / 2;
        let padded = x.pad_with_same(2, pad, pad)?.pad_with_same(3, pad, pad)?;
        Ok(conv2d(&padded, &self.residual_kernel()?, 1, 0)?)
    }
}

fn check_divisible(x: &Tensor, factor: usize) -> Result<()> {
    let (_, _, h, w) = x.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(invalid!("frame size {h}x{w} is not divisible by {factor}"));
    }
    Ok(())
}

/// F_t = h_f(I_t ⊛ (δ − Φ)).
#[derive(Debug, Clone)]
pub struct SpatialResidual {
    pub constrained: ConstrainedConv,
    trunk: FirTrunk,
}

impl SpatialResidual {
    pub fn new(scope: &mut Scope<'_>, cfg: &SpatialConfig) -> Result<Self> {
        let constrained = ConstrainedConv::new(&mut scope.sub("constrained"), cfg.n_filters, 3)?;
        let blocks: Vec<_> = FIR_WIDTHS[1..].iter().copied().zip(FIR_STRIDES).collect();
        let trunk = FirTrunk::new(&mut scope.sub("trunk"), cfg.n_filters, FIR_WIDTHS[0], &blocks, cfg.recipe)?;
        Ok(Self { constrained, trunk })
    }

    pub fn residual(&self, x: &Tensor) -> Result<Tensor> {
        self.constrained.forward(x)
    }

    /// (B, 3, H, W) → (B, 256, H/8, W/8).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_divisible(x, 8)?;
        self.trunk.forward(&self.residual(x)?)
    }

    pub fn out_channels(&self) -> usize {
        self.trunk.out_channels()
    }
}

/// C_t = h_c(I_t). Context blocks skip squeeze-excitation so every output
/// cell depends only on its receptive field.
#[derive(Debug, Clone)]
pub struct ContextModule {
    trunk: FirTrunk,
    head: Conv2d,
}

impl ContextModule {
    pub fn new(scope: &mut Scope<'_>, cfg: &SpatialConfig) -> Result<Self> {
        let [stem, a, b, c] = cfg.context_widths;
        let recipe = FirRecipe { se_ratio: 0.0, ..cfg.recipe };
        let trunk = FirTrunk::new(&mut scope.sub("trunk"), 3, stem, &[(a, 2), (b, 2), (c, 2)], recipe)?;
        let head = Conv2d::new(&mut scope.sub("head"), c, cfg.context_channels, 1, 1, true)?;
        Ok(Self { trunk, head })
    }

    /// (B, 3, H, W) → (B, D_c, H/8, W/8).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_divisible(x, 8)?;
        self.head.forward(&self.trunk.forward(x)?)
    }

    pub fn out_channels(&self) -> usize {
        self.head.out_channels()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn all_ones_kernel_projects_to_uniform() {
        let mut k = vec![1.0; 25];
        assert!(!project_kernel(&mut k));
        assert_eq!(k[12], 0.0);
        assert!(k.iter().enumerate().filter(|(i, _)| *i != 12).all(|(_, v)| (*v - 1.0 / 24.0).abs() < 1e-15));
    }

    #[test]
    fn projection_is_idempotent() {
        let mut k: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin() + 1.2).collect();
        project_kernel(&mut k);
        let once = k.clone();
        project_kernel(&mut k);
        for (a, b) in once.iter().zip(&k) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn large_f32_kernels_keep_the_sum_after_rounding() {
        let v: Vec<f32> = (0..150).map(|i| ((i as f32 * 1.7).sin() * 300.0) + 0.01 * i as f32).collect();
        let bank = Tensor::from_vec(v, (6, 1, 5, 5), &Device::Cpu).unwrap();
        let (p, _) = project_constrained(&bank).unwrap();
        assert_eq!(p.dtype(), DType::F32);
        assert!(constraint_violation(&p).unwrap() <= 1e-6);
    }

    #[test]
    fn zero_sum_kernel_is_reinitialised() {
        // twelve +1 taps, twelve -1 taps, non-zero centre
        let mut k: Vec<f64> = (0..25).map(|i| if i < 12 { 1.0 } else { -1.0 }).collect();
        k[12] = 5.0;
        assert!(project_kernel(&mut k));
        let bank = Tensor::from_vec(k, (1, 1, 5, 5), &Device::Cpu).unwrap();
        assert!(constraint_violation(&bank).unwrap() < 1e-12);
    }

    #[test]
    fn constant_frames_have_zero_residual() {
        let mut ps = ParamStore::new(DType::F32, 4);
        let m = SpatialResidual::new(&mut ps.root(), &SpatialConfig::default()).unwrap();
        for c in [0.0f32, 0.3, 1.0] {
            let x = Tensor::full(c, (1, 3, 16, 24), &Device::Cpu).unwrap();
            assert!(max_abs(&m.residual(&x).unwrap()) <= 1e-6);
        }
    }

    #[test]
    fn residual_ignores_constant_offsets() {
        let mut ps = ParamStore::new(DType::F64, 4);
        let m = SpatialResidual::new(&mut ps.root(), &SpatialConfig::default()).unwrap();
        let x = Tensor::rand(0f64, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let a = m.residual(&x).unwrap();
        let b = m.residual(&(&x + 0.25).unwrap()).unwrap();
        assert!(max_abs(&(a - b).unwrap()) < 1e-12);
    }

    #[test]
    fn projection_hook_restores_constraint() {
        let mut ps = ParamStore::new(DType::F32, 4);
        let m = SpatialResidual::new(&mut ps.root(), &SpatialConfig::default()).unwrap();
        let w = m.constrained.weight();
        let perturbed = (w + Tensor::rand(0f32, 0.1, w.dims(), &Device::Cpu).unwrap()).unwrap();
        ps.set(m.constrained.param_name(), &perturbed).unwrap();
        assert!(constraint_violation(m.constrained.weight()).unwrap() > 1e-3);
        m.constrained.project(&ps).unwrap();
        assert!(constraint_violation(m.constrained.weight()).unwrap() < 1e-6);
    }

    #[test]
    fn output_shapes() {
        let mut ps = ParamStore::new(DType::F32, 4);
        let cfg = SpatialConfig::default();
        let f = SpatialResidual::new(&mut ps.root().sub("f"), &cfg).unwrap();
        let c = ContextModule::new(&mut ps.root().sub("c"), &cfg).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
        assert_eq!(f.forward(&x).unwrap().dims(), &[2, 256, 8, 8]);
        assert_eq!(c.forward(&x).unwrap().dims(), &[2, 64, 8, 8]);
        let zero = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(max_abs(&c.forward(&zero).unwrap()).is_finite());
        let odd = Tensor::zeros((1, 3, 60, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(f.forward(&odd).is_err());
        assert!(c.forward(&odd).is_err());
    }

    /// Input rows/cols that can influence output cell `o`, from the layer list
    /// of the context trunk (3×3 convs with padding 1; 1×1 convs are pointwise).
    fn context_support(o: usize) -> (isize, isize) {
        let strides = [2isize, 2, 2, 1]; // output-side first: three blocks, then the stem
        let (mut a, mut b) = (o as isize, o as isize);
        for s in strides {
            a = a * s - 1;
            b = b * s + 1;
        }
        (a, b)
    }

    #[test]
    fn context_changes_stay_inside_receptive_field() {
        let mut ps = ParamStore::new(DType::F64, 9);
        let c = ContextModule::new(&mut ps.root(), &SpatialConfig::default()).unwrap();
        let x = Tensor::rand(0f64, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let patch = Tensor::rand(0f64, 1.0, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let (py, px) = (28usize, 36usize);
        let y = x.slice_assign(&[0..1, 0..3, py..py + 4, px..px + 4], &patch).unwrap();
        let diff = (c.forward(&x).unwrap() - c.forward(&y).unwrap()).unwrap().abs().unwrap();
        let diff = diff.max(1).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let mut touched = 0;
        for (i, row) in diff.iter().enumerate() {
            for (j, &d) in row.iter().enumerate() {
                let (r0, r1) = context_support(i);
                let (c0, c1) = context_support(j);
                let overlaps = r0 <= (py + 3) as isize && r1 >= py as isize && c0 <= (px + 3) as isize && c1 >= px as isize;
                if d > 0.0 {
                    touched += 1;
                    assert!(overlaps, "cell ({i},{j}) changed outside its receptive field");
                }
            }
        }
        assert!(touched > 0);
    }
}
