//! Multi-scale hierarchical transformer: fused features are pooled onto
//! 2^k × 2^k grids and analysed scale by scale, each scale seeded with the
//! upsampled output of the previous one.

pub mod encoder;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

pub use encoder::{EncoderBlock, EncoderStack, MultiHeadAttention};

use crate::error::{invalid, Error, Result};
use crate::nn::layers::Linear;
use crate::nn::params::Scope;
use crate::nn::resample::{adaptive_avg_pool2d, adaptive_pool_weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MshConfig {
    /// Scale exponents k, coarsest first; grid at scale k is 2^k × 2^k.
    pub scales: Vec<u32>,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers_per_scale: usize,
    /// Depth of the single stack used by the flat ablations.
    pub flat_layers: usize,
    pub mlp_ratio: usize,
}

impl Default for MshConfig {
    fn default() -> Self {
        Self { scales: vec![2, 3, 4, 5], embed_dim: 256, heads: 4, layers_per_scale: 2, flat_layers: 8, mlp_ratio: 2 }
    }
}

impl MshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(invalid!("msh.scales must not be empty"));
        }
        if self.scales.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(invalid!("msh.scales must be consecutive and increasing, got {:?}", self.scales));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(invalid!("msh.embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        Ok(())
    }

    pub fn k_max(&self) -> u32 {
        *self.scales.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Per-scale stacks, coarse to fine, with upsampling connectors.
    #[default]
    CoarseToFine,
    /// Per-scale stacks, fine to coarse, with 2× average-pool connectors.
    FineToCoarse,
    /// One flat stack over the un-pooled fused cells; positional table fixed
    /// at the finest grid size.
    Standard,
    /// All scales pooled, upsampled to the finest grid, concatenated and
    /// merged, then one flat stack.
    NoMsh,
}

/// Adaptive average pooling of a (B, D, H, W) map onto a 2^k × 2^k grid.
/// Refuses grids finer than the map.
pub fn pool_to_scale(x: &Tensor, k: u32) -> Result<Tensor> {
    let n = 1usize << k;
    let (_, _, h, w) = x.dims4()?;
    if n > h || n > w {
        return Err(invalid!("scale {k} needs a {n}x{n} grid but the feature map is only {h}x{w}"));
    }
    adaptive_avg_pool2d(x, n, n)
}

/// Like [`pool_to_scale`] but replicates cells when the grid is finer than the map.
pub fn pool_to_scale_permissive(x: &Tensor, k: u32) -> Result<Tensor> {
    let n = 1usize << k;
    adaptive_avg_pool2d(x, n, n)
}

fn separable(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    // m: (out, in) applied to both trailing axes
    Ok(m.broadcast_matmul(&x.broadcast_matmul(&m.t()?)?)?)
}

fn matrix(values: Vec<f64>, rows: usize, cols: usize, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, (rows, cols), like.device())?.to_dtype(like.dtype())?)
}

/// ρ: places cell (i, j) at (2i, 2j) of a grid twice the size; zeros elsewhere.
pub fn zero_interleave(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h != w {
        return Err(Error::Shape(format!("zero_interleave expects a square grid, got {h}x{w}")));
    }
    let mut u = vec![0.0; 2 * h * h];
    for i in 0..h {
        u[(2 * i) * h + i] = 1.0;
    }
    separable(x, &matrix(u, 2 * h, h, x)?)
}

/// Convolution with κ = outer([½, 1, ½], [½, 1, ½]) and zero padding.
pub fn bilinear_kernel_conv(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h != w {
        return Err(Error::Shape(format!("kernel conv expects a square grid, got {h}x{w}")));
    }
    let mut k = vec![0.0; h * h];
    for i in 0..h {
        k[i * h + i] = 1.0;
        if i > 0 {
            k[i * h + i - 1] = 0.5;
        }
        if i + 1 < h {
            k[i * h + i + 1] = 0.5;
        }
    }
    separable(x, &matrix(k, h, h, x)?)
}

/// upsample2×(X) = ρ(X) ⊛ κ.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    bilinear_kernel_conv(&zero_interleave(x)?)
}

/// Non-overlapping 2×2 average pooling.
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 || h != w {
        return Err(Error::Shape(format!("downsample2 expects an even square grid, got {h}x{w}")));
    }
    separable(x, &matrix(adaptive_pool_weights(h, h / 2), h / 2, h, x)?)
}

/// B^(k) = upsample2×(G^(k−1) + ψ^(k−1)) + ψ^(k).
pub fn connect_scales(g_prev: &Tensor, psi_prev: &Tensor, psi_cur: &Tensor) -> Result<Tensor> {
    check_connector_shapes(&[g_prev, psi_prev], &[psi_cur])?;
    Ok((upsample2(&(g_prev + psi_prev)?)? + psi_cur)?)
}

/// Fine-to-coarse connector: B^(k) = avgpool2×(G^(k+1) + ψ^(k+1)) + ψ^(k).
pub fn connect_scales_down(g_prev: &Tensor, psi_prev: &Tensor, psi_cur: &Tensor) -> Result<Tensor> {
    check_connector_shapes(&[psi_cur], &[g_prev, psi_prev])?;
    Ok((downsample2(&(g_prev + psi_prev)?)? + psi_cur)?)
}

fn check_connector_shapes(small: &[&Tensor], large: &[&Tensor]) -> Result<()> {
    let (b, d, h, w) = small[0].dims4()?;
    let ok = small.iter().all(|t| t.dims() == [b, d, h, w]) && large.iter().all(|t| t.dims() == [b, d, 2 * h, 2 * w]);
    if !ok {
        let dims: Vec<_> = small.iter().chain(large).map(|t| t.dims().to_vec()).collect();
        return Err(Error::Shape(format!("connector inputs {dims:?} are not a 2x scale pair")));
    }
    Ok(())
}

/// (B, D, n, m) ↔ (B, n·m, D).
pub fn grid_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = x.dims4()?;
    Ok(x.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?)
}

pub fn tokens_to_grid(z: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, d) = z.dims3()?;
    if n != h * w {
        return Err(Error::Shape(format!("{n} tokens cannot form a {h}x{w} grid")));
    }
    Ok(z.transpose(1, 2)?.reshape((b, d, h, w))?)
}

/// Hierarchy outputs; `grids` are in scale order (coarsest first) and
/// `head_input` is the grid the detection and localization heads read.
#[derive(Debug, Clone)]
pub struct MshOutput {
    pub grids: Vec<Tensor>,
    pub head_input: Tensor,
}

#[derive(Debug, Clone)]
pub struct Msh {
    cfg: MshConfig,
    routing: Routing,
    proj: Linear,
    pos: Vec<Tensor>,
    stacks: Vec<EncoderStack>,
    merge: Option<Linear>,
}

impl Msh {
    pub fn new(scope: &mut Scope<'_>, in_channels: usize, cfg: &MshConfig, routing: Routing) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let proj = Linear::new(&mut scope.sub("proj"), in_channels, d)?;
        let (pos, stacks, merge) = match routing {
            Routing::CoarseToFine | Routing::FineToCoarse => {
                let mut pos = Vec::new();
                let mut stacks = Vec::new();
                for &k in &cfg.scales {
                    let n = 1usize << k;
                    pos.push(scope.sub("pos").normal(&format!("scale{k}"), &[n * n, d], 0.02)?);
                    stacks.push(EncoderStack::new(
                        &mut scope.sub(&format!("scale{k}")),
                        cfg.layers_per_scale,
                        d,
                        cfg.heads,
                        cfg.mlp_ratio,
                    )?);
                }
                (pos, stacks, None)
            }
            Routing::Standard | Routing::NoMsh => {
                let n = 1usize << cfg.k_max();
                let pos = vec![scope.sub("pos").normal("flat", &[n * n, d], 0.02)?];
                let stack = EncoderStack::new(&mut scope.sub("flat"), cfg.flat_layers, d, cfg.heads, cfg.mlp_ratio)?;
                let merge = if routing == Routing::NoMsh {
                    Some(Linear::new(&mut scope.sub("merge"), cfg.scales.len() * d, d)?)
                } else {
                    None
                };
                (pos, vec![stack], merge)
            }
        };
        Ok(Self { cfg: cfg.clone(), routing, proj, pos, stacks, merge })
    }

    pub fn config(&self) -> &MshConfig {
        &self.cfg
    }

    pub fn routing(&self) -> Routing {
        self.routing
    }

    /// Projects every cell of ξ (B, D_ξ, H, W) to width D_e. Pooling commutes
    /// with this map because pooling weights sum to one.
    pub fn project(&self, xi: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = xi.dims4()?;
        let tokens = self.proj.forward(&grid_to_tokens(xi)?)?;
        tokens_to_grid(&tokens, h, w)
    }

    /// ψ^(k) for every configured scale, coarsest first.
    pub fn pyramid(&self, xi: &Tensor) -> Result<Vec<Tensor>> {
        let projected = self.project(xi)?;
        self.cfg.scales.iter().map(|&k| pool_to_scale(&projected, k)).collect()
    }

    fn encode(&self, stack: usize, b: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = b.dims4()?;
        let z = grid_to_tokens(b)?.broadcast_add(&self.pos[stack])?;
        tokens_to_grid(&self.stacks[stack].forward(&z)?, h, w)
    }

    pub fn forward(&self, xi: &Tensor) -> Result<MshOutput> {
        match self.routing {
            Routing::CoarseToFine => {
                let psi = self.pyramid(xi)?;
                let mut grids: Vec<Tensor> = Vec::with_capacity(psi.len());
                for s in 0..psi.len() {
                    let b = if s == 0 { psi[0].clone() } else { connect_scales(&grids[s - 1], &psi[s - 1], &psi[s])? };
                    grids.push(self.encode(s, &b)?);
                }
                let head_input = grids.last().expect("non-empty").clone();
                Ok(MshOutput { grids, head_input })
            }
            Routing::FineToCoarse => {
                let psi = self.pyramid(xi)?;
                let last = psi.len() - 1;
                let mut grids: Vec<Option<Tensor>> = vec![None; psi.len()];
                for s in (0..psi.len()).rev() {
                    let b = if s == last {
                        psi[s].clone()
                    } else {
                        connect_scales_down(grids[s + 1].as_ref().expect("finer scale done"), &psi[s + 1], &psi[s])?
                    };
                    grids[s] = Some(self.encode(s, &b)?);
                }
                let grids: Vec<Tensor> = grids.into_iter().map(|g| g.expect("all scales done")).collect();
                let head_input = grids[0].clone();
                Ok(MshOutput { grids, head_input })
            }
            Routing::Standard => {
                let n = 1usize << self.cfg.k_max();
                let (_, _, h, w) = xi.dims4()?;
                if h != n || w != n {
                    return Err(invalid!(
                        "standard transformer has a fixed {n}x{n} token grid; got a {h}x{w} feature map (input {}x{})",
                        h * 8,
                        w * 8
                    ));
                }
                let g = self.encode(0, &self.project(xi)?)?;
                Ok(MshOutput { grids: vec![g.clone()], head_input: g })
            }
            Routing::NoMsh => {
                let psi = self.pyramid(xi)?;
                let n = 1usize << self.cfg.k_max();
                let upsampled = psi
                    .iter()
                    .map(|p| {
                        let (_, _, h, _) = p.dims4()?;
                        let r = n / h;
                        Ok(p.repeat_interleave_hw(r)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let cat = Tensor::cat(&upsampled, 1)?;
                let merged = self.merge.as_ref().expect("merge layer").forward(&grid_to_tokens(&cat)?)?;
                let g = self.encode(0, &tokens_to_grid(&merged, n, n)?)?;
                Ok(MshOutput { grids: vec![g.clone()], head_input: g })
            }
        }
    }
}

trait RepeatInterleave {
    fn repeat_interleave_hw(&self, r: usize) -> Result<Tensor>;
}

impl RepeatInterleave for Tensor {
    /// Nearest-neighbour upsampling by an integer factor.
    fn repeat_interleave_hw(&self, r: usize) -> Result<Tensor> {
        if r == 1 {
            return Ok(self.clone());
        }
        let (b, d, h, w) = self.dims4()?;
        let x = self.unsqueeze(3)?.unsqueeze(D::Minus1)?; // (b, d, h, 1, w, 1)
        let x = x.broadcast_as((b, d, h, r, w, r))?.contiguous()?;
        Ok(x.reshape((b, d, h * r, w * r))?)
    }
}
