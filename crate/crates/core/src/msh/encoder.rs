//! Pre-norm transformer encoder blocks over token sequences (B, N, D).

use candle_core::{Tensor, D};

use crate::error::{invalid, Result};
use crate::nn::layers::{LayerNorm, Linear};
use crate::nn::params::Scope;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(scope: &mut Scope<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(invalid!("embedding width {dim} not divisible by {heads} heads"));
        }
        Ok(Self {
            qkv: Linear::new(&mut scope.sub("qkv"), dim, 3 * dim)?,
            out: Linear::new(&mut scope.sub("out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, self.heads, dh))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.out.forward(&y)
    }
}

/// z′ = MHSA(LN(z)) + z, y = MLP(LN(z′)) + z′.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderBlock {
    pub fn new(scope: &mut Scope<'_>, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        let hidden = dim * mlp_ratio.max(1);
        Ok(Self {
            norm1: LayerNorm::new(&mut scope.sub("norm1"), dim)?,
            attn: MultiHeadAttention::new(&mut scope.sub("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut scope.sub("norm2"), dim)?,
            fc1: Linear::new(&mut scope.sub("fc1"), dim, hidden)?,
            fc2: Linear::new(&mut scope.sub("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let z = (self.attn.forward(&self.norm1.forward(z)?)? + z)?;
        let h = self.fc1.forward(&self.norm2.forward(&z)?)?.gelu_erf()?;
        Ok((self.fc2.forward(&h)? + z)?)
    }
}

/// Parameter names of the output projections of block `prefix` (attention
/// output and second MLP layer). Zeroing them makes the block the identity.
pub fn output_projection_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.attn.out.weight"),
        format!("{prefix}.attn.out.bias"),
        format!("{prefix}.fc2.weight"),
        format!("{prefix}.fc2.bias"),
    ]
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    blocks: Vec<EncoderBlock>,
}

impl EncoderStack {
    pub fn new(scope: &mut Scope<'_>, depth: usize, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(&mut scope.sub(&format!("block{i}")), dim, heads, mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut z = z.clone();
        for block in &self.blocks {
            z = block.forward(&z)?;
        }
        Ok(z)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}
