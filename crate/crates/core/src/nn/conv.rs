//! Dense 2-D convolution as a candle custom op.
//!
//! The stock CPU backward pass lowers the input gradient to a transposed
//! convolution and the kernel gradient to a convolution whose "kernel" is the
//! whole output gradient, both of which are slow on a single core. This op
//! keeps an im2col + GEMM formulation for all three products instead.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &Shape, kernel: &Shape, stride: usize, pad: usize) -> Result<Self> {
        let (batch, cin, h, w) = input.dims4()?;
        let (cout, kcin, kh, kw) = kernel.dims4()?;
        if kcin != cin {
            candle_core::bail!("conv2d: input has {cin} channels, kernel expects {kcin}");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            candle_core::bail!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}");
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

trait Float: Copy + Default + std::ops::AddAssign + 'static {
    /// c (m x n) = alpha * a (m x k) * b (k x n) + beta * c, all row-major unless strides say otherwise.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
    fn zero() -> Self;
    fn one() -> Self;
}

impl Float for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

impl Float for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

fn im2col<T: Float>(g: &Geometry, src: &[T], cols: &mut [T]) {
    let n = g.out_len();
    for c in 0..g.cin {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &Geometry, cols: &[T], dst: &mut [T]) {
    let n = g.out_len();
    for c in 0..g.cin {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst_row[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d: expected a contiguous tensor"),
    }
}

fn forward<T: Float>(g: &Geometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let (k, n) = (g.patch_len(), g.out_len());
    let mut out = vec![T::zero(); g.batch * g.cout * n];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    for b in 0..g.batch {
        let src = &input[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let cols_ref: &[T] = if g.is_pointwise() {
            src
        } else {
            im2col(g, src, &mut cols);
            &cols
        };
        let dst = &mut out[b * g.cout * n..(b + 1) * g.cout * n];
        T::gemm(g.cout, k, n, kernel, k as isize, 1, cols_ref, n as isize, 1, T::zero(), dst);
    }
    out
}

fn grad_input<T: Float>(g: &Geometry, grad: &[T], kernel: &[T]) -> Vec<T> {
    let (k, n) = (g.patch_len(), g.out_len());
    let plane = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.batch * plane];
    let mut cols = vec![T::zero(); k * n];
    for b in 0..g.batch {
        let gb = &grad[b * g.cout * n..(b + 1) * g.cout * n];
        let dst = &mut out[b * plane..(b + 1) * plane];
        if g.is_pointwise() {
            // kernel^T (k x cout) * grad (cout x n)
            T::gemm(k, g.cout, n, kernel, 1, k as isize, gb, n as isize, 1, T::zero(), dst);
        } else {
            T::gemm(k, g.cout, n, kernel, 1, k as isize, gb, n as isize, 1, T::zero(), &mut cols);
            col2im(g, &cols, dst);
        }
    }
    out
}

fn grad_kernel<T: Float>(g: &Geometry, input: &[T], grad: &[T]) -> Vec<T> {
    let (k, n) = (g.patch_len(), g.out_len());
    let mut out = vec![T::zero(); g.cout * k];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    for b in 0..g.batch {
        let src = &input[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let cols_ref: &[T] = if g.is_pointwise() {
            src
        } else {
            im2col(g, src, &mut cols);
            &cols
        };
        let gb = &grad[b * g.cout * n..(b + 1) * g.cout * n];
        // grad (cout x n) * cols^T (n x k)
        let beta = if b == 0 { T::zero() } else { T::one() };
        T::gemm(g.cout, n, k, gb, n as isize, 1, cols_ref, 1, n as isize, beta, &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Conv2d {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "mvf-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.shape(), l2.shape(), self.stride, self.pad)?;
        let shape = Shape::from((g.batch, g.cout, g.ho, g.wo));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(k)) => {
                CpuStorage::F32(forward(&g, contiguous(x, l1)?, contiguous(k, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(k)) => {
                CpuStorage::F64(forward(&g, contiguous(x, l1)?, contiguous(k, l2)?))
            }
            _ => candle_core::bail!("conv2d: only matching f32/f64 inputs are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gi = grad.apply_op2_no_bwd(
            kernel,
            &GradInput { stride: self.stride, pad: self.pad, input_shape: input.shape().clone() },
        )?;
        let gk = input.apply_op2_no_bwd(
            &grad,
            &GradKernel { stride: self.stride, pad: self.pad, kernel_shape: kernel.shape().clone() },
        )?;
        Ok((Some(gi), Some(gk)))
    }
}

struct GradInput {
    stride: usize,
    pad: usize,
    input_shape: Shape,
}

impl CustomOp2 for GradInput {
    fn name(&self) -> &'static str {
        "mvf-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(&self.input_shape, l2.shape(), self.stride, self.pad)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(gr), CpuStorage::F32(k)) => {
                CpuStorage::F32(grad_input(&g, contiguous(gr, l1)?, contiguous(k, l2)?))
            }
            (CpuStorage::F64(gr), CpuStorage::F64(k)) => {
                CpuStorage::F64(grad_input(&g, contiguous(gr, l1)?, contiguous(k, l2)?))
            }
            _ => candle_core::bail!("conv2d: only matching f32/f64 inputs are supported"),
        };
        Ok((out, self.input_shape.clone()))
    }
}

struct GradKernel {
    stride: usize,
    pad: usize,
    kernel_shape: Shape,
}

impl CustomOp2 for GradKernel {
    fn name(&self) -> &'static str {
        "mvf-conv2d-grad-kernel"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.shape(), &self.kernel_shape, self.stride, self.pad)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(gr)) => {
                CpuStorage::F32(grad_kernel(&g, contiguous(x, l1)?, contiguous(gr, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(gr)) => {
                CpuStorage::F64(grad_kernel(&g, contiguous(x, l1)?, contiguous(gr, l2)?))
            }
            _ => candle_core::bail!("conv2d: only matching f32/f64 inputs are supported"),
        };
        Ok((out, self.kernel_shape.clone()))
    }
}

/// Zero-padded 2-D convolution of `input` (B, Cin, H, W) with `kernel` (Cout, Cin, kh, kw).
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d: stride must be positive");
    }
    let input = input.contiguous()?;
    let kernel = kernel.contiguous()?;
    if input.dtype() != kernel.dtype() || !matches!(input.dtype(), DType::F32 | DType::F64) {
        candle_core::bail!("conv2d: unsupported dtypes {:?}/{:?}", input.dtype(), kernel.dtype());
    }
    input.apply_op2(&kernel, Conv2d { stride, pad })
}
