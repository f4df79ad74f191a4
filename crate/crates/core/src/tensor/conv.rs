//! Direct 2-D cross-correlation with zero padding, lowered to GEMM through
//! an explicit patch matrix (im2col). Summation order is fixed, so results
//! are bitwise reproducible on a given machine.

use super::{check_dim, gemm, invalid, Layout, Real, Result, Shape, Tensor};

/// Resolved sizes of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    /// Validates `input [N,Cin,H,W]` against `weight [Cout,Cin,k,k]`.
    /// Output size is `⌊(H + 2·pad − k)/stride⌋ + 1`.
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        check_dim("conv2d", "input channels", weight.c, input.c)?;
        check_dim("conv2d", "kernel width", weight.h, weight.w)?;
        let k = weight.h;
        if k % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be at least 1"));
        }
        if input.h + 2 * pad < k || input.w + 2 * pad < k {
            return Err(invalid(
                "conv2d",
                format!(
                    "padded input {}×{} smaller than kernel {k}",
                    input.h + 2 * pad,
                    input.w + 2 * pad
                ),
            ));
        }
        Ok(Self {
            n: input.n,
            c_in: input.c,
            h: input.h,
            w: input.w,
            c_out: weight.n,
            k,
            stride,
            pad,
            h_out: (input.h + 2 * pad - k) / stride + 1,
            w_out: (input.w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.n, self.c_out, self.h_out, self.w_out)
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_image(&self) -> usize {
        self.c_in * self.h * self.w
    }

    /// 1×1, stride 1, no padding: the input plane already is the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose source column `ox·stride + kx − pad`
/// falls inside the image.
fn valid_span(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // largest ox with ox·s + kx − p ≤ w − 1
    let hi = if g.w + p > kx { ((g.w + p - kx - 1) / s + 1).min(g.w_out) } else { 0 };
    (lo.min(hi), hi)
}

/// Row `(ci·k + ky)·k + kx`, column `oy·w_out + ox`.
fn im2col<T: Real>(src: &[T], g: &ConvGeometry, col: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_span(g, kx);
                let dst = &mut col[row * g.out_plane()..(row + 1) * g.out_plane()];
                for (oy, line) in dst.chunks_exact_mut(g.w_out).enumerate() {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= g.h || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[(iy - p) * g.w..(iy - p + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * s + kx - p;
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src_row[first..first + (hi - lo)]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src_row[first + j * s];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back onto the image.
fn col2im<T: Real>(col: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_span(g, kx);
                let src = &col[row * g.out_plane()..(row + 1) * g.out_plane()];
                for (oy, line) in src.chunks_exact(g.w_out).enumerate() {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= g.h || lo == hi {
                        continue;
                    }
                    let dst_row = &mut plane[(iy - p) * g.w..(iy - p + 1) * g.w];
                    let first = lo * s + kx - p;
                    if s == 1 {
                        for (d, &v) in dst_row[first..first + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in line[lo..hi].iter().enumerate() {
                            let d = &mut dst_row[first + j * s];
                            *d = *d + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `dst (cols×rows) = srcᵀ` for row-major `src (rows×cols)`, in cache blocks.
fn transpose_into<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Forward pass on raw buffers.
pub fn conv2d_forward_raw<T: Real>(input: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let (kk, op) = (g.patch_len(), g.out_plane());
    let mut out = vec![T::zero(); g.n * g.c_out * op];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * op] };
    for n in 0..g.n {
        let img = &input[n * g.in_image()..(n + 1) * g.in_image()];
        let dst = &mut out[n * g.c_out * op..(n + 1) * g.c_out * op];
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_exact_mut(op).enumerate() {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let patches: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut col);
            &col
        };
        gemm(g.c_out, kk, op, weight, Layout::Normal, patches, Layout::Normal, dst, bias.is_some());
    }
    out
}

/// Gradients of a convolution; each is `None` unless requested.
#[derive(Debug, Default)]
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Backward pass on raw buffers. The patch matrix is rebuilt rather than
/// saved, trading compute for memory.
pub fn conv2d_backward_raw<T: Real>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_input, need_weight, need_bias) = need;
    let (kk, op) = (g.patch_len(), g.out_plane());
    let mut grads = ConvGrads {
        input: need_input.then(|| vec![T::zero(); input.len()]),
        weight: need_weight.then(|| vec![T::zero(); weight.len()]),
        bias: need_bias.then(|| vec![T::zero(); g.c_out]),
    };
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * op }];
    let mut dcol = vec![T::zero(); if need_input && !g.is_pointwise() { kk * op } else { 0 }];
    let mut gw_t = vec![T::zero(); if need_weight { kk * g.c_out } else { 0 }];
    for n in 0..g.n {
        let img = &input[n * g.in_image()..(n + 1) * g.in_image()];
        let go = &grad_out[n * g.c_out * op..(n + 1) * g.c_out * op];
        if let Some(gb) = grads.bias.as_mut() {
            for (co, plane) in go.chunks_exact(op).enumerate() {
                gb[co] = gb[co] + plane.iter().copied().sum::<T>();
            }
        }
        if need_weight {
            let gw_t = &mut gw_t;
            let patches: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut col);
                &col
            };
            // dWᵀ (K×Cout) += col (K×P) · dOutᵀ (P×Cout), transposed once
            // after the batch loop.
            gemm(kk, op, g.c_out, patches, Layout::Normal, go, Layout::Transposed, gw_t, true);
        }
        if let Some(gi) = grads.input.as_mut() {
            let dst = &mut gi[n * g.in_image()..(n + 1) * g.in_image()];
            if g.is_pointwise() {
                gemm(kk, g.c_out, op, weight, Layout::Transposed, go, Layout::Normal, dst, true);
            } else {
                // dcol (K×P) = Wᵀ (K×Cout) · dOut (Cout×P)
                gemm(kk, g.c_out, op, weight, Layout::Transposed, go, Layout::Normal, &mut dcol, false);
                col2im(&dcol, g, dst);
            }
        }
    }
    if let Some(gw) = grads.weight.as_mut() {
        transpose_into(&gw_t, kk, g.c_out, gw);
    }
    grads
}

impl<T: Real> Tensor<T> {
    /// Cross-correlation of `self [N,Cin,H,W]` with `weight [Cout,Cin,k,k]`
    /// plus optional `bias [1,Cout,1,1]` (any shape holding `Cout` values).
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let g = ConvGeometry::new(self.shape(), weight.shape(), stride, pad)?;
        if let Some(b) = bias {
            check_dim("conv2d", "bias length", g.c_out, b.numel())?;
        }
        let out = {
            let bias_data = bias.map(|b| b.data());
            conv2d_forward_raw(&self.data(), &weight.data(), bias_data.as_deref().map(|v| &v[..]), &g)
        };
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Ok(Tensor::from_op("conv2d", g.output_shape(), out, inputs, move |ctx| {
            let need = (
                ctx.inputs[0].requires_grad(),
                ctx.inputs[1].requires_grad(),
                ctx.inputs.get(2).is_some_and(Tensor::requires_grad),
            );
            let grads = conv2d_backward_raw(&ctx.inputs[0].data(), &ctx.inputs[1].data(), ctx.grad_out, &g, need);
            let mut out = vec![grads.input, grads.weight];
            if ctx.inputs.len() == 3 {
                out.push(grads.bias);
            }
            out
        }))
    }
}
