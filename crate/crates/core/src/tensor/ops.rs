//! Elementwise, structural and reduction ops.

use super::{check_dim, invalid, Real, Result, Shape, Tensor, TensorError};

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    check_dim(op, "batch", a.n, b.n)?;
    check_dim(op, "channels", a.c, b.c)?;
    check_dim(op, "height", a.h, b.h)?;
    check_dim(op, "width", a.w, b.w)
}

impl<T: Real> Tensor<T> {
    /// Pointwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary<F, D>(&self, op: &'static str, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(op, self.shape(), out, vec![self.clone()], move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx
                .grad_out
                .iter()
                .zip(x.iter().zip(ctx.output))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self.shape(), other.shape())?;
        let out = zip_map(&self.data(), &other.data(), |a, b| a + b);
        Ok(Tensor::from_op("add", self.shape(), out, vec![self.clone(), other.clone()], |ctx| {
            vec![Some(ctx.grad_out.to_vec()), Some(ctx.grad_out.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self.shape(), other.shape())?;
        let out = zip_map(&self.data(), &other.data(), |a, b| a - b);
        Ok(Tensor::from_op("sub", self.shape(), out, vec![self.clone(), other.clone()], |ctx| {
            vec![Some(ctx.grad_out.to_vec()), Some(ctx.grad_out.iter().map(|&g| -g).collect())]
        }))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self.shape(), other.shape())?;
        let out = zip_map(&self.data(), &other.data(), |a, b| a * b);
        Ok(Tensor::from_op("mul", self.shape(), out, vec![self.clone(), other.clone()], |ctx| {
            let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let ga = ctx.inputs[0].requires_grad().then(|| zip_map(ctx.grad_out, &b, |g, b| g * b));
            let gb = ctx.inputs[1].requires_grad().then(|| zip_map(ctx.grad_out, &a, |g, a| g * a));
            vec![ga, gb]
        }))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("div", self.shape(), other.shape())?;
        let out = zip_map(&self.data(), &other.data(), |a, b| a / b);
        Ok(Tensor::from_op("div", self.shape(), out, vec![self.clone(), other.clone()], |ctx| {
            let b = ctx.inputs[1].data();
            let ga = ctx.inputs[0].requires_grad().then(|| zip_map(ctx.grad_out, &b, |g, b| g / b));
            let gb = ctx.inputs[1].requires_grad().then(|| {
                // d(a/b)/db = −y/b
                let gy = zip_map(ctx.grad_out, ctx.output, |g, y| g * y);
                zip_map(&gy, &b, |gy, b| -gy / b)
            });
            vec![ga, gb]
        }))
    }

    /// Multiplication by a scalar constant.
    pub fn scale(&self, s: f64) -> Tensor<T> {
        let s = T::lit(s);
        self.unary("scale", |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::lit(s);
        self.unary("add_scalar", |x| x + s, |_, _| T::one())
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor<T> {
        let two = T::lit(2.0);
        self.unary("square", |x| x * x, move |x, _| two * x)
    }

    /// Gradient passes only where the input is strictly positive.
    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor<T> {
        let a = T::lit(alpha);
        self.unary(
            "leaky_relu",
            move |x| if x > T::zero() { x } else { a * x },
            move |x, _| if x > T::zero() { T::one() } else { a },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor<T> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// Stacks along the channel axis in argument order.
    pub fn concat_channels(tensors: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = tensors.first().ok_or(TensorError::Empty("concat_channels"))?;
        let base = first.shape();
        for t in &tensors[1..] {
            let s = t.shape();
            check_dim("concat_channels", "batch", base.n, s.n)?;
            check_dim("concat_channels", "height", base.h, s.h)?;
            check_dim("concat_channels", "width", base.w, s.w)?;
        }
        let channels: Vec<usize> = tensors.iter().map(|t| t.shape().c).collect();
        let total: usize = channels.iter().sum();
        let shape = Shape::new(base.n, total, base.h, base.w);
        let plane = base.plane();
        let mut out = Vec::with_capacity(shape.numel());
        for n in 0..base.n {
            for (t, &c) in tensors.iter().zip(&channels) {
                let d = t.data();
                out.extend_from_slice(&d[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let inputs = tensors.iter().map(|&t| t.clone()).collect();
        Ok(Tensor::from_op("concat_channels", shape, out, inputs, move |ctx| {
            let mut grads: Vec<Option<Vec<T>>> = ctx
                .inputs
                .iter()
                .map(|t| t.requires_grad().then(|| Vec::with_capacity(t.numel())))
                .collect();
            let mut offset = 0;
            for _ in 0..shape.n {
                for (g, &c) in grads.iter_mut().zip(&channels) {
                    let len = c * plane;
                    if let Some(g) = g {
                        g.extend_from_slice(&ctx.grad_out[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            grads
        }))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if len == 0 || start + len > s.c {
            return Err(invalid(
                "slice_channels",
                format!("range {start}..{} outside {} channels", start + len, s.c),
            ));
        }
        let plane = s.plane();
        let shape = Shape::new(s.n, len, s.h, s.w);
        let mut out = Vec::with_capacity(shape.numel());
        {
            let d = self.data();
            for n in 0..s.n {
                let from = (n * s.c + start) * plane;
                out.extend_from_slice(&d[from..from + len * plane]);
            }
        }
        Ok(Tensor::from_op("slice_channels", shape, out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); s.numel()];
            for n in 0..s.n {
                let to = (n * s.c + start) * plane;
                let from = n * len * plane;
                g[to..to + len * plane].copy_from_slice(&ctx.grad_out[from..from + len * plane]);
            }
            vec![Some(g)]
        }))
    }

    /// Same values, new shape with equal element count.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor<T>> {
        if shape.numel() != self.numel() {
            return Err(invalid(
                "reshape",
                format!("cannot view {} as {}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op("reshape", shape, self.to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad_out.to_vec())]
        }))
    }

    /// Sub-pixel rearrangement `[N, C·r², H, W] → [N, C, H·r, W·r]` with
    /// `out(n, c, h·r+i, w·r+j) = in(n, c·r²+i·r+j, h, w)`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if r == 0 || s.c % (r * r) != 0 {
            return Err(invalid(
                "pixel_shuffle",
                format!("channel count {} not divisible by r²={}", s.c, r * r),
            ));
        }
        let out_shape = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
        let perm = shuffle_permutation(s, r);
        let out = gather(&self.data(), &perm);
        Ok(Tensor::from_op("pixel_shuffle", out_shape, out, vec![self.clone()], move |ctx| {
            vec![Some(scatter(ctx.grad_out, &perm))]
        }))
    }

    /// Exact inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if r == 0 || s.h % r != 0 || s.w % r != 0 {
            return Err(invalid(
                "pixel_unshuffle",
                format!("spatial size {}×{} not divisible by r={r}", s.h, s.w),
            ));
        }
        let in_shape = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
        let perm = shuffle_permutation(in_shape, r);
        let out = scatter(&self.data(), &perm);
        Ok(Tensor::from_op("pixel_unshuffle", in_shape, out, vec![self.clone()], move |ctx| {
            vec![Some(gather(ctx.grad_out, &perm))]
        }))
    }

    /// Bilinear resampling, align-corners-false: the source coordinate of
    /// output index `d` is `(d + 0.5)·in/out − 0.5`, clamped to the image.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        if out_h == 0 || out_w == 0 {
            return Err(invalid("bilinear_resize", "output size must be at least 1×1"));
        }
        let s = self.shape();
        if s.h == out_h && s.w == out_w {
            return Ok(Tensor::from_op("bilinear_resize", s, self.to_vec(), vec![self.clone()], |ctx| {
                vec![Some(ctx.grad_out.to_vec())]
            }));
        }
        let ys = axis_taps::<T>(s.h, out_h);
        let xs = axis_taps::<T>(s.w, out_w);
        let out_shape = Shape::new(s.n, s.c, out_h, out_w);
        let planes = s.n * s.c;
        let mut out = vec![T::zero(); out_shape.numel()];
        {
            let d = self.data();
            for p in 0..planes {
                let src = &d[p * s.plane()..(p + 1) * s.plane()];
                let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, ty) in ys.iter().enumerate() {
                    let r0 = &src[ty.lo * s.w..(ty.lo + 1) * s.w];
                    let r1 = &src[ty.hi * s.w..(ty.hi + 1) * s.w];
                    for (ox, tx) in xs.iter().enumerate() {
                        let top = r0[tx.lo] * tx.w_lo + r0[tx.hi] * tx.w_hi;
                        let bottom = r1[tx.lo] * tx.w_lo + r1[tx.hi] * tx.w_hi;
                        dst[oy * out_w + ox] = top * ty.w_lo + bottom * ty.w_hi;
                    }
                }
            }
        }
        Ok(Tensor::from_op("bilinear_resize", out_shape, out, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); s.numel()];
            for p in 0..planes {
                let go = &ctx.grad_out[p * out_h * out_w..(p + 1) * out_h * out_w];
                let gi = &mut g[p * s.plane()..(p + 1) * s.plane()];
                for (oy, ty) in ys.iter().enumerate() {
                    for (ox, tx) in xs.iter().enumerate() {
                        let v = go[oy * out_w + ox];
                        let top = v * ty.w_lo;
                        let bottom = v * ty.w_hi;
                        gi[ty.lo * s.w + tx.lo] = gi[ty.lo * s.w + tx.lo] + top * tx.w_lo;
                        gi[ty.lo * s.w + tx.hi] = gi[ty.lo * s.w + tx.hi] + top * tx.w_hi;
                        gi[ty.hi * s.w + tx.lo] = gi[ty.hi * s.w + tx.lo] + bottom * tx.w_lo;
                        gi[ty.hi * s.w + tx.hi] = gi[ty.hi * s.w + tx.hi] + bottom * tx.w_hi;
                    }
                }
            }
            vec![Some(g)]
        }))
    }

    /// Arithmetic mean as a `1×1×1×1` tensor.
    pub fn mean(&self) -> Result<Tensor<T>> {
        let count = self.numel();
        if count == 0 {
            return Err(TensorError::Empty("mean"));
        }
        let total: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        let out = vec![T::lit(total / count as f64)];
        Ok(Tensor::from_op("mean", Shape::scalar(), out, vec![self.clone()], move |ctx| {
            let g = ctx.grad_out[0] / T::lit(count as f64);
            vec![Some(vec![g; count])]
        }))
    }

    pub fn sum(&self) -> Tensor<T> {
        let count = self.numel();
        let total: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        Tensor::from_op("sum", Shape::scalar(), vec![T::lit(total)], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad_out[0]; count])]
        })
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&a, &b)| f(a, b)).collect()
}

/// `perm[o]` = input index feeding output element `o` of a pixel shuffle
/// whose input has shape `s`.
fn shuffle_permutation(s: Shape, r: usize) -> Vec<usize> {
    let c_out = s.c / (r * r);
    let (h_out, w_out) = (s.h * r, s.w * r);
    let mut perm = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..c_out {
            for oy in 0..h_out {
                let (h, i) = (oy / r, oy % r);
                for ox in 0..w_out {
                    let (w, j) = (ox / r, ox % r);
                    perm.push(s.index(n, c * r * r + i * r + j, h, w));
                }
            }
        }
    }
    perm
}

fn gather<T: Real>(src: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| src[i]).collect()
}

fn scatter<T: Real>(src: &[T], perm: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (&i, &v) in perm.iter().zip(src) {
        out[i] = v;
    }
    out
}

struct Tap<T> {
    lo: usize,
    hi: usize,
    w_lo: T,
    w_hi: T,
}

fn axis_taps<T: Real>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if lo == in_len - 1 { 0.0 } else { src - lo as f64 };
            Tap {
                lo,
                hi,
                w_lo: T::lit(1.0 - frac),
                w_hi: T::lit(frac),
            }
        })
        .collect()
}
