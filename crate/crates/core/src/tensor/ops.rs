//! Differentiable operations on tape variables.
//!
//! Each op computes its forward value eagerly and records a closure that
//! turns the output gradient into parent gradients. Convolution is the hot
//! path: inner loops run over contiguous rows so the compiler can vectorize
//! them, and parallelism is over disjoint output channels with a fixed
//! per-channel accumulation order.

use super::pool::par_chunks;
use super::tape::Var;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution: M input channels, N output channels,
/// square K kernel, stride S, zero padding P, channel groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn grouped(mut self, groups: usize) -> ConvSpec {
        self.groups = groups;
        self
    }

    /// Weight extents: (N, M/groups, K, K).
    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        )
    }

    /// Output extents for `input`, or a contract violation naming the
    /// offending extents.
    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv kernel/stride must be >= 1, got K={} S={}",
                self.kernel, self.stride
            )));
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::InvalidConfig(format!(
                "conv groups {} must divide M={} and N={}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if input.c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {} channels, spec expects M={}",
                    input.c, self.in_channels
                ),
            ));
        }
        let padded_h = input.h + 2 * self.padding;
        let padded_w = input.w + 2 * self.padding;
        if padded_h < self.kernel || padded_w < self.kernel {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {} exceeds padded input {}x{}",
                    self.kernel, padded_h, padded_w
                ),
            ));
        }
        Ok(Shape::new(
            input.b,
            self.out_channels,
            (padded_h - self.kernel) / self.stride + 1,
            (padded_w - self.kernel) / self.stride + 1,
        ))
    }
}

/// Parameters of one channel-preserving residual block: two 3x3 convolutions
/// with biases and the activation slope between them.
#[derive(Clone, Copy)]
pub struct ResBlockVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub slope: f32,
}

fn binary_op<'t>(
    a: Var<'t>,
    b: Var<'t>,
    op: &'static str,
    fwd: impl Fn(f32, f32) -> f32,
    bwd: impl Fn(f32, f32, f32) -> (f32, f32) + 'static,
) -> Var<'t> {
    debug_assert!(std::ptr::eq(a.tape, b.tape), "vars from different tapes");
    let av = a.value();
    let bv = b.value();
    av.require_same_shape(&bv, op).unwrap_or_else(|e| panic!("{e}"));
    let out = av.zip_map(&bv, fwd);
    let (ac, bc) = (av, bv);
    a.tape.push(
        out,
        vec![a.id, b.id],
        Box::new(move |g, needs| {
            let mut ga = needs[0].then(|| Vec::with_capacity(g.len()));
            let mut gb = needs[1].then(|| Vec::with_capacity(g.len()));
            for i in 0..g.len() {
                let (da, db) = bwd(ac.data()[i], bc.data()[i], g.data()[i]);
                if let Some(v) = ga.as_mut() {
                    v.push(da);
                }
                if let Some(v) = gb.as_mut() {
                    v.push(db);
                }
            }
            vec![
                ga.map(|v| Tensor::new(ac.shape(), v)),
                gb.map(|v| Tensor::new(bc.shape(), v)),
            ]
        }),
    )
}

fn unary_op<'t>(
    x: Var<'t>,
    fwd: impl Fn(f32) -> f32,
    bwd: impl Fn(f32, f32) -> f32 + 'static,
) -> Var<'t> {
    let xv = x.value();
    let out = xv.map(fwd);
    x.tape.push(
        out,
        vec![x.id],
        Box::new(move |g, _| {
            let gx = xv.zip_map(g, |xi, gi| bwd(xi, gi));
            vec![Some(gx)]
        }),
    )
}

impl<'t> Var<'t> {
    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        binary_op(self, rhs, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        binary_op(self, rhs, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        binary_op(self, rhs, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        binary_op(
            self,
            rhs,
            "div",
            |a, b| a / b,
            |a, b, g| (g / b, -g * a / (b * b)),
        )
    }

    pub fn neg(self) -> Var<'t> {
        unary_op(self, |x| -x, |_, g| -g)
    }

    pub fn scale(self, k: f32) -> Var<'t> {
        unary_op(self, move |x| k * x, move |_, g| k * g)
    }

    pub fn add_scalar(self, k: f32) -> Var<'t> {
        unary_op(self, move |x| x + k, |_, g| g)
    }

    /// Elementwise max(x, slope * x); `slope` in (0, 1).
    pub fn leaky_relu(self, slope: f32) -> Var<'t> {
        assert!(slope > 0.0 && slope < 1.0, "leaky_relu slope must be in (0,1)");
        unary_op(
            self,
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x, g| if x >= 0.0 { g } else { slope * g },
        )
    }

    /// Elementwise max(x, floor); subgradient passes only where x > floor.
    pub fn clamp_min(self, floor: f32) -> Var<'t> {
        unary_op(
            self,
            move |x| x.max(floor),
            move |x, g| if x > floor { g } else { 0.0 },
        )
    }

    /// Natural log; domain x > 0.
    pub fn ln(self) -> Var<'t> {
        unary_op(self, |x| x.ln(), |x, g| g / x)
    }

    /// |x|^alpha with subgradient alpha*|x|^(alpha-1)*sign(x).
    pub fn abs_pow(self, alpha: f32) -> Var<'t> {
        if alpha == 2.0 {
            return unary_op(self, |x| x * x, |x, g| 2.0 * x * g);
        }
        if alpha == 1.0 {
            return unary_op(self, |x| x.abs(), |x, g| g * x.signum());
        }
        unary_op(
            self,
            move |x| x.abs().powf(alpha),
            move |x, g| {
                if x == 0.0 {
                    0.0
                } else {
                    g * alpha * x.abs().powf(alpha - 1.0) * x.signum()
                }
            },
        )
    }

    /// x^p for strictly positive x.
    pub fn pow_const(self, p: f32) -> Var<'t> {
        if p == 0.5 {
            return unary_op(self, |x| x.sqrt(), |x, g| g * 0.5 / x.sqrt());
        }
        if p == -0.5 {
            return unary_op(self, |x| 1.0 / x.sqrt(), |x, g| g * -0.5 / (x * x.sqrt()));
        }
        unary_op(
            self,
            move |x| x.powf(p),
            move |x, g| g * p * x.powf(p - 1.0),
        )
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(self) -> Var<'t> {
        unary_op(
            self,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, g| g / (1.0 + (-x).exp()),
        )
    }

    /// Nearest-integer rounding (ties away from zero) with a pass-through
    /// (identity) gradient.
    pub fn round_ste(self) -> Var<'t> {
        unary_op(self, |x| x.round(), |_, g| g)
    }

    /// Sum of all elements as a 1x1x1x1 tensor (f64 accumulation).
    pub fn sum(self) -> Var<'t> {
        let xv = self.value();
        let total = xv.sum_f64() as f32;
        let shape = xv.shape();
        self.tape.push(
            Tensor::scalar(total),
            vec![self.id],
            Box::new(move |g, _| {
                let gv = g.scalar_value();
                vec![Some(Tensor::full(shape, gv))]
            }),
        )
    }

    /// Mean of all elements as a 1x1x1x1 tensor.
    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let tape = parts[0].tape;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape();
        let mut total_c = 0;
        for v in &values {
            let s = v.shape();
            if (s.b, s.h, s.w) != (first.b, first.h, first.w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{} vs {}", first, s),
                ));
            }
            total_c += s.c;
        }
        let out_shape = Shape::new(first.b, total_c, first.h, first.w);
        let plane = first.h * first.w;
        let mut data = vec![0.0f32; out_shape.count()];
        for b in 0..first.b {
            let mut c_off = 0;
            for v in &values {
                let s = v.shape();
                let src = &v.data()[b * s.c * plane..(b + 1) * s.c * plane];
                let dst_start = (b * total_c + c_off) * plane;
                data[dst_start..dst_start + s.c * plane].copy_from_slice(src);
                c_off += s.c;
            }
        }
        let shapes: Vec<Shape> = values.iter().map(|v| v.shape()).collect();
        Ok(tape.push(
            Tensor::new(out_shape, data),
            parts.iter().map(|p| p.id).collect(),
            Box::new(move |g, needs| {
                let mut out = Vec::with_capacity(shapes.len());
                let mut c_off = 0;
                for (i, s) in shapes.iter().enumerate() {
                    if needs[i] {
                        let mut part = vec![0.0f32; s.count()];
                        for b in 0..s.b {
                            let src_start = (b * total_c + c_off) * plane;
                            let dst_start = b * s.c * plane;
                            part[dst_start..dst_start + s.c * plane]
                                .copy_from_slice(&g.data()[src_start..src_start + s.c * plane]);
                        }
                        out.push(Some(Tensor::new(*s, part)));
                    } else {
                        out.push(None);
                    }
                    c_off += s.c;
                }
                out
            }),
        ))
    }

    /// Channels [start, end) as a new tensor.
    pub fn slice_channels(self, start: usize, end: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let s = xv.shape();
        if start >= end || end > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{end} out of {} channels", s.c),
            ));
        }
        let out_shape = Shape::new(s.b, end - start, s.h, s.w);
        let plane = s.h * s.w;
        let mut data = vec![0.0f32; out_shape.count()];
        for b in 0..s.b {
            let src_start = (b * s.c + start) * plane;
            let dst_start = b * (end - start) * plane;
            data[dst_start..dst_start + (end - start) * plane]
                .copy_from_slice(&xv.data()[src_start..src_start + (end - start) * plane]);
        }
        Ok(self.tape.push(
            Tensor::new(out_shape, data),
            vec![self.id],
            Box::new(move |g, _| {
                let mut gx = vec![0.0f32; s.count()];
                for b in 0..s.b {
                    let dst_start = (b * s.c + start) * plane;
                    let src_start = b * (end - start) * plane;
                    gx[dst_start..dst_start + (end - start) * plane]
                        .copy_from_slice(&g.data()[src_start..src_start + (end - start) * plane]);
                }
                vec![Some(Tensor::new(s, gx))]
            }),
        ))
    }

    /// Rearranges (B, C, H, W) -> (B, C/f^2, H*f, W*f); channel c*f^2 + dy*f + dx
    /// lands at spatial offset (dy, dx). Exact permutation, lossless.
    pub fn depth_to_space(self, factor: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let s = xv.shape();
        let f2 = factor * factor;
        if factor == 0 || s.c % f2 != 0 {
            return Err(Error::shape(
                "depth_to_space",
                format!("{} channels not divisible by {}^2", s.c, factor),
            ));
        }
        if factor == 1 {
            // identity permutation; still record a node for uniform graphs
            return Ok(unary_op(self, |x| x, |_, g| g));
        }
        let out = depth_to_space_tensor(&xv, factor);
        Ok(self.tape.push(
            out,
            vec![self.id],
            Box::new(move |g, _| vec![Some(space_to_depth_tensor(g, factor))]),
        ))
    }

    /// Inverse of `depth_to_space`.
    pub fn space_to_depth(self, factor: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let s = xv.shape();
        if factor == 0 || s.h % factor != 0 || s.w % factor != 0 {
            return Err(Error::shape(
                "space_to_depth",
                format!("{}x{} not divisible by {}", s.h, s.w, factor),
            ));
        }
        if factor == 1 {
            return Ok(unary_op(self, |x| x, |_, g| g));
        }
        let out = space_to_depth_tensor(&xv, factor);
        Ok(self.tape.push(
            out,
            vec![self.id],
            Box::new(move |g, _| vec![Some(depth_to_space_tensor(g, factor))]),
        ))
    }

    /// Scales every channel by a (1, C, 1, 1) factor.
    pub fn mul_channel(self, per_channel: Var<'t>) -> Result<Var<'t>> {
        let xv = self.value();
        let sv = per_channel.value();
        let xs = xv.shape();
        if sv.shape() != Shape::new(1, xs.c, 1, 1) {
            return Err(Error::shape(
                "mul_channel",
                format!("scale {} does not match {} channels", sv.shape(), xs.c),
            ));
        }
        let plane = xs.h * xs.w;
        let mut out = vec![0.0f32; xs.count()];
        for b in 0..xs.b {
            for c in 0..xs.c {
                let k = sv.data()[c];
                let src = &xv.data()[(b * xs.c + c) * plane..][..plane];
                let dst = &mut out[(b * xs.c + c) * plane..][..plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = k * v;
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(xs, out),
            vec![self.id, per_channel.id],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0f32; xs.count()];
                    for b in 0..xs.b {
                        for c in 0..xs.c {
                            let k = sv.data()[c];
                            let src = &g.data()[(b * xs.c + c) * plane..][..plane];
                            let dst = &mut gx[(b * xs.c + c) * plane..][..plane];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = k * v;
                            }
                        }
                    }
                    Tensor::new(xs, gx)
                });
                let gs = needs[1].then(|| {
                    let mut gs = vec![0.0f32; xs.c];
                    for (c, slot) in gs.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for b in 0..xs.b {
                            let grow = &g.data()[(b * xs.c + c) * plane..][..plane];
                            let xrow = &xv.data()[(b * xs.c + c) * plane..][..plane];
                            acc += dot_f32(grow, xrow) as f64;
                        }
                        *slot = acc as f32;
                    }
                    Tensor::new(Shape::new(1, xs.c, 1, 1), gs)
                });
                vec![gx, gs]
            }),
        ))
    }

    /// Channel-preserving residual block: x + conv(lrelu(conv(x))), both
    /// convolutions 3x3 stride 1.
    pub fn residual_block(self, p: &ResBlockVars<'t>) -> Result<Var<'t>> {
        let c = self.shape().c;
        let spec = ConvSpec::new(c, c, 3, 1, 1);
        let branch = self
            .conv2d(p.w1, Some(p.b1), &spec)?
            .leaky_relu(p.slope)
            .conv2d(p.w2, Some(p.b2), &spec)?;
        Ok(self.add(branch))
    }

    /// 2-D convolution with zero padding. Differentiable w.r.t. the input,
    /// the weights and the bias.
    pub fn conv2d(self, weights: Var<'t>, bias: Option<Var<'t>>, spec: &ConvSpec) -> Result<Var<'t>> {
        let xv = self.value();
        let wv = weights.value();
        let out_shape = spec.out_shape(xv.shape())?;
        if wv.shape() != spec.weight_shape() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weights {} do not match spec {}",
                    wv.shape(),
                    spec.weight_shape()
                ),
            ));
        }
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            let want = Shape::new(1, spec.out_channels, 1, 1);
            if b.shape() != want {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {} does not match {}", b.shape(), want),
                ));
            }
        }
        let out = conv2d_forward(&xv, &wv, bv.as_ref(), spec, out_shape);
        let spec = *spec;
        let mut parents = vec![self.id, weights.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        Ok(self.tape.push(
            out,
            parents,
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| conv2d_grad_input(g, &wv, &spec, xv.shape()));
                let gw = needs[1].then(|| conv2d_grad_weight(g, &xv, &spec));
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(needs[2].then(|| conv2d_grad_bias(g)));
                }
                grads
            }),
        ))
    }
}

fn depth_to_space_tensor(x: &Tensor, f: usize) -> Tensor {
    let s = x.shape();
    let oc = s.c / (f * f);
    let out_shape = Shape::new(s.b, oc, s.h * f, s.w * f);
    let mut data = vec![0.0f32; out_shape.count()];
    let xd = x.data();
    for b in 0..s.b {
        for c in 0..oc {
            for dy in 0..f {
                for dx in 0..f {
                    let ic = c * f * f + dy * f + dx;
                    for y in 0..s.h {
                        for xw in 0..s.w {
                            data[out_shape.idx(b, c, y * f + dy, xw * f + dx)] =
                                xd[s.idx(b, ic, y, xw)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, data)
}

fn space_to_depth_tensor(x: &Tensor, f: usize) -> Tensor {
    let s = x.shape();
    let oc = s.c * f * f;
    let out_shape = Shape::new(s.b, oc, s.h / f, s.w / f);
    let mut data = vec![0.0f32; out_shape.count()];
    let xd = x.data();
    for b in 0..s.b {
        for c in 0..s.c {
            for dy in 0..f {
                for dx in 0..f {
                    let ocn = c * f * f + dy * f + dx;
                    for y in 0..out_shape.h {
                        for xw in 0..out_shape.w {
                            data[out_shape.idx(b, ocn, y, xw)] =
                                xd[s.idx(b, c, y * f + dy, xw * f + dx)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, data)
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
    out_shape: Shape,
) -> Tensor {
    let xs = x.shape();
    let (kk, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mg = spec.in_channels / spec.groups;
    let n_per_g = spec.out_channels / spec.groups;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let (ih, iw) = (xs.h, xs.w);
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0f32; out_shape.count()];

    par_chunks(&mut out, oh * ow, |bn, chunk| {
        let b = bn / spec.out_channels;
        let n = bn % spec.out_channels;
        if let Some(bt) = bias {
            chunk.fill(bt.data()[n]);
        }
        let base_m = (n / n_per_g) * mg;
        for mi in 0..mg {
            let plane = &xd[(b * xs.c + base_m + mi) * ih * iw..][..ih * iw];
            let wbase = (n * mg + mi) * kk * kk;
            for ky in 0..kk {
                for kx in 0..kk {
                    let wv = wd[wbase + ky * kk + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    accumulate_row_taps(chunk, plane, wv, oh, ow, ih, iw, s, p, ky, kx);
                }
            }
        }
    });
    Tensor::new(out_shape, out)
}

/// out[oy, ox] += wv * plane[oy*s + ky - p, ox*s + kx - p] over valid indices.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_row_taps(
    out: &mut [f32],
    plane: &[f32],
    wv: f32,
    oh: usize,
    ow: usize,
    ih: usize,
    iw: usize,
    s: usize,
    p: usize,
    ky: usize,
    kx: usize,
) {
    for oy in 0..oh {
        let iy = (oy * s + ky) as isize - p as isize;
        if iy < 0 || iy >= ih as isize {
            continue;
        }
        let in_row = &plane[iy as usize * iw..][..iw];
        let out_row = &mut out[oy * ow..][..ow];
        let off = kx as isize - p as isize;
        if s == 1 {
            let ox_lo = (-off).max(0) as usize;
            let ox_hi = ((iw as isize - off).min(ow as isize)).max(0) as usize;
            if ox_lo >= ox_hi {
                continue;
            }
            let src = &in_row[(ox_lo as isize + off) as usize..(ox_hi as isize + off) as usize];
            let dst = &mut out_row[ox_lo..ox_hi];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += wv * v;
            }
        } else {
            for (ox, d) in out_row.iter_mut().enumerate() {
                let ix = (ox * s) as isize + off;
                if ix >= 0 && ix < iw as isize {
                    *d += wv * in_row[ix as usize];
                }
            }
        }
    }
}

fn conv2d_grad_bias(g: &Tensor) -> Tensor {
    let gs = g.shape();
    let plane = gs.h * gs.w;
    let mut gb = vec![0.0f32; gs.c];
    for n in 0..gs.c {
        let mut acc = 0.0f64;
        for b in 0..gs.b {
            let row = &g.data()[(b * gs.c + n) * plane..][..plane];
            acc += row.iter().map(|&v| v as f64).sum::<f64>();
        }
        gb[n] = acc as f32;
    }
    Tensor::new(Shape::new(1, gs.c, 1, 1), gb)
}

fn conv2d_grad_weight(g: &Tensor, x: &Tensor, spec: &ConvSpec) -> Tensor {
    let gs = g.shape();
    let xs = x.shape();
    let (kk, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mg = spec.in_channels / spec.groups;
    let n_per_g = spec.out_channels / spec.groups;
    let wshape = spec.weight_shape();
    let mut gw = vec![0.0f32; wshape.count()];
    let gd = g.data();
    let xd = x.data();

    par_chunks(&mut gw, mg * kk * kk, |n, chunk| {
        let base_m = (n / n_per_g) * mg;
        for mi in 0..mg {
            for ky in 0..kk {
                for kx in 0..kk {
                    let mut acc = 0.0f64;
                    for b in 0..gs.b {
                        let go_plane = &gd[(b * gs.c + n) * gs.h * gs.w..][..gs.h * gs.w];
                        let x_plane =
                            &xd[(b * xs.c + base_m + mi) * xs.h * xs.w..][..xs.h * xs.w];
                        for oy in 0..gs.h {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let go_row = &go_plane[oy * gs.w..][..gs.w];
                            let x_row = &x_plane[iy as usize * xs.w..][..xs.w];
                            let off = kx as isize - p as isize;
                            if s == 1 {
                                let ox_lo = (-off).max(0) as usize;
                                let ox_hi =
                                    ((xs.w as isize - off).min(gs.w as isize)).max(0) as usize;
                                if ox_lo < ox_hi {
                                    let a = &go_row[ox_lo..ox_hi];
                                    let bsl = &x_row[(ox_lo as isize + off) as usize
                                        ..(ox_hi as isize + off) as usize];
                                    acc += dot_f32(a, bsl) as f64;
                                }
                            } else {
                                let mut sacc = 0.0f32;
                                for (ox, &gv) in go_row.iter().enumerate() {
                                    let ix = (ox * s) as isize + off;
                                    if ix >= 0 && ix < xs.w as isize {
                                        sacc += gv * x_row[ix as usize];
                                    }
                                }
                                acc += sacc as f64;
                            }
                        }
                    }
                    chunk[(mi * kk + ky) * kk + kx] = acc as f32;
                }
            }
        }
    });
    Tensor::new(wshape, gw)
}

fn conv2d_grad_input(g: &Tensor, w: &Tensor, spec: &ConvSpec, x_shape: Shape) -> Tensor {
    let gs = g.shape();
    let (kk, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mg = spec.in_channels / spec.groups;
    let n_per_g = spec.out_channels / spec.groups;
    let mut gx = vec![0.0f32; x_shape.count()];
    let gd = g.data();
    let wd = w.data();
    let (ih, iw) = (x_shape.h, x_shape.w);

    par_chunks(&mut gx, ih * iw, |bm, plane| {
        let b = bm / x_shape.c;
        let m = bm % x_shape.c;
        let gi = m / mg;
        let mi = m % mg;
        for n in gi * n_per_g..(gi + 1) * n_per_g {
            let go_plane = &gd[(b * gs.c + n) * gs.h * gs.w..][..gs.h * gs.w];
            let wbase = (n * mg + mi) * kk * kk;
            for ky in 0..kk {
                for kx in 0..kk {
                    let wv = wd[wbase + ky * kk + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    // gx[iy, ix] += wv * go[oy, ox] with iy = oy*s + ky - p
                    for oy in 0..gs.h {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let go_row = &go_plane[oy * gs.w..][..gs.w];
                        let gx_row = &mut plane[iy as usize * iw..][..iw];
                        let off = kx as isize - p as isize;
                        if s == 1 {
                            let ox_lo = (-off).max(0) as usize;
                            let ox_hi =
                                ((iw as isize - off).min(gs.w as isize)).max(0) as usize;
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let dst = &mut gx_row
                                [(ox_lo as isize + off) as usize..(ox_hi as isize + off) as usize];
                            let src = &go_row[ox_lo..ox_hi];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += wv * v;
                            }
                        } else {
                            for (ox, &gv) in go_row.iter().enumerate() {
                                let ix = (ox * s) as isize + off;
                                if ix >= 0 && ix < iw as isize {
                                    gx_row[ix as usize] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(x_shape, gx)
}

/// Dot product with four independent accumulators so the loop vectorizes;
/// the lane split is fixed, so the result is deterministic.
#[inline]
pub(crate) fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (ai, bi) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        acc[0] += ai[0] * bi[0];
        acc[1] += ai[1] * bi[1];
        acc[2] += ai[2] * bi[2];
        acc[3] += ai[3] * bi[3];
    }
    let mut tail = 0.0f32;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Bilinear interpolation of `f[b, c]` at real coordinates (x, y), with zero
/// padding outside the grid. Total function: any (x, y) is valid.
pub fn bilinear_sample(f: &Tensor, b: usize, c: usize, x: f32, y: f32) -> f32 {
    let s = f.shape();
    let plane = &f.data()[(b * s.c + c) * s.h * s.w..][..s.h * s.w];
    bilinear_plane(plane, s.h, s.w, x, y).0
}

/// (value, d/dx, d/dy) of bilinear interpolation over one channel plane.
#[inline]
pub(crate) fn bilinear_plane(plane: &[f32], h: usize, w: usize, x: f32, y: f32) -> (f32, f32, f32) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let read = |yy: i64, xx: i64| -> f32 {
        if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let v00 = read(y0, x0);
    let v01 = read(y0, x0 + 1);
    let v10 = read(y0 + 1, x0);
    let v11 = read(y0 + 1, x0 + 1);
    let top = v00 + fx * (v01 - v00);
    let bot = v10 + fx * (v11 - v10);
    let val = top + fy * (bot - top);
    let dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
    let dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    (val, dx, dy)
}

/// Scatters `g` through bilinear interpolation weights into `grad_plane`.
#[inline]
pub(crate) fn bilinear_scatter(grad_plane: &mut [f32], h: usize, w: usize, x: f32, y: f32, g: f32) {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let (x0, y0) = (x0f as i64, y0f as i64);
    let mut add = |yy: i64, xx: i64, wv: f32| {
        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 && wv != 0.0 {
            grad_plane[yy as usize * w + xx as usize] += g * wv;
        }
    };
    add(y0, x0, (1.0 - fx) * (1.0 - fy));
    add(y0, x0 + 1, fx * (1.0 - fy));
    add(y0 + 1, x0, (1.0 - fx) * fy);
    add(y0 + 1, x0 + 1, fx * fy);
}
