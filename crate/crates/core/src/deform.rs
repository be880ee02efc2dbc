//! Heterogeneous and single-size deformable convolution, plus the analytic
//! compute-cost model for comparing them.
//!
//! The heterogeneous operator splits the input channels into three
//! contiguous thirds and compensates each with its own deformable kernel
//! (1x1, 3x3, 5x5). Offsets are learned per spatial location and per kernel
//! tap, shared across the channels of a group; the three group outputs are
//! summed raw over all N output channels.
//!
//! Offset channel layout (frozen; encoder and decoder must agree):
//! group-major — the 1x1 tap first, then the 3x3 taps row-major, then the
//! 5x5 taps row-major — with (dy, dx) interleaved per tap. 2*(1+9+25) = 70
//! channels total.

use crate::error::{Error, Result};
use crate::tensor::{bilinear_plane, bilinear_scatter, dot_f32, par_chunks, thread_pool};
use crate::tensor::{Shape, Tensor, Var};

/// Channel count of the packed heterogeneous offset tensor.
pub const HET_OFFSET_CHANNELS: usize = 2 * (1 + 9 + 25);

/// Offset tensors for the three kernel groups, viewed out of the packed
/// 70-channel motion tensor.
pub struct HetOffsets<'t> {
    /// 2*1 channels: offsets of the 1x1 kernel tap.
    pub off1: Var<'t>,
    /// 2*9 channels: offsets of the 3x3 kernel taps.
    pub off3: Var<'t>,
    /// 2*25 channels: offsets of the 5x5 kernel taps.
    pub off5: Var<'t>,
}

impl<'t> HetOffsets<'t> {
    /// Splits the packed 70-channel motion tensor into the per-group views.
    pub fn from_packed(packed: Var<'t>) -> Result<HetOffsets<'t>> {
        let c = packed.shape().c;
        if c != HET_OFFSET_CHANNELS {
            return Err(Error::shape(
                "het_offsets",
                format!("expected {HET_OFFSET_CHANNELS} offset channels, got {c}"),
            ));
        }
        Ok(HetOffsets {
            off1: packed.slice_channels(0, 2)?,
            off3: packed.slice_channels(2, 20)?,
            off5: packed.slice_channels(20, 70)?,
        })
    }
}

/// Weights of the three kernel groups. Each maps M/3 input channels to all
/// N output channels: w1 is (N, M/3, 1, 1), w3 is (N, M/3, 3, 3), w5 is
/// (N, M/3, 5, 5).
pub struct HetDeformWeights<'t> {
    pub w1: Var<'t>,
    pub w3: Var<'t>,
    pub w5: Var<'t>,
}

/// Heterogeneous deformable convolution: each kernel group compensates its
/// contiguous channel third and the group outputs are summed.
pub fn het_deform_conv<'t>(
    f_ref: Var<'t>,
    offsets: &HetOffsets<'t>,
    weights: &HetDeformWeights<'t>,
) -> Result<Var<'t>> {
    let fs = f_ref.shape();
    if fs.c % 3 != 0 {
        return Err(Error::shape(
            "het_deform_conv",
            format!("input channels {} not divisible by 3", fs.c),
        ));
    }
    let third = fs.c / 3;
    let f1 = f_ref.slice_channels(0, third)?;
    let f3 = f_ref.slice_channels(third, 2 * third)?;
    let f5 = f_ref.slice_channels(2 * third, 3 * third)?;
    let g1 = deform_conv_single(f1, offsets.off1, weights.w1, 1)?;
    let g3 = deform_conv_single(f3, offsets.off3, weights.w3, 3)?;
    let g5 = deform_conv_single(f5, offsets.off5, weights.w5, 5)?;
    Ok(g1.add(g3).add(g5))
}

/// Single-size deformable convolution with a K x K kernel over all input
/// channels. Offsets have 2*K*K channels, (dy, dx) interleaved per tap in
/// row-major tap order, shared across input channels. Output keeps the
/// input's spatial extents (stride 1, zero padding (K-1)/2).
pub fn deform_conv_single<'t>(
    f: Var<'t>,
    offsets: Var<'t>,
    weights: Var<'t>,
    k: usize,
) -> Result<Var<'t>> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidConfig(format!(
            "deformable kernel must be odd, got {k}"
        )));
    }
    let fv = f.value();
    let ov = offsets.value();
    let wv = weights.value();
    let fs = fv.shape();
    let os = ov.shape();
    let taps = k * k;
    if os.c != 2 * taps {
        return Err(Error::shape(
            "deform_conv_single",
            format!("offsets have {} channels, expected {}", os.c, 2 * taps),
        ));
    }
    if (os.b, os.h, os.w) != (fs.b, fs.h, fs.w) {
        return Err(Error::shape(
            "deform_conv_single",
            format!("offsets {} not aligned with features {}", os, fs),
        ));
    }
    let ws = wv.shape();
    if ws.c != fs.c || ws.h != k || ws.w != k {
        return Err(Error::shape(
            "deform_conv_single",
            format!("weights {} do not match M={} K={}", ws, fs.c, k),
        ));
    }
    let n_out = ws.b;
    let out_shape = Shape::new(fs.b, n_out, fs.h, fs.w);

    // phase 1: gather bilinear samples, shared by every output channel
    let samples = gather_samples(&fv, &ov, k);
    // phase 2: contract with the kernel weights
    let out = contract_samples(&samples, &wv, fs, out_shape, k);

    let samples = std::sync::Arc::new(samples);
    let (fv_c, ov_c, wv_c) = (fv, ov, wv);
    Ok(f.tape().push(
        out,
        vec![f.id, offsets.id, weights.id],
        Box::new(move |g, needs| {
            let (gf, goff, gw) = deform_backward(g, &fv_c, &ov_c, &wv_c, &samples, k, needs);
            vec![gf, goff, gw]
        }),
    ))
}

/// samples[((b*taps + t)*M + m)*HW + i] = bilinear sample of input channel m
/// at tap t of output location i.
fn gather_samples(f: &Tensor, off: &Tensor, k: usize) -> Vec<f32> {
    let fs = f.shape();
    let taps = k * k;
    let hw = fs.h * fs.w;
    let r = (k as isize - 1) / 2;
    let mut samples = vec![0.0f32; fs.b * taps * fs.c * hw];
    let fd = f.data();
    let od = off.data();
    thread_pool().install(|| {
        use rayon::prelude::*;
        samples
            .par_chunks_mut(fs.c * hw)
            .enumerate()
            .for_each(|(bt, chunk)| {
                let b = bt / taps;
                let t = bt % taps;
                let py = (t / k) as isize - r;
                let px = (t % k) as isize - r;
                let dy_plane = &od[(b * 2 * taps + 2 * t) * hw..][..hw];
                let dx_plane = &od[(b * 2 * taps + 2 * t + 1) * hw..][..hw];
                for m in 0..fs.c {
                    let plane = &fd[(b * fs.c + m) * hw..][..hw];
                    let dst = &mut chunk[m * hw..][..hw];
                    let mut i = 0;
                    for y in 0..fs.h {
                        for x in 0..fs.w {
                            let sy = y as f32 + py as f32 + dy_plane[i];
                            let sx = x as f32 + px as f32 + dx_plane[i];
                            dst[i] = bilinear_plane(plane, fs.h, fs.w, sx, sy).0;
                            i += 1;
                        }
                    }
                }
            });
    });
    samples
}

fn contract_samples(samples: &[f32], w: &Tensor, fs: Shape, out_shape: Shape, k: usize) -> Tensor {
    let taps = k * k;
    let hw = fs.h * fs.w;
    let wd = w.data();
    let n_out = out_shape.c;
    let mut out = vec![0.0f32; out_shape.count()];
    par_chunks(&mut out, hw, |bn, chunk| {
        let b = bn / n_out;
        let n = bn % n_out;
        for t in 0..taps {
            for m in 0..fs.c {
                let wv = wd[(n * fs.c + m) * taps + t];
                if wv == 0.0 {
                    continue;
                }
                let row = &samples[((b * taps + t) * fs.c + m) * hw..][..hw];
                for (dst, &sv) in chunk.iter_mut().zip(row) {
                    *dst += wv * sv;
                }
            }
        }
    });
    Tensor::new(out_shape, out)
}

fn deform_backward(
    g: &Tensor,
    f: &Tensor,
    off: &Tensor,
    w: &Tensor,
    samples: &[f32],
    k: usize,
    needs: &[bool],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let fs = f.shape();
    let taps = k * k;
    let hw = fs.h * fs.w;
    let r = (k as isize - 1) / 2;
    let n_out = w.shape().b;
    let gd = g.data();
    let wd = w.data();
    let od = off.data();
    let fd = f.data();

    // grad wrt weights: dot of output-grad rows with sample rows
    let gw = needs[2].then(|| {
        let mut gw = vec![0.0f32; w.shape().count()];
        par_chunks(&mut gw, fs.c * taps, |n, chunk| {
            for m in 0..fs.c {
                for t in 0..taps {
                    let mut acc = 0.0f64;
                    for b in 0..fs.b {
                        let grow = &gd[(b * n_out + n) * hw..][..hw];
                        let srow = &samples[((b * taps + t) * fs.c + m) * hw..][..hw];
                        acc += dot_f32(grow, srow) as f64;
                    }
                    chunk[m * taps + t] = acc as f32;
                }
            }
        });
        Tensor::new(w.shape(), gw)
    });

    if !needs[0] && !needs[1] {
        return (None, None, gw);
    }

    // a[(b, t, m, i)] = sum_n w[n, m, t] * g[b, n, i]; shared by both the
    // feature scatter and the offset gradient
    let mut a = vec![0.0f32; fs.b * taps * fs.c * hw];
    par_chunks(&mut a, hw, |btm, chunk| {
        let b = btm / (taps * fs.c);
        let t = (btm / fs.c) % taps;
        let m = btm % fs.c;
        for n in 0..n_out {
            let wv = wd[(n * fs.c + m) * taps + t];
            if wv == 0.0 {
                continue;
            }
            let grow = &gd[(b * n_out + n) * hw..][..hw];
            for (dst, &gv) in chunk.iter_mut().zip(grow) {
                *dst += wv * gv;
            }
        }
    });

    let gf = needs[0].then(|| {
        let mut gf = vec![0.0f32; fs.count()];
        par_chunks(&mut gf, hw, |bm, plane| {
            let b = bm / fs.c;
            let m = bm % fs.c;
            for t in 0..taps {
                let py = (t / k) as isize - r;
                let px = (t % k) as isize - r;
                let dy_plane = &od[(b * 2 * taps + 2 * t) * hw..][..hw];
                let dx_plane = &od[(b * 2 * taps + 2 * t + 1) * hw..][..hw];
                let arow = &a[((b * taps + t) * fs.c + m) * hw..][..hw];
                let mut i = 0;
                for y in 0..fs.h {
                    for x in 0..fs.w {
                        let av = arow[i];
                        if av != 0.0 {
                            let sy = y as f32 + py as f32 + dy_plane[i];
                            let sx = x as f32 + px as f32 + dx_plane[i];
                            bilinear_scatter(plane, fs.h, fs.w, sx, sy, av);
                        }
                        i += 1;
                    }
                }
            }
        });
        Tensor::new(fs, gf)
    });

    let goff = needs[1].then(|| {
        let os = off.shape();
        let mut goff = vec![0.0f32; os.count()];
        par_chunks(&mut goff, 2 * hw, |bt, pair| {
            let b = bt / taps;
            let t = bt % taps;
            let py = (t / k) as isize - r;
            let px = (t % k) as isize - r;
            let dy_plane = &od[(b * 2 * taps + 2 * t) * hw..][..hw];
            let dx_plane = &od[(b * 2 * taps + 2 * t + 1) * hw..][..hw];
            let (gy_plane, gx_plane) = pair.split_at_mut(hw);
            for m in 0..fs.c {
                let plane = &fd[(b * fs.c + m) * hw..][..hw];
                let arow = &a[((b * taps + t) * fs.c + m) * hw..][..hw];
                let mut i = 0;
                for y in 0..fs.h {
                    for x in 0..fs.w {
                        let av = arow[i];
                        if av != 0.0 {
                            let sy = y as f32 + py as f32 + dy_plane[i];
                            let sx = x as f32 + px as f32 + dx_plane[i];
                            let (_, dx, dy) = bilinear_plane(plane, fs.h, fs.w, sx, sy);
                            gy_plane[i] += av * dy;
                            gx_plane[i] += av * dx;
                        }
                        i += 1;
                    }
                }
            }
        });
        Tensor::new(os, goff)
    });

    (gf, goff, gw)
}

/// Which compensation operator a cost is computed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostKind {
    /// Ordinary deformable convolution with one K x K kernel.
    Single { k: usize },
    /// The heterogeneous 1x1 + 3x3 + 5x5 composition over channel thirds.
    Het,
}

/// Analytic per-feature-map computational cost of a compensation operator.
#[derive(Clone, Copy, Debug)]
pub struct CostModel {
    pub kind: CostKind,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub n: usize,
    /// Cost factor of one bilinear interpolation.
    pub bilinear: f64,
}

impl CostModel {
    /// Sample-count factor as an exact rational (numerator, denominator):
    /// K^2*H*W*M*N for a single kernel and 35/3*H*W*M*N for the
    /// heterogeneous composition (35 = 1*1 + 3*3 + 5*5, each group over M/3
    /// channels).
    pub fn sample_count(&self) -> (u128, u128) {
        let base = (self.h as u128) * (self.w as u128) * (self.m as u128) * (self.n as u128);
        match self.kind {
            CostKind::Single { k } => ((k * k) as u128 * base, 1),
            CostKind::Het => (35 * base, 3),
        }
    }

    /// Total cost: sample count times the bilinear factor.
    pub fn cost(&self) -> f64 {
        let (num, den) = self.sample_count();
        num as f64 / den as f64 * self.bilinear
    }
}

/// Operation-level wrapper over [`CostModel::cost`].
pub fn com_cost(model: &CostModel) -> f64 {
    model.cost()
}
