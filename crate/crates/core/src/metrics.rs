//! Quality metrics and rate-distortion curve comparison: PSNR, a
//! differentiable multi-scale SSIM, and Bjontegaard delta bit-rate.

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Shape, Tape, Tensor, Var};

/// Peak signal-to-noise ratio in dB for values in [0, 1]. Identical inputs
/// give +infinity; use [`psnr_capped`] for tables.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.require_same_shape(b, "psnr")?;
    let mse = a.mse(b);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// PSNR capped at 100 dB, the sentinel used in reports.
pub fn psnr_capped(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr(a, b)?.min(100.0))
}

const MSSSIM_WINDOW: usize = 11;
const MSSSIM_SIGMA: f32 = 1.5;
const MSSSIM_WEIGHTS: [f32; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const C1: f32 = 0.01 * 0.01;
const C2: f32 = 0.03 * 0.03;

/// Scales usable for the given extents: each scale halves the image and the
/// 11x11 window must still fit, so 5 scales need at least 176 px per side.
pub fn msssim_scales(h: usize, w: usize) -> usize {
    let side = h.min(w);
    let mut scales = 0;
    while scales < 5 && side >= MSSSIM_WINDOW * (1 << scales) {
        scales += 1;
    }
    scales
}

fn gaussian_window(channels: usize) -> Tensor {
    let r = (MSSSIM_WINDOW as isize - 1) / 2;
    let mut weights = Vec::with_capacity(MSSSIM_WINDOW * MSSSIM_WINDOW);
    let mut total = 0.0f64;
    for dy in -r..=r {
        for dx in -r..=r {
            let g = (-((dy * dy + dx * dx) as f64)
                / (2.0 * (MSSSIM_SIGMA as f64) * (MSSSIM_SIGMA as f64)))
                .exp();
            weights.push(g);
            total += g;
        }
    }
    let norm: Vec<f32> = weights.iter().map(|&g| (g / total) as f32).collect();
    Tensor::from_fn(
        Shape::new(channels, 1, MSSSIM_WINDOW, MSSSIM_WINDOW),
        |_, _, y, x| norm[y * MSSSIM_WINDOW + x],
    )
}

/// Multi-scale structural similarity in [0, 1], differentiable (usable as a
/// training distortion). Inputs shaped (B, C, H, W) with values in [0, 1];
/// extents below 176 px use fewer scales with renormalized weights.
pub fn ms_ssim_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let s = a.shape();
    a.value().require_same_shape(&b.value(), "ms_ssim")?;
    let scales = msssim_scales(s.h, s.w);
    if scales == 0 {
        return Err(Error::shape(
            "ms_ssim",
            format!("{}x{} is smaller than the {MSSSIM_WINDOW} px window", s.h, s.w),
        ));
    }
    let tape = a.tape();
    let weight_sum: f32 = MSSSIM_WEIGHTS[..scales].iter().sum();

    let mut x = a;
    let mut y = b;
    let mut score: Option<Var<'t>> = None;
    for scale in 0..scales {
        let c = x.shape().c;
        let win = tape.constant(gaussian_window(c));
        let blur_spec = ConvSpec::new(c, c, MSSSIM_WINDOW, 1, 0).grouped(c);
        let blur = |v: Var<'t>| v.conv2d(win, None, &blur_spec);

        let mu_x = blur(x)?;
        let mu_y = blur(y)?;
        let mu_x2 = mu_x.mul(mu_x);
        let mu_y2 = mu_y.mul(mu_y);
        let mu_xy = mu_x.mul(mu_y);
        let sigma_x2 = blur(x.mul(x))?.sub(mu_x2);
        let sigma_y2 = blur(y.mul(y))?.sub(mu_y2);
        let sigma_xy = blur(x.mul(y))?.sub(mu_xy);

        let cs = sigma_xy
            .scale(2.0)
            .add_scalar(C2)
            .div(sigma_x2.add(sigma_y2).add_scalar(C2));
        let weight = MSSSIM_WEIGHTS[scale] / weight_sum;
        let factor = if scale + 1 == scales {
            let luminance = mu_xy
                .scale(2.0)
                .add_scalar(C1)
                .div(mu_x2.add(mu_y2).add_scalar(C1));
            luminance.mul(cs).mean().clamp_min(1e-6).pow_const(weight)
        } else {
            cs.mean().clamp_min(1e-6).pow_const(weight)
        };
        score = Some(match score {
            Some(acc) => acc.mul(factor),
            None => factor,
        });
        if scale + 1 < scales {
            // 2x2 mean pooling between scales
            let pool = tape.constant(Tensor::full(Shape::new(c, 1, 2, 2), 0.25));
            let pool_spec = ConvSpec::new(c, c, 2, 2, 0).grouped(c);
            x = x.conv2d(pool, None, &pool_spec)?;
            y = y.conv2d(pool, None, &pool_spec)?;
        }
    }
    Ok(score.unwrap())
}

/// Convenience wrapper over [`ms_ssim_var`] for plain tensors.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    Ok(ms_ssim_var(av, bv)?.value().scalar_value() as f64)
}

/// One (bpp, quality) measurement.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    /// PSNR in dB or MS-SSIM, higher is better.
    pub quality: f64,
}

/// A rate-distortion curve: at least four points, strictly increasing bpp.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Result<RdCurve> {
        points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).unwrap());
        if points.len() < 4 {
            return Err(Error::InvalidConfig(format!(
                "rd curve needs >= 4 points, got {}",
                points.len()
            )));
        }
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::InvalidConfig(
                "rd curve bpp values must be strictly increasing".into(),
            ));
        }
        if points
            .windows(2)
            .any(|w| w[0].quality >= w[1].quality)
        {
            return Err(Error::InvalidConfig(
                "rd curve quality must increase with bpp".into(),
            ));
        }
        Ok(RdCurve { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch-Carlson slopes).
struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    fn new(xs: Vec<f64>, ys: Vec<f64>) -> Pchip {
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let d: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut m = vec![0.0f64; n];
        m[0] = end_slope(h[0], h.get(1).copied().unwrap_or(h[0]), d[0], d.get(1).copied().unwrap_or(d[0]));
        m[n - 1] = end_slope(
            h[n - 2],
            if n >= 3 { h[n - 3] } else { h[n - 2] },
            d[n - 2],
            if n >= 3 { d[n - 3] } else { d[n - 2] },
        );
        for i in 1..n - 1 {
            if d[i - 1] * d[i] <= 0.0 {
                m[i] = 0.0;
            } else {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
            }
        }
        Pchip { xs, ys, slopes: m }
    }

    fn segment_coeffs(&self, i: usize) -> (f64, f64, f64, f64, f64) {
        let h = self.xs[i + 1] - self.xs[i];
        let d = (self.ys[i + 1] - self.ys[i]) / h;
        let c0 = self.ys[i];
        let c1 = self.slopes[i];
        let c2 = (3.0 * d - 2.0 * self.slopes[i] - self.slopes[i + 1]) / h;
        let c3 = (self.slopes[i] + self.slopes[i + 1] - 2.0 * d) / (h * h);
        (c0, c1, c2, c3, h)
    }

    fn eval(&self, x: f64) -> f64 {
        let i = self
            .xs
            .windows(2)
            .position(|w| x <= w[1])
            .unwrap_or(self.xs.len() - 2)
            .min(self.xs.len() - 2);
        let (c0, c1, c2, c3, _) = self.segment_coeffs(i);
        let t = x - self.xs[i];
        c0 + t * (c1 + t * (c2 + t * c3))
    }

    /// Exact integral over [lo, hi] (closed-form per cubic segment).
    fn integrate(&self, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.xs.len() - 1 {
            let a = self.xs[i].max(lo);
            let b = self.xs[i + 1].min(hi);
            if a >= b {
                continue;
            }
            let (c0, c1, c2, c3, _) = self.segment_coeffs(i);
            let anti = |t: f64| {
                t * (c0 + t * (c1 / 2.0 + t * (c2 / 3.0 + t * c3 / 4.0)))
            };
            total += anti(b - self.xs[i]) - anti(a - self.xs[i]);
        }
        total
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    // standard three-point endpoint formula with monotonicity clamps
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

/// Bjontegaard delta bit-rate of `test` against `anchor`, in percent.
/// Negative means the test codec saves bits at equal quality. Fits
/// log10(rate) as a monotone cubic of quality and integrates both fits over
/// the overlapping quality interval.
pub fn bdbr(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let fit = |c: &RdCurve| {
        let xs: Vec<f64> = c.points().iter().map(|p| p.quality).collect();
        let ys: Vec<f64> = c.points().iter().map(|p| p.bpp.log10()).collect();
        Pchip::new(xs, ys)
    };
    let fa = fit(anchor);
    let ft = fit(test);
    let lo = fa.xs[0].max(ft.xs[0]);
    let hi = fa.xs[fa.xs.len() - 1].min(ft.xs[ft.xs.len() - 1]);
    if hi <= lo {
        return Err(Error::InvalidConfig(
            "rd curves have no overlapping quality range".into(),
        ));
    }
    let avg_diff = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg_diff) - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_closed_form_and_symmetry() {
        let a = Tensor::full(Shape::new(1, 1, 8, 8), 0.5);
        let b = Tensor::full(Shape::new(1, 1, 8, 8), 0.6);
        // uniform error 0.1 -> MSE 0.01 -> 20 dB
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-3);
        assert_eq!(p, psnr(&b, &a).unwrap());
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr_capped(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn psnr_shape_mismatch_errors() {
        let a = Tensor::zeros(Shape::new(1, 1, 8, 8));
        let b = Tensor::zeros(Shape::new(1, 1, 8, 4));
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn msssim_identity_is_one() {
        let x = rand_image(Shape::new(1, 3, 64, 64), 1);
        let v = ms_ssim(&x, &x).unwrap();
        assert!((v - 1.0).abs() < 1e-5, "got {v}");
    }

    #[test]
    fn msssim_inverted_checkerboard_is_low() {
        // binary checkerboard vs its inversion: structurally opposite at
        // every scale (8 px tiles stay a checkerboard under 2x pooling)
        let x = Tensor::from_fn(Shape::new(1, 1, 64, 64), |_, _, y, xw| {
            ((y / 8 + xw / 8) % 2) as f32
        });
        let inv = x.map(|v| 1.0 - v);
        let v = ms_ssim(&x, &inv).unwrap();
        assert!(v < 0.1, "got {v}");
    }

    #[test]
    fn msssim_scale_selection() {
        assert_eq!(msssim_scales(176, 176), 5);
        assert_eq!(msssim_scales(64, 64), 3);
        assert_eq!(msssim_scales(11, 11), 1);
        assert_eq!(msssim_scales(8, 8), 0);
    }

    #[test]
    fn msssim_orders_degradations() {
        let x = rand_image(Shape::new(1, 1, 64, 64), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let small = Tensor::from_fn(x.shape(), |b, c, y, xw| {
            (x.at(b, c, y, xw) + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0)
        });
        let large = Tensor::from_fn(x.shape(), |b, c, y, xw| {
            (x.at(b, c, y, xw) + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0)
        });
        let near = ms_ssim(&x, &small).unwrap();
        let far = ms_ssim(&x, &large).unwrap();
        assert!(near > far, "{near} vs {far}");
        assert!(near > 0.9);
    }

    #[test]
    fn msssim_gradient_check() {
        use crate::tensor::{grad_check, GradCheckOptions};
        let a = rand_image(Shape::new(1, 1, 32, 32), 4);
        let b = rand_image(Shape::new(1, 1, 32, 32), 5)
            .zip_map(&a, |n, av| 0.7 * av + 0.3 * n);
        let report = grad_check(
            &[a, b],
            |_, vars| ms_ssim_var(vars[0], vars[1]).unwrap().sum(),
            &GradCheckOptions {
                max_coords: 60,
                ..Default::default()
            },
        );
        assert!(report.pass, "{}", report.summary());
    }

    fn curve(points: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(
            points
                .iter()
                .map(|&(bpp, quality)| RdPoint { bpp, quality })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn bdbr_identical_curves_is_zero() {
        let c = curve(&[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)]);
        let v = bdbr(&c, &c).unwrap();
        assert!(v.abs() < 1e-9, "got {v}");
    }

    #[test]
    fn bdbr_uniform_rate_scaling_is_exact() {
        let anchor = curve(&[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)]);
        let test = curve(&[(0.11, 30.0), (0.22, 33.0), (0.44, 36.0), (0.88, 39.0)]);
        let v = bdbr(&anchor, &test).unwrap();
        assert!((v - 10.0).abs() < 0.1, "got {v}");
    }

    #[test]
    fn bdbr_matches_dense_trapezoid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let mut q = 30.0;
            let mut r = 0.05;
            let mut a_pts = Vec::new();
            let mut t_pts = Vec::new();
            for _ in 0..5 {
                q += rng.gen_range(1.0..3.0);
                r *= rng.gen_range(1.5..2.5);
                a_pts.push((r, q));
                t_pts.push((r * rng.gen_range(0.7..1.3), q + rng.gen_range(-0.3..0.3)));
            }
            let anchor = curve(&a_pts);
            let test = match RdCurve::new(
                t_pts.iter().map(|&(bpp, quality)| RdPoint { bpp, quality }).collect(),
            ) {
                Ok(c) => c,
                Err(_) => continue, // jitter broke monotonicity; skip case
            };
            let fast = bdbr(&anchor, &test).unwrap();

            // independent trapezoidal integration of the same fitted curves
            let fit = |c: &RdCurve| {
                let xs: Vec<f64> = c.points().iter().map(|p| p.quality).collect();
                let ys: Vec<f64> = c.points().iter().map(|p| p.bpp.log10()).collect();
                Pchip::new(xs, ys)
            };
            let fa = fit(&anchor);
            let ft = fit(&test);
            let lo = fa.xs[0].max(ft.xs[0]);
            let hi = fa.xs.last().unwrap().min(*ft.xs.last().unwrap());
            let n = 20_000;
            let mut acc = 0.0;
            for i in 0..=n {
                let x = lo + (hi - lo) * i as f64 / n as f64;
                let d = ft.eval(x) - fa.eval(x);
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                acc += w * d;
            }
            let avg = acc / n as f64;
            let slow = (10f64.powf(avg) - 1.0) * 100.0;
            assert!(
                (fast - slow).abs() <= 0.1 * slow.abs().max(0.01),
                "fast {fast} vs oracle {slow}"
            );
        }
    }

    #[test]
    fn bdbr_requires_overlap() {
        let a = curve(&[(0.1, 30.0), (0.2, 31.0), (0.3, 32.0), (0.4, 33.0)]);
        let b = curve(&[(0.1, 40.0), (0.2, 41.0), (0.3, 42.0), (0.4, 43.0)]);
        assert!(bdbr(&a, &b).is_err());
    }
}
