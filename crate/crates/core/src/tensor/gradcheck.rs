//! Finite-difference verification of recorded backward passes.
//!
//! Analytic gradients from the tape are compared against central differences
//! of the scalar loss, coordinate by coordinate. Two kinds of coordinates are
//! excluded and counted instead of failed:
//!
//! - kink coordinates, where the one-sided slopes disagree (the perturbation
//!   straddles an activation corner such as leaky-ReLU at 0 or bilinear
//!   interpolation at a lattice line);
//! - coordinates whose signal is below the f32 measurement noise of the loss
//!   itself, where a central difference carries no information at the pinned
//!   step size.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f32,
    /// Maximum relative error accepted.
    pub tol: f32,
    /// Coordinates checked per input; larger inputs are subsampled.
    pub max_coords: usize,
    /// Seed for coordinate subsampling.
    pub seed: u64,
    /// One-sided slopes differing by more than this fraction mark a kink.
    pub kink_gap: f32,
    /// Safety factor on the f32 noise estimate of the loss.
    pub noise_safety: f32,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            tol: 1e-2,
            max_coords: 200,
            seed: 0x9d5c,
            kink_gap: 0.1,
            noise_safety: 16.0,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f32,
    pub mean_rel_err: f32,
    pub checked: usize,
    pub skipped_kink: usize,
    pub skipped_noise: usize,
    /// (input index, coordinate, analytic, numeric) of coordinates over tol.
    pub failures: Vec<(usize, usize, f32, f32)>,
    /// Set when the loss or a gradient contains NaN/Inf, with the location.
    pub non_finite: Option<String>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: max rel {:.3e}, mean rel {:.3e}, {} checked / {} kink-skipped / {} noise-skipped",
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.mean_rel_err,
            self.checked,
            self.skipped_kink,
            self.skipped_noise,
        )
    }
}

/// Checks the analytic gradient of `build` (a scalar-valued computation over
/// leaf variables bound to `inputs`) against central finite differences.
pub fn grad_check<F>(inputs: &[Tensor], build: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |tensors: &[Tensor]| -> f32 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        build(&tape, &vars).value().scalar_value()
    };

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars);
    let f0 = loss.value().scalar_value();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        mean_rel_err: 0.0,
        checked: 0,
        skipped_kink: 0,
        skipped_noise: 0,
        failures: Vec::new(),
        non_finite: None,
        pass: true,
    };
    if !f0.is_finite() {
        report.non_finite = Some(format!("loss value {f0}"));
        report.pass = false;
        return report;
    }
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
    for (i, g) in analytic.iter().enumerate() {
        if let Some((coord, v)) = g.first_non_finite() {
            report.non_finite = Some(format!("gradient of input {i} at {coord}: {v}"));
            report.pass = false;
            return report;
        }
    }

    // The loss is an f32 computation: differences below its rounding noise
    // carry no signal at this step size.
    let noise = opts.noise_safety * f32::EPSILON * f0.abs().max(1.0) / opts.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut err_sum = 0.0f64;

    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > opts.max_coords {
            coords.shuffle(&mut rng);
            coords.truncate(opts.max_coords);
            coords.sort_unstable();
        }
        for &j in &coords {
            let x0 = inputs[i].data()[j];
            // use the deltas that are actually representable in f32
            let xp = x0 + opts.eps;
            let xm = x0 - opts.eps;
            let mut perturbed = |value: f32| -> f32 {
                let mut data = inputs[i].data().to_vec();
                data[j] = value;
                work[i] = Tensor::new(inputs[i].shape(), data);
                eval(&work)
            };
            let fp = perturbed(xp);
            let fm = perturbed(xm);
            work[i] = inputs[i].clone();
            if !fp.is_finite() || !fm.is_finite() {
                report.non_finite = Some(format!("perturbed loss at input {i} coord {j}"));
                report.pass = false;
                return report;
            }
            let numeric = (fp - fm) / (xp - xm);
            let right = (fp - f0) / (xp - x0);
            let left = (f0 - fm) / (x0 - xm);
            let slope_scale = right.abs().max(left.abs()).max(1.0);
            if (right - left).abs() > opts.kink_gap * slope_scale {
                report.skipped_kink += 1;
                continue;
            }
            let g = analytic[i].data()[j];
            if g.abs().max(numeric.abs()) < noise {
                report.skipped_noise += 1;
                continue;
            }
            // numeric slope is the reference; floor the denominator at the
            // loss noise so quotients of two tiny numbers cannot dominate
            let denom = numeric.abs().max(noise / opts.tol);
            let rel = (g - numeric).abs() / denom;
            report.checked += 1;
            err_sum += rel as f64;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            if rel > opts.tol {
                report.failures.push((i, j, g, numeric));
            }
        }
    }
    if report.checked > 0 {
        report.mean_rel_err = (err_sum / report.checked as f64) as f32;
    }
    report.pass = report.failures.is_empty() && report.non_finite.is_none();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ConvSpec, Shape};
    use rand::Rng;

    fn rand_tensor(shape: Shape, seed: u64, lo: f32, hi: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
    }

    #[test]
    fn linear_op_has_exact_gradient() {
        // dyadic values and a dyadic step keep every f32 operation exact,
        // so the error is literally 0
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.25, -0.5, 1.0, 0.125]);
        let report = grad_check(
            &[x],
            |_, vars| vars[0].scale(2.0).sum(),
            &GradCheckOptions {
                eps: 0.0009765625, // 2^-10
                ..Default::default()
            },
        );
        assert!(report.pass, "{}", report.summary());
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn conv2d_gradients_pass() {
        let spec = ConvSpec::new(2, 3, 3, 1, 1);
        let x = rand_tensor(Shape::new(1, 2, 5, 5), 2, -1.0, 1.0);
        let w = rand_tensor(spec.weight_shape(), 3, -0.5, 0.5);
        let bias = rand_tensor(Shape::new(1, 3, 1, 1), 4, -0.5, 0.5);
        let report = grad_check(
            &[x, w, bias],
            |_, vars| {
                vars[0]
                    .conv2d(vars[1], Some(vars[2]), &spec)
                    .unwrap()
                    .sum()
            },
            &GradCheckOptions::default(),
        );
        assert!(report.pass, "{}", report.summary());
    }

    #[test]
    fn conv2d_weight_gradient_tight_tolerance() {
        // Loss is linear in the weights, so central differences are near
        // exact: rel error within 1e-3.
        let spec = ConvSpec::new(3, 2, 3, 1, 1);
        let x = rand_tensor(Shape::new(2, 3, 8, 8), 5, -1.0, 1.0);
        let w = rand_tensor(spec.weight_shape(), 6, -0.5, 0.5);
        let report = grad_check(
            &[w],
            |tape, vars| {
                let xv = tape.constant(x.clone());
                xv.conv2d(vars[0], None, &spec).unwrap().sum()
            },
            &GradCheckOptions {
                tol: 1e-3,
                ..Default::default()
            },
        );
        assert!(report.pass, "{}", report.summary());
    }

    #[test]
    fn corrupted_backward_is_caught() {
        // A deliberately wrong gradient (x1.01) must fail the check.
        let x = rand_tensor(Shape::new(1, 1, 4, 4), 7, 0.5, 1.5);
        let report = grad_check(
            &[x],
            |tape, vars| {
                let xv = vars[0].value();
                let out = xv.map(|v| v * v);
                let corrupted = tape.push(
                    out,
                    vec![vars[0].id],
                    Box::new(move |g, _| {
                        vec![Some(xv.zip_map(g, |xi, gi| 1.01 * 2.0 * xi * gi))]
                    }),
                );
                corrupted.sum()
            },
            &GradCheckOptions::default(),
        );
        assert!(!report.pass, "corrupted backward slipped through");
    }

    #[test]
    fn leaky_relu_gradient_with_kink_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // keep |x| > 3*eps so central differences never straddle the kink
        let x = Tensor::from_fn(Shape::new(1, 2, 4, 4), |_, _, _, _| {
            let v: f32 = rng.gen_range(0.01..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let report = grad_check(
            &[x],
            |_, vars| vars[0].leaky_relu(0.1).sum(),
            &GradCheckOptions::default(),
        );
        assert!(report.pass, "{}", report.summary());
    }

    #[test]
    fn elementwise_chain_gradients() {
        let x = rand_tensor(Shape::new(1, 2, 3, 3), 9, 0.2, 1.0);
        let y = rand_tensor(Shape::new(1, 2, 3, 3), 10, 0.2, 1.0);
        let report = grad_check(
            &[x, y],
            |_, vars| {
                let a = vars[0];
                let b = vars[1];
                a.mul(b)
                    .add(a.div(b.add_scalar(2.0)))
                    .abs_pow(2.0)
                    .add_scalar(0.5)
                    .pow_const(0.5)
                    .ln()
                    .softplus()
                    .sum()
            },
            &GradCheckOptions::default(),
        );
        assert!(report.pass, "{}", report.summary());
    }
}
