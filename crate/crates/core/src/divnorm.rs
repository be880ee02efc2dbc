//! The divisive-normalization family used by the transform networks.
//!
//! All variants share one shape: the input is divided (forward) or
//! multiplied (inverse) by `(beta + pool(|z|^alpha))^eps`, where the pool
//! gathers either the other channels at the same site (GDN), a spatial
//! window within the channel (SNCDN), or the union of both (MixDN).
//!
//! The forward/inverse pairs are structural inverses in multiplicative form,
//! not exact functional inverses: the inverse pools over the decoded signal
//! itself. They coincide exactly only in the degenerate gamma = 0 case.
//!
//! Parameter positivity is kept by reparameterization — stored raw values
//! are squared (and beta floored) when bound onto the tape — so no
//! projection step is needed after optimizer updates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, ResBlockVars, Shape, Tape, Tensor, Var};

/// Lower bound on the derived beta; keeps every denominator strictly positive.
pub const BETA_FLOOR: f32 = 1e-6;

/// Which neighborhood the divisive pool gathers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DnKind {
    /// Pool across channels at one spatial site (GDN).
    Channel,
    /// Pool across a spatial window within each channel (SNCDN).
    Spatial,
    /// Union of both pools (MixDN).
    Mixed,
}

/// How the spatial gamma is parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SpatialGammaMode {
    /// One learnable weight per channel per window offset.
    PerOffset,
    /// One learnable weight per channel, shared across the window.
    PerChannel,
}

/// Divisive-normalization parameters bound onto a tape. `beta` and the
/// gammas are the derived (positive) values; see [`DivNormParams::bind`].
pub struct DnVars<'t> {
    /// (1, C, 1, 1), strictly positive.
    pub beta: Var<'t>,
    /// (C, C, 1, 1) channel pool weights; present for Channel and Mixed.
    pub gamma_ch: Option<Var<'t>>,
    /// Spatial pool weights; present for Spatial and Mixed.
    pub gamma_sp: Option<SpatialGamma<'t>>,
    pub window: usize,
    pub alpha: f32,
    pub eps_exp: f32,
}

pub enum SpatialGamma<'t> {
    /// (C, 1, window, window) depthwise weights.
    PerOffset(Var<'t>),
    /// (1, C, 1, 1) scalar per channel applied to a window box sum.
    PerChannel(Var<'t>),
}

/// `z / (beta + pool(|z|^alpha))^eps`, or the multiplicative inverse form
/// when `inverse` is set.
pub fn divnorm<'t>(z: Var<'t>, p: &DnVars<'t>, inverse: bool) -> Result<Var<'t>> {
    let c = z.shape().c;
    if p.window % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "spatial window must be odd, got {}",
            p.window
        )));
    }
    let zp = z.abs_pow(p.alpha);
    let mut pool: Option<Var<'t>> = None;
    if let Some(gamma_ch) = p.gamma_ch {
        let gs = gamma_ch.shape();
        if gs != Shape::new(c, c, 1, 1) {
            return Err(Error::shape(
                "divnorm",
                format!("channel gamma {} does not match CxC for C={}", gs, c),
            ));
        }
        let spec = ConvSpec::new(c, c, 1, 1, 0);
        pool = Some(zp.conv2d(gamma_ch, None, &spec)?);
    }
    if let Some(gamma_sp) = &p.gamma_sp {
        let pad = (p.window - 1) / 2;
        let spec = ConvSpec::new(c, c, p.window, 1, pad).grouped(c);
        let sp = match gamma_sp {
            SpatialGamma::PerOffset(g) => zp.conv2d(*g, None, &spec)?,
            SpatialGamma::PerChannel(g) => {
                let ones = z
                    .tape()
                    .constant(Tensor::full(spec.weight_shape(), 1.0));
                zp.conv2d(ones, None, &spec)?.mul_channel(*g)?
            }
        };
        pool = Some(match pool {
            Some(ch) => ch.add(sp),
            None => sp,
        });
    }
    let Some(pool) = pool else {
        return Err(Error::InvalidConfig(
            "divnorm needs at least one pool".into(),
        ));
    };
    // bias the pool with beta via a channel broadcast: beta + pool
    let den = pool.add(broadcast_beta(z, p.beta, c)?);
    let e = if inverse { p.eps_exp } else { -p.eps_exp };
    Ok(z.mul(den.pow_const(e)))
}

/// beta (1,C,1,1) broadcast to the full activation shape via a constant-one
/// channel scale; keeps gradients flowing back to beta.
fn broadcast_beta<'t>(like: Var<'t>, beta: Var<'t>, c: usize) -> Result<Var<'t>> {
    let s = like.shape();
    if beta.shape() != Shape::new(1, c, 1, 1) {
        return Err(Error::shape(
            "divnorm",
            format!("beta {} does not match {} channels", beta.shape(), c),
        ));
    }
    let ones = like.tape().constant(Tensor::full(s, 1.0));
    ones.mul_channel(beta)
}

/// GDN: channel pool, divisive.
pub fn gdn<'t>(z: Var<'t>, p: &DnVars<'t>) -> Result<Var<'t>> {
    divnorm(z, p, false)
}

/// IGDN: channel pool, multiplicative.
pub fn igdn<'t>(y: Var<'t>, p: &DnVars<'t>) -> Result<Var<'t>> {
    divnorm(y, p, true)
}

/// SNCDN: spatial-neighborhood pool, divisive.
pub fn sncdn<'t>(z: Var<'t>, p: &DnVars<'t>) -> Result<Var<'t>> {
    divnorm(z, p, false)
}

/// iSNCDN: spatial-neighborhood pool, multiplicative.
pub fn isncdn<'t>(y: Var<'t>, p: &DnVars<'t>) -> Result<Var<'t>> {
    divnorm(y, p, true)
}

/// MixDN: union of channel and spatial pools, divisive (and inverse).
pub fn mixdn<'t>(z: Var<'t>, p: &DnVars<'t>) -> Result<Var<'t>> {
    divnorm(z, p, false)
}

pub fn imixdn<'t>(y: Var<'t>, p: &DnVars<'t>) -> Result<Var<'t>> {
    divnorm(y, p, true)
}

/// Residual block united with a divisive normalization. On the encoder side
/// the block runs first and the normalization second; the decoder-side
/// inverse applies the inverse normalization before the residual branch.
pub fn resdn_block<'t>(
    x: Var<'t>,
    res: &ResBlockVars<'t>,
    dn: &DnVars<'t>,
    inverse: bool,
) -> Result<Var<'t>> {
    if inverse {
        divnorm(x, dn, true)?.residual_block(res)
    } else {
        divnorm(x.residual_block(res)?, dn, false)
    }
}

/// Stored divisive-normalization parameters in raw (unconstrained) form.
///
/// The derived values are `beta = beta_raw^2 + BETA_FLOOR` and
/// `gamma = gamma_raw^2`, so positivity survives any optimizer step.
#[derive(Clone)]
pub struct DivNormParams {
    pub kind: DnKind,
    pub channels: usize,
    pub window: usize,
    pub alpha: f32,
    pub eps_exp: f32,
    pub gamma_mode: SpatialGammaMode,
    pub beta_raw: Tensor,
    pub gamma_ch_raw: Option<Tensor>,
    pub gamma_sp_raw: Option<Tensor>,
}

impl DivNormParams {
    /// Fresh parameters: beta near 1, gammas small and positive.
    pub fn init(kind: DnKind, channels: usize, window: usize, rng: &mut impl Rng) -> DivNormParams {
        let beta_raw = Tensor::full(Shape::new(1, channels, 1, 1), 1.0);
        let gamma_ch_raw = matches!(kind, DnKind::Channel | DnKind::Mixed).then(|| {
            Tensor::from_fn(Shape::new(channels, channels, 1, 1), |o, i, _, _| {
                if o == i {
                    0.32 // diagonal starts at gamma ~ 0.1
                } else {
                    rng.gen_range(0.0..0.1)
                }
            })
        });
        let gamma_sp_raw = matches!(kind, DnKind::Spatial | DnKind::Mixed).then(|| {
            Tensor::from_fn(Shape::new(channels, 1, window, window), |_, _, _, _| {
                rng.gen_range(0.05..0.35)
            })
        });
        DivNormParams {
            kind,
            channels,
            window,
            alpha: 2.0,
            eps_exp: 0.5,
            gamma_mode: SpatialGammaMode::PerOffset,
            beta_raw,
            gamma_ch_raw,
            gamma_sp_raw,
        }
    }

    /// Derived beta values; always >= BETA_FLOOR by construction.
    pub fn beta(&self) -> Tensor {
        let b = self.beta_raw.map(|v| v * v + BETA_FLOOR);
        debug_assert!(b.data().iter().all(|&v| v >= BETA_FLOOR));
        b
    }

    /// Derived channel gamma; elementwise nonnegative.
    pub fn gamma_ch(&self) -> Option<Tensor> {
        let g = self.gamma_ch_raw.as_ref()?.map(|v| v * v);
        debug_assert!(g.data().iter().all(|&v| v >= 0.0));
        Some(g)
    }

    /// Derived spatial gamma; elementwise nonnegative.
    pub fn gamma_sp(&self) -> Option<Tensor> {
        let g = self.gamma_sp_raw.as_ref()?.map(|v| v * v);
        debug_assert!(g.data().iter().all(|&v| v >= 0.0));
        Some(g)
    }

    /// Binds the raw parameters as leaves and reparameterizes on-tape, so
    /// gradients flow to the raw values.
    pub fn bind<'t>(&self, tape: &'t Tape) -> DnVars<'t> {
        let beta = tape
            .leaf(self.beta_raw.clone())
            .abs_pow(2.0)
            .add_scalar(BETA_FLOOR);
        let gamma_ch = self
            .gamma_ch_raw
            .as_ref()
            .map(|g| tape.leaf(g.clone()).abs_pow(2.0));
        let gamma_sp = self.gamma_sp_raw.as_ref().map(|g| {
            let v = tape.leaf(g.clone()).abs_pow(2.0);
            match self.gamma_mode {
                SpatialGammaMode::PerOffset => SpatialGamma::PerOffset(v),
                SpatialGammaMode::PerChannel => SpatialGamma::PerChannel(v),
            }
        });
        DnVars {
            beta,
            gamma_ch,
            gamma_sp,
            window: self.window,
            alpha: self.alpha,
            eps_exp: self.eps_exp,
        }
    }
}

/// Builds `DnVars` for tests and direct functional use from derived values.
pub fn dn_vars_from_derived<'t>(
    tape: &'t Tape,
    kind: DnKind,
    beta: Tensor,
    gamma_ch: Option<Tensor>,
    gamma_sp: Option<Tensor>,
    window: usize,
) -> DnVars<'t> {
    let _ = kind;
    DnVars {
        beta: tape.leaf(beta),
        gamma_ch: gamma_ch.map(|g| tape.leaf(g)),
        gamma_sp: gamma_sp.map(|g| SpatialGamma::PerOffset(tape.leaf(g))),
        window,
        alpha: 2.0,
        eps_exp: 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
    }

    fn identity_vars(tape: &Tape, kind: DnKind, c: usize, window: usize) -> DnVars<'_> {
        dn_vars_from_derived(
            tape,
            kind,
            Tensor::full(Shape::new(1, c, 1, 1), 1.0),
            matches!(kind, DnKind::Channel | DnKind::Mixed)
                .then(|| Tensor::zeros(Shape::new(c, c, 1, 1))),
            matches!(kind, DnKind::Spatial | DnKind::Mixed)
                .then(|| Tensor::zeros(Shape::new(c, 1, window, window))),
            window,
        )
    }

    #[test]
    fn every_variant_degenerates_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_tensor(Shape::new(1, 3, 4, 4), &mut rng, -2.0, 2.0);
        for kind in [DnKind::Channel, DnKind::Spatial, DnKind::Mixed] {
            for inverse in [false, true] {
                let tape = Tape::new();
                let p = identity_vars(&tape, kind, 3, 3);
                let xv = tape.leaf(x.clone());
                let y = divnorm(xv, &p, inverse).unwrap().value();
                assert_eq!(y.max_abs_diff(&x), 0.0, "{kind:?} inverse={inverse}");
            }
        }
    }

    #[test]
    fn gdn_scalar_hand_evaluation() {
        // C = 1, gamma = 1, beta = 0, z = 3 -> 3 / sqrt(9) = 1
        let tape = Tape::new();
        let p = dn_vars_from_derived(
            &tape,
            DnKind::Channel,
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
            Some(Tensor::full(Shape::new(1, 1, 1, 1), 1.0)),
            None,
            3,
        );
        let z = tape.leaf(Tensor::scalar(3.0));
        let y = gdn(z, &p).unwrap().value().scalar_value();
        assert!((y - 1.0).abs() < 1e-6);
    }

    #[test]
    fn igdn_constant_scaling() {
        // gamma = 0, beta = 4 -> z_hat = 2 y
        let tape = Tape::new();
        let p = dn_vars_from_derived(
            &tape,
            DnKind::Channel,
            Tensor::full(Shape::new(1, 2, 1, 1), 4.0),
            Some(Tensor::zeros(Shape::new(2, 2, 1, 1))),
            None,
            3,
        );
        let y = tape.leaf(Tensor::full(Shape::new(1, 2, 3, 3), 1.5));
        let z = igdn(y, &p).unwrap().value();
        assert!(z.max_abs_diff(&Tensor::full(Shape::new(1, 2, 3, 3), 3.0)) < 1e-6);
    }

    #[test]
    fn isncdn_constant_scaling() {
        // gamma = 0, beta = 1/4 -> z_hat = y / 2
        let tape = Tape::new();
        let p = dn_vars_from_derived(
            &tape,
            DnKind::Spatial,
            Tensor::full(Shape::new(1, 1, 1, 1), 0.25),
            None,
            Some(Tensor::zeros(Shape::new(1, 1, 3, 3))),
            3,
        );
        let y = tape.leaf(Tensor::full(Shape::new(1, 1, 4, 4), 3.0));
        let z = isncdn(y, &p).unwrap().value();
        assert!(z.max_abs_diff(&Tensor::full(Shape::new(1, 1, 4, 4), 1.5)) < 1e-6);
    }

    #[test]
    fn sncdn_constant_interior_hand_evaluation() {
        // constant z = 2, 3x3 window, gamma_i = 1/9, beta = 0:
        // y = 2 / sqrt(9 * (1/9) * 4) = 1 away from the borders
        let tape = Tape::new();
        let p = dn_vars_from_derived(
            &tape,
            DnKind::Spatial,
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
            None,
            Some(Tensor::full(Shape::new(1, 1, 3, 3), 1.0 / 9.0)),
            3,
        );
        let z = tape.leaf(Tensor::full(Shape::new(1, 1, 6, 6), 2.0));
        let y = sncdn(z, &p).unwrap().value();
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((y.at(0, 0, yy, xx) - 1.0).abs() < 1e-6);
            }
        }
        // borders see zero padding, so the pool is smaller and y is larger
        assert!(y.at(0, 0, 0, 0) > 1.0);
    }

    #[test]
    fn mixdn_degenerates_to_pure_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = rand_tensor(Shape::new(1, 3, 5, 5), &mut rng, -1.5, 1.5);
        let beta = rand_tensor(Shape::new(1, 3, 1, 1), &mut rng, 0.5, 1.5);
        let gch = rand_tensor(Shape::new(3, 3, 1, 1), &mut rng, 0.0, 0.5);
        let gsp = rand_tensor(Shape::new(3, 1, 3, 3), &mut rng, 0.0, 0.5);

        // spatial gamma zeroed: mixdn == gdn with the same channel gamma
        {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let mixed = dn_vars_from_derived(
                &tape,
                DnKind::Mixed,
                beta.clone(),
                Some(gch.clone()),
                Some(Tensor::zeros(Shape::new(3, 1, 3, 3))),
                3,
            );
            let pure = dn_vars_from_derived(
                &tape,
                DnKind::Channel,
                beta.clone(),
                Some(gch.clone()),
                None,
                3,
            );
            let a = mixdn(xv, &mixed).unwrap().value();
            let b = gdn(xv, &pure).unwrap().value();
            assert_eq!(a.max_abs_diff(&b), 0.0);
        }
        // channel gamma zeroed: mixdn == sncdn with the same spatial gamma
        {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let mixed = dn_vars_from_derived(
                &tape,
                DnKind::Mixed,
                beta.clone(),
                Some(Tensor::zeros(Shape::new(3, 3, 1, 1))),
                Some(gsp.clone()),
                3,
            );
            let pure =
                dn_vars_from_derived(&tape, DnKind::Spatial, beta.clone(), None, Some(gsp), 3);
            let a = mixdn(xv, &mixed).unwrap().value();
            let b = sncdn(xv, &pure).unwrap().value();
            assert_eq!(a.max_abs_diff(&b), 0.0);
        }
    }

    #[test]
    fn even_window_rejected() {
        let tape = Tape::new();
        let mut p = identity_vars(&tape, DnKind::Spatial, 2, 3);
        p.window = 4;
        let z = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        assert!(sncdn(z, &p).is_err());
    }

    #[test]
    fn gradients_pass_for_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let c = 2;
        let x = rand_tensor(Shape::new(1, c, 4, 4), &mut rng, -1.5, 1.5);
        let beta_raw = rand_tensor(Shape::new(1, c, 1, 1), &mut rng, 0.5, 1.2);
        let gch_raw = rand_tensor(Shape::new(c, c, 1, 1), &mut rng, 0.1, 0.6);
        let gsp_raw = rand_tensor(Shape::new(c, 1, 3, 3), &mut rng, 0.1, 0.6);
        for (kind, inverse) in [
            (DnKind::Channel, false),
            (DnKind::Channel, true),
            (DnKind::Spatial, false),
            (DnKind::Spatial, true),
            (DnKind::Mixed, false),
        ] {
            let inputs: Vec<Tensor> = match kind {
                DnKind::Channel => vec![x.clone(), beta_raw.clone(), gch_raw.clone()],
                DnKind::Spatial => vec![x.clone(), beta_raw.clone(), gsp_raw.clone()],
                DnKind::Mixed => vec![
                    x.clone(),
                    beta_raw.clone(),
                    gch_raw.clone(),
                    gsp_raw.clone(),
                ],
            };
            let report = grad_check(
                &inputs,
                |_, vars| {
                    // reparameterize on tape as the real layers do
                    let beta = vars[1].abs_pow(2.0).add_scalar(BETA_FLOOR);
                    let (gamma_ch, gamma_sp) = match kind {
                        DnKind::Channel => (Some(vars[2].abs_pow(2.0)), None),
                        DnKind::Spatial => {
                            (None, Some(SpatialGamma::PerOffset(vars[2].abs_pow(2.0))))
                        }
                        DnKind::Mixed => (
                            Some(vars[2].abs_pow(2.0)),
                            Some(SpatialGamma::PerOffset(vars[3].abs_pow(2.0))),
                        ),
                    };
                    let p = DnVars {
                        beta,
                        gamma_ch,
                        gamma_sp,
                        window: 3,
                        alpha: 2.0,
                        eps_exp: 0.5,
                    };
                    divnorm(vars[0], &p, inverse).unwrap().sum()
                },
                &GradCheckOptions::default(),
            );
            assert!(report.pass, "{kind:?} inverse={inverse}: {}", report.summary());
        }
    }

    #[test]
    fn per_channel_gamma_mode_matches_tied_per_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let c = 2;
        let x = rand_tensor(Shape::new(1, c, 5, 5), &mut rng, -1.0, 1.0);
        let beta = rand_tensor(Shape::new(1, c, 1, 1), &mut rng, 0.5, 1.0);
        let scalar = rand_tensor(Shape::new(1, c, 1, 1), &mut rng, 0.05, 0.3);
        let tied = Tensor::from_fn(Shape::new(c, 1, 3, 3), |ch, _, _, _| scalar.data()[ch]);

        let tape = Tape::new();
        let xv = tape.leaf(x);
        let a = divnorm(
            xv,
            &DnVars {
                beta: tape.leaf(beta.clone()),
                gamma_ch: None,
                gamma_sp: Some(SpatialGamma::PerChannel(tape.leaf(scalar))),
                window: 3,
                alpha: 2.0,
                eps_exp: 0.5,
            },
            false,
        )
        .unwrap()
        .value();
        let b = divnorm(
            xv,
            &DnVars {
                beta: tape.leaf(beta),
                gamma_ch: None,
                gamma_sp: Some(SpatialGamma::PerOffset(tape.leaf(tied))),
                window: 3,
                alpha: 2.0,
                eps_exp: 0.5,
            },
            false,
        )
        .unwrap()
        .value();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn resdn_zero_branch_zero_gamma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let c = 3;
        let x = rand_tensor(Shape::new(1, c, 4, 4), &mut rng, -1.0, 1.0);
        let tape = Tape::new();
        let zero_w = tape.leaf(Tensor::zeros(Shape::new(c, c, 3, 3)));
        let zero_b = tape.leaf(Tensor::zeros(Shape::new(1, c, 1, 1)));
        let res = ResBlockVars {
            w1: zero_w,
            b1: zero_b,
            w2: zero_w,
            b2: zero_b,
            slope: 0.1,
        };
        let p = identity_vars(&tape, DnKind::Channel, c, 3);
        let xv = tape.leaf(x.clone());
        for inverse in [false, true] {
            let y = resdn_block(xv, &res, &p, inverse).unwrap().value();
            assert_eq!(y.max_abs_diff(&x), 0.0);
        }
    }

    #[test]
    fn resdn_composition_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let c = 2;
        let x = rand_tensor(Shape::new(1, c, 4, 4), &mut rng, -1.0, 1.0);
        let tape = Tape::new();
        let res = ResBlockVars {
            w1: tape.leaf(rand_tensor(Shape::new(c, c, 3, 3), &mut rng, -0.3, 0.3)),
            b1: tape.leaf(rand_tensor(Shape::new(1, c, 1, 1), &mut rng, -0.1, 0.1)),
            w2: tape.leaf(rand_tensor(Shape::new(c, c, 3, 3), &mut rng, -0.3, 0.3)),
            b2: tape.leaf(rand_tensor(Shape::new(1, c, 1, 1), &mut rng, -0.1, 0.1)),
            slope: 0.1,
        };
        let p = dn_vars_from_derived(
            &tape,
            DnKind::Channel,
            rand_tensor(Shape::new(1, c, 1, 1), &mut rng, 0.5, 1.5),
            Some(rand_tensor(Shape::new(c, c, 1, 1), &mut rng, 0.0, 0.4)),
            None,
            3,
        );
        let xv = tape.leaf(x);
        let composite = resdn_block(xv, &res, &p, false).unwrap().value();
        let sequential = gdn(xv.residual_block(&res).unwrap(), &p).unwrap().value();
        assert_eq!(composite.max_abs_diff(&sequential), 0.0);
    }

    #[test]
    fn resdn_gradient_check_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let c = 2;
        let x = rand_tensor(Shape::new(1, c, 4, 4), &mut rng, -1.0, 1.0);
        let w1 = rand_tensor(Shape::new(c, c, 3, 3), &mut rng, -0.3, 0.3);
        let w2 = rand_tensor(Shape::new(c, c, 3, 3), &mut rng, -0.3, 0.3);
        let beta_raw = rand_tensor(Shape::new(1, c, 1, 1), &mut rng, 0.7, 1.2);
        let gsp_raw = rand_tensor(Shape::new(c, 1, 3, 3), &mut rng, 0.1, 0.5);
        let report = grad_check(
            &[x, w1, w2, beta_raw, gsp_raw],
            |tape, vars| {
                let zeros = tape.constant(Tensor::zeros(Shape::new(1, c, 1, 1)));
                let res = ResBlockVars {
                    w1: vars[1],
                    b1: zeros,
                    w2: vars[2],
                    b2: zeros,
                    slope: 0.1,
                };
                let p = DnVars {
                    beta: vars[3].abs_pow(2.0).add_scalar(BETA_FLOOR),
                    gamma_ch: None,
                    gamma_sp: Some(SpatialGamma::PerOffset(vars[4].abs_pow(2.0))),
                    window: 3,
                    alpha: 2.0,
                    eps_exp: 0.5,
                };
                resdn_block(vars[0], &res, &p, false).unwrap().sum()
            },
            &GradCheckOptions::default(),
        );
        assert!(report.pass, "{}", report.summary());
    }
}
