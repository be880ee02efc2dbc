//! Rate-distortion objectives for the progressive training stages.

use super::{RdLambda, RdMetric};
use crate::error::Result;
use crate::metrics::ms_ssim_var;
use crate::tensor::{Tensor, Var};

/// Mean squared error between a tape value and a fixed target.
pub fn mse_to<'t>(recon: Var<'t>, target: &Tensor) -> Var<'t> {
    let t = recon.tape().constant(target.clone());
    let d = recon.sub(t);
    d.mul(d).mean()
}

/// The stage-dependent distortion d(x, y): MSE for the PSNR models,
/// 1 - MS-SSIM for the MS-SSIM models.
pub fn distortion<'t>(metric: RdMetric, recon: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    match metric {
        RdMetric::Psnr => Ok(mse_to(recon, target)),
        RdMetric::MsSsim => {
            let t = recon.tape().constant(target.clone());
            Ok(ms_ssim_var(recon, t)?.neg().add_scalar(1.0))
        }
    }
}

/// Stage-1 rate-compensation loss: lambda * MSE(compensation, target) plus
/// the motion rate. The distortion is MSE in this stage for all models, and
/// the residual rate is excluded by construction.
pub fn loss_rc<'t>(
    compensation: Var<'t>,
    target: &Tensor,
    motion_bits: Var<'t>,
    lambda: RdLambda,
) -> Var<'t> {
    let pixels = (target.shape().h * target.shape().w) as f32;
    mse_to(compensation, target)
        .scale(lambda.value())
        .add(motion_bits.scale(1.0 / pixels))
}

/// Total RD loss for stages 2 and 3: lambda * d(recon, target) plus both
/// rates (bits normalized per pixel).
pub fn loss_total<'t>(
    reconstruction: Var<'t>,
    target: &Tensor,
    motion_bits: Var<'t>,
    residual_bits: Var<'t>,
    lambda: RdLambda,
) -> Result<Var<'t>> {
    let pixels = (target.shape().h * target.shape().w) as f32;
    let rate = motion_bits.add(residual_bits).scale(1.0 / pixels);
    Ok(distortion(lambda.metric, reconstruction, target)?
        .scale(lambda.value())
        .add(rate))
}
