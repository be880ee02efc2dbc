//! Desk-scale learned video codec built around heterogeneous deformable
//! motion compensation, divisive-normalization transforms and a hyperprior
//! entropy model with a real bitstream.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense BCHW tensors, the tape-based autodiff engine and the
//!   handful of differentiable layers everything else is built from
//! - [`deform`] — heterogeneous (1x1/3x3/5x5) and single-size deformable
//!   convolution plus the analytic compute-cost model
//! - [`divnorm`] — GDN/IGDN, spatial-neighborhood divisive normalization and
//!   the residual-block + normalization composites
//! - [`entropy`] — quantization, factorized/Gaussian likelihood models, a
//!   byte-exact range coder and the frame-record wire format
//! - [`nets`] — the fixed network graphs: feature extraction, motion
//!   estimation, transform autoencoders, refinement and multi-frame
//!   enhancement
//! - [`pipeline`] — frame/sequence encode-decode, RD losses, the progressive
//!   training stages and synthetic clip generation
//! - [`metrics`] — PSNR, differentiable MS-SSIM and BD-rate

pub mod deform;
pub mod divnorm;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tape, Tensor, Var};
