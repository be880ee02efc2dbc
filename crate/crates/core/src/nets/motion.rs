//! Feature extraction, motion estimation, deformable compensation and the
//! refinement network that restores compensated features to a frame.

use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, ResBlock, UpConv};
use super::{Binder, CompKind, NetworkConfig, Params};
use crate::deform::{deform_conv_single, het_deform_conv, HetDeformWeights, HetOffsets};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor, Var};

/// Two stride-2 convolutions and three cascaded residual blocks; frames at
/// (B, 3, H, W) become features at (B, C, H/4, W/4).
pub struct FeatureExtractor {
    conv1: Conv,
    conv2: Conv,
    blocks: Vec<ResBlock>,
    slope: f32,
}

impl FeatureExtractor {
    pub fn new(prefix: &str, cfg: &NetworkConfig) -> FeatureExtractor {
        let c = cfg.base_channels;
        FeatureExtractor {
            conv1: Conv::new(format!("{prefix}.conv1"), 3, c, 5, 2, 2),
            conv2: Conv::new(format!("{prefix}.conv2"), c, c, 3, 2, 1),
            blocks: (0..3)
                .map(|i| ResBlock::new(format!("{prefix}.res{i}"), c, cfg.lrelu_slope))
                .collect(),
            slope: cfg.lrelu_slope,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.conv1.init(params, rng);
        self.conv2.init(params, rng);
        for b in &self.blocks {
            b.init(params, rng);
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, frame: Var<'t>) -> Result<Var<'t>> {
        let s = frame.shape();
        if s.c != 3 {
            return Err(Error::shape(
                "extract_features",
                format!("expected 3 input channels, got {}", s.c),
            ));
        }
        if s.h % 4 != 0 || s.w % 4 != 0 {
            return Err(Error::shape(
                "extract_features",
                format!("spatial extents {}x{} not divisible by 4", s.h, s.w),
            ));
        }
        let mut x = self.conv1.forward(b, frame)?.leaky_relu(self.slope);
        x = self.conv2.forward(b, x)?.leaky_relu(self.slope);
        for block in &self.blocks {
            x = block.forward(b, x)?;
        }
        Ok(x)
    }
}

/// Two ordinary convolutions fuse the concatenated adjacent-frame features
/// into packed deformable kernel offsets. The final convolution starts at
/// zero, so motion begins as the identity warp.
pub struct MotionEstimator {
    fuse: Conv,
    head: Conv,
    slope: f32,
}

impl MotionEstimator {
    pub fn new(prefix: &str, cfg: &NetworkConfig, comp: CompKind) -> MotionEstimator {
        let c = cfg.base_channels;
        MotionEstimator {
            fuse: Conv::new(format!("{prefix}.fuse"), 2 * c, c, 3, 1, 1),
            head: Conv::new(format!("{prefix}.head"), c, comp.offset_channels(), 3, 1, 1)
                .zero_init(),
            slope: cfg.lrelu_slope,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.fuse.init(params, rng);
        self.head.init(params, rng);
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, f_prev: Var<'t>, f_cur: Var<'t>) -> Result<Var<'t>> {
        if f_prev.shape() != f_cur.shape() {
            return Err(Error::shape(
                "estimate_motion",
                format!("{} vs {}", f_prev.shape(), f_cur.shape()),
            ));
        }
        let x = Var::concat_channels(&[f_prev, f_cur])?;
        let x = self.fuse.forward(b, x)?.leaky_relu(self.slope);
        self.head.forward(b, x)
    }
}

/// Deformable compensation of reference features with decoded offsets.
pub struct Compensation {
    prefix: String,
    kind: CompKind,
    channels: usize,
}

impl Compensation {
    pub fn new(prefix: &str, cfg: &NetworkConfig, kind: CompKind) -> Compensation {
        Compensation {
            prefix: prefix.to_string(),
            kind,
            channels: cfg.base_channels,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        use rand::Rng;
        let c = self.channels;
        match self.kind {
            CompKind::Het => {
                for (name, k) in [("w1", 1usize), ("w3", 3), ("w5", 5)] {
                    let shape = Shape::new(c, c / 3, k, k);
                    // the three group outputs are summed, so each group gets
                    // a third of the variance budget
                    let bound = (1.0 / (c / 3 * k * k) as f32).sqrt();
                    params.insert(
                        format!("{}.{name}", self.prefix),
                        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-bound..bound)),
                    );
                }
            }
            CompKind::Single(k) => {
                let shape = Shape::new(c, c, k, k);
                let bound = (3.0 / (c * k * k) as f32).sqrt();
                params.insert(
                    format!("{}.w", self.prefix),
                    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-bound..bound)),
                );
            }
        }
    }

    /// Aligns `f_ref` using the packed offset tensor.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, f_ref: Var<'t>, offsets: Var<'t>) -> Result<Var<'t>> {
        match self.kind {
            CompKind::Het => {
                let weights = HetDeformWeights {
                    w1: b.var(&format!("{}.w1", self.prefix)),
                    w3: b.var(&format!("{}.w3", self.prefix)),
                    w5: b.var(&format!("{}.w5", self.prefix)),
                };
                het_deform_conv(f_ref, &HetOffsets::from_packed(offsets)?, &weights)
            }
            CompKind::Single(k) => {
                deform_conv_single(f_ref, offsets, b.var(&format!("{}.w", self.prefix)), k)
            }
        }
    }
}

/// Restores compensated features to a full-resolution predicted frame:
/// fusion with the reference features, two residual blocks, and two
/// sub-pixel (depth-to-space) upsampling stages.
pub struct RefinementNet {
    fuse: Conv,
    blocks: Vec<ResBlock>,
    up1: UpConv,
    up2: Conv,
    slope: f32,
}

impl RefinementNet {
    pub fn new(prefix: &str, cfg: &NetworkConfig) -> RefinementNet {
        let c = cfg.base_channels;
        RefinementNet {
            fuse: Conv::new(format!("{prefix}.fuse"), 2 * c, c, 3, 1, 1),
            blocks: (0..2)
                .map(|i| ResBlock::new(format!("{prefix}.res{i}"), c, cfg.lrelu_slope))
                .collect(),
            up1: UpConv::new(format!("{prefix}.up1"), c, c, 3),
            up2: Conv::new(format!("{prefix}.up2"), c, 12, 3, 1, 1),
            slope: cfg.lrelu_slope,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.fuse.init(params, rng);
        for b in &self.blocks {
            b.init(params, rng);
        }
        self.up1.init(params, rng);
        self.up2.init(params, rng);
    }

    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        f_compensated: Var<'t>,
        f_prev: Var<'t>,
    ) -> Result<Var<'t>> {
        let mut x = Var::concat_channels(&[f_compensated, f_prev])?;
        x = self.fuse.forward(b, x)?.leaky_relu(self.slope);
        for block in &self.blocks {
            x = block.forward(b, x)?;
        }
        x = self.up1.forward(b, x)?.leaky_relu(self.slope);
        self.up2.forward(b, x)?.depth_to_space(2)
    }
}
