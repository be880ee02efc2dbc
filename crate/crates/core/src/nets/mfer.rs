//! Multi-frame enhanced reconstruction.
//!
//! A decoder-side enhancement stage: the decoded frame plus context (the
//! predicted frame and the decoded residual) form a target feature; features
//! of up to three previous reconstructions are aligned to it with the same
//! deformable compensation operator the codec uses, and everything is fused
//! into a correction added to the decoded frame.
//!
//! Every input is available on the decoder side, so toggling this module
//! cannot change a single bitstream byte. The fusion tail is
//! zero-initialized: an untrained network is exactly the identity.

use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, ResBlock, UpConv};
use super::motion::Compensation;
use super::{Binder, CodecConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::Var;

pub struct MferNet {
    target1: Conv,
    target2: Conv,
    ref1: Conv,
    ref2: Conv,
    off_fuse: Conv,
    off_head: Conv,
    align: Compensation,
    fuse: Conv,
    blocks: Vec<ResBlock>,
    up1: UpConv,
    up2: Conv,
    slope: f32,
}

impl MferNet {
    pub fn new(prefix: &str, cfg: &CodecConfig) -> MferNet {
        let c = cfg.net.base_channels;
        let slope = cfg.net.lrelu_slope;
        MferNet {
            // context = decoded + predicted + residual, 9 channels
            target1: Conv::new(format!("{prefix}.target1"), 9, c, 5, 2, 2),
            target2: Conv::new(format!("{prefix}.target2"), c, c, 3, 2, 1),
            ref1: Conv::new(format!("{prefix}.ref1"), 3, c, 5, 2, 2),
            ref2: Conv::new(format!("{prefix}.ref2"), c, c, 3, 2, 1),
            off_fuse: Conv::new(format!("{prefix}.off_fuse"), 2 * c, c, 3, 1, 1),
            off_head: Conv::new(
                format!("{prefix}.off_head"),
                c,
                cfg.compensation.offset_channels(),
                3,
                1,
                1,
            )
            .zero_init(),
            align: Compensation::new(&format!("{prefix}.align"), &cfg.net, cfg.compensation),
            fuse: Conv::new(format!("{prefix}.fuse"), 4 * c, c, 3, 1, 1),
            blocks: (0..2)
                .map(|i| ResBlock::new(format!("{prefix}.res{i}"), c, slope))
                .collect(),
            up1: UpConv::new(format!("{prefix}.up1"), c, c, 3),
            up2: Conv::new(format!("{prefix}.up2"), c, 12, 3, 1, 1).zero_init(),
            slope,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.target1.init(params, rng);
        self.target2.init(params, rng);
        self.ref1.init(params, rng);
        self.ref2.init(params, rng);
        self.off_fuse.init(params, rng);
        self.off_head.init(params, rng);
        self.align.init(params, rng);
        self.fuse.init(params, rng);
        for b in &self.blocks {
            b.init(params, rng);
        }
        self.up1.init(params, rng);
        self.up2.init(params, rng);
    }

    /// Enhances `decoded` using the prediction, the decoded residual and up
    /// to three reference reconstructions (the most recent last). Missing
    /// references must be substituted by the caller (repeat-oldest rule).
    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        decoded: Var<'t>,
        predicted: Var<'t>,
        residual: Var<'t>,
        refs: &[Var<'t>; 3],
    ) -> Result<Var<'t>> {
        let ctx = Var::concat_channels(&[decoded, predicted, residual])?;
        let mut target = self.target1.forward(b, ctx)?.leaky_relu(self.slope);
        target = self.target2.forward(b, target)?.leaky_relu(self.slope);

        let mut aligned = Vec::with_capacity(3);
        for &r in refs {
            let mut rf = self.ref1.forward(b, r)?.leaky_relu(self.slope);
            rf = self.ref2.forward(b, rf)?.leaky_relu(self.slope);
            let fused = Var::concat_channels(&[target, rf])?;
            let off = self
                .off_head
                .forward(b, self.off_fuse.forward(b, fused)?.leaky_relu(self.slope))?;
            aligned.push(self.align.forward(b, rf, off)?);
        }

        let mut x = Var::concat_channels(&[target, aligned[0], aligned[1], aligned[2]])?;
        x = self.fuse.forward(b, x)?.leaky_relu(self.slope);
        for block in &self.blocks {
            x = block.forward(b, x)?;
        }
        x = self.up1.forward(b, x)?.leaky_relu(self.slope);
        let correction = self.up2.forward(b, x)?.depth_to_space(2)?;
        if correction.shape() != decoded.shape() {
            return Err(Error::shape(
                "mfer",
                format!("{} vs {}", correction.shape(), decoded.shape()),
            ));
        }
        Ok(decoded.add(correction))
    }
}
