//! Codec orchestration: P/I frame encoding and decoding, sequence-level
//! GOP scheduling, rate-distortion losses, progressive training and
//! synthetic clip generation.
//!
//! The load-bearing invariant is the closed loop: every reconstruction the
//! encoder uses as a reference is computed from decoded quantities only, so
//! the decoder reproduces encoder-side reconstructions bit for bit from the
//! bitstream and the checkpoint alone.

mod checkpoint;
mod loss;
pub mod synth;
mod train;

pub use checkpoint::CheckpointMeta;
pub use loss::{distortion, loss_rc, loss_total};
pub use train::{train, Adam, Clip, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::entropy::{FrameRecord, FrameType, GaussianConditional, StreamHeader};
use crate::error::{Error, Result};
use crate::metrics::{ms_ssim, psnr_capped};
use crate::nets::{
    Binder, CodecConfig, Compensation, FeatureExtractor, MferNet, MotionEstimator, Params,
    RefinementNet, TransformCoder, TransformTrain,
};
use crate::tensor::{Shape, Tape, Tensor, Var};

/// GOP structure: frame t is intra iff t mod intra_period == 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GopConfig {
    pub intra_period: usize,
}

impl GopConfig {
    pub fn new(intra_period: usize) -> GopConfig {
        GopConfig { intra_period }
    }

    pub fn frame_type(&self, t: usize) -> FrameType {
        if self.intra_period == 0 || t % self.intra_period == 0 {
            FrameType::Intra
        } else {
            FrameType::Predicted
        }
    }
}

/// Distortion metric a model is optimized for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RdMetric {
    Psnr,
    MsSsim,
}

/// Rate-distortion trade-off point: one trained model per grid entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RdLambda {
    pub index: usize,
    pub metric: RdMetric,
}

impl RdLambda {
    pub const PSNR_GRID: [f32; 4] = [256.0, 512.0, 1024.0, 2048.0];
    pub const MSSSIM_GRID: [f32; 4] = [8.0, 16.0, 32.0, 64.0];

    pub fn new(index: usize, metric: RdMetric) -> Result<RdLambda> {
        if index >= 4 {
            return Err(Error::InvalidConfig(format!(
                "lambda index {index} outside the 4-point grid"
            )));
        }
        Ok(RdLambda { index, metric })
    }

    pub fn value(&self) -> f32 {
        match self.metric {
            RdMetric::Psnr => Self::PSNR_GRID[self.index],
            RdMetric::MsSsim => Self::MSSSIM_GRID[self.index],
        }
    }
}

/// Ring of the last three reconstructions, newest last. Only frames the
/// decoder can reproduce may enter it.
#[derive(Clone, Default)]
pub struct FrameBuffer {
    refs: Vec<Tensor>,
}

impl FrameBuffer {
    pub fn new() -> FrameBuffer {
        FrameBuffer::default()
    }

    pub fn push(&mut self, recon: Tensor) {
        if self.refs.len() == 3 {
            self.refs.remove(0);
        }
        self.refs.push(recon);
    }

    pub fn last(&self) -> Option<&Tensor> {
        self.refs.last()
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// The three enhancement references, oldest first; missing entries are
    /// filled by repeating the oldest available reconstruction.
    pub fn mfer_refs(&self) -> Result<[Tensor; 3]> {
        if self.refs.is_empty() {
            return Err(Error::InvalidConfig(
                "enhancement needs a nonempty buffer".into(),
            ));
        }
        let n = self.refs.len();
        let pick = |back: usize| -> Tensor {
            // back = 0 is the newest
            if back < n {
                self.refs[n - 1 - back].clone()
            } else {
                self.refs[0].clone()
            }
        };
        Ok([pick(2), pick(1), pick(0)])
    }
}

/// Per-frame encoder statistics.
#[derive(Clone, Debug)]
pub struct FrameStats {
    pub frame_type: FrameType,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
    /// PSNR of the motion-compensated prediction (P frames).
    pub compensation_psnr: Option<f64>,
    pub motion_bits_estimate: f64,
    pub residual_bits_estimate: f64,
    pub actual_bits: f64,
}

pub struct FrameEncodeOut {
    pub reconstruction: Tensor,
    pub record: FrameRecord,
    pub stats: FrameStats,
}

/// Sequence-level encoder output.
pub struct SequenceStats {
    pub frames: Vec<FrameStats>,
    pub reconstructions: Vec<Tensor>,
    pub total_bpp: f64,
}

/// The codec: structural config plus the parameter store.
pub struct Codec {
    pub config: CodecConfig,
    pub params: Params,
    pub lambda: RdLambda,
    nets: Nets,
    gaussian: GaussianConditional,
    mfer_enabled: bool,
}

struct Nets {
    feature: FeatureExtractor,
    motion_est: MotionEstimator,
    motion_ae: TransformCoder,
    comp: Compensation,
    refine: RefinementNet,
    res_ae: TransformCoder,
    mfer: MferNet,
}

impl Nets {
    fn build(config: &CodecConfig) -> Nets {
        Nets {
            feature: FeatureExtractor::new("feat", &config.net),
            motion_est: MotionEstimator::new("motion_est", &config.net, config.compensation),
            motion_ae: TransformCoder::motion(config),
            comp: Compensation::new("comp", &config.net, config.compensation),
            refine: RefinementNet::new("refine", &config.net),
            res_ae: TransformCoder::residual(config),
            mfer: MferNet::new("mfer", config),
        }
    }

    fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.feature.init(params, rng);
        self.motion_est.init(params, rng);
        self.motion_ae.init(params, rng);
        self.comp.init(params, rng);
        self.refine.init(params, rng);
        self.res_ae.init(params, rng);
        self.mfer.init(params, rng);
    }
}

/// Training output of one P-frame pass.
pub struct TrainStepOut<'t> {
    /// Motion-compensated prediction of the target frame.
    pub compensation: Var<'t>,
    /// Stage-dependent reconstruction: the compensation in stage 1, the
    /// pre-enhancement sum in stage 2, the enhanced frame in stage 3.
    pub reconstruction: Var<'t>,
    /// Motion bits (latent + hyper), differentiable.
    pub motion_bits: Var<'t>,
    /// Residual bits; absent in stage 1 where the residual path is not run.
    pub residual_bits: Option<Var<'t>>,
}

impl Codec {
    /// Fresh codec with seeded parameter initialization.
    pub fn new(config: CodecConfig, lambda: RdLambda, seed: u64) -> Result<Codec> {
        config.validate()?;
        let nets = Nets::build(&config);
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nets.init(&mut params, &mut rng);
        Ok(Codec {
            mfer_enabled: config.use_mfer,
            config,
            params,
            lambda,
            nets,
            gaussian: GaussianConditional::new(),
        })
    }

    /// Rebuilds a codec around existing parameters (checkpoint load).
    pub(crate) fn from_parts(
        config: CodecConfig,
        lambda: RdLambda,
        params: Params,
    ) -> Result<Codec> {
        config.validate()?;
        let nets = Nets::build(&config);
        // structural check: a fresh registry must match the stored one
        let mut expect = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        nets.init(&mut expect, &mut rng);
        if expect.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, build needs {}",
                params.len(),
                expect.len()
            )));
        }
        for (name, tensor) in expect.iter() {
            let stored = params.try_get(name).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing parameter {name}"))
            })?;
            if stored.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} has shape {}, build needs {}",
                    stored.shape(),
                    tensor.shape()
                )));
            }
        }
        Ok(Codec {
            mfer_enabled: config.use_mfer,
            config,
            params,
            lambda,
            nets,
            gaussian: GaussianConditional::new(),
        })
    }

    /// Runtime toggle for the enhancement stage; never affects the
    /// bitstream, only reconstructions.
    pub fn set_mfer_enabled(&mut self, enabled: bool) {
        self.mfer_enabled = enabled;
    }

    pub fn mfer_enabled(&self) -> bool {
        self.mfer_enabled
    }

    fn validate_frame(&self, frame: &Tensor) -> Result<()> {
        let s = frame.shape();
        if s.b != 1 || s.c != 3 {
            return Err(Error::shape(
                "codec",
                format!("expected a 1x3xHxW frame, got {s}"),
            ));
        }
        if s.h % 64 != 0 || s.w % 64 != 0 {
            return Err(Error::shape(
                "codec",
                format!("frame extents {}x{} must be multiples of 64", s.h, s.w),
            ));
        }
        Ok(())
    }

    /// Training forward pass for one P step, on a caller-provided binder so
    /// gradients can be routed back by name afterwards. Stage 1 runs only
    /// the motion path; stage 2 adds the residual path; stage 3 adds
    /// enhancement.
    pub fn forward_train_p_bound<'t>(
        &self,
        b: &Binder<'t, '_>,
        stage: u8,
        frame: &Tensor,
        prev_recon: &Tensor,
        refs: Option<&[Tensor; 3]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainStepOut<'t>> {
        self.validate_frame(frame)?;
        let tape = b.tape();
        let target = tape.constant(frame.clone());
        let prev = tape.constant(prev_recon.clone());

        let f_prev = self.nets.feature.forward(b, prev)?;
        let f_cur = self.nets.feature.forward(b, target)?;
        let m = self.nets.motion_est.forward(b, f_prev, f_cur)?;
        let TransformTrain {
            reconstruction: m_hat,
            bits: motion_bits,
        } = self.nets.motion_ae.forward_train(b, m, rng)?;
        let f_comp = self.nets.comp.forward(b, f_prev, m_hat)?;
        let compensation = self.nets.refine.forward(b, f_comp, f_prev)?;

        if stage == 1 {
            return Ok(TrainStepOut {
                compensation,
                reconstruction: compensation,
                motion_bits,
                residual_bits: None,
            });
        }

        let residual = target.sub(compensation);
        let TransformTrain {
            reconstruction: r_hat,
            bits: residual_bits,
        } = self.nets.res_ae.forward_train(b, residual, rng)?;
        let pre = compensation.add(r_hat);

        let reconstruction = if stage >= 3 && self.mfer_enabled {
            let refs = refs.ok_or_else(|| {
                Error::InvalidConfig("stage-3 training needs reference frames".into())
            })?;
            let ref_vars = [
                tape.constant(refs[0].clone()),
                tape.constant(refs[1].clone()),
                tape.constant(refs[2].clone()),
            ];
            self.nets
                .mfer
                .forward(b, pre, compensation, r_hat, &ref_vars)?
        } else {
            pre
        };
        Ok(TrainStepOut {
            compensation,
            reconstruction,
            motion_bits,
            residual_bits: Some(residual_bits),
        })
    }

    /// Encodes one P frame against the buffer; the returned reconstruction
    /// is exactly what the decoder will produce.
    pub fn encode_frame_p(&self, frame: &Tensor, buffer: &FrameBuffer) -> Result<FrameEncodeOut> {
        self.validate_frame(frame)?;
        let prev_recon = buffer
            .last()
            .ok_or_else(|| Error::InvalidConfig("P frame needs a reference".into()))?;
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let target = tape.constant(frame.clone());
        let prev = tape.constant(prev_recon.clone());

        let f_prev = self.nets.feature.forward(&b, prev)?;
        let f_cur = self.nets.feature.forward(&b, target)?;
        let m = self.nets.motion_est.forward(&b, f_prev, f_cur)?;
        let m_infer = self.nets.motion_ae.forward_infer(&b, m)?;
        let (motion_hyper, motion_latent) =
            self.nets
                .motion_ae
                .encode_payloads(&self.params, &m_infer, &self.gaussian)?;

        let f_comp = self
            .nets
            .comp
            .forward(&b, f_prev, m_infer.reconstruction)?;
        let compensated = self.nets.refine.forward(&b, f_comp, f_prev)?;

        let residual = target.sub(compensated);
        let r_infer = self.nets.res_ae.forward_infer(&b, residual)?;
        let (residual_hyper, residual_latent) =
            self.nets
                .res_ae
                .encode_payloads(&self.params, &r_infer, &self.gaussian)?;

        let pre = compensated.add(r_infer.reconstruction);
        let reconstruction = self.enhance(&b, pre, compensated, r_infer.reconstruction, buffer)?;

        let record = FrameRecord {
            frame_type: FrameType::Predicted,
            motion_hyper,
            motion_latent,
            residual_hyper,
            residual_latent,
        };
        let recon_t = reconstruction.value();
        let s = frame.shape();
        let stats = FrameStats {
            frame_type: FrameType::Predicted,
            bpp: record.bpp(s.w, s.h),
            psnr: psnr_capped(&recon_t, frame)?,
            msssim: ms_ssim(&recon_t, frame)?,
            compensation_psnr: Some(psnr_capped(&compensated.value(), frame)?),
            motion_bits_estimate: m_infer.bits_estimate,
            residual_bits_estimate: r_infer.bits_estimate,
            actual_bits: 8.0 * record.byte_len() as f64,
        };
        Ok(FrameEncodeOut {
            reconstruction: recon_t,
            record,
            stats,
        })
    }

    /// Decodes one P frame; mirrors the encoder bit for bit.
    pub fn decode_frame_p(
        &self,
        record: &FrameRecord,
        buffer: &FrameBuffer,
        frame_shape: Shape,
    ) -> Result<Tensor> {
        let prev_recon = buffer
            .last()
            .ok_or_else(|| Error::InvalidConfig("P frame needs a reference".into()))?;
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let prev = tape.constant(prev_recon.clone());

        let f_prev = self.nets.feature.forward(&b, prev)?;
        let feat_shape = f_prev.shape();
        let motion_input = Shape::new(
            1,
            self.config.compensation.offset_channels(),
            feat_shape.h,
            feat_shape.w,
        );
        let m_hat = self.nets.motion_ae.decode_payloads(
            &b,
            &record.motion_hyper,
            &record.motion_latent,
            motion_input,
            &self.gaussian,
        )?;
        let f_comp = self.nets.comp.forward(&b, f_prev, m_hat)?;
        let compensated = self.nets.refine.forward(&b, f_comp, f_prev)?;

        let r_hat = self.nets.res_ae.decode_payloads(
            &b,
            &record.residual_hyper,
            &record.residual_latent,
            frame_shape,
            &self.gaussian,
        )?;
        let pre = compensated.add(r_hat);
        let reconstruction = self.enhance(&b, pre, compensated, r_hat, buffer)?;
        Ok(reconstruction.value())
    }

    /// Applies enhancement when enabled; pure decoder-side data only.
    fn enhance<'t>(
        &self,
        b: &Binder<'t, '_>,
        pre: Var<'t>,
        compensated: Var<'t>,
        residual: Var<'t>,
        buffer: &FrameBuffer,
    ) -> Result<Var<'t>> {
        if !self.mfer_enabled {
            return Ok(pre);
        }
        let refs = buffer.mfer_refs()?;
        let ref_vars = [
            b.tape().constant(refs[0].clone()),
            b.tape().constant(refs[1].clone()),
            b.tape().constant(refs[2].clone()),
        ];
        self.nets
            .mfer
            .forward(b, pre, compensated, residual, &ref_vars)
    }

    /// Intra frame: the residual coder applied to the frame itself
    /// (prediction fixed at zero); motion payloads are empty.
    pub fn encode_frame_i(&self, frame: &Tensor) -> Result<FrameEncodeOut> {
        self.validate_frame(frame)?;
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let target = tape.constant(frame.clone());
        let infer = self.nets.res_ae.forward_infer(&b, target)?;
        let (residual_hyper, residual_latent) =
            self.nets
                .res_ae
                .encode_payloads(&self.params, &infer, &self.gaussian)?;
        let record = FrameRecord {
            frame_type: FrameType::Intra,
            motion_hyper: Vec::new(),
            motion_latent: Vec::new(),
            residual_hyper,
            residual_latent,
        };
        let recon = infer.reconstruction.value();
        let s = frame.shape();
        let stats = FrameStats {
            frame_type: FrameType::Intra,
            bpp: record.bpp(s.w, s.h),
            psnr: psnr_capped(&recon, frame)?,
            msssim: ms_ssim(&recon, frame)?,
            compensation_psnr: None,
            motion_bits_estimate: 0.0,
            residual_bits_estimate: infer.bits_estimate,
            actual_bits: 8.0 * record.byte_len() as f64,
        };
        Ok(FrameEncodeOut {
            reconstruction: recon,
            record,
            stats,
        })
    }

    pub fn decode_frame_i(&self, record: &FrameRecord, frame_shape: Shape) -> Result<Tensor> {
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let recon = self.nets.res_ae.decode_payloads(
            &b,
            &record.residual_hyper,
            &record.residual_latent,
            frame_shape,
            &self.gaussian,
        )?;
        Ok(recon.value())
    }

    /// Encodes a frame sequence into a complete bitstream.
    pub fn encode_sequence(
        &self,
        frames: &[Tensor],
        gop: GopConfig,
    ) -> Result<(Vec<u8>, SequenceStats)> {
        if frames.is_empty() {
            return Err(Error::InvalidConfig("no frames to encode".into()));
        }
        let s = frames[0].shape();
        for f in frames {
            self.validate_frame(f)?;
            if f.shape() != s {
                return Err(Error::shape(
                    "encode_sequence",
                    format!("{} vs {}", f.shape(), s),
                ));
            }
        }
        if s.w > u16::MAX as usize || s.h > u16::MAX as usize {
            return Err(Error::InvalidConfig("frame extents exceed u16".into()));
        }
        if gop.intra_period > u8::MAX as usize || frames.len() > u32::MAX as usize {
            return Err(Error::InvalidConfig("gop/frame count exceeds header".into()));
        }
        let header = StreamHeader {
            width: s.w as u16,
            height: s.h as u16,
            intra_period: gop.intra_period as u8,
            lambda_index: self.lambda.index as u8,
            frame_count: frames.len() as u32,
        };
        let mut out = Vec::new();
        header.write_to(&mut out);
        let mut buffer = FrameBuffer::new();
        let mut stats = Vec::with_capacity(frames.len());
        let mut recons = Vec::with_capacity(frames.len());
        let mut record_bytes = 0usize;
        for (t, frame) in frames.iter().enumerate() {
            let encoded = match gop.frame_type(t) {
                FrameType::Intra => self.encode_frame_i(frame)?,
                FrameType::Predicted => self.encode_frame_p(frame, &buffer)?,
            };
            encoded.record.write_to(&mut out);
            record_bytes += encoded.record.byte_len();
            buffer.push(encoded.reconstruction.clone());
            stats.push(encoded.stats);
            recons.push(encoded.reconstruction);
        }
        let total_bpp = 8.0 * record_bytes as f64 / (frames.len() * s.h * s.w) as f64;
        Ok((
            out,
            SequenceStats {
                frames: stats,
                reconstructions: recons,
                total_bpp,
            },
        ))
    }

    /// Decodes a complete bitstream back to frames.
    pub fn decode_sequence(&self, bytes: &[u8]) -> Result<(Vec<Tensor>, StreamHeader)> {
        let mut pos = 0;
        let header = StreamHeader::read_from(bytes, &mut pos)?;
        let gop = GopConfig::new(header.intra_period as usize);
        let shape = Shape::new(1, 3, header.height as usize, header.width as usize);
        let mut buffer = FrameBuffer::new();
        let mut frames = Vec::with_capacity(header.frame_count as usize);
        for t in 0..header.frame_count as usize {
            let record = FrameRecord::read_from(bytes, &mut pos, t)?;
            if record.frame_type != gop.frame_type(t) {
                return Err(Error::Format(format!(
                    "frame {t}: type {:?} does not match GOP schedule",
                    record.frame_type
                )));
            }
            let recon = match record.frame_type {
                FrameType::Intra => self.decode_frame_i(&record, shape)?,
                FrameType::Predicted => self.decode_frame_p(&record, &buffer, shape)?,
            };
            buffer.push(recon.clone());
            frames.push(recon);
        }
        Ok((frames, header))
    }

    /// Runs the motion + compensation path in round mode for one frame
    /// pair; used to compare trained compensation against a copy baseline.
    pub fn compensation_probe(&self, reference: &Tensor, target: &Tensor) -> Result<Tensor> {
        self.validate_frame(reference)?;
        self.validate_frame(target)?;
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let prev = tape.constant(reference.clone());
        let cur = tape.constant(target.clone());
        let f_prev = self.nets.feature.forward(&b, prev)?;
        let f_cur = self.nets.feature.forward(&b, cur)?;
        let m = self.nets.motion_est.forward(&b, f_prev, f_cur)?;
        let m_infer = self.nets.motion_ae.forward_infer(&b, m)?;
        let f_comp = self
            .nets
            .comp
            .forward(&b, f_prev, m_infer.reconstruction)?;
        let compensated = self.nets.refine.forward(&b, f_comp, f_prev)?;
        Ok(compensated.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_frame(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, 3, 64, 64), |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    fn desk_codec(seed: u64) -> Codec {
        Codec::new(
            CodecConfig::desk(),
            RdLambda::new(2, RdMetric::Psnr).unwrap(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn gop_schedule_is_pure_function() {
        let gop = GopConfig::new(12);
        let types: Vec<FrameType> = (0..13).map(|t| gop.frame_type(t)).collect();
        assert_eq!(types[0], FrameType::Intra);
        assert!(types[1..12].iter().all(|&t| t == FrameType::Predicted));
        assert_eq!(types[12], FrameType::Intra);
    }

    #[test]
    fn lambda_grids_match_reference_values() {
        assert_eq!(RdLambda::new(2, RdMetric::Psnr).unwrap().value(), 1024.0);
        assert_eq!(RdLambda::new(3, RdMetric::MsSsim).unwrap().value(), 64.0);
        assert!(RdLambda::new(4, RdMetric::Psnr).is_err());
    }

    #[test]
    fn frame_buffer_repeat_oldest_rule() {
        let mut buf = FrameBuffer::new();
        let a = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let bt = Tensor::full(Shape::new(1, 1, 1, 1), 2.0);
        let c = Tensor::full(Shape::new(1, 1, 1, 1), 3.0);
        buf.push(a.clone());
        let refs = buf.mfer_refs().unwrap();
        assert!(refs.iter().all(|r| r.bit_eq(&a)));
        buf.push(bt.clone());
        let refs = buf.mfer_refs().unwrap();
        assert!(refs[0].bit_eq(&a) && refs[1].bit_eq(&a) && refs[2].bit_eq(&bt));
        buf.push(c.clone());
        let refs = buf.mfer_refs().unwrap();
        assert!(refs[0].bit_eq(&a) && refs[1].bit_eq(&bt) && refs[2].bit_eq(&c));
    }

    #[test]
    fn intra_frame_round_trip_is_bit_exact() {
        let codec = desk_codec(11);
        let frame = tiny_frame(1);
        let out = codec.encode_frame_i(&frame).unwrap();
        assert!(out.record.motion_hyper.is_empty() && out.record.motion_latent.is_empty());
        let decoded = codec.decode_frame_i(&out.record, frame.shape()).unwrap();
        assert!(decoded.bit_eq(&out.reconstruction));
    }

    #[test]
    fn predicted_frame_round_trip_is_bit_exact() {
        let codec = desk_codec(12);
        let f0 = tiny_frame(2);
        let f1 = tiny_frame(3);
        let i_out = codec.encode_frame_i(&f0).unwrap();
        let mut buffer = FrameBuffer::new();
        buffer.push(i_out.reconstruction.clone());
        let p_out = codec.encode_frame_p(&f1, &buffer).unwrap();
        assert_eq!(p_out.stats.frame_type, FrameType::Predicted);
        assert!(p_out.stats.bpp > 0.0);

        let mut dec_buffer = FrameBuffer::new();
        let i_dec = codec.decode_frame_i(&i_out.record, f0.shape()).unwrap();
        dec_buffer.push(i_dec);
        let p_dec = codec
            .decode_frame_p(&p_out.record, &dec_buffer, f1.shape())
            .unwrap();
        assert!(p_dec.bit_eq(&p_out.reconstruction));
    }

    #[test]
    fn sequence_closed_loop_13_frames() {
        let codec = desk_codec(13);
        let frames: Vec<Tensor> = (0..13).map(|i| tiny_frame(100 + i)).collect();
        let (bytes, stats) = codec.encode_sequence(&frames, GopConfig::new(12)).unwrap();
        let (decoded, header) = codec.decode_sequence(&bytes).unwrap();
        assert_eq!(header.frame_count, 13);
        assert_eq!(decoded.len(), 13);
        for (d, r) in decoded.iter().zip(&stats.reconstructions) {
            assert_eq!(d.max_abs_diff(r), 0.0);
        }
        // byte-identical on a second run
        let (bytes2, _) = codec.encode_sequence(&frames, GopConfig::new(12)).unwrap();
        assert_eq!(bytes, bytes2);
        // total bpp accounting
        let record_bits: f64 = stats.frames.iter().map(|f| f.actual_bits).sum();
        let expect = record_bits / (13.0 * 64.0 * 64.0);
        assert!((stats.total_bpp - expect).abs() < 1e-12);
    }

    #[test]
    fn mfer_toggle_changes_no_bitstream_byte() {
        let mut codec = desk_codec(14);
        // give the enhancement tail real weights so toggling changes output
        let name = "mfer.up2.w";
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let shape = codec.params.get(name).shape();
        codec.params.set(
            name,
            Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-0.05..0.05)),
        );
        let frames: Vec<Tensor> = (0..5).map(|i| tiny_frame(200 + i)).collect();
        codec.set_mfer_enabled(true);
        let (bytes_on, stats_on) = codec.encode_sequence(&frames, GopConfig::new(12)).unwrap();
        codec.set_mfer_enabled(false);
        let (bytes_off, stats_off) = codec.encode_sequence(&frames, GopConfig::new(12)).unwrap();
        assert_eq!(bytes_on, bytes_off);
        let changed = stats_on
            .reconstructions
            .iter()
            .zip(&stats_off.reconstructions)
            .skip(1)
            .any(|(a, b)| !a.bit_eq(b));
        assert!(changed, "enhancement had no effect on reconstructions");
    }

    #[test]
    fn corrupt_stream_is_rejected() {
        let codec = desk_codec(16);
        let frames: Vec<Tensor> = (0..3).map(|i| tiny_frame(300 + i)).collect();
        let (mut bytes, _) = codec.encode_sequence(&frames, GopConfig::new(12)).unwrap();
        let idx = bytes.len() / 2;
        bytes[idx] ^= 0x10;
        assert!(codec.decode_sequence(&bytes).is_err());
    }

    #[test]
    fn static_sequence_intra_only_reconstructions_identical() {
        let codec = desk_codec(17);
        let frame = tiny_frame(400);
        let frames = vec![frame.clone(), frame.clone(), frame];
        let (_, stats) = codec.encode_sequence(&frames, GopConfig::new(1)).unwrap();
        assert!(stats.frames.iter().all(|f| f.frame_type == FrameType::Intra));
        assert!(stats.reconstructions[1].bit_eq(&stats.reconstructions[0]));
        assert!(stats.reconstructions[2].bit_eq(&stats.reconstructions[0]));
    }
}
