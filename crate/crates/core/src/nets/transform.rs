//! Motion and residual transform autoencoders with hyperprior entropy
//! models.
//!
//! Both coders share one skeleton: stride-2 convolutions interleaved with
//! residual + divisive-normalization blocks on the way down, the mirrored
//! inverse blocks and sub-pixel upsampling on the way back. The motion coder
//! has two downsampling stages (its input already lives at quarter
//! resolution), the residual coder four, so both latents land on the same
//! H/16 grid.
//!
//! Train mode quantizes with additive noise and returns a differentiable
//! bit estimate. Infer mode rounds; the reconstruction is a function of the
//! integer symbols alone, so re-decoding serialized symbols reproduces the
//! encoder-side reconstruction bit for bit.
//!
//! An optional masked-convolution context model refines the entropy
//! parameters causally. It serializes coding position by position and is
//! off by default.

use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, ResDn, UpConv};
use super::{Binder, CodecConfig, Params};
use crate::divnorm::DnKind;
use crate::entropy::cdf::{gaussian_bin_mass_f64, logistic_bin_mass_f64};
use crate::entropy::{
    estimate_bits, floor_likelihood, gaussian_likelihood, logistic_likelihood, quantize_noise,
    sigma_from_raw, FactorizedModel, GaussianConditional, PMF_FLOOR, SIGMA_FLOOR,
};
use crate::error::{Error, Result};
use crate::nets::NormArrangement;
use crate::tensor::{Shape, Tape, Tensor, Var};

fn softplus_f32(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Floor added to the factorized prior's scale.
const PRIOR_SCALE_FLOOR: f32 = 0.01;

/// Hyper-latent coder: two stride-2 convolutions down, two sub-pixel stages
/// back up to raw (mu, sigma) parameters at latent resolution, plus the
/// per-channel factorized prior that codes the hyper-latent itself.
pub struct HyperCoder {
    prefix: String,
    enc1: Conv,
    enc2: Conv,
    up1: UpConv,
    up2: UpConv,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    slope: f32,
}

impl HyperCoder {
    fn new(prefix: &str, latent: usize, hyper: usize, slope: f32) -> HyperCoder {
        HyperCoder {
            prefix: prefix.to_string(),
            enc1: Conv::new(format!("{prefix}.enc1"), latent, hyper, 3, 2, 1),
            enc2: Conv::new(format!("{prefix}.enc2"), hyper, hyper, 3, 2, 1),
            up1: UpConv::new(format!("{prefix}.up1"), hyper, hyper, 3),
            up2: UpConv::new(format!("{prefix}.up2"), hyper, 2 * latent, 3),
            latent_channels: latent,
            hyper_channels: hyper,
            slope,
        }
    }

    fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.enc1.init(params, rng);
        self.enc2.init(params, rng);
        self.up1.init(params, rng);
        self.up2.init(params, rng);
        params.insert(
            format!("{}.prior_loc", self.prefix),
            Tensor::zeros(Shape::new(1, self.hyper_channels, 1, 1)),
        );
        // softplus(0.54) + floor starts the prior scale near 1
        params.insert(
            format!("{}.prior_scale", self.prefix),
            Tensor::full(Shape::new(1, self.hyper_channels, 1, 1), 0.54),
        );
    }

    fn encode<'t>(&self, b: &Binder<'t, '_>, y: Var<'t>) -> Result<Var<'t>> {
        let z = self.enc1.forward(b, y)?.leaky_relu(self.slope);
        self.enc2.forward(b, z)
    }

    /// Raw entropy parameters (2L channels) from the dequantized hyper.
    fn decode_raw<'t>(&self, b: &Binder<'t, '_>, z_hat: Var<'t>) -> Result<Var<'t>> {
        let x = self.up1.forward(b, z_hat)?.leaky_relu(self.slope);
        self.up2.forward(b, x)
    }

    fn prior_vars<'t>(&self, b: &Binder<'t, '_>) -> (Var<'t>, Var<'t>) {
        let loc = b.var(&format!("{}.prior_loc", self.prefix));
        let scale = b
            .var(&format!("{}.prior_scale", self.prefix))
            .softplus()
            .add_scalar(PRIOR_SCALE_FLOOR);
        (loc, scale)
    }

    /// Derived per-channel (loc, scale) of the prior.
    fn prior_values(&self, params: &Params) -> (Vec<f32>, Vec<f32>) {
        let loc = params.get(&format!("{}.prior_loc", self.prefix)).data().to_vec();
        let scale: Vec<f32> = params
            .get(&format!("{}.prior_scale", self.prefix))
            .data()
            .iter()
            .map(|&v| softplus_f32(v) + PRIOR_SCALE_FLOOR)
            .collect();
        (loc, scale)
    }

    fn factorized_model(&self, params: &Params) -> Result<FactorizedModel> {
        let (loc, scale) = self.prior_values(params);
        FactorizedModel::from_params(&loc, &scale)
    }
}

/// One transform autoencoder (analysis + synthesis + hyperprior).
pub struct TransformCoder {
    pub in_channels: usize,
    pub latent_channels: usize,
    pub stages: usize,
    enc_convs: Vec<Conv>,
    enc_blocks: Vec<ResDn>,
    dec_blocks: Vec<ResDn>,
    dec_ups: Vec<UpConv>,
    hyper: HyperCoder,
    context: Option<Conv>,
}

/// Training-mode output: noisy-quantized reconstruction and the
/// differentiable bit estimate (latent + hyper).
pub struct TransformTrain<'t> {
    pub reconstruction: Var<'t>,
    pub bits: Var<'t>,
}

/// Inference-mode output: rounded integer symbols and everything needed to
/// entropy-code them, plus the symbol-determined reconstruction.
pub struct TransformInfer<'t> {
    pub reconstruction: Var<'t>,
    /// -log2 likelihood of the rounded symbols under the continuous models.
    pub bits_estimate: f64,
    pub latent_bits_estimate: f64,
    pub hyper_bits_estimate: f64,
    pub latent_symbols: Vec<i32>,
    pub hyper_symbols: Vec<i32>,
    pub latent_shape: Shape,
    pub hyper_shape: Shape,
    /// Per-element coding sigmas aligned with `latent_symbols`.
    pub sigmas: Vec<f32>,
}

impl TransformCoder {
    /// Motion transform: two downsampling stages over the offset tensor.
    pub fn motion(cfg: &CodecConfig) -> TransformCoder {
        let l = cfg.net.latent_channels;
        let in_c = cfg.compensation.offset_channels();
        let kinds = match cfg.norms {
            NormArrangement::Sncdn => vec![DnKind::Spatial, DnKind::Mixed],
            NormArrangement::GdnOnly => vec![DnKind::Channel, DnKind::Channel],
        };
        Self::build("motion_ae", cfg, in_c, &[l, l], &kinds, 3)
    }

    /// Residual transform: four downsampling stages from the frame.
    pub fn residual(cfg: &CodecConfig) -> TransformCoder {
        let c = cfg.net.base_channels;
        let l = cfg.net.latent_channels;
        let kinds = match cfg.norms {
            NormArrangement::Sncdn => vec![
                DnKind::Spatial,
                DnKind::Spatial,
                DnKind::Mixed,
                DnKind::Channel,
            ],
            NormArrangement::GdnOnly => vec![DnKind::Channel; 4],
        };
        Self::build("res_ae", cfg, 3, &[c / 2, c, c, l], &kinds, 5)
    }

    fn build(
        prefix: &str,
        cfg: &CodecConfig,
        in_channels: usize,
        widths: &[usize],
        kinds: &[DnKind],
        first_kernel: usize,
    ) -> TransformCoder {
        assert_eq!(widths.len(), kinds.len());
        let stages = widths.len();
        let slope = cfg.net.lrelu_slope;
        let window = cfg.net.dn_window;
        let mut enc_convs = Vec::new();
        let mut enc_blocks = Vec::new();
        let mut prev = in_channels;
        for (i, (&w, &kind)) in widths.iter().zip(kinds).enumerate() {
            let k = if i == 0 { first_kernel } else { 3 };
            enc_convs.push(Conv::new(
                format!("{prefix}.enc{i}.conv"),
                prev,
                w,
                k,
                2,
                (k - 1) / 2,
            ));
            enc_blocks.push(ResDn::new(
                &format!("{prefix}.enc{i}"),
                kind,
                w,
                window,
                slope,
            ));
            prev = w;
        }
        // decoder mirror: inverse block of stage i, then upsample toward
        // stage i-1 (stage 0 upsamples back to the input channels)
        let mut dec_blocks = Vec::new();
        let mut dec_ups = Vec::new();
        for i in (0..stages).rev() {
            dec_blocks.push(ResDn::new(
                &format!("{prefix}.dec{i}"),
                kinds[i],
                widths[i],
                window,
                slope,
            ));
            let out = if i == 0 { in_channels } else { widths[i - 1] };
            dec_ups.push(UpConv::new(format!("{prefix}.dec{i}.up"), widths[i], out, 3));
        }
        let latent = *widths.last().unwrap();
        let hyper = HyperCoder::new(
            &format!("{prefix}.hyper"),
            latent,
            cfg.net.hyper_channels,
            slope,
        );
        let context = cfg
            .use_context
            .then(|| Conv::new(format!("{prefix}.ctx"), latent, 2 * latent, 5, 1, 2).zero_init());
        TransformCoder {
            in_channels,
            latent_channels: latent,
            stages,
            enc_convs,
            enc_blocks,
            dec_blocks,
            dec_ups,
            hyper,
            context,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        for c in &self.enc_convs {
            c.init(params, rng);
        }
        for b in &self.enc_blocks {
            b.init(params, rng);
        }
        for b in &self.dec_blocks {
            b.init(params, rng);
        }
        for u in &self.dec_ups {
            u.init(params, rng);
        }
        self.hyper.init(params, rng);
        if let Some(ctx) = &self.context {
            ctx.init(params, rng);
        }
    }

    /// Latent extents for an input of the given shape.
    pub fn latent_shape(&self, input: Shape) -> Shape {
        let f = 1 << self.stages;
        Shape::new(input.b, self.latent_channels, input.h / f, input.w / f)
    }

    pub fn hyper_shape(&self, latent: Shape) -> Shape {
        Shape::new(
            latent.b,
            self.hyper.hyper_channels,
            latent.h / 4,
            latent.w / 4,
        )
    }

    fn encode_latent<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.c != self.in_channels {
            return Err(Error::shape(
                "transform",
                format!("input has {} channels, want {}", s.c, self.in_channels),
            ));
        }
        let down = 1 << (self.stages + 2); // hyper adds two more halvings
        if s.h % down != 0 || s.w % down != 0 {
            return Err(Error::shape(
                "transform",
                format!("input {}x{} not divisible by {down}", s.h, s.w),
            ));
        }
        let mut v = x;
        for (conv, block) in self.enc_convs.iter().zip(&self.enc_blocks) {
            v = conv.forward(b, v)?;
            v = block.forward(b, v, false)?;
        }
        Ok(v)
    }

    fn decode_latent<'t>(&self, b: &Binder<'t, '_>, y_hat: Var<'t>) -> Result<Var<'t>> {
        let mut v = y_hat;
        for (block, up) in self.dec_blocks.iter().zip(&self.dec_ups) {
            v = block.forward(b, v, true)?;
            v = up.forward(b, v)?;
        }
        Ok(v)
    }

    /// Splits raw entropy parameters into (mu, sigma).
    fn split_params<'t>(&self, raw: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let l = self.latent_channels;
        let mu = raw.slice_channels(0, l)?;
        let sigma = sigma_from_raw(raw.slice_channels(l, 2 * l)?);
        Ok((mu, sigma))
    }

    /// Causal 5x5 mask: taps strictly before the center in raster order.
    fn context_mask(&self) -> Tensor {
        let l = self.latent_channels;
        Tensor::from_fn(Shape::new(2 * l, l, 5, 5), |_, _, ky, kx| {
            if ky < 2 || (ky == 2 && kx < 2) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Training pass: noisy quantization, differentiable bits.
    pub fn forward_train<'t>(
        &self,
        b: &Binder<'t, '_>,
        x: Var<'t>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TransformTrain<'t>> {
        let y = self.encode_latent(b, x)?;
        let z = self.hyper.encode(b, y)?;
        let z_noisy = quantize_noise(z, rng);
        let (prior_loc, prior_scale) = self.hyper.prior_vars(b);
        let z_ll = floor_likelihood(logistic_likelihood(z_noisy, prior_loc, prior_scale)?);
        let hyper_bits = estimate_bits(z_ll)?;

        let y_noisy = quantize_noise(y, rng);
        let mut raw = self.hyper.decode_raw(b, z_noisy)?;
        if let Some(ctx) = &self.context {
            let mask = b.tape().constant(self.context_mask());
            let w = b.var(&format!("{}.w", ctx.name)).mul(mask);
            let bias = b.var(&format!("{}.b", ctx.name));
            raw = raw.add(y_noisy.conv2d(w, Some(bias), &ctx.spec)?);
        }
        let (mu, sigma) = self.split_params(raw)?;
        let y_ll = floor_likelihood(gaussian_likelihood(y_noisy, mu, sigma)?);
        let latent_bits = estimate_bits(y_ll)?;

        let reconstruction = self.decode_latent(b, y_noisy)?;
        Ok(TransformTrain {
            reconstruction,
            bits: hyper_bits.add(latent_bits),
        })
    }

    /// Inference pass: round, symbolize, reconstruct from the symbols.
    pub fn forward_infer<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<TransformInfer<'t>> {
        let y = self.encode_latent(b, x)?;
        let z = self.hyper.encode(b, y)?;
        let z_t = z.value();
        let hyper_shape = z_t.shape();
        let hyper_symbols: Vec<i32> = z_t.data().iter().map(|&v| v.round() as i32).collect();
        let z_hat = dequantized(b.tape(), hyper_shape, &hyper_symbols);
        let latent_shape = y.shape();

        let (latent_symbols, sigmas, mus) = if self.context.is_some() {
            let y_t = y.value();
            self.context_walk(b, z_hat, latent_shape, |idx, mu, _| {
                (y_t.data()[idx] - mu).round() as i32
            })?
        } else {
            let raw = self.hyper.decode_raw(b, z_hat)?;
            let (mu, sigma) = self.split_params(raw)?;
            let mu_t = mu.value();
            let y_t = y.value();
            let symbols: Vec<i32> = y_t
                .data()
                .iter()
                .zip(mu_t.data())
                .map(|(&yv, &m)| (yv - m).round() as i32)
                .collect();
            (symbols, sigma.value().data().to_vec(), mu_t.data().to_vec())
        };

        let y_hat = reconstruct_latent(b.tape(), latent_shape, &latent_symbols, &mus);
        let reconstruction = self.decode_latent(b, y_hat)?;
        let (latent_bits_estimate, hyper_bits_estimate) =
            self.round_mode_bits(b.params(), &latent_symbols, &sigmas, &hyper_symbols, hyper_shape);
        Ok(TransformInfer {
            reconstruction,
            bits_estimate: latent_bits_estimate + hyper_bits_estimate,
            latent_bits_estimate,
            hyper_bits_estimate,
            latent_symbols,
            hyper_symbols,
            latent_shape,
            hyper_shape,
            sigmas,
        })
    }

    /// Entropy-codes an inference result into (hyper, latent) payloads.
    /// With the context model on, latent symbols are coded in the walker's
    /// raster order (position-major) to match sequential decoding.
    pub fn encode_payloads(
        &self,
        params: &Params,
        infer: &TransformInfer<'_>,
        gaussian: &GaussianConditional,
    ) -> Result<(Vec<u8>, Vec<u8>)> {
        let fm = self.hyper.factorized_model(params)?;
        let plane = infer.hyper_shape.h * infer.hyper_shape.w;
        let hyper = fm.encode_payload(&infer.hyper_symbols, plane)?;
        let latent = if self.context.is_some() {
            let (symbols, sigmas): (Vec<i32>, Vec<f32>) =
                walk_order(infer.latent_shape, self.latent_channels)
                    .map(|i| (infer.latent_symbols[i], infer.sigmas[i]))
                    .unzip();
            gaussian.encode_payload(&symbols, &sigmas)?
        } else {
            gaussian.encode_payload(&infer.latent_symbols, &infer.sigmas)?
        };
        Ok((hyper, latent))
    }

    /// Decoder entry: reconstruction from payload bytes alone.
    pub fn decode_payloads<'t>(
        &self,
        b: &Binder<'t, '_>,
        hyper_bytes: &[u8],
        latent_bytes: &[u8],
        input_shape: Shape,
        gaussian: &GaussianConditional,
    ) -> Result<Var<'t>> {
        let latent_shape = self.latent_shape(input_shape);
        let hyper_shape = self.hyper_shape(latent_shape);
        let fm = self.hyper.factorized_model(b.params())?;
        let hyper_symbols = fm.decode_payload(hyper_bytes, hyper_shape.h * hyper_shape.w)?;
        let z_hat = dequantized(b.tape(), hyper_shape, &hyper_symbols);

        let (latent_symbols, _sigmas, mus) = if self.context.is_some() {
            let mut dec = crate::entropy::RangeDecoder::new(latent_bytes);
            self.context_walk(b, z_hat, latent_shape, |_, _, sigma| {
                gaussian.decode_one(&mut dec, sigma)
            })?
        } else {
            let raw = self.hyper.decode_raw(b, z_hat)?;
            let (mu, sigma) = self.split_params(raw)?;
            let sigmas = sigma.value().data().to_vec();
            let symbols = gaussian.decode_payload(latent_bytes, &sigmas)?;
            (symbols, sigmas, mu.value().data().to_vec())
        };
        let y_hat = reconstruct_latent(b.tape(), latent_shape, &latent_symbols, &mus);
        self.decode_latent(b, y_hat)
    }

    /// Raster-order sequential walk for the context model. At each location
    /// the masked convolution over already-reconstructed latents refines the
    /// hyper parameters; `emit` produces the symbol (from the encoder's real
    /// latent, or from the entropy decoder) and the reconstruction advances.
    fn context_walk<'t>(
        &self,
        b: &Binder<'t, '_>,
        z_hat: Var<'t>,
        latent_shape: Shape,
        mut emit: impl FnMut(usize, f32, f32) -> i32,
    ) -> Result<(Vec<i32>, Vec<f32>, Vec<f32>)> {
        let ctx = self.context.as_ref().expect("context disabled");
        let raw_hyper = self.hyper.decode_raw(b, z_hat)?.value();
        let w_masked = b
            .params()
            .get(&format!("{}.w", ctx.name))
            .zip_map(&self.context_mask(), |w, m| w * m);
        let bias = b.params().get(&format!("{}.b", ctx.name)).clone();

        let l = self.latent_channels;
        let (lh, lw) = (latent_shape.h, latent_shape.w);
        let plane = lh * lw;
        let mut y_hat = vec![0.0f32; l * plane];
        let mut symbols = vec![0i32; l * plane];
        let mut sigmas = vec![0.0f32; l * plane];
        let mut mus = vec![0.0f32; l * plane];
        for oy in 0..lh {
            for ox in 0..lw {
                let pos = oy * lw + ox;
                for c in 0..l {
                    // masked conv output for channels c (mu) and l + c (sigma)
                    let ctx_mu = masked_conv_at(&y_hat, l, lh, lw, &w_masked, &bias, c, oy, ox);
                    let ctx_sg =
                        masked_conv_at(&y_hat, l, lh, lw, &w_masked, &bias, l + c, oy, ox);
                    let idx = c * plane + pos;
                    let mu = raw_hyper.data()[idx] + ctx_mu;
                    let sraw = raw_hyper.data()[l * plane + idx] + ctx_sg;
                    let sigma = softplus_f32(sraw) + SIGMA_FLOOR;
                    let sym = emit(idx, mu, sigma);
                    symbols[idx] = sym;
                    sigmas[idx] = sigma;
                    mus[idx] = mu;
                    y_hat[idx] = sym as f32 + mu;
                }
            }
        }
        Ok((symbols, sigmas, mus))
    }

    /// Round-mode information content under the continuous models, with the
    /// pmf floor applied; the coder is expected to land within a couple of
    /// percent of this.
    fn round_mode_bits(
        &self,
        params: &Params,
        latent_symbols: &[i32],
        sigmas: &[f32],
        hyper_symbols: &[i32],
        hyper_shape: Shape,
    ) -> (f64, f64) {
        let mut latent_bits = 0.0f64;
        for (&s, &sg) in latent_symbols.iter().zip(sigmas) {
            let p = gaussian_bin_mass_f64(s as f64, 0.0, sg as f64).max(PMF_FLOOR as f64);
            latent_bits -= p.log2();
        }
        let (loc, scale) = self.hyper.prior_values(params);
        let plane = hyper_shape.h * hyper_shape.w;
        let mut hyper_bits = 0.0f64;
        for (i, &s) in hyper_symbols.iter().enumerate() {
            let c = i / plane;
            let p = logistic_bin_mass_f64(s as f64, loc[c] as f64, scale[c] as f64)
                .max(PMF_FLOOR as f64);
            hyper_bits -= p.log2();
        }
        (latent_bits, hyper_bits)
    }
}

/// Direct evaluation of one masked-convolution output at one location,
/// visiting taps in the same (input-channel, ky, kx, skip-zero) order as the
/// full forward pass, so sequential decoding reproduces encoder bits.
#[allow(clippy::too_many_arguments)]
fn masked_conv_at(
    y_hat: &[f32],
    l: usize,
    lh: usize,
    lw: usize,
    w_masked: &Tensor,
    bias: &Tensor,
    oc: usize,
    oy: usize,
    ox: usize,
) -> f32 {
    let mut acc = bias.data()[oc];
    let wd = w_masked.data();
    for m in 0..l {
        let wbase = (oc * l + m) * 25;
        for ky in 0..5usize {
            let iy = oy as isize + ky as isize - 2;
            if iy < 0 || iy >= lh as isize {
                continue;
            }
            for kx in 0..5usize {
                let wv = wd[wbase + ky * 5 + kx];
                if wv == 0.0 {
                    continue;
                }
                let ix = ox as isize + kx as isize - 2;
                if ix < 0 || ix >= lw as isize {
                    continue;
                }
                acc += wv * y_hat[m * lh * lw + iy as usize * lw + ix as usize];
            }
        }
    }
    acc
}

/// Storage indices (channel-major) visited in the context walker's order
/// (position-major, channels inner).
fn walk_order(latent_shape: Shape, channels: usize) -> impl Iterator<Item = usize> {
    let plane = latent_shape.h * latent_shape.w;
    (0..plane).flat_map(move |pos| (0..channels).map(move |c| c * plane + pos))
}

fn dequantized<'t>(tape: &'t Tape, shape: Shape, symbols: &[i32]) -> Var<'t> {
    tape.constant(Tensor::new(
        shape,
        symbols.iter().map(|&s| s as f32).collect(),
    ))
}

fn reconstruct_latent<'t>(tape: &'t Tape, shape: Shape, symbols: &[i32], mus: &[f32]) -> Var<'t> {
    let data: Vec<f32> = symbols
        .iter()
        .zip(mus)
        .map(|(&s, &m)| s as f32 + m)
        .collect();
    tape.constant(Tensor::new(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Binder;
    use rand::{Rng, SeedableRng};

    fn build(cfg: &CodecConfig) -> (TransformCoder, TransformCoder, Params) {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let motion = TransformCoder::motion(cfg);
        let residual = TransformCoder::residual(cfg);
        let mut params = Params::new();
        motion.init(&mut params, &mut rng);
        residual.init(&mut params, &mut rng);
        (motion, residual, params)
    }

    fn rand_frame(shape: Shape, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn latent_shapes_match_contract() {
        let cfg = CodecConfig::desk();
        let (motion, residual, params) = build(&cfg);
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);

        // motion: 70 channels at H/4 -> latent at H/16 overall
        let m = tape.leaf(Tensor::zeros(Shape::new(1, 70, 16, 16)));
        let out = motion.forward_infer(&b, m).unwrap();
        assert_eq!(out.latent_shape, Shape::new(1, 48, 4, 4));
        assert_eq!(out.hyper_shape, Shape::new(1, 32, 1, 1));
        assert_eq!(out.reconstruction.shape(), Shape::new(1, 70, 16, 16));

        // residual: frame at H -> latent at H/16
        let r = tape.leaf(rand_frame(Shape::new(1, 3, 64, 64), 1));
        let out = residual.forward_infer(&b, r).unwrap();
        assert_eq!(out.latent_shape, Shape::new(1, 48, 4, 4));
        assert_eq!(out.reconstruction.shape(), Shape::new(1, 3, 64, 64));
    }

    #[test]
    fn infer_round_trip_is_bit_exact() {
        let cfg = CodecConfig::desk();
        let (_, residual, params) = build(&cfg);
        let gaussian = GaussianConditional::new();
        let frame = rand_frame(Shape::new(1, 3, 64, 64), 2);

        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let x = tape.leaf(frame);
        let infer = residual.forward_infer(&b, x).unwrap();
        let (hyper_bytes, latent_bytes) = residual
            .encode_payloads(&params, &infer, &gaussian)
            .unwrap();

        let tape2 = Tape::new();
        let b2 = Binder::new(&tape2, &params);
        let recon = residual
            .decode_payloads(
                &b2,
                &hyper_bytes,
                &latent_bytes,
                Shape::new(1, 3, 64, 64),
                &gaussian,
            )
            .unwrap();
        assert!(recon.value().bit_eq(&infer.reconstruction.value()));
    }

    #[test]
    fn coded_bytes_track_bits_estimate() {
        let cfg = CodecConfig::desk();
        let (_, residual, params) = build(&cfg);
        let gaussian = GaussianConditional::new();
        let frame = rand_frame(Shape::new(1, 3, 64, 64), 3);
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let infer = residual.forward_infer(&b, tape.leaf(frame)).unwrap();
        let (hyper_bytes, latent_bytes) = residual
            .encode_payloads(&params, &infer, &gaussian)
            .unwrap();
        // per-payload agreement: actual within 2% + 32 bits of the estimate
        for (name, bytes, est) in [
            ("hyper", &hyper_bytes, infer.hyper_bits_estimate),
            ("latent", &latent_bytes, infer.latent_bits_estimate),
        ] {
            let actual = 8.0 * bytes.len() as f64;
            assert!(
                actual <= est * 1.02 + 32.0,
                "{name}: actual {actual} vs estimate {est}"
            );
        }
    }

    #[test]
    fn train_mode_is_differentiable_down_to_inputs() {
        let cfg = CodecConfig::desk();
        let (motion, _, params) = build(&cfg);
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = tape.leaf(rand_frame(Shape::new(1, 70, 16, 16), 5));
        let out = motion.forward_train(&b, m, &mut rng).unwrap();
        let loss = out.reconstruction.abs_pow(2.0).mean().add(out.bits.scale(1e-4));
        let grads = tape.backward(loss);
        let gm = grads.wrt(m);
        assert!(gm.data().iter().any(|&g| g != 0.0));
        assert!(out.bits.value().scalar_value() > 0.0);
    }

    #[test]
    fn context_model_round_trip_is_bit_exact() {
        let mut cfg = CodecConfig::desk();
        cfg.use_context = true;
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let motion = TransformCoder::motion(&cfg);
        let mut params = Params::new();
        motion.init(&mut params, &mut rng);
        // give the zero-initialized context weights real values so the test
        // exercises the sequential path
        let name = "motion_ae.ctx.w";
        let shape = params.get(name).shape();
        params.set(
            name,
            Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-0.05..0.05)),
        );
        let gaussian = GaussianConditional::new();
        let input = rand_frame(Shape::new(1, 70, 16, 16), 6);

        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let infer = motion.forward_infer(&b, tape.leaf(input)).unwrap();
        let (hyper_bytes, latent_bytes) =
            motion.encode_payloads(&params, &infer, &gaussian).unwrap();

        let tape2 = Tape::new();
        let b2 = Binder::new(&tape2, &params);
        let recon = motion
            .decode_payloads(
                &b2,
                &hyper_bytes,
                &latent_bytes,
                Shape::new(1, 70, 16, 16),
                &gaussian,
            )
            .unwrap();
        assert!(recon.value().bit_eq(&infer.reconstruction.value()));
    }
}
