//! The progressive training loop.
//!
//! Stage 1 optimizes the motion-related modules under the rate-compensation
//! loss; stage 2 adds the residual modules under the total RD loss with the
//! enhancement stage bypassed; stage 3 trains everything. Clips are unrolled
//! recurrently: up to six P steps over seven consecutive frames, each step
//! buffering the previous reconstruction (detached) as the next reference.
//!
//! Everything is seeded: clip order, quantization noise, and therefore the
//! final parameter bytes.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{loss_rc, loss_total};
use super::{Codec, FrameBuffer, RdLambda};
use crate::error::{Error, Result};
use crate::nets::{Binder, Params};
use crate::tensor::{Tape, Tensor};

/// A training clip: consecutive frames of one sequence.
pub type Clip = Vec<Tensor>;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    /// 1, 2 or 3.
    pub stage: u8,
    /// Optimizer steps (one step = one P-frame forward/backward/update).
    pub steps: usize,
    pub seed: u64,
    /// Initial learning rate.
    pub lr: f32,
    /// Halve the learning rate when the loss plateaus.
    pub lr_halving: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            steps: 1000,
            seed: 1,
            lr: 1e-4,
            lr_halving: true,
        }
    }
}

/// Loss curve and bookkeeping of one training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub final_lr: f32,
    pub lr_halvings: usize,
    /// Names of the parameters that received updates.
    pub updated_params: Vec<String>,
    /// |noise-mode - round-mode| bit estimate on a probe frame pair,
    /// reported for monitoring (not asserted).
    pub train_infer_gap_bits: f64,
}

/// Adam optimizer; first/second moment state is keyed by parameter name.
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update from named gradients (caller supplies them in a
    /// deterministic order).
    pub fn step(&mut self, params: &mut Params, grads: &[(String, Tensor)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let current = params.get(name).clone();
            let n = current.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                next.push(current.data()[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            params.set(name, Tensor::new(current.shape(), next));
        }
    }
}

/// Runs one training stage over the clip set, mutating the codec's
/// parameters in place.
pub fn train(codec: &mut Codec, clips: &[Clip], cfg: &TrainConfig) -> Result<TrainReport> {
    if !(1..=3).contains(&cfg.stage) {
        return Err(Error::InvalidConfig(format!("unknown stage {}", cfg.stage)));
    }
    if clips.is_empty() {
        return Err(Error::Dataset("no training clips".into()));
    }
    for (i, clip) in clips.iter().enumerate() {
        if clip.len() < 2 {
            return Err(Error::Dataset(format!(
                "clip {i} has {} frames, need at least 2",
                clip.len()
            )));
        }
    }
    let lambda = codec.lambda;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses: Vec<f64> = Vec::with_capacity(cfg.steps);
    let mut updated: Vec<String> = Vec::new();
    let mut halvings = 0usize;
    let mut next_plateau_check = plateau_window(cfg.steps) * 2;

    'outer: loop {
        let clip = &clips[rng.gen_range(0..clips.len())];
        let unroll = clip.len().min(7);
        let mut buffer = FrameBuffer::new();
        buffer.push(clip[0].clone());
        let mut prev = clip[0].clone();
        for k in 1..unroll {
            if losses.len() >= cfg.steps {
                break 'outer;
            }
            let target = &clip[k];
            // stage 1 trains compensation against clean references
            let reference = if cfg.stage == 1 { &clip[k - 1] } else { &prev };
            let refs = buffer.mfer_refs()?;
            let tape = Tape::new();
            let binder = Binder::new(&tape, &codec.params);
            let out =
                codec.forward_train_p_bound(&binder, cfg.stage, target, reference, Some(&refs), &mut rng)?;
            let loss = match cfg.stage {
                1 => loss_rc(out.compensation, target, out.motion_bits, lambda),
                _ => loss_total(
                    out.reconstruction,
                    target,
                    out.motion_bits,
                    out.residual_bits.expect("stage >= 2 has residual bits"),
                    lambda,
                )?,
            };
            let loss_value = loss.value().scalar_value() as f64;
            let grads = tape.backward(loss);
            let named = binder.collect_grads(&grads);
            let recon = out.reconstruction.value();
            drop(grads);
            if updated.is_empty() {
                updated = named.iter().map(|(n, _)| n.clone()).collect();
            }
            opt.step(&mut codec.params, &named);
            losses.push(loss_value);

            prev = recon;
            buffer.push(prev.clone());

            if cfg.lr_halving && losses.len() >= next_plateau_check {
                let w = plateau_window(cfg.steps);
                let newer = mean(&losses[losses.len() - w..]);
                let older = mean(&losses[losses.len() - 2 * w..losses.len() - w]);
                if newer > older * 0.995 && opt.lr > 1e-6 {
                    opt.lr *= 0.5;
                    halvings += 1;
                }
                next_plateau_check = losses.len() + w;
            }
        }
    }

    let gap = train_infer_gap(codec, &clips[0], cfg)?;
    Ok(TrainReport {
        losses,
        final_lr: opt.lr,
        lr_halvings: halvings,
        updated_params: updated,
        train_infer_gap_bits: gap,
    })
}

fn plateau_window(steps: usize) -> usize {
    (steps / 10).clamp(25, 250)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Noise-mode vs round-mode bit estimate on the first frame pair of a clip.
fn train_infer_gap(codec: &Codec, clip: &Clip, cfg: &TrainConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6ea1);
    let tape = Tape::new();
    let binder = Binder::new(&tape, &codec.params);
    let refs = [clip[0].clone(), clip[0].clone(), clip[0].clone()];
    let out = codec.forward_train_p_bound(&binder, 2, &clip[1], &clip[0], Some(&refs), &mut rng)?;
    let noise_bits = out.motion_bits.value().scalar_value() as f64
        + out
            .residual_bits
            .map(|b| b.value().scalar_value() as f64)
            .unwrap_or(0.0);
    let mut buffer = FrameBuffer::new();
    buffer.push(clip[0].clone());
    let round = codec.encode_frame_p(&clip[1], &buffer)?;
    let round_bits = round.stats.motion_bits_estimate + round.stats.residual_bits_estimate;
    Ok((noise_bits - round_bits).abs())
}
