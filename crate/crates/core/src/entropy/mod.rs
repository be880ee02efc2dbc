//! Quantization, likelihood models, bit estimation and the lossless range
//! coder behind the wire bitstream.

pub mod cdf;
mod frame;
mod models;
mod range;

pub use cdf::{CodingTable, PMF_FLOOR, SIGMA_FLOOR, SIGMA_MAX};
pub use frame::{crc32, Crc32, FrameRecord, FrameType, StreamHeader, MAGIC, VERSION};
pub use models::{gaussian_likelihood, logistic_likelihood, FactorizedModel, GaussianConditional};
pub use range::{RangeDecoder, RangeEncoder, FREQ_TOTAL};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// How latents are quantized: additive uniform noise during training, true
/// rounding (idempotent) at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QuantMode {
    Noise,
    Round,
}

/// Additive uniform noise on [-0.5, 0.5) from a seeded generator.
pub fn quantize_noise<'t>(x: Var<'t>, rng: &mut ChaCha8Rng) -> Var<'t> {
    let shape = x.shape();
    let noise = Tensor::from_fn(shape, |_, _, _, _| rng.gen::<f32>() - 0.5);
    x.add(x.tape().constant(noise))
}

/// Nearest-integer rounding (ties away from zero) with a pass-through
/// gradient; idempotent.
pub fn quantize_round(x: Var<'_>) -> Var<'_> {
    x.round_ste()
}

/// Unit-bin probabilities floored at [`PMF_FLOOR`]; apply on top of a raw
/// likelihood op so downstream logs stay finite.
pub fn floor_likelihood(p: Var<'_>) -> Var<'_> {
    p.clamp_min(PMF_FLOOR)
}

/// Total information content in bits: sum of -log2 P. Differentiable through
/// the likelihood model.
pub fn estimate_bits<'t>(likelihoods: Var<'t>) -> Result<Var<'t>> {
    let v = likelihoods.value();
    if let Some((i, p)) = v
        .data()
        .iter()
        .enumerate()
        .find(|(_, &p)| !(p > 0.0))
        .map(|(i, &p)| (i, p))
    {
        return Err(Error::InvalidConfig(format!(
            "nonpositive likelihood {p} at index {i}"
        )));
    }
    Ok(likelihoods.ln().sum().scale(-std::f32::consts::LOG2_E))
}

/// sigma head mapping: strictly positive scales from raw activations.
pub fn sigma_from_raw(raw: Var<'_>) -> Var<'_> {
    raw.softplus().add_scalar(SIGMA_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tape};
    use rand::SeedableRng;

    #[test]
    fn round_is_idempotent_and_noise_is_bounded() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = tape.leaf(Tensor::from_fn(Shape::new(1, 2, 5, 5), |_, _, _, _| {
            rng.gen_range(-4.0..4.0)
        }));
        let once = quantize_round(x);
        let twice = quantize_round(once);
        assert!(once.value().bit_eq(&twice.value()));

        let noisy = quantize_noise(x, &mut rng).value();
        let diff = noisy.zip_map(&x.value(), |a, b| (a - b).abs());
        assert!(diff.data().iter().all(|&d| d <= 0.5));
    }

    #[test]
    fn estimate_bits_definitional_values() {
        let tape = Tape::new();
        // all P = 0.5 over 100 symbols -> 100 bits
        let p = tape.leaf(Tensor::full(Shape::new(1, 1, 10, 10), 0.5));
        let bits = estimate_bits(p).unwrap().value().scalar_value();
        assert!((bits - 100.0).abs() < 1e-3);
        // all P = 1 -> 0 bits
        let p1 = tape.leaf(Tensor::full(Shape::new(1, 1, 10, 10), 1.0));
        assert_eq!(estimate_bits(p1).unwrap().value().scalar_value(), 0.0);
    }

    #[test]
    fn estimate_bits_rejects_nonpositive() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::new(Shape::new(1, 1, 1, 2), vec![0.5, 0.0]));
        assert!(estimate_bits(p).is_err());
    }

    #[test]
    fn quantize_round_gradient_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(Shape::new(1, 1, 1, 3), vec![0.3, -1.7, 2.5]));
        let loss = quantize_round(x).sum();
        let grads = tape.backward(loss);
        assert!(grads.wrt(x).data().iter().all(|&g| g == 1.0));
    }
}
