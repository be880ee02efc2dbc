//! The fixed network graphs: feature extraction, motion estimation and
//! compensation, the motion/residual transform autoencoders with their
//! hyperpriors, and multi-frame enhanced reconstruction.
//!
//! Networks own no tensors. All trainable values live in a [`Params`] store
//! under hierarchical names ("feat.conv1.w", "res_ae.enc0.dn.beta", ...);
//! network structs describe structure and pull their values through a
//! [`Binder`] during a forward pass. That keeps checkpointing, the optimizer
//! and the stage-wise parameter partition in one place.

mod layers;
mod mfer;
mod motion;
mod transform;

pub use layers::{Conv, DnLayer, ResBlock, ResDn, UpConv};
pub use mfer::MferNet;
pub use motion::{Compensation, FeatureExtractor, MotionEstimator, RefinementNet};
pub use transform::{HyperCoder, TransformCoder, TransformInfer, TransformTrain};

use std::cell::RefCell;
use std::collections::HashMap;

use crate::deform::HET_OFFSET_CHANNELS;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Channel widths and depths of every network, with two documented profiles.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    /// Feature channels C. Must be divisible by 6 (three deformable groups,
    /// and a C/2 ramp stage in the residual encoder).
    pub base_channels: usize,
    /// Latent channels of both transform coders.
    pub latent_channels: usize,
    /// Hyper-latent channels.
    pub hyper_channels: usize,
    /// Downsampling stages of the motion transform encoder.
    pub motion_downsamples: usize,
    /// Downsampling stages of the residual transform encoder.
    pub residual_downsamples: usize,
    /// Leaky-ReLU slope used everywhere.
    pub lrelu_slope: f32,
    /// Spatial window of the neighborhood-pooled normalizations.
    pub dn_window: usize,
}

impl NetworkConfig {
    /// Desk-scale profile used by the test and acceptance suites.
    pub fn desk() -> NetworkConfig {
        NetworkConfig {
            base_channels: 48,
            latent_channels: 48,
            hyper_channels: 32,
            motion_downsamples: 2,
            residual_downsamples: 4,
            lrelu_slope: 0.1,
            dn_window: 3,
        }
    }

    /// Full-scale profile. The reference feature width is 128; the nearest
    /// width compatible with the three-way channel grouping (divisible by 6)
    /// is 126.
    pub fn full() -> NetworkConfig {
        NetworkConfig {
            base_channels: 126,
            latent_channels: 128,
            hyper_channels: 64,
            motion_downsamples: 2,
            residual_downsamples: 4,
            lrelu_slope: 0.1,
            dn_window: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 6 != 0 {
            return Err(Error::InvalidConfig(format!(
                "base_channels must be a positive multiple of 6, got {}",
                self.base_channels
            )));
        }
        if self.latent_channels == 0 || self.hyper_channels == 0 {
            return Err(Error::InvalidConfig("channel counts must be >= 1".into()));
        }
        if self.motion_downsamples != 2 || self.residual_downsamples != 4 {
            return Err(Error::InvalidConfig(
                "motion/residual downsampling is fixed at 2/4 stages".into(),
            ));
        }
        if self.lrelu_slope <= 0.0 || self.lrelu_slope >= 1.0 {
            return Err(Error::InvalidConfig("lrelu slope must be in (0,1)".into()));
        }
        if self.dn_window % 2 == 0 {
            return Err(Error::InvalidConfig("dn window must be odd".into()));
        }
        Ok(())
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::desk()
    }
}

/// Which compensation operator the codec uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CompKind {
    /// Heterogeneous 1x1 + 3x3 + 5x5 kernels over channel thirds.
    Het,
    /// One K x K deformable kernel over all channels (ablation baselines).
    Single(usize),
}

impl CompKind {
    /// Channels of the packed offset tensor this operator consumes.
    pub fn offset_channels(&self) -> usize {
        match self {
            CompKind::Het => HET_OFFSET_CHANNELS,
            CompKind::Single(k) => 2 * k * k,
        }
    }
}

/// Normalization arrangement of the transform coders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormArrangement {
    /// Neighborhood-pooled blocks at high resolution, mixed/channel deeper.
    Sncdn,
    /// Channel-pooled (GDN) blocks everywhere (ablation baseline).
    GdnOnly,
}

/// Structural configuration of a codec build; serialized into checkpoints
/// and compared on load.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodecConfig {
    pub net: NetworkConfig,
    pub compensation: CompKind,
    pub norms: NormArrangement,
    pub use_mfer: bool,
    /// Autoregressive context refinement of the entropy parameters.
    /// Serializes decoding; off by default and excluded from acceptance.
    pub use_context: bool,
}

impl CodecConfig {
    pub fn desk() -> CodecConfig {
        CodecConfig {
            net: NetworkConfig::desk(),
            compensation: CompKind::Het,
            norms: NormArrangement::Sncdn,
            use_mfer: true,
            use_context: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if let CompKind::Single(k) = self.compensation {
            if k % 2 == 0 || k == 0 {
                return Err(Error::InvalidConfig(format!(
                    "single deformable kernel must be odd, got {k}"
                )));
            }
        }
        Ok(())
    }
}

/// Ordered, name-addressed parameter store.
#[derive(Clone, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Params {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.values[*idx]
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(self.values[idx].shape(), value.shape(), "shape change on {name}");
        self.values[idx] = value;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

/// Binds stored parameters onto a tape as leaves, once each, and remembers
/// the binding so gradients can be routed back by name.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    params: &'p Params,
    bound: RefCell<HashMap<usize, Var<'t>>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p Params) -> Binder<'t, 'p> {
        Binder {
            tape,
            params,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    /// The parameter as a tracked leaf; repeated requests share one leaf so
    /// gradients accumulate.
    pub fn var(&self, name: &str) -> Var<'t> {
        let idx = *self
            .params
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.bound.borrow().get(&idx) {
            return *v;
        }
        let v = self.tape.leaf(self.params.values[idx].clone());
        self.bound.borrow_mut().insert(idx, v);
        v
    }

    /// (name, gradient) for every bound parameter the loss actually reached,
    /// in stored parameter order.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        let bound = self.bound.borrow();
        let mut out = Vec::new();
        let mut indices: Vec<usize> = bound.keys().copied().collect();
        indices.sort_unstable();
        for idx in indices {
            if let Some(g) = grads.get(bound[&idx]) {
                out.push((self.params.names[idx].clone(), g.clone()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn desk_and_full_profiles_validate() {
        NetworkConfig::desk().validate().unwrap();
        NetworkConfig::full().validate().unwrap();
        let mut bad = NetworkConfig::desk();
        bad.base_channels = 128; // not divisible by 6
        assert!(bad.validate().is_err());
    }

    #[test]
    fn params_preserve_insertion_order() {
        let mut p = Params::new();
        p.insert("b.w", Tensor::scalar(1.0));
        p.insert("a.w", Tensor::scalar(2.0));
        let names: Vec<&str> = p.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b.w", "a.w"]);
    }

    #[test]
    fn binder_shares_leaves_for_repeated_binds() {
        let mut p = Params::new();
        p.insert("w", Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
        let tape = Tape::new();
        let b = Binder::new(&tape, &p);
        let v1 = b.var("w");
        let v2 = b.var("w");
        // both uses feed one leaf: gradients accumulate
        let loss = v1.add(v2).sum();
        let grads = tape.backward(loss);
        let named = b.collect_grads(&grads);
        assert_eq!(named.len(), 1);
        assert!(named[0].1.data().iter().all(|&g| g == 2.0));
    }
}
