//! Named-parameter layer wrappers: plain convolutions, residual blocks,
//! divisive-normalization stages and the composites built from them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Binder, Params};
use crate::divnorm::{self, DnKind, DnVars, SpatialGamma, BETA_FLOOR};
use crate::error::Result;
use crate::tensor::{ConvSpec, ResBlockVars, Shape, Tensor, Var};

fn uniform_init(shape: Shape, bound: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-bound..bound))
}

/// Convolution layer with named weights and optional bias.
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
    pub bias: bool,
    /// Zero-initialized (offset heads and enhancement tails start inert).
    pub zero_init: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Conv {
        Conv {
            name: name.into(),
            spec: ConvSpec::new(in_c, out_c, k, stride, pad),
            bias: true,
            zero_init: false,
        }
    }

    pub fn zero_init(mut self) -> Conv {
        self.zero_init = true;
        self
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        let ws = self.spec.weight_shape();
        let w = if self.zero_init {
            Tensor::zeros(ws)
        } else {
            let fan_in = (self.spec.in_channels / self.spec.groups
                * self.spec.kernel
                * self.spec.kernel) as f32;
            uniform_init(ws, (3.0 / fan_in).sqrt(), rng)
        };
        params.insert(format!("{}.w", self.name), w);
        if self.bias {
            params.insert(
                format!("{}.b", self.name),
                Tensor::zeros(Shape::new(1, self.spec.out_channels, 1, 1)),
            );
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let w = b.var(&format!("{}.w", self.name));
        let bias = self.bias.then(|| b.var(&format!("{}.b", self.name)));
        x.conv2d(w, bias, &self.spec)
    }
}

/// Convolution to 4x channels followed by depth-to-space x2.
pub struct UpConv {
    pub conv: Conv,
}

impl UpConv {
    pub fn new(name: impl Into<String>, in_c: usize, out_c: usize, k: usize) -> UpConv {
        UpConv {
            conv: Conv::new(name, in_c, out_c * 4, k, 1, (k - 1) / 2),
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.conv.init(params, rng);
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.conv.forward(b, x)?.depth_to_space(2)
    }
}

/// Channel-preserving residual block (two 3x3 convolutions, identity skip).
pub struct ResBlock {
    pub name: String,
    pub channels: usize,
    pub slope: f32,
}

impl ResBlock {
    pub fn new(name: impl Into<String>, channels: usize, slope: f32) -> ResBlock {
        ResBlock {
            name: name.into(),
            channels,
            slope,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        let c = self.channels;
        let ws = Shape::new(c, c, 3, 3);
        let bound = (3.0 / (c * 9) as f32).sqrt();
        params.insert(format!("{}.w1", self.name), uniform_init(ws, bound, rng));
        params.insert(format!("{}.b1", self.name), Tensor::zeros(Shape::new(1, c, 1, 1)));
        params.insert(format!("{}.w2", self.name), uniform_init(ws, bound, rng));
        params.insert(format!("{}.b2", self.name), Tensor::zeros(Shape::new(1, c, 1, 1)));
    }

    pub fn vars<'t>(&self, b: &Binder<'t, '_>) -> ResBlockVars<'t> {
        ResBlockVars {
            w1: b.var(&format!("{}.w1", self.name)),
            b1: b.var(&format!("{}.b1", self.name)),
            w2: b.var(&format!("{}.w2", self.name)),
            b2: b.var(&format!("{}.b2", self.name)),
            slope: self.slope,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.residual_block(&self.vars(b))
    }
}

/// One divisive-normalization stage with raw (reparameterized) parameters.
pub struct DnLayer {
    pub name: String,
    pub kind: DnKind,
    pub channels: usize,
    pub window: usize,
}

impl DnLayer {
    pub fn new(name: impl Into<String>, kind: DnKind, channels: usize, window: usize) -> DnLayer {
        DnLayer {
            name: name.into(),
            kind,
            channels,
            window,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        let c = self.channels;
        params.insert(
            format!("{}.beta", self.name),
            Tensor::full(Shape::new(1, c, 1, 1), 1.0),
        );
        if matches!(self.kind, DnKind::Channel | DnKind::Mixed) {
            params.insert(
                format!("{}.gamma_ch", self.name),
                Tensor::from_fn(Shape::new(c, c, 1, 1), |o, i, _, _| {
                    if o == i {
                        0.32
                    } else {
                        rng.gen_range(0.0..0.08)
                    }
                }),
            );
        }
        if matches!(self.kind, DnKind::Spatial | DnKind::Mixed) {
            params.insert(
                format!("{}.gamma_sp", self.name),
                Tensor::from_fn(Shape::new(c, 1, self.window, self.window), |_, _, _, _| {
                    rng.gen_range(0.05..0.25)
                }),
            );
        }
    }

    pub fn vars<'t>(&self, b: &Binder<'t, '_>) -> DnVars<'t> {
        let beta = b
            .var(&format!("{}.beta", self.name))
            .abs_pow(2.0)
            .add_scalar(BETA_FLOOR);
        let gamma_ch = matches!(self.kind, DnKind::Channel | DnKind::Mixed)
            .then(|| b.var(&format!("{}.gamma_ch", self.name)).abs_pow(2.0));
        let gamma_sp = matches!(self.kind, DnKind::Spatial | DnKind::Mixed).then(|| {
            SpatialGamma::PerOffset(b.var(&format!("{}.gamma_sp", self.name)).abs_pow(2.0))
        });
        DnVars {
            beta,
            gamma_ch,
            gamma_sp,
            window: self.window,
            alpha: 2.0,
            eps_exp: 0.5,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>, inverse: bool) -> Result<Var<'t>> {
        divnorm::divnorm(x, &self.vars(b), inverse)
    }
}

/// Residual block united with a normalization stage; the decoder side runs
/// the inverse normalization before the residual branch.
pub struct ResDn {
    pub res: ResBlock,
    pub dn: DnLayer,
}

impl ResDn {
    pub fn new(name: &str, kind: DnKind, channels: usize, window: usize, slope: f32) -> ResDn {
        ResDn {
            res: ResBlock::new(format!("{name}.res"), channels, slope),
            dn: DnLayer::new(format!("{name}.dn"), kind, channels, window),
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.res.init(params, rng);
        self.dn.init(params, rng);
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>, inverse: bool) -> Result<Var<'t>> {
        divnorm::resdn_block(x, &self.res.vars(b), &self.dn.vars(b), inverse)
    }
}
