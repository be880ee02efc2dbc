//! Likelihood models: the factorized (per-channel logistic) prior for
//! hyper-latents and the Gaussian conditional for main latents.
//!
//! Each model exists in two coupled forms that must agree:
//!
//! - a differentiable unit-bin likelihood op used for training-time bit
//!   estimation, and
//! - discrete 16-bit coding tables used by the range coder at inference.
//!
//! Coding tables cover [-radius, radius] plus an escape slot; escaped values
//! are zigzag-coded as two raw 16-bit halves, so coding is lossless for any
//! i32 symbol. Gaussian scales are snapped to a fixed geometric table so the
//! encoder and decoder derive identical tables from identical predictions.

use super::cdf::{
    gaussian_bin_mass_f32, gaussian_bin_mass_f64, logistic_bin_mass_f32, logistic_bin_mass_f64,
    normal_pdf_f32, table_from_pmf, CodingTable, SIGMA_FLOOR, SIGMA_MAX,
};
use super::range::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor, Var};

/// Entries in the Gaussian scale table. Predictions snap up to the next
/// level, so the geometric step bounds the coding penalty; 256 levels keep
/// the worst-case excess near 0.001 bits per symbol.
const SCALE_LEVELS: usize = 256;

/// Gaussian conditional model with a fixed scale table and precomputed
/// per-scale coding tables.
pub struct GaussianConditional {
    scales: Vec<f32>,
    tables: Vec<CodingTable>,
}

impl Default for GaussianConditional {
    fn default() -> Self {
        Self::new()
    }
}

impl GaussianConditional {
    pub fn new() -> GaussianConditional {
        let lo = (SIGMA_FLOOR as f64).ln();
        let hi = (SIGMA_MAX as f64).ln();
        let scales: Vec<f32> = (0..SCALE_LEVELS)
            .map(|i| (lo + (hi - lo) * i as f64 / (SCALE_LEVELS - 1) as f64).exp() as f32)
            .collect();
        let tables = scales
            .iter()
            .map(|&s| {
                let radius = ((5.0 * s as f64).ceil() as i32).max(2);
                let bins: Vec<f64> = (-radius..=radius)
                    .map(|k| gaussian_bin_mass_f64(k as f64, 0.0, s as f64))
                    .collect();
                let escape = (1.0 - bins.iter().sum::<f64>()).max(1e-12);
                table_from_pmf(radius, &bins, escape).expect("static gaussian table")
            })
            .collect();
        GaussianConditional { scales, tables }
    }

    /// Index of the smallest table scale >= sigma (clamped to the table).
    pub fn scale_index(&self, sigma: f32) -> usize {
        let s = sigma.clamp(SIGMA_FLOOR, SIGMA_MAX);
        self.scales.partition_point(|&t| t < s).min(SCALE_LEVELS - 1)
    }

    pub fn table(&self, index: usize) -> &CodingTable {
        &self.tables[index]
    }

    /// Encodes one centered symbol under its predicted sigma.
    pub fn encode_one(&self, enc: &mut RangeEncoder, symbol: i32, sigma: f32) {
        let table = &self.tables[self.scale_index(sigma)];
        encode_with_escape(enc, table, symbol);
    }

    /// Decodes one centered symbol.
    pub fn decode_one(&self, dec: &mut RangeDecoder<'_>, sigma: f32) -> i32 {
        let table = &self.tables[self.scale_index(sigma)];
        decode_with_escape(dec, table)
    }

    /// Encodes centered symbols (round(y - mu)) under per-symbol sigmas.
    pub fn encode_payload(&self, symbols: &[i32], sigmas: &[f32]) -> Result<Vec<u8>> {
        debug_assert_eq!(symbols.len(), sigmas.len());
        let mut enc = RangeEncoder::new();
        for (&s, &sigma) in symbols.iter().zip(sigmas) {
            self.encode_one(&mut enc, s, sigma);
        }
        Ok(enc.finish())
    }

    /// Decodes `sigmas.len()` centered symbols.
    pub fn decode_payload(&self, bytes: &[u8], sigmas: &[f32]) -> Result<Vec<i32>> {
        let mut dec = RangeDecoder::new(bytes);
        Ok(sigmas
            .iter()
            .map(|&sigma| self.decode_one(&mut dec, sigma))
            .collect())
    }
}

/// Factorized prior: an independent discretized logistic per channel,
/// described by a location and a strictly positive scale.
pub struct FactorizedModel {
    pub loc: Vec<f32>,
    pub scale: Vec<f32>,
    tables: Vec<CodingTable>,
}

impl FactorizedModel {
    pub fn from_params(loc: &[f32], scale: &[f32]) -> Result<FactorizedModel> {
        if loc.len() != scale.len() {
            return Err(Error::InvalidConfig(
                "factorized model loc/scale length mismatch".into(),
            ));
        }
        if scale.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidConfig(
                "factorized model scales must be positive".into(),
            ));
        }
        let tables = loc
            .iter()
            .zip(scale)
            .map(|(&l, &s)| {
                let radius = ((l.abs() + 12.0 * s).ceil() as i32).clamp(2, 1 << 14);
                let bins: Vec<f64> = (-radius..=radius)
                    .map(|k| logistic_bin_mass_f64(k as f64, l as f64, s as f64))
                    .collect();
                let escape = (1.0 - bins.iter().sum::<f64>()).max(1e-12);
                table_from_pmf(radius, &bins, escape)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FactorizedModel {
            loc: loc.to_vec(),
            scale: scale.to_vec(),
            tables,
        })
    }

    /// Encodes symbols laid out channel-major with `plane` values per channel.
    pub fn encode_payload(&self, symbols: &[i32], plane: usize) -> Result<Vec<u8>> {
        if symbols.len() != plane * self.tables.len() {
            return Err(Error::Coder(format!(
                "payload of {} symbols does not fill {} channels x {} samples",
                symbols.len(),
                self.tables.len(),
                plane
            )));
        }
        let mut enc = RangeEncoder::new();
        for (i, &s) in symbols.iter().enumerate() {
            let table = &self.tables[i / plane];
            encode_with_escape(&mut enc, table, s);
        }
        Ok(enc.finish())
    }

    pub fn decode_payload(&self, bytes: &[u8], plane: usize) -> Result<Vec<i32>> {
        let mut dec = RangeDecoder::new(bytes);
        let n = plane * self.tables.len();
        Ok((0..n)
            .map(|i| decode_with_escape(&mut dec, &self.tables[i / plane]))
            .collect())
    }
}

fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

fn unzigzag(z: u32) -> i32 {
    ((z >> 1) as i32) ^ -((z & 1) as i32)
}

fn encode_with_escape(enc: &mut RangeEncoder, table: &CodingTable, symbol: i32) {
    match table.slot_of(symbol) {
        Some(slot) => {
            let (lo, hi) = table.interval(slot);
            enc.encode(lo, hi);
        }
        None => {
            let (lo, hi) = table.interval(table.escape_slot());
            enc.encode(lo, hi);
            let z = zigzag(symbol);
            enc.encode_raw16((z >> 16) as u16);
            enc.encode_raw16((z & 0xFFFF) as u16);
        }
    }
}

fn decode_with_escape(dec: &mut RangeDecoder<'_>, table: &CodingTable) -> i32 {
    let f = dec.decode_freq();
    let slot = table.lookup(f);
    let (lo, hi) = table.interval(slot);
    dec.update(lo, hi);
    if slot == table.escape_slot() {
        let hi16 = dec.decode_raw16() as u32;
        let lo16 = dec.decode_raw16() as u32;
        unzigzag((hi16 << 16) | lo16)
    } else {
        table.symbol_of(slot)
    }
}

// --- differentiable likelihood ops ---

/// Unit-bin Gaussian likelihood P = CDF(y + 0.5) - CDF(y - 0.5) under
/// elementwise (mu, sigma). Differentiable w.r.t. all three inputs.
pub fn gaussian_likelihood<'t>(y: Var<'t>, mu: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    let yv = y.value();
    let mv = mu.value();
    let sv = sigma.value();
    yv.require_same_shape(&mv, "gaussian_likelihood")?;
    yv.require_same_shape(&sv, "gaussian_likelihood")?;
    if let Some((i, v)) = sv
        .data()
        .iter()
        .enumerate()
        .find(|(_, &s)| !(s.is_finite() && s > 0.0))
        .map(|(i, &v)| (i, v))
    {
        return Err(Error::InvalidConfig(format!(
            "invalid sigma {v} at index {i}"
        )));
    }
    let mut out = Vec::with_capacity(yv.len());
    for i in 0..yv.len() {
        out.push(gaussian_bin_mass_f32(
            yv.data()[i],
            mv.data()[i],
            sv.data()[i],
        ));
    }
    let shape = yv.shape();
    let (yc, mc, sc) = (yv, mv, sv);
    Ok(y.tape().push(
        Tensor::new(shape, out),
        vec![y.id, mu.id, sigma.id],
        Box::new(move |g, needs| {
            let n = g.len();
            let mut gy = needs[0].then(|| Vec::with_capacity(n));
            let mut gm = needs[1].then(|| Vec::with_capacity(n));
            let mut gs = needs[2].then(|| Vec::with_capacity(n));
            for i in 0..n {
                let (yi, mi, si, gi) = (yc.data()[i], mc.data()[i], sc.data()[i], g.data()[i]);
                let up = (yi - mi + 0.5) / si;
                let um = (yi - mi - 0.5) / si;
                let pdf_up = normal_pdf_f32(up);
                let pdf_um = normal_pdf_f32(um);
                let dp_dy = (pdf_up - pdf_um) / si;
                if let Some(v) = gy.as_mut() {
                    v.push(gi * dp_dy);
                }
                if let Some(v) = gm.as_mut() {
                    v.push(-gi * dp_dy);
                }
                if let Some(v) = gs.as_mut() {
                    v.push(-gi * (up * pdf_up - um * pdf_um) / si);
                }
            }
            vec![
                gy.map(|v| Tensor::new(shape, v)),
                gm.map(|v| Tensor::new(shape, v)),
                gs.map(|v| Tensor::new(shape, v)),
            ]
        }),
    ))
}

/// Unit-bin logistic likelihood with per-channel (loc, scale), broadcast
/// over batch and space. `loc` and `scale` are (1, C, 1, 1).
pub fn logistic_likelihood<'t>(z: Var<'t>, loc: Var<'t>, scale: Var<'t>) -> Result<Var<'t>> {
    let zv = z.value();
    let lv = loc.value();
    let sv = scale.value();
    let zs = zv.shape();
    let want = Shape::new(1, zs.c, 1, 1);
    if lv.shape() != want || sv.shape() != want {
        return Err(Error::shape(
            "logistic_likelihood",
            format!("loc {} / scale {} vs {}", lv.shape(), sv.shape(), want),
        ));
    }
    if sv.data().iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidConfig(
            "logistic scale must be positive".into(),
        ));
    }
    let plane = zs.h * zs.w;
    let mut out = vec![0.0f32; zs.count()];
    for b in 0..zs.b {
        for c in 0..zs.c {
            let (l, s) = (lv.data()[c], sv.data()[c]);
            let src = &zv.data()[(b * zs.c + c) * plane..][..plane];
            let dst = &mut out[(b * zs.c + c) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = logistic_bin_mass_f32(v, l, s);
            }
        }
    }
    let (zc, lc, sc) = (zv, lv, sv);
    Ok(z.tape().push(
        Tensor::new(zs, out),
        vec![z.id, loc.id, scale.id],
        Box::new(move |g, needs| {
            let mut gz = needs[0].then(|| vec![0.0f32; zs.count()]);
            let mut gl = needs[1].then(|| vec![0.0f64; zs.c]);
            let mut gs = needs[2].then(|| vec![0.0f64; zs.c]);
            for b in 0..zs.b {
                for c in 0..zs.c {
                    let (l, s) = (lc.data()[c], sc.data()[c]);
                    for i in 0..plane {
                        let idx = (b * zs.c + c) * plane + i;
                        let (zi, gi) = (zc.data()[idx], g.data()[idx]);
                        let up = (zi - l + 0.5) / s;
                        let um = (zi - l - 0.5) / s;
                        let sp = sigmoid_f32(up);
                        let sm = sigmoid_f32(um);
                        let fp = sp * (1.0 - sp);
                        let fm = sm * (1.0 - sm);
                        let dp_dz = (fp - fm) / s;
                        if let Some(v) = gz.as_mut() {
                            v[idx] = gi * dp_dz;
                        }
                        if let Some(v) = gl.as_mut() {
                            v[c] -= (gi * dp_dz) as f64;
                        }
                        if let Some(v) = gs.as_mut() {
                            v[c] -= (gi * (up * fp - um * fm) / s) as f64;
                        }
                    }
                }
            }
            vec![
                gz.map(|v| Tensor::new(zs, v)),
                gl.map(|v| {
                    Tensor::new(
                        Shape::new(1, zs.c, 1, 1),
                        v.into_iter().map(|x| x as f32).collect(),
                    )
                }),
                gs.map(|v| {
                    Tensor::new(
                        Shape::new(1, zs.c, 1, 1),
                        v.into_iter().map(|x| x as f32).collect(),
                    )
                }),
            ]
        }),
    ))
}

#[inline]
fn sigmoid_f32(x: f32) -> f32 {
    super::cdf::sigmoid_f64(x as f64) as f32
}
