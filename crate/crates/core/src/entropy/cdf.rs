//! Discrete coding tables: probability mass quantized to 16-bit cumulative
//! frequencies, plus the Gaussian and logistic bin math shared by the
//! likelihood ops and the table builders.
//!
//! Every table covers integer symbols [-radius, radius] followed by one
//! escape slot; values outside the support are escaped and bypass-coded as
//! raw bits. Every slot gets at least one count, so no symbol can have zero
//! probability (the pmf floor of 2^-16 in coding terms).

use super::range::FREQ_TOTAL;
use crate::error::{Error, Result};

/// Smallest probability a likelihood is allowed to report: 2^-16.
pub const PMF_FLOOR: f32 = 1.0 / 65536.0;

/// Smallest Gaussian scale; predicted scales are floored here.
pub const SIGMA_FLOOR: f32 = 0.11;

/// Largest Gaussian scale in the coding scale table.
pub const SIGMA_MAX: f32 = 256.0;

/// One coding table: integer symbols [-radius, radius] plus a final escape
/// slot. `cdf` has (2*radius + 2) + 1 entries, strictly increasing from 0 to
/// FREQ_TOTAL.
#[derive(Clone, Debug)]
pub struct CodingTable {
    pub radius: i32,
    pub cdf: Vec<u32>,
}

impl CodingTable {
    /// Number of coding slots including the escape.
    pub fn slots(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn escape_slot(&self) -> usize {
        self.slots() - 1
    }

    /// Slot of an in-support integer symbol, or None if it must be escaped.
    pub fn slot_of(&self, symbol: i32) -> Option<usize> {
        if symbol.abs() <= self.radius {
            Some((symbol + self.radius) as usize)
        } else {
            None
        }
    }

    pub fn symbol_of(&self, slot: usize) -> i32 {
        slot as i32 - self.radius
    }

    pub fn interval(&self, slot: usize) -> (u32, u32) {
        (self.cdf[slot], self.cdf[slot + 1])
    }

    /// Slot containing cumulative frequency `f`.
    pub fn lookup(&self, f: u32) -> usize {
        self.cdf.partition_point(|&c| c <= f) - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.cdf.first() != Some(&0) || self.cdf.last() != Some(&FREQ_TOTAL) {
            return Err(Error::Coder("cdf endpoints must be 0 and 2^16".into()));
        }
        if self.cdf.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Coder("cdf must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Quantizes a pmf to integer counts that sum to FREQ_TOTAL with every count
/// >= 1, using largest-remainder rounding (ties broken by index, so the
/// result is deterministic).
pub fn quantize_pmf(pmf: &[f64]) -> Result<Vec<u32>> {
    let n = pmf.len();
    if n == 0 || n as u32 >= FREQ_TOTAL {
        return Err(Error::Coder(format!("pmf with {n} bins not codable")));
    }
    let sum: f64 = pmf.iter().sum();
    if !(sum.is_finite() && sum > 0.0) || pmf.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
        return Err(Error::Coder("pmf must be nonnegative and finite".into()));
    }
    let budget = FREQ_TOTAL - n as u32; // one count is reserved per bin
    let mut counts = vec![1u32; n];
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(n);
    let mut assigned = 0u32;
    for (i, &p) in pmf.iter().enumerate() {
        let exact = p / sum * budget as f64;
        let whole = exact.floor() as u32;
        counts[i] += whole;
        assigned += whole;
        fractions.push((i, exact - whole as f64));
    }
    let mut leftover = budget - assigned;
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in fractions {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    debug_assert_eq!(counts.iter().sum::<u32>(), FREQ_TOTAL);
    Ok(counts)
}

/// Builds a coding table from per-bin masses over [-radius, radius] and an
/// escape tail mass.
pub fn table_from_pmf(radius: i32, bin_mass: &[f64], escape_mass: f64) -> Result<CodingTable> {
    debug_assert_eq!(bin_mass.len(), (2 * radius + 1) as usize);
    let mut pmf = bin_mass.to_vec();
    pmf.push(escape_mass.max(0.0));
    let counts = quantize_pmf(&pmf)?;
    let mut cdf = Vec::with_capacity(counts.len() + 1);
    cdf.push(0u32);
    for &c in &counts {
        cdf.push(cdf.last().unwrap() + c);
    }
    let table = CodingTable { radius, cdf };
    table.validate()?;
    Ok(table)
}

// --- scalar distribution math (f32 for ops, f64 for table building) ---

/// erfc for x >= 0 (Abramowitz & Stegun 7.1.26, |error| < 1.5e-7).
fn erfc_pos_f64(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    poly * (-x * x).exp()
}

/// Standard normal CDF.
pub fn normal_cdf_f64(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    if z >= 0.0 {
        1.0 - 0.5 * erfc_pos_f64(z)
    } else {
        0.5 * erfc_pos_f64(-z)
    }
}

/// P(round(X) = s extended to the unit bin) for X ~ N(mu, sigma):
/// CDF(s + 0.5) - CDF(s - 0.5). Computed on the complementary side when both
/// bin edges sit in the same tail, so tiny masses keep relative precision.
pub fn gaussian_bin_mass_f64(s: f64, mu: f64, sigma: f64) -> f64 {
    let up = (s + 0.5 - mu) / sigma / std::f64::consts::SQRT_2;
    let lo = (s - 0.5 - mu) / sigma / std::f64::consts::SQRT_2;
    if lo >= 0.0 {
        0.5 * (erfc_pos_f64(lo) - erfc_pos_f64(up))
    } else if up <= 0.0 {
        0.5 * (erfc_pos_f64(-up) - erfc_pos_f64(-lo))
    } else {
        1.0 - 0.5 * (erfc_pos_f64(up) + erfc_pos_f64(-lo))
    }
}

/// f32 twin of [`gaussian_bin_mass_f64`] for the differentiable op.
pub fn gaussian_bin_mass_f32(s: f32, mu: f32, sigma: f32) -> f32 {
    gaussian_bin_mass_f64(s as f64, mu as f64, sigma as f64) as f32
}

/// Standard normal pdf.
#[inline]
pub fn normal_pdf_f32(x: f32) -> f32 {
    const INV_SQRT_2PI: f32 = 0.398_942_28;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic unit-bin mass: F(s + 0.5) - F(s - 0.5) with
/// F(t) = sigmoid((t - loc) / scale). Differences of sigmoids are computed
/// from the same-side tail so small masses stay accurate.
pub fn logistic_bin_mass_f64(s: f64, loc: f64, scale: f64) -> f64 {
    let up = (s + 0.5 - loc) / scale;
    let lo = (s - 0.5 - loc) / scale;
    // sigmoid(b) - sigmoid(a) = sigmoid(b)*sigmoid(-a)*(1 - e^(a-b)) stable form
    let sb = sigmoid_f64(up);
    let sna = sigmoid_f64(-lo);
    sb * sna * (1.0 - (lo - up).exp())
}

pub fn logistic_bin_mass_f32(s: f32, loc: f32, scale: f32) -> f32 {
    logistic_bin_mass_f64(s as f64, loc as f64, scale as f64) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_pmf_sums_to_total_with_floor() {
        let pmf = vec![0.7, 0.2, 0.05, 0.05, 1e-12];
        let counts = quantize_pmf(&pmf).unwrap();
        assert_eq!(counts.iter().sum::<u32>(), FREQ_TOTAL);
        assert!(counts.iter().all(|&c| c >= 1));
        assert!(counts[0] > counts[1]);
    }

    #[test]
    fn gaussian_center_bin_matches_erf_value() {
        // mu = 0, sigma = 1, s = 0: erf(0.5 / sqrt(2)) = 0.3829...
        let p = gaussian_bin_mass_f64(0.0, 0.0, 1.0);
        assert!((p - 0.3829249).abs() < 1e-5, "got {p}");
    }

    #[test]
    fn gaussian_bins_are_symmetric_and_normalized() {
        let total: f64 = (-40..=40)
            .map(|s| gaussian_bin_mass_f64(s as f64, 0.0, 2.5))
            .sum();
        assert!((total - 1.0).abs() < 1e-4);
        for s in 1..10 {
            let a = gaussian_bin_mass_f64(s as f64, 0.0, 1.7);
            let b = gaussian_bin_mass_f64(-s as f64, 0.0, 1.7);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_tail_bins_keep_relative_precision() {
        let p = gaussian_bin_mass_f64(8.0, 0.0, 1.0);
        // true mass ~ 6.2e-16; the complementary-side formula keeps it positive
        assert!(p > 0.0 && p < 1e-12);
    }

    #[test]
    fn logistic_bins_are_normalized() {
        let total: f64 = (-60..=60)
            .map(|s| logistic_bin_mass_f64(s as f64, 0.35, 1.8))
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn table_lookup_round_trips_slots() {
        let bins: Vec<f64> = (-5..=5)
            .map(|s| gaussian_bin_mass_f64(s as f64, 0.3, 1.2))
            .collect();
        let table = table_from_pmf(5, &bins, 1e-6).unwrap();
        table.validate().unwrap();
        for slot in 0..table.slots() {
            let (lo, hi) = table.interval(slot);
            assert_eq!(table.lookup(lo), slot);
            assert_eq!(table.lookup(hi - 1), slot);
        }
        assert_eq!(table.slot_of(0), Some(5));
        assert_eq!(table.slot_of(-6), None);
        assert_eq!(table.symbol_of(table.escape_slot() - 1), 5);
    }
}
