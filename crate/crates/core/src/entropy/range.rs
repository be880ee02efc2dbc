//! Byte-oriented range coder with carry propagation.
//!
//! Frequencies are 16-bit: every symbol is an interval [cum_lo, cum_hi) out
//! of a total of exactly 1 << 16. The encoder keeps a 33-bit low (the top
//! bit is the pending carry), emits bytes through a cache so a carry can
//! ripple through runs of 0xFF, and renormalizes whenever the range drops
//! below 1 << 24.
//!
//! The flush rounds the final code point up to a multiple of 1 << 24 (the
//! renormalization invariant guarantees one exists inside the interval) and
//! strips trailing zero bytes; the decoder feeds zeros once the stream is
//! exhausted, so the stripped bytes are reconstructed for free. Typical
//! stream overhead is two to three bytes.

/// Total frequency of every coding table: 1 << 16.
pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;

const RENORM_BOUND: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    lead_emitted: bool,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
            lead_emitted: false,
        }
    }

    /// Encodes the interval [cum_lo, cum_hi) / FREQ_TOTAL.
    pub fn encode(&mut self, cum_lo: u32, cum_hi: u32) {
        debug_assert!(cum_lo < cum_hi && cum_hi <= FREQ_TOTAL);
        let r = self.range >> FREQ_BITS;
        self.low += r as u64 * cum_lo as u64;
        if cum_hi == FREQ_TOTAL {
            // hand the subdivision remainder to the last interval
            self.range -= r * cum_lo;
        } else {
            self.range = r * (cum_hi - cum_lo);
        }
        while self.range < RENORM_BOUND {
            self.shift_low();
            self.range <<= 8;
        }
    }

    /// Encodes 16 raw bits at exactly 16 bits of cost.
    pub fn encode_raw16(&mut self, v: u16) {
        self.encode(v as u32, v as u32 + 1);
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            // the first emitted byte is the initial cache; the decoder never
            // reads it (its only content is a carry-out beyond the 32-bit
            // window), so it is not written at all
            if self.lead_emitted {
                self.out.push(self.cache.wrapping_add(carry));
            } else {
                self.lead_emitted = true;
            }
            for _ in 1..self.cache_size {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.cache = (self.low >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Flushes and returns the stream.
    pub fn finish(mut self) -> Vec<u8> {
        // choose the code point inside [low, low + range) with 24 trailing
        // zero bits; range >= RENORM_BOUND guarantees one exists
        let step = RENORM_BOUND as u64;
        let rounded = self.low.div_ceil(step) * step;
        debug_assert!(rounded == self.low || rounded - self.low < self.range as u64);
        self.low = rounded;
        for _ in 0..5 {
            self.shift_low();
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> RangeDecoder<'a> {
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        // zero-fill past the end: the encoder stripped trailing zeros
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative frequency of the next symbol; look it up in the table,
    /// then call [`RangeDecoder::update`] with the symbol's interval.
    pub fn decode_freq(&mut self) -> u32 {
        let r = self.range >> FREQ_BITS;
        ((self.code / r) as u32).min(FREQ_TOTAL - 1)
    }

    pub fn update(&mut self, cum_lo: u32, cum_hi: u32) {
        debug_assert!(cum_lo < cum_hi && cum_hi <= FREQ_TOTAL);
        let r = self.range >> FREQ_BITS;
        self.code -= r * cum_lo;
        if cum_hi == FREQ_TOTAL {
            self.range -= r * cum_lo;
        } else {
            self.range = r * (cum_hi - cum_lo);
        }
        while self.range < RENORM_BOUND {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    pub fn decode_raw16(&mut self) -> u16 {
        let f = self.decode_freq();
        self.update(f, f + 1);
        f as u16
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Uniform CDF over n symbols with total FREQ_TOTAL.
    fn uniform_cdf(n: u32) -> Vec<u32> {
        (0..=n).map(|i| i * (FREQ_TOTAL / n)).collect()
    }

    fn encode_all(symbols: &[usize], cdf: &[u32]) -> Vec<u8> {
        let mut enc = RangeEncoder::new();
        for &s in symbols {
            enc.encode(cdf[s], cdf[s + 1]);
        }
        enc.finish()
    }

    fn decode_all(bytes: &[u8], cdf: &[u32], n: usize) -> Vec<usize> {
        let mut dec = RangeDecoder::new(bytes);
        (0..n)
            .map(|_| {
                let f = dec.decode_freq();
                let s = cdf.partition_point(|&c| c <= f) - 1;
                dec.update(cdf[s], cdf[s + 1]);
                s
            })
            .collect()
    }

    #[test]
    fn empty_sequence_is_tiny_and_round_trips() {
        let enc = RangeEncoder::new();
        let bytes = enc.finish();
        assert!(bytes.len() <= 8, "empty stream is {} bytes", bytes.len());
        let cdf = uniform_cdf(4);
        assert!(decode_all(&bytes, &cdf, 0).is_empty());
    }

    #[test]
    fn uniform_256_codes_one_byte_per_symbol() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cdf = uniform_cdf(256);
        let symbols: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..256)).collect();
        let bytes = encode_all(&symbols, &cdf);
        assert!(
            (bytes.len() as i64 - 10_000).unsigned_abs() <= 16,
            "coded {} bytes",
            bytes.len()
        );
        assert_eq!(decode_all(&bytes, &cdf, symbols.len()), symbols);
    }

    #[test]
    fn skewed_distributions_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..200 {
            let n_sym = rng.gen_range(2..40u32);
            // random positive counts summing to FREQ_TOTAL
            let mut counts: Vec<u32> = (0..n_sym).map(|_| rng.gen_range(1..2000)).collect();
            let sum: u32 = counts.iter().sum();
            // scale roughly then fix the last bucket
            let mut acc = 0u64;
            for c in counts.iter_mut() {
                *c = ((*c as u64 * (FREQ_TOTAL - n_sym) as u64) / sum as u64) as u32 + 1;
                acc += *c as u64;
            }
            let last = counts.last_mut().unwrap();
            *last = (*last as u64 + FREQ_TOTAL as u64 - acc) as u32;
            let mut cdf = vec![0u32];
            for &c in &counts {
                cdf.push(cdf.last().unwrap() + c);
            }
            assert_eq!(*cdf.last().unwrap(), FREQ_TOTAL);

            let len = rng.gen_range(0..600);
            // skew draws toward low symbols
            let symbols: Vec<usize> = (0..len)
                .map(|_| {
                    let f = rng.gen_range(0..FREQ_TOTAL);
                    cdf.partition_point(|&c| c <= f) - 1
                })
                .collect();
            let bytes = encode_all(&symbols, &cdf);
            assert_eq!(
                decode_all(&bytes, &cdf, symbols.len()),
                symbols,
                "case {case} failed"
            );
        }
    }

    #[test]
    fn coded_length_tracks_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        // strongly skewed 4-symbol model
        let cdf = vec![0u32, 60000, 63000, 65000, FREQ_TOTAL];
        let symbols: Vec<usize> = (0..20_000)
            .map(|_| {
                let f = rng.gen_range(0..FREQ_TOTAL);
                cdf.partition_point(|&c| c <= f) - 1
            })
            .collect();
        let entropy_bits: f64 = symbols
            .iter()
            .map(|&s| -(((cdf[s + 1] - cdf[s]) as f64) / FREQ_TOTAL as f64).log2())
            .sum();
        let bytes = encode_all(&symbols, &cdf);
        let actual_bits = 8.0 * bytes.len() as f64;
        assert!(
            actual_bits <= entropy_bits * 1.02 + 32.0,
            "actual {actual_bits} vs entropy {entropy_bits}"
        );
        assert_eq!(decode_all(&bytes, &cdf, symbols.len()), symbols);
    }

    #[test]
    fn raw16_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let values: Vec<u16> = (0..1000).map(|_| rng.gen()).collect();
        let mut enc = RangeEncoder::new();
        for &v in &values {
            enc.encode_raw16(v);
        }
        let bytes = enc.finish();
        assert!(bytes.len() <= 2 * values.len() + 4);
        let mut dec = RangeDecoder::new(&bytes);
        for &v in &values {
            assert_eq!(dec.decode_raw16(), v);
        }
    }

    #[test]
    fn carry_propagation_survives_adversarial_patterns() {
        // long runs of the most probable symbol push low toward 0xFF..FF,
        // exercising the cache/carry path
        let cdf = vec![0u32, 65534, 65535, FREQ_TOTAL];
        for run in [1usize, 7, 63, 255, 1024] {
            let mut symbols = vec![0usize; run];
            symbols.push(2);
            symbols.extend(vec![0usize; run]);
            symbols.push(1);
            let bytes = encode_all(&symbols, &cdf);
            assert_eq!(decode_all(&bytes, &cdf, symbols.len()), symbols);
        }
    }
}
