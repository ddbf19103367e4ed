//! Deterministic pseudo-randomness for the whole crate.
//!
//! Every stochastic choice (permutation derivation, parameter init, batch
//! order, inference-time key sampling, attack random starts, dataset
//! synthesis) draws from a splitmix64 stream. Streams are derived from a
//! master seed plus a label, so any experiment replays exactly from its
//! seed and nothing depends on global state.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 generator. The update and output mix are fixed; the derived
/// permutations are part of the on-disk contract, so this must never change.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Draw in `0..n` by modulo. The modulo draw is normative for
    /// permutation derivation; the bias for our small `n` is negligible.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn normal_f64(&mut self) -> f64 {
        let u1 = self.unit_f64().max(f64::MIN_POSITIVE);
        let u2 = self.unit_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle, iterating from the last index down.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

/// FNV-1a over raw bytes; used for stream labels and parameter checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Named substream of a master seed. Distinct labels give independent
/// streams; the same (seed, label) always gives the same stream.
pub fn stream(master_seed: u64, label: &str) -> SplitMix64 {
    SplitMix64::new(master_seed ^ fnv1a64(label.as_bytes()))
}

/// Substream for the `index`-th element of a labelled family, e.g. one
/// stream per image in a batch attack.
pub fn indexed_stream(master_seed: u64, label: &str, index: u64) -> SplitMix64 {
    let mut s = stream(master_seed, label);
    let base = s.next_u64();
    SplitMix64::new(base ^ index.wrapping_mul(GOLDEN_GAMMA))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_output_matches_reference() {
        // Reference value traced by hand from the splitmix64 definition.
        let mut rng = SplitMix64::new(42);
        assert_eq!(rng.next_u64(), 0xbdd7_3226_2feb_6e95);
        assert_eq!(rng.next_u64(), 0x28ef_e333_b266_f103);
    }

    #[test]
    fn streams_are_reproducible_and_label_sensitive() {
        let mut a = stream(7, "init");
        let mut b = stream(7, "init");
        let mut c = stream(7, "sampler");
        let x = a.next_u64();
        assert_eq!(x, b.next_u64());
        assert_ne!(x, c.next_u64());
    }

    #[test]
    fn unit_f64_stays_in_range() {
        let mut rng = SplitMix64::new(1);
        for _ in 0..1000 {
            let u = rng.unit_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn indexed_streams_differ() {
        let mut a = indexed_stream(3, "attack", 0);
        let mut b = indexed_stream(3, "attack", 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
