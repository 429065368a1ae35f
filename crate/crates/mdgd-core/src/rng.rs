//! Counter-based pseudo-random stream.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood, OOPSLA 2014; the
//! `java.util.SplittableRandom` finalizer) evaluated as a pure function of
//! `(seed, position)`. The n-th output is `mix64(seed + n·GAMMA)`, so the
//! stream can be seeked, forked and replayed exactly on any platform —
//! every draw is integer arithmetic until the final float conversion.

use serde::{Deserialize, Serialize};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a bijective avalanche mix of a 64-bit word.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seekable deterministic random stream.
///
/// Identical `(seed, position)` pairs produce identical next values;
/// advancing consumes one position per `u64` drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: u64,
    position: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, position: 0 }
    }

    pub fn with_position(seed: u64, position: u64) -> Self {
        RngState { seed, position }
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Forks an independent stream identified by `tag`.
    ///
    /// Distinct tags give decorrelated seeds; the derivation is itself a
    /// pure function so forked streams are reproducible.
    pub fn derive(&self, tag: u64) -> RngState {
        RngState::new(mix64(self.seed ^ mix64(tag.wrapping_add(GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.position = self.position.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.position.wrapping_mul(GAMMA)))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        // 53-bit uniform scaled by the bound; bias is ~bound/2^53, far below
        // anything observable at desk scale, and the mapping is exact and
        // platform-independent.
        (self.next_f64() * bound as f64) as u64
    }

    /// Standard normal draw via Box–Muller (consumes two positions).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_position_same_value() {
        let mut a = RngState::with_position(42, 17);
        let mut b = RngState::with_position(42, 17);
        assert_eq!(a.next_u64(), b.next_u64());
        assert_eq!(a.next_f64(), b.next_f64());
    }

    #[test]
    fn seek_matches_sequential_drawing() {
        let mut seq = RngState::new(7);
        for _ in 0..9 {
            seq.next_u64();
        }
        let mut seeked = RngState::with_position(7, 9);
        assert_eq!(seq.next_u64(), seeked.next_u64());
    }

    #[test]
    fn distinct_seeds_differ() {
        assert_ne!(RngState::new(1).next_u64(), RngState::new(2).next_u64());
    }

    #[test]
    fn derive_is_reproducible_and_decorrelated() {
        let base = RngState::new(99);
        assert_eq!(base.derive(3), base.derive(3));
        assert_ne!(base.derive(3).next_u64(), base.derive(4).next_u64());
        // deriving does not advance the parent
        assert_eq!(base.position(), 0);
    }

    #[test]
    fn uniform_in_half_open_interval() {
        let mut rng = RngState::new(5);
        for _ in 0..1000 {
            let v = rng.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut rng = RngState::new(11);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn next_below_stays_in_range() {
        let mut rng = RngState::new(23);
        for _ in 0..1000 {
            assert!(rng.next_below(6) < 6);
        }
    }
}
