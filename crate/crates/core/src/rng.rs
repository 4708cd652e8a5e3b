//! Counter-based random number generation.
//!
//! Every random draw in this crate is keyed by `(seed, stream, index)` rather
//! than produced from shared mutable generator state. That makes results
//! independent of evaluation order: a path ensemble simulated across eight
//! worker threads is bit-identical to the serial run, and re-running any
//! subset of work reproduces exactly the same numbers.
//!
//! The generator applies the SplitMix64 finalizer (a 64-bit bijection with
//! full avalanche) to the key, then walks a Weyl sequence from that state for
//! draws within the keyed stream. Normal variates use the Box–Muller
//! transform, which consumes a fixed number of uniforms per draw — important
//! for keeping the counter discipline exact.

/// Golden-ratio increment for the Weyl sequence.
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: bijective, full-avalanche 64-bit mixer.
#[inline]
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapse `(seed, stream, index)` into a well-mixed generator state.
#[inline]
pub fn key(seed: u64, stream: u64, index: u64) -> u64 {
    finalize(finalize(finalize(seed) ^ stream) ^ index)
}

/// Stable sub-seed derivation, e.g. one seed per task in a run plan.
#[inline]
pub fn subseed(seed: u64, index: u64) -> u64 {
    key(seed, 0x5EED_5EED_5EED_5EED, index)
}

/// A keyed stream of draws. Cheap to construct; make one per logical unit of
/// work (per sample, per path) so work can be partitioned arbitrarily.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64, index: u64) -> Self {
        CounterRng {
            state: key(seed, stream, index),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        finalize(self.state)
    }

    /// Uniform draw in the half-open interval `(0, 1]` (never zero, so it is
    /// safe inside logarithms).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        let bits = self.next_u64() >> 11; // 53 significant bits
        (bits as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0) // 2^-53
    }

    /// Uniform draw in `[lo, hi)` (up to rounding at the endpoints).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (self.uniform() - 0.5 / 9_007_199_254_740_992.0)
    }

    /// Standard normal draw via Box–Muller (two uniforms per variate).
    #[inline]
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// The canonical Brownian-increment draw: one standard normal keyed by
/// `(seed, path, step)`. Simulations scale this by `sqrt(dt)`.
#[inline]
pub fn path_step_normal(seed: u64, path: u64, step: u64) -> f64 {
    CounterRng::new(seed, path, step).normal()
}
