//! Deterministic randomness helpers.
//!
//! Every stochastic decision in the crate draws from a seeded ChaCha stream
//! passed in by the caller, so a run is a pure function of its seeds. The
//! helpers here exist because the `no_std` build of `rand` ships no
//! distributions beyond uniform ones.

use rand_chacha::ChaCha12Rng;

pub use rand::{Rng, RngCore, SeedableRng};

/// The stream cipher RNG used throughout. Re-exported so callers never
/// instantiate a different engine by accident.
pub type Chacha = ChaCha12Rng;

/// Fresh stream for a given seed.
pub fn seeded(seed: u64) -> Chacha {
    Chacha::seed_from_u64(seed)
}

/// Derive an independent stream for a named sub-task of a run. Cheap
/// alternative to stream splitting: mix the label into the seed.
pub fn derived(seed: u64, label: &str) -> Chacha {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &b in label.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    seeded(seed ^ h)
}

/// Standard normal via Box–Muller. Draws two uniforms per sample; the sine
/// branch is discarded to keep the stream layout independent of call parity.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// Standard Gumbel: `-ln(-ln u)` with `u` uniform in (0, 1).
pub fn standard_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    -libm::log(-libm::log(u))
}

/// Uniform choice from the inclusive integer range `[lo, hi]`.
pub fn pick<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize) -> usize {
    debug_assert!(lo <= hi);
    rng.gen_range(lo..=hi)
}

/// Uniform choice from the grid `{lo, lo+step, ..., hi}` (inclusive, `hi`
/// assumed to lie on the grid).
pub fn pick_grid<R: Rng + ?Sized>(rng: &mut R, lo: f64, step: f64, hi: f64) -> f64 {
    let n = ((hi - lo) / step + 0.5) as usize;
    lo + step * pick(rng, 0, n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = seeded(7);
        let mut b = seeded(7);
        for _ in 0..100 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let mut a = derived(7, "stage0");
        let mut b = derived(7, "stage1");
        let same = (0..8).filter(|_| a.gen::<u64>() == b.gen::<u64>()).count();
        assert!(same < 8);
    }

    #[test]
    fn normal_moments_plausible() {
        let mut rng = seeded(11);
        let n = 20_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = standard_normal(&mut rng);
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn gumbel_moments_plausible() {
        // Mean of the standard Gumbel is the Euler–Mascheroni constant.
        let mut rng = seeded(13);
        let n = 40_000;
        let mean = (0..n).map(|_| standard_gumbel(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5772).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn grid_pick_stays_on_grid() {
        let mut rng = seeded(17);
        for _ in 0..1000 {
            let v = pick_grid(&mut rng, 0.5, 0.5, 4.0);
            let steps = v / 0.5;
            assert!((steps - libm::round(steps)).abs() < 1e-12);
            assert!((0.5..=4.0).contains(&v));
        }
    }
}
