//! Scalar abstraction for the numeric core.
//!
//! Physics, policy math, CPPN evaluation and the statistics all run over any
//! [`Real`]; the crate root exports `f64` aliases for everyday use. Random
//! draws always consume `f64` words from the underlying stream, so f32 and
//! f64 instantiations walk identical RNG trajectories.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + serde::Serialize
    + serde::de::DeserializeOwned
    + 'static
{
    /// Lift an `f64` constant into the scalar type.
    fn c(v: f64) -> Self;

    /// Uniform draw in `[0, 1)`.
    fn unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::c(rng.gen::<f64>())
    }

    /// Standard normal draw (Box-Muller over two uniform words).
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let u1 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2 = rng.gen::<f64>();
        Self::c((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
    }
}

impl Real for f32 {
    fn c(v: f64) -> f32 {
        v as f32
    }
}

impl Real for f64 {
    fn c(v: f64) -> f64 {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f32_and_f64_share_rng_trajectories() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x32 = f32::standard_normal(&mut a);
            let x64 = f64::standard_normal(&mut b);
            assert!((f64::from(x32) - x64).abs() < 1e-6);
        }
    }

    #[test]
    fn normal_draws_have_plausible_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| f64::standard_normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
