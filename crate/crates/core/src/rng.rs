//! Seed derivation. One root seed is split per purpose and per data index so
//! changing one part of a run (e.g. the sample count) does not perturb the
//! random streams of another (e.g. data generation).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Rng64 = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a named purpose such as `"data"` or `"init"`.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    // FNV-1a over the tag, then mixed with the parent.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(seed ^ splitmix(h))
}

/// Child seed for the `index`-th item of a stream (counter-based splitting).
pub fn index_seed(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed).wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

pub fn rng_for(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Laplace draw by inverting the CDF of one uniform variate.
pub fn laplace(rng: &mut impl Rng, loc: f64, scale: f64) -> f64 {
    // u in (-1/2, 1/2); the open interval keeps ln() finite.
    let mut u: f64 = rng.gen::<f64>() - 0.5;
    while u == -0.5 {
        u = rng.gen::<f64>() - 0.5;
    }
    loc - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purposes_and_indices_split() {
        assert_ne!(derive_seed(1, "data"), derive_seed(1, "init"));
        assert_ne!(index_seed(1, 0), index_seed(1, 1));
        assert_eq!(derive_seed(5, "x"), derive_seed(5, "x"));
    }

    #[test]
    fn laplace_moments() {
        let mut rng = rng_for(11);
        let n = 200_000;
        let b = 0.7;
        let draws: Vec<f64> = (0..n).map(|_| laplace(&mut rng, 1.0, b)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let mad = draws.iter().map(|v| (v - 1.0).abs()).sum::<f64>() / n as f64;
        // sd of the mean is sqrt(2) b / sqrt(n)
        assert!((mean - 1.0).abs() < 4.0 * (2.0f64).sqrt() * b / (n as f64).sqrt());
        // E|x - loc| = b, Var|x - loc| = b^2
        assert!((mad - b).abs() < 4.0 * b / (n as f64).sqrt());
    }
}
