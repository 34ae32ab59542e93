//! Decoder-side probability model: Bernoulli presence priors, standard-normal
//! latent priors, linear superposition of per-source decodings and a Laplace
//! observation model.

use std::f64::consts::PI;

use msvae_tensor::{MlpNet, Tensor};

use crate::data::MixtureDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng64};

/// Largest source count for which all `2^K` states are enumerated.
pub const MAX_ENUMERATED_SOURCES: usize = 16;
/// Presence probabilities are kept inside `[PI_MIN, 1 - PI_MIN]`.
pub const PI_MIN: f64 = 1e-4;
/// Smallest admissible Laplace scale.
pub const B_FLOOR: f64 = 1e-6;

pub fn check_capacity(k: usize) -> Result<()> {
    if k > MAX_ENUMERATED_SOURCES {
        return Err(Error::Capacity {
            k,
            max: MAX_ENUMERATED_SOURCES,
        });
    }
    Ok(())
}

/// One binary presence vector. Bit `k` of `index` is `s_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DiscreteState {
    index: usize,
    k: usize,
}

impl DiscreteState {
    pub fn from_index(index: usize, k: usize) -> Result<Self> {
        check_capacity(k)?;
        if index >= 1 << k {
            return Err(Error::Dimension(format!(
                "state index {index} out of range for K={k}"
            )));
        }
        Ok(DiscreteState { index, k })
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        check_capacity(bits.len())?;
        let mut index = 0;
        for (k, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => index |= 1 << k,
                other => {
                    return Err(Error::Dimension(format!("state bit {k} is {other}")));
                }
            }
        }
        Ok(DiscreteState {
            index,
            k: bits.len(),
        })
    }

    /// All `2^K` states in index order.
    pub fn all(k: usize) -> impl Iterator<Item = DiscreteState> {
        (0..1usize << k).map(move |index| DiscreteState { index, k })
    }

    pub fn index(self) -> usize {
        self.index
    }

    pub fn num_sources(self) -> usize {
        self.k
    }

    pub fn bit(self, k: usize) -> bool {
        self.index >> k & 1 == 1
    }

    pub fn bits(self) -> Vec<u8> {
        (0..self.k).map(|k| self.bit(k) as u8).collect()
    }

    pub fn active_count(self) -> usize {
        self.index.count_ones() as usize
    }
}

/// `ln p(s) = Σ_k s_k ln π_k + (1 - s_k) ln(1 - π_k)`
pub fn log_prior_s(s: DiscreteState, pi: &[f64]) -> f64 {
    pi.iter()
        .enumerate()
        .map(|(k, &p)| if s.bit(k) { p.ln() } else { (1.0 - p).ln() })
        .sum()
}

/// `ln p(s)` for every state, indexed by state index.
pub fn log_prior_table(pi: &[f64]) -> Vec<f64> {
    let k = pi.len();
    let mut table = vec![0.0; 1 << k];
    let off: f64 = pi.iter().map(|p| (1.0 - p).ln()).sum();
    table[0] = off;
    for s in 1..table.len() {
        let low = s.trailing_zeros() as usize;
        let rest = s & (s - 1);
        table[s] = table[rest] + pi[low].ln() - (1.0 - pi[low]).ln();
    }
    table
}

/// Standard-normal log density summed over every latent coordinate.
pub fn log_prior_z(z: &[f64]) -> f64 {
    let c = -0.5 * (2.0 * PI).ln();
    z.iter().map(|v| c - 0.5 * v * v).sum()
}

/// `Σ_k s_k μ_k` for `mus` shaped `[K, D]`.
pub fn combine_sources(s: DiscreteState, mus: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; mus.cols()];
    for k in 0..mus.rows() {
        if s.bit(k) {
            for (o, &m) in out.iter_mut().zip(mus.row(k)) {
                *o += m;
            }
        }
    }
    out
}

/// Laplace log density `-D ln(2b) - Σ_d |x_d - μ_d| / b`.
pub fn log_likelihood(x: &[f64], mu_mix: &[f64], b: f64) -> f64 {
    let l1: f64 = x.iter().zip(mu_mix).map(|(a, m)| (a - m).abs()).sum();
    -(x.len() as f64) * (2.0 * b).ln() - l1 / b
}

/// Writes the superposition for every state into `mixes` (`2^K × D`), each
/// built from its predecessor with the lowest set bit cleared.
pub(crate) fn all_state_mixes(mus: &[&[f64]], mixes: &mut Vec<f64>) {
    let k = mus.len();
    let d = mus.first().map_or(0, |m| m.len());
    let n = 1usize << k;
    mixes.clear();
    mixes.resize(n * d, 0.0);
    for s in 1..n {
        let low = s.trailing_zeros() as usize;
        let rest = s & (s - 1);
        let (done, cur) = mixes.split_at_mut(s * d);
        let base = &done[rest * d..rest * d + d];
        for ((c, &b), &m) in cur[..d].iter_mut().zip(base).zip(mus[low]) {
            *c = b + m;
        }
    }
}

/// Per-state L1 residuals `Σ_d |x_d - mix_s,d|`.
pub(crate) fn state_residuals(x: &[f64], mixes: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(
        mixes
            .chunks_exact(x.len())
            .map(|mix| x.iter().zip(mix).map(|(a, m)| (a - m).abs()).sum::<f64>()),
    );
}

/// Θ: presence probabilities, one decoder per source and the Laplace scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeParams {
    pi: Vec<f64>,
    decoders: Vec<MlpNet>,
    b: f64,
}

impl GenerativeParams {
    pub fn new(pi: Vec<f64>, decoders: Vec<MlpNet>, b: f64) -> Result<Self> {
        let k = pi.len();
        check_capacity(k)?;
        if k == 0 || decoders.len() != k {
            return Err(Error::Dimension(format!(
                "{} decoders for {k} presence probabilities",
                decoders.len()
            )));
        }
        let (z, d) = (decoders[0].in_dim(), decoders[0].out_dim());
        for (i, dec) in decoders.iter().enumerate() {
            if dec.in_dim() != z || dec.out_dim() != d {
                return Err(Error::Dimension(format!(
                    "decoder {i} maps {}→{}, expected {z}→{d}",
                    dec.in_dim(),
                    dec.out_dim()
                )));
            }
        }
        if pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("presence probabilities {pi:?}")));
        }
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::Config(format!("Laplace scale must be positive, got {b}")));
        }
        let mut g = GenerativeParams {
            pi: Vec::new(),
            decoders,
            b: 0.0,
        };
        g.set_pi(&pi);
        g.set_b(b);
        Ok(g)
    }

    pub fn num_sources(&self) -> usize {
        self.pi.len()
    }

    pub fn data_dim(&self) -> usize {
        self.decoders[0].out_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.decoders[0].in_dim()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Stores `pi` clamped into `[PI_MIN, 1 - PI_MIN]`.
    pub fn set_pi(&mut self, pi: &[f64]) {
        self.pi = pi.iter().map(|p| p.clamp(PI_MIN, 1.0 - PI_MIN)).collect();
    }

    /// Stores `b` floored at [`B_FLOOR`].
    pub fn set_b(&mut self, b: f64) {
        self.b = b.max(B_FLOOR);
    }

    pub fn decoders(&self) -> &[MlpNet] {
        &self.decoders
    }

    pub fn decoders_mut(&mut self) -> &mut [MlpNet] {
        &mut self.decoders
    }

    pub fn log_prior_table(&self) -> Vec<f64> {
        log_prior_table(&self.pi)
    }

    /// Decoder means for one joint latent `z` shaped `[K, Z]` → `[K, D]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let k = self.num_sources();
        if z.rows() != k || z.cols() != self.latent_dim() {
            return Err(Error::Dimension(format!(
                "latent shaped {:?}, expected [{k}, {}]",
                z.shape(),
                self.latent_dim()
            )));
        }
        let d = self.data_dim();
        let mut out = Vec::with_capacity(k * d);
        for (kk, dec) in self.decoders.iter().enumerate() {
            let zk = Tensor::matrix(1, z.cols(), z.row(kk).to_vec())?;
            out.extend_from_slice(dec.predict(&zk)?.data());
        }
        Ok(Tensor::matrix(k, d, out)?)
    }

    /// `E(x, s, z) = -ln p(x, s, z)`.
    pub fn energy(&self, x: &[f64], s: DiscreteState, z: &Tensor) -> Result<f64> {
        self.check_x(x)?;
        let mus = self.decode(z)?;
        let mix = combine_sources(s, &mus);
        Ok(-(log_likelihood(x, &mix, self.b) + log_prior_s(s, &self.pi) + log_prior_z(z.data())))
    }

    /// Energies of all `2^K` states for one joint latent, in index order.
    pub fn energies(&self, x: &[f64], z: &Tensor) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let mus = self.decode(z)?;
        let rows: Vec<&[f64]> = (0..mus.rows()).map(|k| mus.row(k)).collect();
        let mut mixes = Vec::new();
        let mut l1 = Vec::new();
        all_state_mixes(&rows, &mut mixes);
        state_residuals(x, &mixes, &mut l1);
        let lp = self.log_prior_table();
        let lz = log_prior_z(z.data());
        let norm = x.len() as f64 * (2.0 * self.b).ln();
        Ok(l1
            .iter()
            .zip(&lp)
            .map(|(r, p)| norm + r / self.b - p - lz)
            .collect())
    }

    pub(crate) fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.data_dim() {
            return Err(Error::Dimension(format!(
                "observation of width {}, model expects {}",
                x.len(),
                self.data_dim()
            )));
        }
        Ok(())
    }
}

/// Ancestral sampling: `s ~ Bernoulli(π)`, `z ~ N(0, I)`,
/// `x ~ Laplace(Σ_k s_k μ(z_k), b)`. Stores truth states, the per-source
/// clean components `s_k μ(z_k)` and the noise draw.
pub fn sample_dataset(gen: &GenerativeParams, n: usize, seed: u64) -> Result<MixtureDataset> {
    let (k, d, zdim) = (gen.num_sources(), gen.data_dim(), gen.latent_dim());
    let mut rng: Rng64 = rng::rng_for(rng::derive_seed(seed, "data"));
    let mut x = Vec::with_capacity(n * d);
    let mut truth = Vec::with_capacity(n * k);
    let mut components = Vec::with_capacity(n * k * d);
    let mut noise = Vec::with_capacity(n * d);
    for _ in 0..n {
        let bits: Vec<u8> = gen
            .pi()
            .iter()
            .map(|&p| (rand::Rng::gen::<f64>(&mut rng) < p) as u8)
            .collect();
        let z: Vec<f64> = (0..k * zdim).map(|_| rng::standard_normal(&mut rng)).collect();
        let mus = gen.decode(&Tensor::matrix(k, zdim, z)?)?;
        let mut clean = vec![0.0; d];
        for kk in 0..k {
            for (j, &m) in mus.row(kk).iter().enumerate() {
                let c = if bits[kk] == 1 { m } else { 0.0 };
                components.push(c);
                clean[j] += c;
            }
        }
        for c in clean {
            let e = rng::laplace(&mut rng, 0.0, gen.b());
            noise.push(e);
            x.push(c + e);
        }
        truth.extend_from_slice(&bits);
    }
    let mut ds = MixtureDataset::from_features(n, d, x)?;
    ds.set_truth(k, truth)?;
    ds.set_components(components)?;
    ds.set_noise(noise)?;
    ds.meta.seed = Some(seed);
    ds.meta.pi_gen = Some(gen.pi().to_vec());
    ds.meta.b_gen = Some(gen.b());
    Ok(ds)
}
