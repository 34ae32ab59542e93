//! Encoder-side computation: amortized Gaussian posteriors over the
//! continuous latents, reparameterized sampling and exact posteriors over all
//! `2^K` presence states.

use msvae_tensor::{MlpNet, Tensor};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{all_state_mixes, state_residuals, DiscreteState, GenerativeParams};
use crate::msvae::MsVae;
use crate::rng;
use crate::training::Accumulators;

/// Φ: one network per source mapping `x` (width `D`) to `[ν | ln τ]`
/// (width `2Z`).
#[derive(Clone, Debug)]
pub struct EncoderParams {
    nets: Vec<MlpNet>,
    version: u64,
}

/// Compares parameters only, not snapshot counters.
impl PartialEq for EncoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.nets == other.nets
    }
}

impl EncoderParams {
    pub fn new(nets: Vec<MlpNet>) -> Result<Self> {
        if nets.is_empty() {
            return Err(Error::Dimension("no encoder networks".into()));
        }
        let (d, w) = (nets[0].in_dim(), nets[0].out_dim());
        if w % 2 != 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "encoder output width {w} is not 2Z for any Z ≥ 1"
            )));
        }
        for (i, n) in nets.iter().enumerate() {
            if n.in_dim() != d || n.out_dim() != w {
                return Err(Error::Dimension(format!(
                    "encoder {i} maps {}→{}, expected {d}→{w}",
                    n.in_dim(),
                    n.out_dim()
                )));
            }
        }
        Ok(EncoderParams { nets, version: 0 })
    }

    pub fn num_sources(&self) -> usize {
        self.nets.len()
    }

    pub fn data_dim(&self) -> usize {
        self.nets[0].in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.nets[0].out_dim() / 2
    }

    pub fn nets(&self) -> &[MlpNet] {
        &self.nets
    }

    /// Mutable access counts as a new parameter snapshot.
    pub fn nets_mut(&mut self) -> &mut [MlpNet] {
        self.version += 1;
        &mut self.nets
    }

    /// Identifier of the current parameter snapshot, bumped on every mutable
    /// access.
    pub fn snapshot_id(&self) -> u64 {
        self.version
    }

    /// Eval-mode encoding of one observation: `(ν, τ)`, each `[K, Z]`.
    pub fn encode(&self, x: &[f64]) -> Result<(Tensor, Tensor)> {
        if x.len() != self.data_dim() {
            return Err(Error::Dimension(format!(
                "observation of width {}, encoders expect {}",
                x.len(),
                self.data_dim()
            )));
        }
        let input = Tensor::matrix(1, x.len(), x.to_vec())?;
        let batch = self.encode_batch(&input)?;
        let z = self.latent_dim();
        let mut nu = Vec::with_capacity(self.num_sources() * z);
        let mut tau = Vec::with_capacity(self.num_sources() * z);
        for (n, t) in &batch {
            nu.extend_from_slice(n.data());
            tau.extend_from_slice(t.data());
        }
        let k = self.num_sources();
        Ok((Tensor::matrix(k, z, nu)?, Tensor::matrix(k, z, tau)?))
    }

    /// Eval-mode encoding of a batch `[B, D]`: per source `(ν, τ)`, each
    /// `[B, Z]`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        let z = self.latent_dim();
        let mut out = Vec::with_capacity(self.nets.len());
        for net in &self.nets {
            let h = net.predict(x)?;
            let rows = h.rows();
            let mut nu = Vec::with_capacity(rows * z);
            let mut tau = Vec::with_capacity(rows * z);
            for i in 0..rows {
                let r = h.row(i);
                nu.extend_from_slice(&r[..z]);
                tau.extend(r[z..].iter().map(|v| v.exp()));
            }
            out.push((Tensor::matrix(rows, z, nu)?, Tensor::matrix(rows, z, tau)?));
        }
        Ok(out)
    }
}

/// `M` joint latent draws for one data point.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    /// Standard-normal draws, `[K, M, Z]`.
    pub eps: Tensor,
    /// `z = ν + sqrt(τ) ⊙ ε`, `[K, M, Z]`.
    pub z: Tensor,
    /// Encoder snapshot the `(ν, τ)` came from.
    pub snapshot: u64,
    pub index: u64,
}

impl LatentSample {
    pub fn num_samples(&self) -> usize {
        self.z.shape()[1]
    }

    /// The `m`-th joint sample: row `k` is the `m`-th draw of stream `k`.
    pub fn joint(&self, m: usize) -> Tensor {
        let (k, mm, z) = (self.z.shape()[0], self.z.shape()[1], self.z.shape()[2]);
        let mut out = Vec::with_capacity(k * z);
        for kk in 0..k {
            let base = (kk * mm + m) * z;
            out.extend_from_slice(&self.z.data()[base..base + z]);
        }
        Tensor::matrix(k, z, out).expect("consistent dims")
    }
}

/// Reparameterized draws; `ε` is consumed in `k`, `m`, `h` order.
pub fn sample_latents(nu: &Tensor, tau: &Tensor, m: usize, rng: &mut impl Rng) -> Result<LatentSample> {
    if nu.shape() != tau.shape() || nu.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "ν {:?} and τ {:?} must be matching [K, Z] matrices",
            nu.shape(),
            tau.shape()
        )));
    }
    if m == 0 {
        return Err(Error::Config("at least one latent sample is required".into()));
    }
    if tau.data().iter().any(|&t| !(t >= 0.0)) {
        return Err(Error::Dimension("variances must be non-negative".into()));
    }
    let (k, zd) = (nu.rows(), nu.cols());
    let mut eps = Vec::with_capacity(k * m * zd);
    let mut z = Vec::with_capacity(k * m * zd);
    for kk in 0..k {
        for _ in 0..m {
            for h in 0..zd {
                let e = rng::standard_normal(rng);
                eps.push(e);
                z.push(nu.row(kk)[h] + tau.row(kk)[h].sqrt() * e);
            }
        }
    }
    Ok(LatentSample {
        eps: Tensor::new(vec![k, m, zd], eps)?,
        z: Tensor::new(vec![k, m, zd], z)?,
        snapshot: 0,
        index: 0,
    })
}

/// Normalized discrete posterior for one data point and one joint latent.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorTable {
    pub energies: Vec<f64>,
    pub log_q: Vec<f64>,
    pub q: Vec<f64>,
    /// Minimum energy; every exponent `B - E` is `≤ 0`.
    pub pivot: f64,
}

impl PosteriorTable {
    pub fn num_states(&self) -> usize {
        self.q.len()
    }
}

/// `q(s) = exp(B - E_s) / Σ_s' exp(B - E_s')` with `B = min_s E_s`.
pub fn posterior_from_energies(energies: &[f64]) -> Result<PosteriorTable> {
    if energies.is_empty() || !energies.len().is_power_of_two() {
        return Err(Error::Dimension(format!(
            "{} energies do not enumerate 2^K states",
            energies.len()
        )));
    }
    if energies.iter().any(|e| e.is_nan()) {
        return Err(Error::NonFinite { component: "energy" });
    }
    let pivot = energies.iter().copied().fold(f64::INFINITY, f64::min);
    if !pivot.is_finite() {
        return Err(Error::NonFinite { component: "energy" });
    }
    let w: Vec<f64> = energies.iter().map(|e| (pivot - e).exp()).collect();
    let total: f64 = w.iter().sum();
    let ln_total = total.ln();
    let q = w.iter().map(|v| v / total).collect();
    let log_q = energies.iter().map(|e| (pivot - e) - ln_total).collect();
    Ok(PosteriorTable {
        energies: energies.to_vec(),
        log_q,
        q,
        pivot,
    })
}

/// Posterior over states given `x` and one joint latent `z` (`[K, Z]`).
pub fn discrete_posterior(x: &[f64], z: &Tensor, gen: &GenerativeParams) -> Result<PosteriorTable> {
    posterior_from_energies(&gen.energies(x, z)?)
}

/// `Σ_s f(s) q(s)`, evaluated from the pivot-stabilized weights so that a
/// constant `f` is reproduced exactly.
pub fn posterior_expectation(f_values: &[f64], table: &PosteriorTable) -> Result<f64> {
    if f_values.len() != table.num_states() {
        return Err(Error::Dimension(format!(
            "{} function values for {} states",
            f_values.len(),
            table.num_states()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (f, e) in f_values.iter().zip(&table.energies) {
        let w = (table.pivot - e).exp();
        num += f * w;
        den += w;
    }
    Ok(num / den)
}

/// Average of [`discrete_posterior`] over `M` joint latent samples.
pub fn marginal_state_posterior(
    x: &[f64],
    model: &MsVae,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let (nu, tau) = model.encoders.encode(x)?;
    let sample = sample_latents(&nu, &tau, m, rng)?;
    let mut acc = vec![0.0; 1 << model.num_sources()];
    for j in 0..m {
        let t = discrete_posterior(x, &sample.joint(j), &model.generative)?;
        for (a, q) in acc.iter_mut().zip(&t.q) {
            *a += q;
        }
    }
    acc.iter_mut().for_each(|a| *a /= m as f64);
    Ok(acc)
}

/// Probability that source `k` is present: `Σ_{s: s_k = 1} q(s)`.
pub fn source_presence(q: &[f64], k: usize) -> f64 {
    q.iter()
        .enumerate()
        .filter(|(s, _)| s >> k & 1 == 1)
        .map(|(_, v)| v)
        .sum()
}

/// Per-point results of a [`posterior_pass`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointResult {
    /// Averaged discrete posterior `q(s; x)` over all states.
    pub table: Vec<f64>,
    /// Posterior means `ν`, `[K, Z]` row-major.
    pub nu: Vec<f64>,
    /// Per-sample ELBO estimate averaged over the `M` joint draws.
    pub elbo: f64,
    /// `Σ_k KL[q(z_k; x) || p(z_k)]`.
    pub kl: f64,
    /// `Σ_k H[q(z_k; x)]`.
    pub gaussian_entropy: f64,
    /// Mean over draws of `E_q[-ln q(s; z, x)]`.
    pub conditional_entropy: f64,
}

/// Dataset-level summary of a [`posterior_pass`]; means are per data point.
#[derive(Clone, Debug, PartialEq)]
pub struct PassSummary {
    pub points: Vec<PointResult>,
    pub accumulators: Accumulators,
    pub elbo: f64,
    pub kl: f64,
    pub gaussian_entropy: f64,
    pub conditional_entropy: f64,
}

/// Seed for the latent draws of data point `index` under pass seed `seed`.
pub fn point_seed(seed: u64, index: usize) -> u64 {
    rng::index_seed(rng::derive_seed(seed, "latent"), index as u64)
}

const PASS_CHUNK: usize = 64;

/// Eval-mode pass over `x` (`N × D`, row-major): encodes every point, draws
/// `M` joint latents from a per-point stream, and evaluates the exact
/// discrete posterior of each draw. Work is split into fixed chunks whose
/// results are reduced in order, so the output does not depend on the
/// number of worker threads.
pub fn posterior_pass(model: &MsVae, x: &[f64], m: usize, seed: u64) -> Result<PassSummary> {
    let d = model.data_dim();
    if m == 0 {
        return Err(Error::Config("at least one latent sample is required".into()));
    }
    if x.len() % d != 0 {
        return Err(Error::Dimension(format!(
            "{} values are not a whole number of width-{d} rows",
            x.len()
        )));
    }
    let n = x.len() / d;
    let chunks: Vec<usize> = (0..n).step_by(PASS_CHUNK).collect();
    let parts: Vec<Result<(Vec<PointResult>, Accumulators)>> = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + PASS_CHUNK).min(n);
            pass_chunk(model, &x[start * d..end * d], start, m, seed)
        })
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut acc = Accumulators::new(model.num_sources(), d);
    for p in parts {
        let (pts, a) = p?;
        points.extend(pts);
        acc.merge(&a)?;
    }
    let mean = |f: fn(&PointResult) -> f64| {
        if n == 0 {
            0.0
        } else {
            points.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let elbo = mean(|p| p.elbo);
    let kl = mean(|p| p.kl);
    let gaussian_entropy = mean(|p| p.gaussian_entropy);
    let conditional_entropy = mean(|p| p.conditional_entropy);
    Ok(PassSummary {
        points,
        accumulators: acc,
        elbo,
        kl,
        gaussian_entropy,
        conditional_entropy,
    })
}

fn pass_chunk(
    model: &MsVae,
    x: &[f64],
    offset: usize,
    m: usize,
    seed: u64,
) -> Result<(Vec<PointResult>, Accumulators)> {
    let gen = &model.generative;
    let (k, d, zd) = (model.num_sources(), model.data_dim(), model.latent_dim());
    let rows = x.len() / d;
    let xt = Tensor::matrix(rows, d, x.to_vec())?;
    let enc = model.encoders.encode_batch(&xt)?;

    let mut zs: Vec<Vec<f64>> = vec![Vec::with_capacity(rows * m * zd); k];
    for i in 0..rows {
        let mut r = rng::rng_for(point_seed(seed, offset + i));
        for (kk, (nu, tau)) in enc.iter().enumerate() {
            for _ in 0..m {
                for h in 0..zd {
                    let e = rng::standard_normal(&mut r);
                    zs[kk].push(nu.row(i)[h] + tau.row(i)[h].sqrt() * e);
                }
            }
        }
    }
    let mus: Vec<Tensor> = zs
        .into_iter()
        .zip(gen.decoders())
        .map(|(z, dec)| Ok(dec.predict(&Tensor::matrix(rows * m, zd, z)?)?))
        .collect::<Result<_>>()?;

    let lp = gen.log_prior_table();
    let b = gen.b();
    let norm = d as f64 * (2.0 * b).ln();
    let states = 1usize << k;
    let mut acc = Accumulators::new(k, d);
    let mut out = Vec::with_capacity(rows);
    let (mut mixes, mut l1) = (Vec::new(), Vec::new());
    let mut a = vec![0.0; states];
    for i in 0..rows {
        let xi = &x[i * d..(i + 1) * d];
        let mut p = PointResult {
            table: vec![0.0; states],
            nu: Vec::with_capacity(k * zd),
            ..Default::default()
        };
        for (nu, tau) in &enc {
            p.nu.extend_from_slice(nu.row(i));
            for h in 0..zd {
                let (v, t) = (nu.row(i)[h], tau.row(i)[h]);
                p.kl += 0.5 * (t + v * v - 1.0 - t.ln());
                p.gaussian_entropy += 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * t).ln();
            }
        }
        let mut g_sum = 0.0;
        let mut presence = vec![0.0; k];
        let mut l1_sum = 0.0;
        for j in 0..m {
            let row = i * m + j;
            let rows_k: Vec<&[f64]> = mus.iter().map(|t| t.row(row)).collect();
            all_state_mixes(&rows_k, &mut mixes);
            state_residuals(xi, &mixes, &mut l1);
            for s in 0..states {
                a[s] = -norm - l1[s] / b + lp[s];
            }
            let pivot = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !pivot.is_finite() {
                return Err(Error::NonFinite {
                    component: "reconstruction",
                });
            }
            let total: f64 = a.iter().map(|v| (v - pivot).exp()).sum();
            let lse = pivot + total.ln();
            g_sum += lse;
            for s in 0..states {
                let log_q = a[s] - lse;
                let q = log_q.exp();
                p.table[s] += q;
                l1_sum += q * l1[s];
                if q > 0.0 {
                    p.conditional_entropy -= q * log_q;
                }
                for (kk, pr) in presence.iter_mut().enumerate() {
                    if s >> kk & 1 == 1 {
                        *pr += q;
                    }
                }
            }
        }
        let mf = m as f64;
        p.table.iter_mut().for_each(|v| *v /= mf);
        p.conditional_entropy /= mf;
        p.elbo = g_sum / mf - p.kl;
        acc.add(&presence, l1_sum, m)?;
        out.push(p);
    }
    Ok((out, acc))
}

/// Most probable state under `table`, ties broken toward the lower index.
pub fn map_state(table: &[f64], k: usize) -> DiscreteState {
    let mut best = 0;
    for (s, &v) in table.iter().enumerate() {
        if v > table[best] {
            best = s;
        }
    }
    DiscreteState::from_index(best, k).expect("table enumerates 2^K states")
}
