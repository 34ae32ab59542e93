use msvae_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::pool::SourcePool;
use crate::error::{Error, Result};
use crate::model::DiscreteState;
use crate::rng;

/// Descriptive metadata carried alongside a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// `(rows, cols)` when each observation is an image.
    pub image_shape: Option<(usize, usize)>,
    /// How raw values were scaled, e.g. `"pixel/255"`.
    pub normalization: Option<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub pi_gen: Option<Vec<f64>>,
    pub b_gen: Option<f64>,
    /// Source labels in stream order.
    pub labels: Option<Vec<u32>>,
}

/// Observations `x` (`N × D`) with optional ground truth: presence bits
/// (`N × K`), clean per-source components (`N × K × D`) and the additive
/// noise draw (`N × D`).
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDataset {
    n: usize,
    d: usize,
    x: Vec<f64>,
    k: usize,
    truth_s: Option<Vec<u8>>,
    components: Option<Vec<f64>>,
    noise: Option<Vec<f64>>,
    pub meta: DatasetMeta,
}

impl MixtureDataset {
    pub fn from_features(n: usize, d: usize, x: Vec<f64>) -> Result<Self> {
        if x.len() != n * d {
            return Err(Error::Dimension(format!(
                "{} values for {n} rows of width {d}",
                x.len()
            )));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!(
                "non-finite observation at row {}, column {}",
                pos / d.max(1),
                pos % d.max(1)
            )));
        }
        Ok(MixtureDataset {
            n,
            d,
            x,
            k: 0,
            truth_s: None,
            components: None,
            noise: None,
            meta: DatasetMeta::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// `K` when truth is attached.
    pub fn num_sources(&self) -> Option<usize> {
        self.truth_s.as_ref().map(|_| self.k)
    }

    pub fn features(&self) -> &[f64] {
        &self.x
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Rows `indices` stacked into a matrix.
    pub fn rows_tensor(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), self.d, data).expect("consistent dims")
    }

    pub fn set_truth(&mut self, k: usize, bits: Vec<u8>) -> Result<()> {
        if bits.len() != self.n * k || bits.iter().any(|&b| b > 1) {
            return Err(Error::Dimension(format!(
                "truth block needs {} binary entries, got {}",
                self.n * k,
                bits.len()
            )));
        }
        self.k = k;
        self.truth_s = Some(bits);
        Ok(())
    }

    pub fn has_truth(&self) -> bool {
        self.truth_s.is_some()
    }

    pub fn truth_bits(&self, i: usize) -> Option<&[u8]> {
        self.truth_s
            .as_ref()
            .map(|t| &t[i * self.k..(i + 1) * self.k])
    }

    pub fn truth_state(&self, i: usize) -> Option<DiscreteState> {
        self.truth_bits(i)
            .map(|b| DiscreteState::from_bits(b).expect("validated truth"))
    }

    pub fn truth_flat(&self) -> Option<&[u8]> {
        self.truth_s.as_deref()
    }

    /// Requires truth to be set first (it fixes `K`).
    pub fn set_components(&mut self, components: Vec<f64>) -> Result<()> {
        if self.truth_s.is_none() {
            return Err(Error::Usage("components need a truth block first".into()));
        }
        if components.len() != self.n * self.k * self.d {
            return Err(Error::Dimension(format!(
                "component block needs {} values, got {}",
                self.n * self.k * self.d,
                components.len()
            )));
        }
        self.components = Some(components);
        Ok(())
    }

    pub fn component(&self, i: usize, k: usize) -> Option<&[f64]> {
        let d = self.d;
        let base = (i * self.k + k) * d;
        self.components.as_ref().map(|c| &c[base..base + d])
    }

    pub fn components_flat(&self) -> Option<&[f64]> {
        self.components.as_deref()
    }

    pub fn set_noise(&mut self, noise: Vec<f64>) -> Result<()> {
        if noise.len() != self.n * self.d {
            return Err(Error::Dimension(format!(
                "noise block needs {} values, got {}",
                self.n * self.d,
                noise.len()
            )));
        }
        self.noise = Some(noise);
        Ok(())
    }

    pub fn noise_row(&self, i: usize) -> Option<&[f64]> {
        self.noise
            .as_ref()
            .map(|v| &v[i * self.d..(i + 1) * self.d])
    }

    pub fn noise_flat(&self) -> Option<&[f64]> {
        self.noise.as_deref()
    }

    /// Copy of the selected rows, truth blocks included.
    pub fn subset(&self, indices: &[usize]) -> MixtureDataset {
        let mut x = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            x.extend_from_slice(self.row(i));
        }
        let pick = |flat: &Vec<f64>, width: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                out.extend_from_slice(&flat[i * width..(i + 1) * width]);
            }
            out
        };
        MixtureDataset {
            n: indices.len(),
            d: self.d,
            x,
            k: self.k,
            truth_s: self.truth_s.as_ref().map(|t| {
                let mut out = Vec::with_capacity(indices.len() * self.k);
                for &i in indices {
                    out.extend_from_slice(&t[i * self.k..(i + 1) * self.k]);
                }
                out
            }),
            components: self.components.as_ref().map(|c| pick(c, self.k * self.d)),
            noise: self.noise.as_ref().map(|nz| pick(nz, self.d)),
            meta: self.meta.clone(),
        }
    }

    /// Strips every truth block.
    pub fn features_only(&self) -> MixtureDataset {
        MixtureDataset {
            n: self.n,
            d: self.d,
            x: self.x.clone(),
            k: 0,
            truth_s: None,
            components: None,
            noise: None,
            meta: self.meta.clone(),
        }
    }
}

/// Builds mixtures from labelled single-source exemplars: per data point
/// `s ~ Bernoulli(π_gen)`, one uniformly chosen exemplar per active source,
/// summed and corrupted by `Laplace(0, b_gen)` noise. No clipping is applied.
pub fn compose_mixtures(
    pool: &SourcePool,
    pi_gen: &[f64],
    b_gen: f64,
    n: usize,
    seed: u64,
) -> Result<MixtureDataset> {
    let k = pool.num_sources();
    if pi_gen.len() != k {
        return Err(Error::Config(format!(
            "{} presence probabilities for {k} sources",
            pi_gen.len()
        )));
    }
    if pi_gen.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config(format!("presence probabilities {pi_gen:?}")));
    }
    if !(b_gen >= 0.0) {
        return Err(Error::Config(format!("noise scale {b_gen}")));
    }
    for g in pool.groups() {
        if g.exemplars.is_empty() {
            return Err(Error::EmptySource { label: g.label });
        }
    }
    let d = pool.dim();
    let mut rng = rng::rng_for(rng::derive_seed(seed, "compose"));
    let mut x = Vec::with_capacity(n * d);
    let mut truth = Vec::with_capacity(n * k);
    let mut components = Vec::with_capacity(n * k * d);
    let mut noise = Vec::with_capacity(n * d);
    let zeros = vec![0.0; d];
    for _ in 0..n {
        let mut clean = vec![0.0; d];
        for (kk, g) in pool.groups().iter().enumerate() {
            let on = rng.gen::<f64>() < pi_gen[kk];
            truth.push(on as u8);
            let comp = if on {
                let pick = rng.gen_range(0..g.exemplars.len());
                &g.exemplars[pick]
            } else {
                &zeros
            };
            for (c, &v) in clean.iter_mut().zip(comp) {
                *c += v;
            }
            components.extend_from_slice(comp);
        }
        for c in clean {
            let e = if b_gen > 0.0 {
                rng::laplace(&mut rng, 0.0, b_gen)
            } else {
                0.0
            };
            noise.push(e);
            x.push(c + e);
        }
    }
    let mut ds = MixtureDataset::from_features(n, d, x)?;
    ds.set_truth(k, truth)?;
    ds.set_components(components)?;
    ds.set_noise(noise)?;
    ds.meta.image_shape = pool.image_shape();
    ds.meta.seed = Some(seed);
    ds.meta.pi_gen = Some(pi_gen.to_vec());
    ds.meta.b_gen = Some(b_gen);
    ds.meta.labels = Some(pool.labels());
    Ok(ds)
}

/// Seeded disjoint split; the first part receives `round(fraction · N)` rows.
pub fn split(
    dataset: &MixtureDataset,
    fraction: f64,
    seed: u64,
) -> Result<(MixtureDataset, MixtureDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} not in (0, 1)")));
    }
    let n = dataset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng_for(rng::derive_seed(seed, "split")));
    let cut = (fraction * n as f64).round() as usize;
    let (a, b) = idx.split_at(cut);
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((dataset.subset(&a), dataset.subset(&b)))
}

/// Empirical frequency of each state index among the truth states.
pub fn case_frequencies(dataset: &MixtureDataset) -> Result<Vec<f64>> {
    let k = dataset.num_sources().ok_or(Error::MissingTruth)?;
    let mut counts = vec![0usize; 1 << k];
    for i in 0..dataset.len() {
        counts[dataset.truth_state(i).expect("truth present").index()] += 1;
    }
    let n = dataset.len().max(1) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}
