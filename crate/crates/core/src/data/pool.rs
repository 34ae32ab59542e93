use rand::seq::index;

use crate::data::{DatasetMeta, MixtureDataset};
use crate::error::{Error, Result};
use crate::rng;

/// Clean exemplars of one source label.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceGroup {
    pub label: u32,
    pub exemplars: Vec<Vec<f64>>,
}

/// Per-label collections of clean single-source exemplars. Group order defines
/// the stream order: group `k` feeds source `k` of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct SourcePool {
    dim: usize,
    image_shape: Option<(usize, usize)>,
    groups: Vec<SourceGroup>,
}

impl SourcePool {
    pub fn new(
        dim: usize,
        image_shape: Option<(usize, usize)>,
        groups: Vec<SourceGroup>,
    ) -> Result<Self> {
        if let Some((r, c)) = image_shape {
            if r * c != dim {
                return Err(Error::Dimension(format!(
                    "image shape {r}x{c} does not match dimension {dim}"
                )));
            }
        }
        for g in &groups {
            if groups.iter().filter(|h| h.label == g.label).count() > 1 {
                return Err(Error::Config(format!("duplicate source label {}", g.label)));
            }
            for (i, e) in g.exemplars.iter().enumerate() {
                if e.len() != dim {
                    return Err(Error::Dimension(format!(
                        "exemplar {i} of label {} has width {}, expected {dim}",
                        g.label,
                        e.len()
                    )));
                }
                if e.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Dimension(format!(
                        "exemplar {i} of label {} is not finite",
                        g.label
                    )));
                }
            }
        }
        Ok(SourcePool {
            dim,
            image_shape,
            groups,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn num_sources(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[SourceGroup] {
        &self.groups
    }

    pub fn labels(&self) -> Vec<u32> {
        self.groups.iter().map(|g| g.label).collect()
    }

    pub fn group(&self, label: u32) -> Option<&SourceGroup> {
        self.groups.iter().find(|g| g.label == label)
    }

    /// Pool restricted to `labels`, in the given order.
    pub fn select(&self, labels: &[u32]) -> Result<SourcePool> {
        let mut groups = Vec::with_capacity(labels.len());
        for &l in labels {
            let g = self
                .group(l)
                .ok_or_else(|| Error::Config(format!("label {l} absent from source pool")))?;
            groups.push(g.clone());
        }
        SourcePool::new(self.dim, self.image_shape, groups)
    }
}

/// Per-label uniform subsample without replacement keeping
/// `round(fraction · n_label)` exemplars in their original order.
pub fn subsample_labels(pool: &SourcePool, fraction: f64, seed: u64) -> Result<SourcePool> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "label fraction {fraction} not in (0, 1]"
        )));
    }
    let mut groups = Vec::with_capacity(pool.num_sources());
    for g in pool.groups() {
        let n = g.exemplars.len();
        let keep = (fraction * n as f64).round() as usize;
        if keep == 0 {
            return Err(Error::EmptySource { label: g.label });
        }
        let mut rng = rng::rng_for(rng::index_seed(
            rng::derive_seed(seed, "subsample"),
            g.label as u64,
        ));
        let mut picked = index::sample(&mut rng, n, keep).into_vec();
        picked.sort_unstable();
        groups.push(SourceGroup {
            label: g.label,
            exemplars: picked.into_iter().map(|i| g.exemplars[i].clone()).collect(),
        });
    }
    SourcePool::new(pool.dim(), pool.image_shape(), groups)
}

/// Stores a pool as a dataset: one row per exemplar, a one-hot truth block
/// marking its stream, and the stream labels in the metadata.
pub fn pool_to_dataset(pool: &SourcePool) -> Result<MixtureDataset> {
    let k = pool.num_sources();
    let n: usize = pool.groups().iter().map(|g| g.exemplars.len()).sum();
    let mut x = Vec::with_capacity(n * pool.dim());
    let mut bits = Vec::with_capacity(n * k);
    for (kk, g) in pool.groups().iter().enumerate() {
        for e in &g.exemplars {
            x.extend_from_slice(e);
            bits.extend((0..k).map(|j| u8::from(j == kk)));
        }
    }
    let mut ds = MixtureDataset::from_features(n, pool.dim(), x)?;
    ds.set_truth(k, bits)?;
    ds.meta = DatasetMeta {
        image_shape: pool.image_shape(),
        labels: Some(pool.labels()),
        ..DatasetMeta::default()
    };
    Ok(ds)
}

/// Inverse of [`pool_to_dataset`]. Every row must mark exactly one stream.
pub fn pool_from_dataset(ds: &MixtureDataset) -> Result<SourcePool> {
    let k = ds.num_sources().ok_or(Error::MissingTruth)?;
    let labels = ds
        .meta
        .labels
        .clone()
        .ok_or_else(|| Error::Dimension("pool file carries no source labels".into()))?;
    if labels.len() != k {
        return Err(Error::Dimension(format!(
            "{} labels for {k} streams",
            labels.len()
        )));
    }
    let mut groups: Vec<SourceGroup> = labels
        .iter()
        .map(|&label| SourceGroup {
            label,
            exemplars: Vec::new(),
        })
        .collect();
    for i in 0..ds.len() {
        let bits = ds.truth_bits(i).expect("truth checked");
        let on: Vec<usize> = (0..k).filter(|&j| bits[j] == 1).collect();
        if on.len() != 1 {
            return Err(Error::Dimension(format!(
                "pool row {i} marks {} streams, expected exactly one",
                on.len()
            )));
        }
        groups[on[0]].exemplars.push(ds.row(i).to_vec());
    }
    SourcePool::new(ds.dim(), ds.meta.image_shape, groups)
}
