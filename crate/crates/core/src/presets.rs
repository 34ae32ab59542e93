//! Desk-scale experiment recipes on procedural source patterns: pool
//! construction, expert pretraining, mixture composition, MS-VAE training.

use std::time::{Duration, Instant};

use crate::data::{compose_mixtures, subsample_labels, synthetic_pool, MixtureDataset, SourcePool};
use crate::error::Result;
use crate::msvae::MsVae;
use crate::rng;
use crate::training::{
    build_model, pretrain_expert, train, DecoderSchedule, EpochRecord, Expert, PretrainConfig,
    TrainConfig, TrainReport,
};

/// Pattern families in order of preference: sources whose experts reach a
/// low reconstruction error at the default latent width come first.
pub const FAMILY_PREFERENCE: [usize; 10] = [0, 5, 1, 2, 3, 6, 9, 4, 7, 8];

/// The first `k` preferred pattern families.
pub fn default_families(k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > FAMILY_PREFERENCE.len() {
        return Err(crate::Error::Config(format!(
            "synthetic sources support 1..={} streams, got {k}",
            FAMILY_PREFERENCE.len()
        )));
    }
    Ok(FAMILY_PREFERENCE[..k].to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    /// Pattern family per source.
    pub families: Vec<usize>,
    pub side: usize,
    pub train_exemplars: usize,
    pub test_exemplars: usize,
    pub pi_gen: Vec<f64>,
    pub b_gen: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of each source's training exemplars used for pretraining.
    pub label_fraction: f64,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

/// Expert pretraining settings used by the desk-scale recipes.
pub fn pretrain_defaults(latent_dim: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        latent_dim,
        encoder_hidden: vec![64, 32],
        decoder_hidden: vec![32, 64],
        batchnorm: true,
        epochs: 80,
        batch_size: 32,
        samples: 1,
        learning_rate: 2e-3,
        decay_per_epoch: 0.0002,
        b_init: 1.0,
        gaussian_warmup: 15,
        seed,
    }
}

/// MS-VAE training settings used by the desk-scale recipes.
pub fn train_defaults(k: usize, d: usize, latent_dim: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        sources: k,
        data_dim: d,
        latent_dim,
        encoder_hidden: vec![64, 32],
        decoder_hidden: vec![32, 64],
        batchnorm: true,
        samples: 1,
        eval_samples: 4,
        batch_size: 32,
        epochs: 100,
        learning_rate: 1e-3,
        decay_per_epoch: 0.0002,
        schedule: DecoderSchedule::Fixed,
        pi_init: vec![0.5; k],
        b_init: 1.0,
        seed,
    }
}

impl Scenario {
    /// Two sources, π_gen = (0.3, 0.2), b_gen = 0.1, 10^4 training mixtures,
    /// experts fixed for 100 epochs.
    pub fn proof_of_concept(seed: u64) -> Scenario {
        let side = 12;
        let z = 4;
        Scenario {
            families: default_families(2).expect("two families"),
            side,
            train_exemplars: 2000,
            test_exemplars: 500,
            pi_gen: vec![0.3, 0.2],
            b_gen: 0.1,
            n_train: 10_000,
            n_test: 1_000,
            label_fraction: 1.0,
            pretrain: pretrain_defaults(z, seed),
            train: train_defaults(2, side * side, z, seed),
            seed,
        }
    }

    /// Six sources with π_gen = 1/6 and b_gen = 0.1.
    pub fn multi_source(seed: u64) -> Scenario {
        let side = 12;
        let z = 4;
        let k = 6;
        let mut train = train_defaults(k, side * side, z, seed);
        train.epochs = 40;
        train.eval_samples = 1;
        Scenario {
            families: default_families(k).expect("six families"),
            side,
            train_exemplars: 2000,
            test_exemplars: 500,
            pi_gen: vec![1.0 / k as f64; k],
            b_gen: 0.1,
            n_train: 10_000,
            n_test: 1_000,
            label_fraction: 1.0,
            pretrain: pretrain_defaults(z, seed),
            train,
            seed,
        }
    }

    /// The same scenario with experts pretrained on a fraction of each
    /// source's exemplars and decoders released at epoch `finetune_at`.
    /// Pretraining epochs scale with `1 / fraction` so the experts receive
    /// the same number of optimizer updates as with full data.
    pub fn with_label_fraction(mut self, fraction: f64, finetune_at: usize, epochs: usize) -> Scenario {
        let scale = (1.0 / fraction).round().max(1.0) as usize;
        self.label_fraction = fraction;
        self.pretrain.epochs *= scale;
        self.pretrain.gaussian_warmup *= scale;
        self.train.schedule = DecoderSchedule::FinetuneFrom(finetune_at);
        self.train.epochs = epochs;
        self
    }

    pub fn sources(&self) -> usize {
        self.families.len()
    }

    /// Training and test exemplar pools, drawn from disjoint streams.
    pub fn pools(&self) -> Result<(SourcePool, SourcePool)> {
        let train = synthetic_pool(
            &self.families,
            self.side,
            self.train_exemplars,
            rng::derive_seed(self.seed, "train-pool"),
        )?;
        let test = synthetic_pool(
            &self.families,
            self.side,
            self.test_exemplars,
            rng::derive_seed(self.seed, "test-pool"),
        )?;
        Ok((train, test))
    }

    /// Training mixtures from training exemplars, test mixtures from test
    /// exemplars.
    pub fn datasets(&self) -> Result<(MixtureDataset, MixtureDataset)> {
        let (train_pool, test_pool) = self.pools()?;
        let train = compose_mixtures(
            &train_pool,
            &self.pi_gen,
            self.b_gen,
            self.n_train,
            rng::derive_seed(self.seed, "train-mixtures"),
        )?;
        let test = compose_mixtures(
            &test_pool,
            &self.pi_gen,
            self.b_gen,
            self.n_test,
            rng::derive_seed(self.seed, "test-mixtures"),
        )?;
        Ok((train, test))
    }

    /// One expert per source, pretrained on (a label fraction of) the clean
    /// training exemplars.
    pub fn experts(&self) -> Result<Vec<Expert>> {
        let (pool, _) = self.pools()?;
        let pool = if self.label_fraction < 1.0 {
            subsample_labels(&pool, self.label_fraction, rng::derive_seed(self.seed, "labels"))?
        } else {
            pool
        };
        pool.groups()
            .iter()
            .map(|g| pretrain_expert(&g.exemplars, g.label, &self.pretrain))
            .collect()
    }
}

/// Everything produced by [`run_scenario`].
#[derive(Clone, Debug)]
pub struct Outcome {
    pub model: MsVae,
    pub report: TrainReport,
    pub experts: Vec<Expert>,
    pub train_set: MixtureDataset,
    pub test_set: MixtureDataset,
    pub pretrain_time: Duration,
}

/// Pretrains the experts, loads their decoders and trains the MS-VAE.
pub fn run_scenario(
    s: &Scenario,
    on_epoch: impl FnMut(&EpochRecord, &MsVae) -> Result<()>,
) -> Result<Outcome> {
    let (train_set, test_set) = s.datasets()?;
    let started = Instant::now();
    let experts = s.experts()?;
    let pretrain_time = started.elapsed();
    let decoders = experts.iter().map(|e| e.decoder.clone()).collect();
    let model = build_model(&s.train, Some(decoders), None)?;
    let (model, report) = train(&s.train, model, &train_set, on_epoch)?;
    Ok(Outcome {
        model,
        report,
        experts,
        train_set,
        test_set,
        pretrain_time,
    })
}
