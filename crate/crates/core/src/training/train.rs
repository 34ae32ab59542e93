use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use msvae_tensor::{Adam, MlpNet, Mode};
use rand::seq::SliceRandom;

use crate::data::MixtureDataset;
use crate::error::{Error, Result};
use crate::inference::{posterior_pass, EncoderParams, PassSummary};
use crate::metrics::{entropy_sum_from_pass, mean_posterior_entropy};
use crate::model::GenerativeParams;
use crate::msvae::{Architecture, MsVae};
use crate::rng;
use crate::training::closed_form::update_pi_b;
use crate::training::objective::{objective, FrozenNoise, ObjectiveSpec};

/// When the decoders receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderSchedule {
    /// Never; decoders stay bit-identical.
    Fixed,
    /// Frozen through epoch `E`, trained from epoch `E + 1` on.
    FinetuneFrom(usize),
    /// Trained from the first epoch.
    Free,
}

impl DecoderSchedule {
    /// Whether decoders are trained during 1-based `epoch`.
    pub fn trains_decoders(self, epoch: usize) -> bool {
        match self {
            DecoderSchedule::Fixed => false,
            DecoderSchedule::FinetuneFrom(e) => epoch > e,
            DecoderSchedule::Free => true,
        }
    }
}

impl fmt::Display for DecoderSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecoderSchedule::Fixed => write!(f, "fixed"),
            DecoderSchedule::FinetuneFrom(e) => write!(f, "finetune@{e}"),
            DecoderSchedule::Free => write!(f, "free"),
        }
    }
}

impl FromStr for DecoderSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(DecoderSchedule::Fixed),
            "free" => Ok(DecoderSchedule::Free),
            _ => {
                let e = s
                    .strip_prefix("finetune@")
                    .and_then(|e| e.parse().ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "schedule {s:?} is not one of fixed, free, finetune@E"
                        ))
                    })?;
                Ok(DecoderSchedule::FinetuneFrom(e))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sources: usize,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub batchnorm: bool,
    /// Joint latent samples per data point for gradient steps.
    pub samples: usize,
    /// Joint latent samples per data point for the per-epoch closed-form pass.
    pub eval_samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay_per_epoch: f64,
    pub schedule: DecoderSchedule,
    pub pi_init: Vec<f64>,
    pub b_init: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sources == 0 || self.data_dim == 0 || self.latent_dim == 0 {
            return fail("sources, data and latent dimensions must be positive".into());
        }
        if self.pi_init.len() != self.sources {
            return fail(format!(
                "{} initial presence probabilities for {} sources",
                self.pi_init.len(),
                self.sources
            ));
        }
        if self.pi_init.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return fail(format!("initial presence probabilities {:?} not in (0, 1)", self.pi_init));
        }
        if !(self.b_init > 0.0) || !self.b_init.is_finite() {
            return fail(format!("initial Laplace scale {} not positive", self.b_init));
        }
        if self.samples == 0 || self.eval_samples == 0 {
            return fail("sample counts must be at least 1".into());
        }
        if self.batch_size < 2 && self.batchnorm {
            return fail("batch normalization needs batches of at least 2".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if let DecoderSchedule::FinetuneFrom(e) = self.schedule {
            if e > self.epochs {
                return fail(format!(
                    "finetune boundary {e} beyond the {} training epochs",
                    self.epochs
                ));
            }
        }
        crate::model::check_capacity(self.sources)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            sources: self.sources,
            data_dim: self.data_dim,
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            batchnorm: self.batchnorm,
        }
    }
}

/// Diagnostics of one epoch, evaluated on the parameters at the end of the
/// gradient steps and before the closed-form update.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub entropy_sum: f64,
    /// Mean `H[q(s; x)]`.
    pub posterior_entropy: f64,
    /// Values after the closed-form update.
    pub pi: Vec<f64>,
    pub b: f64,
    pub decoders_trained: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock: Duration,
}

/// Builds the initial model: random networks, optionally replaced by
/// pretrained decoders (set to eval mode) and warm-start encoders.
pub fn build_model(
    config: &TrainConfig,
    decoders: Option<Vec<MlpNet>>,
    encoders: Option<Vec<MlpNet>>,
) -> Result<MsVae> {
    config.validate()?;
    let mut model = MsVae::random(&config.architecture(), config.pi_init.clone(), config.b_init, config.seed)?;
    if let Some(decs) = decoders {
        if decs.len() != config.sources {
            return Err(Error::Dimension(format!(
                "{} decoders for {} sources",
                decs.len(),
                config.sources
            )));
        }
        for (i, dec) in decs.iter().enumerate() {
            if dec.in_dim() != config.latent_dim || dec.out_dim() != config.data_dim {
                return Err(Error::Dimension(format!(
                    "expert {i} maps {}→{}, model needs {}→{}",
                    dec.in_dim(),
                    dec.out_dim(),
                    config.latent_dim,
                    config.data_dim
                )));
            }
        }
        let decs = decs
            .into_iter()
            .map(|mut d| {
                d.set_mode(Mode::Eval);
                d
            })
            .collect();
        model.generative = GenerativeParams::new(config.pi_init.clone(), decs, config.b_init)?;
    }
    if let Some(encs) = encoders {
        let encs: Vec<MlpNet> = encs
            .into_iter()
            .map(|mut e| {
                e.set_mode(Mode::Train);
                e
            })
            .collect();
        model.encoders = EncoderParams::new(encs)?;
    }
    MsVae::new(model.encoders, model.generative)
}

/// Runs the training schedule on `dataset`. Each epoch: shuffled minibatch
/// gradient steps on the encoders (and on the decoders when the schedule
/// allows), then one eval-mode pass that reports the ELBO and supplies the
/// closed-form π and b updates. `on_epoch` sees every record together with
/// the updated model.
pub fn train(
    config: &TrainConfig,
    mut model: MsVae,
    dataset: &MixtureDataset,
    mut on_epoch: impl FnMut(&EpochRecord, &MsVae) -> Result<()>,
) -> Result<(MsVae, TrainReport)> {
    config.validate()?;
    if dataset.dim() != model.data_dim() {
        return Err(Error::Dimension(format!(
            "dataset width {} vs model width {}",
            dataset.dim(),
            model.data_dim()
        )));
    }
    if model.num_sources() != config.sources || model.latent_dim() != config.latent_dim {
        return Err(Error::Dimension("model does not match the configuration".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let start = Instant::now();
    let (k, zd) = (config.sources, config.latent_dim);
    for net in model.encoders.nets_mut() {
        net.set_mode(Mode::Train);
    }
    let enc_names: Vec<Vec<String>> = model
        .encoders
        .nets()
        .iter()
        .enumerate()
        .map(|(i, n)| n.parameter_names(&format!("encoder{i}")))
        .collect();
    let dec_names: Vec<Vec<String>> = model
        .generative
        .decoders()
        .iter()
        .enumerate()
        .map(|(i, n)| n.parameter_names(&format!("decoder{i}")))
        .collect();
    let mut adam_enc = (0..k)
        .map(|_| Adam::new(config.learning_rate, config.decay_per_epoch))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut adam_dec: Option<Vec<Adam>> = None;
    let min_batch = if model.encoders.nets().iter().any(|n| n.has_batchnorm()) {
        2
    } else {
        1
    };
    let dec_mode = if config.schedule == DecoderSchedule::Free {
        Mode::Train
    } else {
        Mode::Eval
    };
    for d in model.generative.decoders_mut() {
        d.set_mode(dec_mode);
    }

    let shuffle_seed = rng::derive_seed(config.seed, "shuffle");
    let noise_seed = rng::derive_seed(config.seed, "train-noise");
    let pass_seed = rng::derive_seed(config.seed, "closed-form");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut last_good = model.clone();
    for epoch in 1..=config.epochs {
        let train_dec = config.schedule.trains_decoders(epoch);
        if train_dec && adam_dec.is_none() {
            adam_dec = Some(
                (0..k)
                    .map(|_| Adam::new(config.learning_rate, config.decay_per_epoch))
                    .collect::<std::result::Result<Vec<_>, _>>()?,
            );
        }
        order.shuffle(&mut rng::rng_for(rng::index_seed(shuffle_seed, epoch as u64)));
        let epoch_noise = rng::index_seed(noise_seed, epoch as u64);
        let spec = ObjectiveSpec {
            decoder_grads: train_dec,
            ..ObjectiveSpec::FULL
        };
        let step = |model: &mut MsVae,
                        adam_enc: &mut Vec<Adam>,
                        adam_dec: &mut Option<Vec<Adam>>|
         -> Result<()> {
            for batch in order.chunks(config.batch_size) {
                if batch.len() < min_batch {
                    continue;
                }
                let x = dataset.rows_tensor(batch);
                let noise = FrozenNoise::draw(batch, k, config.samples, zd, epoch_noise)?;
                let out = objective(model, &x, &noise, spec)?;
                for (kk, grads) in out.encoder.iter().enumerate() {
                    let neg: Vec<_> = grads.iter().map(|t| t.map(|v| -v)).collect();
                    adam_enc[kk].step(
                        &mut model.encoders.nets_mut()[kk].parameters_mut(),
                        &neg,
                        &enc_names[kk],
                    )?;
                }
                if let (Some(dg), Some(adams)) = (&out.decoder, adam_dec.as_mut()) {
                    for (kk, grads) in dg.iter().enumerate() {
                        let neg: Vec<_> = grads.iter().map(|t| t.map(|v| -v)).collect();
                        adams[kk].step(
                            &mut model.generative.decoders_mut()[kk].parameters_mut(),
                            &neg,
                            &dec_names[kk],
                        )?;
                    }
                }
            }
            Ok(())
        };
        let stepped = step(&mut model, &mut adam_enc, &mut adam_dec);
        let diverged = |detail: String, last: &MsVae| Error::Diverged {
            epoch,
            detail,
            last_good: Box::new(last.clone()),
        };
        match stepped {
            Ok(()) => {}
            Err(e @ (Error::NonFinite { .. } | Error::Tensor(_))) => {
                return Err(diverged(e.to_string(), &last_good));
            }
            Err(e) => return Err(e),
        }
        for a in adam_enc.iter_mut() {
            a.end_epoch();
        }
        if train_dec {
            for a in adam_dec.iter_mut().flatten() {
                a.end_epoch();
            }
        }

        let pass = match posterior_pass(&model, dataset.features(), config.eval_samples, pass_seed) {
            Ok(p) => p,
            Err(e) => return Err(diverged(e.to_string(), &last_good)),
        };
        if !pass.elbo.is_finite() {
            return Err(diverged(format!("ELBO evaluated to {}", pass.elbo), &last_good));
        }
        let record = epoch_record(epoch, &model, &pass, train_dec)?;
        let (pi, b) = update_pi_b(&pass.accumulators)?;
        model.generative.set_pi(&pi);
        model.generative.set_b(b);
        let record = EpochRecord {
            pi: model.generative.pi().to_vec(),
            b: model.generative.b(),
            ..record
        };
        log::debug!(
            "epoch {epoch}: elbo {:.4} H_sum {:.4} H[q(s|x)] {:.5} pi {:?} b {:.5}",
            record.elbo,
            record.entropy_sum,
            record.posterior_entropy,
            record.pi,
            record.b
        );
        on_epoch(&record, &model)?;
        records.push(record);
        last_good = model.clone();
    }
    for net in model.encoders.nets_mut() {
        net.set_mode(Mode::Eval);
    }
    for d in model.generative.decoders_mut() {
        d.set_mode(Mode::Eval);
    }
    Ok((
        model,
        TrainReport {
            epochs: records,
            wall_clock: start.elapsed(),
        },
    ))
}

fn epoch_record(epoch: usize, model: &MsVae, pass: &PassSummary, trained: bool) -> Result<EpochRecord> {
    Ok(EpochRecord {
        epoch,
        elbo: pass.elbo,
        entropy_sum: entropy_sum_from_pass(model, pass),
        posterior_entropy: mean_posterior_entropy(pass),
        pi: model.generative.pi().to_vec(),
        b: model.generative.b(),
        decoders_trained: trained,
    })
}
