use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context as _, Result};
use log::{info, warn};
use msvae_core::checkpoint::{load_expert, load_model, save_expert, save_model, CheckpointInfo};
use msvae_core::data::{
    case_frequencies, compose_mixtures, load_dataset, load_idx, pool_from_dataset, pool_to_dataset,
    save_dataset, subsample_labels, synthetic_pool, MixtureDataset, SourcePool,
};
use msvae_core::inference::{map_state, posterior_pass, source_presence};
use msvae_core::metrics::{evaluate, source_reconstructions, EvalOptions};
use msvae_core::model::DiscreteState;
use msvae_core::presets::default_families;
use msvae_core::rng::derive_seed;
use msvae_core::training::{build_model, pretrain_expert, train, DecoderSchedule, PretrainConfig, TrainConfig};
use msvae_core::{Error, MsVae};

use crate::config::{ConfigError, Settings};

/// The q(s; x) table is written out in full only up to this many sources.
const MAX_TABLE_SOURCES: usize = 10;

/// Resolved inputs of one command.
pub struct Context {
    pub seed: u64,
    pub out: PathBuf,
    pub settings: Settings,
    /// Hash of the resolved settings and seed.
    pub hash: String,
}

impl Context {
    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// `key`'s path, or `OUT/fallback` when unset; must exist.
    fn input(&self, key: &str, fallback: &str) -> Result<PathBuf> {
        let p = self.settings.path(key).unwrap_or_else(|| self.out_file(fallback));
        if !p.is_file() {
            return Err(ConfigError(format!(
                "[{}] {key}: no such file {}",
                self.settings.section,
                p.display()
            ))
            .into());
        }
        Ok(p)
    }

    fn info(&self, epoch: usize, labels: Vec<u32>, data_hash: Option<String>) -> CheckpointInfo {
        CheckpointInfo {
            epoch,
            seed: self.seed,
            config_hash: Some(self.hash.clone()),
            labels,
            data_hash,
        }
    }

    fn header(&self) -> String {
        format!("config_hash={}\nseed={}\n", self.hash, self.seed)
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn state_string(s: DiscreteState) -> String {
    s.bits().iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
}

fn stamp(ds: &mut MixtureDataset, ctx: &Context) {
    ds.meta.seed = Some(ctx.seed);
    ds.meta.config_hash = Some(ctx.hash.clone());
}

// ---------------------------------------------------------------------------

fn idx_pool(ctx: &Context, images: &str, labels: &str, k: usize) -> Result<SourcePool> {
    let s = &ctx.settings;
    let pool = load_idx(&s.existing_file(images)?, &s.existing_file(labels)?)?;
    let wanted: Vec<u32> = s.usize_list("labels")?.into_iter().map(|l| l as u32).collect();
    let wanted = if wanted.is_empty() {
        let mut all = pool.labels();
        all.sort_unstable();
        if all.len() < k {
            return Err(config_err(format!("IDX files hold {} labels, K = {k}", all.len())));
        }
        all.truncate(k);
        all
    } else {
        wanted
    };
    if wanted.len() != k {
        return Err(config_err(format!("{} labels listed for K = {k}", wanted.len())));
    }
    Ok(pool.select(&wanted)?)
}

pub fn generate(ctx: &Context) -> Result<()> {
    let s = &ctx.settings;
    let k = s.usize("k")?;
    let pi = s.f64_list("pi")?;
    if pi.len() != k {
        return Err(config_err(format!("[generate] pi lists {} values for k = {k}", pi.len())));
    }
    let b = s.f64("b")?;
    let (n, n_test) = (s.usize("n")?, s.usize("n_test")?);
    let (train_pool, test_pool) = match s.string("source").as_str() {
        "synthetic" => {
            let families = s.usize_list("families")?;
            let families = if families.is_empty() {
                default_families(k)?
            } else {
                families
            };
            if families.len() != k {
                return Err(config_err(format!("{} families listed for k = {k}", families.len())));
            }
            let side = s.usize("side")?;
            let train = synthetic_pool(&families, side, s.usize("exemplars")?, derive_seed(ctx.seed, "train-pool"))?;
            let test = synthetic_pool(&families, side, s.usize("test_exemplars")?, derive_seed(ctx.seed, "test-pool"))?;
            (train, test)
        }
        "idx" => {
            let train = idx_pool(ctx, "idx_images", "idx_labels", k)?;
            let test = if s.path("test_idx_images").is_some() {
                idx_pool(ctx, "test_idx_images", "test_idx_labels", k)?
            } else {
                warn!("no test IDX files given; test mixtures reuse the training exemplars");
                train.clone()
            };
            if test.labels() != train.labels() {
                return Err(config_err("test IDX labels differ from training labels"));
            }
            (train, test)
        }
        other => return Err(config_err(format!("[generate] source = `{other}`: expected synthetic or idx"))),
    };
    fs::create_dir_all(&ctx.out)?;
    let mut pool_ds = pool_to_dataset(&train_pool)?;
    stamp(&mut pool_ds, ctx);
    save_dataset(&pool_ds, &ctx.out_file("sources.msmx"))?;

    let mut report = ctx.header();
    for (name, pool, count, purpose) in [
        ("train", &train_pool, n, "train-mixtures"),
        ("test", &test_pool, n_test, "test-mixtures"),
    ] {
        let mut ds = compose_mixtures(pool, &pi, b, count, derive_seed(ctx.seed, purpose))?;
        stamp(&mut ds, ctx);
        let freq = case_frequencies(&ds)?;
        let _ = writeln!(report, "{name}.points={count}");
        for (idx, f) in freq.iter().enumerate() {
            let state = state_string(DiscreteState::from_index(idx, k)?);
            info!("{name}: case {state} frequency {f:.4}");
            let _ = writeln!(report, "{name}.frequency.{state}={f}");
        }
        save_dataset(&ds, &ctx.out_file(&format!("{name}.msmx")))?;
    }
    let _ = writeln!(report, "labels={:?}", train_pool.labels());
    write_text(&ctx.out_file("generate_report.txt"), &report)?;
    info!("wrote sources.msmx, train.msmx, test.msmx to {}", ctx.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn pretrain_config(s: &Settings, seed: u64) -> Result<PretrainConfig> {
    Ok(PretrainConfig {
        latent_dim: s.usize("latent_dim")?,
        encoder_hidden: s.usize_list("encoder_hidden")?,
        decoder_hidden: s.usize_list("decoder_hidden")?,
        batchnorm: s.bool("batchnorm")?,
        epochs: s.usize("epochs")?,
        batch_size: s.usize("batch_size")?,
        samples: s.usize("samples")?,
        learning_rate: s.f64("learning_rate")?,
        decay_per_epoch: s.f64("decay")?,
        b_init: s.f64("b_init")?,
        gaussian_warmup: s.usize("gaussian_warmup")?,
        seed,
    })
}

pub fn pretrain(ctx: &Context) -> Result<()> {
    let s = &ctx.settings;
    let path = ctx.input("sources", "sources.msmx")?;
    let pool_ds = load_dataset(&path)?;
    let pool = pool_from_dataset(&pool_ds)?;
    let labels: Vec<u32> = s.usize_list("labels")?.into_iter().map(|l| l as u32).collect();
    let pool = if labels.is_empty() { pool } else { pool.select(&labels)? };
    let fraction = s.f64("label_fraction")?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config_err(format!("[pretrain] label_fraction = {fraction}: expected a value in (0, 1]")));
    }
    let pool = subsample_labels(&pool, fraction, derive_seed(ctx.seed, "labels"))?;
    let mut cfg = pretrain_config(s, ctx.seed)?;
    if s.bool("match_updates")? {
        let scale = (1.0 / fraction).round().max(1.0) as usize;
        cfg.epochs *= scale;
        cfg.gaussian_warmup *= scale;
    }
    fs::create_dir_all(&ctx.out)?;
    let mut report = ctx.header();
    for (k, group) in pool.groups().iter().enumerate() {
        info!(
            "expert {k} (label {}): {} exemplars, {} epochs",
            group.label,
            group.exemplars.len(),
            cfg.epochs
        );
        let started = Instant::now();
        let expert = pretrain_expert(&group.exemplars, group.label, &cfg)?;
        let loss = expert.losses.last().copied().unwrap_or(f64::NAN);
        info!(
            "expert {k} (label {}): final reconstruction loss {loss:.4}, b {:.5}, {:.1}s",
            group.label,
            expert.b,
            started.elapsed().as_secs_f64()
        );
        let _ = writeln!(report, "expert{k}.label={}", group.label);
        let _ = writeln!(report, "expert{k}.exemplars={}", group.exemplars.len());
        let _ = writeln!(report, "expert{k}.final_loss={loss}");
        let _ = writeln!(report, "expert{k}.b={}", expert.b);
        let info = ctx.info(cfg.epochs, vec![group.label], pool_ds.meta.config_hash.clone());
        save_expert(&expert, &info, &ctx.out_file(&format!("expert_{k}.msvae")))?;
    }
    write_text(&ctx.out_file("pretrain_report.txt"), &report)?;
    Ok(())
}

// ---------------------------------------------------------------------------

/// `expert_0.msvae, expert_1.msvae, ...` from `dir`, stopping at the first gap.
fn load_experts(dir: &Path) -> Result<Vec<(msvae_core::training::Expert, CheckpointInfo)>> {
    if !dir.is_dir() {
        return Err(config_err(format!("[train] experts: no such directory {}", dir.display())));
    }
    let mut out = Vec::new();
    loop {
        let p = dir.join(format!("expert_{}.msvae", out.len()));
        if !p.is_file() {
            break;
        }
        out.push(load_expert(&p).with_context(|| format!("loading {}", p.display()))?);
    }
    if out.is_empty() {
        return Err(config_err(format!("no expert_0.msvae in {}", dir.display())));
    }
    Ok(out)
}

fn format_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",")
}

pub fn train_command(ctx: &Context) -> Result<()> {
    let s = &ctx.settings;
    let data_path = ctx.input("data", "train.msmx")?;
    let schedule: DecoderSchedule = s
        .string("schedule")
        .parse()
        .map_err(|e: Error| config_err(format!("[train] schedule: {e}")))?;
    let experts = match schedule {
        DecoderSchedule::Free => None,
        _ => Some(load_experts(&s.path("experts").unwrap_or_else(|| ctx.out.clone()))?),
    };
    let dataset = load_dataset(&data_path)?;
    let k = match (&experts, s.string("sources").as_str()) {
        (Some(e), _) => e.len(),
        (None, "") => dataset
            .meta
            .labels
            .as_ref()
            .map(|l| l.len())
            .ok_or_else(|| config_err("[train] sources must be set when training without experts"))?,
        (None, v) => v
            .parse()
            .map_err(|_| config_err(format!("[train] sources = `{v}`: expected an integer")))?,
    };
    let pi_init = s.f64_list("pi_init")?;
    let pi_init = if pi_init.is_empty() { vec![0.5; k] } else { pi_init };
    let config = TrainConfig {
        sources: k,
        data_dim: dataset.dim(),
        latent_dim: s.usize("latent_dim")?,
        encoder_hidden: s.usize_list("encoder_hidden")?,
        decoder_hidden: s.usize_list("decoder_hidden")?,
        batchnorm: s.bool("batchnorm")?,
        samples: s.usize("samples")?,
        eval_samples: s.usize("eval_samples")?,
        batch_size: s.usize("batch_size")?,
        epochs: s.usize("epochs")?,
        learning_rate: s.f64("learning_rate")?,
        decay_per_epoch: s.f64("decay")?,
        schedule,
        pi_init,
        b_init: s.f64("b_init")?,
        seed: ctx.seed,
    };
    let labels: Vec<u32> = match &experts {
        Some(e) => e.iter().map(|(ex, _)| ex.label).collect(),
        None => dataset
            .meta
            .labels
            .clone()
            .unwrap_or_else(|| (1..=k as u32).collect()),
    };
    let (decoders, encoders) = match &experts {
        Some(e) => {
            let decs = e.iter().map(|(ex, _)| ex.decoder.clone()).collect();
            let encs = s
                .bool("warm_start")?
                .then(|| e.iter().map(|(ex, _)| ex.encoder.clone()).collect());
            (Some(decs), encs)
        }
        None => (None, None),
    };
    let model = build_model(&config, decoders, encoders)?;
    let log_every = s.usize("log_every")?.max(1);
    fs::create_dir_all(&ctx.out)?;
    let checkpoint_path = ctx.out_file("checkpoint.msvae");
    let data_hash = dataset.meta.config_hash.clone();
    info!(
        "training K={k} on {} points (D={}), schedule {schedule}, {} epochs",
        dataset.len(),
        dataset.dim(),
        config.epochs
    );
    let result = train(&config, model, &dataset, |rec, model| {
        if rec.epoch % log_every == 0 || rec.epoch == config.epochs {
            info!(
                "epoch {:4}: elbo {:.4} entropy_sum {:.4} H[q(s)] {:.5} pi [{}] b {:.5}{}",
                rec.epoch,
                rec.elbo,
                rec.entropy_sum,
                rec.posterior_entropy,
                format_vec(&rec.pi),
                rec.b,
                if rec.decoders_trained { " (decoders trained)" } else { "" }
            );
        }
        save_model(model, &ctx.info(rec.epoch, labels.clone(), data_hash.clone()), &checkpoint_path)
    });
    let (model, report) = match result {
        Ok(r) => r,
        Err(Error::Diverged { epoch, detail, last_good }) => {
            let path = ctx.out_file("diverged.msvae");
            save_model(&last_good, &ctx.info(epoch.saturating_sub(1), labels.clone(), data_hash.clone()), &path)?;
            return Err(Error::Diverged { epoch, detail, last_good })
                .with_context(|| format!("last finite parameters written to {}", path.display()));
        }
        Err(e) => return Err(e.into()),
    };
    save_model(&model, &ctx.info(config.epochs, labels, data_hash), &ctx.out_file("model.msvae"))?;
    let mut text = ctx.header();
    let _ = writeln!(text, "wall_clock_seconds={}", report.wall_clock.as_secs_f64());
    let _ = writeln!(text, "epoch\telbo\tentropy_sum\tposterior_entropy\tpi\tb\tdecoders_trained");
    for r in &report.epochs {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch,
            r.elbo,
            r.entropy_sum,
            r.posterior_entropy,
            r.pi.iter().map(|p| format!("{p:?}")).collect::<Vec<_>>().join(","),
            r.b,
            r.decoders_trained
        );
    }
    write_text(&ctx.out_file("train_report.tsv"), &text)?;
    info!(
        "final pi [{}] b {:.5}; {:.1}s",
        format_vec(model.generative.pi()),
        model.generative.b(),
        report.wall_clock.as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn check_dims(model: &MsVae, ds: &MixtureDataset) -> Result<()> {
    if ds.dim() != model.data_dim() {
        return Err(Error::Dimension(format!(
            "dataset has D={}, model expects D={}",
            ds.dim(),
            model.data_dim()
        ))
        .into());
    }
    Ok(())
}

pub fn infer(ctx: &Context) -> Result<()> {
    let s = &ctx.settings;
    let (model, info) = load_model(&ctx.input("model", "model.msvae")?)?;
    let dataset = load_dataset(&ctx.input("data", "test.msmx")?)?;
    check_dims(&model, &dataset)?;
    let m = s.usize("samples")?;
    let k = model.num_sources();
    let started = Instant::now();
    let pass = posterior_pass(&model, dataset.features(), m, derive_seed(ctx.seed, "infer"))?;
    let seconds = started.elapsed().as_secs_f64();
    info!("inference over {} points: {seconds:.3}s", dataset.len());

    fs::create_dir_all(&ctx.out)?;
    let mut text = String::new();
    let _ = writeln!(text, "# config_hash={} seed={} model_config_hash={}", ctx.hash, ctx.seed, info.config_hash.as_deref().unwrap_or("-"));
    let mut header = vec!["index".to_string(), "state".to_string()];
    let full_table = k <= MAX_TABLE_SOURCES;
    if full_table {
        for idx in 0..1usize << k {
            header.push(format!("q_{}", state_string(DiscreteState::from_index(idx, k)?)));
        }
    }
    header.extend((0..k).map(|kk| format!("presence_{kk}")));
    let _ = writeln!(text, "{}", header.join("\t"));
    let mut predicted = Vec::with_capacity(dataset.len() * k);
    for (i, p) in pass.points.iter().enumerate() {
        let state = map_state(&p.table, k);
        predicted.extend(state.bits());
        let mut row = vec![i.to_string(), state_string(state)];
        if full_table {
            row.extend(p.table.iter().map(|q| format!("{q:?}")));
        }
        row.extend((0..k).map(|kk| format!("{:?}", source_presence(&p.table, kk))));
        let _ = writeln!(text, "{}", row.join("\t"));
    }
    write_text(&ctx.out_file("predictions.tsv"), &text)?;
    if s.bool("reconstructions")? {
        let recon = source_reconstructions(&model, &pass)?;
        let mut out = MixtureDataset::from_features(dataset.len(), dataset.dim(), dataset.features().to_vec())?;
        out.set_truth(k, predicted)?;
        out.set_components(recon.into_iter().flatten().flatten().collect())?;
        out.meta = dataset.meta.clone();
        out.meta.labels = Some(info.labels.clone()).filter(|l| l.len() == k);
        stamp(&mut out, ctx);
        save_dataset(&out, &ctx.out_file("reconstructions.msmx"))?;
    }
    let mut report = ctx.header();
    let _ = writeln!(report, "points={}", dataset.len());
    let _ = writeln!(report, "samples={m}");
    let _ = writeln!(report, "inference_seconds={seconds}");
    write_text(&ctx.out_file("infer_report.txt"), &report)?;
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn eval(ctx: &Context) -> Result<()> {
    let s = &ctx.settings;
    let (model, info) = load_model(&ctx.input("model", "model.msvae")?)?;
    let dataset = load_dataset(&ctx.input("data", "test.msmx")?)?;
    if !dataset.has_truth() {
        return Err(Error::MissingTruth.into());
    }
    match (&info.data_hash, &dataset.meta.config_hash) {
        (Some(a), Some(b)) if a != b => {
            if s.bool("force")? {
                warn!("model was fitted to data from config {a}, evaluating data from config {b} (--force)");
            } else {
                return Err(config_err(format!(
                    "model was fitted to data from config {a} but the evaluation data comes from config {b}; pass --force to evaluate anyway"
                )));
            }
        }
        (None, _) | (_, None) => warn!("config hash of model data or evaluation data unknown; not checked"),
        _ => {}
    }
    check_dims(&model, &dataset)?;
    let opts = EvalOptions {
        samples: s.usize("samples")?,
        seed: ctx.seed,
        runs: s.usize("runs")?,
        overlap_only: s.bool("overlap_only")?,
        ssim_window: s.usize("ssim_window")?,
    };
    let mut report = evaluate(&model, &dataset, &opts)?;
    report.config_hash = Some(ctx.hash.clone());
    info!(
        "accuracy {:.4} ± {:.4} over {} runs; {:.3}s inference",
        report.accuracy.mean, report.accuracy.std, report.runs, report.inference_seconds
    );
    for (k, (p, mix)) in report.psnr.iter().zip(&report.mixture_psnr).enumerate() {
        info!("source {k}: PSNR {:.2} ± {:.2} dB (mixture {:.2} dB)", p.mean, p.std, mix);
    }
    fs::create_dir_all(&ctx.out)?;
    write_text(&ctx.out_file("eval_report.txt"), &report.to_key_value())?;
    write_text(&ctx.out_file("eval_report.json"), &report.to_json())?;
    Ok(())
}
