//! Command-line surface. Every per-command flag is also a config key of the
//! same name (dashes become underscores) in that command's section.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Declares a command's flags, config keys and defaults in one place.
macro_rules! section {
    ($name:ident, $section:literal, { $($field:ident = $default:literal, $help:literal;)* }) => {
        #[derive(Args, Clone, Debug, Default)]
        pub struct $name {
            $(
                #[arg(long, value_name = "VALUE", num_args = 0..=1, default_missing_value = "true", help = $help)]
                pub $field: Option<String>,
            )*
        }

        impl $name {
            pub const SECTION: &'static str = $section;
            pub const DEFAULTS: &'static [(&'static str, &'static str)] =
                &[$((stringify!($field), $default)),*];
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn overrides(&self) -> Vec<(&'static str, String)> {
                let mut v = Vec::new();
                $(
                    if let Some(x) = &self.$field {
                        v.push((stringify!($field), x.clone()));
                    }
                )*
                v
            }
        }
    };
}

section!(GenerateArgs, "generate", {
    k = "2", "number of sources";
    pi = "0.3,0.2", "comma-separated presence probabilities, one per source";
    b = "0.1", "Laplace noise scale";
    n = "10000", "number of training mixtures";
    n_test = "1000", "number of test mixtures";
    source = "synthetic", "exemplar source: synthetic or idx";
    families = "", "synthetic pattern families per source (default: first K preferred)";
    side = "12", "synthetic image side length";
    exemplars = "2000", "synthetic training exemplars per source";
    test_exemplars = "500", "synthetic test exemplars per source";
    idx_images = "", "IDX image file for training exemplars";
    idx_labels = "", "IDX label file for training exemplars";
    test_idx_images = "", "IDX image file for test exemplars";
    test_idx_labels = "", "IDX label file for test exemplars";
    labels = "", "IDX labels used as sources, in stream order (default: the K smallest)";
});

section!(PretrainArgs, "pretrain", {
    sources = "", "exemplar pool file (default: OUT/sources.msmx)";
    labels = "", "labels to pretrain (default: every label in the pool)";
    label_fraction = "1.0", "fraction of each label's exemplars used, in (0, 1]";
    match_updates = "true", "scale epochs by 1/label_fraction to keep the number of updates";
    latent_dim = "4", "latent width Z";
    encoder_hidden = "64,32", "encoder hidden widths";
    decoder_hidden = "32,64", "decoder hidden widths";
    batchnorm = "true", "batch normalization in hidden blocks";
    epochs = "80", "pretraining epochs";
    batch_size = "32", "minibatch size";
    samples = "1", "latent samples per point";
    learning_rate = "0.002", "Adam learning rate";
    decay = "0.0002", "learning-rate decay per epoch";
    b_init = "1.0", "initial Laplace scale";
    gaussian_warmup = "15", "leading epochs with a squared-error reconstruction term";
});

section!(TrainArgs, "train", {
    data = "", "training mixtures (default: OUT/train.msmx)";
    experts = "", "directory with expert_{k}.msvae files (default: OUT)";
    sources = "", "number of sources when training without experts";
    latent_dim = "4", "latent width Z";
    encoder_hidden = "64,32", "encoder hidden widths";
    decoder_hidden = "32,64", "decoder hidden widths";
    batchnorm = "true", "batch normalization in hidden blocks";
    samples = "1", "latent samples per point for gradients";
    eval_samples = "4", "latent samples per point for the closed-form updates";
    batch_size = "32", "minibatch size";
    epochs = "100", "training epochs";
    learning_rate = "0.001", "Adam learning rate";
    decay = "0.0002", "learning-rate decay per epoch";
    schedule = "fixed", "decoder schedule: fixed, finetune@E or free";
    pi_init = "", "initial presence probabilities (default: 0.5 each)";
    b_init = "1.0", "initial Laplace scale";
    warm_start = "false", "initialize encoders from the experts' encoders";
    log_every = "1", "epochs between progress lines";
});

section!(InferArgs, "infer", {
    model = "", "model checkpoint (default: OUT/model.msvae)";
    data = "", "mixtures to explain (default: OUT/test.msmx)";
    samples = "4", "latent samples per point";
    reconstructions = "false", "also write per-source reconstructions";
});

section!(EvalArgs, "eval", {
    model = "", "model checkpoint (default: OUT/model.msvae)";
    data = "", "truth-bearing mixtures (default: OUT/test.msmx)";
    samples = "4", "latent samples per point";
    runs = "1", "independent inference repetitions";
    overlap_only = "false", "restrict PSNR/SSIM to points with at least two sources";
    ssim_window = "7", "SSIM window size";
    force = "false", "evaluate even if the model was fitted to data from another config";
});

#[derive(Parser, Debug)]
#[command(name = "msvae", version, about = "Multi-stream VAE: generate, pretrain, train, infer, eval")]
pub struct Cli {
    /// Config file with [generate], [pretrain], [train], [infer], [eval] sections.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (0: one per core).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compose mixture datasets from a source pool.
    Generate(GenerateArgs),
    /// Pretrain one expert VAE per source.
    Pretrain(PretrainArgs),
    /// Train the multi-stream model.
    Train(TrainArgs),
    /// Posterior predictions for every data point.
    Infer(InferArgs),
    /// Accuracy and separation quality against ground truth.
    Eval(EvalArgs),
}

/// Config schema of every section, for unknown-key detection.
pub fn schemas() -> Vec<(&'static str, &'static [&'static str])> {
    vec![
        (crate::config::GLOBAL, crate::config::GLOBAL_KEYS),
        (GenerateArgs::SECTION, GenerateArgs::KEYS),
        (PretrainArgs::SECTION, PretrainArgs::KEYS),
        (TrainArgs::SECTION, TrainArgs::KEYS),
        (InferArgs::SECTION, InferArgs::KEYS),
        (EvalArgs::SECTION, EvalArgs::KEYS),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Settings;
    use msvae_core::presets::{pretrain_defaults, train_defaults};

    #[test]
    fn defaults_match_library_presets() {
        let p = Settings::resolve(PretrainArgs::SECTION, PretrainArgs::DEFAULTS, None, &[]);
        let want = pretrain_defaults(p.usize("latent_dim").unwrap(), 0);
        assert_eq!(p.usize_list("encoder_hidden").unwrap(), want.encoder_hidden);
        assert_eq!(p.usize_list("decoder_hidden").unwrap(), want.decoder_hidden);
        assert_eq!(p.bool("batchnorm").unwrap(), want.batchnorm);
        assert_eq!(p.usize("epochs").unwrap(), want.epochs);
        assert_eq!(p.usize("batch_size").unwrap(), want.batch_size);
        assert_eq!(p.usize("samples").unwrap(), want.samples);
        assert_eq!(p.f64("learning_rate").unwrap(), want.learning_rate);
        assert_eq!(p.f64("decay").unwrap(), want.decay_per_epoch);
        assert_eq!(p.f64("b_init").unwrap(), want.b_init);
        assert_eq!(p.usize("gaussian_warmup").unwrap(), want.gaussian_warmup);

        let t = Settings::resolve(TrainArgs::SECTION, TrainArgs::DEFAULTS, None, &[]);
        let want = train_defaults(2, 144, t.usize("latent_dim").unwrap(), 0);
        assert_eq!(t.usize_list("encoder_hidden").unwrap(), want.encoder_hidden);
        assert_eq!(t.usize_list("decoder_hidden").unwrap(), want.decoder_hidden);
        assert_eq!(t.bool("batchnorm").unwrap(), want.batchnorm);
        assert_eq!(t.usize("samples").unwrap(), want.samples);
        assert_eq!(t.usize("eval_samples").unwrap(), want.eval_samples);
        assert_eq!(t.usize("batch_size").unwrap(), want.batch_size);
        assert_eq!(t.usize("epochs").unwrap(), want.epochs);
        assert_eq!(t.f64("learning_rate").unwrap(), want.learning_rate);
        assert_eq!(t.f64("decay").unwrap(), want.decay_per_epoch);
        assert_eq!(t.f64("b_init").unwrap(), want.b_init);
        assert_eq!(t.string("schedule"), want.schedule.to_string());
    }

    #[test]
    fn every_flag_is_a_config_key() {
        let cli = Cli::try_parse_from(["msvae", "train", "--epochs", "3", "--batchnorm", "--seed", "9"]).unwrap();
        let Command::Train(a) = cli.command else { panic!("train expected") };
        assert_eq!(a.overrides(), vec![("batchnorm", "true".to_string()), ("epochs", "3".to_string())]);
        assert_eq!(cli.seed, Some(9));
        for (_, keys) in schemas() {
            let mut sorted = keys.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), keys.len());
        }
    }
}
