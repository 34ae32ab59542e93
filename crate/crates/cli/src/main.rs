mod args;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use msvae_core::Error;

use args::{Cli, Command, EvalArgs, GenerateArgs, InferArgs, PretrainArgs, TrainArgs};
use commands::Context;
use config::{fnv1a_hex, ConfigError, ConfigFile, Settings, GLOBAL};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Usage(_) | Error::Capacity { .. } => EXIT_CONFIG,
                Error::NonFinite { .. } | Error::Diverged { .. } => EXIT_DIVERGED,
                Error::Tensor(_)
                | Error::Io(_)
                | Error::Parse { .. }
                | Error::CountMismatch { .. }
                | Error::Dimension(_)
                | Error::MissingTruth
                | Error::EmptySource { .. } => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    1
}

fn global<T: std::str::FromStr>(flag: Option<T>, file: Option<&ConfigFile>, key: &str, default: T) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.and_then(|f| f.get(GLOBAL, key)) {
        Some(raw) => raw
            .parse()
            .map_err(|_| ConfigError(format!("[global] {key} = `{raw}` is not valid")).into()),
        None => Ok(default),
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref().map(ConfigFile::load).transpose()?;
    if let Some(f) = &file {
        let unknown = f.unknown_keys(&args::schemas());
        if !unknown.is_empty() {
            return Err(ConfigError(format!("unknown config keys: {}", unknown.join(", "))).into());
        }
    }
    let seed: u64 = global(cli.seed, file.as_ref(), "seed", 1)?;
    let out: PathBuf = global(cli.out, file.as_ref(), "out", PathBuf::from("out"))?;
    let threads: usize = global(cli.threads, file.as_ref(), "threads", 0)?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| ConfigError(format!("cannot start {threads} threads: {e}")))?;
    }

    let (settings, action): (Settings, fn(&Context) -> Result<()>) = match &cli.command {
        Command::Generate(a) => (
            Settings::resolve(GenerateArgs::SECTION, GenerateArgs::DEFAULTS, file.as_ref(), &a.overrides()),
            commands::generate,
        ),
        Command::Pretrain(a) => (
            Settings::resolve(PretrainArgs::SECTION, PretrainArgs::DEFAULTS, file.as_ref(), &a.overrides()),
            commands::pretrain,
        ),
        Command::Train(a) => (
            Settings::resolve(TrainArgs::SECTION, TrainArgs::DEFAULTS, file.as_ref(), &a.overrides()),
            commands::train_command,
        ),
        Command::Infer(a) => (
            Settings::resolve(InferArgs::SECTION, InferArgs::DEFAULTS, file.as_ref(), &a.overrides()),
            commands::infer,
        ),
        Command::Eval(a) => (
            Settings::resolve(EvalArgs::SECTION, EvalArgs::DEFAULTS, file.as_ref(), &a.overrides()),
            commands::eval,
        ),
    };
    let hash = fnv1a_hex(&format!("{}seed={seed}\n", settings.canonical()));
    log::debug!("resolved settings:\n{}", settings.canonical());
    log::info!("{} with seed {seed}, config hash {hash}", settings.section);
    action(&Context {
        seed,
        out,
        settings,
        hash,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
