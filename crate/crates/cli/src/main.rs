//! `cropthink`: stage-by-stage operator commands.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Failure, Run};
use config::{BackendKind, RunConfig};
use cropthink::rollout::PerturbKind;
use cropthink::types::InjectionMode;

#[derive(Parser, Debug)]
#[command(name = "cropthink", version, about = "Interleaved crop-and-zoom reasoning: data, training, evaluation")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.output_dir`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides `backend.kind`.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ModeArg {
    /// Overrides `policy.injection_mode` (interleaved | text_only).
    #[arg(long, value_parser = parse_mode)]
    injection_mode: Option<InjectionMode>,
}

fn parse_mode(s: &str) -> Result<InjectionMode, String> {
    s.parse().map_err(|e: cropthink::types::CoreError| e.to_string())
}

fn parse_kind(s: &str) -> Result<PerturbKind, String> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "replace_random" | "replace" => Ok(PerturbKind::ReplaceRandom),
        "jitter" => Ok(PerturbKind::Jitter),
        other => Err(format!("unknown perturbation kind {other:?} (replace_random | jitter)")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate rationales for the build manifest and keep answer-matching ones.
    BuildData,
    /// Apply the region-validity and reasoning-quality filters.
    FilterData,
    /// Cold-start fine-tuning then group-relative optimization (toy backend).
    Train {
        #[arg(long)]
        skip_sft: bool,
        #[arg(long)]
        skip_rgrpo: bool,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        mode: ModeArg,
    },
    /// Exact-match evaluation with greedy decoding.
    Eval {
        #[command(flatten)]
        mode: ModeArg,
    },
    /// Accuracy as a function of grounding accuracy.
    Perturb {
        /// Comma-separated grounding accuracies; overrides `perturb.grid`.
        #[arg(long = "p", value_delimiter = ',')]
        p: Option<Vec<f64>>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<PerturbKind>,
        #[command(flatten)]
        mode: ModeArg,
    },
    /// Crops-per-image, source and crop-size statistics of a corpus.
    Stats {
        /// Use the built-in reference fixture corpus.
        #[arg(long)]
        reference_fixture: bool,
        /// Overrides `paths.corpus`.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Write the toy fixture descriptor (and optionally the reference corpus).
    Fixtures {
        #[arg(long)]
        reference_corpus: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.paths.output_dir = d.clone();
    }
    if let Some(b) = cli.backend {
        cfg.backend.kind = b;
    }
    let mode = match &cli.command {
        Command::Train { mode, .. } | Command::Eval { mode } | Command::Perturb { mode, .. } => mode.injection_mode,
        _ => None,
    };
    if let Some(m) = mode {
        cfg.policy.injection_mode = m;
    }
    match &cli.command {
        Command::Train {
            skip_sft,
            skip_rgrpo,
            steps,
            ..
        } => {
            cfg.train.skip_sft |= skip_sft;
            cfg.train.skip_rgrpo |= skip_rgrpo;
            if let Some(n) = steps {
                cfg.train.steps = *n;
            }
        }
        Command::Perturb { p, kind, .. } => {
            if let Some(grid) = p {
                cfg.perturb.grid = grid.clone();
            }
            if let Some(k) = kind {
                cfg.perturb.kind = *k;
            }
        }
        Command::Stats { corpus: Some(c), .. } => cfg.paths.corpus = Some(c.clone()),
        _ => {}
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let name = match cli.command {
        Command::BuildData => "build-data",
        Command::FilterData => "filter-data",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Perturb { .. } => "perturb",
        Command::Stats { .. } => "stats",
        Command::Fixtures { .. } => "fixtures",
    };
    let run = Run::new(cfg, name);
    log::info!("{name}: config hash {}, seed {}", run.hash, run.cfg.seed);
    match &cli.command {
        Command::BuildData => commands::build_data(&run),
        Command::FilterData => commands::filter_data(&run),
        Command::Train { .. } => commands::train(&run),
        Command::Eval { .. } => commands::eval(&run),
        Command::Perturb { .. } => commands::perturb(&run),
        Command::Stats { reference_fixture, .. } => commands::stats(&run, *reference_fixture),
        Command::Fixtures { reference_corpus } => commands::fixtures(&run, reference_corpus.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}
