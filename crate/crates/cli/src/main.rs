use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vlgo::config::{ExperimentKind, RunConfig, SemiToyConfig};
use vlgo::contrastive::Ablation;
use vlgo::experiments;
use vlgo::Error;

/// Variational Lie group operator experiments.
#[derive(Parser, Debug)]
#[command(name = "vlgo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Threads for split-level parallelism in semisup-toy.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Validate the configuration and exit without running.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Print the full default configuration for the subcommand and exit.
    #[arg(long, global = true)]
    print_defaults: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Operator learning on the swiss roll: FISTA and variational variants.
    Swissroll,
    /// Contrastive pretraining on synthetic class manifolds plus linear probe.
    ManifoldclrToy {
        /// Also train ablation systems (s0..s4).
        #[arg(long, value_parser = parse_ablation)]
        ablation: Vec<Ablation>,
    },
    /// Semi-supervised comparison over paired label splits.
    SemisupToy {
        /// Label budget preset: 5, 50 or 100 labels per class.
        #[arg(long)]
        labels: Option<usize>,
        #[arg(long)]
        splits: Option<usize>,
    },
    /// Finite-difference and quadrature checks of every analytic gradient.
    CheckGrads,
    /// Operator paths from a dictionary checkpoint.
    Paths {
        /// Dictionary checkpoint (overrides `paths.dictionary`).
        #[arg(long)]
        dictionary: Option<PathBuf>,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::ALL
        .into_iter()
        .find(|a| a.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown ablation `{s}`, expected one of s0..s4"))
}

impl Command {
    fn kind(&self) -> ExperimentKind {
        match self {
            Command::Swissroll => ExperimentKind::Swissroll,
            Command::ManifoldclrToy { .. } => ExperimentKind::ManifoldclrToy,
            Command::SemisupToy { .. } => ExperimentKind::SemisupToy,
            Command::CheckGrads => ExperimentKind::CheckGrads,
            Command::Paths { .. } => ExperimentKind::Paths,
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.experiment = cli.command.kind();
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(w) = cli.common.workers {
        cfg.workers = w;
    }
    match &cli.command {
        Command::ManifoldclrToy { ablation } => cfg.manifoldclr_toy.ablations.extend(ablation.iter().copied()),
        Command::SemisupToy { labels, splits } => {
            if let Some(l) = labels {
                let preset = SemiToyConfig::preset(*l)?;
                cfg.semisup_toy.labels_per_class = preset.labels_per_class;
            }
            if let Some(s) = splits {
                cfg.semisup_toy.splits = *s;
            }
        }
        Command::Paths { dictionary: Some(d) } => cfg.paths.dictionary = Some(d.clone()),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.common.print_defaults {
        let cfg = RunConfig {
            experiment: cli.command.kind(),
            ..RunConfig::default()
        };
        match cfg.to_json() {
            Ok(text) => {
                println!("{text}");
                return ExitCode::SUCCESS;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
    }
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    if cli.common.dry_run {
        println!("config ok: {} (seed {}, out {})", cfg.experiment.name(), cfg.seed, cfg.out_dir.display());
        return ExitCode::SUCCESS;
    }
    match experiments::run(&cfg) {
        Ok(outcome) if outcome.passed => {
            println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Ok(_) => {
            eprintln!("error: oracle checks failed");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
