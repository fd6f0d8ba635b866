use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advblur::commands::{self, RunOptions, CONFIG_FILE};
use advblur::config::ExperimentConfig;
use advblur::harness::{AcceptanceSummary, Criterion};
use advblur::train::Regime;
use advblur::{Error, Result};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;

/// Blur-robust forgery detectors: synthetic data, adversarial training,
/// attacks and evaluation.
#[derive(Parser, Debug)]
#[command(name = "advblur", version)]
struct Cli {
    /// TOML config; keys not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true, env = "ADVBLUR_SEED")]
    seed: Option<u64>,

    /// Parent directory for run directories (for `synth`: the dataset directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Do not record wall-clock times, so reruns are byte-identical.
    #[arg(long, global = true)]
    no_timestamps: bool,

    /// No progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark.
    Synth,
    /// Train a detector.
    Train {
        /// Training regime, e.g. normal, bat_twogen, combined, aug_blur.
        #[arg(long)]
        regime: Option<String>,
        /// Continue the training run in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Attack a detector checkpoint with every configured attack.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate detector checkpoints across the benchmark grid.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Blur-operator and gradient checks.
    GradCheck,
    /// Run the acceptance suite.
    Reproduce {
        /// Comma-separated criteria by name or number, e.g. `grad-checks,4`.
        #[arg(long)]
        only: Option<String>,
    },
}

fn load_config(cli: &Cli, fallback: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(p)) => ExperimentConfig::load(p)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let (Some(out), false) = (&cli.out, matches!(cli.command, Command::Synth)) {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(summary: &AcceptanceSummary) {
    for c in &summary.criteria {
        print!("{}", c.render());
    }
}

enum Outcome {
    Done,
    Acceptance(bool),
}

fn run(cli: &Cli) -> Result<Outcome> {
    let opts = RunOptions {
        timestamps: !cli.no_timestamps,
        progress: !cli.quiet,
    };
    match &cli.command {
        Command::Synth => {
            let cfg = load_config(cli, None)?;
            let (dir, records) = commands::cmd_synth(&cfg, cli.out.as_deref())?;
            println!("wrote {} samples to {} (seed {})", records.len(), dir.display(), cfg.seed);
        }
        Command::Train { regime, resume, epochs } => {
            let fallback = resume.as_ref().map(|d| d.join(CONFIG_FILE));
            let mut cfg = load_config(cli, fallback.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let regime = regime.as_deref().map(Regime::parse).transpose()?;
            let dir = commands::cmd_train(&cfg, regime, resume.as_deref(), &opts)?;
            println!("{}", dir.display());
        }
        Command::Attack { checkpoint } => {
            let cfg = load_config(cli, None)?;
            let (dir, report) = commands::cmd_attack(&cfg, checkpoint, &opts)?;
            println!("clean accuracy {:.4}", report.clean_accuracy);
            for e in &report.entries {
                println!("{:<10} accuracy {:.4} loss {:.4}", e.attack, e.accuracy, e.mean_loss);
            }
            println!("{}", dir.display());
        }
        Command::Eval { checkpoints } => {
            let cfg = load_config(cli, None)?;
            let (dir, report) = commands::cmd_eval(&cfg, checkpoints, &opts)?;
            print!("{}", report.to_table());
            println!("{}", dir.display());
        }
        Command::GradCheck => {
            let cfg = load_config(cli, None)?;
            let (dir, summary) = commands::cmd_grad_check(&cfg, &opts)?;
            print_summary(&summary);
            println!("{}", dir.display());
            return Ok(Outcome::Acceptance(summary.passed()));
        }
        Command::Reproduce { only } => {
            let cfg = load_config(cli, None)?;
            let only = only.as_deref().map(Criterion::parse_list).transpose()?;
            let (dir, summary) = commands::cmd_reproduce(&cfg, only.as_deref(), &opts)?;
            print_summary(&summary);
            println!("{}", dir.display());
            return Ok(Outcome::Acceptance(summary.passed()));
        }
    }
    Ok(Outcome::Done)
}

fn exit_code(err: &Error) -> u8 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(Outcome::Done) | Ok(Outcome::Acceptance(true)) => ExitCode::SUCCESS,
        Ok(Outcome::Acceptance(false)) => ExitCode::from(EXIT_ACCEPTANCE),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
