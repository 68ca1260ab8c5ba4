use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ternatraj_cli::commands::{self, EvalInputs, Run};
use ternatraj_cli::{CliResult, RunConfig};

/// Ternary-quantized trajectory forecaster pipeline.
///
/// Every subcommand writes into its own output directory, resolved against
/// the output root, and leaves the fully resolved configuration there as
/// `config.resolved.txt`.
#[derive(Parser, Debug)]
#[command(name = "ternatraj", version)]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, env = "TERNATRAJ_OUT_ROOT", default_value = ".", global = true)]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set train.lr=2e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Held-out scene for leave-one-out (sets `data.held_out`).
    #[arg(long)]
    scene: Option<String>,

    /// Training seed (sets `train.seed`).
    #[arg(long)]
    seed: Option<u64>,

    /// Quantization mode: none, weight, activ, both (sets `quant.mode`).
    #[arg(long)]
    mode: Option<String>,

    /// Output directory, relative to the output root unless absolute.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the BPE trajectory tokenizer; writes vocab.txt.
    TokenizerTrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model; writes checkpoint.ttc, train_log.csv, epochs.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Best-of-K ADE/FDE on the test scenes; writes metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Predict the ground truth instead of sampling a model.
        #[arg(long)]
        oracle: bool,
        /// Label for the variant column.
        #[arg(long)]
        variant: Option<String>,
        /// Earlier metrics.csv to compute dADE/dFDE against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Learning-rate by mode by seed stability grid; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Freeze a checkpoint into a packed model; writes model.ttd, memory.csv.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Single-sequence generation latency; writes bench.json.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Exported model file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Summarize run directories; writes report.txt and report.csv.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories to include.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::TokenizerTrain { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Sweep { common, .. }
            | Command::Export { common, .. }
            | Command::Bench { common, .. }
            | Command::Report { common, .. } => common,
        }
    }

    fn default_out(&self) -> &'static str {
        match self {
            Command::TokenizerTrain { .. } => "tokenizer",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Export { .. } => "export",
            Command::Bench { .. } => "bench",
            Command::Report { .. } => "report",
        }
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn setup(cli: &Cli) -> CliResult<Run> {
    let c = cli.command.common();
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    if let Some(s) = &c.scene {
        cfg.set("data.held_out", s)?;
    }
    if let Some(s) = c.seed {
        cfg.set("train.seed", &s.to_string())?;
    }
    if let Some(m) = &c.mode {
        cfg.set("quant.mode", m)?;
    }
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(cli.command.default_out()));
    Run::new(cfg, resolve(&cli.out_root, &out))
}

fn run(cli: Cli) -> CliResult<()> {
    let r = setup(&cli)?;
    match &cli.command {
        Command::TokenizerTrain { .. } => {
            let p = commands::tokenizer_train(&r)?;
            println!("{}", p.display());
        }
        Command::Train { vocab, .. } => {
            let log = commands::train_cmd(&r, vocab)?;
            println!(
                "steps {} smoothed_final_loss {:.6}",
                log.steps.len(),
                log.smoothed_final_loss(r.cfg.smoothing)
            );
        }
        Command::Eval {
            checkpoint,
            vocab,
            oracle,
            variant,
            baseline,
            ..
        } => {
            let csv = commands::eval_cmd(
                &r,
                &EvalInputs {
                    checkpoint: checkpoint.as_deref(),
                    vocab: vocab.as_deref(),
                    oracle: *oracle,
                    variant: variant.as_deref(),
                    baseline: baseline.as_deref(),
                },
            )?;
            print!("{csv}");
        }
        Command::Sweep { vocab, .. } => print!("{}", commands::sweep_cmd(&r, vocab)?),
        Command::Export { checkpoint, .. } => {
            commands::export_cmd(&r, checkpoint)?;
            println!("{}", r.path(commands::EXPORT_FILE).display());
        }
        Command::Bench { model, vocab, .. } => print!("{}", commands::bench_cmd(&r, model, vocab)?),
        Command::Report { runs, .. } => print!("{}", commands::report_cmd(&r, runs)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
