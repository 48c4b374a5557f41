//! `hscl`: scenario creation, training, evaluation, ablations and embedding plots.
//!
//! Exit codes: 0 ok, 1 usage or config error, 2 numerical failure, 3 I/O error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hscl::eval::Reducer;

use commands::{EvalArgs, PlotArgs, ScoreKind};
use config::Overrides;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "hscl", version, about = "Semi-supervised contrastive anomaly detection with contaminated data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the labeled/unlabeled/test split and write split.json.
    MakeScenario {
        #[arg(long)]
        config: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train encoder and prototypes; writes metrics.csv and checkpoint/.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Split manifest from make-scenario; rebuilt from the config when absent.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score the test split; writes scores.csv and summary.json into the run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Checkpoint directory; defaults to <run>/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Summarize an existing scores CSV (id, score, truth) instead of scoring.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "prototype")]
        score: ScoreKind,
        #[arg(long)]
        force: bool,
    },
    /// Train and score every cell of an ablation grid; writes ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// JSON grid: {"settings": [...], "w_delta": [...], "k": [...], "seeds": [...]}.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Export test embeddings (raw or t-SNE) to embeddings.csv, plus a PNG for 2-D maps.
    PlotEmbeddings {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tsne")]
        reducer: ReducerArg,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        /// Random subset of the test split when it is larger.
        #[arg(long, default_value_t = 1000)]
        max_samples: usize,
        /// Side of the PNG in pixels.
        #[arg(long, default_value_t = 512)]
        size: u32,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReducerArg {
    None,
    Tsne,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::MakeScenario {
            config,
            out,
            force,
            overrides,
        } => commands::make_scenario(&config, &out, force, &overrides),
        Command::Train {
            config,
            split,
            out,
            force,
            overrides,
        } => commands::train(&config, split.as_deref(), &out, force, &overrides),
        Command::Eval {
            run,
            split,
            checkpoint,
            scores,
            score,
            force,
        } => commands::eval(&EvalArgs {
            run: &run,
            split: split.as_deref(),
            checkpoint: checkpoint.as_deref(),
            scores: scores.as_deref(),
            score,
            force,
        }),
        Command::Ablate {
            config,
            grid,
            out,
            force,
            overrides,
        } => commands::ablate(&config, &grid, &out, force, &overrides),
        Command::PlotEmbeddings {
            run,
            split,
            checkpoint,
            reducer,
            perplexity,
            iterations,
            max_samples,
            size,
            force,
        } => commands::plot_embeddings(&PlotArgs {
            run: &run,
            split: split.as_deref(),
            checkpoint: checkpoint.as_deref(),
            reducer: match reducer {
                ReducerArg::None => Reducer::None,
                ReducerArg::Tsne => Reducer::Tsne,
            },
            perplexity,
            iterations,
            max_samples,
            size,
            force,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap uses 2 for usage errors; 2 is reserved for numerical failures here.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
