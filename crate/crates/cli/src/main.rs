//! `tpt`: command-line driver for the two-pass recognizer.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tpt", version, about = "Two-pass streaming recognizer with joint audio/text rescorer training")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (JSON); defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic two-domain corpus
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory for paired, text-only and test files
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the streaming transducer (first pass)
    TrainRnnt {
        #[command(flatten)]
        config: ConfigArg,
        /// Corpus directory written by gen-data
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Overrides first_pass_train.epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a rescorer against a frozen first pass
    TrainRescorer {
        #[command(flatten)]
        config: ConfigArg,
        /// First-pass checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Mix text-only batches using h_avg as the audio memory
        #[arg(long)]
        joint: bool,
        /// Text-only mixing ratio in [0, 1] (joint training only)
        #[arg(long, requires = "joint")]
        ratio: Option<f64>,
        /// How h_avg is built (joint training only)
        #[arg(long, value_parser = ["zero", "empirical"], requires = "joint")]
        havg_mode: Option<String>,
        /// Overrides joint.epochs
        #[arg(long)]
        epochs: Option<f64>,
        #[arg(long)]
        out_ckpt: PathBuf,
    },
    /// Decode utterances into n-best lists
    Decode {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// Rescorer checkpoint; adds rescorer scores and the selected entry
        #[arg(long)]
        rescorer_ckpt: Option<PathBuf>,
        /// Beam width and number of hypotheses written
        #[arg(long)]
        beam: Option<usize>,
        /// Weight on the first-pass score when a rescorer is given
        #[arg(long)]
        lambda: Option<f64>,
        /// Corpus file with paired records
        #[arg(long)]
        input: PathBuf,
        /// N-best output (JSON lines)
        #[arg(long)]
        out_nbest: PathBuf,
        /// Also write encoder outputs as checkpoint tensors `emb.<id>`
        #[arg(long)]
        out_emb: Option<PathBuf>,
    },
    /// Word error rates of the first pass and of each rescorer
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// Rescorer checkpoint; repeat to compare several on the same n-best lists
        #[arg(long)]
        rescorer_ckpt: Vec<PathBuf>,
        /// Corpus directory (its test split) or a corpus file
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        beam: Option<usize>,
        /// JSON report; a CSV table is written alongside
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Train and evaluate rescorers over a grid of mixing ratios
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// First-pass checkpoint (default: paths.first_pass_ckpt)
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Corpus directory (default: paths.corpus)
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated ratios, starting with 0
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Rescorer seeds per ratio
        #[arg(long)]
        seeds: Option<usize>,
        /// Also train nonzero ratios with the empirical h_avg
        #[arg(long)]
        compare_empirical: bool,
        /// JSON report; CSV and SVG are written alongside
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Time from the last input frame to the final hypothesis
    Latency {
        #[command(flatten)]
        config: ConfigArg,
        /// First-pass checkpoint (default: paths.first_pass_ckpt)
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Standard-trained rescorer
        #[arg(long)]
        rescorer_ckpt: Option<PathBuf>,
        /// Jointly trained rescorer
        #[arg(long)]
        joint_rescorer_ckpt: Option<PathBuf>,
        /// Corpus directory or file (default: paths.corpus)
        #[arg(long)]
        testset: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long)]
        out_report: Option<PathBuf>,
    },
    /// Finite-difference gradient check of one component
    GradCheck {
        #[arg(long, value_parser = ["encoder", "predictor", "joiner", "rescorer", "transducer-loss"])]
        component: String,
        /// Seed of the random instance
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(msg) = commands::configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
