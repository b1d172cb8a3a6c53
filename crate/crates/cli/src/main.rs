//! `fits`: data generation, both training stages, evaluation, transforms,
//! diagnostics, the ablation grid and gradient checks.

mod commands;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fits_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "fits",
    version,
    about = "Two-stage knowledge-aware QA training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key = value config file; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable; wins over the file and FITS_SEED.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory, created if missing and locked while running.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Op {
    A,
    B,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic knowledge graph and JSONL splits.
    GenData(Common),
    /// Masked-LM and entity-matching post-training.
    PostTrain(Common),
    /// Answer supervision with the enabled auxiliaries.
    FineTune(Common),
    /// Accuracy of `checkpoint.in` (or a fresh model) on a split or file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Evaluate this JSONL file instead of a split.
        #[arg(long)]
        examples: Option<PathBuf>,
    },
    /// Equalize candidate texts (A) or candidate subgraphs (B).
    Transform {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        op: Op,
        /// Input JSONL; defaults to the test split.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output JSONL; defaults to test-reason.jsonl or test-param.jsonl in --out.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Alignment, PCA and attention reports.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Number of examples that get an attention report.
        #[arg(long, default_value_t = 5)]
        attention_examples: usize,
    },
    /// Post-training x fine-tuning objective grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Also run the MLM-only and KA-only post-training arms.
        #[arg(long)]
        partial_post: bool,
    },
    /// Finite-difference check of both stage losses over every parameter.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Usage and config problems exit 1, everything else 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 1,
        _ => 2,
    }
}

fn report(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::json!({ "error": kind, "message": message })
    );
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return report("UsageError", e.to_string().trim(), 1),
    };
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::PostTrain(c) => commands::post_train(&c),
        Command::FineTune(c) => commands::fine_tune(&c),
        Command::Eval {
            common,
            split,
            examples,
        } => commands::eval(&common, split, examples.as_deref()),
        Command::Transform {
            common,
            op,
            input,
            output,
        } => commands::transform(&common, op, input.as_deref(), output.as_deref()),
        Command::Diagnose {
            common,
            split,
            attention_examples,
        } => commands::diagnose(&common, split, attention_examples),
        Command::Ablate {
            common,
            partial_post,
        } => commands::ablate(&common, partial_post),
        Command::GradCheck { common, tolerance } => commands::grad_check(&common, tolerance),
    };
    match result {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(f)) => report(f.kind, &f.message, 2),
        Err(e) => report(e.kind(), &e.to_string(), exit_code(&e)),
    }
}
