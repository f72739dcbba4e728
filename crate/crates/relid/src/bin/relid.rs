//! Command-line front end: one subcommand per pipeline stage. All the
//! actual work lives in [`relid::pipeline`]; this binary only parses
//! arguments, loads the config, and formats errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relid::pipeline;

#[derive(Parser)]
#[command(
    name = "relid",
    version,
    about = "Spoken-language identification experiments over on-disk stage artifacts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value experiment config; omitted runs on preset defaults alone
    #[arg(long)]
    config: Option<PathBuf>,
    /// Baseline parameter set the config file overrides
    #[arg(long, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    /// Override paths.work_dir from the config
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and eval corpora
    GenCorpus(Common),
    /// Train the universal background model on pooled voiced frames
    TrainUbm(Common),
    /// Accumulate per-utterance statistics, optionally relevance weighted
    ExtractStats(Common),
    /// Train the total-variability subspace
    TrainTvm(Common),
    /// Extract i-vectors for the train and eval splits
    ExtractIvectors(Common),
    /// Fit WCCN, length normalization, LDA, and the linear SVM
    TrainBackend(Common),
    /// Train the configured model architecture
    TrainModel(Common),
    /// Score the eval split with the configured system
    Score(Common),
    /// Compute accuracy, EER, and C_avg from the score file
    Evaluate(Common),
    /// Dump attention weights against short-term SNR per eval utterance
    AttnDump(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::GenCorpus(c) => ("gen-corpus", c),
            Command::TrainUbm(c) => ("train-ubm", c),
            Command::ExtractStats(c) => ("extract-stats", c),
            Command::TrainTvm(c) => ("train-tvm", c),
            Command::ExtractIvectors(c) => ("extract-ivectors", c),
            Command::TrainBackend(c) => ("train-backend", c),
            Command::TrainModel(c) => ("train-model", c),
            Command::Score(c) => ("score", c),
            Command::Evaluate(c) => ("evaluate", c),
            Command::AttnDump(c) => ("attn-dump", c),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, common) = cli.command.parts();
    let outcome = pipeline::init_threads().and_then(|()| {
        let cfg = pipeline::load_config(
            common.config.as_deref(),
            common.preset.as_deref(),
            common.out.as_deref(),
        )?;
        pipeline::run_stage(stage, &cfg)
    });
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: stage={stage}: {e}");
            ExitCode::FAILURE
        }
    }
}
