use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rdpo_core::align::TrainConfig;
use rdpo_core::exec::init_threads_from_env;
use rdpo_core::harness::{self, CandidateSource, CompareArgs, EvalArgs, GenDataArgs, PipelineConfig, TrainArgs};
use rdpo_core::synthcxr::Split;
use rdpo_core::{Error, Result};

/// Random-rejection DPO experiments on a synthetic report-generation corpus.
#[derive(Parser)]
#[command(name = "rdpo-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; keys override the command defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; each stage derives its own seed from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainOpts {
    /// Corpus directory written by gen-data.
    #[arg(long)]
    corpus: PathBuf,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Continue the run saved in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test corpus.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training of a fresh model.
    Sft {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// RDPO alignment of an SFT checkpoint.
    Align {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOpts,
        /// SFT checkpoint to align.
        #[arg(long)]
        sft: PathBuf,
    },
    /// Score a checkpoint's greedy decodes, or a candidates file, on a split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, conflicts_with = "candidates", required_unless_present = "candidates")]
        checkpoint: Option<PathBuf>,
        /// JSONL file of {"id", "report"} records.
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Baseline-versus-RDPO table from two evaluation CSVs.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        rdpo: PathBuf,
    },
    /// gen-data, sft, align, evaluate and compare in one go.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    init_threads_from_env()?;
    match cli.command {
        Command::GenData { common } => {
            let config = harness::resolve_corpus_config(common.config.as_deref(), common.seed)?;
            let m = harness::cmd_gen_data(&GenDataArgs {
                config,
                out: common.out,
                force: common.force,
            })?;
            println!("corpus {}", m.corpus_hash.unwrap_or_default());
        }
        Command::Sft { common, train } => {
            let config = harness::resolve_train_config(TrainConfig::sft(), common.config.as_deref(), common.seed, "sft")?;
            let m = harness::cmd_sft(&train_args(common, train, config))?;
            print_summary(&m);
        }
        Command::Align { common, train, sft } => {
            let config =
                harness::resolve_train_config(TrainConfig::rdpo(), common.config.as_deref(), common.seed, "rdpo")?;
            let m = harness::cmd_align(&train_args(common, train, config), &sft)?;
            print_summary(&m);
        }
        Command::Evaluate {
            common,
            corpus,
            split,
            checkpoint,
            candidates,
        } => {
            no_config(&common)?;
            let source = match (checkpoint, candidates) {
                (Some(c), None) => CandidateSource::Checkpoint(c),
                (None, Some(f)) => CandidateSource::File(f),
                _ => return Err(Error::Config("give exactly one of --checkpoint and --candidates".into())),
            };
            let m = harness::cmd_evaluate(&EvalArgs {
                corpus,
                split: Split::parse(&split)?,
                source,
                out: common.out,
                force: common.force,
            })?;
            print_summary(&m);
        }
        Command::Compare { common, baseline, rdpo } => {
            no_config(&common)?;
            let (m, _) = harness::cmd_compare(&CompareArgs {
                baseline,
                rdpo,
                out: common.out.clone(),
                force: common.force,
            })?;
            let md = std::fs::read_to_string(common.out.join(harness::COMPARISON_MD)).map_err(|e| Error::io(&common.out, e))?;
            print!("{md}");
            let _ = m;
        }
        Command::Pipeline { common } => {
            let cfg = PipelineConfig::resolve(common.config.as_deref(), Some(common.seed.unwrap_or(0)))?;
            let out = harness::pipeline(&cfg, &common.out, common.force)?;
            let md = std::fs::read_to_string(out.compare.join(harness::COMPARISON_MD)).map_err(|e| Error::io(&out.compare, e))?;
            print!("{md}");
        }
    }
    Ok(())
}

fn train_args(common: Common, train: TrainOpts, config: TrainConfig) -> TrainArgs {
    TrainArgs {
        corpus: train.corpus,
        config,
        out: common.out,
        force: common.force,
        max_steps: train.max_steps,
        resume: train.resume,
    }
}

fn no_config(common: &Common) -> Result<()> {
    if common.config.is_some() || common.seed.is_some() {
        return Err(Error::Config("this command takes no --config or --seed".into()));
    }
    Ok(())
}

fn print_summary(m: &harness::RunManifest) {
    if let Some(s) = &m.metric_summary {
        println!("{s}");
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rdpo-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
