//! `egru-lm`: vocabulary building, training, pruning, evaluation and
//! weight-decay sweeps for EGRU and LSTM language models.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use egru_lm::commands;
use egru_lm::config::RunConfig;
use egru_lm::Error;

#[derive(Debug, Parser)]
#[command(name = "egru-lm", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration; `EGRU_*` environment variables override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for batch-level parallelism. Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Output directory for logs, reports and checkpoints.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Count the decoder's multiplies in `macs_per_step`.
    #[arg(long, global = true)]
    include_readout_macs: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the vocabulary of a corpus file, one token per line.
    BuildVocab { corpus: PathBuf, out: PathBuf },
    /// Train a model and keep the best-validation checkpoint.
    Train,
    /// Prune a checkpoint along a sparsity schedule with fine-tuning.
    Prune {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated sparsity targets, e.g. `0.2,0.3,0.5`.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        targets: Option<Vec<f64>>,
    },
    /// Score a checkpoint and print the metrics as JSON.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// One of train, valid, test.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train one model per (decay_w, decay_b) pair.
    SweepDecay {
        #[arg(long, value_delimiter = ',')]
        decay_w: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        decay_b: Option<Vec<f64>>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Parameter(_) => 2,
        Error::Data(_) | Error::Format(_) => 3,
        Error::Numeric(_) => 4,
        Error::Io { .. } => 5,
        Error::Shape { .. } => 1,
    }
}

fn resolve(global: &GlobalArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(global.config.as_deref())?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = global.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &global.out {
        cfg.out_dir = out.clone();
    }
    if global.include_readout_macs {
        cfg.include_readout_macs = true;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Command::BuildVocab { corpus, out } = &cli.command {
        let vocab = commands::cmd_build_vocab(corpus, out)?;
        println!("wrote {} tokens to {}", vocab.len(), out.display());
        return Ok(());
    }
    let mut cfg = resolve(&cli.global)?;
    match cli.command {
        Command::BuildVocab { .. } => unreachable!("handled above"),
        Command::Train => {
            let summary = commands::cmd_train(&cfg)?;
            for rec in &summary.log {
                println!(
                    "epoch {:>3}  train_ppl {:>10.3}  val_ppl {:>10.3}  activity_sparsity {:.4}  macs_per_step {:.0}",
                    rec.epoch, rec.train_ppl, rec.val_ppl, rec.activity_sparsity, rec.macs_per_step
                );
            }
            println!(
                "best epoch {} (val_ppl {:.3}) saved to {}",
                summary.best_epoch,
                summary.best_val_ppl,
                summary.checkpoint.display()
            );
        }
        Command::Prune {
            checkpoint,
            targets,
        } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if let Some(t) = targets {
                cfg.prune_targets = t;
            }
            let summary = commands::cmd_prune(&cfg)?;
            if summary.empty_schedule {
                eprintln!("warning: the prune schedule is empty; nothing was done");
            }
            for s in &summary.steps {
                println!(
                    "step {:>2}  target {:.3}  achieved {:.4}  val_ppl {:.3}  test_ppl {:.3}  macs_per_step {:.0}",
                    s.step, s.target_sparsity, s.achieved_sparsity, s.val_ppl, s.test_ppl, s.macs_per_step
                );
            }
        }
        Command::Eval { checkpoint, split } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if let Some(s) = split {
                cfg.eval_split = s;
            }
            let report = commands::cmd_eval(&cfg)?;
            let json = serde_json::json!({
                "split": cfg.eval_split,
                "ppl": report.ppl,
                "mean_cross_entropy": report.mean_cross_entropy,
                "macs_per_step": report.macs_per_step,
                "activity_sparsity": report.activity_sparsity,
                "weight_sparsity": report.weight_sparsity,
                "tokens": report.tokens,
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&json).map_err(|e| Error::Format(e.to_string()))?
            );
        }
        Command::SweepDecay { decay_w, decay_b } => {
            if let Some(w) = decay_w {
                cfg.sweep_decay_w = w;
            }
            if let Some(b) = decay_b {
                cfg.sweep_decay_b = b;
            }
            let summary = commands::cmd_sweep_decay(&cfg)?;
            for r in &summary.records {
                println!(
                    "decay_w {:.3}  decay_b {:.3}  test_ppl {:.3}  activity_sparsity {:.4}  weight_mean {:.4}",
                    r.decay_w, r.decay_b, r.test_ppl, r.activity_sparsity, r.params.weights.mean
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
