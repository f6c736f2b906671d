//! The command-line workflows as library functions. Each command writes its
//! artifacts plus `resolved_config.toml` into `config.out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{RunConfig, CODE_VERSION};
use crate::data::{read_text, Corpus, Vocab};
use crate::error::{Error, Result};
use crate::metrics::SweepRecord;
use crate::model::LmModel;
use crate::pipeline::{
    evaluate, prune_and_finetune, seeded_rng, sweep_decay, train, EpochRecord, EvalReport,
    PruneStepRecord, TrainSettings,
};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const PRUNE_TRACE: &str = "prune_trace.csv";
pub const PRUNE_CURVE: &str = "prune_curve.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Builds the vocabulary of `corpus` and writes it to `out`, one token per
/// line in id order.
pub fn cmd_build_vocab(corpus: &Path, out: &Path) -> Result<Vocab> {
    let vocab = Vocab::build(&read_text(corpus)?)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    vocab.save(out)?;
    Ok(vocab)
}

/// Loads the three splits, using `config.vocab_path` when set.
pub fn load_corpus(config: &RunConfig, vocab: Option<Vocab>) -> Result<Corpus> {
    let vocab = match (vocab, &config.vocab_path) {
        (Some(v), _) => Some(v),
        (None, Some(p)) => Some(Vocab::load(p)?),
        (None, None) => None,
    };
    Corpus::load(
        &config.train_path,
        &config.valid_path,
        &config.test_path,
        vocab,
    )
}

fn prepare_out_dir(config: &RunConfig) -> Result<()> {
    config.validate()?;
    config.write_resolved(&config.out_dir)?;
    Ok(())
}

fn meta(config: &RunConfig, epoch: usize, metrics: &[(&str, f64)]) -> Result<CheckpointMeta> {
    let mut m = CheckpointMeta {
        seed: config.seed,
        epoch,
        step: 0,
        run_config: Some(config.to_toml()?),
        metrics: Default::default(),
    };
    for (k, v) in metrics {
        m.metrics.insert((*k).to_string(), serde_json::json!(v));
    }
    Ok(m)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ppl: f64,
    pub checkpoint: PathBuf,
}

/// Trains a fresh model; writes `train_log.csv`, `vocab.txt` and the
/// best-validation checkpoint.
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    prepare_out_dir(config)?;
    let corpus = load_corpus(config, None)?;
    let out = &config.out_dir;
    corpus.vocab.save(&out.join(VOCAB_FILE))?;

    let mut rng = seeded_rng(config.seed);
    let mut model = LmModel::new(config.lm_config(corpus.vocab.len()), &mut rng)?;
    let settings = TrainSettings::from(config);
    let log_path = out.join(TRAIN_LOG);
    let mut log = csv_writer(&log_path)?;
    let result = train(&mut model, &corpus, &settings, &mut rng, |rec, _| {
        log.serialize(rec).map_err(|e| csv_error(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        Ok(())
    })?;
    if result.log.is_empty() {
        // header only, so the file is still a valid table
        drop(log);
        fs::write(
            &log_path,
            "epoch,train_ppl,val_ppl,activity_sparsity,macs_per_step\n",
        )
        .map_err(|e| Error::io(&log_path, e))?;
    }
    let ckpt = out.join(BEST_CHECKPOINT);
    checkpoint::save(
        &ckpt,
        &model,
        &corpus.vocab,
        &meta(
            config,
            result.best_epoch,
            &[("val_ppl", result.best_val_ppl)],
        )?,
    )?;
    Ok(TrainSummary {
        log: result.log,
        best_epoch: result.best_epoch,
        best_val_ppl: result.best_val_ppl,
        checkpoint: ckpt,
    })
}

fn required_checkpoint(config: &RunConfig) -> Result<&Path> {
    config
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("a checkpoint path is required (checkpoint = ...)".into()))
}

/// One point of the sparsity/compute/perplexity curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneCurvePoint {
    pub weight_sparsity: f64,
    pub macs: f64,
    pub test_ppl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSummary {
    pub steps: Vec<PruneStepRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// Set when the schedule was empty and nothing was done.
    pub empty_schedule: bool,
}

/// Prunes `config.checkpoint` along `config.prune_targets`, fine-tuning
/// `config.finetune_epochs` epochs after each step. Writes
/// `prune_trace.csv`, `prune_curve.csv` and one checkpoint per step.
pub fn cmd_prune(config: &RunConfig) -> Result<PruneSummary> {
    let ckpt = checkpoint::load(required_checkpoint(config)?)?;
    prepare_out_dir(config)?;
    if config.prune_targets.is_empty() {
        return Ok(PruneSummary {
            steps: Vec::new(),
            checkpoints: Vec::new(),
            empty_schedule: true,
        });
    }
    crate::sparsity::PruneSchedule {
        targets: config.prune_targets.clone(),
        finetune_epochs: config.finetune_epochs,
    }
    .validate()?;
    let corpus = load_corpus(config, Some(ckpt.vocab.clone()))?;
    let mut model = ckpt.model;
    let settings = TrainSettings {
        epochs: config.finetune_epochs,
        ..TrainSettings::from(config)
    };
    let mut rng = seeded_rng(config.seed);
    let out = &config.out_dir;
    let trace_path = out.join(PRUNE_TRACE);
    let mut trace = csv_writer(&trace_path)?;
    let mut checkpoints = Vec::new();
    let steps = prune_and_finetune(
        &mut model,
        &corpus,
        &settings,
        &config.prune_targets,
        &mut rng,
        |rec, m| {
            trace
                .serialize(rec)
                .map_err(|e| csv_error(&trace_path, e))?;
            trace.flush().map_err(|e| Error::io(&trace_path, e))?;
            let path = out.join(format!("prune_step{}.ckpt", rec.step));
            checkpoint::save(
                &path,
                m,
                &corpus.vocab,
                &meta(
                    config,
                    0,
                    &[
                        ("target_sparsity", rec.target_sparsity),
                        ("val_ppl", rec.val_ppl),
                        ("test_ppl", rec.test_ppl),
                    ],
                )?,
            )?;
            checkpoints.push(path);
            Ok(())
        },
    )?;
    let curve: Vec<PruneCurvePoint> = steps
        .iter()
        .map(|s| PruneCurvePoint {
            weight_sparsity: s.achieved_sparsity,
            macs: s.macs_per_step,
            test_ppl: s.test_ppl,
        })
        .collect();
    write_rows(&out.join(PRUNE_CURVE), &curve)?;
    Ok(PruneSummary {
        steps,
        checkpoints,
        empty_schedule: false,
    })
}

/// Scores `config.checkpoint` on `config.eval_split`.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalReport> {
    config.validate()?;
    let ckpt = checkpoint::load(required_checkpoint(config)?)?;
    let corpus = load_corpus(config, Some(ckpt.vocab))?;
    let ids = match config.eval_split.as_str() {
        "train" => &corpus.train,
        "valid" => &corpus.valid,
        _ => &corpus.test,
    };
    evaluate(
        &ckpt.model,
        ids,
        config.eval_batch_size,
        config.seq_len,
        config.threads,
        config.include_readout_macs,
    )
}

/// Flat sweep row for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub decay_w: f64,
    pub decay_b: f64,
    pub test_ppl: f64,
    pub activity_sparsity: f64,
    pub weight_mean: f64,
    pub weight_std: f64,
    pub bias_mean: f64,
    pub bias_std: f64,
}

impl From<&SweepRecord> for SweepRow {
    fn from(r: &SweepRecord) -> Self {
        Self {
            decay_w: r.decay_w,
            decay_b: r.decay_b,
            test_ppl: r.test_ppl,
            activity_sparsity: r.activity_sparsity,
            weight_mean: r.params.weights.mean,
            weight_std: r.params.weights.std,
            bias_mean: r.params.biases.mean,
            bias_std: r.params.biases.std,
        }
    }
}

#[derive(Serialize)]
struct SweepReport<'a> {
    code_version: &'a str,
    records: &'a [SweepRecord],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub records: Vec<SweepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains one model per `(decay_w, decay_b)` pair of the configured grids.
/// Writes `sweep.csv`, `sweep.json` (with quantiles) and one checkpoint per
/// run.
pub fn cmd_sweep_decay(config: &RunConfig) -> Result<SweepSummary> {
    prepare_out_dir(config)?;
    if config.sweep_decay_w.is_empty() || config.sweep_decay_b.is_empty() {
        return Err(Error::Config("sweep grids must not be empty".into()));
    }
    let corpus = load_corpus(config, None)?;
    let out = &config.out_dir;
    let csv_path = out.join(SWEEP_CSV);
    let mut csv = csv_writer(&csv_path)?;
    let mut checkpoints = Vec::new();
    let records = sweep_decay(config, &corpus, |rec, model| {
        csv.serialize(SweepRow::from(rec))
            .map_err(|e| csv_error(&csv_path, e))?;
        csv.flush().map_err(|e| Error::io(&csv_path, e))?;
        let path = out.join(format!("sweep_{}.ckpt", checkpoints.len()));
        let run = RunConfig {
            decay_w: rec.decay_w,
            decay_b: rec.decay_b,
            ..config.clone()
        };
        checkpoint::save(
            &path,
            model,
            &corpus.vocab,
            &meta(&run, 0, &[("test_ppl", rec.test_ppl)])?,
        )?;
        checkpoints.push(path);
        Ok(())
    })?;
    write_json(
        &out.join(SWEEP_JSON),
        &SweepReport {
            code_version: CODE_VERSION,
            records: &records,
        },
    )?;
    Ok(SweepSummary {
        records,
        checkpoints,
    })
}
