//! Training, evaluation, prune-and-finetune and decay-sweep loops.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{continuous_batches, Corpus};
use crate::error::{Error, Result};
use crate::metrics::{param_stats, perplexity, SweepRecord};
use crate::model::{CellKind, LmModel, RunOptions};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::sparsity::{global_magnitude_prune, global_weight_sparsity};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub eval_batch_size: usize,
    pub max_batches_per_epoch: usize,
    pub clip: f64,
    pub optimizer: AdamWConfig,
    pub threads: usize,
    pub include_readout: bool,
}

impl From<&RunConfig> for TrainSettings {
    fn from(c: &RunConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            seq_len: c.seq_len,
            eval_batch_size: c.eval_batch_size,
            max_batches_per_epoch: c.max_batches_per_epoch,
            clip: c.clip,
            optimizer: c.optimizer(),
            threads: c.threads,
            include_readout: c.include_readout_macs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_cross_entropy: f64,
    pub ppl: f64,
    /// `1 - active / total` over all EGRU layer outputs; 0 for LSTM.
    pub activity_sparsity: f64,
    pub macs_per_step: f64,
    pub weight_sparsity: f64,
    pub tokens: usize,
}

/// Scores `ids` with continuous batching from zero state. The result does
/// not depend on `threads`.
pub fn evaluate(
    model: &LmModel,
    ids: &[u32],
    batch_size: usize,
    seq_len: usize,
    threads: usize,
    include_readout: bool,
) -> Result<EvalReport> {
    let cursor = continuous_batches(ids, batch_size, seq_len)?;
    let mut states = vec![model.zero_state(); batch_size];
    let opts = RunOptions {
        threads,
        include_readout,
        ..RunOptions::eval()
    };
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    let mut active = 0u64;
    let mut total = 0u64;
    let mut macs = 0u64;
    for batch in cursor {
        let out = model.run_batch(&batch, &mut states, &opts, None)?;
        loss_sum += out.loss_sum();
        tokens += out.tokens();
        macs += out.ops.multiplies();
        for a in &out.activity {
            active += a.active;
            total += a.total;
        }
    }
    let mean = loss_sum / tokens.max(1) as f64;
    let activity_sparsity = match model.config.cell {
        CellKind::Egru if total > 0 => 1.0 - active as f64 / total as f64,
        _ => 0.0,
    };
    Ok(EvalReport {
        mean_cross_entropy: mean,
        ppl: perplexity(mean),
        activity_sparsity,
        macs_per_step: macs as f64 / tokens.max(1) as f64,
        weight_sparsity: global_weight_sparsity(model),
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ppl: f64,
    pub val_ppl: f64,
    pub activity_sparsity: f64,
    pub macs_per_step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub log: Vec<EpochRecord>,
    /// Epoch whose weights were kept (0 when no epoch improved on the start).
    pub best_epoch: usize,
    pub best_val_ppl: f64,
}

/// Trains for `settings.epochs` epochs and leaves the best-validation
/// weights in `model`. `on_epoch` sees every epoch's record and weights.
pub fn train(
    model: &mut LmModel,
    corpus: &Corpus,
    settings: &TrainSettings,
    rng: &mut dyn RngCore,
    mut on_epoch: impl FnMut(&EpochRecord, &LmModel) -> Result<()>,
) -> Result<TrainResult> {
    let mut opt = AdamW::new(settings.optimizer)?;
    let opts = RunOptions {
        threads: settings.threads,
        include_readout: settings.include_readout,
        ..RunOptions::train()
    };
    let start = evaluate(
        model,
        &corpus.valid,
        settings.eval_batch_size,
        settings.seq_len,
        settings.threads,
        settings.include_readout,
    )?;
    let mut best = (0usize, start.ppl, model.clone());
    let mut log = Vec::with_capacity(settings.epochs);

    for epoch in 1..=settings.epochs {
        let cursor = continuous_batches(&corpus.train, settings.batch_size, settings.seq_len)?;
        let mut states = vec![model.zero_state(); settings.batch_size];
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for (k, batch) in cursor.enumerate() {
            if settings.max_batches_per_epoch > 0 && k >= settings.max_batches_per_epoch {
                break;
            }
            let out = model.run_batch(&batch, &mut states, &opts, Some(&mut *rng))?;
            loss_sum += out.loss_sum();
            tokens += out.tokens();
            let mut grads = out
                .grads
                .ok_or_else(|| Error::Usage("no gradients returned".into()))?;
            clip_grad_norm(&mut grads, settings.clip)?;
            opt.step(model, &mut grads)?;
        }
        let val = evaluate(
            model,
            &corpus.valid,
            settings.eval_batch_size,
            settings.seq_len,
            settings.threads,
            settings.include_readout,
        )?;
        if !val.ppl.is_finite() {
            return Err(Error::Numeric(format!(
                "validation perplexity diverged at epoch {epoch}"
            )));
        }
        let record = EpochRecord {
            epoch,
            train_ppl: perplexity(loss_sum / tokens.max(1) as f64),
            val_ppl: val.ppl,
            activity_sparsity: val.activity_sparsity,
            macs_per_step: val.macs_per_step,
        };
        on_epoch(&record, model)?;
        if val.ppl < best.1 {
            best = (epoch, val.ppl, model.clone());
        }
        log.push(record);
    }
    let (best_epoch, best_val_ppl, best_model) = best;
    *model = best_model;
    Ok(TrainResult {
        log,
        best_epoch,
        best_val_ppl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStepRecord {
    pub step: usize,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub val_ppl: f64,
    pub test_ppl: f64,
    /// Test-split MACs per step and activity sparsity.
    pub macs_per_step: f64,
    pub activity_sparsity: f64,
}

/// Prunes to each target in turn, fine-tuning for `settings.epochs` epochs
/// after every step. `on_step` sees each step's record and weights.
pub fn prune_and_finetune(
    model: &mut LmModel,
    corpus: &Corpus,
    settings: &TrainSettings,
    targets: &[f64],
    rng: &mut dyn RngCore,
    mut on_step: impl FnMut(&PruneStepRecord, &LmModel) -> Result<()>,
) -> Result<Vec<PruneStepRecord>> {
    let mut records = Vec::with_capacity(targets.len());
    for (k, &target) in targets.iter().enumerate() {
        let report = global_magnitude_prune(model, target)?;
        // `train` keeps the best-validation weights, so its best score is
        // the validation score of the model that goes on.
        let tuned = train(model, corpus, settings, rng, |_, _| Ok(()))?;
        let test = evaluate(
            model,
            &corpus.test,
            settings.eval_batch_size,
            settings.seq_len,
            settings.threads,
            settings.include_readout,
        )?;
        let record = PruneStepRecord {
            step: k + 1,
            target_sparsity: target,
            achieved_sparsity: report.achieved(),
            val_ppl: tuned.best_val_ppl,
            test_ppl: test.ppl,
            macs_per_step: test.macs_per_step,
            activity_sparsity: test.activity_sparsity,
        };
        on_step(&record, model)?;
        records.push(record);
    }
    Ok(records)
}

/// Trains one fresh model per `(decay_w, decay_b)` pair, all from the same
/// seed, and scores each on the test split.
pub fn sweep_decay(
    config: &RunConfig,
    corpus: &Corpus,
    mut on_run: impl FnMut(&SweepRecord, &LmModel) -> Result<()>,
) -> Result<Vec<SweepRecord>> {
    let mut records = Vec::new();
    for &decay_w in &config.sweep_decay_w {
        for &decay_b in &config.sweep_decay_b {
            let run = RunConfig {
                decay_w,
                decay_b,
                ..config.clone()
            };
            let mut rng = seeded_rng(run.seed);
            let mut model = LmModel::new(run.lm_config(corpus.vocab.len()), &mut rng)?;
            let settings = TrainSettings::from(&run);
            train(&mut model, corpus, &settings, &mut rng, |_, _| Ok(()))?;
            let test = evaluate(
                &model,
                &corpus.test,
                settings.eval_batch_size,
                settings.seq_len,
                settings.threads,
                settings.include_readout,
            )?;
            let record = SweepRecord {
                decay_w,
                decay_b,
                test_ppl: test.ppl,
                activity_sparsity: test.activity_sparsity,
                params: param_stats(&model),
            };
            on_run(&record, &model)?;
            records.push(record);
        }
    }
    Ok(records)
}

/// The random stream used for initialisation and then training.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
