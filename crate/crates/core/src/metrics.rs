//! Multiply-accumulate accounting, sparsity and perplexity metrics.
//!
//! MAC convention: one MAC per scalar multiply inside a matrix-vector
//! product. A product with an event input costs the number of unmasked
//! weights in the columns of the active inputs; a dense input visits every
//! column. Elementwise gate arithmetic is not counted, and the decoder is
//! excluded unless asked for.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{LayerCaches, LmModel, RunOptions};
use crate::tensor::{CellInput, EventVector, MaskedMatrix, OpCounter};

/// MACs of `W e` for an event input.
pub fn count_macs_event(m: &MaskedMatrix, e: &EventVector) -> u64 {
    let nnz = m.nnz_per_column();
    e.indices().iter().map(|&j| nnz[j as usize] as u64).sum()
}

/// MACs of `W a` for a dense input: every unmasked weight.
pub fn count_macs_dense(m: &MaskedMatrix) -> u64 {
    m.nnz() as u64
}

pub fn count_macs(m: &MaskedMatrix, x: CellInput<'_>) -> u64 {
    match x {
        CellInput::Dense(_) => count_macs_dense(m),
        CellInput::Events(e) => count_macs_event(m, e),
    }
}

/// Expected fraction of dense MACs when inputs are inactive with
/// probability `activity_sparsity` and weights are zero with probability
/// `weight_sparsity`, independently.
pub fn theoretical_fraction(activity_sparsity: f64, weight_sparsity: f64) -> f64 {
    (1.0 - activity_sparsity) * (1.0 - weight_sparsity)
}

/// `1 - active / total` over a set of event outputs.
pub fn activity_sparsity(ys: &[EventVector]) -> f64 {
    let total: usize = ys.iter().map(EventVector::dim).sum();
    if total == 0 {
        return 0.0;
    }
    let active: usize = ys.iter().map(EventVector::nnz).sum();
    1.0 - active as f64 / total as f64
}

pub fn perplexity(mean_cross_entropy: f64) -> f64 {
    mean_cross_entropy.exp()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacEntry {
    pub layer: usize,
    pub matrix: String,
    pub macs: u64,
}

/// MACs broken down by layer and matrix over a number of token steps.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacLedger {
    pub entries: Vec<MacEntry>,
    pub readout: u64,
    /// Number of (stream, time step) pairs the counts cover.
    pub steps: u64,
}

impl MacLedger {
    fn add(&mut self, layer: usize, matrix: &str, macs: u64) {
        match self
            .entries
            .iter_mut()
            .find(|e| e.layer == layer && e.matrix == matrix)
        {
            Some(e) => e.macs += macs,
            None => self.entries.push(MacEntry {
                layer,
                matrix: matrix.to_string(),
                macs,
            }),
        }
    }

    pub fn recurrent_total(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn total(&self) -> u64 {
        self.recurrent_total() + self.readout
    }

    pub fn per_step(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.total() as f64 / self.steps as f64
        }
    }

    /// Builds the ledger from forward caches, independently of the op
    /// counter inside the kernels.
    pub fn from_caches(
        model: &LmModel,
        caches: &[LayerCaches],
        include_readout: bool,
    ) -> Result<Self> {
        if caches.len() != model.layers.len() {
            return Err(Error::Usage("one cache list per layer expected".into()));
        }
        let mut ledger = MacLedger::default();
        for (l, (layer, cache)) in model.layers.iter().zip(caches).enumerate() {
            let mats = layer.matrices();
            let get = |name: &str| {
                mats.iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, m)| *m)
                    .expect("known matrix name")
            };
            match cache {
                LayerCaches::Egru(seqs) => {
                    for step in seqs.iter().flatten() {
                        let x = step.x.as_input();
                        for name in ["w_ux", "w_rx", "w_zx"] {
                            ledger.add(l, name, count_macs(get(name), x));
                        }
                        for name in ["w_uy", "w_ry"] {
                            ledger.add(l, name, count_macs_event(get(name), &step.y_prev));
                        }
                        ledger.add(l, "w_zy", count_macs_event(get("w_zy"), &step.ry));
                        if l == 0 {
                            ledger.steps += 1;
                        }
                    }
                }
                LayerCaches::Lstm(seqs) => {
                    for step in seqs.iter().flatten() {
                        for (name, m) in &mats {
                            let x = if name.ends_with('x') {
                                step.x.as_input()
                            } else {
                                CellInput::Dense(&step.h_prev)
                            };
                            ledger.add(l, name, count_macs(m, x));
                        }
                        if l == 0 {
                            ledger.steps += 1;
                        }
                    }
                }
            }
        }
        if include_readout {
            let dec = model.decoder_weights();
            ledger.readout = ledger.steps * (dec.rows() * dec.cols()) as u64;
        }
        Ok(ledger)
    }
}

/// Ledger and instrumented count for one eval-mode forward pass over
/// `batch` from zero state.
pub fn model_step_macs(
    model: &LmModel,
    batch: &Batch,
    include_readout: bool,
) -> Result<(MacLedger, OpCounter)> {
    let mut states = vec![model.zero_state(); batch.batch_size()];
    let opts = RunOptions {
        keep_caches: true,
        include_readout,
        ..RunOptions::eval()
    };
    let out = model.run_batch(batch, &mut states, &opts, None)?;
    let caches = out.caches.unwrap_or_default();
    Ok((
        MacLedger::from_caches(model, &caches, include_readout)?,
        out.ops,
    ))
}

/// Summary of a value distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// `(q, value)` at q = 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99.
    pub quantiles: Vec<(f64, f64)>,
}

pub const QUANTILES: [f64; 7] = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99];

impl DistributionStats {
    /// Population statistics; quantiles by linear interpolation.
    pub fn from_values(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self {
                count,
                mean: 0.0,
                std: 0.0,
                min: 0.0,
                max: 0.0,
                quantiles: QUANTILES.iter().map(|&q| (q, 0.0)).collect(),
            };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let quantile = |q: f64| {
            let pos = q * (count - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        };
        Self {
            count,
            mean,
            std: var.sqrt(),
            min: sorted[0],
            max: sorted[count - 1],
            quantiles: QUANTILES.iter().map(|&q| (q, quantile(q))).collect(),
        }
    }
}

/// Parameter statistics of a trained model: weights are the recurrent-layer
/// matrices (pruned entries excluded), biases the gate biases, thresholds
/// the EGRU thresholds (empty for LSTM).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStats {
    pub weights: DistributionStats,
    pub biases: DistributionStats,
    pub thresholds: DistributionStats,
}

pub fn param_stats(model: &LmModel) -> ParamStats {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut thresholds = Vec::new();
    for layer in &model.layers {
        for (_, m) in layer.matrices() {
            weights.extend(
                m.values()
                    .iter()
                    .zip(m.mask())
                    .filter(|(_, &k)| k)
                    .map(|(v, _)| *v),
            );
        }
        for (name, v) in layer.vectors() {
            if name == "thresholds" {
                thresholds.extend_from_slice(v);
            } else {
                biases.extend_from_slice(v);
            }
        }
    }
    ParamStats {
        weights: DistributionStats::from_values(&weights),
        biases: DistributionStats::from_values(&biases),
        thresholds: DistributionStats::from_values(&thresholds),
    }
}

/// One row of a weight-decay sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub decay_w: f64,
    pub decay_b: f64,
    pub test_ppl: f64,
    pub activity_sparsity: f64,
    pub params: ParamStats,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseMatrix;

    #[test]
    fn event_macs_count_active_columns() {
        let dense = DenseMatrix::from_fn(3, 4, |i, j| (i + j) as f64 + 1.0);
        let mut mask = vec![true; 12];
        mask[0] = false; // (0, 0)
        mask[4] = false; // (1, 1)
        mask[5] = false; // (2, 1)
        let m = MaskedMatrix::with_mask(dense, mask).unwrap();
        let e = EventVector::from_pairs(4, &[(0, 1.0), (1, 2.0), (3, 1.0)]).unwrap();
        assert_eq!(count_macs_event(&m, &e), 2 + 1 + 3);
        assert_eq!(count_macs_dense(&m), 9);
        assert_eq!(count_macs_event(&m, &EventVector::empty(4)), 0);
        let mut ops = OpCounter::new();
        let mut out = vec![0.0; 3];
        m.accumulate(CellInput::Events(&e), &mut out, &mut ops);
        assert_eq!(ops.multiplies(), 6);
    }

    #[test]
    fn activity_and_perplexity() {
        let ys = vec![
            EventVector::from_pairs(4, &[(1, 1.0)]).unwrap(),
            EventVector::from_pairs(4, &[(0, 1.0), (2, 1.0), (3, 0.5)]).unwrap(),
        ];
        assert!((activity_sparsity(&ys) - 0.5).abs() < 1e-15);
        assert_eq!(activity_sparsity(&[]), 0.0);
        assert!((perplexity(10f64.ln()) - 10.0).abs() < 1e-12);
        assert!((theoretical_fraction(0.8, 0.5) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn distribution_stats() {
        let s = DistributionStats::from_values(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(s.mean, 3.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.quantiles[3], (0.5, 3.0));
        assert_eq!((s.min, s.max), (1.0, 5.0));
        let q25 = s.quantiles[2].1;
        assert_eq!(q25, 2.0);
        assert_eq!(DistributionStats::from_values(&[]).count, 0);
    }
}
