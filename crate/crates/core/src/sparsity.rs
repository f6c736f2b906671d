//! Global magnitude pruning over all layer weight matrices.
//!
//! The embedding, biases and thresholds are never pruned. Masks only grow:
//! each step masks the smallest-magnitude unmasked weights until the global
//! masked count reaches `ceil(target * N)`. Ties are broken by tensor order,
//! then by row-major index inside the tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LmModel;
use crate::tensor::MaskedMatrix;

/// Number of weights to mask for `target` out of `total`; `target * total`
/// within `1e-9` of an integer counts as that integer.
pub fn prune_count(target: f64, total: usize) -> usize {
    let x = target * total as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k.max(0.0) as usize).min(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub target: f64,
    pub total: usize,
    /// Masked entries after this step.
    pub masked: usize,
    /// Entries newly masked by this step.
    pub newly_masked: usize,
}

impl PruneReport {
    pub fn achieved(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.masked as f64 / self.total as f64
        }
    }
}

/// Masks the globally smallest unmasked weights of `mats` until a fraction
/// `target` of all their entries is masked, then zeroes masked weights.
pub fn prune_matrices(mats: &mut [&mut MaskedMatrix], target: f64) -> Result<PruneReport> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Parameter(format!(
            "prune target must be in [0, 1], got {target}"
        )));
    }
    let total: usize = mats.iter().map(|m| m.len()).sum();
    let already: usize = mats.iter().map(|m| m.masked_count()).sum();
    let k = prune_count(target, total);
    if k < already {
        return Err(Error::Parameter(format!(
            "target {target} needs {k} masked weights but {already} are already masked"
        )));
    }
    let need = k - already;

    // (|w|, tensor, row-major index, storage index)
    let mut candidates: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(total - already);
    for (t, m) in mats.iter().enumerate() {
        let rows = m.rows();
        let cols = m.cols();
        let values = m.values();
        let mask = m.mask();
        for j in 0..cols {
            for i in 0..rows {
                let s = j * rows + i;
                if mask[s] {
                    candidates.push((values[s].abs(), t, i * cols + j, s));
                }
            }
        }
    }
    let order = |a: &(f64, usize, usize, usize), b: &(f64, usize, usize, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    if need > 0 && need < candidates.len() {
        candidates.select_nth_unstable_by(need - 1, order);
    }
    candidates.truncate(need);

    let mut per_tensor: Vec<Vec<usize>> = vec![Vec::new(); mats.len()];
    for &(_, t, _, s) in &candidates {
        per_tensor[t].push(s);
    }
    for (m, idx) in mats.iter_mut().zip(per_tensor) {
        if !idx.is_empty() {
            m.mask_entries(&idx);
        }
        m.apply_mask();
    }
    Ok(PruneReport {
        target,
        total,
        masked: already + need,
        newly_masked: need,
    })
}

/// [`prune_matrices`] over every prunable matrix of the model.
pub fn global_magnitude_prune(model: &mut LmModel, target: f64) -> Result<PruneReport> {
    let mut named = model.prunable_mut();
    let mut mats: Vec<&mut MaskedMatrix> = named.iter_mut().map(|(_, m)| &mut **m).collect();
    prune_matrices(&mut mats, target)
}

/// Fraction of prunable weights that are masked.
pub fn global_weight_sparsity(model: &LmModel) -> f64 {
    let (masked, total) = model
        .prunable()
        .iter()
        .fold((0, 0), |(a, b), (_, m)| (a + m.masked_count(), b + m.len()));
    if total == 0 {
        0.0
    } else {
        masked as f64 / total as f64
    }
}

pub const DEFAULT_FINETUNE_EPOCHS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub targets: Vec<f64>,
    pub finetune_epochs: usize,
}

impl PruneSchedule {
    /// 0.2, 0.3, ... up to `target`, with `target` appended when it is not
    /// on the 0.1 grid.
    pub fn up_to(target: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&target) || target == 0.0 {
            return Err(Error::Parameter(format!(
                "prune target must be in (0, 1], got {target}"
            )));
        }
        let mut targets = Vec::new();
        let mut k = 2;
        while (k as f64) / 10.0 <= target + 1e-9 {
            targets.push(k as f64 / 10.0);
            k += 1;
        }
        match targets.last() {
            Some(&last) if (last - target).abs() < 1e-9 => {
                *targets.last_mut().expect("non-empty") = target;
            }
            _ => targets.push(target),
        }
        Ok(Self {
            targets,
            finetune_epochs: DEFAULT_FINETUNE_EPOCHS,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("prune schedule is empty".into()));
        }
        let mut prev = 0.0;
        for &t in &self.targets {
            if !(0.0..=1.0).contains(&t) || t <= prev {
                return Err(Error::Config(format!(
                    "prune targets must increase strictly inside (0, 1], got {:?}",
                    self.targets
                )));
            }
            prev = t;
        }
        Ok(())
    }
}
