//! AdamW with decoupled, per-group weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LmGrads, LmModel, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay applied to matrices (embedding included).
    pub decay_w: f64,
    /// Decay applied to biases, thresholds and the decoder bias.
    pub decay_b: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_w: 0.0,
            decay_b: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay_w >= 0.0
            && self.decay_b >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update:
    /// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + decay * theta)`.
    ///
    /// Gradients of pruned weights are zeroed first and the model
    /// constraints (masks, threshold floor) are re-applied afterwards, so
    /// pruned weights stay exactly zero.
    pub fn step(&mut self, model: &mut LmModel, grads: &mut LmGrads) -> Result<()> {
        model.mask_gradients(grads);
        let cfg = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let grad_tensors = grads.tensors();
        let mut params = model.params_mut();
        if params.len() != grad_tensors.len() {
            return Err(Error::Usage(
                "gradient layout does not match the model".into(),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            self.v = self.m.clone();
        }
        for (k, (p, (gname, g))) in params.iter_mut().zip(&grad_tensors).enumerate() {
            if p.name != *gname || p.values.len() != g.len() || self.m[k].len() != g.len() {
                return Err(Error::Usage(format!(
                    "gradient {gname} does not match parameter {}",
                    p.name
                )));
            }
            let decay = match p.group {
                ParamGroup::Weights => cfg.decay_w,
                ParamGroup::Biases => cfg.decay_b,
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                let gi = g[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let theta = p.values[i];
                let updated = theta - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * theta);
                if !updated.is_finite() {
                    return Err(Error::Numeric(format!(
                        "parameter {} became non-finite",
                        p.name
                    )));
                }
                p.values[i] = updated;
            }
        }
        drop(params);
        model.enforce_constraints();
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut LmGrads, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (_, g) in grads.tensors() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("gradient norm is not finite".into()));
    }
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.tensors_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}
