//! The language model: embedding lookup, a stack of recurrent layers without
//! skip connections, and a linear decoder tied to the embedding.
//!
//! The embedding is stored as an `E x V` column-major matrix, so column `k`
//! is the vector of token `k`. The encoder reads that column and the tied
//! decoder computes `logit[k] = column_k . h + bias[k]`.
//!
//! With EGRU layers every layer-to-layer and step-to-step hidden transfer is
//! an [`EventVector`]; only the first layer sees dense (embedding) input.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::egru::{
    egru_backward_seq_batch, egru_forward_step_batch, EgruGrads, EgruParams, EgruState, StepCache,
    DEFAULT_SURROGATE_SCALE, DEFAULT_SURROGATE_WIDTH,
};
use crate::error::{Error, Result};
use crate::lstm::{
    lstm_backward_seq_batch, lstm_forward_step_batch, LstmCache, LstmGrads, LstmParams, LstmState,
    DEFAULT_FORGET_BIAS,
};
use crate::tensor::{gemm, CellInput, DenseMatrix, EventVector, MaskedMatrix, OpCounter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Egru,
    Lstm,
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Egru => "egru",
            CellKind::Lstm => "lstm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub cell: CellKind,
    pub dropconnect: f64,
    pub dropout_in: f64,
    pub dropout_out: f64,
    pub tie_weights: bool,
    pub surrogate_scale: f64,
    pub surrogate_width: f64,
    pub forget_bias: f64,
    /// Half-width of the uniform embedding (and untied decoder) init.
    pub embed_init: f64,
    /// Project EGRU thresholds onto `[0, inf)` after every update.
    pub nonneg_thresholds: bool,
}

impl LmConfig {
    pub fn new(vocab_size: usize, cell: CellKind) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 128,
            num_layers: 3,
            cell,
            dropconnect: 0.0,
            dropout_in: 0.0,
            dropout_out: 0.0,
            tie_weights: true,
            surrogate_scale: DEFAULT_SURROGATE_SCALE,
            surrogate_width: DEFAULT_SURROGATE_WIDTH,
            forget_bias: DEFAULT_FORGET_BIAS,
            embed_init: 1.0,
            nonneg_thresholds: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "vocab_size, embed_dim and hidden_dim must be positive".into(),
            ));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropconnect) {
            return Err(Error::Config(format!(
                "dropconnect must be in [0, 1), got {}",
                self.dropconnect
            )));
        }
        for (name, p) in [
            ("dropout_in", self.dropout_in),
            ("dropout_out", self.dropout_out),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.surrogate_width > 0.0) {
            return Err(Error::Config("surrogate_width must be positive".into()));
        }
        if !(self.embed_init > 0.0 && self.embed_init.is_finite()) {
            return Err(Error::Config("embed_init must be positive".into()));
        }
        Ok(())
    }

    /// `(input_dim, hidden_dim)` of layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let input = if l == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        };
        let output = if l + 1 == self.num_layers {
            self.output_dim()
        } else {
            self.hidden_dim
        };
        (input, output)
    }

    /// Width of the last layer, which feeds the decoder.
    pub fn output_dim(&self) -> usize {
        if self.tie_weights {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Egru(EgruParams),
    Lstm(LstmParams),
}

impl Layer {
    pub fn matrices(&self) -> Vec<(&'static str, &MaskedMatrix)> {
        match self {
            Layer::Egru(p) => p.matrices().to_vec(),
            Layer::Lstm(p) => p.matrices().to_vec(),
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<(&'static str, &mut MaskedMatrix)> {
        match self {
            Layer::Egru(p) => p.matrices_mut().into_iter().collect(),
            Layer::Lstm(p) => p.matrices_mut().into_iter().collect(),
        }
    }

    pub fn vectors(&self) -> Vec<(&'static str, &Vec<f64>)> {
        match self {
            Layer::Egru(p) => p.vectors().to_vec(),
            Layer::Lstm(p) => p.vectors().to_vec(),
        }
    }

    pub fn vectors_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        match self {
            Layer::Egru(p) => p.vectors_mut().into_iter().collect(),
            Layer::Lstm(p) => p.vectors_mut().into_iter().collect(),
        }
    }

    pub fn recurrent_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Egru(_) => &EgruParams::RECURRENT,
            Layer::Lstm(_) => &LstmParams::RECURRENT,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            Layer::Egru(p) => p.hidden_dim(),
            Layer::Lstm(p) => p.hidden_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Egru(p) => p.input_dim(),
            Layer::Lstm(p) => p.input_dim(),
        }
    }

    fn zero_grads(&self) -> LayerGrads {
        match self {
            Layer::Egru(p) => LayerGrads::Egru(EgruGrads::for_params(p)),
            Layer::Lstm(p) => LayerGrads::Lstm(LstmGrads::for_params(p)),
        }
    }

    fn zero_state(&self) -> LayerState {
        match self {
            Layer::Egru(p) => LayerState::Egru(EgruState::zeros(p.hidden_dim())),
            Layer::Lstm(p) => LayerState::Lstm(LstmState::zeros(p.hidden_dim())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    Egru(EgruGrads),
    Lstm(LstmGrads),
}

impl LayerGrads {
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            LayerGrads::Egru(g) => g.tensors().to_vec(),
            LayerGrads::Lstm(g) => g.tensors().to_vec(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            LayerGrads::Egru(g) => g.tensors_mut().into_iter().collect(),
            LayerGrads::Lstm(g) => g.tensors_mut().into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerState {
    Egru(EgruState),
    Lstm(LstmState),
}

/// Recurrent state of every layer for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub layers: Vec<LayerState>,
}

/// Decay group of a trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// All matrices, including the embedding.
    Weights,
    /// Biases, thresholds and the decoder bias.
    Biases,
}

/// A mutable view of one trainable tensor.
pub struct ParamTensor<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub values: &'a mut [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmModel {
    pub config: LmConfig,
    /// `E x V`, column `k` is token `k`.
    pub embedding: DenseMatrix,
    pub layers: Vec<Layer>,
    /// Untied decoder, `out_dim x V`; `None` when tied to the embedding.
    pub decoder: Option<DenseMatrix>,
    pub decoder_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmGrads {
    pub embedding: DenseMatrix,
    pub layers: Vec<LayerGrads>,
    pub decoder: Option<DenseMatrix>,
    pub decoder_bias: Vec<f64>,
}

impl LmGrads {
    /// `(name, values)` in the same order as [`LmModel::params_mut`].
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![("embedding".to_string(), self.embedding.as_slice())];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, v) in layer.tensors() {
                out.push((format!("layers.{l}.{name}"), v));
            }
        }
        if let Some(d) = &self.decoder {
            out.push(("decoder".to_string(), d.as_slice()));
        }
        out.push(("decoder_bias".to_string(), &self.decoder_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![("embedding".to_string(), self.embedding.as_mut_slice())];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, v) in layer.tensors_mut() {
                out.push((format!("layers.{l}.{name}"), v));
            }
        }
        if let Some(d) = &mut self.decoder {
            out.push(("decoder".to_string(), d.as_mut_slice()));
        }
        out.push(("decoder_bias".to_string(), &mut self.decoder_bias));
        out
    }

    fn add_assign(&mut self, other: &LmGrads) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// One DropConnect draw for the hidden-to-hidden matrices of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DropConnectSample {
    /// `(matrix name, column-major keep mask)`
    pub masks: Vec<(&'static str, Vec<bool>)>,
    pub scale: f64,
}

impl DropConnectSample {
    /// Copy of `layer` with the sampled recurrent weights dropped and the
    /// survivors scaled by `1 / (1 - p)`; prune masks are preserved.
    pub fn apply(&self, layer: &Layer) -> Result<Layer> {
        let mut out = layer.clone();
        for (name, m) in out.matrices_mut() {
            if let Some((_, keep)) = self.masks.iter().find(|(n, _)| *n == name) {
                *m = m.scaled_by_mask(keep, self.scale)?;
            }
        }
        Ok(out)
    }

    /// Maps gradients taken w.r.t. the dropped weights back to the originals.
    pub fn scale_gradients(&self, grads: &mut LayerGrads) {
        for (name, g) in grads.tensors_mut() {
            if let Some((_, keep)) = self.masks.iter().find(|(n, _)| *n == name) {
                for (v, &k) in g.iter_mut().zip(keep) {
                    *v = if k { *v * self.scale } else { 0.0 };
                }
            }
        }
    }
}

/// Draws one Bernoulli(1 - p) keep mask per recurrent matrix of `layer`.
pub fn sample_dropconnect(layer: &Layer, p: f64, rng: &mut impl Rng) -> Result<DropConnectSample> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "DropConnect probability must be in [0, 1), got {p}"
        )));
    }
    let recurrent = layer.recurrent_names();
    let masks = layer
        .matrices()
        .into_iter()
        .filter(|(name, _)| recurrent.contains(name))
        .map(|(name, m)| {
            let keep = (0..m.len())
                .map(|_| p == 0.0 || rng.random::<f64>() >= p)
                .collect();
            (name, keep)
        })
        .collect();
    Ok(DropConnectSample {
        masks,
        scale: 1.0 / (1.0 - p),
    })
}

/// Inverted-dropout scale vector: `0` with probability `p`, else `1 / (1 - p)`.
fn dropout_scales(dim: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; dim];
    }
    if p >= 1.0 {
        return vec![0.0; dim];
    }
    let keep = 1.0 / (1.0 - p);
    (0..dim)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Contiguous batch chunks whose gradients are summed in order.
pub const GRAD_CHUNKS: usize = 4;

/// How a batch is run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Dropout and DropConnect active.
    pub train: bool,
    pub compute_grads: bool,
    /// Worker threads. Results do not depend on it: eval arithmetic is
    /// per stream, and gradient runs always use [`GRAD_CHUNKS`] chunks.
    pub threads: usize,
    /// Count decoder multiplies in the op counter.
    pub include_readout: bool,
    pub keep_caches: bool,
    pub keep_logits: bool,
}

impl RunOptions {
    pub fn eval() -> Self {
        Self {
            train: false,
            compute_grads: false,
            threads: 1,
            include_readout: false,
            keep_caches: false,
            keep_logits: false,
        }
    }

    pub fn train() -> Self {
        Self {
            train: true,
            compute_grads: true,
            ..Self::eval()
        }
    }
}

/// Per-layer caches of a batch, indexed `[b][t]`.
#[derive(Debug, Clone)]
pub enum LayerCaches {
    Egru(Vec<Vec<StepCache>>),
    Lstm(Vec<Vec<LstmCache>>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActivityCount {
    pub active: u64,
    pub total: u64,
}

#[derive(Debug)]
pub struct BatchOutput {
    /// Cross-entropy of every prediction, `[b][t]`.
    pub token_losses: Vec<Vec<f64>>,
    pub grads: Option<LmGrads>,
    pub ops: OpCounter,
    /// Output activity of every layer (EGRU only; LSTM layers stay zero).
    pub activity: Vec<ActivityCount>,
    pub caches: Option<Vec<LayerCaches>>,
    pub logits: Option<Vec<Vec<Vec<f64>>>>,
}

impl BatchOutput {
    /// Sum of token losses, accumulated stream by stream in order.
    pub fn loss_sum(&self) -> f64 {
        let mut s = 0.0;
        for row in &self.token_losses {
            for &l in row {
                s += l;
            }
        }
        s
    }

    pub fn tokens(&self) -> usize {
        self.token_losses.iter().map(Vec::len).sum()
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum() / self.tokens().max(1) as f64
    }
}

impl LmModel {
    pub fn new(config: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (v, e) = (config.vocab_size, config.embed_dim);
        let a = config.embed_init;
        let embedding = DenseMatrix::from_fn(e, v, |_, _| rng.random_range(-a..a));
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let (d, n) = config.layer_dims(l);
            layers.push(match config.cell {
                CellKind::Egru => {
                    let mut p = EgruParams::init(d, n, rng);
                    p.surrogate_scale = config.surrogate_scale;
                    p.surrogate_width = config.surrogate_width;
                    Layer::Egru(p)
                }
                CellKind::Lstm => Layer::Lstm(LstmParams::init(d, n, config.forget_bias, rng)),
            });
        }
        let decoder = (!config.tie_weights)
            .then(|| DenseMatrix::from_fn(config.output_dim(), v, |_, _| rng.random_range(-a..a)));
        Ok(Self {
            decoder_bias: vec![0.0; v],
            config,
            embedding,
            layers,
            decoder,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn zero_state(&self) -> ModelState {
        ModelState {
            layers: self.layers.iter().map(Layer::zero_state).collect(),
        }
    }

    pub fn zero_grads(&self) -> LmGrads {
        LmGrads {
            embedding: DenseMatrix::zeros(self.embedding.rows(), self.embedding.cols()),
            layers: self.layers.iter().map(Layer::zero_grads).collect(),
            decoder: self
                .decoder
                .as_ref()
                .map(|d| DenseMatrix::zeros(d.rows(), d.cols())),
            decoder_bias: vec![0.0; self.decoder_bias.len()],
        }
    }

    /// Decoder weights: the embedding when tied.
    pub fn decoder_weights(&self) -> &DenseMatrix {
        self.decoder.as_ref().unwrap_or(&self.embedding)
    }

    /// Every trainable tensor in canonical order.
    pub fn params_mut(&mut self) -> Vec<ParamTensor<'_>> {
        let mut out = vec![ParamTensor {
            name: "embedding".into(),
            group: ParamGroup::Weights,
            values: self.embedding.as_mut_slice(),
        }];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let (mats, vecs): (Vec<_>, Vec<_>) = match layer {
                Layer::Egru(p) => split_egru(p),
                Layer::Lstm(p) => split_lstm(p),
            };
            for (name, m) in mats {
                out.push(ParamTensor {
                    name: format!("layers.{l}.{name}"),
                    group: ParamGroup::Weights,
                    values: m.values_mut(),
                });
            }
            for (name, v) in vecs {
                out.push(ParamTensor {
                    name: format!("layers.{l}.{name}"),
                    group: ParamGroup::Biases,
                    values: v.as_mut_slice(),
                });
            }
        }
        if let Some(d) = &mut self.decoder {
            out.push(ParamTensor {
                name: "decoder".into(),
                group: ParamGroup::Weights,
                values: d.as_mut_slice(),
            });
        }
        out.push(ParamTensor {
            name: "decoder_bias".into(),
            group: ParamGroup::Biases,
            values: &mut self.decoder_bias,
        });
        out
    }

    /// Prunable matrices (all recurrent and input weights), in canonical order.
    pub fn prunable(&self) -> Vec<(String, &MaskedMatrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.matrices() {
                out.push((format!("layers.{l}.{name}"), m));
            }
        }
        out
    }

    pub fn prunable_mut(&mut self) -> Vec<(String, &mut MaskedMatrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, m) in layer.matrices_mut() {
                out.push((format!("layers.{l}.{name}"), m));
            }
        }
        out
    }

    /// Sets every masked weight to exactly zero.
    pub fn enforce_masks(&mut self) {
        for (_, m) in self.prunable_mut() {
            m.apply_mask();
        }
    }

    /// Re-applies prune masks and, when configured, clamps EGRU thresholds
    /// at zero.
    pub fn enforce_constraints(&mut self) {
        self.enforce_masks();
        if self.config.nonneg_thresholds {
            for layer in &mut self.layers {
                if let Layer::Egru(p) = layer {
                    p.thresholds.iter_mut().for_each(|t| *t = t.max(0.0));
                }
            }
        }
    }

    /// Zeroes gradient entries of masked weights.
    pub fn mask_gradients(&self, grads: &mut LmGrads) {
        for (layer, lg) in self.layers.iter().zip(&mut grads.layers) {
            let mats = layer.matrices();
            for (name, g) in lg.tensors_mut() {
                if let Some((_, m)) = mats.iter().find(|(n, _)| *n == name) {
                    m.mask_gradient(g);
                }
            }
        }
    }

    /// Looks up token vectors. With `dropout = Some(rng)` one input-dropout
    /// mask is drawn and shared by every position of the sequence.
    pub fn embed(
        &self,
        tokens: &[u32],
        dropout: Option<&mut dyn rand::RngCore>,
    ) -> Result<Vec<Vec<f64>>> {
        let scales = dropout.map(|rng| {
            dropout_scales(
                self.config.embed_dim,
                self.config.dropout_in,
                &mut &mut *rng,
            )
        });
        tokens
            .iter()
            .map(|&t| {
                let mut v = self.embedding_column(t)?.to_vec();
                if let Some(s) = &scales {
                    v.iter_mut().zip(s).for_each(|(x, k)| *x *= k);
                }
                Ok(v)
            })
            .collect()
    }

    fn embedding_column(&self, token: u32) -> Result<&[f64]> {
        if (token as usize) < self.config.vocab_size {
            Ok(self.embedding.column(token as usize))
        } else {
            Err(Error::Data(format!(
                "token id {token} out of range for vocabulary of {}",
                self.config.vocab_size
            )))
        }
    }

    /// Runs one `B x L` segment from `states` (updated in place to the final
    /// states). In training mode the dropout and DropConnect masks are drawn
    /// from `rng` before the batch is split into chunks, and gradient chunks
    /// are summed in a fixed order, so results do not depend on `threads`.
    pub fn run_batch(
        &self,
        batch: &Batch,
        states: &mut [ModelState],
        opts: &RunOptions,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<BatchOutput> {
        let bsz = batch.batch_size();
        if states.len() != bsz || batch.targets.len() != bsz {
            return Err(Error::Usage(format!(
                "batch of {bsz} streams with {} states and {} target rows",
                states.len(),
                batch.targets.len()
            )));
        }
        let steps = batch.seq_len();
        for (inp, tgt) in batch.inputs.iter().zip(&batch.targets) {
            if inp.len() != steps || tgt.len() != steps {
                return Err(Error::Usage("ragged batch".into()));
            }
            for &t in inp.iter().chain(tgt) {
                if t as usize >= self.config.vocab_size {
                    return Err(Error::Data(format!(
                        "token id {t} out of range for vocabulary of {}",
                        self.config.vocab_size
                    )));
                }
            }
        }

        let cfg = &self.config;
        let (effective, samples, in_scales, out_scales) = match (opts.train, rng) {
            (true, Some(rng)) => {
                let mut rng = rng;
                let mut samples = Vec::new();
                let mut layers = Vec::new();
                for layer in &self.layers {
                    if cfg.dropconnect > 0.0 {
                        let s = sample_dropconnect(layer, cfg.dropconnect, &mut rng)?;
                        layers.push(s.apply(layer)?);
                        samples.push(Some(s));
                    } else {
                        layers.push(layer.clone());
                        samples.push(None);
                    }
                }
                let ins: Vec<Vec<f64>> = (0..bsz)
                    .map(|_| dropout_scales(cfg.embed_dim, cfg.dropout_in, &mut rng))
                    .collect();
                let outs: Vec<Vec<f64>> = (0..bsz)
                    .map(|_| dropout_scales(cfg.output_dim(), cfg.dropout_out, &mut rng))
                    .collect();
                (Some(layers), samples, Some(ins), Some(outs))
            }
            (true, None) => return Err(Error::Usage("training mode needs an rng".into())),
            (false, _) => (None, vec![None; self.layers.len()], None, None),
        };
        let layers: &[Layer] = effective.as_deref().unwrap_or(&self.layers);

        // Gradient runs use a chunk layout that depends only on the batch
        // size, so the summation order does not change with `threads`.
        let parts = if opts.compute_grads {
            GRAD_CHUNKS
        } else {
            opts.threads.max(1)
        };
        let ranges = chunk_ranges(bsz, parts.min(bsz.max(1)));
        let total_tokens = (bsz * steps).max(1);
        let chunk_states: Vec<Vec<ModelState>> =
            ranges.iter().map(|r| states[r.clone()].to_vec()).collect();

        let run = |(range, st): (Range<usize>, Vec<ModelState>)| {
            let job = ChunkJob {
                model: self,
                layers,
                inputs: &batch.inputs[range.clone()],
                targets: &batch.targets[range.clone()],
                in_scales: in_scales.as_ref().map(|s| &s[range.clone()]),
                out_scales: out_scales.as_ref().map(|s| &s[range.clone()]),
                states: st,
                opts,
                loss_scale: 1.0 / total_tokens as f64,
            };
            job.run()
        };
        let jobs: Vec<(Range<usize>, Vec<ModelState>)> =
            ranges.iter().cloned().zip(chunk_states).collect();
        let workers = opts.threads.max(1).min(jobs.len());
        let results: Vec<Result<ChunkResult>> = if workers <= 1 {
            jobs.into_iter().map(run).collect()
        } else {
            let mut pending = jobs.into_iter();
            let groups: Vec<Vec<_>> = chunk_ranges(ranges.len(), workers)
                .into_iter()
                .map(|g| pending.by_ref().take(g.len()).collect())
                .collect();
            std::thread::scope(|scope| {
                let handles: Vec<_> = groups
                    .into_iter()
                    .map(|group| {
                        scope.spawn(move || group.into_iter().map(run).collect::<Vec<_>>())
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("worker thread panicked"))
                    .collect()
            })
        };

        let mut out = BatchOutput {
            token_losses: Vec::with_capacity(bsz),
            grads: None,
            ops: OpCounter::new(),
            activity: vec![ActivityCount::default(); self.layers.len()],
            caches: opts.keep_caches.then(Vec::new),
            logits: opts.keep_logits.then(Vec::new),
        };
        for (range, res) in ranges.into_iter().zip(results) {
            let res = res?;
            for (slot, s) in states[range].iter_mut().zip(res.states) {
                *slot = s;
            }
            out.token_losses.extend(res.token_losses);
            out.ops.merge(res.ops);
            for (a, b) in out.activity.iter_mut().zip(&res.activity) {
                a.active += b.active;
                a.total += b.total;
            }
            if let Some(g) = res.grads {
                match &mut out.grads {
                    None => out.grads = Some(g),
                    Some(acc) => acc.add_assign(&g),
                }
            }
            if let (Some(all), Some(c)) = (&mut out.caches, res.caches) {
                if all.is_empty() {
                    *all = c;
                } else {
                    for (a, b) in all.iter_mut().zip(c) {
                        match (a, b) {
                            (LayerCaches::Egru(a), LayerCaches::Egru(b)) => a.extend(b),
                            (LayerCaches::Lstm(a), LayerCaches::Lstm(b)) => a.extend(b),
                            _ => unreachable!("layer kinds are fixed per model"),
                        }
                    }
                }
            }
            if let (Some(all), Some(l)) = (&mut out.logits, res.logits) {
                all.extend(l);
            }
        }
        if let Some(g) = &mut out.grads {
            for (sample, lg) in samples.iter().zip(&mut g.layers) {
                if let Some(s) = sample {
                    s.scale_gradients(lg);
                }
            }
        }
        Ok(out)
    }
}

type EgruSplit<'a> = (
    Vec<(&'static str, &'a mut MaskedMatrix)>,
    Vec<(&'static str, &'a mut Vec<f64>)>,
);

fn split_egru(p: &mut EgruParams) -> EgruSplit<'_> {
    (
        vec![
            ("w_ux", &mut p.w_ux),
            ("w_uy", &mut p.w_uy),
            ("w_rx", &mut p.w_rx),
            ("w_ry", &mut p.w_ry),
            ("w_zx", &mut p.w_zx),
            ("w_zy", &mut p.w_zy),
        ],
        vec![
            ("b_u", &mut p.b_u),
            ("b_r", &mut p.b_r),
            ("b_z", &mut p.b_z),
            ("thresholds", &mut p.thresholds),
        ],
    )
}

fn split_lstm(p: &mut LstmParams) -> EgruSplit<'_> {
    (
        vec![
            ("w_ix", &mut p.w_ix),
            ("w_fx", &mut p.w_fx),
            ("w_gx", &mut p.w_gx),
            ("w_ox", &mut p.w_ox),
            ("w_ih", &mut p.w_ih),
            ("w_fh", &mut p.w_fh),
            ("w_gh", &mut p.w_gh),
            ("w_oh", &mut p.w_oh),
        ],
        vec![
            ("b_i", &mut p.b_i),
            ("b_f", &mut p.b_f),
            ("b_g", &mut p.b_g),
            ("b_o", &mut p.b_o),
        ],
    )
}

/// Splits `0..n` into `parts` contiguous, nearly equal ranges.
fn chunk_ranges(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for k in 0..parts {
        let len = base + usize::from(k < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

struct ChunkJob<'a> {
    model: &'a LmModel,
    layers: &'a [Layer],
    inputs: &'a [Vec<u32>],
    targets: &'a [Vec<u32>],
    in_scales: Option<&'a [Vec<f64>]>,
    out_scales: Option<&'a [Vec<f64>]>,
    states: Vec<ModelState>,
    opts: &'a RunOptions,
    loss_scale: f64,
}

struct ChunkResult {
    token_losses: Vec<Vec<f64>>,
    states: Vec<ModelState>,
    grads: Option<LmGrads>,
    ops: OpCounter,
    activity: Vec<ActivityCount>,
    caches: Option<Vec<LayerCaches>>,
    logits: Option<Vec<Vec<Vec<f64>>>>,
}

/// Outputs of one layer over a chunk, `[b][t]`.
enum LayerOutputs {
    Events(Vec<Vec<EventVector>>),
    Dense(Vec<Vec<Vec<f64>>>),
}

impl LayerOutputs {
    fn input(&self, b: usize, t: usize) -> CellInput<'_> {
        match self {
            LayerOutputs::Events(e) => CellInput::Events(&e[b][t]),
            LayerOutputs::Dense(d) => CellInput::Dense(&d[b][t]),
        }
    }

    fn dense(&self, b: usize, t: usize) -> Vec<f64> {
        self.input(b, t).to_dense()
    }
}

impl ChunkJob<'_> {
    fn run(mut self) -> Result<ChunkResult> {
        let bsz = self.inputs.len();
        let steps = self.inputs.first().map_or(0, Vec::len);
        let model = self.model;
        let mut ops = OpCounter::new();
        let mut activity = vec![ActivityCount::default(); self.layers.len()];

        // embedding lookup (+ input dropout)
        let embedded: Vec<Vec<Vec<f64>>> = (0..bsz)
            .map(|b| {
                self.inputs[b]
                    .iter()
                    .map(|&tok| {
                        let col = model.embedding.column(tok as usize);
                        match self.in_scales {
                            Some(s) => col.iter().zip(&s[b]).map(|(x, k)| x * k).collect(),
                            None => col.to_vec(),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut current = LayerOutputs::Dense(embedded);
        let mut all_caches: Vec<LayerCaches> = Vec::with_capacity(self.layers.len());

        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Egru(p) => {
                    let mut st: Vec<EgruState> = self
                        .states
                        .iter()
                        .map(|s| match &s.layers[l] {
                            LayerState::Egru(s) => Ok(s.clone()),
                            _ => Err(Error::Usage("state does not match layer kind".into())),
                        })
                        .collect::<Result<_>>()?;
                    let mut caches: Vec<Vec<StepCache>> = vec![Vec::with_capacity(steps); bsz];
                    let mut outs: Vec<Vec<EventVector>> = vec![Vec::with_capacity(steps); bsz];
                    for t in 0..steps {
                        let xs: Vec<CellInput> = (0..bsz).map(|b| current.input(b, t)).collect();
                        let res = egru_forward_step_batch(p, &xs, &st, &mut ops)?;
                        for (b, (next, cache)) in res.into_iter().enumerate() {
                            activity[l].active += next.y.nnz() as u64;
                            activity[l].total += next.y.dim() as u64;
                            outs[b].push(next.y.clone());
                            caches[b].push(cache);
                            st[b] = next;
                        }
                    }
                    for (s, new) in self.states.iter_mut().zip(st) {
                        s.layers[l] = LayerState::Egru(new);
                    }
                    all_caches.push(LayerCaches::Egru(caches));
                    current = LayerOutputs::Events(outs);
                }
                Layer::Lstm(p) => {
                    let mut st: Vec<LstmState> = self
                        .states
                        .iter()
                        .map(|s| match &s.layers[l] {
                            LayerState::Lstm(s) => Ok(s.clone()),
                            _ => Err(Error::Usage("state does not match layer kind".into())),
                        })
                        .collect::<Result<_>>()?;
                    let mut caches: Vec<Vec<LstmCache>> = vec![Vec::with_capacity(steps); bsz];
                    let mut outs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(steps); bsz];
                    for t in 0..steps {
                        let xs: Vec<CellInput> = (0..bsz).map(|b| current.input(b, t)).collect();
                        let res = lstm_forward_step_batch(p, &xs, &st, &mut ops)?;
                        for (b, (next, cache)) in res.into_iter().enumerate() {
                            outs[b].push(next.h.clone());
                            caches[b].push(cache);
                            st[b] = next;
                        }
                    }
                    for (s, new) in self.states.iter_mut().zip(st) {
                        s.layers[l] = LayerState::Lstm(new);
                    }
                    all_caches.push(LayerCaches::Lstm(caches));
                    current = LayerOutputs::Dense(outs);
                }
            }
        }

        // decoder over all N = bsz * steps positions as matrix products
        let dec = model.decoder_weights();
        let vocab = model.config.vocab_size;
        let out_dim = dec.rows();
        let n_pos = bsz * steps;
        // hidden[n * out_dim + d], n = b * steps + t
        let mut hidden = Vec::with_capacity(n_pos * out_dim);
        for b in 0..bsz {
            for t in 0..steps {
                let mut h = current.dense(b, t);
                if let Some(s) = self.out_scales {
                    h.iter_mut().zip(&s[b]).for_each(|(x, k)| *x *= k);
                }
                hidden.extend_from_slice(&h);
            }
        }
        drop(current);
        // logits[n * vocab + k] = dec[:, k] . hidden[n]
        let mut logits = vec![0.0; n_pos * vocab];
        gemm(
            (n_pos, out_dim, vocab),
            (&hidden, out_dim, 1),
            (dec.as_slice(), 1, out_dim),
            0.0,
            (&mut logits, vocab, 1),
        );
        if self.opts.include_readout {
            ops.add(n_pos * vocab * out_dim);
        }

        let mut token_losses = vec![Vec::with_capacity(steps); bsz];
        let mut keep_logits: Option<Vec<Vec<Vec<f64>>>> = self
            .opts
            .keep_logits
            .then(|| vec![Vec::with_capacity(steps); bsz]);
        let mut grads = self.opts.compute_grads.then(|| model.zero_grads());
        for (n, row) in logits.chunks_exact_mut(vocab.max(1)).enumerate() {
            let (b, t) = (n / steps, n % steps);
            for (lg, bias) in row.iter_mut().zip(&model.decoder_bias) {
                *lg += bias;
            }
            let target = self.targets[b][t] as usize;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &lg in row.iter() {
                z += (lg - max).exp();
            }
            let lse = max + z.ln();
            let loss = lse - row[target];
            if !loss.is_finite() {
                return Err(Error::Numeric("non-finite cross-entropy".into()));
            }
            token_losses[b].push(loss);
            if let Some(kl) = &mut keep_logits {
                kl[b].push(row.to_vec());
            }
            if let Some(g) = &mut grads {
                // row becomes d loss / d logits
                for (k, lg) in row.iter_mut().enumerate() {
                    let mut d = (*lg - lse).exp();
                    if k == target {
                        d -= 1.0;
                    }
                    *lg = d * self.loss_scale;
                    g.decoder_bias[k] += *lg;
                }
            }
        }

        let mut grad_top: Vec<Vec<Vec<f64>>> = Vec::new();
        if let Some(g) = &mut grads {
            let mut g_hidden = vec![0.0; n_pos * out_dim];
            gemm(
                (n_pos, vocab, out_dim),
                (&logits, vocab, 1),
                (dec.as_slice(), out_dim, 1),
                0.0,
                (&mut g_hidden, out_dim, 1),
            );
            let g_dec = g.decoder.as_mut().unwrap_or(&mut g.embedding);
            gemm(
                (out_dim, n_pos, vocab),
                (&hidden, 1, out_dim),
                (&logits, vocab, 1),
                1.0,
                (g_dec.as_mut_slice(), 1, out_dim),
            );
            let mut rows = g_hidden.chunks_exact(out_dim.max(1));
            for b in 0..bsz {
                let mut per_t = Vec::with_capacity(steps);
                for _ in 0..steps {
                    let mut g_h = rows.next().expect("n_pos rows").to_vec();
                    if let Some(s) = self.out_scales {
                        g_h.iter_mut().zip(&s[b]).for_each(|(x, k)| *x *= k);
                    }
                    per_t.push(g_h);
                }
                grad_top.push(per_t);
            }
        }

        if let Some(g) = &mut grads {
            let mut upstream = grad_top;
            for l in (0..self.layers.len()).rev() {
                upstream = match (&self.layers[l], &all_caches[l], &mut g.layers[l]) {
                    (Layer::Egru(p), LayerCaches::Egru(c), LayerGrads::Egru(lg)) => {
                        egru_backward_seq_batch(p, c, &upstream, lg)?
                    }
                    (Layer::Lstm(p), LayerCaches::Lstm(c), LayerGrads::Lstm(lg)) => {
                        lstm_backward_seq_batch(p, c, &upstream, lg)?
                    }
                    _ => unreachable!("layer kinds are fixed per model"),
                };
            }
            for b in 0..bsz {
                for t in 0..steps {
                    let mut gx = std::mem::take(&mut upstream[b][t]);
                    if let Some(s) = self.in_scales {
                        gx.iter_mut().zip(&s[b]).for_each(|(x, k)| *x *= k);
                    }
                    let col = g.embedding.column_mut(self.inputs[b][t] as usize);
                    for (c, v) in col.iter_mut().zip(&gx) {
                        *c += v;
                    }
                }
            }
        }

        Ok(ChunkResult {
            token_losses,
            states: self.states,
            grads,
            ops,
            activity,
            caches: self.opts.keep_caches.then_some(all_caches),
            logits: keep_logits,
        })
    }
}

/// Eval-mode forward from zero state: logits `[b][t][V]` and the mean
/// cross-entropy over all `B * L` predictions.
pub fn lm_forward(model: &LmModel, batch: &Batch) -> Result<(Vec<Vec<Vec<f64>>>, f64)> {
    let mut states = vec![model.zero_state(); batch.batch_size()];
    let opts = RunOptions {
        keep_logits: true,
        ..RunOptions::eval()
    };
    let out = model.run_batch(batch, &mut states, &opts, None)?;
    let loss = out.mean_loss();
    Ok((out.logits.unwrap_or_default(), loss))
}
