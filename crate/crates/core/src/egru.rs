//! The event-based GRU cell.
//!
//! Each unit keeps a local state `c` and communicates `y`, which is nonzero
//! only where the pre-reset state `c~` reaches the unit's threshold:
//!
//! ```text
//! u  = sigmoid(W_ux x + W_uy y' + b_u)
//! r  = sigmoid(W_rx x + W_ry y' + b_r)
//! z  = tanh(W_zx x + W_zy (r * y') + b_z)
//! c~ = u * z + (1 - u) * c'
//! y  = c~ * H(c~ - theta)
//! c  = c~ - theta * H(c~ - theta)
//! ```
//!
//! where `'` marks the previous step. Every product with `y'` is an
//! event-driven gather. The Heaviside step gets a triangular surrogate
//! derivative centred on the threshold crossing in the backward pass.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::tensor::{
    accumulate_outer_batch, sigmoid, CellInput, DenseMatrix, EventVector, MaskedMatrix, OpCounter,
    OwnedInput,
};

pub const DEFAULT_SURROGATE_SCALE: f64 = 1.0;
pub const DEFAULT_SURROGATE_WIDTH: f64 = 1.0;

/// Step function with `H(0) = 1`.
#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Triangular pseudo-derivative `scale * max(0, 1 - |u| / width)`.
pub fn surrogate_heaviside_grad(u: f64, scale: f64, width: f64) -> Result<f64> {
    if width <= 0.0 || !width.is_finite() {
        return Err(Error::Parameter(format!(
            "surrogate width must be positive, got {width}"
        )));
    }
    Ok(surrogate(u, scale, width))
}

#[inline]
fn surrogate(u: f64, scale: f64, width: f64) -> f64 {
    scale * (1.0 - u.abs() / width).max(0.0)
}

/// Weights, biases and thresholds of one EGRU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EgruParams {
    pub w_ux: MaskedMatrix,
    pub w_uy: MaskedMatrix,
    pub w_rx: MaskedMatrix,
    pub w_ry: MaskedMatrix,
    pub w_zx: MaskedMatrix,
    pub w_zy: MaskedMatrix,
    pub b_u: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_z: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub surrogate_scale: f64,
    pub surrogate_width: f64,
}

impl EgruParams {
    /// All-zero weights and biases, zero thresholds, default surrogate.
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let (d, n) = (input_dim, hidden_dim);
        Self {
            w_ux: MaskedMatrix::zeros(n, d),
            w_uy: MaskedMatrix::zeros(n, n),
            w_rx: MaskedMatrix::zeros(n, d),
            w_ry: MaskedMatrix::zeros(n, n),
            w_zx: MaskedMatrix::zeros(n, d),
            w_zy: MaskedMatrix::zeros(n, n),
            b_u: vec![0.0; n],
            b_r: vec![0.0; n],
            b_z: vec![0.0; n],
            thresholds: vec![0.0; n],
            surrogate_scale: DEFAULT_SURROGATE_SCALE,
            surrogate_width: DEFAULT_SURROGATE_WIDTH,
        }
    }

    /// Weights uniform in `±1/sqrt(n)`, zero biases, thresholds uniform in `[0, 1)`.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut uniform = |rows, cols| {
            MaskedMatrix::new(DenseMatrix::from_fn(rows, cols, |_, _| {
                rng.random_range(-bound..bound)
            }))
        };
        let (d, n) = (input_dim, hidden_dim);
        let mut p = Self {
            w_ux: uniform(n, d),
            w_uy: uniform(n, n),
            w_rx: uniform(n, d),
            w_ry: uniform(n, n),
            w_zx: uniform(n, d),
            w_zy: uniform(n, n),
            ..Self::zeros(d, n)
        };
        p.thresholds = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_ux.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ux.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.hidden_dim(), self.input_dim());
        for w in [&self.w_ux, &self.w_rx, &self.w_zx] {
            check_dim("EGRU input weight rows", n, w.rows())?;
            check_dim("EGRU input weight cols", d, w.cols())?;
        }
        for w in [&self.w_uy, &self.w_ry, &self.w_zy] {
            check_dim("EGRU recurrent weight rows", n, w.rows())?;
            check_dim("EGRU recurrent weight cols", n, w.cols())?;
        }
        for b in [&self.b_u, &self.b_r, &self.b_z, &self.thresholds] {
            check_dim("EGRU bias", n, b.len())?;
        }
        if !self.thresholds.iter().all(|t| t.is_finite()) {
            return Err(Error::Numeric("non-finite threshold".into()));
        }
        if !(self.surrogate_width > 0.0) || !self.surrogate_scale.is_finite() {
            return Err(Error::Parameter(format!(
                "surrogate width must be positive (got {}), scale finite (got {})",
                self.surrogate_width, self.surrogate_scale
            )));
        }
        Ok(())
    }

    /// `(name, matrix)` in canonical order.
    pub fn matrices(&self) -> [(&'static str, &MaskedMatrix); 6] {
        [
            ("w_ux", &self.w_ux),
            ("w_uy", &self.w_uy),
            ("w_rx", &self.w_rx),
            ("w_ry", &self.w_ry),
            ("w_zx", &self.w_zx),
            ("w_zy", &self.w_zy),
        ]
    }

    pub fn matrices_mut(&mut self) -> [(&'static str, &mut MaskedMatrix); 6] {
        [
            ("w_ux", &mut self.w_ux),
            ("w_uy", &mut self.w_uy),
            ("w_rx", &mut self.w_rx),
            ("w_ry", &mut self.w_ry),
            ("w_zx", &mut self.w_zx),
            ("w_zy", &mut self.w_zy),
        ]
    }

    pub fn vectors(&self) -> [(&'static str, &Vec<f64>); 4] {
        [
            ("b_u", &self.b_u),
            ("b_r", &self.b_r),
            ("b_z", &self.b_z),
            ("thresholds", &self.thresholds),
        ]
    }

    pub fn vectors_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 4] {
        [
            ("b_u", &mut self.b_u),
            ("b_r", &mut self.b_r),
            ("b_z", &mut self.b_z),
            ("thresholds", &mut self.thresholds),
        ]
    }

    /// Names of the hidden-to-hidden matrices (DropConnect targets).
    pub const RECURRENT: [&'static str; 3] = ["w_uy", "w_ry", "w_zy"];
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgruState {
    pub c: Vec<f64>,
    pub y: EventVector,
}

impl EgruState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            c: vec![0.0; hidden_dim],
            y: EventVector::empty(hidden_dim),
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: OwnedInput,
    pub y_prev: EventVector,
    pub c_prev: Vec<f64>,
    /// `r * y_prev`, as events.
    pub ry: EventVector,
    pub u: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    /// Pre-reset state.
    pub c_tilde: Vec<f64>,
    pub spikes: Vec<bool>,
}

/// Gradients, same shapes and storage order as [`EgruParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EgruGrads {
    pub w_ux: DenseMatrix,
    pub w_uy: DenseMatrix,
    pub w_rx: DenseMatrix,
    pub w_ry: DenseMatrix,
    pub w_zx: DenseMatrix,
    pub w_zy: DenseMatrix,
    pub b_u: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_z: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl EgruGrads {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let (d, n) = (input_dim, hidden_dim);
        Self {
            w_ux: DenseMatrix::zeros(n, d),
            w_uy: DenseMatrix::zeros(n, n),
            w_rx: DenseMatrix::zeros(n, d),
            w_ry: DenseMatrix::zeros(n, n),
            w_zx: DenseMatrix::zeros(n, d),
            w_zy: DenseMatrix::zeros(n, n),
            b_u: vec![0.0; n],
            b_r: vec![0.0; n],
            b_z: vec![0.0; n],
            thresholds: vec![0.0; n],
        }
    }

    pub fn for_params(p: &EgruParams) -> Self {
        Self::zeros(p.input_dim(), p.hidden_dim())
    }

    /// Flat views in the same order as `matrices()` then `vectors()`.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 10] {
        [
            ("w_ux", self.w_ux.as_slice()),
            ("w_uy", self.w_uy.as_slice()),
            ("w_rx", self.w_rx.as_slice()),
            ("w_ry", self.w_ry.as_slice()),
            ("w_zx", self.w_zx.as_slice()),
            ("w_zy", self.w_zy.as_slice()),
            ("b_u", &self.b_u),
            ("b_r", &self.b_r),
            ("b_z", &self.b_z),
            ("thresholds", &self.thresholds),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 10] {
        [
            ("w_ux", self.w_ux.as_mut_slice()),
            ("w_uy", self.w_uy.as_mut_slice()),
            ("w_rx", self.w_rx.as_mut_slice()),
            ("w_ry", self.w_ry.as_mut_slice()),
            ("w_zx", self.w_zx.as_mut_slice()),
            ("w_zy", self.w_zy.as_mut_slice()),
            ("b_u", &mut self.b_u),
            ("b_r", &mut self.b_r),
            ("b_z", &mut self.b_z),
            ("thresholds", &mut self.thresholds),
        ]
    }
}

fn check_input(p: &EgruParams, x: &CellInput<'_>, s: &EgruState) -> Result<()> {
    check_dim("EGRU input", p.input_dim(), x.dim())?;
    check_dim("EGRU state y", p.hidden_dim(), s.y.dim())?;
    check_dim("EGRU state c", p.hidden_dim(), s.c.len())
}

/// One step for a single sequence.
pub fn egru_forward_step(
    p: &EgruParams,
    x: CellInput<'_>,
    s: &EgruState,
    ops: &mut OpCounter,
) -> Result<(EgruState, StepCache)> {
    let mut out = egru_forward_step_batch(p, &[x], std::slice::from_ref(s), ops)?;
    Ok(out.pop().expect("batch of one"))
}

/// One step for a batch of independent sequences. Per-element arithmetic is
/// identical to [`egru_forward_step`].
pub fn egru_forward_step_batch(
    p: &EgruParams,
    xs: &[CellInput<'_>],
    states: &[EgruState],
    ops: &mut OpCounter,
) -> Result<Vec<(EgruState, StepCache)>> {
    check_dim("EGRU batch", xs.len(), states.len())?;
    for (x, s) in xs.iter().zip(states) {
        check_input(p, x, s)?;
    }
    let n = p.hidden_dim();
    let batch = xs.len();
    let ys: Vec<CellInput> = states.iter().map(|s| CellInput::Events(&s.y)).collect();

    let zeros = || vec![vec![0.0; n]; batch];
    let (mut ux, mut uy, mut rx, mut ry_acc) = (zeros(), zeros(), zeros(), zeros());
    p.w_ux.accumulate_batch(xs, &mut ux, ops);
    p.w_uy.accumulate_batch(&ys, &mut uy, ops);
    p.w_rx.accumulate_batch(xs, &mut rx, ops);
    p.w_ry.accumulate_batch(&ys, &mut ry_acc, ops);

    let mut u_all = Vec::with_capacity(batch);
    let mut r_all = Vec::with_capacity(batch);
    let mut ry_all = Vec::with_capacity(batch);
    for b in 0..batch {
        let u: Vec<f64> = (0..n)
            .map(|i| sigmoid((ux[b][i] + uy[b][i]) + p.b_u[i]))
            .collect();
        let r: Vec<f64> = (0..n)
            .map(|i| sigmoid((rx[b][i] + ry_acc[b][i]) + p.b_r[i]))
            .collect();
        let mut ry = EventVector::empty(n);
        for (j, v) in states[b].y.iter() {
            let gated = r[j] * v;
            if gated != 0.0 {
                ry.push_unchecked(j, gated);
            }
        }
        u_all.push(u);
        r_all.push(r);
        ry_all.push(ry);
    }

    let (mut zx, mut zy) = (zeros(), zeros());
    p.w_zx.accumulate_batch(xs, &mut zx, ops);
    let ry_inputs: Vec<CellInput> = ry_all.iter().map(CellInput::Events).collect();
    p.w_zy.accumulate_batch(&ry_inputs, &mut zy, ops);

    let mut out = Vec::with_capacity(batch);
    for (b, ((u, r), ry)) in u_all.into_iter().zip(r_all).zip(ry_all).enumerate() {
        let s = &states[b];
        let z: Vec<f64> = (0..n)
            .map(|i| ((zx[b][i] + zy[b][i]) + p.b_z[i]).tanh())
            .collect();
        let mut c_tilde = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        let mut spikes = Vec::with_capacity(n);
        let mut y = EventVector::empty(n);
        for i in 0..n {
            let ct = u[i] * z[i] + (1.0 - u[i]) * s.c[i];
            if !ct.is_finite() {
                return Err(Error::Numeric(format!("EGRU cell state {i} is not finite")));
            }
            let spike = ct - p.thresholds[i] >= 0.0;
            if spike {
                if ct != 0.0 {
                    y.push_unchecked(i, ct);
                }
                c.push(ct - p.thresholds[i]);
            } else {
                c.push(ct);
            }
            c_tilde.push(ct);
            spikes.push(spike);
        }
        let cache = StepCache {
            x: match xs[b] {
                CellInput::Dense(a) => OwnedInput::Dense(a.to_vec()),
                CellInput::Events(e) => OwnedInput::Events(e.clone()),
            },
            y_prev: s.y.clone(),
            c_prev: s.c.clone(),
            ry,
            u,
            r,
            z,
            c_tilde,
            spikes,
        };
        out.push((EgruState { c, y: y.clone() }, cache));
    }
    Ok(out)
}

/// Runs the cell over a sequence. Returns the per-step outputs `y_t`, the
/// caches for the backward pass, and the final state.
pub fn egru_forward_seq(
    p: &EgruParams,
    inputs: &[CellInput<'_>],
    s0: &EgruState,
    ops: &mut OpCounter,
) -> Result<(Vec<EventVector>, Vec<StepCache>, EgruState)> {
    let mut state = s0.clone();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut caches = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let (next, cache) = egru_forward_step(p, x, &state, ops)?;
        outputs.push(next.y.clone());
        caches.push(cache);
        state = next;
    }
    Ok((outputs, caches, state))
}

/// Reverse-mode gradients for one sequence. `grad_y[t]` is the loss gradient
/// with respect to the dense form of `y_t`. Returns the parameter gradients
/// and the gradient with respect to each input `x_t`.
pub fn egru_backward_seq(
    p: &EgruParams,
    caches: &[StepCache],
    grad_y: &[Vec<f64>],
) -> Result<(EgruGrads, Vec<Vec<f64>>)> {
    let mut grads = EgruGrads::for_params(p);
    let mut gx = egru_backward_seq_batch(
        p,
        std::slice::from_ref(&caches.to_vec()),
        std::slice::from_ref(&grad_y.to_vec()),
        &mut grads,
    )?;
    Ok((grads, gx.pop().expect("batch of one")))
}

/// Batched BPTT over `caches[b][t]` with upstream gradients `grad_y[b][t]`.
/// Parameter gradients are added into `grads`; the input gradients
/// `[b][t]` are returned. All sequences must have the same length.
pub fn egru_backward_seq_batch(
    p: &EgruParams,
    caches: &[Vec<StepCache>],
    grad_y: &[Vec<Vec<f64>>],
    grads: &mut EgruGrads,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if caches.len() != grad_y.len() {
        return Err(Error::Usage(format!(
            "backward got {} cached sequences but {} gradient sequences",
            caches.len(),
            grad_y.len()
        )));
    }
    let batch = caches.len();
    let steps = caches.first().map_or(0, Vec::len);
    for (c, g) in caches.iter().zip(grad_y) {
        if c.len() != steps || g.len() != steps {
            return Err(Error::Usage(format!(
                "backward length mismatch: caches {} vs grads {} (expected {steps})",
                c.len(),
                g.len()
            )));
        }
    }
    let n = p.hidden_dim();
    let d = p.input_dim();
    let (lam, eps) = (p.surrogate_scale, p.surrogate_width);
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!(
            "surrogate width must be positive, got {eps}"
        )));
    }

    let mut carry_gy = vec![vec![0.0; n]; batch];
    let mut carry_gc = vec![vec![0.0; n]; batch];
    let mut grad_x = vec![vec![Vec::new(); steps]; batch];

    for t in (0..steps).rev() {
        let mut g_pu = vec![vec![0.0; n]; batch];
        let mut g_pz = vec![vec![0.0; n]; batch];
        for b in 0..batch {
            let cache = &caches[b][t];
            check_dim("backward grad_y", n, grad_y[b][t].len())?;
            for i in 0..n {
                let gy = grad_y[b][t][i] + carry_gy[b][i];
                let gc = carry_gc[b][i];
                let ct = cache.c_tilde[i];
                let theta = p.thresholds[i];
                let h = if cache.spikes[i] { 1.0 } else { 0.0 };
                let sg = surrogate(ct - theta, lam, eps);
                let g_ct = gy * (h + ct * sg) + gc * (1.0 - theta * sg);
                grads.thresholds[i] += gy * (-ct * sg) + gc * (-h + theta * sg);
                let (u, z) = (cache.u[i], cache.z[i]);
                let g_u = g_ct * (z - cache.c_prev[i]);
                let g_z = g_ct * u;
                carry_gc[b][i] = g_ct * (1.0 - u);
                g_pz[b][i] = g_z * (1.0 - z * z);
                g_pu[b][i] = g_u * u * (1.0 - u);
            }
        }

        let xs: Vec<CellInput> = caches.iter().map(|c| c[t].x.as_input()).collect();
        let y_prev: Vec<CellInput> = caches
            .iter()
            .map(|c| CellInput::Events(&c[t].y_prev))
            .collect();
        let ry: Vec<CellInput> = caches.iter().map(|c| CellInput::Events(&c[t].ry)).collect();

        let g_pz_refs: Vec<&[f64]> = g_pz.iter().map(Vec::as_slice).collect();
        accumulate_outer_batch(&mut grads.w_zx, &g_pz_refs, &xs);
        accumulate_outer_batch(&mut grads.w_zy, &g_pz_refs, &ry);
        let mut g_ry = vec![vec![0.0; n]; batch];
        p.w_zy.accumulate_transpose_batch(&g_pz_refs, &mut g_ry);

        let mut g_pr = vec![vec![0.0; n]; batch];
        let mut g_yprev = vec![vec![0.0; n]; batch];
        for b in 0..batch {
            let cache = &caches[b][t];
            // y_prev is zero off its active set, so only active entries feed r.
            for (j, v) in cache.y_prev.iter() {
                let r = cache.r[j];
                g_pr[b][j] = g_ry[b][j] * v * r * (1.0 - r);
            }
            for i in 0..n {
                g_yprev[b][i] = g_ry[b][i] * cache.r[i];
            }
        }

        let g_pu_refs: Vec<&[f64]> = g_pu.iter().map(Vec::as_slice).collect();
        let g_pr_refs: Vec<&[f64]> = g_pr.iter().map(Vec::as_slice).collect();
        accumulate_outer_batch(&mut grads.w_ux, &g_pu_refs, &xs);
        accumulate_outer_batch(&mut grads.w_uy, &g_pu_refs, &y_prev);
        accumulate_outer_batch(&mut grads.w_rx, &g_pr_refs, &xs);
        accumulate_outer_batch(&mut grads.w_ry, &g_pr_refs, &y_prev);
        for b in 0..batch {
            for i in 0..n {
                grads.b_u[i] += g_pu[b][i];
                grads.b_r[i] += g_pr[b][i];
                grads.b_z[i] += g_pz[b][i];
            }
        }

        let mut gx = vec![vec![0.0; d]; batch];
        p.w_ux.accumulate_transpose_batch(&g_pu_refs, &mut gx);
        p.w_rx.accumulate_transpose_batch(&g_pr_refs, &mut gx);
        p.w_zx.accumulate_transpose_batch(&g_pz_refs, &mut gx);
        p.w_uy.accumulate_transpose_batch(&g_pu_refs, &mut g_yprev);
        p.w_ry.accumulate_transpose_batch(&g_pr_refs, &mut g_yprev);

        for (b, g) in gx.into_iter().enumerate() {
            grad_x[b][t] = g;
        }
        carry_gy = g_yprev;
    }
    Ok(grad_x)
}
