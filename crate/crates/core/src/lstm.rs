//! Densely activated LSTM baseline, built on the same masked matrices as the
//! EGRU so pruning and MAC accounting treat both cells alike.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::tensor::{
    accumulate_outer_batch, sigmoid, CellInput, DenseMatrix, MaskedMatrix, OpCounter, OwnedInput,
};

pub const DEFAULT_FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ix: MaskedMatrix,
    pub w_fx: MaskedMatrix,
    pub w_gx: MaskedMatrix,
    pub w_ox: MaskedMatrix,
    pub w_ih: MaskedMatrix,
    pub w_fh: MaskedMatrix,
    pub w_gh: MaskedMatrix,
    pub w_oh: MaskedMatrix,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_g: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let (d, n) = (input_dim, hidden_dim);
        Self {
            w_ix: MaskedMatrix::zeros(n, d),
            w_fx: MaskedMatrix::zeros(n, d),
            w_gx: MaskedMatrix::zeros(n, d),
            w_ox: MaskedMatrix::zeros(n, d),
            w_ih: MaskedMatrix::zeros(n, n),
            w_fh: MaskedMatrix::zeros(n, n),
            w_gh: MaskedMatrix::zeros(n, n),
            w_oh: MaskedMatrix::zeros(n, n),
            b_i: vec![0.0; n],
            b_f: vec![0.0; n],
            b_g: vec![0.0; n],
            b_o: vec![0.0; n],
        }
    }

    /// Weights uniform in `±1/sqrt(n)`; forget-gate bias set to `forget_bias`.
    pub fn init(input_dim: usize, hidden_dim: usize, forget_bias: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut uniform = |rows, cols| {
            MaskedMatrix::new(DenseMatrix::from_fn(rows, cols, |_, _| {
                rng.random_range(-bound..bound)
            }))
        };
        let (d, n) = (input_dim, hidden_dim);
        Self {
            w_ix: uniform(n, d),
            w_fx: uniform(n, d),
            w_gx: uniform(n, d),
            w_ox: uniform(n, d),
            w_ih: uniform(n, n),
            w_fh: uniform(n, n),
            w_gh: uniform(n, n),
            w_oh: uniform(n, n),
            b_f: vec![forget_bias; n],
            ..Self::zeros(d, n)
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ix.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ix.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.hidden_dim(), self.input_dim());
        for w in [&self.w_ix, &self.w_fx, &self.w_gx, &self.w_ox] {
            check_dim("LSTM input weight rows", n, w.rows())?;
            check_dim("LSTM input weight cols", d, w.cols())?;
        }
        for w in [&self.w_ih, &self.w_fh, &self.w_gh, &self.w_oh] {
            check_dim("LSTM recurrent weight rows", n, w.rows())?;
            check_dim("LSTM recurrent weight cols", n, w.cols())?;
        }
        for b in [&self.b_i, &self.b_f, &self.b_g, &self.b_o] {
            check_dim("LSTM bias", n, b.len())?;
        }
        Ok(())
    }

    pub fn matrices(&self) -> [(&'static str, &MaskedMatrix); 8] {
        [
            ("w_ix", &self.w_ix),
            ("w_fx", &self.w_fx),
            ("w_gx", &self.w_gx),
            ("w_ox", &self.w_ox),
            ("w_ih", &self.w_ih),
            ("w_fh", &self.w_fh),
            ("w_gh", &self.w_gh),
            ("w_oh", &self.w_oh),
        ]
    }

    pub fn matrices_mut(&mut self) -> [(&'static str, &mut MaskedMatrix); 8] {
        [
            ("w_ix", &mut self.w_ix),
            ("w_fx", &mut self.w_fx),
            ("w_gx", &mut self.w_gx),
            ("w_ox", &mut self.w_ox),
            ("w_ih", &mut self.w_ih),
            ("w_fh", &mut self.w_fh),
            ("w_gh", &mut self.w_gh),
            ("w_oh", &mut self.w_oh),
        ]
    }

    pub fn vectors(&self) -> [(&'static str, &Vec<f64>); 4] {
        [
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_g", &self.b_g),
            ("b_o", &self.b_o),
        ]
    }

    pub fn vectors_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 4] {
        [
            ("b_i", &mut self.b_i),
            ("b_f", &mut self.b_f),
            ("b_g", &mut self.b_g),
            ("b_o", &mut self.b_o),
        ]
    }

    pub const RECURRENT: [&'static str; 4] = ["w_ih", "w_fh", "w_gh", "w_oh"];
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            h: vec![0.0; hidden_dim],
            cell: vec![0.0; hidden_dim],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    pub x: OwnedInput,
    pub h_prev: Vec<f64>,
    pub cell_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    /// `tanh(cell)` of the new cell state.
    pub tanh_cell: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrads {
    pub w_ix: DenseMatrix,
    pub w_fx: DenseMatrix,
    pub w_gx: DenseMatrix,
    pub w_ox: DenseMatrix,
    pub w_ih: DenseMatrix,
    pub w_fh: DenseMatrix,
    pub w_gh: DenseMatrix,
    pub w_oh: DenseMatrix,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_g: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl LstmGrads {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let (d, n) = (input_dim, hidden_dim);
        Self {
            w_ix: DenseMatrix::zeros(n, d),
            w_fx: DenseMatrix::zeros(n, d),
            w_gx: DenseMatrix::zeros(n, d),
            w_ox: DenseMatrix::zeros(n, d),
            w_ih: DenseMatrix::zeros(n, n),
            w_fh: DenseMatrix::zeros(n, n),
            w_gh: DenseMatrix::zeros(n, n),
            w_oh: DenseMatrix::zeros(n, n),
            b_i: vec![0.0; n],
            b_f: vec![0.0; n],
            b_g: vec![0.0; n],
            b_o: vec![0.0; n],
        }
    }

    pub fn for_params(p: &LstmParams) -> Self {
        Self::zeros(p.input_dim(), p.hidden_dim())
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 12] {
        [
            ("w_ix", self.w_ix.as_slice()),
            ("w_fx", self.w_fx.as_slice()),
            ("w_gx", self.w_gx.as_slice()),
            ("w_ox", self.w_ox.as_slice()),
            ("w_ih", self.w_ih.as_slice()),
            ("w_fh", self.w_fh.as_slice()),
            ("w_gh", self.w_gh.as_slice()),
            ("w_oh", self.w_oh.as_slice()),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_g", &self.b_g),
            ("b_o", &self.b_o),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 12] {
        [
            ("w_ix", self.w_ix.as_mut_slice()),
            ("w_fx", self.w_fx.as_mut_slice()),
            ("w_gx", self.w_gx.as_mut_slice()),
            ("w_ox", self.w_ox.as_mut_slice()),
            ("w_ih", self.w_ih.as_mut_slice()),
            ("w_fh", self.w_fh.as_mut_slice()),
            ("w_gh", self.w_gh.as_mut_slice()),
            ("w_oh", self.w_oh.as_mut_slice()),
            ("b_i", &mut self.b_i),
            ("b_f", &mut self.b_f),
            ("b_g", &mut self.b_g),
            ("b_o", &mut self.b_o),
        ]
    }
}

pub fn lstm_forward_step(
    p: &LstmParams,
    x: CellInput<'_>,
    s: &LstmState,
    ops: &mut OpCounter,
) -> Result<(LstmState, LstmCache)> {
    let mut out = lstm_forward_step_batch(p, &[x], std::slice::from_ref(s), ops)?;
    Ok(out.pop().expect("batch of one"))
}

pub fn lstm_forward_step_batch(
    p: &LstmParams,
    xs: &[CellInput<'_>],
    states: &[LstmState],
    ops: &mut OpCounter,
) -> Result<Vec<(LstmState, LstmCache)>> {
    check_dim("LSTM batch", xs.len(), states.len())?;
    let n = p.hidden_dim();
    for (x, s) in xs.iter().zip(states) {
        check_dim("LSTM input", p.input_dim(), x.dim())?;
        check_dim("LSTM state h", n, s.h.len())?;
        check_dim("LSTM state cell", n, s.cell.len())?;
    }
    let batch = xs.len();
    let hs: Vec<CellInput> = states.iter().map(|s| CellInput::Dense(&s.h)).collect();
    let gate = |wx: &MaskedMatrix, wh: &MaskedMatrix, ops: &mut OpCounter| {
        let mut ax = vec![vec![0.0; n]; batch];
        let mut ah = vec![vec![0.0; n]; batch];
        wx.accumulate_batch(xs, &mut ax, ops);
        wh.accumulate_batch(&hs, &mut ah, ops);
        (ax, ah)
    };
    let (ix, ih) = gate(&p.w_ix, &p.w_ih, ops);
    let (fx, fh) = gate(&p.w_fx, &p.w_fh, ops);
    let (gx, gh) = gate(&p.w_gx, &p.w_gh, ops);
    let (ox, oh) = gate(&p.w_ox, &p.w_oh, ops);

    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let s = &states[b];
        let pre = |ax: &[Vec<f64>], ah: &[Vec<f64>], bias: &[f64], i: usize| {
            (ax[b][i] + ah[b][i]) + bias[i]
        };
        let i_g: Vec<f64> = (0..n).map(|k| sigmoid(pre(&ix, &ih, &p.b_i, k))).collect();
        let f_g: Vec<f64> = (0..n).map(|k| sigmoid(pre(&fx, &fh, &p.b_f, k))).collect();
        let g_g: Vec<f64> = (0..n).map(|k| pre(&gx, &gh, &p.b_g, k).tanh()).collect();
        let o_g: Vec<f64> = (0..n).map(|k| sigmoid(pre(&ox, &oh, &p.b_o, k))).collect();
        let cell: Vec<f64> = (0..n)
            .map(|k| f_g[k] * s.cell[k] + i_g[k] * g_g[k])
            .collect();
        if let Some(k) = cell.iter().position(|c| !c.is_finite()) {
            return Err(Error::Numeric(format!("LSTM cell state {k} is not finite")));
        }
        let tanh_cell: Vec<f64> = cell.iter().map(|c| c.tanh()).collect();
        let h: Vec<f64> = (0..n).map(|k| o_g[k] * tanh_cell[k]).collect();
        let cache = LstmCache {
            x: match xs[b] {
                CellInput::Dense(a) => OwnedInput::Dense(a.to_vec()),
                CellInput::Events(e) => OwnedInput::Events(e.clone()),
            },
            h_prev: s.h.clone(),
            cell_prev: s.cell.clone(),
            i: i_g,
            f: f_g,
            g: g_g,
            o: o_g,
            tanh_cell,
        };
        out.push((LstmState { h, cell }, cache));
    }
    Ok(out)
}

pub fn lstm_forward_seq(
    p: &LstmParams,
    inputs: &[CellInput<'_>],
    s0: &LstmState,
    ops: &mut OpCounter,
) -> Result<(Vec<Vec<f64>>, Vec<LstmCache>, LstmState)> {
    let mut state = s0.clone();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut caches = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let (next, cache) = lstm_forward_step(p, x, &state, ops)?;
        outputs.push(next.h.clone());
        caches.push(cache);
        state = next;
    }
    Ok((outputs, caches, state))
}

pub fn lstm_backward_seq(
    p: &LstmParams,
    caches: &[LstmCache],
    grad_h: &[Vec<f64>],
) -> Result<(LstmGrads, Vec<Vec<f64>>)> {
    let mut grads = LstmGrads::for_params(p);
    let mut gx = lstm_backward_seq_batch(
        p,
        std::slice::from_ref(&caches.to_vec()),
        std::slice::from_ref(&grad_h.to_vec()),
        &mut grads,
    )?;
    Ok((grads, gx.pop().expect("batch of one")))
}

pub fn lstm_backward_seq_batch(
    p: &LstmParams,
    caches: &[Vec<LstmCache>],
    grad_h: &[Vec<Vec<f64>>],
    grads: &mut LstmGrads,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if caches.len() != grad_h.len() {
        return Err(Error::Usage(format!(
            "backward got {} cached sequences but {} gradient sequences",
            caches.len(),
            grad_h.len()
        )));
    }
    let batch = caches.len();
    let steps = caches.first().map_or(0, Vec::len);
    for (c, g) in caches.iter().zip(grad_h) {
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
    let mut carry_gh = vec![vec![0.0; n]; batch];
    let mut carry_gc = vec![vec![0.0; n]; batch];
    let mut grad_x = vec![vec![Vec::new(); steps]; batch];

    for t in (0..steps).rev() {
        let mut g_pi = vec![vec![0.0; n]; batch];
        let mut g_pf = vec![vec![0.0; n]; batch];
        let mut g_pg = vec![vec![0.0; n]; batch];
        let mut g_po = vec![vec![0.0; n]; batch];
        for b in 0..batch {
            let c = &caches[b][t];
            check_dim("backward grad_h", n, grad_h[b][t].len())?;
            for k in 0..n {
                let gh = grad_h[b][t][k] + carry_gh[b][k];
                let tc = c.tanh_cell[k];
                let g_o = gh * tc;
                let g_cell = carry_gc[b][k] + gh * c.o[k] * (1.0 - tc * tc);
                let g_f = g_cell * c.cell_prev[k];
                let g_i = g_cell * c.g[k];
                let g_g = g_cell * c.i[k];
                carry_gc[b][k] = g_cell * c.f[k];
                g_pi[b][k] = g_i * c.i[k] * (1.0 - c.i[k]);
                g_pf[b][k] = g_f * c.f[k] * (1.0 - c.f[k]);
                g_pg[b][k] = g_g * (1.0 - c.g[k] * c.g[k]);
                g_po[b][k] = g_o * c.o[k] * (1.0 - c.o[k]);
            }
        }
        let xs: Vec<CellInput> = caches.iter().map(|c| c[t].x.as_input()).collect();
        let hs: Vec<CellInput> = caches
            .iter()
            .map(|c| CellInput::Dense(&c[t].h_prev))
            .collect();
        let mut gx = vec![vec![0.0; d]; batch];
        let mut gh_prev = vec![vec![0.0; n]; batch];
        let gates = [
            (&g_pi, &p.w_ix, &p.w_ih, 0usize),
            (&g_pf, &p.w_fx, &p.w_fh, 1),
            (&g_pg, &p.w_gx, &p.w_gh, 2),
            (&g_po, &p.w_ox, &p.w_oh, 3),
        ];
        for (g_pre, wx, wh, which) in gates {
            let refs: Vec<&[f64]> = g_pre.iter().map(Vec::as_slice).collect();
            let (gwx, gwh, gb) = match which {
                0 => (&mut grads.w_ix, &mut grads.w_ih, &mut grads.b_i),
                1 => (&mut grads.w_fx, &mut grads.w_fh, &mut grads.b_f),
                2 => (&mut grads.w_gx, &mut grads.w_gh, &mut grads.b_g),
                _ => (&mut grads.w_ox, &mut grads.w_oh, &mut grads.b_o),
            };
            accumulate_outer_batch(gwx, &refs, &xs);
            accumulate_outer_batch(gwh, &refs, &hs);
            for g in g_pre {
                for (acc, v) in gb.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            wx.accumulate_transpose_batch(&refs, &mut gx);
            wh.accumulate_transpose_batch(&refs, &mut gh_prev);
        }
        for (b, g) in gx.into_iter().enumerate() {
            grad_x[b][t] = g;
        }
        carry_gh = gh_prev;
    }
    Ok(grad_x)
}
