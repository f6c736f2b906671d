//! Dense and masked matrices, sparse event vectors, and the matrix-vector
//! kernels every cell is built from.
//!
//! Matrices are stored column-major. An event-driven product only touches the
//! columns of active inputs, so each gathered column is a contiguous slice.
//!
//! All forward kernels accumulate in a fixed order: ascending column `j`, and
//! ascending row `i` within a column, starting from `+0.0`. Skipping a column
//! whose input is zero therefore yields exactly the same bits as multiplying
//! it by zero, which is what makes the sparse and dense paths comparable
//! bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Logistic sigmoid, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

pub fn sigmoid_vec(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| sigmoid(x)).collect()
}

pub fn tanh_vec(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| tanh(x)).collect()
}

/// Counts scalar multiplies performed by the kernels that receive it.
///
/// Counters are local to one pass; merge them afterwards with [`OpCounter::merge`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    multiplies: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, n: usize) {
        self.multiplies += n as u64;
    }

    pub fn multiplies(&self) -> u64 {
        self.multiplies
    }

    pub fn merge(&mut self, other: OpCounter) {
        self.multiplies += other.multiplies;
    }
}

/// A dense `rows x cols` matrix, stored column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row-major values.
    pub fn from_row_major(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        check_dim("DenseMatrix::from_row_major", rows * cols, values.len())?;
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[j * rows + i] = values[i * cols + j];
            }
        }
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("DenseMatrix::from_col_major", rows * cols, data.len())?;
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("matrix contains non-finite values".into()))
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.rows + i] = v;
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.cols).map(move |j| self.get(i, j))
    }

    /// Column-major storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..self.rows {
            out.extend(self.row(i));
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self[:, j] += g * x[j]` for every column with a nonzero input.
    pub fn accumulate_outer(&mut self, g: &[f64], x: CellInput<'_>) {
        debug_assert_eq!(g.len(), self.rows);
        match x {
            CellInput::Dense(a) => {
                for (j, &v) in a.iter().enumerate() {
                    if v != 0.0 {
                        axpy(self.column_mut(j), g, v);
                    }
                }
            }
            CellInput::Events(e) => {
                for (j, v) in e.iter() {
                    axpy(self.column_mut(j), g, v);
                }
            }
        }
    }
}

/// Sparse activity: the nonzero entries of a vector, indices ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventVector {
    dim: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl EventVector {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Keeps exactly the nonzero entries of `v`.
    pub fn from_dense(v: &[f64]) -> Self {
        let mut e = Self::empty(v.len());
        for (i, &x) in v.iter().enumerate() {
            if x != 0.0 {
                e.indices.push(i as u32);
                e.values.push(x);
            }
        }
        e
    }

    /// Validated construction from `(index, value)` pairs.
    pub fn from_pairs(dim: usize, pairs: &[(usize, f64)]) -> Result<Self> {
        let mut e = Self::empty(dim);
        let mut last: Option<usize> = None;
        for &(i, v) in pairs {
            if i >= dim {
                return Err(Error::shape("EventVector index", dim, i));
            }
            if last.is_some_and(|l| l >= i) {
                return Err(Error::Parameter(format!(
                    "event indices must be strictly increasing (got {i} after {})",
                    last.unwrap()
                )));
            }
            if v == 0.0 || !v.is_finite() {
                return Err(Error::Parameter(format!(
                    "event value at {i} must be finite and nonzero"
                )));
            }
            e.indices.push(i as u32);
            e.values.push(v);
            last = Some(i);
        }
        Ok(e)
    }

    /// Appends an entry; caller guarantees ascending order and `v != 0`.
    #[inline]
    pub(crate) fn push_unchecked(&mut self, i: usize, v: f64) {
        debug_assert!(i < self.dim && v != 0.0);
        debug_assert!(self.indices.last().is_none_or(|&l| (l as usize) < i));
        self.indices.push(i as u32);
        self.values.push(v);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of active entries.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn densify(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    /// Fraction of active entries.
    pub fn activity(&self) -> f64 {
        if self.dim == 0 {
            0.0
        } else {
            self.nnz() as f64 / self.dim as f64
        }
    }
}

/// The input of one matrix-vector product: either a dense vector or events.
#[derive(Debug, Clone, Copy)]
pub enum CellInput<'a> {
    Dense(&'a [f64]),
    Events(&'a EventVector),
}

impl CellInput<'_> {
    pub fn dim(&self) -> usize {
        match self {
            CellInput::Dense(a) => a.len(),
            CellInput::Events(e) => e.dim(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        match self {
            CellInput::Dense(a) => a.to_vec(),
            CellInput::Events(e) => e.densify(),
        }
    }
}

impl<'a> From<&'a [f64]> for CellInput<'a> {
    fn from(a: &'a [f64]) -> Self {
        CellInput::Dense(a)
    }
}

impl<'a> From<&'a Vec<f64>> for CellInput<'a> {
    fn from(a: &'a Vec<f64>) -> Self {
        CellInput::Dense(a)
    }
}

impl<'a> From<&'a EventVector> for CellInput<'a> {
    fn from(e: &'a EventVector) -> Self {
        CellInput::Events(e)
    }
}

/// An owned [`CellInput`].
#[derive(Debug, Clone, PartialEq)]
pub enum OwnedInput {
    Dense(Vec<f64>),
    Events(EventVector),
}

impl OwnedInput {
    pub fn as_input(&self) -> CellInput<'_> {
        match self {
            OwnedInput::Dense(a) => CellInput::Dense(a),
            OwnedInput::Events(e) => CellInput::Events(e),
        }
    }

    pub fn dim(&self) -> usize {
        self.as_input().dim()
    }
}

#[inline]
fn axpy(out: &mut [f64], col: &[f64], v: f64) {
    for (o, &w) in out.iter_mut().zip(col) {
        *o += w * v;
    }
}

/// A weight matrix with a binary keep-mask. Masked entries are held at
/// exactly zero and are skipped by the forward kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMatrix {
    dense: DenseMatrix,
    /// Column-major, `true` = kept.
    mask: Vec<bool>,
    nnz_per_column: Vec<usize>,
    /// Kept row indices per column, ascending.
    kept_rows: Vec<Vec<u32>>,
}

impl MaskedMatrix {
    /// Wraps `dense` with an all-kept mask.
    pub fn new(dense: DenseMatrix) -> Self {
        let mask = vec![true; dense.len()];
        let mut m = Self {
            dense,
            mask,
            nnz_per_column: Vec::new(),
            kept_rows: Vec::new(),
        };
        m.rebuild_index();
        m
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(DenseMatrix::zeros(rows, cols))
    }

    /// Wraps `dense` with a column-major keep-mask and zeroes masked entries.
    pub fn with_mask(dense: DenseMatrix, mask: Vec<bool>) -> Result<Self> {
        check_dim("MaskedMatrix::with_mask", dense.len(), mask.len())?;
        let mut m = Self {
            dense,
            mask,
            nnz_per_column: Vec::new(),
            kept_rows: Vec::new(),
        };
        m.rebuild_index();
        m.apply_mask();
        Ok(m)
    }

    fn rebuild_index(&mut self) {
        let rows = self.dense.rows();
        self.kept_rows = (0..self.dense.cols())
            .map(|j| {
                self.mask[j * rows..(j + 1) * rows]
                    .iter()
                    .enumerate()
                    .filter(|(_, &k)| k)
                    .map(|(i, _)| i as u32)
                    .collect::<Vec<_>>()
            })
            .collect();
        self.nnz_per_column = self.kept_rows.iter().map(Vec::len).collect();
    }

    pub fn rows(&self) -> usize {
        self.dense.rows()
    }

    pub fn cols(&self) -> usize {
        self.dense.cols()
    }

    pub fn len(&self) -> usize {
        self.dense.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dense.is_empty()
    }

    pub fn dense(&self) -> &DenseMatrix {
        &self.dense
    }

    /// Column-major values. Writers must call [`MaskedMatrix::apply_mask`]
    /// before the next product.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.dense.as_mut_slice()
    }

    pub fn values(&self) -> &[f64] {
        self.dense.as_slice()
    }

    /// Values in row-major order.
    pub fn to_row_major_values(&self) -> Vec<f64> {
        self.dense.to_row_major()
    }

    /// Column-major keep-mask.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.mask[j * self.rows() + i]
    }

    pub fn nnz_per_column(&self) -> &[usize] {
        &self.nnz_per_column
    }

    pub fn nnz(&self) -> usize {
        self.nnz_per_column.iter().sum()
    }

    pub fn masked_count(&self) -> usize {
        self.len() - self.nnz()
    }

    /// Fraction of masked entries.
    pub fn sparsity(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.len() as f64
        }
    }

    /// Replaces the keep-mask (column-major) and zeroes newly masked entries.
    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        check_dim("MaskedMatrix::set_mask", self.len(), mask.len())?;
        self.mask = mask;
        self.rebuild_index();
        self.apply_mask();
        Ok(())
    }

    /// Masks additional entries given by column-major storage index.
    pub fn mask_entries(&mut self, storage_indices: &[usize]) {
        for &k in storage_indices {
            self.mask[k] = false;
        }
        self.rebuild_index();
        self.apply_mask();
    }

    /// Forces every masked value to exactly zero. Idempotent.
    pub fn apply_mask(&mut self) {
        for (w, &keep) in self.dense.as_mut_slice().iter_mut().zip(&self.mask) {
            if !keep {
                *w = 0.0;
            }
        }
    }

    /// Zeroes the entries of a same-shaped gradient that this mask removes.
    pub fn mask_gradient(&self, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.mask.len());
        for (g, &keep) in grad.iter_mut().zip(&self.mask) {
            if !keep {
                *g = 0.0;
            }
        }
    }

    /// Masked product `W a` with a dense input.
    pub fn matvec(&self, a: &[f64]) -> Result<Vec<f64>> {
        check_dim("matvec input", self.cols(), a.len())?;
        let mut out = vec![0.0; self.rows()];
        self.accumulate(CellInput::Dense(a), &mut out, &mut OpCounter::new());
        Ok(out)
    }

    /// Event-driven product: sums `v * W[:, j]` over the active `(j, v)`.
    pub fn matvec_event(&self, e: &EventVector) -> Result<Vec<f64>> {
        check_dim("matvec_event input", self.cols(), e.dim())?;
        let mut out = vec![0.0; self.rows()];
        self.accumulate(CellInput::Events(e), &mut out, &mut OpCounter::new());
        Ok(out)
    }

    #[inline]
    fn accumulate_column(&self, j: usize, v: f64, out: &mut [f64], ops: &mut OpCounter) {
        let nnz = self.nnz_per_column[j];
        if nnz == 0 {
            return;
        }
        let col = self.dense.column(j);
        if nnz == col.len() {
            axpy(out, col, v);
        } else {
            for &i in &self.kept_rows[j] {
                let i = i as usize;
                out[i] += col[i] * v;
            }
        }
        ops.add(nnz);
    }

    /// `out += W x`. Dense inputs visit every column; events visit only the
    /// active ones. Dimensions are the caller's responsibility.
    pub fn accumulate(&self, x: CellInput<'_>, out: &mut [f64], ops: &mut OpCounter) {
        debug_assert_eq!(x.dim(), self.cols());
        debug_assert_eq!(out.len(), self.rows());
        match x {
            CellInput::Dense(a) => {
                for (j, &v) in a.iter().enumerate() {
                    self.accumulate_column(j, v, out, ops);
                }
            }
            CellInput::Events(e) => {
                for (j, v) in e.iter() {
                    self.accumulate_column(j, v, out, ops);
                }
            }
        }
    }

    /// Batched [`MaskedMatrix::accumulate`]. Columns are visited in the outer
    /// loop so each one is loaded once for the whole batch; every element
    /// still sees the same per-element summation order as the single call.
    pub fn accumulate_batch(
        &self,
        xs: &[CellInput<'_>],
        outs: &mut [Vec<f64>],
        ops: &mut OpCounter,
    ) {
        debug_assert_eq!(xs.len(), outs.len());
        let mut cursors = vec![0usize; xs.len()];
        for j in 0..self.cols() {
            if self.nnz_per_column[j] == 0 {
                // still advance event cursors past this column
                for (b, x) in xs.iter().enumerate() {
                    if let CellInput::Events(e) = x {
                        if e.indices.get(cursors[b]).is_some_and(|&k| k as usize == j) {
                            cursors[b] += 1;
                        }
                    }
                }
                continue;
            }
            for (b, x) in xs.iter().enumerate() {
                let v = match x {
                    CellInput::Dense(a) => a[j],
                    CellInput::Events(e) => match e.indices.get(cursors[b]) {
                        Some(&k) if k as usize == j => {
                            let v = e.values[cursors[b]];
                            cursors[b] += 1;
                            v
                        }
                        _ => continue,
                    },
                };
                self.accumulate_column(j, v, &mut outs[b], ops);
            }
        }
    }

    /// `out[j] += W[:, j] . g` for every column (the transposed product).
    pub fn accumulate_transpose(&self, g: &[f64], out: &mut [f64]) {
        let mut outs = [out.to_vec()];
        self.accumulate_transpose_batch(&[g], &mut outs);
        out.copy_from_slice(&outs[0]);
    }

    /// Batched transposed product as one matrix product over the stored
    /// values (masked entries are zero once the mask has been applied).
    /// Each element's result does not depend on the batch size.
    pub fn accumulate_transpose_batch(&self, gs: &[&[f64]], outs: &mut [Vec<f64>]) {
        debug_assert_eq!(gs.len(), outs.len());
        let (n, m, batch) = (self.rows(), self.cols(), gs.len());
        if batch == 0 || m == 0 {
            return;
        }
        let mut packed = Vec::with_capacity(batch * n);
        for g in gs {
            debug_assert_eq!(g.len(), n);
            packed.extend_from_slice(g);
        }
        let mut result = vec![0.0; batch * m];
        gemm(
            (batch, n, m),
            (&packed, n, 1),
            (self.dense.as_slice(), 1, n),
            0.0,
            (&mut result, m, 1),
        );
        for (out, r) in outs.iter_mut().zip(result.chunks_exact(m)) {
            debug_assert_eq!(out.len(), m);
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
    }

    /// Elementwise product with a keep-mask and a scale, e.g. a DropConnect
    /// sample. The result's mask is the conjunction of both masks.
    pub fn scaled_by_mask(&self, keep: &[bool], scale: f64) -> Result<Self> {
        check_dim("MaskedMatrix::scaled_by_mask", self.len(), keep.len())?;
        let mut dense = self.dense.clone();
        for (w, &k) in dense.as_mut_slice().iter_mut().zip(keep) {
            *w = if k { *w * scale } else { 0.0 };
        }
        let mask = self.mask.iter().zip(keep).map(|(&a, &b)| a && b).collect();
        Self::with_mask(dense, mask)
    }
}

/// Batched weight-gradient accumulation: `grad[:, j] += g_b * x_b[j]` for
/// every element `b` and every nonzero input entry.
pub fn accumulate_outer_batch(grad: &mut DenseMatrix, gs: &[&[f64]], xs: &[CellInput<'_>]) {
    debug_assert_eq!(gs.len(), xs.len());
    let mut cursors = vec![0usize; xs.len()];
    for j in 0..grad.cols() {
        let col = grad.column_mut(j);
        for (b, x) in xs.iter().enumerate() {
            let v = match x {
                CellInput::Dense(a) => a[j],
                CellInput::Events(e) => match e.indices.get(cursors[b]) {
                    Some(&k) if k as usize == j => {
                        let v = e.values[cursors[b]];
                        cursors[b] += 1;
                        v
                    }
                    _ => continue,
                },
            };
            if v != 0.0 {
                axpy(col, gs[b], v);
            }
        }
    }
}

/// `C = A B + beta C` for strided layouts; dimensions are `(m, k, n)` and
/// each operand is `(data, row stride, column stride)`.
pub(crate) fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    beta: f64,
    (c, rsc, csc): (&mut [f64], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        k == 0
            || ((m - 1) * rsa + (k - 1) * csa < a.len() && (k - 1) * rsb + (n - 1) * csb < b.len())
    );
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
