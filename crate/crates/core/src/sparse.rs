//! Sparse matrices and a sparse Cholesky factorization of normal equations.
//!
//! The factorization is the classic up-looking algorithm: elimination tree,
//! row patterns via `ereach`, then one row of `L` per step. A greedy minimum
//! degree ordering is applied first to limit fill.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("matrix is not positive definite: pivot {pivot:e} at column {column}")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Row-major sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(ncols: usize) -> Self {
        Self {
            ncols,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn with_capacity(ncols: usize, rows: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        row_ptr.push(0);
        Self {
            ncols,
            row_ptr,
            col_idx: Vec::with_capacity(nnz),
            values: Vec::with_capacity(nnz),
        }
    }

    /// Appends a row; exact zeros are not stored.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (c, v) in entries {
            assert!(c < self.ncols, "column {c} out of range");
            if v != 0.0 {
                self.col_idx.push(c);
                self.values.push(v);
            }
        }
        self.row_ptr.push(self.col_idx.len());
    }

    pub fn from_dense(rows: &[Vec<f64>], ncols: usize) -> Self {
        let mut m = Self::new(ncols);
        for r in rows {
            m.push_row(r.iter().copied().enumerate());
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).filter(|&(j, _)| j == c).map(|(_, v)| v).sum()
    }

    /// Scales the entries of row `r` in place.
    pub fn scale_row(&mut self, r: usize, s: f64) {
        for v in &mut self.values[self.row_ptr[r]..self.row_ptr[r + 1]] {
            *v *= s;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows())
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn transpose_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (r, &yr) in y.iter().enumerate().take(self.nrows()) {
            for (c, v) in self.row(r) {
                out[c] += v * yr;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.nrows())
            .map(|r| {
                let mut row = vec![0.0; self.ncols];
                for (c, v) in self.row(r) {
                    row[c] += v;
                }
                row
            })
            .collect()
    }

    /// Upper triangle of `AᵀA + damping·I` in compressed-column form.
    pub fn normal_matrix(&self, damping: f64) -> SymmetricCsc {
        let n = self.ncols;
        let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(self.nnz() * 3 + n);
        for r in 0..self.nrows() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            let cols = &self.col_idx[span.clone()];
            let vals = &self.values[span];
            for (a, (&ca, &va)) in cols.iter().zip(vals).enumerate() {
                for (&cb, &vb) in cols[a..].iter().zip(&vals[a..]) {
                    let (i, j) = if ca <= cb { (ca, cb) } else { (cb, ca) };
                    triplets.push((j, i, va * vb));
                }
            }
        }
        for k in 0..n {
            triplets.push((k, k, damping));
        }
        SymmetricCsc::from_upper_triplets(n, triplets)
    }
}

/// Upper triangle (row ≤ column) of a symmetric matrix, column-compressed with
/// sorted row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricCsc {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SymmetricCsc {
    /// Triplets are `(column, row, value)` with `row ≤ column`; duplicates are summed.
    pub fn from_upper_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(c, r, _)| (c, r));
        let mut col_ptr = vec![0; n + 1];
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (c, r, v) in triplets {
            debug_assert!(r <= c && c < n);
            if last == Some((c, r)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((c, r));
            }
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        Self {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|c| self.col(c).filter(|&(r, _)| r == c).map(|(_, v)| v).sum())
            .collect()
    }

    /// Symmetric permutation `C = P A Pᵀ` where `perm[new] = old`.
    pub fn permute(&self, perm: &[usize]) -> SymmetricCsc {
        let inv = invert_permutation(perm);
        let mut triplets = Vec::with_capacity(self.nnz());
        for c in 0..self.n {
            for (r, v) in self.col(c) {
                let (a, b) = (inv[r], inv[c]);
                let (i, j) = if a <= b { (a, b) } else { (b, a) };
                triplets.push((j, i, v));
            }
        }
        SymmetricCsc::from_upper_triplets(self.n, triplets)
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for c in 0..self.n {
            for (r, _) in self.col(c) {
                if r != c {
                    adj[r].push(c);
                    adj[c].push(r);
                }
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ordering {
    Natural,
    #[default]
    MinimumDegree,
}

/// Greedy minimum degree on the explicit elimination graph. Ties go to the
/// lowest index, so the result is deterministic.
pub fn minimum_degree(a: &SymmetricCsc) -> Vec<usize> {
    let n = a.dim();
    let mut adj = a.adjacency();
    let mut eliminated = vec![false; n];
    let mut mark = vec![usize::MAX; n];
    let mut order = Vec::with_capacity(n);
    for step in 0..n {
        let v = (0..n)
            .filter(|&i| !eliminated[i])
            .min_by_key(|&i| (adj[i].len(), i))
            .expect("uneliminated node remains");
        eliminated[v] = true;
        order.push(v);
        let nbrs = std::mem::take(&mut adj[v]);
        // Neighbours of v become a clique.
        for &u in &nbrs {
            mark[u] = step;
        }
        for &u in &nbrs {
            let mut merged: Vec<usize> = adj[u]
                .iter()
                .copied()
                .filter(|&w| w != v && mark[w] != step)
                .collect();
            merged.extend(nbrs.iter().copied().filter(|&w| w != u));
            merged.sort_unstable();
            adj[u] = merged;
        }
    }
    order
}

/// `L Lᵀ = P A Pᵀ`, with `L` stored column-compressed and the diagonal first
/// in each column.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Relative pivot size below which the matrix is treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

impl CholeskyFactor {
    pub fn factor(a: &SymmetricCsc, ordering: Ordering) -> Result<Self, SparseError> {
        let perm = match ordering {
            Ordering::Natural => (0..a.dim()).collect(),
            Ordering::MinimumDegree => minimum_degree(a),
        };
        let c = a.permute(&perm);
        let n = c.dim();
        let parent = elimination_tree(&c);

        // Column counts of L from the row patterns.
        let mut counts = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut marks = vec![false; n];
        for k in 0..n {
            let top = ereach(&c, k, &parent, &mut stack, &mut marks);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        for k in 0..n {
            col_ptr[k + 1] = col_ptr[k] + counts[k];
        }
        let nnz = col_ptr[n];
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![0.0f64; nnz];
        let mut next = col_ptr[..n].to_vec();
        let mut x = vec![0.0f64; n];
        let diag = c.diagonal();

        for k in 0..n {
            let top = ereach(&c, k, &parent, &mut stack, &mut marks);
            for (i, v) in c.col(k) {
                x[i] = v;
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / values[col_ptr[i]];
                x[i] = 0.0;
                for p in col_ptr[i] + 1..next[i] {
                    x[row_idx[p]] -= values[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                row_idx[p] = k;
                values[p] = lki;
            }
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(d > PIVOT_TOLERANCE * diag[k].abs()) || !d.is_finite() {
                return Err(SparseError::NotPositiveDefinite {
                    column: perm[k],
                    pivot: d,
                });
            }
            let p = next[k];
            next[k] += 1;
            row_idx[p] = k;
            values[p] = d.sqrt();
        }
        Ok(Self {
            n,
            perm,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        if b.len() != self.n {
            return Err(SparseError::Dimension {
                expected: self.n,
                got: b.len(),
            });
        }
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        // L y = Pb
        for j in 0..self.n {
            let span = self.col_ptr[j]..self.col_ptr[j + 1];
            y[j] /= self.values[span.start];
            let yj = y[j];
            for p in span.start + 1..span.end {
                y[self.row_idx[p]] -= self.values[p] * yj;
            }
        }
        // Lᵀ z = y
        for j in (0..self.n).rev() {
            let span = self.col_ptr[j]..self.col_ptr[j + 1];
            let mut s = y[j];
            for p in span.start + 1..span.end {
                s -= self.values[p] * y[self.row_idx[p]];
            }
            y[j] = s / self.values[span.start];
        }
        let mut out = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            out[old] = y[new];
        }
        Ok(out)
    }
}

fn elimination_tree(c: &SymmetricCsc) -> Vec<Option<usize>> {
    let n = c.dim();
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for (row, _) in c.col(k) {
            let mut i = Some(row);
            while let Some(node) = i.filter(|&node| node < k) {
                let next = ancestor[node];
                ancestor[node] = Some(k);
                if next.is_none() {
                    parent[node] = Some(k);
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal), written to
/// `stack[top..]` in topological order. Returns `top`.
fn ereach(
    c: &SymmetricCsc,
    k: usize,
    parent: &[Option<usize>],
    stack: &mut [usize],
    marks: &mut [bool],
) -> usize {
    let n = c.dim();
    let mut top = n;
    marks[k] = true;
    let mut path = Vec::new();
    for (row, _) in c.col(k) {
        if row > k {
            continue;
        }
        let mut i = row;
        path.clear();
        while !marks[i] {
            path.push(i);
            marks[i] = true;
            match parent[i] {
                Some(p) => i = p,
                None => break,
            }
        }
        while let Some(node) = path.pop() {
            top -= 1;
            stack[top] = node;
        }
    }
    for &i in &stack[top..] {
        marks[i] = false;
    }
    marks[k] = false;
    top
}

/// Minimizes `‖A x − b‖² + damping‖x‖²` through the normal equations.
pub fn solve_least_squares(
    a: &CsrMatrix,
    b: &[f64],
    damping: f64,
    ordering: Ordering,
) -> Result<Vec<f64>, SparseError> {
    if b.len() != a.nrows() {
        return Err(SparseError::Dimension {
            expected: a.nrows(),
            got: b.len(),
        });
    }
    let normal = a.normal_matrix(damping);
    let rhs = a.transpose_mul_vec(b);
    CholeskyFactor::factor(&normal, ordering)?.solve(&rhs)
}
