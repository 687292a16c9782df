//! Symmetric sparse storage and a fill-reducing sparse Cholesky factorisation.
//!
//! Matrices are stored as the lower triangle (diagonal included) in
//! compressed-column form. Factorisation is split into a symbolic phase
//! (minimum-degree ordering and the exact pattern of `L`, computed once per
//! sparsity pattern) and a numeric left-looking phase that is repeated for
//! every new set of values on the same pattern.

use alloc::{collections::BTreeSet, sync::Arc, vec, vec::Vec};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::math;

/// Lower triangle of a symmetric matrix in compressed-column form.
///
/// Row indices inside each column are strictly increasing and the diagonal
/// entry, when present, comes first.
#[derive(Debug, Clone, PartialEq)]
pub struct SymCsc {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SymCsc {
    /// Builds a matrix from `(row, col, value)` triplets. Entries above the
    /// diagonal are mirrored into the lower triangle and duplicates are summed.
    /// Explicit zeros are kept as structural entries.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut keyed: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::domain("triplet index outside the matrix"));
            }
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            keyed.push((c, r, v));
        }
        keyed.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(keyed.len());
        let mut values: Vec<f64> = Vec::with_capacity(keyed.len());
        let mut last: Option<(usize, usize)> = None;
        for (c, r, v) in keyed {
            if last == Some((c, r)) {
                *values.last_mut().expect("non-empty") += v;
                continue;
            }
            last = Some((c, r));
            col_ptr[c + 1] += 1;
            row_idx.push(r);
            values.push(v);
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        Ok(SymCsc {
            n,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Pattern-only matrix (all values zero) from a set of index pairs.
    pub fn from_pattern(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let triplets: Vec<_> = pairs.into_iter().map(|(i, j)| (i, j, 0.0)).collect();
        SymCsc::from_triplets(n, &triplets)
    }

    pub fn identity(n: usize) -> Self {
        SymCsc {
            n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Same pattern with every stored value set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = 0.0);
        out
    }

    /// Storage position of entry `(i, j)`, if it is structurally present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if c >= self.n {
            return None;
        }
        let rows = &self.row_idx[self.col_ptr[c]..self.col_ptr[c + 1]];
        rows.binary_search(&r).ok().map(|k| self.col_ptr[c] + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    /// Iterates over stored lower-triangle entries as `(row, col, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |c| {
            (self.col_ptr[c]..self.col_ptr[c + 1]).map(move |p| (self.row_idx[p], c, self.values[p]))
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: x.len(),
            });
        }
        let mut y = vec![0.0; self.n];
        for (r, c, v) in self.iter() {
            y[r] += v * x[c];
            if r != c {
                y[c] += v * x[r];
            }
        }
        Ok(y)
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: x.len(),
            });
        }
        let mut acc = 0.0;
        for (r, c, v) in self.iter() {
            let term = v * x[r] * x[c];
            acc += if r == c { term } else { 2.0 * term };
        }
        Ok(acc)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (r, c, v) in self.iter() {
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
        m
    }
}

/// Ordering and exact nonzero pattern of the Cholesky factor for one
/// sparsity pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    source_nnz: usize,
    /// `perm[k]` is the original index eliminated at step `k`.
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    /// For each column `k` of `L`, the columns `j < k` with `L[k, j] != 0`.
    row_ptr: Vec<usize>,
    row_cols: Vec<usize>,
    /// Source entries scattered into each permuted column: `(permuted row, source position)`.
    scatter_ptr: Vec<usize>,
    scatter: Vec<(usize, usize)>,
}

impl SymbolicCholesky {
    /// Minimum-degree ordering on the elimination graph, recording the
    /// neighbourhood of each node at elimination time as its column of `L`.
    pub fn analyze(pattern: &SymCsc) -> Self {
        let n = pattern.dim();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (r, c, _) in pattern.iter() {
            if r != c {
                adj[r].insert(c);
                adj[c].insert(r);
            }
        }
        let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
        let mut perm = Vec::with_capacity(n);
        let mut columns: Vec<Vec<usize>> = vec![Vec::new(); n];
        while let Some((_, v)) = queue.pop_first() {
            let nbrs: Vec<usize> = adj[v].iter().copied().collect();
            for &a in &nbrs {
                queue.remove(&(adj[a].len(), a));
                adj[a].remove(&v);
            }
            for (ia, &a) in nbrs.iter().enumerate() {
                for &b in &nbrs[ia + 1..] {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
            for &a in &nbrs {
                queue.insert((adj[a].len(), a));
            }
            adj[v].clear();
            columns[v] = nbrs;
            perm.push(v);
        }
        let mut inv_perm = vec![0usize; n];
        for (k, &v) in perm.iter().enumerate() {
            inv_perm[v] = k;
        }

        let mut l_col_ptr = Vec::with_capacity(n + 1);
        let mut l_row_idx = Vec::new();
        l_col_ptr.push(0);
        let mut row_counts = vec![0usize; n];
        for &v in &perm {
            let k = inv_perm[v];
            let mut rows: Vec<usize> = columns[v].iter().map(|&a| inv_perm[a]).collect();
            rows.sort_unstable();
            l_row_idx.push(k);
            for &r in &rows {
                debug_assert!(r > k);
                row_counts[r] += 1;
            }
            l_row_idx.extend_from_slice(&rows);
            l_col_ptr.push(l_row_idx.len());
        }

        let mut row_ptr = vec![0usize; n + 1];
        for r in 0..n {
            row_ptr[r + 1] = row_ptr[r] + row_counts[r];
        }
        let mut fill = row_ptr.clone();
        let mut row_cols = vec![0usize; row_ptr[n]];
        for k in 0..n {
            for &r in &l_row_idx[l_col_ptr[k] + 1..l_col_ptr[k + 1]] {
                row_cols[fill[r]] = k;
                fill[r] += 1;
            }
        }

        let mut by_col: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for c in 0..n {
            for p in pattern.col_ptr()[c]..pattern.col_ptr()[c + 1] {
                let r = pattern.row_idx()[p];
                let (pr, pc) = (inv_perm[r], inv_perm[c]);
                let (lo, hi) = if pr >= pc { (pc, pr) } else { (pr, pc) };
                by_col[lo].push((hi, p));
            }
        }
        let mut scatter_ptr = Vec::with_capacity(n + 1);
        let mut scatter = Vec::with_capacity(pattern.nnz());
        scatter_ptr.push(0);
        for col in by_col {
            scatter.extend(col);
            scatter_ptr.push(scatter.len());
        }

        SymbolicCholesky {
            n,
            source_nnz: pattern.nnz(),
            perm,
            inv_perm,
            l_col_ptr,
            l_row_idx,
            row_ptr,
            row_cols,
            scatter_ptr,
            scatter,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries of `L` (diagonal included).
    pub fn factor_nnz(&self) -> usize {
        self.l_row_idx.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Numeric factorisation of a matrix with exactly the analysed pattern.
    pub fn factor(self: &Arc<Self>, a: &SymCsc) -> Result<CholeskyFactor> {
        if a.dim() != self.n || a.nnz() != self.source_nnz {
            return Err(Error::numeric(
                "matrix pattern differs from the analysed pattern",
            ));
        }
        let n = self.n;
        let mut values = vec![0.0; self.l_row_idx.len()];
        let mut work = vec![0.0; n];
        // next[k]: position in column k of the first row not yet consumed.
        let mut next: Vec<usize> = (0..n).map(|k| self.l_col_ptr[k] + 1).collect();
        for j in 0..n {
            for &(r, p) in &self.scatter[self.scatter_ptr[j]..self.scatter_ptr[j + 1]] {
                work[r] += a.values()[p];
            }
            for &k in &self.row_cols[self.row_ptr[j]..self.row_ptr[j + 1]] {
                let pk = next[k];
                debug_assert_eq!(self.l_row_idx[pk], j);
                let ljk = values[pk];
                for q in pk..self.l_col_ptr[k + 1] {
                    work[self.l_row_idx[q]] -= values[q] * ljk;
                }
                next[k] = pk + 1;
            }
            let d = work[j];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::numeric(alloc::format!(
                    "matrix is not positive definite (pivot {d:e} at original index {})",
                    self.perm[j]
                )));
            }
            let ljj = math::sqrt(d);
            let start = self.l_col_ptr[j];
            values[start] = ljj;
            work[j] = 0.0;
            for q in start + 1..self.l_col_ptr[j + 1] {
                let r = self.l_row_idx[q];
                values[q] = work[r] / ljj;
                work[r] = 0.0;
            }
        }
        Ok(CholeskyFactor {
            symbolic: Arc::clone(self),
            values,
        })
    }
}

/// Numeric Cholesky factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    values: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    /// `ln det A`.
    pub fn log_det(&self) -> f64 {
        let s = &self.symbolic;
        2.0 * (0..s.n).map(|k| math::ln(self.values[s.l_col_ptr[k]])).sum::<f64>()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let s = &self.symbolic;
        if b.len() != s.n {
            return Err(Error::Dimension {
                expected: s.n,
                got: b.len(),
            });
        }
        let mut y: Vec<f64> = s.perm.iter().map(|&v| b[v]).collect();
        self.solve_permuted_in_place(&mut y);
        let mut x = vec![0.0; s.n];
        for (k, &v) in s.perm.iter().enumerate() {
            x[v] = y[k];
        }
        Ok(x)
    }

    fn solve_permuted_in_place(&self, y: &mut [f64]) {
        let s = &self.symbolic;
        for k in 0..s.n {
            let start = s.l_col_ptr[k];
            y[k] /= self.values[start];
            let yk = y[k];
            for q in start + 1..s.l_col_ptr[k + 1] {
                y[s.l_row_idx[q]] -= self.values[q] * yk;
            }
        }
        for k in (0..s.n).rev() {
            let start = s.l_col_ptr[k];
            let mut acc = y[k];
            for q in start + 1..s.l_col_ptr[k + 1] {
                acc -= self.values[q] * y[s.l_row_idx[q]];
            }
            y[k] = acc / self.values[start];
        }
    }

    /// Diagonal of `A⁻¹` restricted to `indices`, one solve per index.
    pub fn inverse_diagonal(&self, indices: &[usize]) -> Result<Vec<f64>> {
        let s = &self.symbolic;
        let mut out = Vec::with_capacity(indices.len());
        let mut y = vec![0.0; s.n];
        for &i in indices {
            if i >= s.n {
                return Err(Error::Dimension {
                    expected: s.n,
                    got: i + 1,
                });
            }
            y.iter_mut().for_each(|v| *v = 0.0);
            // Only the forward half is needed: (A⁻¹)_ii = ||L⁻¹ P e_i||².
            let k0 = s.inv_perm[i];
            y[k0] = 1.0;
            let mut acc = 0.0;
            for k in k0..s.n {
                if y[k] == 0.0 {
                    continue;
                }
                let start = s.l_col_ptr[k];
                y[k] /= self.values[start];
                let yk = y[k];
                acc += yk * yk;
                for q in start + 1..s.l_col_ptr[k + 1] {
                    y[s.l_row_idx[q]] -= self.values[q] * yk;
                }
            }
            out.push(acc);
        }
        Ok(out)
    }
}
