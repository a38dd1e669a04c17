//! Compressed sparse column matrices and a supernode-free sparse Cholesky
//! factorization.
//!
//! The factorization follows the classic up-looking scheme: a fill-reducing
//! minimum-degree permutation is computed once per sparsity pattern, the
//! elimination tree and column counts are derived symbolically, and numeric
//! factorizations reuse that analysis for every new set of values on the same
//! pattern. This is the contract the inference engine relies on: one symbolic
//! analysis per model, many cheap numeric refactorizations.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::BinaryHeap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;


use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Column-compressed sparse matrix with sorted row indices and no duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut entries = vec![(0usize, 0.0f64); triplets.len()];
        for &(r, c, v) in triplets {
            entries[next[c]] = (r, v);
            next[c] += 1;
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        for c in 0..ncols {
            let col = &mut entries[counts[c]..counts[c + 1]];
            col.sort_by_key(|e| e.0);
            for &(r, v) in col.iter() {
                if row_idx.len() > col_ptr[c] && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self { nrows, ncols, col_ptr, row_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }
    pub fn ncols(&self) -> usize {
        self.ncols
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

    /// Iterates `(row, value)` pairs of column `c`.
    pub fn column(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    /// Storage position of entry `(r, c)` if it is structurally present.
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let lo = self.col_ptr[c];
        let hi = self.col_ptr[c + 1];
        self.row_idx[lo..hi].binary_search(&r).ok().map(|k| lo + k)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.position(r, c).map_or(0.0, |p| self.values[p])
    }

    /// All stored entries as `(row, col, value)`.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                out.push((r, c, v));
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for c in 0..self.ncols {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for (r, v) in self.column(c) {
                y[r] += v * xc;
            }
        }
        y
    }

    /// `y = Aᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.ncols).map(|c| self.column(c).map(|(r, v)| v * x[r]).sum()).collect()
    }

    /// `alpha * self + beta * other` on the union pattern.
    pub fn add(&self, other: &CscMatrix, alpha: f64, beta: f64) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut t: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (r, c, alpha * v)).collect();
        t.extend(other.triplets().into_iter().map(|(r, c, v)| (r, c, beta * v)));
        Self::from_triplets(self.nrows, self.ncols, &t)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &CscMatrix) -> Self {
        assert_eq!(self.ncols, other.nrows);
        let mut t = Vec::new();
        let mut acc = vec![0.0; self.nrows];
        let mut mark = vec![NONE; self.nrows];
        let mut rows = Vec::new();
        for c in 0..other.ncols {
            rows.clear();
            for (k, bv) in other.column(c) {
                for (r, av) in self.column(k) {
                    if mark[r] != c {
                        mark[r] = c;
                        acc[r] = 0.0;
                        rows.push(r);
                    }
                    acc[r] += av * bv;
                }
            }
            for &r in &rows {
                t.push((r, c, acc[r]));
            }
        }
        Self::from_triplets(self.nrows, other.ncols, &t)
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    /// Largest absolute asymmetry `max |A - Aᵀ|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }
}

/// Minimum-degree ordering of a symmetric pattern given as adjacency lists
/// (self-loops ignored). Returns `perm` with `perm[new] = old`. Ties are broken
/// by the smallest node index so the ordering is deterministic.
pub fn minimum_degree_order(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut adj: Vec<Vec<usize>> = adjacency
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut v: Vec<usize> = a.iter().copied().filter(|&j| j != i).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    let mut eliminated = vec![false; n];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..n).map(|i| Reverse((adj[i].len(), i))).collect();
    let mut perm = Vec::with_capacity(n);
    let mut merged = Vec::new();
    while let Some(Reverse((deg, v))) = heap.pop() {
        if eliminated[v] || deg != adj[v].len() {
            continue;
        }
        eliminated[v] = true;
        perm.push(v);
        let nbrs = core::mem::take(&mut adj[v]);
        for &u in &nbrs {
            merged.clear();
            let (a, b) = (&adj[u], &nbrs);
            let (mut i, mut j) = (0, 0);
            while i < a.len() || j < b.len() {
                let next = match (a.get(i), b.get(j)) {
                    (Some(&x), Some(&y)) if x == y => {
                        i += 1;
                        j += 1;
                        x
                    }
                    (Some(&x), Some(&y)) if x < y => {
                        i += 1;
                        x
                    }
                    (Some(_), Some(&y)) => {
                        j += 1;
                        y
                    }
                    (Some(&x), None) => {
                        i += 1;
                        x
                    }
                    (None, Some(&y)) => {
                        j += 1;
                        y
                    }
                    (None, None) => unreachable!(),
                };
                if next != u && next != v {
                    merged.push(next);
                }
            }
            core::mem::swap(&mut adj[u], &mut merged);
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    perm
}

/// Symbolic analysis of a symmetric positive definite pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    /// Upper triangle of the permuted matrix, column-compressed.
    c_ptr: Vec<usize>,
    c_idx: Vec<usize>,
    /// For every stored entry of the source pattern, its slot in the permuted
    /// upper triangle (or `NONE` if it falls in the strict lower triangle).
    map: Vec<usize>,
    parent: Vec<usize>,
    l_ptr: Vec<usize>,
}

impl SymbolicCholesky {
    /// Analyses a structurally symmetric pattern (both triangles stored).
    pub fn new(pattern: &CscMatrix) -> Result<Self> {
        let n = pattern.ncols();
        if pattern.nrows() != n {
            return Err(Error::Dimension(alloc::format!(
                "Cholesky needs a square matrix, got {}x{}",
                pattern.nrows(),
                n
            )));
        }
        let adjacency: Vec<Vec<usize>> =
            (0..n).map(|c| pattern.column(c).map(|(r, _)| r).collect()).collect();
        let perm = minimum_degree_order(&adjacency);
        Ok(Self::with_permutation(pattern, perm))
    }

    /// Analysis with a caller-supplied permutation (`perm[new] = old`).
    pub fn with_permutation(pattern: &CscMatrix, perm: Vec<usize>) -> Self {
        let n = pattern.ncols();
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        // Permuted upper-triangle pattern with back-references into the source.
        let mut counts = vec![0usize; n + 1];
        for c in 0..n {
            for (r, _) in pattern.column(c) {
                let (pr, pc) = (iperm[r], iperm[c]);
                if pr <= pc {
                    counts[pc + 1] += 1;
                }
            }
        }
        for c in 0..n {
            counts[c + 1] += counts[c];
        }
        let mut slots: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        let mut p = 0;
        for c in 0..n {
            for (r, _) in pattern.column(c) {
                let (pr, pc) = (iperm[r], iperm[c]);
                if pr <= pc {
                    slots[pc].push((pr, p));
                }
                p += 1;
            }
        }
        let mut c_ptr = Vec::with_capacity(n + 1);
        let mut c_idx = Vec::with_capacity(counts[n]);
        let mut map = vec![NONE; pattern.nnz()];
        c_ptr.push(0);
        for col in slots.iter_mut() {
            col.sort_unstable();
            for &(r, src) in col.iter() {
                map[src] = c_idx.len();
                c_idx.push(r);
            }
            c_ptr.push(c_idx.len());
        }

        // Elimination tree of the permuted upper triangle.
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for &i0 in &c_idx[c_ptr[k]..c_ptr[k + 1]] {
                let mut i = i0;
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        // Column counts by symbolic row traversal.
        let mut col_count = vec![1usize; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = ereach(&c_ptr, &c_idx, k, &parent, &mut stack, &mut mark);
            for &i in &stack[top..n] {
                col_count[i] += 1;
            }
        }
        let mut l_ptr = Vec::with_capacity(n + 1);
        l_ptr.push(0);
        for k in 0..n {
            l_ptr.push(l_ptr[k] + col_count[k]);
        }
        Self { n, perm, c_ptr, c_idx, map, parent, l_ptr }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries of the factor (including the diagonal).
    pub fn factor_nnz(&self) -> usize {
        self.l_ptr[self.n]
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }
}

/// Nonzero pattern of row `k` of L, returned in `stack[top..n]` in topological order.
fn ereach(
    c_ptr: &[usize],
    c_idx: &[usize],
    k: usize,
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [usize],
) -> usize {
    let n = parent.len();
    let mut top = n;
    mark[k] = k;
    for &i0 in &c_idx[c_ptr[k]..c_ptr[k + 1]] {
        if i0 > k {
            continue;
        }
        let mut i = i0;
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// Numeric Cholesky factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
}

impl CholeskyFactor {
    /// Factorizes the matrix whose stored values (on the analysed pattern) are `values`.
    pub fn factorize(symbolic: &Arc<SymbolicCholesky>, values: &[f64]) -> Result<Self> {
        let s = symbolic.as_ref();
        let n = s.n;
        assert_eq!(values.len(), s.map.len(), "values do not match the analysed pattern");
        let mut cx = vec![0.0; s.c_idx.len()];
        for (src, &dst) in s.map.iter().enumerate() {
            if dst != NONE {
                cx[dst] += values[src];
            }
        }
        let nnz = s.l_ptr[n];
        let mut l_idx = vec![0usize; nnz];
        let mut l_val = vec![0.0; nnz];
        let mut next: Vec<usize> = s.l_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = ereach(&s.c_ptr, &s.c_idx, k, &s.parent, &mut stack, &mut mark);
            for p in s.c_ptr[k]..s.c_ptr[k + 1] {
                x[s.c_idx[p]] = cx[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / l_val[s.l_ptr[i]];
                x[i] = 0.0;
                for p in s.l_ptr[i] + 1..next[i] {
                    x[l_idx[p]] -= l_val[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                l_idx[p] = k;
                l_val[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: k });
            }
            let p = next[k];
            next[k] += 1;
            l_idx[p] = k;
            l_val[p] = d.sqrt();
        }
        Ok(Self { symbolic: symbolic.clone(), l_idx, l_val })
    }

    /// Convenience: analyse and factorize in one go.
    pub fn new(matrix: &CscMatrix) -> Result<Self> {
        let symbolic = Arc::new(SymbolicCholesky::new(matrix)?);
        Self::factorize(&symbolic, matrix.values())
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    /// `ln det A`.
    pub fn log_det(&self) -> f64 {
        let s = &self.symbolic;
        2.0 * (0..s.n).map(|j| self.l_val[s.l_ptr[j]].ln()).sum::<f64>()
    }

    fn lsolve_in_place(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let start = s.l_ptr[j];
            x[j] /= self.l_val[start];
            let xj = x[j];
            for p in start + 1..s.l_ptr[j + 1] {
                x[self.l_idx[p]] -= self.l_val[p] * xj;
            }
        }
    }

    fn ltsolve_in_place(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let start = s.l_ptr[j];
            let mut acc = x[j];
            for p in start + 1..s.l_ptr[j + 1] {
                acc -= self.l_val[p] * x[self.l_idx[p]];
            }
            x[j] = acc / self.l_val[start];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let perm = &self.symbolic.perm;
        let mut y: Vec<f64> = perm.iter().map(|&old| b[old]).collect();
        self.lsolve_in_place(&mut y);
        self.ltsolve_in_place(&mut y);
        let mut x = vec![0.0; y.len()];
        for (new, &old) in perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Maps i.i.d. standard normals `z` to a draw with covariance `A⁻¹`.
    pub fn sample_with(&self, z: &[f64]) -> Vec<f64> {
        let mut y = z.to_vec();
        self.ltsolve_in_place(&mut y);
        let mut x = vec![0.0; y.len()];
        for (new, &old) in self.symbolic.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// `‖L⁻¹ P v‖²`, i.e. `vᵀ A⁻¹ v`.
    pub fn inv_quadratic_form(&self, v: &[f64]) -> f64 {
        let mut y: Vec<f64> = self.symbolic.perm.iter().map(|&old| v[old]).collect();
        self.lsolve_in_place(&mut y);
        y.iter().map(|t| t * t).sum()
    }

    /// `‖Lᵀ P v‖²`, i.e. `vᵀ A v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let s = &self.symbolic;
        let y: Vec<f64> = s.perm.iter().map(|&old| v[old]).collect();
        let mut acc = 0.0;
        for j in 0..s.n {
            let mut t = 0.0;
            for p in s.l_ptr[j]..s.l_ptr[j + 1] {
                t += self.l_val[p] * y[self.l_idx[p]];
            }
            acc += t * t;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, density: f64, seed: u64) -> CscMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..i {
                if rng.random::<f64>() < density {
                    let v = rng.random::<f64>() - 0.5;
                    t.push((i, j, v));
                    t.push((j, i, v));
                }
            }
        }
        let a = CscMatrix::from_triplets(n, n, &t);
        // Diagonal dominance makes it SPD.
        let mut d = vec![1.0; n];
        for (r, _, v) in a.triplets() {
            d[r] += v.abs();
        }
        a.add(&CscMatrix::diagonal(&d), 1.0, 1.0)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 2.0), (0, 0, 3.0)]);
        assert_eq!(a.get(0, 0), 4.0);
        assert_eq!(a.get(1, 0), 2.0);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn factor_solve_matches_dense() {
        let a = random_spd(60, 0.08, 3);
        let f = CholeskyFactor::new(&a).unwrap();
        let dense = a.to_dense();
        let b: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        let x = f.solve(&b);
        let r = a.mul_vec(&x);
        for i in 0..60 {
            assert!((r[i] - b[i]).abs() < 1e-10);
        }
        let chol = dense.clone().cholesky().unwrap();
        let ld: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        assert!((f.log_det() - ld).abs() < 1e-9);
        let qf = f.quadratic_form(&b);
        let dq = (dense.clone() * nalgebra::DVector::from_vec(b.clone())).dot(&nalgebra::DVector::from_vec(b.clone()));
        assert!((qf - dq).abs() < 1e-9 * dq.abs().max(1.0));
        let iq = f.inv_quadratic_form(&b);
        assert!((iq - x.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn identity_columns_are_reproduced() {
        let a = random_spd(40, 0.15, 11);
        let f = CholeskyFactor::new(&a).unwrap();
        for j in 0..40 {
            let mut e = vec![0.0; 40];
            e[j] = 1.0;
            let col = f.solve(&e);
            let back = a.mul_vec(&col);
            for i in 0..40 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((back[i] - target).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(matches!(CholeskyFactor::new(&a), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn minimum_degree_is_a_permutation() {
        let a = random_spd(80, 0.05, 5);
        let adj: Vec<Vec<usize>> = (0..80).map(|c| a.column(c).map(|(r, _)| r).collect()).collect();
        let mut p = minimum_degree_order(&adj);
        p.sort_unstable();
        assert_eq!(p, (0..80).collect::<Vec<_>>());
    }

    #[test]
    fn matmul_and_transpose_agree_with_dense() {
        let a = random_spd(15, 0.2, 1);
        let b = random_spd(15, 0.2, 2);
        let ab = a.matmul(&b).to_dense();
        let dense = a.to_dense() * b.to_dense();
        assert!((ab - dense).abs().max() < 1e-12);
        assert!(a.transpose().add(&a, 1.0, -1.0).values().iter().all(|v| v.abs() < 1e-15));
    }
}
