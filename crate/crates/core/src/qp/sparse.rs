//! Compressed sparse column storage, a minimum-degree ordering and an
//! up-looking LDL' factorization for symmetric quasi-definite systems.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

/// Column-compressed sparse matrix with sorted, duplicate-free row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowval: Vec<usize>,
    pub nzval: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, colptr: vec![0; ncols + 1], rowval: Vec::new(), nzval: Vec::new() }
    }

    /// Builds from `(row, col, value)` triplets, summing duplicates and
    /// dropping nothing (explicit zeros are kept so patterns stay stable).
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let p = next[c];
            rows[p] = r;
            vals[p] = v;
            next[c] += 1;
        }
        let mut colptr = vec![0usize; ncols + 1];
        let mut rowval = Vec::with_capacity(triplets.len());
        let mut nzval = Vec::with_capacity(triplets.len());
        let mut col: Vec<(usize, f64)> = Vec::new();
        for c in 0..ncols {
            col.clear();
            col.extend((counts[c]..counts[c + 1]).map(|p| (rows[p], vals[p])));
            col.sort_by_key(|e| e.0);
            for &(r, v) in &col {
                if rowval.len() > colptr[c] && *rowval.last().unwrap() == r {
                    *nzval.last_mut().unwrap() += v;
                } else {
                    rowval.push(r);
                    nzval.push(v);
                }
            }
            colptr[c + 1] = rowval.len();
        }
        Self { nrows, ncols, colptr, rowval, nzval }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                if m[(r, c)] != 0.0 {
                    t.push((r, c, m[(r, c)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &t)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for c in 0..self.ncols {
            for p in self.colptr[c]..self.colptr[c + 1] {
                m[(self.rowval[p], c)] += self.nzval[p];
            }
        }
        m
    }

    pub fn nnz(&self) -> usize {
        self.rowval.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| (self.colptr[c]..self.colptr[c + 1]).map(move |p| (self.rowval[p], c, self.nzval[p])))
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    /// `y += alpha * A x`
    pub fn gemv(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for c in 0..self.ncols {
            let xc = alpha * x[c];
            if xc == 0.0 {
                continue;
            }
            for p in self.colptr[c]..self.colptr[c + 1] {
                y[self.rowval[p]] += self.nzval[p] * xc;
            }
        }
    }

    /// `y += alpha * A' x`
    pub fn gemv_t(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for p in self.colptr[c]..self.colptr[c + 1] {
                acc += self.nzval[p] * x[self.rowval[p]];
            }
            y[c] += alpha * acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.gemv(1.0, x, &mut y);
        y
    }

    pub fn scale(&mut self, alpha: f64) {
        self.nzval.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs(&self) -> f64 {
        self.nzval.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Minimum-degree fill-reducing ordering of a symmetric pattern given as the
/// list of off-diagonal edges. Ties break on the lowest node index, so the
/// result is a deterministic function of the pattern.
pub fn minimum_degree(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<usize> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (i, j) in edges {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
    let mut order = Vec::with_capacity(n);
    let mut nbrs: Vec<usize> = Vec::new();
    while let Some((_, v)) = queue.pop_first() {
        order.push(v);
        nbrs.clear();
        nbrs.extend(std::mem::take(&mut adj[v]));
        for &u in &nbrs {
            queue.remove(&(adj[u].len(), u));
            adj[u].remove(&v);
        }
        for (a, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[a + 1..] {
                if adj[u].insert(w) {
                    adj[w].insert(u);
                }
            }
        }
        for &u in &nbrs {
            queue.insert((adj[u].len(), u));
        }
    }
    order
}

const NONE: usize = usize::MAX;

/// Symbolic analysis of an upper-triangular CSC pattern (already permuted).
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    pub n: usize,
    etree: Vec<usize>,
    lp: Vec<usize>,
}

impl LdlSymbolic {
    pub fn analyse(upper: &CscMatrix) -> Self {
        let n = upper.ncols;
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for p in upper.colptr[j]..upper.colptr[j + 1] {
                let mut i = upper.rowval[p];
                assert!(i <= j, "pattern must be upper triangular");
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        Self { n, etree, lp }
    }

    pub fn nnz_l(&self) -> usize {
        self.lp[self.n]
    }
}

/// Numeric `L D L'` factor with unit lower-triangular `L`.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    lp: Vec<usize>,
    // scratch
    y_vals: Vec<f64>,
    y_used: Vec<bool>,
    y_idx: Vec<usize>,
    elim: Vec<usize>,
    next_in_col: Vec<usize>,
    /// Pivots whose sign or magnitude were corrected.
    pub regularized: usize,
}

impl LdlFactor {
    pub fn new(sym: &LdlSymbolic) -> Self {
        let n = sym.n;
        let nnz = sym.nnz_l();
        Self {
            li: vec![0; nnz],
            lx: vec![0.0; nnz],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            lp: sym.lp.clone(),
            y_vals: vec![0.0; n],
            y_used: vec![false; n],
            y_idx: vec![0; n],
            elim: vec![0; n],
            next_in_col: vec![0; n],
            regularized: 0,
        }
    }

    /// Factors `upper` (same pattern as analysed). Pivot `k` is expected to
    /// have sign `signs[k]`; pivots of the wrong sign or smaller than `eps`
    /// in magnitude are replaced by `signs[k] * delta`.
    pub fn factor(&mut self, sym: &LdlSymbolic, upper: &CscMatrix, signs: &[i8], eps: f64, delta: f64) {
        let n = sym.n;
        self.regularized = 0;
        self.next_in_col.copy_from_slice(&self.lp[..n]);
        for k in 0..n {
            let mut nnz_y = 0;
            self.d[k] = 0.0;
            for p in upper.colptr[k]..upper.colptr[k + 1] {
                let b = upper.rowval[p];
                if b == k {
                    self.d[k] = upper.nzval[p];
                    continue;
                }
                self.y_vals[b] = upper.nzval[p];
                if !self.y_used[b] {
                    self.y_used[b] = true;
                    self.elim[0] = b;
                    let mut n_e = 1;
                    let mut next = sym.etree[b];
                    while next != NONE && next < k {
                        if self.y_used[next] {
                            break;
                        }
                        self.y_used[next] = true;
                        self.elim[n_e] = next;
                        n_e += 1;
                        next = sym.etree[next];
                    }
                    while n_e > 0 {
                        n_e -= 1;
                        self.y_idx[nnz_y] = self.elim[n_e];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = self.y_idx[i];
                let tmp = self.next_in_col[c];
                let yc = self.y_vals[c];
                for j in self.lp[c]..tmp {
                    self.y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[tmp] = k;
                let l = yc * self.dinv[c];
                self.lx[tmp] = l;
                self.d[k] -= yc * l;
                self.next_in_col[c] += 1;
                self.y_vals[c] = 0.0;
                self.y_used[c] = false;
            }
            let s = f64::from(signs[k]);
            if self.d[k] * s < eps {
                self.d[k] = s * delta;
                self.regularized += 1;
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
    }

    /// Solves in place with the permuted right-hand side.
    pub fn solve(&self, x: &mut [f64]) {
        let n = self.d.len();
        for i in 0..n {
            let xi = x[i];
            if xi != 0.0 {
                for j in self.lp[i]..self.lp[i + 1] {
                    x[self.li[j]] -= self.lx[j] * xi;
                }
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.d
    }
}
