//! Sparse symmetric matrices, projectors and the LDL^T factorization used
//! for all precision-matrix work.
//!
//! Precision matrices are stored as the upper triangle in compressed
//! sparse column form. Sparsity patterns are fixed per model, so the
//! symbolic analysis (ordering + elimination tree) is done once and reused
//! for every numeric factorization along the hyperparameter exploration.

mod ldl;

pub use ldl::{LdlFactor, Symbolic};

use crate::error::{Error, Result};

/// Triplet accumulator for building symmetric matrices. Entries may be
/// given in any (i, j) order; duplicates are summed.
#[derive(Debug, Clone)]
pub struct Triplets {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Add value at (i, j); the symmetric mirror is implied.
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.entries.push((a, b, v));
    }

    /// Append another triplet set with its indices shifted by `offset`.
    pub fn append_shifted(&mut self, other: &Triplets, offset: usize) {
        for &(i, j, v) in &other.entries {
            self.push(i + offset, j + offset, v);
        }
    }

    pub fn build(mut self) -> SparseSym {
        // Sort column-major then by row; merge duplicates, keeping explicit
        // zeros so patterns stay stable across hyperparameter values.
        self.entries.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut colptr = vec![0usize; self.n + 1];
        let mut rowidx: Vec<usize> = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(i, j, v) in &self.entries {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                rowidx.push(i);
                values.push(v);
                colptr[j + 1] += 1;
                last = Some((i, j));
            }
        }
        for j in 0..self.n {
            colptr[j + 1] += colptr[j];
        }
        SparseSym {
            n: self.n,
            colptr,
            rowidx,
            values,
        }
    }
}

/// Symmetric sparse matrix; upper triangle (i <= j) in CSC layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz_upper(&self) -> usize {
        self.rowidx.len()
    }

    pub fn identity(n: usize, scale: f64) -> Self {
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.push(i, i, scale);
        }
        t.build()
    }

    /// Upper-triangle entries (i <= j).
    pub fn iter_upper(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |j| {
            (self.colptr[j]..self.colptr[j + 1]).map(move |p| (self.rowidx[p], j, self.values[p]))
        })
    }

    /// All entries of the full symmetric matrix (mirrors included).
    pub fn iter_full(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.iter_upper().flat_map(|(i, j, v)| {
            let mirror = if i != j { Some((j, i, v)) } else { None };
            std::iter::once((i, j, v)).chain(mirror)
        })
    }

    /// y = Q x using the symmetric expansion.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        y.fill(0.0);
        for j in 0..self.n {
            let xj = x[j];
            for p in self.colptr[j]..self.colptr[j + 1] {
                let i = self.rowidx[p];
                let v = self.values[p];
                y[i] += v * xj;
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
    }

    /// x^T Q x.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.n {
            for p in self.colptr[j]..self.colptr[j + 1] {
                let i = self.rowidx[p];
                let v = self.values[p];
                acc += if i == j {
                    v * x[i] * x[j]
                } else {
                    2.0 * v * x[i] * x[j]
                };
            }
        }
        acc
    }

    pub fn diag(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for j in 0..self.n {
            for p in self.colptr[j]..self.colptr[j + 1] {
                if self.rowidx[p] == j {
                    d[j] += self.values[p];
                }
            }
        }
        d
    }

    /// Copy the entries into a triplet builder (for composing larger
    /// matrices).
    pub fn to_triplets(&self) -> Triplets {
        let mut t = Triplets::new(self.n);
        for (i, j, v) in self.iter_upper() {
            t.push(i, j, v);
        }
        t
    }

    /// Kronecker product self (x) other, both symmetric.
    pub fn kron(&self, other: &SparseSym) -> SparseSym {
        let nb = other.n;
        let mut t = Triplets::new(self.n * nb);
        for (ia, ja, va) in self.iter_full() {
            for (ib, jb, vb) in other.iter_full() {
                let i = ia * nb + ib;
                let j = ja * nb + jb;
                if i <= j {
                    t.push(i, j, va * vb);
                }
            }
        }
        t.build()
    }

    /// Full symmetric row lists (row -> (col, value)), for cheap repeated
    /// row access.
    pub fn to_rows(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n];
        for (i, j, v) in self.iter_full() {
            rows[i].push((j, v));
        }
        rows
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter_full() {
            m[(i, j)] += v;
        }
        m
    }

    /// Symbolic analysis (fill-reducing ordering + elimination tree) for
    /// this pattern; reuse across matrices with identical patterns.
    pub fn symbolic(&self) -> Symbolic {
        Symbolic::new(self)
    }

    /// One-shot factorization.
    pub fn factorize(&self) -> Result<LdlFactor> {
        self.symbolic().factorize(self)
    }

    /// Factorize, adding growing diagonal jitter on failure. Returns the
    /// factor and the jitter that was needed (0.0 in the common case).
    pub fn factorize_with_jitter(&self, symbolic: &Symbolic) -> Result<(LdlFactor, f64)> {
        match symbolic.factorize(self) {
            Ok(f) => Ok((f, 0.0)),
            Err(_) => {
                let scale = self
                    .diag()
                    .iter()
                    .fold(0.0f64, |a, &d| a.max(d.abs()))
                    .max(1.0);
                let mut jitter = 1e-10 * scale;
                for _ in 0..12 {
                    let mut t = self.to_triplets();
                    for i in 0..self.n {
                        t.push(i, i, jitter);
                    }
                    let jittered = t.build();
                    // Pattern may gain diagonal entries; refresh symbolics.
                    if let Ok(f) = jittered.symbolic().factorize(&jittered) {
                        return Ok((f, jitter));
                    }
                    jitter *= 10.0;
                }
                Err(Error::NotPositiveDefinite(self.n))
            }
        }
    }
}

/// Reverse Cuthill-McKee ordering with near-dense rows pinned to the end.
/// Returns `perm` with `perm[new] = old`.
pub fn rcm_order(q: &SparseSym) -> Vec<usize> {
    let n = q.n();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in q.iter_upper() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    let dense_cut = 32.max(n / 5);
    let mut pinned: Vec<usize> = (0..n).filter(|&i| adj[i].len() > dense_cut).collect();
    let is_pinned: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in &pinned {
            v[i] = true;
        }
        v
    };

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    loop {
        // Deterministic start: unvisited, unpinned node of minimum degree.
        let start = (0..n)
            .filter(|&i| !visited[i] && !is_pinned[i])
            .min_by_key(|&i| (adj[i].len(), i));
        let Some(start) = start else { break };
        let mut queue = std::collections::VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = adj[u]
                .iter()
                .copied()
                .filter(|&v| !visited[v] && !is_pinned[v])
                .collect();
            nbrs.sort_by_key(|&v| (adj[v].len(), v));
            for v in nbrs {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    pinned.sort_unstable();
    order.extend(pinned);
    order
}

/// Sparse row-major projector: maps the latent vector to per-observation
/// linear predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    ncols: usize,
    rowptr: Vec<usize>,
    colidx: Vec<usize>,
    weights: Vec<f64>,
}

impl Projector {
    /// Build from per-row (column, weight) lists. Duplicate columns within
    /// a row are summed.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut rowptr = vec![0usize];
        let mut colidx = Vec::new();
        let mut weights = Vec::new();
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (c, w) in row {
                match merged.last_mut() {
                    Some((lc, lw)) if *lc == c => *lw += w,
                    _ => merged.push((c, w)),
                }
            }
            for (c, w) in merged {
                debug_assert!(c < ncols);
                colidx.push(c);
                weights.push(w);
            }
            rowptr.push(colidx.len());
        }
        Self {
            ncols,
            rowptr,
            colidx,
            weights,
        }
    }

    pub fn nrows(&self) -> usize {
        self.rowptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.rowptr[r]..self.rowptr[r + 1]).map(move |p| (self.colidx[p], self.weights[p]))
    }

    /// eta = A x.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows())
            .map(|r| self.row(r).map(|(c, w)| w * x[c]).sum())
            .collect()
    }

    /// out += A^T v.
    pub fn add_t_mul_vec(&self, v: &[f64], out: &mut [f64]) {
        for r in 0..self.nrows() {
            let vr = v[r];
            for p in self.rowptr[r]..self.rowptr[r + 1] {
                out[self.colidx[p]] += self.weights[p] * vr;
            }
        }
    }

    /// Triplets of A^T diag(w) A over the latent dimension. Entries are
    /// emitted for the full pattern even when w is zero, keeping the
    /// Hessian pattern stable.
    pub fn atwa(&self, w: &[f64]) -> Triplets {
        let mut t = Triplets::new(self.ncols);
        for r in 0..self.nrows() {
            let wr = w[r];
            let lo = self.rowptr[r];
            let hi = self.rowptr[r + 1];
            for p in lo..hi {
                for q in p..hi {
                    t.push(
                        self.colidx[p],
                        self.colidx[q],
                        wr * self.weights[p] * self.weights[q],
                    );
                }
            }
        }
        t
    }

    /// For each latent column, the list of observation rows touching it.
    pub fn rows_touching(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.ncols];
        for r in 0..self.nrows() {
            for p in self.rowptr[r]..self.rowptr[r + 1] {
                out[self.colidx[p]].push(r);
            }
        }
        for v in &mut out {
            v.dedup();
        }
        out
    }
}

/// One linear constraint row c^T x = 0 over the latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl Constraint {
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.idx
            .iter()
            .zip(&self.val)
            .map(|(&i, &v)| v * x[i])
            .sum()
    }

    pub fn shift(&self, offset: usize) -> Constraint {
        Constraint {
            idx: self.idx.iter().map(|&i| i + offset).collect(),
            val: self.val.clone(),
        }
    }

    /// Dense representation of length n.
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut d = vec![0.0; n];
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            d[i] = v;
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, rng: &mut StdRng) -> SparseSym {
        // Diagonally dominant random sparse symmetric matrix.
        let mut t = Triplets::new(n);
        let mut rowsum = vec![0.0; n];
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < 0.15 {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    t.push(i, j, v);
                    rowsum[i] += v.abs();
                    rowsum[j] += v.abs();
                }
            }
        }
        for i in 0..n {
            t.push(i, i, rowsum[i] + 1.0 + rng.random::<f64>());
        }
        t.build()
    }

    #[test]
    fn triplets_merge_duplicates() {
        let mut t = Triplets::new(3);
        t.push(0, 1, 1.0);
        t.push(1, 0, 2.0);
        t.push(2, 2, 5.0);
        let m = t.build();
        assert_eq!(m.nnz_upper(), 2);
        let d = m.to_dense();
        assert_eq!(d[(0, 1)], 3.0);
        assert_eq!(d[(1, 0)], 3.0);
        assert_eq!(d[(2, 2)], 5.0);
    }

    #[test]
    fn mul_and_quad_match_dense() {
        let mut rng = StdRng::seed_from_u64(3);
        let m = random_spd(25, &mut rng);
        let d = m.to_dense();
        let x: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; 25];
        m.mul_vec(&x, &mut y);
        let xv = nalgebra::DVector::from_column_slice(&x);
        let yd = &d * &xv;
        for i in 0..25 {
            assert!((y[i] - yd[i]).abs() < 1e-12);
        }
        let q = m.quad_form(&x);
        assert!((q - (xv.transpose() * &d * &xv)[(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn ldl_solves_against_dense() {
        let mut rng = StdRng::seed_from_u64(11);
        for n in [5usize, 30, 120] {
            let m = random_spd(n, &mut rng);
            let f = m.factorize().unwrap();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut x = b.clone();
            f.solve_in_place(&mut x);
            let mut back = vec![0.0; n];
            m.mul_vec(&x, &mut back);
            for i in 0..n {
                assert!((back[i] - b[i]).abs() < 1e-9, "n={n} i={i}");
            }
            let dense = m.to_dense();
            let logdet_dense = dense.cholesky().unwrap().l_dirty().diagonal().map(|v| v.ln()).sum() * 2.0;
            assert!((f.log_det() - logdet_dense).abs() < 1e-8);
        }
    }

    #[test]
    fn ldl_rejects_indefinite() {
        let mut t = Triplets::new(2);
        t.push(0, 0, 1.0);
        t.push(1, 1, -2.0);
        let m = t.build();
        assert!(m.factorize().is_err());
    }

    #[test]
    fn symbolic_reused_across_values() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = random_spd(40, &mut rng);
        let sym = a.symbolic();
        // Same pattern, different values: rebuild with scaled entries.
        let mut t = Triplets::new(40);
        for (i, j, v) in a.iter_upper() {
            t.push(i, j, if i == j { v * 2.0 } else { v * 0.5 });
        }
        let b = t.build();
        let f = sym.factorize(&b).unwrap();
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut rhs = vec![0.0; 40];
        b.mul_vec(&x, &mut rhs);
        let mut sol = rhs.clone();
        f.solve_in_place(&mut sol);
        for i in 0..40 {
            assert!((sol[i] - x[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn kron_matches_dense() {
        let mut rng = StdRng::seed_from_u64(9);
        let a = random_spd(4, &mut rng);
        let b = random_spd(6, &mut rng);
        let k = a.kron(&b);
        let ka = a.to_dense().kronecker(&b.to_dense());
        let kd = k.to_dense();
        for i in 0..24 {
            for j in 0..24 {
                assert!((kd[(i, j)] - ka[(i, j)]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn rcm_is_a_permutation_and_reduces_band() {
        // 1-D chain given a scrambled labelling; RCM should recover a
        // narrow band.
        let n = 50;
        let mut label: Vec<usize> = (0..n).collect();
        let mut rng = StdRng::seed_from_u64(2);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            label.swap(i, j);
        }
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.push(label[i], label[i], 2.0);
        }
        for i in 0..n - 1 {
            t.push(label[i], label[i + 1], -1.0);
        }
        let m = t.build();
        let perm = rcm_order(&m);
        let mut seen = vec![false; n];
        for &p in &perm {
            assert!(!seen[p]);
            seen[p] = true;
        }
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let band = m
            .iter_upper()
            .filter(|&(i, j, _)| i != j)
            .map(|(i, j, _)| (iperm[i] as i64 - iperm[j] as i64).unsigned_abs())
            .max()
            .unwrap();
        assert!(band <= 2, "band {band} too wide for a chain");
    }

    #[test]
    fn projector_ops() {
        let a = Projector::from_rows(
            4,
            vec![
                vec![(0, 1.0), (2, 0.5)],
                vec![(1, 2.0)],
                vec![(0, 1.0), (0, 1.0)],
            ],
        );
        assert_eq!(a.nrows(), 3);
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let eta = a.mul_vec(&x);
        assert_eq!(eta, vec![2.5, 4.0, 2.0]);

        let w = vec![1.0, 2.0, 1.0];
        let h = a.atwa(&w).build().to_dense();
        // row0: [1,0,.5,0], row1: [0,2,0,0], row2: [2,0,0,0]
        assert!((h[(0, 0)] - (1.0 + 4.0)).abs() < 1e-14);
        assert!((h[(0, 2)] - 0.5).abs() < 1e-14);
        assert!((h[(1, 1)] - 8.0).abs() < 1e-14);

        let mut out = vec![0.0; 4];
        a.add_t_mul_vec(&[1.0, 1.0, 1.0], &mut out);
        assert_eq!(out, vec![3.0, 2.0, 0.5, 0.0]);
    }

    #[test]
    fn factor_samples_have_right_covariance_shape() {
        // Quick moment check on a 2x2 precision.
        let mut t = Triplets::new(2);
        t.push(0, 0, 2.0);
        t.push(1, 1, 1.0);
        t.push(0, 1, 0.5);
        let m = t.build();
        let f = m.factorize().unwrap();
        let cov = m.to_dense().try_inverse().unwrap();
        let mut rng = StdRng::seed_from_u64(77);
        let nsim = 40_000;
        let mut s = [0.0f64; 3];
        for _ in 0..nsim {
            let z: Vec<f64> = (0..2)
                .map(|_| {
                    let u: f64 = rng.random::<f64>().max(1e-12);
                    let v: f64 = rng.random();
                    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
                })
                .collect();
            let x = f.sample_from_white(&z);
            s[0] += x[0] * x[0];
            s[1] += x[0] * x[1];
            s[2] += x[1] * x[1];
        }
        for v in &mut s {
            *v /= nsim as f64;
        }
        assert!((s[0] - cov[(0, 0)]).abs() < 0.02);
        assert!((s[1] - cov[(0, 1)]).abs() < 0.02);
        assert!((s[2] - cov[(1, 1)]).abs() < 0.02);
    }
}
