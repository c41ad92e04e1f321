//! Up-looking sparse LDL^T factorization over an elimination tree, in the
//! style of Davis' LDL. The matrix is permuted by the fill-reducing order
//! computed once per pattern; solves and samples map back to the original
//! index space.

use super::{rcm_order, SparseSym};
use crate::error::{Error, Result};

/// Pattern-level analysis: permutation, elimination tree and column counts
/// of the factor. Valid for any matrix with the same sparsity pattern.
#[derive(Debug, Clone)]
pub struct Symbolic {
    n: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    parent: Vec<i64>,
    /// Column pointers of L (strictly lower part, unit diagonal implied).
    lp: Vec<usize>,
    /// Permuted upper-triangle pattern, CSC.
    ap: Vec<usize>,
    ai: Vec<usize>,
    /// Maps permuted CSC slots back to the source value slot.
    aval_src: Vec<usize>,
}

impl Symbolic {
    pub fn new(a: &SparseSym) -> Self {
        let n = a.n();
        let perm = rcm_order(a);
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // Build the permuted upper-triangle pattern with a source map so
        // numeric factorizations can refill values without re-sorting.
        let mut entries: Vec<(usize, usize, usize)> = Vec::with_capacity(a.nnz_upper());
        let mut src = 0usize;
        for (i, j, _) in a.iter_upper() {
            let (pi, pj) = (iperm[i], iperm[j]);
            let (r, c) = if pi <= pj { (pi, pj) } else { (pj, pi) };
            entries.push((r, c, src));
            src += 1;
        }
        entries.sort_by(|x, y| (x.1, x.0).cmp(&(y.1, y.0)));
        let mut ap = vec![0usize; n + 1];
        let mut ai = Vec::with_capacity(entries.len());
        let mut aval_src = Vec::with_capacity(entries.len());
        for &(r, c, s) in &entries {
            ai.push(r);
            aval_src.push(s);
            ap[c + 1] += 1;
        }
        for j in 0..n {
            ap[j + 1] += ap[j];
        }

        // Elimination tree and column counts.
        let mut parent = vec![-1i64; n];
        let mut lnz = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        for k in 0..n {
            flag[k] = k;
            for p in ap[k]..ap[k + 1] {
                let mut i = ai[p];
                while i < k && flag[i] != k {
                    if parent[i] == -1 {
                        parent[i] = k as i64;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i] as usize;
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        Self {
            n,
            perm,
            parent,
            lp,
            ap,
            ai,
            aval_src,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.lp[self.n]
    }

    /// Numeric factorization of a matrix sharing this pattern. Fails with
    /// `NotPositiveDefinite` on a non-positive pivot.
    pub fn factorize(&self, a: &SparseSym) -> Result<LdlFactor> {
        assert_eq!(a.nnz_upper(), self.aval_src.len(), "pattern mismatch");
        let n = self.n;
        // Gather source values in one pass (iter_upper order == src order).
        let src_values: Vec<f64> = a.iter_upper().map(|(_, _, v)| v).collect();

        let mut li = vec![0usize; self.lp[n]];
        let mut lx = vec![0.0f64; self.lp[n]];
        let mut d = vec![0.0f64; n];
        let mut y = vec![0.0f64; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];

        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            y[k] = 0.0;
            for p in self.ap[k]..self.ap[k + 1] {
                let i = self.ai[p];
                if i > k {
                    continue;
                }
                y[i] += src_values[self.aval_src[p]];
                let mut len = 0usize;
                let mut ii = i;
                while flag[ii] != k {
                    pattern[len] = ii;
                    len += 1;
                    flag[ii] = k;
                    ii = self.parent[ii] as usize;
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for t in top..n {
                let i = pattern[t];
                let yi = y[i];
                y[i] = 0.0;
                let p2 = self.lp[i] + lnz[i];
                for p in self.lp[i]..p2 {
                    y[li[p]] -= lx[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                li[p2] = k;
                lx[p2] = l_ki;
                lnz[i] += 1;
            }
            if !(d[k] > 0.0) || !d[k].is_finite() {
                return Err(Error::NotPositiveDefinite(k));
            }
        }
        Ok(LdlFactor {
            n,
            perm: self.perm.clone(),
            lp: self.lp.clone(),
            li,
            lx,
            d,
        })
    }
}

/// Numeric LDL^T factor of a permuted SPD matrix.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
}

impl LdlFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    /// log det of the factorized matrix.
    pub fn log_det(&self) -> f64 {
        self.d.iter().map(|&v| v.ln()).sum()
    }

    fn lsolve(&self, y: &mut [f64]) {
        for j in 0..self.n {
            let yj = y[j];
            for p in self.lp[j]..self.lp[j + 1] {
                y[self.li[p]] -= self.lx[p] * yj;
            }
        }
    }

    fn dsolve(&self, y: &mut [f64]) {
        for j in 0..self.n {
            y[j] /= self.d[j];
        }
    }

    fn ltsolve(&self, y: &mut [f64]) {
        for j in (0..self.n).rev() {
            let mut acc = y[j];
            for p in self.lp[j]..self.lp[j + 1] {
                acc -= self.lx[p] * y[self.li[p]];
            }
            y[j] = acc;
        }
    }

    /// Solve A x = b in place (original index space).
    pub fn solve_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        let mut y: Vec<f64> = (0..self.n).map(|k| b[self.perm[k]]).collect();
        self.lsolve(&mut y);
        self.dsolve(&mut y);
        self.ltsolve(&mut y);
        for k in 0..self.n {
            b[self.perm[k]] = y[k];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// (A^-1)_{jj} for one index without forming the inverse: solve A x = e_j.
    pub fn inverse_diagonal_entry(&self, j: usize) -> f64 {
        let mut e = vec![0.0; self.n];
        e[j] = 1.0;
        self.solve_in_place(&mut e);
        e[j]
    }

    /// Map white noise z ~ N(0, I) to x ~ N(0, A^-1):
    /// x = P^T L^-T D^-1/2 z.
    pub fn sample_from_white(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.n);
        let mut y: Vec<f64> = (0..self.n).map(|k| z[k] / self.d[k].sqrt()).collect();
        self.ltsolve(&mut y);
        let mut x = vec![0.0; self.n];
        for k in 0..self.n {
            x[self.perm[k]] = y[k];
        }
        x
    }
}
