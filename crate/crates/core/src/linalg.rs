//! Sparse linear algebra for the small systems that show up here: generator
//! sub-blocks that are (weakly) diagonally dominant M-matrices up to sign.
//!
//! Banded LU without pivoting is used below [`DIRECT_SOLVE_LIMIT`] unknowns
//! and Jacobi-preconditioned BiCGSTAB above it.

use crate::error::{Error, Result};

/// Node count above which systems are solved iteratively.
pub const DIRECT_SOLVE_LIMIT: usize = 40_000;

/// Compressed sparse rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(col, value)` lists. Duplicate columns are not
    /// merged.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                rows[c].push((i, v));
            }
        }
        Self::from_rows(rows)
    }

    /// Drops row and column `skip`, renumbering the rest.
    pub fn without(&self, skip: usize) -> Self {
        let map = |c: usize| if c > skip { c - 1 } else { c };
        let rows = (0..self.n)
            .filter(|&i| i != skip)
            .map(|i| {
                self.row(i)
                    .filter(|&(c, _)| c != skip)
                    .map(|(c, v)| (map(c), v))
                    .collect()
            })
            .collect();
        Self::from_rows(rows)
    }

    fn bandwidth(&self) -> (usize, usize) {
        let (mut kl, mut ku) = (0, 0);
        for i in 0..self.n {
            for (c, _) in self.row(i) {
                if c < i {
                    kl = kl.max(i - c);
                } else {
                    ku = ku.max(c - i);
                }
            }
        }
        (kl, ku)
    }
}

/// A reusable factorization or iterative solver for one matrix.
pub enum Solver {
    Banded(BandedLu),
    Iterative(Bicgstab),
}

impl Solver {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        if a.len() <= DIRECT_SOLVE_LIMIT {
            BandedLu::factor(a).map(Solver::Banded)
        } else {
            Ok(Solver::Iterative(Bicgstab::new(a.clone())))
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            Solver::Banded(lu) => Ok(lu.solve(b)),
            Solver::Iterative(it) => it.solve(b),
        }
    }
}

/// LU factors of a banded matrix stored row-wise, no pivoting.
pub struct BandedLu {
    n: usize,
    kl: usize,
    width: usize,
    // Row i holds columns i-kl ..= i+ku.
    data: Vec<f64>,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.len();
        let (kl, ku) = a.bandwidth();
        let width = kl + ku + 1;
        let mut data = vec![0.0; n * width];
        for i in 0..n {
            for (c, v) in a.row(i) {
                data[i * width + (c + kl - i)] += v;
            }
        }
        let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let at = |i: usize, j: usize| i * width + (j + kl - i);
        for k in 0..n {
            let pivot = data[at(k, k)];
            if !(pivot.abs() > 1e-13 * scale) {
                return Err(Error::Singular(format!("zero pivot at row {k}")));
            }
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + ku).min(n - 1);
            for i in k + 1..=last_row {
                let l = data[at(i, k)] / pivot;
                if l == 0.0 {
                    continue;
                }
                data[at(i, k)] = l;
                for j in k + 1..=last_col {
                    let u = data[at(k, j)];
                    data[at(i, j)] -= l * u;
                }
            }
        }
        Ok(Self { n, kl, width, data })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kl, width) = (self.n, self.kl, self.width);
        let ku = width - kl - 1;
        let at = |i: usize, j: usize| i * width + (j + kl - i);
        let mut x = b.to_vec();
        for i in 0..n {
            let first = i.saturating_sub(kl);
            let mut s = x[i];
            for j in first..i {
                s -= self.data[at(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let last = (i + ku).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=last {
                s -= self.data[at(i, j)] * x[j];
            }
            x[i] = s / self.data[at(i, i)];
        }
        x
    }
}

/// Jacobi-preconditioned BiCGSTAB.
pub struct Bicgstab {
    a: CsrMatrix,
    inv_diag: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Bicgstab {
    pub fn new(a: CsrMatrix) -> Self {
        let inv_diag = (0..a.len())
            .map(|i| {
                let d: f64 = a.row(i).filter(|&(c, _)| c == i).map(|(_, v)| v).sum();
                if d != 0.0 {
                    1.0 / d
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            a,
            inv_diag,
            tol: 1e-13,
            max_iter: 20_000,
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = b.len();
        let dot = |u: &[f64], v: &[f64]| -> f64 { u.iter().zip(v).map(|(a, b)| a * b).sum() };
        let bnorm = dot(b, b).sqrt();
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut r = b.to_vec();
        let r_hat = r.clone();
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut s = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut t = vec![0.0; n];
        for _ in 0..self.max_iter {
            let rho_new = dot(&r_hat, &r);
            if rho_new == 0.0 {
                return Err(Error::Singular("BiCGSTAB breakdown (rho = 0)".into()));
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
                y[i] = self.inv_diag[i] * p[i];
            }
            self.a.mul_vec(&y, &mut v);
            alpha = rho / dot(&r_hat, &v);
            for i in 0..n {
                s[i] = r[i] - alpha * v[i];
            }
            if dot(&s, &s).sqrt() <= self.tol * bnorm {
                for i in 0..n {
                    x[i] += alpha * y[i];
                }
                return Ok(x);
            }
            for i in 0..n {
                z[i] = self.inv_diag[i] * s[i];
            }
            self.a.mul_vec(&z, &mut t);
            omega = dot(&t, &s) / dot(&t, &t);
            for i in 0..n {
                x[i] += alpha * y[i] + omega * z[i];
                r[i] = s[i] - omega * t[i];
            }
            if dot(&r, &r).sqrt() <= self.tol * bnorm {
                return Ok(x);
            }
            if omega == 0.0 || !omega.is_finite() {
                return Err(Error::Singular("BiCGSTAB breakdown (omega = 0)".into()));
            }
        }
        Err(Error::Singular(format!(
            "BiCGSTAB did not converge in {} iterations",
            self.max_iter
        )))
    }
}

/// Pairwise summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> CsrMatrix {
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![(i, 4.0)];
                if i > 0 {
                    r.push((i - 1, -1.0));
                }
                if i + 1 < n {
                    r.push((i + 1, -1.5));
                }
                r
            })
            .collect();
        CsrMatrix::from_rows(rows)
    }

    #[test]
    fn banded_and_iterative_agree() {
        let a = tridiag(50);
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let x1 = BandedLu::factor(&a).unwrap().solve(&b);
        let x2 = Bicgstab::new(a.clone()).solve(&b).unwrap();
        let mut ax = vec![0.0; 50];
        a.mul_vec(&x1, &mut ax);
        for i in 0..50 {
            assert!((ax[i] - b[i]).abs() < 1e-12);
            assert!((x1[i] - x2[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn without_removes_row_and_column() {
        let a = tridiag(4).without(1);
        assert_eq!(a.len(), 3);
        assert_eq!(a.row(0).collect::<Vec<_>>(), vec![(0, 4.0)]);
        assert_eq!(a.row(1).collect::<Vec<_>>(), vec![(1, 4.0), (2, -1.5)]);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = CsrMatrix::from_rows(vec![vec![(0, 1.0), (1, -1.0)], vec![(0, -1.0), (1, 1.0)]]);
        assert!(matches!(BandedLu::factor(&a), Err(Error::Singular(_))));
    }

    #[test]
    fn pairwise_sum_matches_naive_on_exact_data() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }
}
