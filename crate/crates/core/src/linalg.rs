//! Cholesky factorization and triangular solves for symmetric positive-definite
//! covariance matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Jitter added to the diagonal on the first retry.
pub const JITTER_START: f64 = 1e-9;
/// Largest jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-3;

/// Lower-triangular factor `L` with `L L^T = A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cholesky {
    lower: Tensor2,
    /// Diagonal jitter that had to be added for the factorization to succeed.
    jitter: f64,
}

impl Cholesky {
    /// Factors `m`, retrying with `eps * I` added for
    /// `eps = 1e-9, 1e-8, ..., 1e-3` when a pivot is not positive.
    pub fn factor(m: &Tensor2) -> Result<Cholesky> {
        if m.rows() != m.cols() {
            return Err(Error::dim(
                "cholesky",
                format!("{}x{} is not square", m.rows(), m.cols()),
            ));
        }
        if !m.is_symmetric(1e-10) {
            return Err(Error::Contract("cholesky input is not symmetric".into()));
        }
        if !m.is_finite() {
            return Err(Error::Numeric("cholesky input has non-finite entries".into()));
        }
        let mut last = match Self::factor_exact(m, 0.0) {
            Ok(lower) => return Ok(Cholesky { lower, jitter: 0.0 }),
            Err(e) => e,
        };
        let mut eps = JITTER_START;
        while eps <= JITTER_MAX * (1.0 + 1e-12) {
            match Self::factor_exact(m, eps) {
                Ok(lower) => return Ok(Cholesky { lower, jitter: eps }),
                Err(e) => last = e,
            }
            eps *= 10.0;
        }
        Err(last)
    }

    /// Plain Cholesky–Banachiewicz with a fixed diagonal shift and no retry.
    pub fn factor_exact(m: &Tensor2, shift: f64) -> Result<Tensor2> {
        let n = m.rows();
        let mut l = Tensor2::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = m[(i, j)];
                if i == j {
                    s += shift;
                }
                for p in 0..j {
                    s -= l[(i, p)] * l[(j, p)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite {
                            pivot: i,
                            value: s,
                            jitter: shift,
                        });
                    }
                    l[(i, i)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Ok(l)
    }

    pub fn from_lower(lower: Tensor2) -> Result<Cholesky> {
        if lower.rows() != lower.cols() {
            return Err(Error::dim("cholesky", "factor must be square"));
        }
        for i in 0..lower.rows() {
            if !(lower[(i, i)] > 0.0) {
                return Err(Error::Contract(format!(
                    "cholesky diagonal entry {i} is not positive"
                )));
            }
            for j in i + 1..lower.cols() {
                if lower[(i, j)] != 0.0 {
                    return Err(Error::Contract("factor is not lower triangular".into()));
                }
            }
        }
        Ok(Cholesky { lower, jitter: 0.0 })
    }

    pub fn lower(&self) -> &Tensor2 {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L L^T`.
    pub fn reconstruct(&self) -> Tensor2 {
        self.lower
            .matmul_t(&self.lower)
            .expect("square factor always multiplies with its transpose")
    }

    /// `log det(L L^T) = 2 * sum(log L_ii)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.lower[(i, i)].ln()).sum::<f64>()
    }

    /// Forward substitution on a single vector in place: `L x = b`.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let l = &self.lower;
        for i in 0..b.len() {
            let mut s = b[i];
            let row = l.row(i);
            for p in 0..i {
                s -= row[p] * b[p];
            }
            b[i] = s / row[i];
        }
    }

    /// Back substitution on a single vector in place: `L^T x = b`.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let l = &self.lower;
        let n = b.len();
        for i in (0..n).rev() {
            let mut s = b[i];
            for p in i + 1..n {
                s -= l[(p, i)] * b[p];
            }
            b[i] = s / l[(i, i)];
        }
    }

    /// Solves `A x = rhs` column by column via the two triangular solves.
    pub fn solve(&self, rhs: &Tensor2) -> Result<Tensor2> {
        let mut x = solve_triangular(self, rhs)?;
        let mut col = vec![0.0; x.rows()];
        for c in 0..x.cols() {
            for (r, v) in col.iter_mut().enumerate() {
                *v = x[(r, c)];
            }
            self.backward_in_place(&mut col);
            for (r, v) in col.iter().enumerate() {
                x[(r, c)] = *v;
            }
        }
        Ok(x)
    }

    /// `A^{-1}`, only for oracles and diagnostics.
    pub fn inverse(&self) -> Tensor2 {
        self.solve(&Tensor2::identity(self.dim()))
            .expect("identity has matching dimension")
    }
}

/// Solves `L x = rhs` for every column of `rhs` by forward substitution.
pub fn solve_triangular(c: &Cholesky, rhs: &Tensor2) -> Result<Tensor2> {
    if rhs.rows() != c.dim() {
        return Err(Error::dim(
            "solve_triangular",
            format!("factor is {0}x{0}, rhs has {1} rows", c.dim(), rhs.rows()),
        ));
    }
    let mut x = rhs.clone();
    let mut col = vec![0.0; rhs.rows()];
    for j in 0..rhs.cols() {
        for (r, v) in col.iter_mut().enumerate() {
            *v = rhs[(r, j)];
        }
        c.forward_in_place(&mut col);
        for (r, v) in col.iter().enumerate() {
            x[(r, j)] = *v;
        }
    }
    Ok(x)
}

/// Inverse by Gauss–Jordan elimination with partial pivoting.
///
/// Independent of the Cholesky path; used as an oracle in tests.
pub fn gauss_jordan_inverse(m: &Tensor2) -> Result<Tensor2> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::dim("inverse", "matrix must be square"));
    }
    let mut a = m.clone();
    let mut inv = Tensor2::identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap();
        if a[(pivot, col)].abs() < 1e-300 {
            return Err(Error::Numeric("singular matrix".into()));
        }
        if pivot != col {
            for c in 0..n {
                let t = a[(col, c)];
                a[(col, c)] = a[(pivot, c)];
                a[(pivot, c)] = t;
                let t = inv[(col, c)];
                inv[(col, c)] = inv[(pivot, c)];
                inv[(pivot, c)] = t;
            }
        }
        let d = a[(col, col)];
        for c in 0..n {
            a[(col, c)] /= d;
            inv[(col, c)] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[(r, col)];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                a[(r, c)] -= f * a[(col, c)];
                inv[(r, c)] -= f * inv[(col, c)];
            }
        }
    }
    Ok(inv)
}
