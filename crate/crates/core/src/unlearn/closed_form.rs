//! Closed-form edits of the attention projections.
//!
//! Matrices act on column embeddings (`W e`). The UCE objective
//!
//! ```text
//! sum_f |W e_f - W* e_0|^2 + l1 sum_r |W e_r - W* e_r|^2 + l2 |W - W*|_F^2
//! ```
//!
//! is quadratic in `W`; zeroing its gradient gives
//! `W A = B` with `A = sum_f e_f e_f^T + l1 sum_r e_r e_r^T + l2 I` and
//! `B = sum_f W* e_0 e_f^T + l1 sum_r W* e_r e_r^T + l2 W*`.

use autodiff::Array;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn to_na(a: &Array) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

fn from_na(m: &DMatrix<f64>) -> Array {
    let mut out = Array::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.set(r, c, m[(r, c)]);
        }
    }
    out
}

fn outer_sum(a: &mut DMatrix<f64>, u: &DVector<f64>, v: &DVector<f64>, w: f64) {
    *a += w * u * v.transpose();
}

/// Inputs shared by the UCE objective, gradient and solver.
#[derive(Clone, Debug)]
pub struct UceProblem<'a> {
    pub forget: &'a [Vec<f64>],
    pub retain: &'a [Vec<f64>],
    /// Embedding whose original output the forget embeddings are mapped to.
    pub target: &'a [f64],
    pub lambda1: f64,
    pub lambda2: f64,
}

impl UceProblem<'_> {
    fn check(&self, w_star: &Array) -> Result<()> {
        if !(self.lambda2 > 0.0) {
            return Err(Error::config("unlearn.lambda2", "must be positive"));
        }
        if self.lambda1 < 0.0 {
            return Err(Error::config("unlearn.lambda1", "must be non-negative"));
        }
        let k = w_star.cols();
        let bad = self.forget.iter().chain(self.retain).any(|e| e.len() != k) || self.target.len() != k;
        if bad {
            return Err(Error::Shape(format!("embeddings must have dimension {k}")));
        }
        Ok(())
    }

    pub fn objective(&self, w: &Array, w_star: &Array) -> f64 {
        let (w, ws) = (to_na(w), to_na(w_star));
        let tgt = &ws * DVector::from_column_slice(self.target);
        let mut acc = 0.0;
        for e in self.forget {
            acc += (&w * DVector::from_column_slice(e) - &tgt).norm_squared();
        }
        for e in self.retain {
            let e = DVector::from_column_slice(e);
            acc += self.lambda1 * (&w * &e - &ws * &e).norm_squared();
        }
        acc + self.lambda2 * (&w - &ws).norm_squared()
    }

    pub fn gradient(&self, w: &Array, w_star: &Array) -> Array {
        let (w, ws) = (to_na(w), to_na(w_star));
        let tgt = &ws * DVector::from_column_slice(self.target);
        let mut g = 2.0 * self.lambda2 * (&w - &ws);
        for e in self.forget {
            let e = DVector::from_column_slice(e);
            outer_sum(&mut g, &(&w * &e - &tgt), &e, 2.0);
        }
        for e in self.retain {
            let e = DVector::from_column_slice(e);
            outer_sum(&mut g, &(&w * &e - &ws * &e), &e, 2.0 * self.lambda1);
        }
        from_na(&g)
    }

    /// Minimizer for one matrix.
    pub fn solve(&self, w_star: &Array) -> Result<Array> {
        self.check(w_star)?;
        let k = w_star.cols();
        let ws = to_na(w_star);
        let tgt = &ws * DVector::from_column_slice(self.target);
        let mut a = self.lambda2 * DMatrix::<f64>::identity(k, k);
        let mut b = self.lambda2 * &ws;
        for e in self.forget {
            let e = DVector::from_column_slice(e);
            outer_sum(&mut a, &e, &e, 1.0);
            outer_sum(&mut b, &tgt, &e, 1.0);
        }
        for e in self.retain {
            let e = DVector::from_column_slice(e);
            outer_sum(&mut a, &e, &e, self.lambda1);
            outer_sum(&mut b, &(&ws * &e), &e, self.lambda1);
        }
        // A is symmetric, so W = B A^-1 solves A W^T = B^T
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Numerical("UCE normal equations are not positive definite".into()))?;
        let wt = chol.solve(&b.transpose());
        let w = from_na(&wt.transpose());
        if !w.all_finite() {
            return Err(Error::Numerical("UCE solution is not finite".into()));
        }
        Ok(w)
    }
}

/// Edits every matrix in `w_star` independently.
pub fn uce_solve(w_star: &[Array], problem: &UceProblem<'_>) -> Result<Vec<Array>> {
    w_star.iter().map(|w| problem.solve(w)).collect()
}

/// Ridge objective `sum_i |W~_i e - W*_i e_f|^2 + lambda |e|^2`.
pub fn rece_objective(edited: &[Array], w_star: &[Array], e_f: &[f64], lambda: f64, e: &[f64]) -> f64 {
    let (e, ef) = (DVector::from_column_slice(e), DVector::from_column_slice(e_f));
    let mut acc = lambda * e.norm_squared();
    for (wt, ws) in edited.iter().zip(w_star) {
        acc += (to_na(wt) * &e - to_na(ws) * &ef).norm_squared();
    }
    acc
}

pub fn rece_gradient(edited: &[Array], w_star: &[Array], e_f: &[f64], lambda: f64, e: &[f64]) -> Vec<f64> {
    let (e, ef) = (DVector::from_column_slice(e), DVector::from_column_slice(e_f));
    let mut g = 2.0 * lambda * &e;
    for (wt, ws) in edited.iter().zip(w_star) {
        let wt = to_na(wt);
        g += 2.0 * wt.transpose() * (&wt * &e - to_na(ws) * &ef);
    }
    g.iter().copied().collect()
}

/// `e' = (sum W~^T W~ + lambda I)^-1 sum W~^T W* e_f`
pub fn rece_embedding(edited: &[Array], w_star: &[Array], e_f: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if lambda < 0.0 {
        return Err(Error::config("unlearn.lambda_rece", "must be non-negative"));
    }
    if edited.len() != w_star.len() || edited.is_empty() {
        return Err(Error::Shape("edited and original matrix lists differ".into()));
    }
    let k = e_f.len();
    let ef = DVector::from_column_slice(e_f);
    let mut a = lambda * DMatrix::<f64>::identity(k, k);
    let mut b = DVector::<f64>::zeros(k);
    for (wt, ws) in edited.iter().zip(w_star) {
        if wt.cols() != k || ws.cols() != k || wt.rows() != ws.rows() {
            return Err(Error::Shape("RECE matrix shapes".into()));
        }
        let wt = to_na(wt);
        a += wt.transpose() * &wt;
        b += wt.transpose() * (to_na(ws) * &ef);
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numerical("RECE system is singular".into()))?;
    let e = chol.solve(&b);
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("RECE embedding is not finite".into()));
    }
    Ok(e.iter().copied().collect())
}

/// Output of the iterative RECE edit.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceResult {
    pub matrices: Vec<Array>,
    /// Erasing embeddings in construction order.
    pub embeddings: Vec<Vec<f64>>,
}

/// UCE, then `iters` rounds of: find an embedding that still elicits the
/// forget concept from the edited matrices, add it to the forget set and
/// re-solve from the originals.
pub fn rece_solve(w_star: &[Array], problem: &UceProblem<'_>, lambda_rece: f64, iters: usize) -> Result<ReceResult> {
    if iters == 0 {
        return Err(Error::config("unlearn.rece_iters", "must be at least 1"));
    }
    let e_f = problem
        .forget
        .first()
        .ok_or_else(|| Error::config("unlearn.forget", "RECE needs a forget concept"))?
        .clone();
    let mut forget = problem.forget.to_vec();
    let mut edited = uce_solve(w_star, problem)?;
    let mut embeddings = Vec::with_capacity(iters);
    for _ in 0..iters {
        let e = rece_embedding(&edited, w_star, &e_f, lambda_rece)?;
        forget.push(e.clone());
        embeddings.push(e);
        let p = UceProblem { forget: &forget, ..problem.clone() };
        edited = uce_solve(w_star, &p)?;
    }
    Ok(ReceResult { matrices: edited, embeddings })
}
