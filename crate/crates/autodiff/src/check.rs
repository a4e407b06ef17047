//! Central finite-difference checks for analytic gradients.

use crate::array::Array;
use crate::error::AdError;
use crate::tape::{Tape, Var};

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing an analytic gradient against central differences.
///
/// The deviation of component `i` is `|a_i - n_i| / max(|a_i|, |n_i|, floor)`
/// with `floor = 1e-3 * max(|a|_inf, |n|_inf)`, so components that are tiny
/// relative to the gradient's scale are judged on the gradient's scale.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

/// Relative deviation used by [`FdReport`].
pub fn max_relative_deviation(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return (0.0, 0);
    }
    let floor = 1e-3 * scale;
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let dev = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if dev > worst.0 || dev.is_nan() {
            worst = (dev, i);
        }
    }
    worst
}

/// Central differences of `f` around `theta`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, theta: &[f64], step: f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares a supplied gradient against central differences of `f`.
pub fn fd_check_with(
    f: impl Fn(&[f64]) -> f64,
    analytic: &[f64],
    theta: &[f64],
    step: f64,
    tol: f64,
) -> FdReport {
    let numeric = central_differences(f, theta, step);
    let (max_rel_error, worst_index) = max_relative_deviation(analytic, &numeric);
    FdReport {
        max_rel_error,
        worst_index,
        analytic: analytic.to_vec(),
        numeric,
        tol,
        passed: max_rel_error < tol,
    }
}

/// Checks the tape gradient of a scalar expression of one matrix input.
pub fn fd_check<F>(f: F, theta: &Array, tol: f64) -> Result<FdReport, AdError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let (rows, cols) = theta.shape();
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(theta.clone());
        let out = f(&tape, x);
        let g = tape.grad(out, &[x])?;
        g[0].value().data().to_vec()
    };
    let eval = |p: &[f64]| {
        let tape = Tape::new();
        let x = tape.constant(Array::new(rows, cols, p.to_vec()));
        f(&tape, x).item()
    };
    Ok(fd_check_with(eval, &analytic, theta.data(), DEFAULT_STEP, tol))
}
