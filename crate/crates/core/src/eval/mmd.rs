use autodiff::Array;

use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled rows.
pub fn median_bandwidth(x: &Array, y: &Array) -> f64 {
    let rows: Vec<&[f64]> = (0..x.rows()).map(|i| x.row_slice(i)).chain((0..y.rows()).map(|i| y.row_slice(i))).collect();
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = m.sqrt();
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Unbiased squared MMD with kernel `exp(-|a - b|^2 / (2 h^2))`.
pub fn mmd2_unbiased_with(x: &Array, y: &Array, h: f64) -> Result<f64> {
    let (n, m) = (x.rows(), y.rows());
    if n < 2 || m < 2 {
        return Err(Error::config("eval.mmd", "needs at least 2 samples per side"));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!("mmd inputs {:?} vs {:?}", x.shape(), y.shape())));
    }
    let g = 1.0 / (2.0 * h * h);
    let k = |a: &[f64], b: &[f64]| (-g * sq_dist(a, b)).exp();
    let within = |s: &Array| {
        let mut acc = 0.0;
        for i in 0..s.rows() {
            for j in i + 1..s.rows() {
                acc += k(s.row_slice(i), s.row_slice(j));
            }
        }
        2.0 * acc / (s.rows() * (s.rows() - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += k(x.row_slice(i), y.row_slice(j));
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (n * m) as f64)
}

/// Unbiased squared MMD with the median-heuristic bandwidth.
pub fn mmd2_unbiased(x: &Array, y: &Array) -> Result<f64> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::config("eval.mmd", "needs at least 2 samples per side"));
    }
    mmd2_unbiased_with(x, y, median_bandwidth(x, y))
}
