use autodiff::Array;
use rand::Rng;
use rand_distr::StandardNormal;

use super::model::{Conditioning, DenoiserParams};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

fn normal_array(rows: usize, cols: usize, rng: &mut impl Rng) -> Array {
    Array::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// One reverse step `x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t) + sigma_t z`,
/// with `z = 0` at `t = 1`.
pub fn reverse_step(x_t: &Array, eps_hat: &Array, t: usize, s: &NoiseSchedule, z: Option<&Array>) -> Array {
    let coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
    let mean = x_t.zip_with(eps_hat, |x, e| (x - coef * e) * inv_sqrt_alpha);
    match z {
        Some(z) if t > 1 => mean.zip_with(z, |m, n| m + s.sigma(t) * n),
        _ => mean,
    }
}

/// Ancestral sampling of `n` points under a fixed condition.
///
/// `cond_row` holds one row per token (each `[1, cond_dim]`); it is
/// broadcast over the batch.
pub fn sample(
    params: &DenoiserParams,
    cond_row: &Conditioning,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
    n: usize,
) -> Result<Array> {
    if n == 0 {
        return Err(Error::config("sample.n", "must be at least 1"));
    }
    let cfg = params.config();
    if cond_row.tokens.iter().any(|t| t.rows() != 1) {
        return Err(Error::Shape("sampling condition must be a single row per token".into()));
    }
    let cond = Conditioning {
        tokens: cond_row.tokens.iter().map(|t| t.broadcast_rows(n)).collect(),
    };
    let mut x = normal_array(n, cfg.data_dim, rng);
    for t in (1..=s.steps()).rev() {
        let steps = vec![t; n];
        let eps_hat = params.predict(&x, &steps, &cond)?;
        let z = (t > 1).then(|| normal_array(n, cfg.data_dim, rng));
        x = reverse_step(&x, &eps_hat, t, s, z.as_ref());
        if !x.all_finite() {
            return Err(Error::Numerical(format!("sampler produced non-finite values at t={t}")));
        }
    }
    Ok(x)
}
