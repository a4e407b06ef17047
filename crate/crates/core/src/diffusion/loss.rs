use autodiff::{Array, Tape, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use super::model::{Conditioning, DenoiserParams, Denoiser};
use super::schedule::{diffuse_with, NoiseSchedule};
use crate::error::{Error, Result};

/// Clean points with their condition tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Array,
    pub cond: Conditioning,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Same points with the first token replaced by `null` for every row.
    pub fn with_first_token(&self, embedding: &[f64]) -> Batch {
        let mut cond = self.cond.clone();
        cond.tokens[0] = Array::new(
            self.len(),
            embedding.len(),
            embedding.iter().copied().cycle().take(self.len() * embedding.len()).collect(),
        );
        Batch { x: self.x.clone(), cond }
    }
}

/// Timesteps and Gaussian noise for every row of a batch. Freezing a draw
/// makes the stochastic loss a deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws {
    pub t: Vec<usize>,
    pub eps: Array,
}

impl NoiseDraws {
    /// `t ~ U{1..T}`, `eps ~ N(0, I)`, drawn row by row.
    pub fn sample(rows: usize, dim: usize, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Self {
        let mut t = Vec::with_capacity(rows);
        let mut eps = Vec::with_capacity(rows * dim);
        for _ in 0..rows {
            t.push(rng.random_range(1..=schedule.steps()));
            for _ in 0..dim {
                eps.push(rng.sample::<f64, _>(StandardNormal));
            }
        }
        NoiseDraws { t, eps: Array::new(rows, dim, eps) }
    }

    /// Noisy inputs `x_t` for these draws.
    pub fn diffuse(&self, x: &Array, schedule: &NoiseSchedule) -> Result<Array> {
        if x.shape() != self.eps.shape() {
            return Err(Error::Shape(format!("x {:?} vs noise {:?}", x.shape(), self.eps.shape())));
        }
        let mut out = Vec::with_capacity(x.len());
        for (r, &t) in self.t.iter().enumerate() {
            schedule.check(t)?;
            out.extend(diffuse_with(x.row_slice(r), self.eps.row_slice(r), schedule.alpha_bar(t)));
        }
        Ok(Array::new(x.rows(), x.cols(), out))
    }
}

/// Mean over rows of `||a - b||^2`.
pub fn mean_sq_error<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let rows = a.shape().0;
    (a - b).square().sum().scale(1.0 / rows as f64)
}

/// Diffusion loss on the tape for fixed draws.
pub fn diffusion_loss_on<'t>(
    model: &Denoiser<'_>,
    theta: Var<'t>,
    batch: &Batch,
    draws: &NoiseDraws,
    schedule: &NoiseSchedule,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let tape = theta.tape();
    let x_t = tape.constant(draws.diffuse(&batch.x, schedule)?);
    let pred = model.predict_noise(theta, x_t, &draws.t, &batch.cond)?;
    Ok(mean_sq_error(tape.constant(draws.eps.clone()), pred))
}

/// Eager loss value for fixed draws.
pub fn diffusion_loss_value(
    params: &DenoiserParams,
    batch: &Batch,
    draws: &NoiseDraws,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let tape = Tape::new();
    let theta = tape.constant(params.as_row());
    let l = diffusion_loss_on(&Denoiser::new(params.config()), theta, batch, draws, schedule)?;
    Ok(l.item())
}

/// Loss value and gradient with respect to the flat parameters.
pub fn diffusion_loss_grad(
    params: &DenoiserParams,
    batch: &Batch,
    draws: &NoiseDraws,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let theta = tape.leaf(params.as_row());
    let l = diffusion_loss_on(&Denoiser::new(params.config()), theta, batch, draws, schedule)?;
    let g = tape.grad(l, &[theta])?;
    let grad = g[0].value().data().to_vec();
    Ok((l.item(), grad))
}

/// `E ||eps - eps_theta(x_t, c)||^2` with `t` and `eps` drawn from `rng`.
pub fn diffusion_loss(
    params: &DenoiserParams,
    batch: &Batch,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let draws = NoiseDraws::sample(batch.len(), params.config().data_dim, schedule, rng);
    diffusion_loss_value(params, batch, &draws, schedule)
}
