use autodiff::{Array, Tape, Var};
use rand::Rng;

use crate::concepts::ConceptTable;
use crate::diffusion::{mean_sq_error, Batch, DenoiserParams, Denoiser, NoiseDraws, NoiseSchedule};
use crate::error::{Error, Result};

/// `eps_null - eta (eps_c - eps_null)`
pub fn esd_target(eps_c: &Array, eps_null: &Array, eta: f64) -> Array {
    assert_eq!(eps_c.shape(), eps_null.shape(), "esd target shapes");
    eps_c.zip_with(eps_null, |c, u| u - eta * (c - u))
}

/// Frozen-model targets for a forget batch.
pub fn esd_targets(
    frozen: &DenoiserParams,
    batch: &Batch,
    draws: &NoiseDraws,
    eta: f64,
    table: &ConceptTable,
    s: &NoiseSchedule,
) -> Result<Array> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let x_t = draws.diffuse(&batch.x, s)?;
    let eps_c = frozen.predict(&x_t, &draws.t, &batch.cond)?;
    let null = batch.with_first_token(table.null_embedding());
    let eps_u = frozen.predict(&x_t, &draws.t, &null.cond)?;
    Ok(esd_target(&eps_c, &eps_u, eta))
}

/// `mean ||eps_theta(x_t, c) - target||^2` on the tape.
pub fn esd_loss_on<'t>(
    model: &Denoiser<'_>,
    theta: Var<'t>,
    batch: &Batch,
    draws: &NoiseDraws,
    target: &Array,
    s: &NoiseSchedule,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let tape = theta.tape();
    let x_t = tape.constant(draws.diffuse(&batch.x, s)?);
    let pred = model.predict_noise(theta, x_t, &draws.t, &batch.cond)?;
    Ok(mean_sq_error(pred, tape.constant(target.clone())))
}

/// ESD loss of `theta` against the frozen model, drawing `t` and noise.
pub fn esd_loss(
    theta: &DenoiserParams,
    frozen: &DenoiserParams,
    batch: &Batch,
    eta: f64,
    table: &ConceptTable,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let draws = NoiseDraws::sample(batch.len(), theta.config().data_dim, s, rng);
    let target = esd_targets(frozen, batch, &draws, eta, table, s)?;
    let tape = Tape::new();
    let th = tape.constant(theta.as_row());
    Ok(esd_loss_on(&Denoiser::new(theta.config()), th, batch, &draws, &target, s)?.item())
}

/// `mean ||eps_theta(x_t, c) - sg(eps_teacher(x_t, null))||^2` on the tape.
#[allow(clippy::too_many_arguments)]
pub fn sdd_loss_on<'t>(
    model: &Denoiser<'_>,
    theta: Var<'t>,
    teacher: Var<'t>,
    batch: &Batch,
    draws: &NoiseDraws,
    table: &ConceptTable,
    s: &NoiseSchedule,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let tape = theta.tape();
    let x_t = tape.constant(draws.diffuse(&batch.x, s)?);
    let pred = model.predict_noise(theta, x_t, &draws.t, &batch.cond)?;
    let null = batch.with_first_token(table.null_embedding());
    let target = model.predict_noise(teacher, x_t, &draws.t, &null.cond)?.stop_gradient();
    Ok(mean_sq_error(pred, target))
}

pub fn sdd_loss(
    theta: &DenoiserParams,
    teacher: &DenoiserParams,
    batch: &Batch,
    table: &ConceptTable,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let draws = NoiseDraws::sample(batch.len(), theta.config().data_dim, s, rng);
    let tape = Tape::new();
    let th = tape.constant(theta.as_row());
    let te = tape.constant(teacher.as_row());
    Ok(sdd_loss_on(&Denoiser::new(theta.config()), th, te, batch, &draws, table, s)?.item())
}

/// `teacher <- mu teacher + (1 - mu) student`
pub fn ema_update(teacher: &mut [f64], student: &[f64], mu: f64) {
    assert_eq!(teacher.len(), student.len(), "ema lengths");
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = mu * *t + (1.0 - mu) * s;
    }
}
