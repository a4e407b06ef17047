//! Baseline concept-erasure methods producing an unlearned model from a
//! pretrained one: two finetuning objectives (ESD, SDD) and two closed-form
//! attention edits (UCE, RECE).

mod closed_form;
mod losses;
mod mask;

pub use closed_form::{
    rece_embedding, rece_gradient, rece_objective, rece_solve, uce_solve, ReceResult, UceProblem,
};
pub use losses::{
    ema_update, esd_loss, esd_loss_on, esd_target, esd_targets, sdd_loss, sdd_loss_on,
};
pub use mask::{MaskPreset, ParamMask};

use autodiff::{Array, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptTable, DatasetBundle, LabeledSet};
use crate::diffusion::{
    diffusion_loss_on, sample, DenoiserParams, Denoiser, NoiseDraws, NoiseSchedule, W_K, W_V,
};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{derive_seed, stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Esd,
    Sdd,
    Uce,
    Rece,
}

impl Method {
    pub fn is_closed_form(self) -> bool {
        matches!(self, Method::Uce | Method::Rece)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Esd => "esd",
            Method::Sdd => "sdd",
            Method::Uce => "uce",
            Method::Rece => "rece",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub method: Method,
    /// ESD guidance scale.
    pub eta: f64,
    pub mask: MaskPreset,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch: usize,
    /// SDD teacher decay.
    pub ema_decay: f64,
    /// Weight of an optional retain diffusion loss.
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_rece: f64,
    pub rece_iters: usize,
    /// Diffuse samples of the frozen model instead of data points.
    pub xt_from_model: bool,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            method: Method::Esd,
            eta: 1.0,
            mask: MaskPreset::U,
            steps: 1000,
            lr: 5e-3,
            optimizer: OptimizerKind::Sgd,
            batch: 32,
            ema_decay: 0.999,
            lambda: 0.0,
            lambda1: 1.0,
            lambda2: 0.1,
            lambda_rece: 0.1,
            rece_iters: 3,
            xt_from_model: false,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(path, "must be positive"))
            }
        };
        match self.method {
            Method::Esd | Method::Sdd => {
                if self.method == Method::Esd {
                    positive("unlearn.eta", self.eta)?;
                }
                positive("unlearn.lr", self.lr)?;
                if self.batch == 0 {
                    return Err(Error::config("unlearn.batch", "must be positive"));
                }
                if !(0.0..1.0).contains(&self.ema_decay) {
                    return Err(Error::config("unlearn.ema_decay", "must lie in [0, 1)"));
                }
                if !(self.lambda >= 0.0) {
                    return Err(Error::config("unlearn.lambda", "must be non-negative"));
                }
            }
            Method::Uce | Method::Rece => {
                positive("unlearn.lambda2", self.lambda2)?;
                if !(self.lambda1 >= 0.0) {
                    return Err(Error::config("unlearn.lambda1", "must be non-negative"));
                }
                if self.method == Method::Rece {
                    if self.rece_iters == 0 {
                        return Err(Error::config("unlearn.rece_iters", "must be at least 1"));
                    }
                    if !(self.lambda_rece >= 0.0) {
                        return Err(Error::config("unlearn.lambda_rece", "must be non-negative"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// The gradient-based unlearning loss (ESD or SDD, plus the optional
/// retain term) as a stateful objective: SDD's teacher follows the student.
pub struct UnlearnObjective<'a> {
    cfg: &'a UnlearnConfig,
    frozen: DenoiserParams,
    teacher: Vec<f64>,
    forget: LabeledSet,
    retain: &'a LabeledSet,
    table: &'a ConceptTable,
    schedule: &'a NoiseSchedule,
}

impl<'a> UnlearnObjective<'a> {
    pub fn new(
        frozen: &DenoiserParams,
        cfg: &'a UnlearnConfig,
        bundle: &'a DatasetBundle,
        table: &'a ConceptTable,
        schedule: &'a NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.method.is_closed_form() {
            return Err(Error::config("unlearn.method", "closed-form methods have no training objective"));
        }
        let forget = if cfg.xt_from_model {
            let f = table.forget();
            let cond = table.condition(&f.embedding, 1, frozen.config().tokens);
            let mut rng = stream_rng(derive_seed(seed, Stream::Unlearn, 1), Stream::Sampler);
            let x = sample(frozen, &cond, schedule, &mut rng, bundle.forget.len())?;
            LabeledSet { x, ..bundle.forget.clone() }
        } else {
            bundle.forget.clone()
        };
        Ok(UnlearnObjective {
            cfg,
            frozen: frozen.clone(),
            teacher: frozen.flat().to_vec(),
            forget,
            retain: &bundle.retain,
            table,
            schedule,
        })
    }

    /// Loss and gradient at `theta` on a fresh minibatch.
    pub fn loss_grad(&self, theta: &DenoiserParams, rng: &mut impl Rng) -> Result<(f64, Vec<f64>)> {
        let tokens = theta.config().tokens;
        let dim = theta.config().data_dim;
        let batch = self.forget.minibatch(self.cfg.batch, rng).batch(self.table, tokens);
        let draws = NoiseDraws::sample(batch.len(), dim, self.schedule, rng);
        let tape = Tape::new();
        let th = tape.leaf(theta.as_row());
        let model = Denoiser::new(theta.config());
        let mut loss = match self.cfg.method {
            Method::Esd => {
                let target = esd_targets(&self.frozen, &batch, &draws, self.cfg.eta, self.table, self.schedule)?;
                esd_loss_on(&model, th, &batch, &draws, &target, self.schedule)?
            }
            Method::Sdd => {
                let teacher = tape.constant(Array::row(self.teacher.clone()));
                sdd_loss_on(&model, th, teacher, &batch, &draws, self.table, self.schedule)?
            }
            Method::Uce | Method::Rece => unreachable!("checked in new"),
        };
        if self.cfg.lambda > 0.0 {
            let rb = self.retain.minibatch(self.cfg.batch, rng).batch(self.table, tokens);
            let rd = NoiseDraws::sample(rb.len(), dim, self.schedule, rng);
            loss = loss + diffusion_loss_on(&model, th, &rb, &rd, self.schedule)?.scale(self.cfg.lambda);
        }
        let g = tape.grad(loss, &[th])?;
        let grad = g[0].value().data().to_vec();
        Ok((loss.item(), grad))
    }

    /// Bookkeeping after a parameter update.
    pub fn observe(&mut self, theta: &DenoiserParams) {
        if self.cfg.method == Method::Sdd {
            ema_update(&mut self.teacher, theta.flat(), self.cfg.ema_decay);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnOutcome {
    pub params: DenoiserParams,
    /// Per-step training loss (empty for closed-form methods).
    pub losses: Vec<f64>,
    /// Erasing embeddings constructed by RECE.
    pub rece_embeddings: Vec<Vec<f64>>,
}

/// Attention matrices the closed-form edits act on.
pub const EDITED_SEGMENTS: [&str; 2] = [W_K, W_V];

/// Replaces the key/value projections by their closed-form edit.
pub fn closed_form_edit(
    theta_star: &DenoiserParams,
    cfg: &UnlearnConfig,
    table: &ConceptTable,
) -> Result<(DenoiserParams, Vec<Vec<f64>>)> {
    let w_star: Vec<Array> = EDITED_SEGMENTS.iter().map(|n| theta_star.segment(n)).collect();
    let forget = vec![table.forget().embedding.clone()];
    let retain: Vec<Vec<f64>> = table.retained().map(|c| c.embedding.clone()).collect();
    let problem = UceProblem {
        forget: &forget,
        retain: &retain,
        target: table.null_embedding(),
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    };
    let (mats, embeddings) = match cfg.method {
        Method::Uce => (uce_solve(&w_star, &problem)?, Vec::new()),
        Method::Rece => {
            let r = rece_solve(&w_star, &problem, cfg.lambda_rece, cfg.rece_iters)?;
            (r.matrices, r.embeddings)
        }
        _ => return Err(Error::config("unlearn.method", "not a closed-form method")),
    };
    let mut out = theta_star.clone();
    for (name, m) in EDITED_SEGMENTS.iter().zip(&mats) {
        out.set_segment(name, m);
    }
    Ok((out, embeddings))
}

/// Produces the unlearned model from `theta_star`.
pub fn run_unlearn(
    theta_star: &DenoiserParams,
    cfg: &UnlearnConfig,
    bundle: &DatasetBundle,
    table: &ConceptTable,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    if cfg.method.is_closed_form() {
        let (params, rece_embeddings) = closed_form_edit(theta_star, cfg, table)?;
        return Ok(UnlearnOutcome { params, losses: Vec::new(), rece_embeddings });
    }
    let mut objective = UnlearnObjective::new(theta_star, cfg, bundle, table, schedule, seed)?;
    let mask = ParamMask::preset(theta_star.layout(), cfg.mask);
    let mut theta = theta_star.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, theta.len());
    let mut rng = stream_rng(seed, Stream::Unlearn);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, mut grad) = objective.loss_grad(&theta, &mut rng)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!("{} loss {loss}; last finite losses {:?}", cfg.method.name(), tail(&losses)),
            });
        }
        mask.apply(theta.layout(), &mut grad);
        opt.step(theta.flat_mut(), &grad);
        objective.observe(&theta);
        losses.push(loss);
    }
    Ok(UnlearnOutcome { params: theta, losses, rece_embeddings: Vec::new() })
}

fn tail(v: &[f64]) -> &[f64] {
    &v[v.len().saturating_sub(5)..]
}
