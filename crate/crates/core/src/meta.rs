//! Meta-unlearning: the unlearning gradient combined with the gradient of
//!
//! ```text
//! L_meta(theta) = -L(theta_ft; D_ft) - zeta [L(theta_ft; D_ret) - L(theta; D_ret)]
//! theta_ft      = theta - tau grad L(theta; D_ft)          (M times)
//! ```
//!
//! either exactly (backpropagating through the inner updates) or through
//! the first-order expansion
//! `-L(theta; D_ft) + M tau |g_ft|^2 + M tau zeta g_ft . g_ret`.

use std::time::Instant;

use autodiff::{Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptTable, DatasetBundle, LabeledSet};
use crate::diffusion::{diffusion_loss_on, Batch, DenoiserParams, Denoiser, NoiseDraws, NoiseSchedule};
use crate::error::{Error, Result};
use crate::io::{write_records_csv, CsvRecord};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{stream_rng, Stream};
use crate::unlearn::{MaskPreset, ParamMask, UnlearnConfig, UnlearnObjective};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    Exact,
    FirstOrder,
}

/// Term switches. `ft_loss` applies to both modes; the other two only to
/// the first-order surrogate, where the terms are explicit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTerms {
    pub ft_loss: bool,
    pub grad_norm: bool,
    pub inner_product: bool,
}

impl Default for MetaTerms {
    fn default() -> Self {
        MetaTerms { ft_loss: true, grad_norm: true, inner_product: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Outer steps N.
    pub outer_steps: usize,
    /// Inner steps M.
    pub inner_steps: usize,
    /// Inner learning rate tau.
    pub tau: f64,
    /// Outer learning rate omega.
    pub omega: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub zeta: f64,
    pub ft_batch: usize,
    pub retain_batch: usize,
    pub mode: MetaMode,
    pub terms: MetaTerms,
    pub outer_optimizer: OptimizerKind,
    /// Trainable segments in the two-stage (closed-form) branch; the
    /// finetuning branch reuses the unlearning mask.
    pub two_stage_mask: MaskPreset,
    /// Size of the fixed probe batches (forget and retain) on which the
    /// recorded gradient norm and alignment are measured.
    pub track_batch: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            outer_steps: 1000,
            inner_steps: 1,
            tau: 1e-2,
            omega: 5e-3,
            gamma1: 1.0,
            gamma2: 0.1,
            zeta: 1.0,
            ft_batch: 32,
            retain_batch: 32,
            mode: MetaMode::Exact,
            terms: MetaTerms::default(),
            outer_optimizer: OptimizerKind::Sgd,
            two_stage_mask: MaskPreset::X,
            track_batch: 256,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_steps == 0 {
            return Err(Error::config("meta.outer_steps", "must be at least 1"));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("meta.inner_steps", "must be at least 1"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::config("meta.tau", "must be non-negative"));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::config("meta.omega", "must be positive"));
        }
        for (path, v) in [("meta.gamma1", self.gamma1), ("meta.gamma2", self.gamma2), ("meta.zeta", self.zeta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(path, "must be non-negative"));
            }
        }
        if self.ft_batch == 0 || self.retain_batch == 0 {
            return Err(Error::config("meta.ft_batch", "batch sizes must be positive"));
        }
        if self.track_batch == 0 {
            return Err(Error::config("meta.track_batch", "must be positive"));
        }
        Ok(())
    }

    /// Step size of the single-step surrogate equivalent to M inner steps.
    pub fn tau_eff(&self) -> f64 {
        self.inner_steps as f64 * self.tau
    }
}

/// The finetune and retain minibatches of one outer step, with frozen
/// timestep and noise draws shared by every evaluation that uses them.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaBatches {
    pub ft: Batch,
    pub ft_draws: NoiseDraws,
    pub retain: Batch,
    pub retain_draws: NoiseDraws,
}

impl MetaBatches {
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        ft_source: &LabeledSet,
        retain_source: &LabeledSet,
        ft_batch: usize,
        retain_batch: usize,
        table: &ConceptTable,
        tokens: usize,
        s: &NoiseSchedule,
        rng: &mut impl Rng,
    ) -> Self {
        let ft = ft_source.minibatch(ft_batch, rng).batch(table, tokens);
        let ft_draws = NoiseDraws::sample(ft.len(), ft.x.cols(), s, rng);
        let retain = retain_source.minibatch(retain_batch, rng).batch(table, tokens);
        let retain_draws = NoiseDraws::sample(retain.len(), retain.x.cols(), s, rng);
        MetaBatches { ft, ft_draws, retain, retain_draws }
    }
}

/// `M` plain gradient steps on the finetune batch. On a higher-order tape
/// the result stays differentiable with respect to `theta` through the
/// gradients themselves; on a first-order tape the gradients enter as
/// constants. `tau = 0` returns `theta` unchanged.
pub fn inner_finetune<'t>(
    model: &Denoiser<'_>,
    theta: Var<'t>,
    ft: &Batch,
    draws: &NoiseDraws,
    steps: usize,
    tau: f64,
    s: &NoiseSchedule,
) -> Result<Var<'t>> {
    inner_descent(theta, steps, tau, |th| diffusion_loss_on(model, th, ft, draws, s))
}

/// [`inner_finetune`] for an arbitrary loss.
pub fn inner_descent<'t>(
    theta: Var<'t>,
    steps: usize,
    tau: f64,
    loss: impl Fn(Var<'t>) -> Result<Var<'t>>,
) -> Result<Var<'t>> {
    if steps == 0 {
        return Err(Error::config("meta.inner_steps", "must be at least 1"));
    }
    if tau == 0.0 {
        return Ok(theta);
    }
    let tape = theta.tape();
    let mut cur = theta;
    for m in 0..steps {
        let l = loss(cur)?;
        let g = tape.grad(l, &[cur])?[0];
        cur = cur - g.scale(tau);
        if !cur.value_ref().all_finite() {
            return Err(Error::Divergence { step: m, detail: "inner finetune produced non-finite parameters".into() });
        }
    }
    Ok(cur)
}

/// `-L(theta_ft; ft) - zeta [L(theta_ft; ret) - L(theta; ret)]`. The bracket is
/// skipped when `theta_ft` is `theta` itself.
pub fn meta_loss_on<'t>(
    model: &Denoiser<'_>,
    theta_ft: Var<'t>,
    theta: Var<'t>,
    b: &MetaBatches,
    zeta: f64,
    ft_term: bool,
    s: &NoiseSchedule,
) -> Result<Var<'t>> {
    meta_objective(
        theta_ft,
        theta,
        |th| diffusion_loss_on(model, th, &b.ft, &b.ft_draws, s),
        |th| diffusion_loss_on(model, th, &b.retain, &b.retain_draws, s),
        zeta,
        ft_term,
    )
}

/// [`meta_loss_on`] for arbitrary finetune and retain losses.
pub fn meta_objective<'t>(
    theta_ft: Var<'t>,
    theta: Var<'t>,
    ft_loss: impl Fn(Var<'t>) -> Result<Var<'t>>,
    retain_loss: impl Fn(Var<'t>) -> Result<Var<'t>>,
    zeta: f64,
    ft_term: bool,
) -> Result<Var<'t>> {
    let tape = theta.tape();
    let mut total = if ft_term { -ft_loss(theta_ft)? } else { tape.scalar(0.0) };
    if zeta != 0.0 && theta_ft.id() != theta.id() {
        let after = retain_loss(theta_ft)?;
        let before = retain_loss(theta)?;
        total = total - (after - before).scale(zeta);
    }
    Ok(total)
}

/// Exact meta loss value.
pub fn meta_loss(theta: &DenoiserParams, b: &MetaBatches, cfg: &MetaConfig, s: &NoiseSchedule) -> Result<f64> {
    let tape = Tape::new();
    let model = Denoiser::new(theta.config());
    let th = tape.leaf(theta.as_row());
    let ft = inner_finetune(&model, th, &b.ft, &b.ft_draws, cfg.inner_steps, cfg.tau, s)?;
    Ok(meta_loss_on(&model, ft, th, b, cfg.zeta, cfg.terms.ft_loss, s)?.item())
}

/// Exact meta loss and its gradient, differentiating through the inner
/// updates.
pub fn meta_grad_exact(
    theta: &DenoiserParams,
    b: &MetaBatches,
    cfg: &MetaConfig,
    s: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::higher_order();
    let model = Denoiser::new(theta.config());
    let th = tape.leaf(theta.as_row());
    let ft = inner_finetune(&model, th, &b.ft, &b.ft_draws, cfg.inner_steps, cfg.tau, s)?;
    let l = meta_loss_on(&model, ft, th, b, cfg.zeta, cfg.terms.ft_loss, s)?;
    let g = tape.grad(l, &[th])?;
    let grad = g[0].value().data().to_vec();
    Ok((l.item(), grad))
}

fn surrogate_on<'t>(
    model: &Denoiser<'_>,
    th: Var<'t>,
    b: &MetaBatches,
    cfg: &MetaConfig,
    s: &NoiseSchedule,
) -> Result<Var<'t>> {
    surrogate_objective(
        th,
        |t| diffusion_loss_on(model, t, &b.ft, &b.ft_draws, s),
        |t| diffusion_loss_on(model, t, &b.retain, &b.retain_draws, s),
        cfg,
    )
}

/// `-L_ft + M tau |g_ft|^2 + M tau zeta g_ft . g_ret` for arbitrary losses,
/// honoring the term switches. Needs a higher-order tape to be
/// differentiated.
pub fn surrogate_objective<'t>(
    th: Var<'t>,
    ft_loss: impl Fn(Var<'t>) -> Result<Var<'t>>,
    retain_loss: impl Fn(Var<'t>) -> Result<Var<'t>>,
    cfg: &MetaConfig,
) -> Result<Var<'t>> {
    let tape = th.tape();
    let tau = cfg.tau_eff();
    let l_ft = ft_loss(th)?;
    let mut total = if cfg.terms.ft_loss { -l_ft } else { tape.scalar(0.0) };
    let need_g = tau != 0.0 && (cfg.terms.grad_norm || (cfg.terms.inner_product && cfg.zeta != 0.0));
    if need_g {
        let g_ft = tape.grad(l_ft, &[th])?[0];
        if cfg.terms.grad_norm {
            total = total + g_ft.square().sum().scale(tau);
        }
        if cfg.terms.inner_product && cfg.zeta != 0.0 {
            let l_ret = retain_loss(th)?;
            let g_ret = tape.grad(l_ret, &[th])?[0];
            total = total + g_ft.dot(g_ret).scale(tau * cfg.zeta);
        }
    }
    Ok(total)
}

/// First-order surrogate value.
pub fn surrogate_loss(theta: &DenoiserParams, b: &MetaBatches, cfg: &MetaConfig, s: &NoiseSchedule) -> Result<f64> {
    let tape = Tape::new();
    let th = tape.leaf(theta.as_row());
    Ok(surrogate_on(&Denoiser::new(theta.config()), th, b, cfg, s)?.item())
}

/// First-order surrogate and its gradient; the penalty terms need
/// second-order products, so this records a higher-order tape too.
pub fn meta_grad_first_order(
    theta: &DenoiserParams,
    b: &MetaBatches,
    cfg: &MetaConfig,
    s: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::higher_order();
    let th = tape.leaf(theta.as_row());
    let l = surrogate_on(&Denoiser::new(theta.config()), th, b, cfg, s)?;
    let g = tape.grad(l, &[th])?;
    let grad = g[0].value().data().to_vec();
    Ok((l.item(), grad))
}

/// Meta gradient per `cfg.mode`.
pub fn meta_grad(theta: &DenoiserParams, b: &MetaBatches, cfg: &MetaConfig, s: &NoiseSchedule) -> Result<(f64, Vec<f64>)> {
    match cfg.mode {
        MetaMode::Exact => meta_grad_exact(theta, b, cfg, s),
        MetaMode::FirstOrder => meta_grad_first_order(theta, b, cfg, s),
    }
}

/// `(|g_ft|^2, cos(g_ft, g_ret))` at `theta` on the frozen draws.
pub fn gradient_alignment(theta: &DenoiserParams, b: &MetaBatches, s: &NoiseSchedule) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let model = Denoiser::new(theta.config());
    let th = tape.leaf(theta.as_row());
    let l_ft = diffusion_loss_on(&model, th, &b.ft, &b.ft_draws, s)?;
    let g_ft = tape.grad(l_ft, &[th])?[0].value();
    let l_ret = diffusion_loss_on(&model, th, &b.retain, &b.retain_draws, s)?;
    let g_ret = tape.grad(l_ret, &[th])?[0].value();
    let n_ft = g_ft.dot(&g_ft);
    let denom = n_ft.sqrt() * g_ret.norm();
    let cos = if denom > 0.0 { g_ft.dot(&g_ret) / denom } else { 0.0 };
    Ok((n_ft, cos))
}

/// `gamma1 g_unlearn + gamma2 g_meta`, with absent parts contributing
/// nothing.
pub fn compose_update(gamma1: f64, g_unlearn: Option<&[f64]>, gamma2: f64, g_meta: Option<&[f64]>, n: usize) -> Vec<f64> {
    match (g_unlearn, g_meta) {
        (Some(u), Some(m)) => u.iter().zip(m).map(|(a, b)| gamma1 * a + gamma2 * b).collect(),
        (Some(u), None) => u.iter().map(|a| gamma1 * a).collect(),
        (None, Some(m)) => m.iter().map(|b| gamma2 * b).collect(),
        (None, None) => vec![0.0; n],
    }
}

/// One outer step of meta-unlearning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaStepRecord {
    pub step: usize,
    pub l_unlearn: f64,
    pub l_meta: f64,
    pub grad_norm_sq_ft: f64,
    /// Cosine-normalized `g_ft . g_ret`.
    pub inner_product_norm: f64,
    pub wall_ms: f64,
}

impl CsvRecord for MetaStepRecord {
    const KIND: &'static str = "meta records";
    const HEADER: &'static [&'static str] =
        &["step", "l_unlearn", "l_meta", "grad_norm_sq_ft", "inner_product_norm", "wall_ms"];

    fn validate(&self) -> std::result::Result<(), String> {
        let v = [self.l_unlearn, self.l_meta, self.grad_norm_sq_ft, self.inner_product_norm, self.wall_ms];
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err("non-finite value".into())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaOutcome {
    pub params: DenoiserParams,
    pub records: Vec<MetaStepRecord>,
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// The full outer loop. In the finetuning branch (ESD/SDD) `theta_init` is
/// the pretrained model and every step adds `gamma1` times the unlearning
/// gradient; in the closed-form branch `theta_init` is the edited model and
/// only the meta gradient is applied.
#[allow(clippy::too_many_arguments)]
pub fn meta_unlearn(
    theta_init: &DenoiserParams,
    cfg: &MetaConfig,
    unlearn: &UnlearnConfig,
    bundle: &DatasetBundle,
    table: &ConceptTable,
    s: &NoiseSchedule,
    seed: u64,
    mut on_record: impl FnMut(&MetaStepRecord),
) -> Result<MetaOutcome> {
    cfg.validate()?;
    unlearn.validate()?;
    let two_stage = unlearn.method.is_closed_form();
    let mut objective = if two_stage {
        None
    } else {
        Some(UnlearnObjective::new(theta_init, unlearn, bundle, table, s, seed)?)
    };
    let layout = theta_init.layout().clone();
    let mask = ParamMask::preset(&layout, if two_stage { cfg.two_stage_mask } else { unlearn.mask });
    let tokens = theta_init.config().tokens;
    let mut theta = theta_init.clone();
    let mut opt = Optimizer::new(cfg.outer_optimizer, cfg.omega, theta.len());
    let mut unlearn_rng = stream_rng(seed, Stream::Unlearn);
    let mut meta_rng = stream_rng(seed, Stream::Meta);
    let mut records: Vec<MetaStepRecord> = Vec::with_capacity(cfg.outer_steps);
    let probe = MetaBatches::sample(
        &bundle.forget,
        &bundle.retain,
        cfg.track_batch,
        cfg.track_batch,
        table,
        tokens,
        s,
        &mut stream_rng(seed, Stream::Probe),
    );

    for step in 0..cfg.outer_steps {
        let start = Instant::now();
        let fail = |detail: String, records: &[MetaStepRecord]| Error::Divergence {
            step,
            detail: format!("{detail}\n{}", write_records_csv(records)),
        };
        let (l_unlearn, g_unlearn) = match &objective {
            Some(obj) => {
                let (l, g) = obj.loss_grad(&theta, &mut unlearn_rng)?;
                (l, Some(g))
            }
            None => (0.0, None),
        };
        let b = MetaBatches::sample(
            &bundle.forget,
            &bundle.retain,
            cfg.ft_batch,
            cfg.retain_batch,
            table,
            tokens,
            s,
            &mut meta_rng,
        );
        let (l_meta, g_meta) = if cfg.gamma2 != 0.0 {
            let (l, g) = meta_grad(&theta, &b, cfg, s)?;
            (l, Some(g))
        } else {
            (meta_loss(&theta, &b, cfg, s)?, None)
        };
        let (norm_sq, cos) = gradient_alignment(&theta, &probe, s)?;
        let gamma1 = if two_stage { 0.0 } else { cfg.gamma1 };
        let mut g = compose_update(gamma1, g_unlearn.as_deref(), cfg.gamma2, g_meta.as_deref(), theta.len());
        if !finite(&g) || !l_unlearn.is_finite() || !l_meta.is_finite() {
            return Err(fail(format!("non-finite update (l_unlearn {l_unlearn}, l_meta {l_meta})"), &records));
        }
        mask.apply(&layout, &mut g);
        opt.step(theta.flat_mut(), &g);
        if !theta.all_finite() {
            return Err(fail("parameters became non-finite".into(), &records));
        }
        if let Some(obj) = objective.as_mut() {
            obj.observe(&theta);
        }
        let rec = MetaStepRecord {
            step,
            l_unlearn,
            l_meta,
            grad_norm_sq_ft: norm_sq,
            inner_product_norm: cos,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_record(&rec);
        records.push(rec);
    }
    Ok(MetaOutcome { params: theta, records })
}
