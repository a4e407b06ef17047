//! Pretraining of the conditional denoiser on the full training set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptTable, DatasetBundle, LabeledSet};
use crate::diffusion::{diffusion_loss_grad, DenoiserParams, NoiseDraws, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    /// Probability of replacing a row's concept token by the null context,
    /// so that the unconditional prediction is trained too.
    pub null_prob: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine_decay: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 6000, lr: 3e-3, batch: 64, optimizer: OptimizerKind::Adam, null_prob: 0.1, cosine_decay: true }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("pretrain.batch", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.null_prob) {
            return Err(Error::config("pretrain.null_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Minibatch with each row's concept token dropped to the null context
/// with probability `p`.
pub fn dropout_batch(set: &LabeledSet, size: usize, p: f64, table: &ConceptTable, rng: &mut impl Rng) -> LabeledSet {
    let mut b = set.minibatch(size, rng);
    if p > 0.0 {
        let k = b.emb.cols();
        for r in 0..b.len() {
            if rng.random::<f64>() < p {
                for c in 0..k {
                    b.emb.set(r, c, table.null_embedding()[c]);
                }
            }
        }
    }
    b
}

/// Fits `params` to the training set; returns the per-step loss trace.
pub fn pretrain(
    params: &mut DenoiserParams,
    cfg: &PretrainConfig,
    bundle: &DatasetBundle,
    table: &ConceptTable,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let train = bundle.train();
    let mut rng = stream_rng(seed, Stream::Pretrain);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, params.len());
    let tokens = params.config().tokens;
    let dim = params.config().data_dim;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cfg.cosine_decay {
            let frac = step as f64 / cfg.steps as f64;
            opt.set_lr(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        }
        let set = dropout_batch(&train, cfg.batch, cfg.null_prob, table, &mut rng);
        let batch = set.batch(table, tokens);
        let draws = NoiseDraws::sample(batch.len(), dim, schedule, &mut rng);
        let (loss, grad) = diffusion_loss_grad(params, &batch, &draws, schedule)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, detail: format!("pretrain loss {loss}") });
        }
        opt.step(params.flat_mut(), &grad);
        losses.push(loss);
    }
    Ok(losses)
}
