//! Finite-difference and closed-form oracle checks, run by the CLI's
//! `verify` subcommand as a quick self-test of a build.

use autodiff::check::{central_differences, max_relative_deviation, DEFAULT_STEP};
use autodiff::{fd_check, Array, Tape, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::concepts::{draw_split, ConceptTable, SplitSizes, WorldConfig};
use crate::diffusion::{diffusion_loss_on, diffusion_loss_value, Denoiser, DenoiserParams, ModelConfig, ScheduleConfig};
use crate::error::Result;
use crate::meta::{meta_grad, meta_loss, MetaBatches, MetaConfig, MetaMode};
use crate::rng::{stream_rng, Rng as StreamRng, Stream};
use crate::unlearn::{rece_embedding, rece_gradient, UceProblem};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, value: f64, tol: f64) -> Check {
    Check { name, passed: value < tol, detail: format!("{value:.3e} (tolerance {tol:.0e})") }
}

fn normal(rng: &mut StreamRng, rows: usize, cols: usize) -> Array {
    Array::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

fn normal_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A small model and batch pair on a world with 4-dimensional embeddings.
pub struct Fixture {
    pub params: DenoiserParams,
    pub batches: MetaBatches,
    pub schedule: crate::diffusion::NoiseSchedule,
    pub table: ConceptTable,
}

impl Fixture {
    pub fn new(seed: u64, hidden: usize, batch: usize) -> Result<Self> {
        let world = WorldConfig { embed_dim: 4, ..Default::default() };
        let table = world.build(seed)?;
        let sizes = SplitSizes { forget: 64, retain: 64, ft_pool: 32, benign: 32 };
        let bundle = draw_split(&table, &sizes, seed)?;
        let model = ModelConfig { hidden, time_dim: 4, cond_dim: 4, ..Default::default() };
        let schedule = ScheduleConfig { steps: 20, ..Default::default() }.build()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let mut params = DenoiserParams::init(&model, &mut rng);
        // a non-zero head so every path carries gradient
        for v in params.flat_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        let batches =
            MetaBatches::sample(&bundle.forget, &bundle.retain, batch, batch, &table, 1, &schedule, &mut stream_rng(seed, Stream::Meta));
        Ok(Fixture { params, batches, schedule, table })
    }
}

fn primitive_check(rng: &mut StreamRng) -> Result<f64> {
    type Op = for<'t> fn(&'t Tape, Var<'t>) -> Var<'t>;
    let ops: [Op; 10] = [
        |_, x| (x * x + x).sum(),
        |t, x| (x / (x.square() + t.scalar(1.0).broadcast_scalar(x.shape().0, x.shape().1))).sum(),
        |_, x| x.matmul(x.t()).sum(),
        |_, x| x.exp().mean(),
        |_, x| (x.square() + 1.0).sqrt().sum(),
        |_, x| x.silu().sum() + x.sigmoid().sum(),
        |_, x| (x.sin() * x.cos()).sum(),
        |t, x| (x.softmax() * t.constant(Array::new(x.shape().0, x.shape().1, (0..x.shape().0 * x.shape().1).map(|i| i as f64).collect()))).sum(),
        |_, x| x.slice_cols(1, 3).square().sum() + x.sum_rows().square().sum(),
        |_, x| x.relu().scale(2.0).sum() + x.sum_cols().square().sum(),
    ];
    let mut worst: f64 = 0.0;
    for op in ops {
        for _ in 0..5 {
            let x = normal(rng, 3, 4);
            worst = worst.max(fd_check(op, &x, 1e-5)?.max_rel_error);
        }
    }
    Ok(worst)
}

fn loss_gradient_check(f: &Fixture) -> Result<f64> {
    let model = Denoiser::new(f.params.config());
    let b = &f.batches;
    let analytic = {
        let tape = Tape::new();
        let th = tape.leaf(f.params.as_row());
        let l = diffusion_loss_on(&model, th, &b.ft, &b.ft_draws, &f.schedule)?;
        tape.grad(l, &[th])?[0].value().data().to_vec()
    };
    let numeric = central_differences(
        |theta| {
            let mut p = f.params.clone();
            p.flat_mut().copy_from_slice(theta);
            diffusion_loss_value(&p, &b.ft, &b.ft_draws, &f.schedule).unwrap_or(f64::NAN)
        },
        f.params.flat(),
        DEFAULT_STEP,
    );
    Ok(max_relative_deviation(&analytic, &numeric).0)
}

fn hvp_check(f: &Fixture, rng: &mut StreamRng) -> Result<f64> {
    let model = Denoiser::new(f.params.config());
    let b = &f.batches;
    let n = f.params.len();
    let v = normal(rng, 1, n);
    let grad_at = |theta: &[f64]| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let th = tape.leaf(Array::row(theta.to_vec()));
        let l = diffusion_loss_on(&model, th, &b.ft, &b.ft_draws, &f.schedule)?;
        Ok(tape.grad(l, &[th])?[0].value().data().to_vec())
    };
    let analytic = {
        let tape = Tape::higher_order();
        let th = tape.leaf(f.params.as_row());
        let l = diffusion_loss_on(&model, th, &b.ft, &b.ft_draws, &f.schedule)?;
        tape.hvp(l, &[th], std::slice::from_ref(&v))?[0].data().to_vec()
    };
    let h = 1e-4;
    let plus: Vec<f64> = f.params.flat().iter().zip(v.data()).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = f.params.flat().iter().zip(v.data()).map(|(a, d)| a - h * d).collect();
    let (gp, gm) = (grad_at(&plus)?, grad_at(&minus)?);
    let numeric: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    Ok(max_relative_deviation(&analytic, &numeric).0)
}

fn uce_check(rng: &mut StreamRng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (k, rows) = (8, 6);
        let w_star = normal(rng, rows, k);
        let forget = vec![normal_vec(rng, k)];
        let retain = vec![normal_vec(rng, k), normal_vec(rng, k)];
        let target = vec![0.0; k];
        let p = UceProblem { forget: &forget, retain: &retain, target: &target, lambda1: 1.0, lambda2: 0.1 };
        let w = p.solve(&w_star)?;
        worst = worst.max(p.gradient(&w, &w_star).norm());
    }
    Ok(worst)
}

fn rece_check(rng: &mut StreamRng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let k = 8;
        let edited = vec![normal(rng, 6, k), normal(rng, 6, k)];
        let w_star = vec![normal(rng, 6, k), normal(rng, 6, k)];
        let e_f = normal_vec(rng, k);
        let e = rece_embedding(&edited, &w_star, &e_f, 0.1)?;
        let g = rece_gradient(&edited, &w_star, &e_f, 0.1, &e);
        worst = worst.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(worst)
}

fn meta_gradient_check(f: &Fixture) -> Result<f64> {
    let cfg = MetaConfig { tau: 0.05, inner_steps: 2, mode: MetaMode::Exact, ..Default::default() };
    let (_, analytic) = meta_grad(&f.params, &f.batches, &cfg, &f.schedule)?;
    let numeric = central_differences(
        |theta| {
            let mut p = f.params.clone();
            p.flat_mut().copy_from_slice(theta);
            meta_loss(&p, &f.batches, &cfg, &f.schedule).unwrap_or(f64::NAN)
        },
        f.params.flat(),
        DEFAULT_STEP,
    );
    Ok(max_relative_deviation(&analytic, &numeric).0)
}

fn collapse_check(f: &Fixture) -> Result<f64> {
    let cfg = MetaConfig { tau: 0.0, ..Default::default() };
    let (_, g) = meta_grad(&f.params, &f.batches, &cfg, &f.schedule)?;
    let model = Denoiser::new(f.params.config());
    let tape = Tape::new();
    let th = tape.leaf(f.params.as_row());
    let l = diffusion_loss_on(&model, th, &f.batches.ft, &f.batches.ft_draws, &f.schedule)?;
    let want = tape.grad(l, &[th])?[0].value();
    Ok(g.iter().zip(want.data()).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max))
}

/// Runs every check; errors only on failures to evaluate, not on
/// failed tolerances.
pub fn run_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream_rng(seed, Stream::Eval);
    let f = Fixture::new(seed, 6, 8)?;
    Ok(vec![
        check("primitive gradients vs central differences", primitive_check(&mut rng)?, 1e-5),
        check("diffusion loss gradient vs central differences", loss_gradient_check(&f)?, 1e-4),
        check("Hessian-vector product vs differenced gradients", hvp_check(&f, &mut rng)?, 1e-3),
        check("UCE stationarity (gradient norm)", uce_check(&mut rng)?, 1e-8),
        check("RECE embedding stationarity (gradient norm)", rece_check(&mut rng)?, 1e-8),
        check("exact meta gradient vs central differences", meta_gradient_check(&f)?, 1e-3),
        check("tau = 0 meta gradient equals -grad L_ft", collapse_check(&f)?, 1e-15),
    ])
}
