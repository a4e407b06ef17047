//! Runs on the default world with the default pretrained model.

use std::sync::OnceLock;

use autodiff::Array;
use metaunlearn::attack::{run_attack, AttackConfig, AttackDataset};
use metaunlearn::concepts::{default_world, draw_concept, draw_split, ConceptTable, DatasetBundle, SplitSizes};
use metaunlearn::diffusion::{
    forward_diffuse, sample, DenoiserParams, ModelConfig, NoiseDraws, NoiseSchedule, ScheduleConfig,
};
use metaunlearn::eval::{concept_samples, forget_score, retain_mmd, EvalConfig};
use metaunlearn::rng::{stream_rng, Stream};
use metaunlearn::train::{pretrain, PretrainConfig};
use metaunlearn::unlearn::{run_unlearn, UnlearnConfig};
use rand::Rng;
use rand_distr::StandardNormal;

const SEED: u64 = 0;

struct World {
    table: ConceptTable,
    bundle: DatasetBundle,
    schedule: NoiseSchedule,
    theta: DenoiserParams,
    losses: Vec<f64>,
    esd: DenoiserParams,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let table = default_world(SEED);
        let bundle = draw_split(&table, &SplitSizes::default(), SEED).unwrap();
        let schedule = ScheduleConfig::default().build().unwrap();
        let mut theta = DenoiserParams::init(&ModelConfig::default(), &mut stream_rng(SEED, Stream::Init));
        let losses = pretrain(&mut theta, &PretrainConfig::default(), &bundle, &table, &schedule, SEED).unwrap();
        let esd = run_unlearn(&theta, &UnlearnConfig::default(), &bundle, &table, &schedule, SEED).unwrap().params;
        World { table, bundle, schedule, theta, losses, esd }
    })
}

fn eval() -> EvalConfig {
    EvalConfig::default()
}

#[test]
fn pretraining_reaches_a_plateau() {
    // means over 100-step windows; single minibatch losses are too noisy
    let w = world();
    let windows: Vec<f64> = w.losses.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let min = windows.iter().copied().fold(f64::INFINITY, f64::min);
    let last = *windows.last().unwrap();
    assert!(last < 1.2 * min, "final {last:.4} vs minimum {min:.4}");
    assert!(last < 0.5 * windows[0]);
}

#[test]
fn pretrained_model_generates_the_forget_concept() {
    let w = world();
    let score = forget_score(&w.theta, &w.table, &w.schedule, eval().samples, eval().seed).unwrap();
    assert!(score > 80.0, "{score}");
}

#[test]
fn samples_center_on_their_concept() {
    let w = world();
    for c in w.table.concepts() {
        let x = concept_samples(&w.theta, &w.table, &c.name, &w.schedule, 2000, 3).unwrap();
        let mean: Vec<f64> = (0..x.cols()).map(|j| (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / 2000.0).collect();
        let dist = mean.iter().zip(&c.center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(dist < 0.2, "{}: sample mean {mean:?} vs center {:?}", c.name, c.center);
    }
}

#[test]
fn sampling_zero_points_is_rejected() {
    let w = world();
    let cond = w.table.condition(&w.table.forget().embedding, 1, w.theta.config().tokens);
    assert!(sample(&w.theta, &cond, &w.schedule, &mut stream_rng(0, Stream::Sampler), 0).is_err());
}

#[test]
fn forward_diffusion_second_moment() {
    let s = ScheduleConfig::default().build().unwrap();
    let mut rng = stream_rng(4, Stream::Probe);
    let x = [1.5, -2.0];
    for t in [1, 10, 50, 100] {
        let mut acc = 0.0;
        for _ in 0..10_000 {
            let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            acc += forward_diffuse(&x, t, &eps, &s).unwrap().iter().map(|v| v * v).sum::<f64>();
        }
        let want = s.alpha_bar(t) * (x[0] * x[0] + x[1] * x[1]) + (1.0 - s.alpha_bar(t)) * 2.0;
        let rel = (acc / 10_000.0 - want).abs() / want;
        assert!(rel < 0.05, "t = {t}: relative error {rel}");
    }
}

#[test]
fn esd_erases_the_forget_concept() {
    let w = world();
    let score = forget_score(&w.esd, &w.table, &w.schedule, eval().samples, eval().seed).unwrap();
    assert!(score < 30.0, "{score}");
}

fn mean_sq_gap(a: &Array, b: &Array) -> f64 {
    a.sub(b).data().iter().map(|v| v * v).sum::<f64>() / a.rows() as f64
}

#[test]
fn esd_moves_the_conditional_prediction_toward_the_null_one() {
    let w = world();
    let tokens = w.theta.config().tokens;
    let mut rng = stream_rng(77, Stream::Probe);
    // held-out forget prompts
    let held = draw_concept(w.table.forget(), 512, &mut rng).batch(&w.table, tokens);
    let draws = NoiseDraws::sample(held.len(), held.x.cols(), &w.schedule, &mut rng);
    let x_t = draws.diffuse(&held.x, &w.schedule).unwrap();
    let null = held.with_first_token(w.table.null_embedding());
    let eps_null = w.theta.predict(&x_t, &draws.t, &null.cond).unwrap();
    let before = mean_sq_gap(&w.theta.predict(&x_t, &draws.t, &held.cond).unwrap(), &eps_null);
    let after = mean_sq_gap(&w.esd.predict(&x_t, &draws.t, &held.cond).unwrap(), &eps_null);
    assert!(after < before, "{after} vs {before}");
}

fn attack(theta: &DenoiserParams, dataset: AttackDataset, checkpoints_at: Vec<usize>) -> metaunlearn::attack::RelearnCurve {
    let w = world();
    let cfg = AttackConfig { dataset, checkpoints_at, ..Default::default() };
    run_attack(theta, &cfg, &w.bundle, &w.table, &w.schedule, &eval()).unwrap().0
}

#[test]
fn zero_step_attack_reports_the_released_model() {
    let w = world();
    let curve = attack(&w.esd, AttackDataset::FtSingle, vec![0]);
    let e = &curve.entries[0];
    let ev = eval();
    assert_eq!(e.step, 0);
    assert_eq!(e.forget_score, forget_score(&w.esd, &w.table, &w.schedule, ev.samples, ev.seed).unwrap());
    let mmd: f64 = ev
        .retain_concepts
        .iter()
        .map(|c| retain_mmd(&w.esd, &w.table, c, &w.schedule, ev.samples, ev.seed).unwrap())
        .sum::<f64>()
        / ev.retain_concepts.len() as f64;
    assert_eq!(e.retain_mmd, mmd);
}

#[test]
fn benign_attack_on_the_pretrained_model_keeps_the_forget_concept() {
    let w = world();
    let curve = attack(&w.theta, AttackDataset::Benign, vec![0, 100, 200, 300]);
    let start = curve.entries[0].forget_score;
    for e in &curve.entries {
        assert!((e.forget_score - start).abs() <= 10.0, "step {}: {} vs {start}", e.step, e.forget_score);
    }
}

#[test]
fn attacking_plain_esd_relearns() {
    let w = world();
    let curve = attack(&w.esd, AttackDataset::FtSingle, vec![0, 300]);
    assert!(curve.entries[1].forget_score > curve.entries[0].forget_score, "{:?}", curve.entries);
}
