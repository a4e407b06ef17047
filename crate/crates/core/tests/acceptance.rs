//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! `cargo test -p metaunlearn --test acceptance` runs everything; criterion
//! numbers given as arguments (`-- 3 5`) restrict the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use autodiff::check::{central_differences, max_relative_deviation, DEFAULT_STEP};
use autodiff::{Array, Tape};
use metaunlearn::attack::RelearnCurve;
use metaunlearn::concepts::{default_world, draw_split, SplitSizes};
use metaunlearn::config::ExperimentConfig;
use metaunlearn::diffusion::{
    diffusion_loss_on, diffusion_loss_value, Denoiser, DenoiserParams, ModelConfig, ScheduleConfig,
};
use metaunlearn::eval::{alignment_series, forget_score, retain_mmd};
use metaunlearn::io::{read_records_csv, Checkpoint};
use metaunlearn::meta::{
    gradient_alignment, meta_grad_exact, meta_grad_first_order, meta_loss, surrogate_loss, MetaBatches, MetaConfig,
    MetaMode, MetaStepRecord, MetaTerms,
};
use metaunlearn::pipeline::{
    for_each_replica, run_attack_stage, run_eval_stage, run_meta_stage, run_pretrain, run_report, run_unlearn_stage,
    stage_key, ReportOutcome, Workspace,
};
use metaunlearn::rng::{stream_rng, Rng, Stream};
use metaunlearn::train::{pretrain, PretrainConfig};
use metaunlearn::unlearn::{rece_embedding, rece_gradient, rece_objective, UceProblem};
use metaunlearn::verify::{run_checks, Fixture};
use rand::Rng as _;
use rand_distr::StandardNormal;

type Verdict = Result<(bool, String), String>;

const TAU_LADDER: [f64; 3] = [1e-2, 1e-3, 1e-4];

fn randn(rows: usize, cols: usize, rng: &mut Rng) -> Array {
    Array::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

fn vecn(k: usize, rng: &mut Rng) -> Vec<f64> {
    (0..k).map(|_| rng.sample(StandardNormal)).collect()
}

fn probe_scale(i: usize) -> f64 {
    [1e-6, 1e-4, 1e-2, 1.0][i % 4]
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn autodiff_correctness() -> Verdict {
    let checks = run_checks(0).map_err(err)?;
    let mut ok = true;
    let mut detail = Vec::new();
    // primitives, small-model loss gradient, HVP
    for c in &checks[..3] {
        ok &= c.passed;
        detail.push(c.detail.clone());
    }
    let f = Fixture::new(0, 6, 8).map_err(err)?;
    ok &= f.params.len() <= 200;

    // the full-size default model
    let table = default_world(1);
    let bundle = draw_split(&table, &SplitSizes::default(), 1).map_err(err)?;
    let cfg = ModelConfig::default();
    let s = ScheduleConfig::default().build().map_err(err)?;
    let mut rng = stream_rng(1, Stream::Init);
    let mut params = DenoiserParams::init(&cfg, &mut rng);
    for v in params.flat_mut() {
        *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
    }
    let batch = bundle.train().minibatch(16, &mut rng).batch(&table, cfg.tokens);
    let draws = metaunlearn::diffusion::NoiseDraws::sample(batch.len(), cfg.data_dim, &s, &mut rng);
    let tape = Tape::new();
    let th = tape.leaf(params.as_row());
    let l = diffusion_loss_on(&Denoiser::new(&cfg), th, &batch, &draws, &s).map_err(err)?;
    let analytic = tape.grad(l, &[th]).map_err(err)?[0].value();
    let numeric = central_differences(
        |theta| {
            let p = DenoiserParams::from_flat(&cfg, theta.to_vec()).unwrap();
            diffusion_loss_value(&p, &batch, &draws, &s).unwrap()
        },
        params.flat(),
        DEFAULT_STEP,
    );
    let (dev, _) = max_relative_deviation(analytic.data(), &numeric);
    ok &= dev < 1e-4;
    Ok((
        ok,
        format!(
            "primitives {}; L_DM ({} params) {}; default L_DM ({} params) {dev:.2e}; HVP {}",
            detail[0],
            f.params.len(),
            detail[1],
            params.len(),
            detail[2]
        ),
    ))
}

fn closed_form_optimality() -> Verdict {
    let mut rng = stream_rng(21, Stream::Eval);
    let (mut worst_grad, mut beaten) = (0.0f64, 0usize);
    for _ in 0..50 {
        let (k, rows) = (8, 6);
        let ws = randn(rows, k, &mut rng);
        let forget = vec![vecn(k, &mut rng)];
        let retain = vec![vecn(k, &mut rng), vecn(k, &mut rng), vecn(k, &mut rng)];
        let target = vecn(k, &mut rng);
        let lambda1 = rng.random_range(0.1..2.0);
        let lambda2 = rng.random_range(0.01..1.0);
        let p = UceProblem { forget: &forget, retain: &retain, target: &target, lambda1, lambda2 };
        let w = p.solve(&ws).map_err(err)?;
        worst_grad = worst_grad.max(p.gradient(&w, &ws).norm());
        let best = p.objective(&w, &ws);
        for i in 0..10_000 {
            let probe = w.add(&randn(rows, k, &mut rng).scale(probe_scale(i)));
            beaten += usize::from(p.objective(&probe, &ws) < best);
        }
    }
    let uce = (worst_grad, beaten);

    let (mut worst_grad, mut beaten) = (0.0f64, 0usize);
    for _ in 0..50 {
        let k = 8;
        let edited = vec![randn(6, k, &mut rng), randn(6, k, &mut rng)];
        let ws = vec![randn(6, k, &mut rng), randn(6, k, &mut rng)];
        let e_f = vecn(k, &mut rng);
        let lambda = rng.random_range(0.01..1.0);
        let e = rece_embedding(&edited, &ws, &e_f, lambda).map_err(err)?;
        let g = rece_gradient(&edited, &ws, &e_f, lambda, &e);
        worst_grad = worst_grad.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
        let best = rece_objective(&edited, &ws, &e_f, lambda, &e);
        for i in 0..10_000 {
            let probe: Vec<f64> = e.iter().map(|v| v + probe_scale(i) * rng.sample::<f64, _>(StandardNormal)).collect();
            beaten += usize::from(rece_objective(&edited, &ws, &e_f, lambda, &probe) < best);
        }
    }
    let rece = (worst_grad, beaten);
    Ok((
        uce.0 < 1e-8 && uce.1 == 0 && rece.0 < 1e-8 && rece.1 == 0,
        format!(
            "UCE max |grad| {:.2e}, {} probes better; RECE max |grad| {:.2e}, {} probes better",
            uce.0, uce.1, rece.0, rece.1
        ),
    ))
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn slopes(gaps: &[f64]) -> Vec<f64> {
    gaps.windows(2).map(|w| (w[0] / w[1]).log10()).collect()
}

fn approximation_order() -> Verdict {
    let f = Fixture::new(4, 6, 8).map_err(err)?;
    let (mut gaps, mut grad_diffs) = (Vec::new(), Vec::new());
    for tau in TAU_LADDER {
        let cfg = MetaConfig { tau, ..Default::default() };
        let exact = meta_loss(&f.params, &f.batches, &cfg, &f.schedule).map_err(err)?;
        let surrogate = surrogate_loss(&f.params, &f.batches, &cfg, &f.schedule).map_err(err)?;
        gaps.push((exact - surrogate).abs());
        let (_, ge) = meta_grad_exact(&f.params, &f.batches, &cfg, &f.schedule).map_err(err)?;
        let (_, gf) = meta_grad_first_order(&f.params, &f.batches, &cfg, &f.schedule).map_err(err)?;
        grad_diffs.push(rel_diff(&ge, &gf));
    }
    let s = slopes(&gaps);
    let ok = s.iter().all(|v| (1.7..=2.3).contains(v)) && grad_diffs.windows(2).all(|w| w[1] < w[0]);
    Ok((ok, format!("value-gap slopes {s:.3?}; gradient rel. differences {}", sci(&grad_diffs))))
}

fn multi_step_equivalence() -> Verdict {
    let f = Fixture::new(5, 6, 8).map_err(err)?;
    let mut ok = true;
    let mut detail = Vec::new();
    for m in [1usize, 3] {
        let mut gaps = Vec::new();
        // the ladder runs over the equivalent step M tau
        for step in TAU_LADDER {
            let cfg = MetaConfig { tau: step / m as f64, inner_steps: m, ..Default::default() };
            let exact = meta_loss(&f.params, &f.batches, &cfg, &f.schedule).map_err(err)?;
            let surrogate = surrogate_loss(&f.params, &f.batches, &cfg, &f.schedule).map_err(err)?;
            gaps.push((exact - surrogate).abs());
        }
        let s = slopes(&gaps);
        ok &= s.iter().all(|v| (1.7..=2.3).contains(v));
        detail.push(format!("M={m}: slopes {s:.3?}"));
    }
    Ok((ok, detail.join("; ")))
}

fn pretrained(seed: u64) -> Result<(DenoiserParams, metaunlearn::concepts::DatasetBundle, metaunlearn::concepts::ConceptTable), String> {
    let table = default_world(seed);
    let bundle = draw_split(&table, &SplitSizes::default(), seed).map_err(err)?;
    let s = ScheduleConfig::default().build().map_err(err)?;
    let mut p = DenoiserParams::init(&ModelConfig::default(), &mut stream_rng(seed, Stream::Init));
    pretrain(&mut p, &PretrainConfig::default(), &bundle, &table, &s, seed).map_err(err)?;
    Ok((p, bundle, table))
}

fn penalty_mechanisms() -> Verdict {
    let (p0, bundle, table) = pretrained(0)?;
    let s = ScheduleConfig::default().build().map_err(err)?;
    let tokens = p0.config().tokens;
    let b = MetaBatches::sample(&bundle.forget, &bundle.retain, 64, 64, &table, tokens, &s, &mut stream_rng(0, Stream::Probe));
    let none = MetaTerms { ft_loss: false, grad_norm: false, inner_product: false };
    let run = |terms: MetaTerms, omega: f64| -> Result<Vec<(f64, f64)>, String> {
        let cfg = MetaConfig { mode: MetaMode::FirstOrder, terms, ..Default::default() };
        let mut p = p0.clone();
        let mut track = vec![gradient_alignment(&p, &b, &s).map_err(err)?];
        for _ in 0..50 {
            let (_, g) = meta_grad_first_order(&p, &b, &cfg, &s).map_err(err)?;
            for (t, d) in p.flat_mut().iter_mut().zip(&g) {
                *t -= omega * d;
            }
            track.push(gradient_alignment(&p, &b, &s).map_err(err)?);
        }
        Ok(track)
    };
    let norm = run(MetaTerms { grad_norm: true, ..none }, 1e-3)?;
    let inner = run(MetaTerms { inner_product: true, ..none }, 1e-3)?;
    let (n0, n1) = (norm[0].0, norm[50].0);
    let (c0, c1) = (inner[0].1, inner[50].1);
    Ok((
        n1 < n0 && c1 < c0,
        format!("|g_ft|^2 {n0:.4e} -> {n1:.4e}; cos(g_ft, g_ret) {c0:.4} -> {c1:.4}"),
    ))
}

struct Run {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    ws: Workspace,
    report: ReportOutcome,
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn full_run(config: &str) -> Result<Run, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = ExperimentConfig::load(Some(&config_path(config)), &[]).map_err(err)?;
    cfg.out = dir.path().to_string_lossy().into_owned();
    let ws = Workspace::open(&cfg).map_err(err)?;
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    for_each_replica(&cfg, jobs, |r| {
        run_pretrain(&ws, r)?;
        run_unlearn_stage(&ws, r)?;
        run_meta_stage(&ws, r)?;
        run_attack_stage(&ws, r)?;
        run_eval_stage(&ws, r)
    })
    .map_err(err)?;
    let report = run_report(&ws, &cfg).map_err(err)?;
    Ok(Run { _dir: dir, cfg, ws, report })
}

fn seeds(run: &Run) -> Vec<u64> {
    (0..run.cfg.replicas).map(|i| run.cfg.replica(i).seed).collect()
}

fn alignment_trend(uce: &Run) -> Verdict {
    let seed = uce.cfg.seed;
    let (text, _) = uce.ws.input(&stage_key(seed, "meta"), "records.csv").map_err(err)?;
    let records: Vec<MetaStepRecord> = read_records_csv(&text).map_err(err)?;
    let (slope, _) = alignment_series(&records).map_err(err)?;
    Ok((
        slope < 0.0 && records.len() == 100,
        format!("{} outer steps at seed {seed}, OLS slope {slope:.3e}", records.len()),
    ))
}

fn slower_relearning(runs: &[(&str, &Run)]) -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, run) in runs {
        let v = &run.report.verdict;
        ok &= v.forget_not_worse_steps >= 3 && v.deltas.len() == 4;
        let deltas: Vec<String> = v.deltas.iter().map(|d| format!("{}:{:+.2}", d.step, d.forget_score)).collect();
        detail.push(format!(
            "{name} {} of {} steps meta <= unlearn (deltas {})",
            v.forget_not_worse_steps,
            v.deltas.len(),
            deltas.join(" ")
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn self_destruct(esd: &Run) -> Verdict {
    let c = &esd.report.crossing;
    let fmt = |v: Option<f64>| v.map_or("never crossed".to_string(), |x| format!("{x:.4}"));
    Ok((
        c.self_destruct == Some(true),
        format!(
            "retain loss where finetune loss first < {}: meta {} vs unlearn {}",
            c.threshold,
            fmt(c.meta_mean),
            fmt(c.unlearn_mean)
        ),
    ))
}

fn benign_preservation(runs: &[(&str, &Run)]) -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, run) in runs {
        let ev = &run.cfg.eval;
        let s = run.cfg.schedule.build().map_err(err)?;
        let (mut pre_score, mut pre_mmd, mut post_score, mut post_mmd) = (0.0, 0.0, 0.0, 0.0);
        let seeds = seeds(run);
        for &seed in &seeds {
            let (world, _) = run.ws.input(&stage_key(seed, "pretrain"), "world.json").map_err(err)?;
            let (table, _) = metaunlearn::concepts::ConceptTable::parse(&world).map_err(err)?;
            let (theta, _) = run.ws.input(&stage_key(seed, "meta"), "theta.json").map_err(err)?;
            let theta = Checkpoint::parse(&theta).and_then(|c| c.params()).map_err(err)?;
            pre_score += forget_score(&theta, &table, &s, ev.samples, ev.seed).map_err(err)?;
            for c in &ev.retain_concepts {
                pre_mmd += retain_mmd(&theta, &table, c, &s, ev.samples, ev.seed).map_err(err)? / ev.retain_concepts.len() as f64;
            }
            let (curve, _) = run.ws.input(&stage_key(seed, "attack"), "benign/meta.csv").map_err(err)?;
            let curve = RelearnCurve::parse_csv(&curve).map_err(err)?;
            let last = curve.entries.last().ok_or("empty benign curve")?;
            ok &= last.step == 300;
            post_score += last.forget_score;
            post_mmd += last.retain_mmd;
        }
        let k = seeds.len() as f64;
        let (pre_score, pre_mmd, post_score, post_mmd) = (pre_score / k, pre_mmd / k, post_score / k, post_mmd / k);
        ok &= post_mmd <= 1.5 * pre_mmd && post_score <= pre_score + 10.0;
        detail.push(format!(
            "{name} retain MMD {pre_mmd:.4} -> {post_mmd:.4} ({:.2}x), forget score {pre_score:.1} -> {post_score:.1}",
            post_mmd / pre_mmd
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn tiny_config(out: &Path) -> Result<ExperimentConfig, String> {
    let overrides: Vec<String> = [
        "model.hidden=8",
        "schedule.steps=20",
        "pretrain.steps=60",
        "unlearn.steps=20",
        "unlearn.batch=8",
        "meta.gamma1=1",
        "meta.gamma2=0",
        "meta.outer_steps=20",
        "meta.omega=0.005",
        "unlearn.lr=0.005",
        "meta.track_batch=16",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut cfg = ExperimentConfig::load(None, &overrides).map_err(err)?;
    cfg.out = out.to_string_lossy().into_owned();
    Ok(cfg)
}

fn reductions() -> Verdict {
    // gamma2 = 0 through the pipeline
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = tiny_config(dir.path())?;
    let ws = Workspace::open(&cfg).map_err(err)?;
    run_pretrain(&ws, &cfg).map_err(err)?;
    run_unlearn_stage(&ws, &cfg).map_err(err)?;
    run_meta_stage(&ws, &cfg).map_err(err)?;
    let theta = |stage: &str| -> Result<DenoiserParams, String> {
        let (text, _) = ws.input(&stage_key(cfg.seed, stage), "theta.json").map_err(err)?;
        Checkpoint::parse(&text).and_then(|c| c.params()).map_err(err)
    };
    let bitwise = theta("meta")?.flat() == theta("unlearn")?.flat();

    // tau = 0, both modes
    let f = Fixture::new(2, 6, 8).map_err(err)?;
    let want: Vec<f64> = {
        let tape = Tape::new();
        let th = tape.leaf(f.params.as_row());
        let l = diffusion_loss_on(&Denoiser::new(f.params.config()), th, &f.batches.ft, &f.batches.ft_draws, &f.schedule)
            .map_err(err)?;
        tape.grad(l, &[th]).map_err(err)?[0].value().data().iter().map(|g| -g).collect()
    };
    let exact = MetaConfig { tau: 0.0, ..Default::default() };
    let first = MetaConfig { tau: 0.0, mode: MetaMode::FirstOrder, ..Default::default() };
    let (_, ge) = meta_grad_exact(&f.params, &f.batches, &exact, &f.schedule).map_err(err)?;
    let (_, gf) = meta_grad_first_order(&f.params, &f.batches, &first, &f.schedule).map_err(err)?;
    let collapse = ge == want && gf == want;

    // UCE with nothing to forget
    let mut rng = stream_rng(31, Stream::Eval);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let ws = randn(6, 8, &mut rng);
        let retain = vec![vecn(8, &mut rng), vecn(8, &mut rng)];
        let target = vecn(8, &mut rng);
        let p = UceProblem { forget: &[], retain: &retain, target: &target, lambda1: 1.0, lambda2: 0.1 };
        worst = worst.max(p.solve(&ws).map_err(err)?.sub(&ws).max_abs() / ws.max_abs());
    }
    Ok((
        bitwise && collapse && worst < 1e-12,
        format!(
            "gamma2=0 meta == unlearn bitwise: {bitwise}; tau=0 gradient == -grad L_ft (exact, first order): {collapse}; \
             empty-forget UCE max rel. change {worst:.1e}"
        ),
    ))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: Vec<(usize, &str, fn() -> Verdict)> = vec![
        (1, "autodiff correctness", autodiff_correctness),
        (2, "closed-form optimality", closed_form_optimality),
        (3, "surrogate approximation order", approximation_order),
        (4, "multi-step equivalence", multi_step_equivalence),
        (5, "penalty mechanisms in isolation", penalty_mechanisms),
    ];
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let mut failed = 0;
    let mut report = |id: usize, name: &str, t: Instant, v: Verdict| {
        let (ok, detail) = v.unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        println!(
            "criterion {id:2} {} {name}: {detail} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    };
    for (id, name, f) in criteria {
        if wanted(id) {
            let t = Instant::now();
            report(id, name, t, f());
        }
    }

    // 6 to 9 share two full pipeline runs
    if (6..=9).any(wanted) {
        let t = Instant::now();
        let uce = full_run("uce.toml");
        let uce_time = t.elapsed();
        let esd = if (7..=9).any(wanted) { Some(full_run("esd.toml")) } else { None };
        println!(
            "(pipeline runs: uce {:.1}s, esd {:.1}s)",
            uce_time.as_secs_f64(),
            (t.elapsed() - uce_time).as_secs_f64()
        );
        let both = |f: &dyn Fn(&[(&str, &Run)]) -> Verdict| -> Verdict {
            let esd = esd.as_ref().expect("esd run").as_ref().map_err(|e| e.clone())?;
            let uce = uce.as_ref().map_err(|e| e.clone())?;
            f(&[("esd", esd), ("uce", uce)])
        };
        if wanted(6) {
            report(6, "alignment trend", t, uce.as_ref().map_err(|e| e.clone()).and_then(alignment_trend));
        }
        if wanted(7) {
            report(7, "slower relearning", t, both(&slower_relearning));
        }
        if wanted(8) {
            report(8, "self-destruct", t, both(&|r| self_destruct(r[0].1)));
        }
        if wanted(9) {
            report(9, "benign finetuning preservation", t, both(&benign_preservation));
        }
    }
    if wanted(10) {
        let t = Instant::now();
        report(10, "reduction identities", t, reductions());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
