use autodiff::check::{central_differences, max_relative_deviation, DEFAULT_STEP};
use autodiff::{Array, Tape, Var};
use metaunlearn::concepts::{draw_split, SplitSizes, WorldConfig};
use metaunlearn::diffusion::{diffusion_loss_on, Denoiser, DenoiserParams, ModelConfig, ScheduleConfig};
use metaunlearn::meta::{
    inner_descent, meta_grad, meta_grad_exact, meta_grad_first_order, meta_loss, meta_objective, meta_unlearn,
    surrogate_loss, surrogate_objective, MetaBatches, MetaConfig, MetaMode, MetaTerms,
};
use metaunlearn::rng::{stream_rng, Stream};
use metaunlearn::unlearn::{run_unlearn, MaskPreset, ParamMask, UnlearnConfig};
use metaunlearn::verify::Fixture;
use metaunlearn::Result;

// L(theta) = 1/2 theta A theta^T for a row vector theta and symmetric A.
fn quad<'a, 't>(a: &'a Array, c: &'a Array) -> impl Fn(Var<'t>) -> Result<Var<'t>> + 'a {
    move |th: Var<'t>| {
        let t = th.tape();
        let d = th - t.constant(c.clone());
        Ok(d.matmul(t.constant(a.clone())).dot(d).scale(0.5))
    }
}

fn mat_vec(a: &Array, v: &[f64]) -> Vec<f64> {
    a.matmul(&Array::column(v.to_vec())).into_data()
}

fn axpy(alpha: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| alpha * a + b).collect()
}

fn sub(x: &[f64], y: &[f64]) -> Vec<f64> {
    axpy(-1.0, y, x)
}

fn quadratic_problem() -> (Array, Array, Array, Vec<f64>) {
    let a = Array::new(3, 3, vec![2.0, 0.5, 0.0, 0.5, 1.5, -0.3, 0.0, -0.3, 1.0]);
    let b = Array::new(3, 3, vec![1.0, 0.2, 0.1, 0.2, 3.0, 0.0, 0.1, 0.0, 0.5]);
    let c = Array::row(vec![0.3, -1.0, 0.7]);
    (a, b, c, vec![0.8, -0.4, 1.2])
}

#[test]
fn inner_step_on_half_squared_norm() {
    let tape = Tape::new();
    let th = tape.leaf(Array::row(vec![1.0, 0.0]));
    let zero = Array::row(vec![0.0, 0.0]);
    let id = Array::identity(2);
    let ft = inner_descent(th, 1, 0.1, quad(&id, &zero)).unwrap();
    assert_eq!(ft.value().data(), &[0.9, 0.0]);
    let same = inner_descent(th, 3, 0.0, quad(&id, &zero)).unwrap();
    assert_eq!(same.id(), th.id());
}

#[test]
fn inner_step_jacobian_is_one_minus_tau_identity() {
    let tau = 0.1;
    let tape = Tape::higher_order();
    let th = tape.leaf(Array::row(vec![1.0, 0.0]));
    let id = Array::identity(2);
    let zero = Array::row(vec![0.0, 0.0]);
    let ft = inner_descent(th, 1, tau, quad(&id, &zero)).unwrap();
    for i in 0..2 {
        let e = tape.constant(Array::row((0..2).map(|j| if i == j { 1.0 } else { 0.0 }).collect()));
        let row = tape.grad(ft.dot(e), &[th]).unwrap()[0].value();
        for j in 0..2 {
            let want = if i == j { 1.0 - tau } else { 0.0 };
            assert!((row.data()[j] - want).abs() < 1e-15, "J[{i}][{j}] = {}", row.data()[j]);
        }
    }
}

// A loss that reads `at_ft` at the finetuned parameters and `at_theta` elsewhere.
fn values<'t>(tape: &'t Tape, ft_id: usize, at_ft: f64, at_theta: f64) -> impl Fn(Var<'t>) -> Result<Var<'t>> + Copy + 't {
    move |t: Var<'t>| Ok(tape.scalar(if t.id() == ft_id { at_ft } else { at_theta }))
}

#[test]
fn meta_objective_identities() {
    let tape = Tape::new();
    let th = tape.leaf(Array::row(vec![0.0]));
    let ft = th + 1.0;
    let ft_id = ft.id();
    let ft_loss = values(&tape, ft_id, 2.0, 5.0);
    let ret_loss = values(&tape, ft_id, 3.0, 1.0);
    let l = meta_objective(ft, th, ft_loss, ret_loss, 0.5, true).unwrap();
    assert_eq!(l.item(), -3.0);
    let l = meta_objective(ft, th, ft_loss, ret_loss, 0.0, true).unwrap();
    assert_eq!(l.item(), -2.0);
    // theta_ft = theta: the bracket vanishes
    let l = meta_objective(th, th, ft_loss, ret_loss, 0.5, true).unwrap();
    assert_eq!(l.item(), -5.0);
}

#[test]
fn exact_and_surrogate_gradients_match_hand_derivation() {
    let (a, b, c, theta) = quadratic_problem();
    let (tau, zeta) = (0.05, 0.7);
    let zero = Array::row(vec![0.0; 3]);
    let cfg = MetaConfig { tau, zeta, inner_steps: 1, ..Default::default() };

    let tape = Tape::higher_order();
    let th = tape.leaf(Array::row(theta.clone()));
    let ft = inner_descent(th, 1, tau, quad(&a, &zero)).unwrap();
    let exact = meta_objective(ft, th, quad(&a, &zero), quad(&b, &c), zeta, true).unwrap();
    let g_exact = tape.grad(exact, &[th]).unwrap()[0].value().data().to_vec();
    let surr = surrogate_objective(th, quad(&a, &zero), quad(&b, &c), &cfg).unwrap();
    let g_surr = tape.grad(surr, &[th]).unwrap()[0].value().data().to_vec();

    // theta' = (I - tau A) theta; everything below is the chain rule by hand
    let a_th = mat_vec(&a, &theta);
    let th_ft = axpy(-tau, &a_th, &theta);
    let i_minus = |v: &[f64]| axpy(-tau, &mat_vec(&a, v), v);
    let d_ret_ft = mat_vec(&b, &sub(&th_ft, c.data()));
    let d_ret = mat_vec(&b, &sub(&theta, c.data()));
    let want_exact: Vec<f64> = {
        let first = i_minus(&mat_vec(&a, &th_ft));
        let bracket = sub(&i_minus(&d_ret_ft), &d_ret);
        first.iter().zip(&bracket).map(|(f, r)| -f - zeta * r).collect()
    };
    let want_surr: Vec<f64> = {
        let a2 = mat_vec(&a, &a_th);
        let abr = mat_vec(&a, &d_ret);
        let ba = mat_vec(&b, &a_th);
        (0..3).map(|i| -a_th[i] + 2.0 * tau * a2[i] + tau * zeta * (abr[i] + ba[i])).collect()
    };
    for i in 0..3 {
        assert!((g_exact[i] - want_exact[i]).abs() < 1e-10, "exact {i}: {} vs {}", g_exact[i], want_exact[i]);
        assert!((g_surr[i] - want_surr[i]).abs() < 1e-10, "surrogate {i}: {} vs {}", g_surr[i], want_surr[i]);
    }

    // exact - surrogate = -tau^2/2 (theta A^3 theta + zeta theta A B A theta)
    let a3 = mat_vec(&a, &mat_vec(&a, &a_th));
    let aba = mat_vec(&a, &mat_vec(&b, &a_th));
    let gap = -0.5 * tau * tau * (theta.iter().zip(&a3).map(|(x, y)| x * y).sum::<f64>() + zeta * a_th.iter().zip(&mat_vec(&b, &a_th)).map(|(x, y)| x * y).sum::<f64>());
    assert!((exact.item() - surr.item() - gap).abs() < 1e-12);
    for i in 0..3 {
        let want = -tau * tau * (a3[i] + zeta * aba[i]);
        assert!((g_exact[i] - g_surr[i] - want).abs() < 1e-10);
    }
}

#[test]
fn exact_meta_gradient_matches_central_differences() {
    for (seed, m) in [(1, 1), (2, 3)] {
        let f = Fixture::new(seed, 6, 8).unwrap();
        let cfg = MetaConfig { tau: 0.05, inner_steps: m, zeta: 0.8, ..Default::default() };
        let (_, analytic) = meta_grad_exact(&f.params, &f.batches, &cfg, &f.schedule).unwrap();
        let numeric = central_differences(
            |theta| {
                let mut p = f.params.clone();
                p.flat_mut().copy_from_slice(theta);
                meta_loss(&p, &f.batches, &cfg, &f.schedule).unwrap()
            },
            f.params.flat(),
            DEFAULT_STEP,
        );
        let (dev, _) = max_relative_deviation(&analytic, &numeric);
        assert!(dev < 1e-3, "seed {seed}, M = {m}: {dev}");
    }
}

fn ft_gradient(f: &Fixture) -> Vec<f64> {
    let model = Denoiser::new(f.params.config());
    let tape = Tape::new();
    let th = tape.leaf(f.params.as_row());
    let l = diffusion_loss_on(&model, th, &f.batches.ft, &f.batches.ft_draws, &f.schedule).unwrap();
    tape.grad(l, &[th]).unwrap()[0].value().data().to_vec()
}

#[test]
fn zero_tau_collapses_to_negative_finetune_gradient() {
    let f = Fixture::new(3, 6, 8).unwrap();
    let want: Vec<f64> = ft_gradient(&f).iter().map(|g| -g).collect();
    let exact = MetaConfig { tau: 0.0, mode: MetaMode::Exact, ..Default::default() };
    assert_eq!(meta_grad(&f.params, &f.batches, &exact, &f.schedule).unwrap().1, want);
    let first = MetaConfig { tau: 0.0, zeta: 0.0, mode: MetaMode::FirstOrder, ..Default::default() };
    assert_eq!(meta_grad(&f.params, &f.batches, &first, &f.schedule).unwrap().1, want);
}

#[test]
fn surrogate_gap_shrinks_quadratically() {
    let f = Fixture::new(4, 6, 8).unwrap();
    let gaps: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&tau| {
            let cfg = MetaConfig { tau, ..Default::default() };
            (meta_loss(&f.params, &f.batches, &cfg, &f.schedule).unwrap()
                - surrogate_loss(&f.params, &f.batches, &cfg, &f.schedule).unwrap())
            .abs()
        })
        .collect();
    for w in gaps.windows(2) {
        let slope = (w[0] / w[1]).log10();
        assert!((1.7..=2.3).contains(&slope), "{gaps:?}");
    }
}

#[test]
fn first_order_gradient_matches_its_own_loss() {
    let f = Fixture::new(5, 6, 8).unwrap();
    let cfg = MetaConfig { tau: 0.02, mode: MetaMode::FirstOrder, ..Default::default() };
    let (_, analytic) = meta_grad_first_order(&f.params, &f.batches, &cfg, &f.schedule).unwrap();
    let numeric = central_differences(
        |theta| {
            let mut p = f.params.clone();
            p.flat_mut().copy_from_slice(theta);
            surrogate_loss(&p, &f.batches, &cfg, &f.schedule).unwrap()
        },
        f.params.flat(),
        DEFAULT_STEP,
    );
    assert!(max_relative_deviation(&analytic, &numeric).0 < 1e-4);
}

#[test]
fn disabled_terms_reduce_the_surrogate() {
    let f = Fixture::new(6, 6, 8).unwrap();
    let only = |terms| MetaConfig { tau: 0.02, terms, ..Default::default() };
    let none = MetaTerms { ft_loss: false, grad_norm: false, inner_product: false };
    assert_eq!(surrogate_loss(&f.params, &f.batches, &only(none), &f.schedule).unwrap(), 0.0);
    let ft_only = MetaTerms { ft_loss: true, ..none };
    let model = Denoiser::new(f.params.config());
    let tape = Tape::new();
    let l = diffusion_loss_on(&model, tape.leaf(f.params.as_row()), &f.batches.ft, &f.batches.ft_draws, &f.schedule).unwrap();
    assert_eq!(surrogate_loss(&f.params, &f.batches, &only(ft_only), &f.schedule).unwrap(), -l.item());
    let norm_only = MetaTerms { grad_norm: true, ..none };
    let g = ft_gradient(&f);
    let want = 0.02 * g.iter().map(|x| x * x).sum::<f64>();
    let got = surrogate_loss(&f.params, &f.batches, &only(norm_only), &f.schedule).unwrap();
    assert!((got - want).abs() < 1e-12 * want.max(1.0));
}

struct Small {
    params: DenoiserParams,
    bundle: metaunlearn::concepts::DatasetBundle,
    table: metaunlearn::concepts::ConceptTable,
    schedule: metaunlearn::diffusion::NoiseSchedule,
}

fn small(seed: u64) -> Small {
    let world = WorldConfig { embed_dim: 4, ..Default::default() };
    let table = world.build(seed).unwrap();
    let sizes = SplitSizes { forget: 64, retain: 64, ft_pool: 32, benign: 32 };
    let bundle = draw_split(&table, &sizes, seed).unwrap();
    let model = ModelConfig { hidden: 8, time_dim: 4, cond_dim: 4, ..Default::default() };
    let schedule = ScheduleConfig { steps: 20, ..Default::default() }.build().unwrap();
    let params = DenoiserParams::init(&model, &mut stream_rng(seed, Stream::Init));
    Small { params, bundle, table, schedule }
}

#[test]
fn zero_gamma2_reproduces_plain_unlearning_bitwise() {
    let w = small(7);
    let unlearn = UnlearnConfig { steps: 25, batch: 8, ..Default::default() };
    let plain = run_unlearn(&w.params, &unlearn, &w.bundle, &w.table, &w.schedule, 7).unwrap();
    let cfg = MetaConfig {
        outer_steps: unlearn.steps,
        omega: unlearn.lr,
        outer_optimizer: unlearn.optimizer,
        gamma1: 1.0,
        gamma2: 0.0,
        ft_batch: 8,
        retain_batch: 8,
        track_batch: 8,
        ..Default::default()
    };
    let meta = meta_unlearn(&w.params, &cfg, &unlearn, &w.bundle, &w.table, &w.schedule, 7, |_| {}).unwrap();
    assert_eq!(meta.params.flat(), plain.params.flat());
    assert_eq!(meta.records.len(), 25);
    for (r, l) in meta.records.iter().zip(&plain.losses) {
        assert_eq!(r.l_unlearn, *l);
    }
}

#[test]
fn zero_gamma1_single_step_follows_the_meta_gradient() {
    let w = small(8);
    let unlearn = UnlearnConfig { batch: 8, mask: MaskPreset::F, ..Default::default() };
    let cfg = MetaConfig {
        outer_steps: 1,
        gamma1: 0.0,
        gamma2: 0.5,
        omega: 0.1,
        ft_batch: 8,
        retain_batch: 8,
        track_batch: 8,
        ..Default::default()
    };
    let out = meta_unlearn(&w.params, &cfg, &unlearn, &w.bundle, &w.table, &w.schedule, 8, |_| {}).unwrap();
    let tokens = w.params.config().tokens;
    let b = MetaBatches::sample(&w.bundle.forget, &w.bundle.retain, 8, 8, &w.table, tokens, &w.schedule, &mut stream_rng(8, Stream::Meta));
    let (_, g) = meta_grad(&w.params, &b, &cfg, &w.schedule).unwrap();
    let mut g: Vec<f64> = g.iter().map(|x| 0.5 * x).collect();
    ParamMask::preset(w.params.layout(), MaskPreset::F).apply(w.params.layout(), &mut g);
    let want: Vec<f64> = w.params.flat().iter().zip(&g).map(|(t, d)| t - 0.1 * d).collect();
    assert_eq!(out.params.flat(), &want[..]);
}

#[test]
fn closed_form_branch_trains_only_its_mask() {
    let w = small(9);
    let unlearn = UnlearnConfig { method: metaunlearn::unlearn::Method::Uce, ..Default::default() };
    let edited = run_unlearn(&w.params, &unlearn, &w.bundle, &w.table, &w.schedule, 9).unwrap().params;
    let cfg = MetaConfig { outer_steps: 3, ft_batch: 8, retain_batch: 8, track_batch: 8, omega: 1e-2, ..Default::default() };
    let out = meta_unlearn(&edited, &cfg, &unlearn, &w.bundle, &w.table, &w.schedule, 9, |_| {}).unwrap();
    let layout = edited.layout();
    let mask = ParamMask::preset(layout, cfg.two_stage_mask);
    let mut moved = false;
    for seg in layout.segments() {
        let (a, b) = (edited.segment_slice(&seg.name), out.params.segment_slice(&seg.name));
        if mask.includes(layout, &seg.name) {
            moved |= a != b;
        } else {
            assert_eq!(a, b, "{} changed outside the mask", seg.name);
        }
    }
    assert!(moved);
    assert!(out.records.iter().all(|r| r.l_unlearn == 0.0));
}
