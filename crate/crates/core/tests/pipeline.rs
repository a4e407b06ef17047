use std::path::Path;

use metaunlearn::config::ExperimentConfig;
use metaunlearn::io::{read_file, Checkpoint};
use metaunlearn::pipeline::{
    for_each_replica, run_attack_stage, run_eval_stage, run_meta_stage, run_pretrain, run_report, run_unlearn_stage,
    stage_key, RunManifest, Workspace, MANIFEST_FILE,
};
use metaunlearn::diffusion::DenoiserParams;
use metaunlearn::rng::{stream_rng, Stream};
use metaunlearn::Error;

fn tiny(out: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut overrides: Vec<String> = [
        "replicas=2",
        "model.hidden=8",
        "model.time_dim=4",
        "schedule.steps=20",
        "split.forget=64",
        "split.retain=64",
        "split.ft_pool=32",
        "split.benign=32",
        "pretrain.steps=60",
        "unlearn.steps=10",
        "unlearn.batch=8",
        "meta.outer_steps=4",
        "meta.ft_batch=8",
        "meta.retain_batch=8",
        "meta.track_batch=16",
        "attack.checkpoints_at=[2, 4]",
        "attack.trace_every=2",
        "attack.batch=8",
        "eval.samples=100",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    let mut cfg = ExperimentConfig::load(None, &overrides).unwrap();
    cfg.out = out.to_string_lossy().into_owned();
    cfg
}

fn run_all(cfg: &ExperimentConfig) -> Workspace {
    let ws = Workspace::open(cfg).unwrap();
    for_each_replica(cfg, 2, |r| {
        run_pretrain(&ws, r)?;
        run_unlearn_stage(&ws, r)?;
        run_meta_stage(&ws, r)?;
        run_attack_stage(&ws, r)?;
        run_eval_stage(&ws, r)
    })
    .unwrap();
    run_report(&ws, cfg).unwrap();
    ws
}

fn theta(ws: &Workspace, seed: u64, stage: &str) -> DenoiserParams {
    let (text, _) = ws.input(&stage_key(seed, stage), "theta.json").unwrap();
    Checkpoint::parse(&text).unwrap().params().unwrap()
}

#[test]
fn identical_configs_give_identical_manifests() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let wa = run_all(&tiny(a.path(), &[]));
    let wb = run_all(&tiny(b.path(), &[]));
    let (ma, mb) = (wa.manifest(), wb.manifest());
    assert_eq!(ma.stages.len(), 2 * 5 + 1);
    assert_eq!(ma.fingerprint(), mb.fingerprint());
    ma.verify(wa.root()).unwrap();
    let on_disk = RunManifest::parse(&read_file(&wa.root().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, ma);
    // a different seed changes the artifacts
    let c = tempfile::tempdir().unwrap();
    let mut cfg = tiny(c.path(), &[]);
    cfg.seed = 5;
    let wc = run_all(&cfg);
    assert_eq!(wc.root().file_name(), wa.root().file_name());
    assert_ne!(wc.manifest().fingerprint(), ma.fingerprint());
}

#[test]
fn stages_resume_from_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    let ws = run_all(&cfg);
    let before = ws.manifest();
    drop(ws);

    let ws = Workspace::open(&cfg).unwrap();
    let r = cfg.replica(1);
    for o in [
        run_pretrain(&ws, &r).unwrap(),
        run_unlearn_stage(&ws, &r).unwrap(),
        run_meta_stage(&ws, &r).unwrap(),
        run_attack_stage(&ws, &r).unwrap(),
        run_eval_stage(&ws, &r).unwrap(),
    ] {
        assert!(o.cached, "{} recomputed", o.key);
    }
    assert_eq!(ws.manifest(), before);

    // damaging an attack output reruns that stage alone, to the same bytes
    let curve = ws.root().join(stage_key(r.seed, "attack")).join("ft_single/meta.csv");
    std::fs::write(&curve, "step\n").unwrap();
    assert!(run_pretrain(&ws, &r).unwrap().cached);
    let again = run_attack_stage(&ws, &r).unwrap();
    assert!(!again.cached);
    assert_eq!(ws.manifest().fingerprint(), before.fingerprint());
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["replicas=1"]);
    let ws = Workspace::open(&cfg).unwrap();
    assert!(matches!(run_unlearn_stage(&ws, &cfg), Err(Error::MissingInput(_))));
    assert!(matches!(run_report(&ws, &cfg), Err(Error::MissingInput(_))));
    run_pretrain(&ws, &cfg).unwrap();
    run_unlearn_stage(&ws, &cfg).unwrap();
    run_meta_stage(&ws, &cfg).unwrap();
    run_attack_stage(&ws, &cfg).unwrap();
    let curve = ws.root().join(stage_key(cfg.seed, "attack")).join("ft_single/unlearn.csv");
    std::fs::remove_file(curve).unwrap();
    let err = run_report(&ws, &cfg).unwrap_err();
    assert!(matches!(&err, Error::MissingInput(m) if m.contains("unlearn.csv")), "{err}");
    assert!(ws.manifest().verify(ws.root()).is_err());
}

#[test]
fn zero_gamma2_meta_equals_unlearn() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(
        dir.path(),
        &["replicas=1", "meta.gamma2=0", "meta.gamma1=1", "meta.outer_steps=10", "meta.omega=0.005", "unlearn.lr=0.005"],
    );
    let ws = Workspace::open(&cfg).unwrap();
    run_pretrain(&ws, &cfg).unwrap();
    run_unlearn_stage(&ws, &cfg).unwrap();
    run_meta_stage(&ws, &cfg).unwrap();
    assert_eq!(theta(&ws, 0, "meta").flat(), theta(&ws, 0, "unlearn").flat());
}

#[test]
fn zero_pretrain_steps_keep_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["replicas=1", "pretrain.steps=0", "seed=3"]);
    let ws = Workspace::open(&cfg).unwrap();
    run_pretrain(&ws, &cfg).unwrap();
    let init = DenoiserParams::init(&cfg.model, &mut stream_rng(3, Stream::Init));
    assert_eq!(theta(&ws, 3, "pretrain"), init);
}

#[test]
fn closed_form_unlearning_has_no_training_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["replicas=1", "unlearn.method=\"uce\""]);
    let ws = Workspace::open(&cfg).unwrap();
    run_pretrain(&ws, &cfg).unwrap();
    let o = run_unlearn_stage(&ws, &cfg).unwrap();
    assert!(o.entry.outputs.contains_key("theta.json"));
    assert!(!o.entry.outputs.contains_key("loss.csv"));
    // the meta stage starts from the edited model
    let m = run_meta_stage(&ws, &cfg).unwrap();
    assert!(m.entry.inputs.keys().any(|k| k.ends_with("unlearn/theta.json")));
}

#[test]
fn a_manifest_from_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["replicas=1"]);
    let ws = Workspace::open(&cfg).unwrap();
    let mut other = RunManifest::new("0".repeat(64));
    other.stages = ws.manifest().stages;
    std::fs::write(ws.root().join(MANIFEST_FILE), other.to_json()).unwrap();
    assert!(matches!(Workspace::open(&cfg), Err(Error::Format { .. })));
}
