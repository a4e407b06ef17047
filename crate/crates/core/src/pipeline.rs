//! Stage orchestration: pretrain, unlearn, meta, attack, eval and report
//! over a run directory `out/<config-hash>/` holding `manifest.json`, the
//! resolved `config.toml` and one `seed-<s>/<stage>/` folder per replica.
//!
//! A stage whose manifest entry still matches the files on disk is not
//! recomputed. Stages never run their upstream stages implicitly; a
//! missing input is an error.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{compare_runs, run_attack, AttackConfig, AttackDataset, CurveEntry, RelearnCurve, TracePoint, VerdictReport};
use crate::concepts::{draw_split, ConceptTable, DatasetBundle};
use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::diffusion::DenoiserParams;
use crate::error::{Error, Result};
use crate::eval::{alignment_series, line_chart_svg, MetricReport, Series};
use crate::io::{
    content_address, read_file, read_records_csv, write_file, write_records_csv, Checkpoint, CsvRecord, Provenance,
    SeedEntry, FORMAT_VERSION,
};
use crate::meta::{meta_unlearn, MetaStepRecord};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::train::pretrain;
use crate::unlearn::run_unlearn;

pub const MANIFEST_SCHEMA: &str = "metaunlearn.manifest";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub address: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub seed: u64,
    pub outputs: BTreeMap<String, Artifact>,
    /// Content addresses of the upstream artifacts consumed.
    pub inputs: BTreeMap<String, String>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema: String,
    pub version: u32,
    pub config_hash: String,
    pub artifact_versions: BTreeMap<String, u32>,
    /// Keyed `seed-<s>/<stage>` or `report`.
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        let artifact_versions = [
            ("checkpoint", FORMAT_VERSION),
            ("world", FORMAT_VERSION),
            ("config", SCHEMA_VERSION),
            ("manifest", 1),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        RunManifest { schema: MANIFEST_SCHEMA.into(), version: 1, config_hash, artifact_versions, stages: BTreeMap::new() }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(text).map_err(|e| Error::format("manifest", e))?;
        if m.schema != MANIFEST_SCHEMA || m.version != 1 {
            return Err(Error::format("manifest", format!("schema `{}` v{}", m.schema, m.version)));
        }
        for (key, e) in &m.stages {
            for a in e.outputs.values() {
                if a.path.starts_with('/') || a.path.split('/').any(|c| c == "..") {
                    return Err(Error::format("manifest", format!("{key}: path `{}` escapes the run directory", a.path)));
                }
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Content address of the manifest with wall times zeroed; equal
    /// across reruns of a deterministic pipeline.
    pub fn fingerprint(&self) -> String {
        let mut m = self.clone();
        for e in m.stages.values_mut() {
            e.wall_ms = 0.0;
        }
        content_address(m.to_json().as_bytes())
    }

    /// Checks that every recorded file exists and matches its address.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (key, e) in &self.stages {
            for a in e.outputs.values() {
                check_artifact(root, a).map_err(|err| match err {
                    Error::Format { msg, .. } => Error::format("manifest", format!("{key}: {msg}")),
                    other => other,
                })?;
            }
        }
        Ok(())
    }
}

fn check_artifact(root: &Path, a: &Artifact) -> Result<String> {
    let path = root.join(&a.path);
    if !path.exists() {
        return Err(Error::MissingInput(format!("{} is recorded in the manifest but absent", a.path)));
    }
    let text = read_file(&path)?;
    let got = content_address(text.as_bytes());
    if got != a.address {
        return Err(Error::format("artifact", format!("{} has address {got}, manifest says {}", a.path, a.address)));
    }
    Ok(text)
}

/// Whether a stage was computed or taken from the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub key: String,
    pub cached: bool,
    pub entry: StageEntry,
}

pub fn stage_key(seed: u64, stage: &str) -> String {
    format!("seed-{seed}/{stage}")
}

/// A run directory and its manifest, shared by concurrent replicas.
pub struct Workspace {
    root: PathBuf,
    config: ExperimentConfig,
    manifest: Mutex<RunManifest>,
}

impl Workspace {
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Path::new(&cfg.out).join(cfg.short_hash());
        let mpath = root.join(MANIFEST_FILE);
        let manifest = if mpath.exists() {
            let m = RunManifest::parse(&read_file(&mpath)?)?;
            if m.config_hash != cfg.hash() {
                return Err(Error::format("manifest", format!("belongs to config {}", m.config_hash)));
            }
            m
        } else {
            RunManifest::new(cfg.hash())
        };
        let mut family = cfg.clone();
        family.seed = 0;
        family.replicas = 1;
        write_file(&root.join("config.toml"), family.to_toml().as_bytes())?;
        write_file(&mpath, manifest.to_json().as_bytes())?;
        Ok(Workspace { root, config: cfg.clone(), manifest: Mutex::new(manifest) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn manifest(&self) -> RunManifest {
        self.manifest.lock().expect("manifest lock").clone()
    }

    fn cached(&self, key: &str) -> Option<StageEntry> {
        let entry = self.manifest.lock().expect("manifest lock").stages.get(key).cloned()?;
        entry.outputs.values().all(|a| check_artifact(&self.root, a).is_ok()).then_some(entry)
    }

    /// Reads a verified output of an upstream stage.
    pub fn input(&self, key: &str, name: &str) -> Result<(String, String)> {
        let artifact = {
            let m = self.manifest.lock().expect("manifest lock");
            let entry = m.stages.get(key).ok_or_else(|| Error::MissingInput(format!("stage `{key}` has not run")))?;
            entry
                .outputs
                .get(name)
                .cloned()
                .ok_or_else(|| Error::MissingInput(format!("`{name}` of stage `{key}`")))?
        };
        let text = check_artifact(&self.root, &artifact)?;
        Ok((text, artifact.address))
    }

    fn commit(
        &self,
        key: &str,
        seed: u64,
        outputs: Vec<(String, String)>,
        inputs: BTreeMap<String, String>,
        started: Instant,
    ) -> Result<StageOutcome> {
        let mut files = BTreeMap::new();
        for (name, text) in outputs {
            let rel = format!("{key}/{name}");
            write_file(&self.root.join(&rel), text.as_bytes())?;
            files.insert(name, Artifact { path: rel, address: content_address(text.as_bytes()) });
        }
        let entry = StageEntry { seed, outputs: files, inputs, wall_ms: started.elapsed().as_secs_f64() * 1e3 };
        let mut m = self.manifest.lock().expect("manifest lock");
        m.stages.insert(key.to_string(), entry.clone());
        write_file(&self.root.join(MANIFEST_FILE), m.to_json().as_bytes())?;
        Ok(StageOutcome { key: key.to_string(), cached: false, entry })
    }

    fn world(&self, seed: u64, inputs: &mut BTreeMap<String, String>) -> Result<(ConceptTable, DatasetBundle)> {
        let key = stage_key(seed, "pretrain");
        let (text, addr) = self.input(&key, "world.json")?;
        inputs.insert(format!("{key}/world.json"), addr);
        let (table, bundle) = ConceptTable::parse(&text)?;
        let bundle = bundle.ok_or_else(|| Error::format("world", "run world is missing its dataset bundle"))?;
        Ok((table, bundle))
    }

    fn checkpoint(&self, seed: u64, stage: &str, inputs: &mut BTreeMap<String, String>) -> Result<DenoiserParams> {
        let key = stage_key(seed, stage);
        let (text, addr) = self.input(&key, "theta.json")?;
        inputs.insert(format!("{key}/theta.json"), addr);
        Checkpoint::parse(&text)?.params()
    }
}

#[derive(Serialize, Deserialize)]
struct LossPoint {
    step: usize,
    loss: f64,
}

impl CsvRecord for LossPoint {
    const KIND: &'static str = "loss trace";
    const HEADER: &'static [&'static str] = &["step", "loss"];
}

fn loss_csv(losses: &[f64]) -> String {
    let rows: Vec<LossPoint> = losses.iter().enumerate().map(|(step, &loss)| LossPoint { step, loss }).collect();
    write_records_csv(&rows)
}

fn lineage(seed: u64, stages: &[&str]) -> Vec<SeedEntry> {
    stages.iter().map(|s| SeedEntry { stage: s.to_string(), seed }).collect()
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

pub fn run_pretrain(ws: &Workspace, cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let key = stage_key(cfg.seed, "pretrain");
    if let Some(entry) = ws.cached(&key) {
        return Ok(StageOutcome { key, cached: true, entry });
    }
    let started = Instant::now();
    let table = cfg.world.build(cfg.seed)?;
    let bundle = draw_split(&table, &cfg.split, cfg.seed)?;
    let s = cfg.schedule.build()?;
    let mut params = DenoiserParams::init(&cfg.model, &mut stream_rng(cfg.seed, Stream::Init));
    let losses = pretrain(&mut params, &cfg.pretrain, &bundle, &table, &s, cfg.seed)?;
    let mut ckpt = Checkpoint::new(
        &params,
        cfg.schedule,
        Provenance { method: "pretrain".into(), config_hash: cfg.hash() },
        lineage(cfg.seed, &["world", "data", "init", "pretrain"]),
    );
    ckpt.stage_config = Some(to_value(&cfg.pretrain));
    let outputs = vec![
        ("world.json".to_string(), table.to_json(Some(&bundle))),
        ("theta.json".to_string(), ckpt.to_json()),
        ("loss.csv".to_string(), loss_csv(&losses)),
    ];
    ws.commit(&key, cfg.seed, outputs, BTreeMap::new(), started)
}

pub fn run_unlearn_stage(ws: &Workspace, cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let key = stage_key(cfg.seed, "unlearn");
    if let Some(entry) = ws.cached(&key) {
        return Ok(StageOutcome { key, cached: true, entry });
    }
    let started = Instant::now();
    let mut inputs = BTreeMap::new();
    let (table, bundle) = ws.world(cfg.seed, &mut inputs)?;
    let theta_star = ws.checkpoint(cfg.seed, "pretrain", &mut inputs)?;
    let s = cfg.schedule.build()?;
    let out = run_unlearn(&theta_star, &cfg.unlearn, &bundle, &table, &s, cfg.seed)?;
    let mut ckpt = Checkpoint::new(
        &out.params,
        cfg.schedule,
        Provenance { method: cfg.unlearn.method.name().into(), config_hash: cfg.hash() },
        lineage(cfg.seed, &["pretrain", "unlearn"]),
    );
    let mut sc = to_value(&cfg.unlearn);
    if !out.rece_embeddings.is_empty() {
        sc["rece_embeddings"] = to_value(&out.rece_embeddings);
    }
    ckpt.stage_config = Some(sc);
    let mut outputs = vec![("theta.json".to_string(), ckpt.to_json())];
    if !out.losses.is_empty() {
        outputs.push(("loss.csv".to_string(), loss_csv(&out.losses)));
    }
    ws.commit(&key, cfg.seed, outputs, inputs, started)
}

fn alignment_chart(records: &[MetaStepRecord]) -> String {
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64, r.inner_product_norm)).collect();
    let mut series = vec![Series { label: "normalized inner product".into(), points, dashed: false }];
    if let Ok((slope, intercept)) = alignment_series(records) {
        let last = records.last().map_or(0.0, |r| r.step as f64);
        series.push(Series {
            label: format!("OLS fit (slope {slope:.3e})"),
            points: vec![(0.0, intercept), (last, intercept + slope * last)],
            dashed: true,
        });
    }
    line_chart_svg("Gradient alignment during meta-unlearning", "outer step", "cos(g_ft, g_retain)", &series)
}

pub fn run_meta_stage(ws: &Workspace, cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let key = stage_key(cfg.seed, "meta");
    if let Some(entry) = ws.cached(&key) {
        return Ok(StageOutcome { key, cached: true, entry });
    }
    let started = Instant::now();
    let mut inputs = BTreeMap::new();
    let (table, bundle) = ws.world(cfg.seed, &mut inputs)?;
    let init_stage = if cfg.unlearn.method.is_closed_form() { "unlearn" } else { "pretrain" };
    let init = ws.checkpoint(cfg.seed, init_stage, &mut inputs)?;
    let s = cfg.schedule.build()?;

    // records stream to disk as they are produced
    let partial = ws.root.join(&key).join("records.csv.partial");
    if let Some(dir) = partial.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut sink = OpenOptions::new().create(true).write(true).truncate(true).open(&partial).map_err(|e| Error::io(&partial, e))?;
    sink.write_all(write_records_csv::<MetaStepRecord>(&[]).as_bytes()).map_err(|e| Error::io(&partial, e))?;
    let mut sink_err = None;
    let out = meta_unlearn(&init, &cfg.meta, &cfg.unlearn, &bundle, &table, &s, cfg.seed, |rec| {
        let text = write_records_csv(std::slice::from_ref(rec));
        let line = text.split_once('\n').map_or("", |(_, rest)| rest);
        if let Err(e) = sink.write_all(line.as_bytes()).and_then(|_| sink.flush()) {
            sink_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = sink_err {
        return Err(Error::io(&partial, e));
    }
    drop(sink);
    // wall times stay in an untracked side file so that the addressed
    // artifacts are identical across reruns
    let _ = fs::rename(&partial, ws.root.join(&key).join("records_timed.csv"));
    let untimed: Vec<MetaStepRecord> = out.records.iter().map(|r| MetaStepRecord { wall_ms: 0.0, ..r.clone() }).collect();

    let mut ckpt = Checkpoint::new(
        &out.params,
        cfg.schedule,
        Provenance { method: format!("meta-{}", cfg.unlearn.method.name()), config_hash: cfg.hash() },
        lineage(cfg.seed, &["pretrain", "unlearn", "meta", "probe"]),
    );
    ckpt.stage_config = Some(serde_json::json!({ "meta": to_value(&cfg.meta), "unlearn": to_value(&cfg.unlearn) }));
    let outputs = vec![
        ("theta.json".to_string(), ckpt.to_json()),
        ("records.csv".to_string(), write_records_csv(&untimed)),
        ("alignment.svg".to_string(), alignment_chart(&out.records)),
    ];
    ws.commit(&key, cfg.seed, outputs, inputs, started)
}

/// Attack datasets run by the attack stage: the configured one, plus the
/// benign control when the configured one is not already benign.
pub fn attack_datasets(cfg: &AttackConfig) -> Vec<AttackDataset> {
    let mut v = vec![cfg.dataset];
    if cfg.dataset != AttackDataset::Benign {
        v.push(AttackDataset::Benign);
    }
    v
}

pub fn dataset_name(d: AttackDataset) -> &'static str {
    match d {
        AttackDataset::FtSingle => "ft_single",
        AttackDataset::FtMulti => "ft_multi",
        AttackDataset::Benign => "benign",
    }
}

pub fn run_attack_stage(ws: &Workspace, cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let key = stage_key(cfg.seed, "attack");
    if let Some(entry) = ws.cached(&key) {
        return Ok(StageOutcome { key, cached: true, entry });
    }
    let started = Instant::now();
    let mut inputs = BTreeMap::new();
    let (table, bundle) = ws.world(cfg.seed, &mut inputs)?;
    let released = [
        ("unlearn", ws.checkpoint(cfg.seed, "unlearn", &mut inputs)?),
        ("meta", ws.checkpoint(cfg.seed, "meta", &mut inputs)?),
    ];
    let s = cfg.schedule.build()?;
    let mut outputs = Vec::new();
    let mut curves: BTreeMap<(AttackDataset, &str), RelearnCurve> = BTreeMap::new();
    for ds in attack_datasets(&cfg.attack) {
        let acfg = AttackConfig { dataset: ds, seed: derive_seed(cfg.seed, Stream::Attack, cfg.attack.seed), ..cfg.attack.clone() };
        for (which, theta) in &released {
            let (curve, snapshots) = run_attack(theta, &acfg, &bundle, &table, &s, &cfg.eval)?;
            let dir = dataset_name(ds);
            outputs.push((format!("{dir}/{which}.csv"), curve.to_csv()));
            outputs.push((format!("{dir}/{which}_trace.csv"), curve.trace_csv()));
            for (step, p) in snapshots {
                let mut ckpt = Checkpoint::new(
                    &p,
                    cfg.schedule,
                    Provenance { method: format!("attack-{dir}"), config_hash: cfg.hash() },
                    lineage(cfg.seed, &["attack", "eval"]),
                );
                ckpt.stage_config = Some(to_value(&acfg));
                outputs.push((format!("{dir}/{which}_step{step}.json"), ckpt.to_json()));
            }
            curves.insert((ds, which), curve);
        }
    }
    let pair = |ds| (&curves[&(ds, "unlearn")], &curves[&(ds, "meta")]);
    let (u, m) = pair(cfg.attack.dataset);
    let benign = (cfg.attack.dataset != AttackDataset::Benign).then(|| pair(AttackDataset::Benign));
    let verdict = compare_runs(u, m, benign, cfg.attack.benign_band)?;
    outputs.push(("verdict.json".into(), serde_json::to_string_pretty(&verdict).expect("verdict serializes") + "\n"));
    ws.commit(&key, cfg.seed, outputs, inputs, started)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    pub pretrained: MetricReport,
    pub unlearned: MetricReport,
    pub meta: MetricReport,
}

pub fn run_eval_stage(ws: &Workspace, cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let key = stage_key(cfg.seed, "eval");
    if let Some(entry) = ws.cached(&key) {
        return Ok(StageOutcome { key, cached: true, entry });
    }
    let started = Instant::now();
    let mut inputs = BTreeMap::new();
    let (table, _) = ws.world(cfg.seed, &mut inputs)?;
    let s = cfg.schedule.build()?;
    let meta_key = stage_key(cfg.seed, "meta");
    let (records_text, addr) = ws.input(&meta_key, "records.csv")?;
    inputs.insert(format!("{meta_key}/records.csv"), addr);
    let records: Vec<MetaStepRecord> = read_records_csv(&records_text)?;
    let (n, seed) = (cfg.eval.samples, cfg.eval.seed);
    let summary = EvalSummary {
        pretrained: MetricReport::evaluate(&ws.checkpoint(cfg.seed, "pretrain", &mut inputs)?, &table, &s, n, seed, None)?,
        unlearned: MetricReport::evaluate(&ws.checkpoint(cfg.seed, "unlearn", &mut inputs)?, &table, &s, n, seed, None)?,
        meta: MetricReport::evaluate(&ws.checkpoint(cfg.seed, "meta", &mut inputs)?, &table, &s, n, seed, Some(&records))?,
    };
    let outputs = vec![("metrics.json".to_string(), serde_json::to_string_pretty(&summary).expect("metrics serialize") + "\n")];
    ws.commit(&key, cfg.seed, outputs, inputs, started)
}

/// Elementwise mean of curves recorded on one schedule.
pub fn mean_curve(curves: &[RelearnCurve]) -> Result<RelearnCurve> {
    let first = curves.first().ok_or_else(|| Error::MissingInput("no curves to average".into()))?;
    for c in curves {
        if c.steps() != first.steps() {
            return Err(Error::ScheduleMismatch(format!("{:?} vs {:?}", first.steps(), c.steps())));
        }
    }
    let k = curves.len() as f64;
    let entries = (0..first.entries.len())
        .map(|i| {
            let col = |f: fn(&CurveEntry) -> f64| curves.iter().map(|c| f(&c.entries[i])).sum::<f64>() / k;
            CurveEntry {
                step: first.entries[i].step,
                forget_score: col(|e| e.forget_score),
                l_forget: col(|e| e.l_forget),
                l_retain: col(|e| e.l_retain),
                retain_mmd: col(|e| e.retain_mmd),
            }
        })
        .collect();
    let n_trace = curves.iter().map(|c| c.trace.len()).min().unwrap_or(0);
    let trace = (0..n_trace)
        .map(|i| TracePoint {
            step: first.trace[i].step,
            l_ft: curves.iter().map(|c| c.trace[i].l_ft).sum::<f64>() / k,
            l_retain: curves.iter().map(|c| c.trace[i].l_retain).sum::<f64>() / k,
        })
        .collect();
    let failed_at = curves.iter().filter_map(|c| c.failed_at).min();
    Ok(RelearnCurve { entries, trace, failed_at })
}

/// Retain loss where the finetune loss first falls below the threshold,
/// per run; `None` for runs that never get there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingSummary {
    pub threshold: f64,
    pub unlearn: Vec<Option<f64>>,
    pub meta: Vec<Option<f64>>,
    /// Mean over seeds when every run crossed.
    pub unlearn_mean: Option<f64>,
    pub meta_mean: Option<f64>,
    pub self_destruct: Option<bool>,
}

fn crossing_summary(pairs: &[(RelearnCurve, RelearnCurve)], threshold: f64) -> CrossingSummary {
    let at = |c: &RelearnCurve| c.crossing(threshold).map(|p| p.l_retain);
    let unlearn: Vec<Option<f64>> = pairs.iter().map(|(u, _)| at(u)).collect();
    let meta: Vec<Option<f64>> = pairs.iter().map(|(_, m)| at(m)).collect();
    let mean = |v: &[Option<f64>]| -> Option<f64> {
        let vals: Option<Vec<f64>> = v.iter().copied().collect();
        vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (unlearn_mean, meta_mean) = (mean(&unlearn), mean(&meta));
    let self_destruct = unlearn_mean.zip(meta_mean).map(|(u, m)| m > u);
    CrossingSummary { threshold, unlearn, meta, unlearn_mean, meta_mean, self_destruct }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOutcome {
    pub seeds: Vec<u64>,
    pub dataset: String,
    pub unlearn: Vec<CurveEntry>,
    pub meta: Vec<CurveEntry>,
    pub verdict: VerdictReport,
    pub crossing: CrossingSummary,
    /// Verdicts (i) and (ii) hold.
    pub pass: bool,
}

fn load_curve(ws: &Workspace, seed: u64, dir: &str, which: &str) -> Result<RelearnCurve> {
    let key = stage_key(seed, "attack");
    let (text, _) = ws.input(&key, &format!("{dir}/{which}.csv"))?;
    let mut c = RelearnCurve::parse_csv(&text)?;
    let (trace, _) = ws.input(&key, &format!("{dir}/{which}_trace.csv"))?;
    c.parse_trace(&trace)?;
    Ok(c)
}

fn render_report(r: &ReportOutcome) -> String {
    let mut s = String::new();
    s.push_str("# relearning under finetuning attack\n");
    s.push_str(&format!("dataset: {}\nseeds: {:?}\n\n", r.dataset, r.seeds));
    s.push_str("forget-concept score (%), mean over seeds\n");
    s.push_str(&format!("{:<10}", "step"));
    for e in &r.unlearn {
        s.push_str(&format!("{:>9}", e.step));
    }
    s.push('\n');
    for (label, rows) in [("unlearn", &r.unlearn), ("meta", &r.meta)] {
        s.push_str(&format!("{label:<10}"));
        for e in rows.iter() {
            s.push_str(&format!("{:>9.2}", e.forget_score));
        }
        s.push('\n');
    }
    s.push_str(&format!("{:<10}", "delta"));
    for d in &r.verdict.deltas {
        s.push_str(&format!("{:>9.2}", d.forget_score));
    }
    s.push_str("\n\nretain loss at recorded steps\n");
    for (label, rows) in [("unlearn", &r.unlearn), ("meta", &r.meta)] {
        s.push_str(&format!("{label:<10}"));
        for e in rows.iter() {
            s.push_str(&format!("{:>9.4}", e.l_retain));
        }
        s.push('\n');
    }
    let opt = |v: Option<bool>| v.map_or("n/a".to_string(), |b| b.to_string());
    let num = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    s.push_str("\n[verdicts]\n");
    s.push_str(&format!(
        "slower_relearning = {} ({} of {} steps not worse)\n",
        r.verdict.slower_relearning,
        r.verdict.forget_not_worse_steps,
        r.verdict.deltas.len()
    ));
    s.push_str(&format!("self_destruct = {}\n", opt(r.verdict.self_destruct)));
    s.push_str(&format!("benign_within_band = {} (band {})\n", opt(r.verdict.benign_within_band), r.verdict.benign_band));
    s.push_str(&format!(
        "retain_loss_at_ft_threshold = unlearn {} / meta {} (threshold {})\n",
        num(r.crossing.unlearn_mean),
        num(r.crossing.meta_mean),
        r.crossing.threshold
    ));
    s.push_str(&format!("pass = {}\n", r.pass));
    s
}

/// Aggregates the attack curves of every replica into the comparison
/// grid and verdicts; writes `report/` at the run root.
pub fn run_report(ws: &Workspace, cfg: &ExperimentConfig) -> Result<ReportOutcome> {
    let started = Instant::now();
    let seeds: Vec<u64> = (0..cfg.replicas).map(|i| cfg.replica(i).seed).collect();
    let primary = dataset_name(cfg.attack.dataset);
    let mut pairs = Vec::new();
    let mut benign_pairs = Vec::new();
    let mut inputs = BTreeMap::new();
    for &seed in &seeds {
        let key = stage_key(seed, "attack");
        for which in ["unlearn", "meta"] {
            let (_, addr) = ws.input(&key, &format!("{primary}/{which}.csv"))?;
            inputs.insert(format!("{key}/{primary}/{which}.csv"), addr);
        }
        pairs.push((load_curve(ws, seed, primary, "unlearn")?, load_curve(ws, seed, primary, "meta")?));
        if cfg.attack.dataset != AttackDataset::Benign {
            benign_pairs.push((load_curve(ws, seed, "benign", "unlearn")?, load_curve(ws, seed, "benign", "meta")?));
        }
    }
    let split = |v: &[(RelearnCurve, RelearnCurve)]| -> Result<(RelearnCurve, RelearnCurve)> {
        let us: Vec<RelearnCurve> = v.iter().map(|p| p.0.clone()).collect();
        let ms: Vec<RelearnCurve> = v.iter().map(|p| p.1.clone()).collect();
        Ok((mean_curve(&us)?, mean_curve(&ms)?))
    };
    let (u, m) = split(&pairs)?;
    let benign = if benign_pairs.is_empty() { None } else { Some(split(&benign_pairs)?) };
    let verdict = compare_runs(&u, &m, benign.as_ref().map(|(a, b)| (a, b)), cfg.attack.benign_band)?;
    let crossing = crossing_summary(&pairs, cfg.attack.ft_loss_threshold);
    let pass = verdict.slower_relearning && verdict.self_destruct != Some(false);
    let outcome = ReportOutcome {
        seeds: seeds.clone(),
        dataset: primary.to_string(),
        unlearn: u.entries.clone(),
        meta: m.entries.clone(),
        verdict,
        crossing,
        pass,
    };

    let pts = |c: &RelearnCurve| c.entries.iter().map(|e| (e.step as f64, e.forget_score)).collect::<Vec<_>>();
    let mut series = vec![
        Series { label: format!("unlearn ({primary})"), points: pts(&u), dashed: false },
        Series { label: format!("meta ({primary})"), points: pts(&m), dashed: false },
    ];
    if let Some((bu, bm)) = &benign {
        series.push(Series { label: "unlearn (benign)".into(), points: pts(bu), dashed: true });
        series.push(Series { label: "meta (benign)".into(), points: pts(bm), dashed: true });
    }
    let outputs = vec![
        ("report.txt".to_string(), render_report(&outcome)),
        ("verdicts.json".to_string(), serde_json::to_string_pretty(&outcome).expect("report serializes") + "\n"),
        ("forget_score.svg".to_string(), line_chart_svg("Forget-concept score under attack", "attack step", "forget score (%)", &series)),
    ];
    let seed = cfg.seed;
    ws.commit("report", seed, outputs, inputs, started)?;
    Ok(outcome)
}

/// Runs `f` on every replica configuration, at most `jobs` at a time.
/// Results keep replica order; the first error wins.
pub fn for_each_replica<T: Send>(
    cfg: &ExperimentConfig,
    jobs: usize,
    f: impl Fn(&ExperimentConfig) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let replicas: Vec<ExperimentConfig> = (0..cfg.replicas).map(|i| cfg.replica(i)).collect();
    let jobs = jobs.clamp(1, replicas.len());
    if jobs == 1 {
        return replicas.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = replicas.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= replicas.len() {
                    break;
                }
                let r = f(&replicas[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("slot lock").expect("every replica ran")).collect()
}
