use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metaunlearn::config::ExperimentConfig;
use metaunlearn::pipeline::{
    for_each_replica, run_attack_stage, run_eval_stage, run_meta_stage, run_pretrain, run_report, run_unlearn_stage,
    StageOutcome, Workspace,
};
use metaunlearn::verify::run_checks;
use metaunlearn::{Error, Result};

const VERDICT_FAILURE: u8 = 4;

#[derive(Parser)]
#[command(name = "metaunlearn", version, about = "Unlearning and meta-unlearning experiments on a synthetic concept world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set meta.tau=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Experiment seed (replica i runs at seed + i).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replicas run concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output root; the run directory is `<out>/<config-hash>/`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also run missing upstream stages.
    #[arg(long, global = true)]
    chain: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Command {
    /// Train the denoiser on every concept.
    Pretrain,
    /// Apply the configured unlearning method.
    Unlearn,
    /// Meta-unlearn from the pretrained (or closed-form edited) model.
    Meta,
    /// Finetune both released models and record relearning curves.
    Attack,
    /// Sample-based metrics for the pretrained, unlearned and meta models.
    Eval,
    /// Aggregate attack curves over replicas and judge the verdicts.
    Report,
    /// Run the finite-difference and closed-form oracle checks.
    Verify,
}

type Stage = fn(&Workspace, &ExperimentConfig) -> Result<StageOutcome>;

const STAGES: [(Command, &str, Stage); 5] = [
    (Command::Pretrain, "pretrain", run_pretrain),
    (Command::Unlearn, "unlearn", run_unlearn_stage),
    (Command::Meta, "meta", run_meta_stage),
    (Command::Attack, "attack", run_attack_stage),
    (Command::Eval, "eval", run_eval_stage),
];

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(c.config.as_deref(), &c.set)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_stages(ws: &Workspace, cfg: &ExperimentConfig, upto: Command, chain: bool, jobs: usize) -> Result<()> {
    let stages: Vec<_> = STAGES.iter().filter(|(c, ..)| *c == upto || (chain && *c < upto)).collect();
    for_each_replica(cfg, jobs, |r| {
        for (_, name, stage) in &stages {
            let o = stage(ws, r)?;
            let how = if o.cached { "cached".to_string() } else { format!("{:.1}s", o.entry.wall_ms / 1e3) };
            eprintln!("seed {:>3}  {name:<9} {how}", r.seed);
        }
        Ok(())
    })?;
    Ok(())
}

fn verify(seed: u64) -> Result<bool> {
    let checks = run_checks(seed)?;
    for c in &checks {
        println!("{} {:<50} {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load(&cli.common)?;
    if cli.command == Command::Verify {
        return verify(cfg.seed);
    }
    let ws = Workspace::open(&cfg)?;
    eprintln!("run directory {}", ws.root().display());
    let jobs = cli.common.jobs.max(1);
    if cli.command == Command::Report {
        if cli.common.chain {
            run_stages(&ws, &cfg, Command::Attack, true, jobs)?;
        }
        let outcome = run_report(&ws, &cfg)?;
        let text = std::fs::read_to_string(ws.root().join("report/report.txt"))
            .map_err(|e| Error::Io { path: "report/report.txt".into(), source: e })?;
        print!("{text}");
        return Ok(outcome.pass);
    }
    run_stages(&ws, &cfg, cli.command, cli.common.chain, jobs)?;
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(VERDICT_FAILURE),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
