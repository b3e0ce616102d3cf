//! Training, caching and evaluating the runs of one experiment.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::Value;

use crate::attacks::{
    make_adversary, paad_train, rs_train, AttackBundle, AttackKind, AttackMode, AttackSpec, PaadAdversary,
    RobustCritic,
};
use crate::diffcore::{Checkpoint, CheckpointMeta, Tensor};
use crate::envs::{make_env, Environment};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derive_tagged, seeded, Rng};
use crate::sac::{save_curve, train, ReplayBuffer, SacAgent};
use crate::transforms::{train_denoiser, DenoiserConfig, DenoiserModel, StateTransform, Transform, TransformKind};

use super::config::ExperimentConfig;
use super::report::{column_rank, report_render, Cell, EvalReport, ReportFormat, RunResult};
use super::{evaluate_with, mean_std, EvalOptions};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Bin widths searched for the quantizer ablation.
pub const BW_PRESET: [f64; 4] = [0.05, 0.1, 0.15, 0.2];
/// Codebook sizes searched for the quantizer ablation.
pub const K_PRESET: [usize; 3] = [256, 1024, 4096];

/// Preset sweep values for a parameter, if it has any.
pub fn sweep_preset(param: &str) -> Option<Vec<Value>> {
    match param {
        "transform.bw" => Some(BW_PRESET.iter().map(|&v| Value::Float(v)).collect()),
        "transform.k" => Some(K_PRESET.iter().map(|&v| Value::Integer(v as i64)).collect()),
        _ => None,
    }
}

/// Where an experiment writes: `<root>/<name>/run_<i>/...`, with trained
/// agents and attack artifacts shared across experiments under
/// `<root>/.cache`.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn experiment_dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn run_dir(&self, name: &str, i: usize) -> PathBuf {
        self.experiment_dir(name).join(format!("run_{i}"))
    }

    fn cache(&self, sub: &str) -> PathBuf {
        self.root.join(".cache").join(sub)
    }
}

fn digest(parts: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(parts)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..16]))
}

/// Run `i`'s seed: a pure function of the master seed.
pub fn run_seed(master: u64, i: usize) -> u64 {
    derive_seed(master, i as u64)
}

/// Identifies a training run: denoiser experiments share agents with plain
/// ones because the denoiser is fitted afterwards.
fn train_key(cfg: &ExperimentConfig, seed: u64) -> Result<String> {
    let t = &cfg.transform;
    let transform = match t.kind {
        TransformKind::Identity | TransformKind::Aed | TransformKind::Vaed => "identity".to_string(),
        TransformKind::Bdr => format!("bdr:{}", t.bw),
        TransformKind::Vq => format!("vq:{}:{}:{}", t.k, t.kmeans_pp, t.dead_after),
    };
    digest(&(VERSION, &cfg.env, &cfg.sac, transform, seed))
}

/// Wall-clock seconds spent training run `i`'s agent, as recorded when it
/// was first trained into this workspace.
pub fn training_seconds(cfg: &ExperimentConfig, ws: &Workspace, i: usize) -> Option<f64> {
    let key = train_key(cfg, run_seed(cfg.seed, i)).ok()?;
    fs::read_to_string(ws.cache("agents").join(format!("{key}.seconds")))
        .ok()?
        .trim()
        .parse()
        .ok()
}

/// A trained agent with the artifacts of its training run.
pub struct TrainedRun {
    pub agent: SacAgent,
    pub buffer: ReplayBuffer,
    pub curve_path: PathBuf,
}

fn load_or_train(cfg: &ExperimentConfig, env: &dyn Environment, seed: u64, ws: &Workspace) -> Result<TrainedRun> {
    let key = train_key(cfg, seed)?;
    let dir = ws.cache("agents");
    let (ckpt, curve, buf) = (
        dir.join(format!("{key}.ckpt")),
        dir.join(format!("{key}.curve.csv")),
        dir.join(format!("{key}.buffer")),
    );
    if ckpt.exists() && curve.exists() && buf.exists() {
        log::info!("reusing trained agent {key}");
        return Ok(TrainedRun {
            agent: SacAgent::load(&ckpt)?,
            buffer: ReplayBuffer::load(&buf)?,
            curve_path: curve,
        });
    }
    let mut tcfg = cfg.transform.clone();
    if tcfg.kind.is_denoiser() {
        tcfg.kind = TransformKind::Identity;
    }
    log::info!("training {} agent, seed {seed}", tcfg.label());
    let clock = std::time::Instant::now();
    let out = train(env, &tcfg, &cfg.sac, seed)?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(format!("{key}.seconds")), clock.elapsed().as_secs_f64().to_string())?;
    out.agent.save(&ckpt)?;
    save_curve(&out.curve, &curve)?;
    out.buffer.save(&buf)?;
    Ok(TrainedRun {
        agent: out.agent,
        buffer: out.buffer,
        curve_path: curve,
    })
}

/// Fits a denoiser on replay states perturbed by a gray-box attack on the
/// agent (regenerated every epoch). `eps <= 0` leaves states clean, which
/// trains towards the identity map.
pub fn denoiser_train(
    agent: &SacAgent,
    states: &Tensor,
    attack: AttackKind,
    eps: f64,
    cfg: &DenoiserConfig,
    seed: u64,
) -> Result<DenoiserModel> {
    if !matches!(attack, AttackKind::ActionDiff | AttackKind::MinQ) {
        return Err(Error::Config(format!("denoisers train against ActionDiff or MinQ, not {attack}")));
    }
    let plain = agent.with_transform(Transform::Identity);
    let adversary = if eps > 0.0 {
        Some(make_adversary(
            &AttackSpec::new(attack, eps, AttackMode::GrayBox),
            &AttackBundle::from_agent(&plain),
        )?)
    } else {
        None
    };
    train_denoiser(
        states,
        |s: &Tensor, rng: &mut Rng| match &adversary {
            None => Ok(s.clone()),
            Some(adv) => {
                let base = rand::Rng::gen::<u64>(rng);
                let mut rngs: Vec<Rng> = (0..s.rows()).map(|i| seeded(derive_seed(base, i as u64))).collect();
                adv.perturb_batch(s, &mut rngs)
            }
        },
        cfg,
        seed,
    )
}

fn load_or_train_denoiser(
    cfg: &ExperimentConfig,
    run: &TrainedRun,
    seed: u64,
    ws: &Workspace,
) -> Result<DenoiserModel> {
    let t = &cfg.transform;
    let dcfg = t.denoiser_config();
    let key = digest(&(train_key(cfg, seed)?, &dcfg, t.eps, t.denoiser_attack))?;
    let path = ws.cache("denoisers").join(format!("{key}.ckpt"));
    if path.exists() {
        return DenoiserModel::from_checkpoint(&Checkpoint::load(&path)?);
    }
    let model = denoiser_train(
        &run.agent,
        &run.buffer.states(),
        t.denoiser_attack,
        t.eps,
        &dcfg,
        derive_tagged(seed, "denoiser"),
    )?;
    model.to_checkpoint().save(&path, &run.agent.meta())?;
    Ok(model)
}

fn rs_to_checkpoint(rc: &RobustCritic) -> Checkpoint {
    Checkpoint::new()
        .with_network("q", &rc.net)
        .with_scalar("delta", rc.delta)
        .with_scalar("lambda", rc.lambda)
}

fn rs_from_checkpoint(ck: &Checkpoint) -> Result<RobustCritic> {
    Ok(RobustCritic {
        net: ck.network("q")?.clone(),
        delta: ck.scalar("delta")?,
        lambda: ck.scalar("lambda")?,
    })
}

/// Builds the adversary for `spec`, training (or loading from the cache)
/// whatever artifact it needs. Artifacts are keyed by the content hash of
/// the victim checkpoint.
pub fn prepare_adversary(
    spec: &AttackSpec,
    agent: &SacAgent,
    env: &dyn Environment,
    cfg: &ExperimentConfig,
    ws: Option<&Workspace>,
) -> Result<Box<dyn crate::attacks::Adversary>> {
    let mut bundle = AttackBundle::from_agent(agent);
    let victim = agent.to_checkpoint().content_hash();
    let meta = CheckpointMeta {
        env: agent.env.clone(),
        seed: agent.seed,
        transform: agent.transform.label(),
        ..Default::default()
    };
    let seed = derive_tagged(agent.seed, "attack-artifact");
    let cached = |tag: &str, key: String| ws.map(|w| w.cache("attacks").join(format!("{victim}-{tag}-{key}.ckpt")));
    match spec.kind {
        AttackKind::Rs => {
            let path = cached("rs", digest(&(&cfg.rs, spec.eps))?);
            bundle.rs_critic = Some(match &path {
                Some(p) if p.exists() => rs_from_checkpoint(&Checkpoint::load(p)?)?,
                _ => {
                    let rc = rs_train(agent, env, &cfg.rs, spec.eps, seed)?;
                    if let Some(p) = &path {
                        rs_to_checkpoint(&rc).save(p, &meta)?;
                    }
                    rc
                }
            });
        }
        AttackKind::Paad => {
            let white = spec.mode == AttackMode::WhiteBox;
            let path = cached("paad", digest(&(&cfg.ppo, spec.eps, white))?);
            bundle.paad = Some(match &path {
                Some(p) if p.exists() => PaadAdversary::from_checkpoint(&Checkpoint::load(p)?)?,
                _ => {
                    let adv = paad_train(agent, env, spec.eps, white, &cfg.ppo, seed)?;
                    if let Some(p) = &path {
                        adv.to_checkpoint().save(p, &meta)?;
                    }
                    adv
                }
            });
        }
        _ => {}
    }
    make_adversary(spec, &bundle)
}

/// Episode returns of one agent under every configured attack, in report
/// column order.
pub fn evaluate_agent(
    agent: &SacAgent,
    env: &dyn Environment,
    cfg: &ExperimentConfig,
    seed: u64,
    ws: Option<&Workspace>,
) -> Result<Vec<(AttackSpec, Vec<f64>)>> {
    let opts = EvalOptions {
        deterministic: cfg.deterministic,
        ..Default::default()
    };
    let eval_seed = derive_tagged(seed, "eval");
    sorted_attacks(cfg)
        .into_iter()
        .map(|spec| {
            let adv = prepare_adversary(&spec, agent, env, cfg, ws)?;
            Ok((spec, evaluate_with(agent, adv.as_ref(), env, cfg.episodes, eval_seed, opts)?))
        })
        .collect()
}

fn sorted_attacks(cfg: &ExperimentConfig) -> Vec<AttackSpec> {
    let mut specs = cfg.attacks.clone();
    specs.sort_by_key(|s| column_rank(s.kind.column()));
    specs.dedup_by_key(|s| s.kind);
    specs
}

pub fn write_eval_csv(rows: &[(AttackSpec, Vec<f64>)], path: &Path) -> Result<()> {
    let mut out = String::from("attack,mode,eps,episode,return\n");
    for (spec, returns) in rows {
        for (e, r) in returns.iter().enumerate() {
            out.push_str(&format!("{},{},{},{e},{r}\n", spec.kind.column(), spec.mode, spec.eps));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn cells(rows: &[(AttackSpec, Vec<f64>)]) -> Vec<Cell> {
    rows.iter()
        .map(|(_, r)| {
            let (mean, std) = mean_std(r);
            Cell { mean, std }
        })
        .collect()
}

/// An empty report carrying the experiment's metadata.
pub fn blank_report(cfg: &ExperimentConfig) -> EvalReport {
    let specs = sorted_attacks(cfg);
    let attacked = specs.iter().find(|s| s.kind != AttackKind::None);
    EvalReport {
        name: cfg.name.clone(),
        env: cfg.env.clone(),
        transform: cfg.transform.label(),
        mode: attacked.map(|s| s.mode).unwrap_or_default().to_string(),
        eps: attacked.map(|s| s.eps).unwrap_or(0.0),
        columns: specs.iter().map(|s| s.kind.column().to_string()).collect(),
        runs: Vec::new(),
        master_seed: cfg.seed,
        version: VERSION.to_string(),
        simplified: specs
            .iter()
            .filter(|s| s.kind.simplified())
            .map(|s| s.kind.column().to_string())
            .collect(),
    }
}

/// Trains (or loads) run `i`'s agent, fits its denoiser when configured and
/// writes the checkpoint, curve and replay buffer into the run directory.
fn prepare_run(cfg: &ExperimentConfig, i: usize, ws: &Workspace) -> Result<SacAgent> {
    let env = make_env(&cfg.env)?;
    let seed = run_seed(cfg.seed, i);
    let dir = ws.run_dir(&cfg.name, i);
    fs::create_dir_all(&dir)?;
    let run = load_or_train(cfg, env.as_ref(), seed, ws)?;
    let mut agent = run.agent.clone();
    if cfg.transform.kind.is_denoiser() {
        agent.transform = Transform::Denoiser(load_or_train_denoiser(cfg, &run, seed, ws)?);
    }
    agent.save(&dir.join("checkpoint"))?;
    fs::copy(&run.curve_path, dir.join("curve.csv"))?;
    run.buffer.save(&dir.join("buffer.bin"))?;
    Ok(agent)
}

fn one_run(cfg: &ExperimentConfig, i: usize, ws: &Workspace) -> Result<Vec<Cell>> {
    let agent = prepare_run(cfg, i, ws)?;
    let env = make_env(&cfg.env)?;
    let rows = evaluate_agent(&agent, env.as_ref(), cfg, run_seed(cfg.seed, i), Some(ws))?;
    write_eval_csv(&rows, &ws.run_dir(&cfg.name, i).join("eval.csv"))?;
    Ok(cells(&rows))
}

/// Trains every run without evaluating; returns the checkpoint paths.
pub fn train_experiment(cfg: &ExperimentConfig, ws: &Workspace, serial: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let run = |i: usize| prepare_run(cfg, i, ws).map(|_| ws.run_dir(&cfg.name, i).join("checkpoint"));
    if serial {
        (0..cfg.n_runs).map(run).collect()
    } else {
        (0..cfg.n_runs).into_par_iter().map(run).collect()
    }
}

/// Evaluates one stored agent as a single-run report.
pub fn evaluate_checkpoint(agent: &SacAgent, cfg: &ExperimentConfig, ws: &Workspace) -> Result<EvalReport> {
    cfg.validate()?;
    let env = make_env(&cfg.env)?;
    let rows = evaluate_agent(agent, env.as_ref(), cfg, agent.seed, Some(ws))?;
    fs::create_dir_all(&ws.root)?;
    write_eval_csv(&rows, &ws.root.join("eval.csv"))?;
    let report = EvalReport {
        transform: agent.transform.label(),
        runs: vec![RunResult {
            index: 0,
            seed: agent.seed,
            cells: cells(&rows),
            failed: None,
        }],
        ..blank_report(cfg)
    };
    write_report(&report, &ws.root)?;
    Ok(report)
}

/// Trains (or loads) `n_runs` agents, evaluates each under every attack and
/// writes `report.{csv,json}` next to the run directories. A run that fails
/// is recorded as failed rather than dropped. `serial` runs one at a time;
/// results do not depend on it.
pub fn run_experiment(cfg: &ExperimentConfig, ws: &Workspace, serial: bool) -> Result<EvalReport> {
    cfg.validate()?;
    let run = |i: usize| {
        let seed = run_seed(cfg.seed, i);
        match one_run(cfg, i, ws) {
            Ok(cells) => RunResult {
                index: i,
                seed,
                cells,
                failed: None,
            },
            Err(e) => {
                log::error!("run {i} of {} failed: {e}", cfg.name);
                RunResult {
                    index: i,
                    seed,
                    cells: Vec::new(),
                    failed: Some(e.to_string()),
                }
            }
        }
    };
    let runs: Vec<RunResult> = if serial {
        (0..cfg.n_runs).map(run).collect()
    } else {
        (0..cfg.n_runs).into_par_iter().map(run).collect()
    };
    let report = EvalReport {
        runs,
        ..blank_report(cfg)
    };
    write_report(&report, &ws.experiment_dir(&cfg.name))?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let one = std::slice::from_ref(report);
    fs::write(dir.join("report.csv"), report_render(one, ReportFormat::Csv)?)?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    Ok(())
}

/// Name of the experiment that holds one sweep point.
pub fn sweep_name(base: &str, param: &str, value: &Value) -> String {
    let v = match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let clean: String = format!("{base}__{param}={v}")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._=-".contains(c) { c } else { '_' })
        .collect();
    clean
}

/// One experiment per value of `param`. Agents are reused through the cache
/// whenever the parameter only matters at test time.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: &str,
    values: &[Value],
    ws: &Workspace,
    serial: bool,
) -> Result<Vec<(Value, EvalReport)>> {
    // Validate every point before training anything.
    let configs: Vec<(Value, ExperimentConfig)> = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.set(param, v)?;
            c.name = sweep_name(&cfg.name, param, v);
            c.validate()?;
            Ok((v.clone(), c))
        })
        .collect::<Result<_>>()?;
    if ExperimentConfig::is_test_time_key(param) {
        log::info!("`{param}` is test-time only; trained agents are shared across the sweep");
    }
    configs
        .into_iter()
        .map(|(v, c)| Ok((v, run_experiment(&c, ws, serial)?)))
        .collect()
}
