//! Flat dotted-key experiment configuration (`sac.gamma = 0.99`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::attacks::{AttackKind, AttackMode, AttackSpec, PpoConfig, RsConfig};
use crate::envs::make_env;
use crate::error::{Error, Result};
use crate::sac::SacConfig;
use crate::transforms::TransformConfig;

/// Environment variable that overrides `experiment.seed`.
pub const SEED_ENV: &str = "WORKBENCH_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: String,
    pub sac: SacConfig,
    pub transform: TransformConfig,
    /// Evaluated in order; `None` produces the natural column.
    pub attacks: Vec<AttackSpec>,
    pub n_runs: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Evaluate with `tanh(mu)` instead of sampled actions.
    pub deterministic: bool,
    pub rs: RsConfig,
    pub ppo: PpoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let spec = |kind| AttackSpec::new(kind, 0.1, AttackMode::GrayBox);
        Self {
            name: "experiment".into(),
            env: "pendulum-balance".into(),
            sac: SacConfig::default(),
            transform: TransformConfig::default(),
            attacks: [AttackKind::None, AttackKind::Random, AttackKind::ActionDiff, AttackKind::MinQ]
                .into_iter()
                .map(spec)
                .collect(),
            n_runs: 5,
            episodes: 50,
            seed: 0,
            deterministic: true,
            rs: RsConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("`{key}` expects a number, got {v}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::Config(format!("`{key}` expects a non-negative integer, got {v}"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    as_usize(key, v).map(|n| n as u64)
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("`{key}` expects true or false, got {v}")))
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("`{key}` expects a string, got {v}")))
}

/// Parses a command-line value the way the config file would, falling back
/// to a bare string (`vq` as well as `"vq"`).
pub fn parse_value(text: &str) -> Value {
    let text = text.trim();
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.into())),
        Err(_) => Value::String(text.into()),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        let mut cfg = Self::default();
        // Attack fields apply to every listed kind, so the list goes first.
        if let Some(v) = flat.remove("attack.kind") {
            cfg.set("attack.kind", &v)?;
        }
        for (k, v) in &flat {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the `WORKBENCH_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
        }
        Ok(())
    }

    /// Sets one dotted key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let (s, t, rs, ppo) = (&mut self.sac, &mut self.transform, &mut self.rs, &mut self.ppo);
        match key {
            "name" | "experiment.name" => self.name = as_str(key, v)?.to_string(),
            "env" | "env.name" => self.env = as_str(key, v)?.to_string(),
            "experiment.n_runs" => self.n_runs = as_usize(key, v)?,
            "experiment.episodes" => self.episodes = as_usize(key, v)?,
            "experiment.seed" => self.seed = as_u64(key, v)?,
            "experiment.deterministic" => self.deterministic = as_bool(key, v)?,

            "sac.gamma" => s.gamma = as_f64(key, v)?,
            "sac.tau" => s.tau = as_f64(key, v)?,
            "sac.lr" => s.lr = as_f64(key, v)?,
            "sac.batch_size" => s.batch_size = as_usize(key, v)?,
            "sac.buffer_capacity" => s.buffer_capacity = as_usize(key, v)?,
            "sac.target_entropy" => s.target_entropy = Some(as_f64(key, v)?),
            "sac.warmup_steps" => s.warmup_steps = as_usize(key, v)?,
            "sac.total_steps" => s.total_steps = as_usize(key, v)?,
            "sac.hidden" => s.hidden = as_usize(key, v)?,
            "sac.init_alpha" => s.init_alpha = as_f64(key, v)?,

            "transform.kind" => t.kind = as_str(key, v)?.parse()?,
            "transform.bw" => t.bw = as_f64(key, v)?,
            "transform.k" => t.k = as_usize(key, v)?,
            "transform.eps" => t.eps = as_f64(key, v)?,
            "transform.beta" => t.beta = as_f64(key, v)?,
            "transform.kmeans_pp" => t.kmeans_pp = as_bool(key, v)?,
            "transform.dead_after" => t.dead_after = as_u64(key, v)?,
            "transform.denoiser_epochs" => t.denoiser_epochs = as_usize(key, v)?,
            "transform.denoiser_attack" => t.denoiser_attack = as_str(key, v)?.parse()?,

            "attack.kind" => {
                let kinds: Vec<AttackKind> = match v {
                    Value::Array(items) => items
                        .iter()
                        .map(|i| as_str(key, i)?.parse())
                        .collect::<Result<_>>()?,
                    other => vec![as_str(key, other)?.parse()?],
                };
                let template = self.attacks.first().copied().unwrap_or_default();
                self.attacks = kinds.into_iter().map(|kind| AttackSpec { kind, ..template }).collect();
            }
            "attack.eps" => {
                let eps = as_f64(key, v)?;
                self.attacks.iter_mut().for_each(|a| a.eps = eps);
            }
            "attack.eta" => {
                let eta = as_f64(key, v)?;
                self.attacks.iter_mut().for_each(|a| a.eta = eta);
            }
            "attack.steps" => {
                let n = as_usize(key, v)?;
                self.attacks.iter_mut().for_each(|a| a.steps = n);
            }
            "attack.mode" => {
                let mode: AttackMode = as_str(key, v)?.parse()?;
                self.attacks.iter_mut().for_each(|a| a.mode = mode);
            }

            "rs.collect_steps" => rs.collect_steps = as_usize(key, v)?,
            "rs.train_steps" => rs.train_steps = as_usize(key, v)?,
            "rs.lambda" => rs.lambda = as_f64(key, v)?,
            "rs.delta" => rs.delta = Some(as_f64(key, v)?),
            "rs.inner_steps" => rs.inner_steps = as_usize(key, v)?,
            "rs.gamma" => rs.gamma = as_f64(key, v)?,
            "rs.lr" => rs.lr = as_f64(key, v)?,
            "rs.batch_size" => rs.batch_size = as_usize(key, v)?,
            "rs.hidden" => rs.hidden = as_usize(key, v)?,
            "rs.tau" => rs.tau = as_f64(key, v)?,

            "ppo.total_steps" => ppo.total_steps = as_usize(key, v)?,
            "ppo.rollout" => ppo.rollout = as_usize(key, v)?,
            "ppo.epochs" => ppo.epochs = as_usize(key, v)?,
            "ppo.minibatch" => ppo.minibatch = as_usize(key, v)?,
            "ppo.clip" => ppo.clip = as_f64(key, v)?,
            "ppo.gae_lambda" => ppo.gae_lambda = as_f64(key, v)?,
            "ppo.gamma" => ppo.gamma = as_f64(key, v)?,
            "ppo.lr" => ppo.lr = as_f64(key, v)?,
            "ppo.hidden" => ppo.hidden = as_usize(key, v)?,
            "ppo.init_log_std" => ppo.init_log_std = as_f64(key, v)?,

            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every check that can fail before any training starts.
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("experiment.n_runs must be >= 1".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("experiment.episodes must be >= 1".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("experiment name `{}` is not a plain directory name", self.name)));
        }
        make_env(&self.env)?;
        self.sac.validate()?;
        self.transform.validate()?;
        if self.transform.kind.is_denoiser()
            && !matches!(self.transform.denoiser_attack, AttackKind::ActionDiff | AttackKind::MinQ)
        {
            return Err(Error::Config("transform.denoiser_attack must be actiondiff or minq".into()));
        }
        if self.attacks.is_empty() {
            return Err(Error::Config("attack.kind lists no attacks".into()));
        }
        for a in &self.attacks {
            a.validate()?;
        }
        if self.rs.train_steps > 0 && self.rs.collect_steps == 0 {
            return Err(Error::Config("rs.collect_steps must be positive".into()));
        }
        if self.ppo.rollout == 0 || self.ppo.minibatch == 0 {
            return Err(Error::Config("ppo.rollout and ppo.minibatch must be positive".into()));
        }
        Ok(())
    }

    /// True when changing `key` leaves trained agents reusable.
    pub fn is_test_time_key(key: &str) -> bool {
        key.starts_with("attack.")
            || key.starts_with("rs.")
            || key.starts_with("ppo.")
            || matches!(key, "experiment.episodes" | "experiment.deterministic")
    }
}
