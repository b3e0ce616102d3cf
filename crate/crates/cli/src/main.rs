use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use workbench::attacks::{AttackKind, AttackMode, AttackSpec};
use workbench::envs::make_env;
use workbench::harness::{
    denoiser_train, evaluate_checkpoint, parse_value, prepare_adversary, report_render, run_experiment, sweep,
    sweep_preset, train_experiment, EvalReport, ExperimentConfig, ReportFormat, Workspace,
};
use workbench::sac::{ReplayBuffer, SacAgent};
use workbench::theory::{empirical_gap_bound, GapOptions};
use workbench::transforms::{DenoiserConfig, DenoiserVariant, Transform};

#[derive(Parser)]
#[command(name = "workbench", version, about = "Train, attack and defend soft actor-critic agents")]
struct Cli {
    /// Run experiments one at a time (bitwise reproducible).
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every run of an experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a stored agent under the configured attacks.
    AttackEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a denoiser for a stored agent from its replay buffer.
    DenoiserTrain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        buffer: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        variant: DenoiserVariant,
        /// Attack generating the training perturbations.
        #[arg(long, default_value = "minq")]
        attack: AttackKind,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        /// Where to write the agent with its denoiser (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one experiment per value of a parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values, or `preset` for the built-in grid.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Render every report found under a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
    /// Measure both sides of the value-gap bound for a stored agent.
    VerifyBound {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Also write `bound.txt` and `bound.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a full experiment, writing its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn load_agent(path: &Path) -> Result<SacAgent> {
    SacAgent::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if p.file_name().map(|n| n != ".cache").unwrap_or(true) {
                find_reports(&p, out)?;
            }
        } else if p.file_name().map(|n| n == "report.json").unwrap_or(false) {
            out.push(p);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            for p in train_experiment(&cfg, &Workspace::new(out), cli.serial)? {
                println!("{}", p.display());
            }
        }
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let report = run_experiment(&cfg, &Workspace::new(out), cli.serial)?;
            print!("{}", report_render(&[report], ReportFormat::Table)?);
        }
        Command::AttackEval { checkpoint, config, out } => {
            let cfg = load_config(&config)?;
            let agent = load_agent(&checkpoint)?;
            let report = evaluate_checkpoint(&agent, &cfg, &Workspace::new(out))?;
            print!("{}", report_render(&[report], ReportFormat::Table)?);
        }
        Command::DenoiserTrain {
            checkpoint,
            buffer,
            eps,
            variant,
            attack,
            epochs,
            out,
            seed,
        } => {
            let agent = load_agent(&checkpoint)?;
            let buffer = ReplayBuffer::load(&buffer).with_context(|| format!("reading buffer {}", buffer.display()))?;
            if buffer.len() == 0 {
                bail!("the replay buffer is empty");
            }
            let cfg = DenoiserConfig {
                variant,
                epochs,
                ..DenoiserConfig::default()
            };
            let model = denoiser_train(&agent, &buffer.states(), attack, eps, &cfg, seed)?;
            let tag = match variant {
                DenoiserVariant::Aed => "aed",
                DenoiserVariant::Vaed => "vaed",
            };
            let out = out.unwrap_or_else(|| {
                let mut os = checkpoint.as_os_str().to_owned();
                os.push(format!(".{tag}"));
                PathBuf::from(os)
            });
            agent.with_transform(Transform::Denoiser(model)).save(&out)?;
            println!("{}", out.display());
        }
        Command::Sweep { config, param, values, out } => {
            let cfg = load_config(&config)?;
            let values = if values.trim() == "preset" {
                sweep_preset(&param).with_context(|| format!("no preset grid for `{param}`"))?
            } else {
                values.split(',').map(parse_value).collect()
            };
            let reports: Vec<EvalReport> = sweep(&cfg, &param, &values, &Workspace::new(out), cli.serial)?
                .into_iter()
                .map(|(_, r)| r)
                .collect();
            print!("{}", report_render(&reports, ReportFormat::Table)?);
        }
        Command::Report { input, format } => {
            let mut paths = Vec::new();
            if input.is_file() {
                paths.push(input);
            } else {
                find_reports(&input, &mut paths)?;
            }
            let reports = paths
                .iter()
                .map(|p| EvalReport::load(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            print!("{}", report_render(&reports, format)?);
        }
        Command::VerifyBound { checkpoint, config, out } => {
            let cfg = load_config(&config)?;
            let agent = load_agent(&checkpoint)?;
            let env = make_env(&cfg.env)?;
            let template = cfg
                .attacks
                .iter()
                .find(|a| a.kind != AttackKind::None)
                .copied()
                .unwrap_or_else(|| AttackSpec::new(AttackKind::MinQ, 0.1, AttackMode::GrayBox));
            // Strongest available stand-in for the optimal adversary.
            let kind = if cfg.attacks.iter().any(|a| a.kind == AttackKind::Paad) {
                AttackKind::Paad
            } else {
                AttackKind::MinQ
            };
            let spec = AttackSpec { kind, ..template };
            let adversary = prepare_adversary(&spec, &agent, env.as_ref(), &cfg, None)?;
            let opts = GapOptions {
                episodes: cfg.episodes,
                seed: cfg.seed,
                eps: spec.eps,
                ..GapOptions::default()
            };
            let proxy = format!("{} ({}, eps={})", kind.column(), spec.mode, spec.eps);
            let report = empirical_gap_bound(&agent, adversary.as_ref(), &proxy, env.as_ref(), &opts)?;
            print!("{}", report.to_kv());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("bound.txt"), report.to_kv())?;
                std::fs::write(
                    dir.join("bound.csv"),
                    format!("{}\n{}\n", report.csv_header(), report.csv_row()),
                )?;
            }
        }
    }
    Ok(())
}
