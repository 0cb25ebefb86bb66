use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ponderlab::grpo::{self, Baseline, IidRewards, TinyMdp};
use ponderlab::harness::config::SEED_ENV;
use ponderlab::harness::log::{read_log, tidy, write_tidy};
use ponderlab::harness::sweep::{lambda_sweep, tau_sweep, write_frontier};
use ponderlab::harness::{evaluate, resume, train, Checkpoint, Policy, Setup, TrainConfig, SCHEMA_VERSION};
use ponderlab::numerics::RngStream;
use ponderlab::steering::{self, ContrastiveSet};
use ponderlab::tasks;

#[derive(Parser)]
#[command(name = "ponderlab", version, about = "Adaptive latent pondering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML or JSON experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set reward.lambda_flops=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(path) => TrainConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => TrainConfig::default(),
        };
        let env_seed = std::env::var(SEED_ENV).ok();
        Ok(base.with_overrides(self.sets.iter().map(String::as_str), env_seed.as_deref())?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the backbone and extract the steering vector.
    Extract {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/extract")]
        out: PathBuf,
    },
    /// Train a halting controller.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a baseline policy on a task suite.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `controller`, `fixed-k=K`, `random-halt=P`, `always-halt` or `never-halt`.
        #[arg(long, default_value = "controller")]
        policy: String,
        /// Task suite as JSON lines; defaults to the pinned suite.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Accuracy versus compute frontier.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated knob values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Controller for threshold sweeps.
        #[arg(long, required_if_eq("axis", "tau"))]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "frontier.csv")]
        out: PathBuf,
    },
    /// Convert a training log into long format for plotting.
    PlotData {
        #[arg(long)]
        log: PathBuf,
        /// Trailing moving-average window in steps.
        #[arg(long, default_value_t = 1)]
        window: usize,
        #[arg(long, default_value = "plot.csv")]
        out: PathBuf,
    },
    /// Run estimator diagnostics.
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "all")]
        kind: ProbeKind,
        #[arg(long, default_value = "probe.json")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepAxis {
    Tau,
    Lambda,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ProbeKind {
    Grpo,
    Steering,
    All,
}

fn parse_policy<'a>(name: &str, controller: &'a ponderlab::controller::Controller, seed: u64) -> Result<Policy<'a>> {
    Ok(match name.split_once('=') {
        None if name == "controller" => Policy::Controller(controller),
        None if name == "always-halt" => Policy::AlwaysHalt,
        None if name == "never-halt" => Policy::NeverHalt,
        Some(("fixed-k", k)) => Policy::FixedK(k.parse().context("fixed-k expects an integer")?),
        Some(("random-halt", p)) => {
            let p: f64 = p.parse().context("random-halt expects a probability")?;
            if !(0.0..=1.0).contains(&p) {
                bail!("random-halt probability must lie in [0, 1]");
            }
            Policy::RandomHalt { p, seed }
        }
        _ => bail!("unknown policy `{name}`"),
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Extract { config, out } => {
            let config = config.load()?;
            let setup = Setup::build(&config)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("backbone.json"), setup.backbone.save_json()?)?;
            std::fs::write(out.join("steering.json"), setup.steering.save_json(&setup.backbone)?)?;
            tasks::write_jsonl(&setup.suite, create(&out.join("suite.jsonl"))?)?;
            eprintln!(
                "layer {} from {} pairs, raw norm {:.3}; wrote {}",
                setup.steering.layer,
                setup.steering.n,
                setup.steering.raw_norm,
                out.display()
            );
        }
        Command::Train { config, out, resume: from } => {
            let outcome = match from {
                Some(path) => resume(Checkpoint::load(&path)?, Some(&out))?,
                None => train(&config.load()?, Some(&out))?,
            };
            let r = &outcome.report;
            eprintln!(
                "accuracy {:.3}, avg steps {:.2}, log10 FLOPs {:.3}, level/steps rank correlation {:.3}",
                r.accuracy, r.avg_steps, r.log10_flops, r.spearman_level_steps
            );
        }
        Command::Eval {
            checkpoint,
            policy,
            suite,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let config = ckpt.config.clone();
            let mut setup = Setup::build(&config)?;
            if let Some(path) = suite {
                setup.suite = tasks::read_jsonl(BufReader::new(File::open(&path)?))?;
            }
            let state = ckpt.into_state(&setup)?;
            let policy = parse_policy(&policy, &state.controller, config.seed)?;
            let report = evaluate(
                &setup.backbone,
                &setup.steering,
                &config.ponder,
                &setup.suite,
                policy,
                &state.weights,
                &state.flops_stats,
            )?;
            write_json(&out, &serde_json::to_value(&report)?)?;
        }
        Command::Sweep {
            config,
            axis,
            grid,
            checkpoint,
            out,
        } => {
            let rows = match axis {
                SweepAxis::Tau => {
                    let ckpt = Checkpoint::load(checkpoint.as_deref().context("--checkpoint is required")?)?;
                    let config = ckpt.config.clone();
                    let setup = Setup::build(&config)?;
                    let state = ckpt.into_state(&setup)?;
                    tau_sweep(&config, &setup, &state.controller, &grid)?
                }
                SweepAxis::Lambda => lambda_sweep(&config.load()?, &grid)?,
            };
            write_frontier(&rows, create(&out)?)?;
        }
        Command::PlotData { log, window, out } => {
            let rows = read_log(File::open(&log).with_context(|| format!("opening {}", log.display()))?)?;
            write_tidy(&tidy(&rows, window)?, create(&out)?)?;
        }
        Command::Probe { config, kind, out } => {
            let config = config.load()?;
            let mut report = serde_json::Map::new();
            report.insert("schema_version".into(), json!(SCHEMA_VERSION));
            if kind != ProbeKind::Steering {
                let mut rng = RngStream::new(config.seed, "probe/grpo");
                let mdp = TinyMdp {
                    theta: [0.3, -0.2],
                    rewards: [0.0, 1.0, 0.5],
                };
                let unbiased = grpo::unbiasedness_probe(&mdp, config.grpo.group_size, Baseline::GroupMean, 100_000, &mut rng)?;
                let variance = grpo::variance_probe(
                    &[2, 4, 8],
                    10_000,
                    IidRewards { mean: 1.0, std: 1.0 },
                    0.0,
                    &mut rng,
                )?;
                report.insert("unbiasedness".into(), serde_json::to_value(unbiased)?);
                report.insert("variance".into(), serde_json::to_value(variance)?);
            }
            if kind != ProbeKind::Grpo {
                let backbone = ponderlab::backbone::Backbone::build(config.backbone.clone())?;
                let layer = config.tasks.steering_layer.unwrap_or_else(|| steering::default_layer(&backbone));
                let pool = ContrastiveSet::sample(config.seed, 4 * config.tasks.extraction_size)?;
                let mut rng = RngStream::new(config.seed, "probe/steering");
                let points = steering::convergence_probe(&backbone, &pool, layer, &[16, 64, 256], 10, &mut rng)?;
                let h = steering::extract(&backbone, &ContrastiveSet::sample(config.seed, config.tasks.extraction_size)?, layer)?;
                let cosine = h.direction.cosine(&backbone.planted_direction())?;
                report.insert("steering_cosine".into(), json!(cosine));
                report.insert("convergence".into(), serde_json::to_value(points)?);
            }
            write_json(&out, &serde_json::to_value(&report)?)?;
        }
    }
    Ok(())
}
