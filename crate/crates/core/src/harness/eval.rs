use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Mode};
use crate::controller::Controller;
use crate::error::Result;
use crate::numerics::{RngStream, Vector};
use crate::ponder::{self, decay, ActionMode, PonderConfig, Rollout, Trajectory};
use crate::reward::{self, FlopsStats, Outcome, RewardBreakdown, RewardWeights};
use crate::steering::SteeringVector;
use crate::tasks::{grade, TaskInstance, LEVELS};

use super::SCHEMA_VERSION;

/// A halting policy to evaluate.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    /// The learned controller, continuing exactly while `p > threshold`.
    Controller(&'a Controller),
    /// Always take exactly `k` steps (capped at the step limit).
    FixedK(usize),
    /// Continue with probability `p` at every step.
    RandomHalt { p: f64, seed: u64 },
    AlwaysHalt,
    NeverHalt,
}

impl Policy<'_> {
    pub fn name(&self) -> String {
        match self {
            Policy::Controller(_) => "controller".into(),
            Policy::FixedK(k) => format!("fixed-k={k}"),
            Policy::RandomHalt { p, .. } => format!("random-halt(p={p})"),
            Policy::AlwaysHalt => "always-halt".into(),
            Policy::NeverHalt => "never-halt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: u8,
    pub count: usize,
    pub accuracy: f64,
    pub avg_steps: f64,
    pub avg_flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub policy: String,
    pub count: usize,
    /// Exact-match accuracy.
    pub accuracy: f64,
    /// Mean number of ponder steps (the toy stand-in for generated tokens).
    pub avg_steps: f64,
    pub avg_flops: f64,
    pub log10_flops: f64,
    /// Mean FLOPs spent on ponder steps and their controller evaluations.
    pub avg_ponder_flops: f64,
    pub per_level: Vec<LevelReport>,
    pub reward_means: RewardBreakdown,
    /// Rank correlation between level and per-level mean steps.
    pub spearman_level_steps: f64,
}

/// Final states and FLOPs of a batch of rollouts.
fn policy_trajectories(
    backbone: &Backbone,
    steering: &SteeringVector,
    config: &PonderConfig,
    suite: &[TaskInstance],
    z0s: Vec<Vector>,
    policy: Policy,
) -> Result<Vec<Trajectory>> {
    if let Policy::Controller(controller) = policy {
        let rollouts = suite
            .iter()
            .zip(z0s)
            .map(|(task, z0)| Rollout {
                z0,
                prompt_len: task.problem.len() + 1,
                rng: RngStream::new(task.id, "eval"),
                teacher: None,
            })
            .collect();
        return ponder::run_batch(
            backbone,
            controller,
            std::slice::from_ref(steering),
            config,
            ActionMode::Threshold,
            rollouts,
        );
    }
    let root = match policy {
        Policy::RandomHalt { seed, .. } => Some(RngStream::new(seed, "eval/random-halt")),
        _ => None,
    };
    suite
        .iter()
        .zip(z0s)
        .enumerate()
        .map(|(i, (task, z0))| {
            let steps = match policy {
                Policy::FixedK(k) => k.min(config.max_steps),
                Policy::AlwaysHalt => 0,
                Policy::NeverHalt => config.max_steps,
                Policy::RandomHalt { p, .. } => {
                    let mut rng = root.as_ref().expect("stream").fork(i as u64);
                    let mut k = 0;
                    while k < config.max_steps && rng.bernoulli(p) {
                        k += 1;
                    }
                    k
                }
                Policy::Controller(_) => unreachable!(),
            };
            let mut z = z0;
            for k in 0..steps {
                z = ponder::step(&z, &steering.direction, decay(k, config.alpha0, config.beta), None)?;
            }
            let prompt_len = task.problem.len() + 1;
            Ok(Trajectory {
                steps: Vec::new(),
                halted_at: steps,
                prompt_len,
                flops: backbone.trajectory_flops(prompt_len, steps),
                output: backbone.decode(&z)?,
                rewards: None,
            })
        })
        .collect()
}

/// Initial states of the suite's direct-mode prompts.
pub fn initial_states(backbone: &Backbone, suite: &[TaskInstance]) -> Result<Vec<Vector>> {
    suite
        .iter()
        .map(|t| Ok(backbone.encode(&t.prompt(Mode::Direct))?.z0().clone()))
        .collect()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; 0 if either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Evaluates a policy on a task suite.
///
/// Reward means use `stats` for the FLOPs component; the report never
/// updates them.
pub fn evaluate(
    backbone: &Backbone,
    steering: &SteeringVector,
    config: &PonderConfig,
    suite: &[TaskInstance],
    policy: Policy,
    weights: &RewardWeights,
    stats: &FlopsStats,
) -> Result<EvalReport> {
    let z0s = initial_states(backbone, suite)?;
    let trajectories = policy_trajectories(backbone, steering, config, suite, z0s, policy)?;
    let per_step = (backbone.flops_of(crate::backbone::FlopEvent::PonderStep)
        + backbone.flops_of(crate::backbone::FlopEvent::ControllerEval)) as f64;

    let n = suite.len().max(1) as f64;
    let mut correct = 0usize;
    let mut steps = 0.0;
    let mut flops = 0.0;
    let mut rewards = Vec::with_capacity(suite.len());
    for (task, t) in suite.iter().zip(&trajectories) {
        correct += grade(t.output.value, task.answer).exact as usize;
        steps += t.halted_at as f64;
        flops += t.flops as f64;
        let outcome = Outcome {
            prediction: t.output.value,
            truth: task.answer,
            tokens: &t.output.tokens,
            perplexity: t.output.perplexity_proxy(),
            flops: t.flops,
        };
        rewards.push(reward::score(&outcome, stats, weights)?);
    }
    let reward_means = mean_breakdown(&rewards);

    let per_level: Vec<LevelReport> = LEVELS
        .filter_map(|level| {
            let members: Vec<usize> = (0..suite.len()).filter(|&i| suite[i].level == level).collect();
            if members.is_empty() {
                return None;
            }
            let m = members.len() as f64;
            Some(LevelReport {
                level,
                count: members.len(),
                accuracy: members
                    .iter()
                    .filter(|&&i| grade(trajectories[i].output.value, suite[i].answer).exact)
                    .count() as f64
                    / m,
                avg_steps: members.iter().map(|&i| trajectories[i].halted_at as f64).sum::<f64>() / m,
                avg_flops: members.iter().map(|&i| trajectories[i].flops as f64).sum::<f64>() / m,
            })
        })
        .collect();
    let levels: Vec<f64> = per_level.iter().map(|l| l.level as f64).collect();
    let level_steps: Vec<f64> = per_level.iter().map(|l| l.avg_steps).collect();

    let avg_flops = flops / n;
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        policy: policy.name(),
        count: suite.len(),
        accuracy: correct as f64 / n,
        avg_steps: steps / n,
        avg_flops,
        log10_flops: avg_flops.log10(),
        avg_ponder_flops: steps / n * per_step,
        per_level,
        reward_means,
        spearman_level_steps: spearman(&levels, &level_steps),
    })
}

pub(crate) fn mean_breakdown(rows: &[RewardBreakdown]) -> RewardBreakdown {
    let n = rows.len().max(1) as f64;
    let mut m = RewardBreakdown::default();
    for r in rows {
        m.acc += r.acc / n;
        m.flops += r.flops / n;
        m.comp += r.comp / n;
        m.qual += r.qual / n;
        m.rep += r.rep / n;
        m.total += r.total / n;
    }
    m
}
