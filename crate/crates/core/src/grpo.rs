//! Group-relative policy optimization for the halting controller.
//!
//! A batch of rollouts is split into random groups; each rollout's advantage
//! is its reward minus a baseline computed from its own group. The policy
//! gradient weights every recorded step's log-probability gradient by the
//! rollout's advantage, plus an entropy bonus at every step.
//!
//! Also here: two Monte-Carlo diagnostics with closed-form or enumerated
//! answers, used to check that the estimator is unbiased and that grouping
//! reduces variance.

use serde::{Deserialize, Serialize};

use crate::controller::{
    bernoulli_entropy, bernoulli_logprob, entropy_logit_grad, logprob_logit_grad, Controller, Weights,
};
use crate::error::{Error, Result};
use crate::numerics::{mean_var, sigmoid, RngStream};
use crate::ponder::{Source, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    GroupMean,
    LeaveOneOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    /// Weight of the entropy bonus; positive values encourage exploration.
    pub entropy_coef: f64,
    pub baseline: Baseline,
    /// Whether teacher-driven steps contribute to the gradient.
    pub include_teacher: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            learning_rate: 5e-4,
            entropy_coef: 0.01,
            baseline: Baseline::GroupMean,
            include_teacher: true,
            clip_norm: Some(10.0),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(Error::Config("entropy_coef must be non-negative".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Shuffles `0..batch` and cuts it into groups of `group_size`.
pub fn partition(batch: usize, group_size: usize, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    if group_size < 2 {
        return Err(Error::invalid("group size must be at least 2"));
    }
    if batch == 0 || batch % group_size != 0 {
        return Err(Error::invalid(format!(
            "batch of {batch} is not a positive multiple of group size {group_size}"
        )));
    }
    let perm = rng.permutation(batch);
    Ok(perm.chunks(group_size).map(|c| c.to_vec()).collect())
}

/// Group-relative advantages, indexed like `rewards`.
pub fn advantages(rewards: &[f64], groups: &[Vec<usize>], baseline: Baseline) -> Result<Vec<f64>> {
    let mut out = vec![f64::NAN; rewards.len()];
    for group in groups {
        let g = group.len();
        if g < 2 {
            return Err(Error::invalid("groups need at least two members"));
        }
        let mut sum = 0.0;
        for &i in group {
            let r = *rewards.get(i).ok_or_else(|| Error::invalid("group index out of range"))?;
            sum += r;
        }
        for &i in group {
            if !out[i].is_nan() {
                return Err(Error::invalid("trajectory assigned to two groups"));
            }
            let r = rewards[i];
            out[i] = match baseline {
                Baseline::GroupMean => r - sum / g as f64,
                Baseline::LeaveOneOut => r - (sum - r) / (g - 1) as f64,
            };
        }
    }
    if out.iter().any(|a| a.is_nan()) {
        return Err(Error::invalid("some trajectories belong to no group"));
    }
    Ok(out)
}

/// A rollout's contribution to the policy gradient.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub trajectory: &'a Trajectory,
    pub advantage: f64,
    /// Masked samples (e.g. rejected by a quality gate) contribute nothing.
    pub masked: bool,
}

/// Gradient of the regularized objective and what went into it.
#[derive(Clone, Debug)]
pub struct Assembled {
    pub grad: Weights,
    /// Value of the objective at the current parameters.
    pub objective: f64,
    pub steps_used: usize,
    pub clamped_steps: usize,
}

fn rows<'a>(samples: &'a [Sample<'a>], config: &GrpoConfig) -> Result<Vec<(usize, &'a crate::ponder::StepRecord)>> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let t = s.trajectory;
        if t.steps.len() < t.halted_at {
            return Err(Error::invalid("trajectory is missing per-step records"));
        }
        if s.masked {
            continue;
        }
        for step in &t.steps {
            // Below the threshold the halt is deterministic and has no log-probability gradient.
            if step.forced || (step.source == Source::Teacher && !config.include_teacher) {
                continue;
            }
            out.push((i, step));
        }
    }
    Ok(out)
}

/// Gradient of `sum_i A_i sum_k log pi(a_k | z_k) + entropy_coef * sum_i sum_k H(z_k)`.
///
/// Probabilities are recomputed from the current parameters rather than read
/// from the records.
pub fn assemble_gradient(controller: &Controller, samples: &[Sample], config: &GrpoConfig) -> Result<Assembled> {
    let rows = rows(samples, config)?;
    if rows.is_empty() {
        return Ok(Assembled {
            grad: Weights::zeros(controller.dim()),
            objective: 0.0,
            steps_used: 0,
            clamped_steps: 0,
        });
    }
    let states: Vec<&crate::numerics::Vector> = rows.iter().map(|(_, s)| &s.z).collect();
    let matrix = controller.stack(&states)?;
    let cache = controller.forward_cached(matrix.view())?;
    let temp = controller.temp();
    let mut upstream = Vec::with_capacity(rows.len());
    let mut objective = 0.0;
    let mut clamped_steps = 0;
    for (r, (i, step)) in rows.iter().enumerate() {
        let p = cache.probs[r];
        let adv = samples[*i].advantage;
        let (lp, clamped) = bernoulli_logprob(p, step.action);
        clamped_steps += clamped as usize;
        objective += adv * lp + config.entropy_coef * bernoulli_entropy(p);
        upstream.push(
            adv * logprob_logit_grad(p, step.action, temp)
                + config.entropy_coef * entropy_logit_grad(cache.logits[r], p, temp),
        );
    }
    let grad = controller.backward(&cache, &upstream)?;
    Ok(Assembled {
        grad,
        objective,
        steps_used: rows.len(),
        clamped_steps,
    })
}

/// Scalar objective matching [`assemble_gradient`], for finite-difference checks.
pub fn objective(controller: &Controller, samples: &[Sample], config: &GrpoConfig) -> Result<f64> {
    let rows = rows(samples, config)?;
    let mut total = 0.0;
    for (i, step) in rows {
        let p = controller.forward(&step.z)?;
        total += samples[i].advantage * bernoulli_logprob(p, step.action).0
            + config.entropy_coef * bernoulli_entropy(p);
    }
    Ok(total)
}

/// Rescales `grad` in place to norm at most `max_norm`; returns (original norm, clipped).
pub fn clip_global_norm(grad: &mut Weights, max_norm: f64) -> (f64, bool) {
    let norm = grad.norm();
    if norm > max_norm {
        grad.scale(max_norm / norm);
        (norm, true)
    } else {
        (norm, false)
    }
}

/// Plain ascent `theta + lr * grad`; non-finite gradients are refused.
pub fn apply_update(controller: &mut Controller, grad: &Weights, learning_rate: f64) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite("policy gradient"));
    }
    if !(learning_rate >= 0.0) {
        return Err(Error::invalid("learning rate must be non-negative"));
    }
    let mut w = controller.weights().clone();
    w.add_scaled(learning_rate, grad)?;
    controller.set_weights(w)?;
    controller.check_budget()
}

/// Two-decision halting MDP with a logistic policy.
///
/// At step 0 the continue logit is `theta[0]`; at step 1 it is
/// `theta[0] + theta[1]`; the episode ends after at most two continues.
/// Outcomes are indexed by the number of continues (0, 1 or 2).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyMdp {
    pub theta: [f64; 2],
    pub rewards: [f64; 3],
}

impl TinyMdp {
    fn continue_probs(&self) -> [f64; 2] {
        [sigmoid(self.theta[0]), sigmoid(self.theta[0] + self.theta[1])]
    }

    /// Probability of each outcome.
    pub fn outcome_probs(&self) -> [f64; 3] {
        let [p0, p1] = self.continue_probs();
        [1.0 - p0, p0 * (1.0 - p1), p0 * p1]
    }

    /// Gradient of the log-probability of an outcome.
    pub fn score(&self, outcome: usize) -> [f64; 2] {
        let [p0, p1] = self.continue_probs();
        // d/dlogit log p = 1 - p for continue, -p for halt
        match outcome {
            0 => [-p0, 0.0],
            1 => [(1.0 - p0) - p1, -p1],
            _ => [(1.0 - p0) + (1.0 - p1), 1.0 - p1],
        }
    }

    /// Exact policy gradient by enumerating all outcomes.
    pub fn exact_gradient(&self) -> [f64; 2] {
        let probs = self.outcome_probs();
        let mut g = [0.0; 2];
        for (o, p) in probs.iter().enumerate() {
            let s = self.score(o);
            g[0] += p * self.rewards[o] * s[0];
            g[1] += p * self.rewards[o] * s[1];
        }
        g
    }

    fn sample(&self, rng: &mut RngStream) -> usize {
        let [p0, p1] = self.continue_probs();
        if rng.uniform() >= p0 {
            0
        } else if rng.uniform() >= p1 {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub exact: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// `(mean - exact) / std_err`, or 0 where both agree exactly.
    pub z_scores: Vec<f64>,
    pub samples: usize,
}

impl UnbiasednessReport {
    pub fn within(&self, z: f64) -> bool {
        self.z_scores.iter().all(|s| s.abs() <= z)
    }
}

/// Monte-Carlo mean of the group estimator against the enumerated gradient.
///
/// One sample is one group of `group_size` rollouts. The group-mean estimator
/// is normalized by `G - 1` and the leave-one-out estimator by `G`; with those
/// normalizations both are unbiased.
pub fn unbiasedness_probe(
    mdp: &TinyMdp,
    group_size: usize,
    baseline: Baseline,
    samples: usize,
    rng: &mut RngStream,
) -> Result<UnbiasednessReport> {
    if samples == 0 {
        return Err(Error::invalid("samples must be positive"));
    }
    if group_size < 2 {
        return Err(Error::invalid("group size must be at least 2"));
    }
    let norm = match baseline {
        Baseline::GroupMean => (group_size - 1) as f64,
        Baseline::LeaveOneOut => group_size as f64,
    };
    let group: Vec<usize> = (0..group_size).collect();
    let groups = [group];
    let mut estimates = [Vec::with_capacity(samples), Vec::with_capacity(samples)];
    for _ in 0..samples {
        let outcomes: Vec<usize> = (0..group_size).map(|_| mdp.sample(rng)).collect();
        let rewards: Vec<f64> = outcomes.iter().map(|&o| mdp.rewards[o]).collect();
        let adv = advantages(&rewards, &groups, baseline)?;
        let mut g = [0.0; 2];
        for (o, a) in outcomes.iter().zip(&adv) {
            let s = mdp.score(*o);
            g[0] += a * s[0];
            g[1] += a * s[1];
        }
        estimates[0].push(g[0] / norm);
        estimates[1].push(g[1] / norm);
    }
    let exact = mdp.exact_gradient().to_vec();
    let mut mean = Vec::new();
    let mut std_err = Vec::new();
    let mut z_scores = Vec::new();
    for (c, est) in estimates.iter().enumerate() {
        let (m, v) = mean_var(est);
        let se = (v * samples as f64 / (samples as f64 - 1.0).max(1.0) / samples as f64).sqrt();
        let diff = m - exact[c];
        z_scores.push(if se > 0.0 { diff / se } else if diff.abs() < 1e-12 { 0.0 } else { f64::INFINITY });
        mean.push(m);
        std_err.push(se);
    }
    Ok(UnbiasednessReport {
        exact,
        mean,
        std_err,
        z_scores,
        samples,
    })
}

/// Rewards drawn i.i.d. from a normal distribution, independent of actions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IidRewards {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub group_size: usize,
    /// Single-rollout estimator without a baseline.
    pub reinforce: f64,
    /// Group-average estimator with the group-mean baseline.
    pub grpo: f64,
}

/// Empirical variance of one-parameter gradient estimates for a
/// Bernoulli(`sigmoid(logit)`) policy.
pub fn variance_probe(
    group_sizes: &[usize],
    trials: usize,
    rewards: IidRewards,
    logit: f64,
    rng: &mut RngStream,
) -> Result<Vec<VarianceRow>> {
    if trials < 1000 {
        return Err(Error::invalid("variance probe needs at least 1000 trials"));
    }
    if group_sizes.iter().any(|&g| g < 2) {
        return Err(Error::invalid("group sizes must be at least 2"));
    }
    let p = sigmoid(logit);
    let draw = |rng: &mut RngStream| {
        let a = rng.bernoulli(p) as u8 as f64;
        let r = rewards.mean + rewards.std * rng.normal();
        (a - p, r)
    };
    group_sizes
        .iter()
        .map(|&g| {
            let mut single = Vec::with_capacity(trials);
            let mut grouped = Vec::with_capacity(trials);
            for _ in 0..trials {
                let (score, r) = draw(rng);
                single.push(r * score);
                let pulls: Vec<(f64, f64)> = (0..g).map(|_| draw(rng)).collect();
                let mean_r = pulls.iter().map(|(_, r)| r).sum::<f64>() / g as f64;
                let est = pulls.iter().map(|(s, r)| (r - mean_r) * s).sum::<f64>() / g as f64;
                grouped.push(est);
            }
            Ok(VarianceRow {
                group_size: g,
                reinforce: mean_var(&single).1,
                grpo: mean_var(&grouped).1,
            })
        })
        .collect()
}
