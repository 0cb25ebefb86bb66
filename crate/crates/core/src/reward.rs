//! The five reward components, their weighted total, running FLOPs
//! statistics, balance validation and adaptive weight rebalancing.
//!
//! Component functions return signed values: the FLOPs and repetition terms
//! are non-positive penalties that already include their internal weights,
//! and the quality term includes `w_qual`. [`total`] only applies the outer
//! weights.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbone::Token;
use crate::error::{Error, Result};

const REL_EPS: f64 = 1e-8;
const FLOPS_EPS: f64 = 1e-8;

/// Component order used by [`mean_magnitudes`], [`rebalance`] and [`balance_check`].
pub const COMPONENTS: [&str; 5] = ["acc", "flops", "comp", "qual", "rep"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_acc: f64,
    pub lambda_flops: f64,
    pub w_comp: f64,
    pub w_qual: f64,
    pub w_rep: f64,
    pub w_exact: f64,
    pub w_partial: f64,
    /// Relative-error tolerance for partial credit.
    pub tolerance: f64,
    /// Weights of the setup, computation, verification and conclusion stages.
    pub stage_weights: [f64; 4],
    /// Penalty weights for repeated 1-, 2- and 3-grams.
    pub ngram_penalties: [f64; 3],
    pub target_len: usize,
    pub ppl_baseline: f64,
    pub ppl_scale: f64,
    /// Maximum tolerated ratio between component magnitudes.
    pub balance_ratio: f64,
    pub rebalance_rate: f64,
    pub rebalance_target: f64,
    pub flops_ema_decay: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_acc: 1.0,
            lambda_flops: 0.2,
            w_comp: 1.0,
            w_qual: 0.25,
            w_rep: 1.0,
            w_exact: 1.0,
            w_partial: 0.5,
            tolerance: 0.05,
            stage_weights: [0.25; 4],
            ngram_penalties: [0.1, 0.2, 0.3],
            target_len: 8,
            ppl_baseline: 1.0,
            ppl_scale: 1.0,
            balance_ratio: 5.0,
            rebalance_rate: 0.1,
            rebalance_target: 0.5,
            flops_ema_decay: 0.99,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let outer = [self.w_acc, self.lambda_flops, self.w_comp, self.w_qual, self.w_rep];
        if outer.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("reward weights must be non-negative".into()));
        }
        if self.w_partial > self.w_exact {
            return Err(Error::Config("w_partial must not exceed w_exact".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if !(self.ppl_scale > 0.0) {
            return Err(Error::Config("ppl_scale must be positive".into()));
        }
        if !(2.0..=10.0).contains(&self.balance_ratio) {
            return Err(Error::Config("balance_ratio must lie in [2, 10]".into()));
        }
        if !(self.rebalance_rate > 0.0 && self.rebalance_target > 0.0) {
            return Err(Error::Config("rebalance rate and target must be positive".into()));
        }
        if !(self.flops_ema_decay > 0.0 && self.flops_ema_decay < 1.0) {
            return Err(Error::Config("flops_ema_decay must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// The outer weights in [`COMPONENTS`] order.
    pub fn outer(&self) -> [f64; 5] {
        [self.w_acc, self.lambda_flops, self.w_comp, self.w_qual, self.w_rep]
    }

    fn set_outer(&mut self, w: [f64; 5]) {
        [self.w_acc, self.lambda_flops, self.w_comp, self.w_qual, self.w_rep] = w;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: f64,
    pub flops: f64,
    pub comp: f64,
    pub qual: f64,
    pub rep: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Builds a breakdown and fills in the weighted total.
    pub fn new(acc: f64, flops: f64, comp: f64, qual: f64, rep: f64, weights: &RewardWeights) -> Self {
        let mut b = RewardBreakdown {
            acc,
            flops,
            comp,
            qual,
            rep,
            total: 0.0,
        };
        b.total = total(&b, weights);
        b
    }

    pub fn components(&self) -> [f64; 5] {
        [self.acc, self.flops, self.comp, self.qual, self.rep]
    }
}

pub fn accuracy_reward(pred: f64, truth: f64, weights: &RewardWeights) -> f64 {
    let err = (pred - truth).abs();
    if err <= 1e-9 {
        return weights.w_exact;
    }
    let rel = err / (truth.abs() + REL_EPS);
    if rel < weights.tolerance {
        weights.w_partial * (-rel).exp()
    } else {
        0.0
    }
}

/// Exponential moving statistics of trajectory FLOPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsStats {
    pub mean: f64,
    pub var: f64,
    pub decay: f64,
    pub count: u64,
}

impl FlopsStats {
    pub fn new(decay: f64) -> FlopsStats {
        FlopsStats {
            mean: 0.0,
            var: 0.0,
            decay,
            count: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn observe(&mut self, flops: u64) {
        let f = flops as f64;
        if self.count == 0 {
            self.mean = f;
            self.var = 0.0;
        } else {
            let a = self.decay;
            self.mean = a * self.mean + (1.0 - a) * f;
            self.var = a * self.var + (1.0 - a) * (f - self.mean).powi(2);
        }
        self.count += 1;
    }
}

pub fn flops_reward(flops: u64, stats: &FlopsStats, lambda: f64) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    -lambda * (flops as f64 - stats.mean) / (stats.std() + FLOPS_EPS)
}

/// Stage weights of the markers present in `tokens`.
pub fn completeness_reward(tokens: &[Token], weights: &RewardWeights) -> f64 {
    let markers = [Token::SETUP, Token::COMPUTE, Token::VERIFY, Token::CONCLUDE];
    markers
        .iter()
        .zip(&weights.stage_weights)
        .filter(|(m, _)| tokens.contains(m))
        .map(|(_, w)| w)
        .sum()
}

pub fn quality_reward(output_len: usize, ppl: f64, weights: &RewardWeights) -> Result<f64> {
    if !(weights.ppl_scale > 0.0) {
        return Err(Error::Config("ppl_scale must be positive".into()));
    }
    if !(ppl > 0.0) {
        return Err(Error::invalid("perplexity proxy must be positive"));
    }
    let length = (output_len as f64 / weights.target_len as f64).min(1.0);
    Ok(weights.w_qual * length * (-(ppl - weights.ppl_baseline) / weights.ppl_scale).exp())
}

/// Occurrences of `g`-grams beyond the first appearance of each distinct one.
pub fn repeated_ngrams<T: std::hash::Hash + Eq>(tokens: &[T], g: usize) -> usize {
    if tokens.len() < g {
        return 0;
    }
    let mut seen: HashMap<&[T], usize> = HashMap::new();
    for w in tokens.windows(g) {
        *seen.entry(w).or_default() += 1;
    }
    seen.values().map(|c| c - 1).sum()
}

pub fn antirep_reward<T: std::hash::Hash + Eq>(tokens: &[T], penalties: [f64; 3]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let n = tokens.len() as f64;
    let penalty: f64 = penalties
        .iter()
        .enumerate()
        .map(|(i, beta)| beta * repeated_ngrams(tokens, i + 1) as f64 / n)
        .sum();
    -penalty
}

/// `w_acc * acc + flops + w_comp * comp + qual + w_rep * rep`.
pub fn total(parts: &RewardBreakdown, weights: &RewardWeights) -> f64 {
    weights.w_acc * parts.acc + parts.flops + weights.w_comp * parts.comp + parts.qual + weights.w_rep * parts.rep
}

/// Everything [`score`] needs to know about one finished rollout.
#[derive(Clone, Copy, Debug)]
pub struct Outcome<'a> {
    pub prediction: f64,
    pub truth: f64,
    pub tokens: &'a [Token],
    pub perplexity: f64,
    pub flops: u64,
}

pub fn score(outcome: &Outcome, stats: &FlopsStats, weights: &RewardWeights) -> Result<RewardBreakdown> {
    let acc = accuracy_reward(outcome.prediction, outcome.truth, weights);
    let flops = flops_reward(outcome.flops, stats, weights.lambda_flops);
    let comp = completeness_reward(outcome.tokens, weights);
    let qual = quality_reward(outcome.tokens.len(), outcome.perplexity, weights)?;
    let rep = antirep_reward(outcome.tokens, weights.ngram_penalties);
    Ok(RewardBreakdown::new(acc, flops, comp, qual, rep, weights))
}

/// Mean absolute weighted contribution of each component.
pub fn mean_magnitudes(rows: &[RewardBreakdown], weights: &RewardWeights) -> [f64; 5] {
    let mut out = [0.0; 5];
    if rows.is_empty() {
        return out;
    }
    let scale = [weights.w_acc, 1.0, weights.w_comp, 1.0, weights.w_rep];
    for r in rows {
        for (i, c) in r.components().iter().enumerate() {
            out[i] += (scale[i] * c).abs();
        }
    }
    out.iter_mut().for_each(|x| *x /= rows.len() as f64);
    out
}

/// One multiplicative rebalancing step toward `rebalance_target`.
pub fn rebalance(weights: &RewardWeights, magnitudes: [f64; 5]) -> RewardWeights {
    let mut w = weights.outer();
    let target = weights.rebalance_target.ln();
    for (wi, m) in w.iter_mut().zip(magnitudes) {
        if m > 0.0 && m.is_finite() {
            *wi *= (weights.rebalance_rate * (target - m.ln())).exp();
        }
    }
    let mut out = weights.clone();
    out.set_outer(w);
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub ok: bool,
    pub violations: Vec<String>,
}

/// Pairwise ratios within `[1/ratio, ratio]` and FLOPs/accuracy within `[0.1, 1]`.
///
/// Components with zero magnitude are inactive and skipped in the pairwise check.
pub fn balance_check(magnitudes: [f64; 5], ratio: f64) -> Result<BalanceReport> {
    if !(2.0..=10.0).contains(&ratio) {
        return Err(Error::invalid("balance ratio must lie in [2, 10]"));
    }
    let mut violations = Vec::new();
    for i in 0..5 {
        for j in i + 1..5 {
            let (a, b) = (magnitudes[i], magnitudes[j]);
            if a <= 0.0 || b <= 0.0 {
                continue;
            }
            let r = a / b;
            if r > ratio || r < 1.0 / ratio {
                violations.push(format!("{}/{} = {r:.4}", COMPONENTS[i], COMPONENTS[j]));
            }
        }
    }
    let fa = if magnitudes[0] > 0.0 {
        magnitudes[1] / magnitudes[0]
    } else {
        f64::INFINITY
    };
    if !(0.1..=1.0).contains(&fa) {
        violations.push(format!("flops/acc = {fa:.4} outside [0.1, 1]"));
    }
    Ok(BalanceReport {
        ok: violations.is_empty(),
        violations,
    })
}
