//! Teacher-to-student curriculum.
//!
//! Stage 1 (`t < T1`) is pure teacher forcing, stage 2 hands control to the
//! student linearly, and stage 3 (`t >= T2`) is autonomous with quality gates
//! switched on. The teacher ponders for a target number of steps drawn once
//! per rollout.

use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::error::{Error, Result};
use crate::numerics::{mean_var, RngStream};
use crate::ponder::Source;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub t1: usize,
    pub t2: usize,
    pub comp_threshold: f64,
    pub qual_threshold: f64,
    pub diversity_eps: f64,
    /// Inclusive range of teacher ponder targets.
    pub teacher_steps: [usize; 2],
    /// Extra rollouts attempted for a gate-rejected slot.
    pub max_resamples: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            t1: 500,
            t2: 1500,
            comp_threshold: 0.2,
            qual_threshold: 0.1,
            diversity_eps: 1e-6,
            teacher_steps: [3, 5],
            max_resamples: 3,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.t1 && self.t1 < self.t2) {
            return Err(Error::Config("curriculum needs 0 < t1 < t2".into()));
        }
        if self.teacher_steps[0] > self.teacher_steps[1] {
            return Err(Error::Config("teacher_steps must be an increasing range".into()));
        }
        if !(self.diversity_eps >= 0.0) {
            return Err(Error::Config("diversity_eps must be non-negative".into()));
        }
        Ok(())
    }

    pub fn stage(&self, t: usize) -> Stage {
        if t < self.t1 {
            Stage::TeacherForcing
        } else if t < self.t2 {
            Stage::Mixed
        } else {
            Stage::Autonomous
        }
    }

    pub fn teacher_probability(&self, t: usize) -> f64 {
        schedule(t, self.t1, self.t2)
    }

    /// Gradient updates start after `t1`.
    pub fn updates_enabled(&self, t: usize) -> bool {
        t > self.t1
    }

    /// Gates apply only once the teacher is gone.
    pub fn gates_active(&self, t: usize) -> bool {
        self.teacher_probability(t) == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TeacherForcing,
    Mixed,
    Autonomous,
}

/// Probability that a rollout at step `t` is teacher-driven.
pub fn schedule(t: usize, t1: usize, t2: usize) -> f64 {
    if t < t1 {
        1.0
    } else if t < t2 {
        1.0 - (t - t1) as f64 / (t2 - t1) as f64
    } else {
        0.0
    }
}

pub fn sample_source(p: f64, rng: &mut RngStream) -> Source {
    if rng.bernoulli(p) {
        Source::Teacher
    } else {
        Source::Student
    }
}

/// Continue while `k < target`.
pub fn teacher_action(k: usize, target: usize) -> u8 {
    (k < target) as u8
}

pub fn draw_teacher_target(range: [usize; 2], rng: &mut RngStream) -> usize {
    rng.range_inclusive(range[0] as u64, range[1] as u64) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Pass,
    Reject,
}

pub fn quality_gate(comp: f64, qual: f64, comp_threshold: f64, qual_threshold: f64) -> Gate {
    if comp > comp_threshold && qual > qual_threshold {
        Gate::Pass
    } else {
        Gate::Reject
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    /// Population variance over squared mean; 0 when the mean is 0.
    pub value: f64,
    pub alert: bool,
}

pub fn diversity(flops: &[u64], eps: f64) -> Result<Diversity> {
    if flops.is_empty() {
        return Err(Error::invalid("diversity of an empty batch"));
    }
    let xs: Vec<f64> = flops.iter().map(|&f| f as f64).collect();
    let (mean, var) = mean_var(&xs);
    if mean == 0.0 {
        return Ok(Diversity { value: 0.0, alert: true });
    }
    let value = var / (mean * mean);
    Ok(Diversity {
        value,
        alert: value < eps,
    })
}

/// A freshly initialized controller with the same shape, seeded from `rng`.
pub fn handle_alert(controller: &Controller, rng: &mut RngStream) -> Result<(Controller, u64)> {
    let seed = rng.next_u64();
    let fresh = Controller::init_with(controller.dim(), seed, controller.temp(), controller.activations())?;
    Ok((fresh, seed))
}
