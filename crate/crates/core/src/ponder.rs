//! The pondering loop.
//!
//! Starting from the backbone's final-layer state, each step adds a decaying
//! multiple of the steering direction. Before every step the controller
//! reports a continue probability `p`; the loop halts when the chosen action
//! is "halt", when `p` is at or below the threshold, or at the step cap.

use serde::{Deserialize, Serialize};

use crate::backbone::{AnswerDistribution, Backbone};
use crate::controller::Controller;
use crate::error::{Error, Result};
use crate::numerics::{check_dims, RngStream, Vector};
use crate::reward::RewardBreakdown;
use crate::steering::SteeringVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PonderConfig {
    /// Initial step scale.
    pub alpha0: f64,
    /// Exponential decay rate of the step scale.
    pub beta: f64,
    /// Halting threshold on the continue probability.
    pub threshold: f64,
    pub max_steps: usize,
    /// Standard deviation of optional Gaussian state noise.
    pub noise_std: f64,
    /// Steering layer used at step `k` (the last entry repeats). Empty means
    /// "whatever single vector was supplied".
    pub layer_schedule: Vec<usize>,
}

impl Default for PonderConfig {
    fn default() -> Self {
        PonderConfig {
            alpha0: 0.4,
            beta: 0.15,
            threshold: 0.2,
            max_steps: 8,
            noise_std: 0.0,
            layer_schedule: Vec::new(),
        }
    }
}

impl PonderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config("alpha0 must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Step scale `alpha0 * exp(-beta * k)`.
pub fn decay(k: usize, alpha0: f64, beta: f64) -> f64 {
    alpha0 * (-beta * k as f64).exp()
}

/// `z + alpha * direction (+ noise)`.
pub fn step(z: &Vector, direction: &Vector, alpha: f64, noise: Option<&Vector>) -> Result<Vector> {
    let next = z.add_scaled(alpha, direction)?;
    match noise {
        Some(xi) => next.add_scaled(1.0, xi),
        None => Ok(next),
    }
}

/// Largest possible displacement after `steps` steps (`None` = unbounded).
pub fn drift_bound(alpha0: f64, beta: f64, steps: Option<usize>, h_norm: f64) -> Result<f64> {
    match steps {
        Some(t) if beta == 0.0 => Ok(t as f64 * alpha0 * h_norm),
        Some(t) => Ok(alpha0 * (1.0 - (-beta * t as f64).exp()) / (1.0 - (-beta).exp()) * h_norm),
        None if beta > 0.0 => Ok(alpha0 / (1.0 - (-beta).exp()) * h_norm),
        None => Err(Error::invalid("drift is unbounded without decay")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Teacher,
    Student,
}

/// One controller evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub z: Vector,
    /// Continue probability.
    pub p: f64,
    /// Action actually taken: 1 = ponder again, 0 = halt.
    pub action: u8,
    pub source: Source,
    /// `p <= threshold`, so the halt did not depend on the sampled or teacher action.
    pub forced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    /// Number of ponder steps taken.
    pub halted_at: usize,
    pub prompt_len: usize,
    pub flops: u64,
    pub output: AnswerDistribution,
    pub rewards: Option<RewardBreakdown>,
}

impl Trajectory {
    pub fn final_state(&self, z0: &Vector, steering: &[SteeringVector], config: &PonderConfig) -> Result<Vector> {
        let mut z = z0.clone();
        for k in 0..self.halted_at {
            let h = pick_steering(steering, config, k)?;
            z = step(&z, &h.direction, decay(k, config.alpha0, config.beta), None)?;
        }
        Ok(z)
    }
}

/// How actions are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    /// Draw a Bernoulli(p) action every step.
    Sample,
    /// Continue exactly while `p > threshold`.
    Threshold,
}

/// Teacher override: the action to take at step `k`.
pub type Teacher<'a> = &'a dyn Fn(usize) -> u8;

/// One rollout request for [`run_batch`].
pub struct Rollout<'a> {
    pub z0: Vector,
    pub prompt_len: usize,
    pub rng: RngStream,
    pub teacher: Option<Teacher<'a>>,
}

pub(crate) fn pick_steering<'s>(
    steering: &'s [SteeringVector],
    config: &PonderConfig,
    k: usize,
) -> Result<&'s SteeringVector> {
    if steering.is_empty() {
        return Err(Error::invalid("no steering vector supplied"));
    }
    if config.layer_schedule.is_empty() {
        return Ok(&steering[0]);
    }
    let layer = config.layer_schedule[k.min(config.layer_schedule.len() - 1)];
    steering
        .iter()
        .find(|h| h.layer == layer)
        .ok_or_else(|| Error::invalid(format!("no steering vector for layer {layer}")))
}

struct Live {
    z: Vector,
    k: usize,
    steps: Vec<StepRecord>,
    done: bool,
}

/// Runs many rollouts in lockstep so the controller sees one batch per step.
///
/// Each rollout draws from its own stream: one uniform per controller
/// evaluation, then (with noise enabled) `d` normals per ponder step.
pub fn run_batch(
    backbone: &Backbone,
    controller: &Controller,
    steering: &[SteeringVector],
    config: &PonderConfig,
    mode: ActionMode,
    mut rollouts: Vec<Rollout>,
) -> Result<Vec<Trajectory>> {
    config.validate()?;
    let d = backbone.dim();
    check_dims(d, controller.dim())?;
    for h in steering {
        check_dims(d, h.dim())?;
    }
    let mut live: Vec<Live> = rollouts
        .iter()
        .map(|r| {
            check_dims(d, r.z0.dim())?;
            Ok(Live {
                z: r.z0.clone(),
                k: 0,
                steps: Vec::new(),
                done: config.max_steps == 0,
            })
        })
        .collect::<Result<_>>()?;

    loop {
        let active: Vec<usize> = (0..live.len()).filter(|&i| !live[i].done).collect();
        if active.is_empty() {
            break;
        }
        let states: Vec<&Vector> = active.iter().map(|&i| &live[i].z).collect();
        let probs = controller.forward_batch(&states)?;
        for (&i, p) in active.iter().zip(probs) {
            let rollout = &mut rollouts[i];
            let state = &mut live[i];
            let draw = rollout.rng.uniform();
            let chosen = match mode {
                ActionMode::Sample => (draw < p) as u8,
                ActionMode::Threshold => (p > config.threshold) as u8,
            };
            let (chosen, source) = match rollout.teacher {
                Some(teacher) => (teacher(state.k), Source::Teacher),
                None => (chosen, Source::Student),
            };
            let forced = p <= config.threshold;
            let action = if forced { 0 } else { chosen };
            state.steps.push(StepRecord {
                z: state.z.clone(),
                p,
                action,
                source,
                forced,
            });
            if action == 0 {
                state.done = true;
                continue;
            }
            let h = pick_steering(steering, config, state.k)?;
            let alpha = decay(state.k, config.alpha0, config.beta);
            let noise = if config.noise_std > 0.0 {
                let xi: Vec<f64> = (0..d).map(|_| config.noise_std * rollout.rng.normal()).collect();
                Some(Vector::new(xi)?)
            } else {
                None
            };
            state.z = step(&state.z, &h.direction, alpha, noise.as_ref())?;
            state.k += 1;
            if state.k >= config.max_steps {
                state.done = true;
            }
        }
    }

    live.into_iter()
        .zip(&rollouts)
        .map(|(state, rollout)| {
            Ok(Trajectory {
                flops: backbone.trajectory_flops(rollout.prompt_len, state.k),
                output: backbone.decode(&state.z)?,
                halted_at: state.k,
                prompt_len: rollout.prompt_len,
                steps: state.steps,
                rewards: None,
            })
        })
        .collect()
}

/// A single sampled rollout.
#[allow(clippy::too_many_arguments)]
pub fn run(
    backbone: &Backbone,
    controller: &Controller,
    steering: &SteeringVector,
    config: &PonderConfig,
    z0: &Vector,
    prompt_len: usize,
    rng: RngStream,
    teacher: Option<Teacher>,
) -> Result<Trajectory> {
    let rollout = Rollout {
        z0: z0.clone(),
        prompt_len,
        rng,
        teacher,
    };
    let mut out = run_batch(
        backbone,
        controller,
        std::slice::from_ref(steering),
        config,
        ActionMode::Sample,
        vec![rollout],
    )?;
    Ok(out.remove(0))
}

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    schema_version: u32,
    #[serde(flatten)]
    trajectory: &'a Trajectory,
}

pub fn write_jsonl<W: std::io::Write>(trajectories: &[Trajectory], mut out: W) -> Result<()> {
    for trajectory in trajectories {
        let line = TrajectoryLine {
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            trajectory,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
