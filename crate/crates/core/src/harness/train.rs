use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{Backbone, Mode};
use crate::controller::Controller;
use crate::curriculum::{self, Gate, Stage};
use crate::error::{Error, Result};
use crate::grpo::{self, Sample};
use crate::numerics::RngStream;
use crate::ponder::{self, ActionMode, Rollout, Source, Teacher, Trajectory};
use crate::reward::{self, FlopsStats, Outcome, RewardBreakdown, RewardWeights};
use crate::steering::{self, ContrastiveSet, SteeringVector};
use crate::tasks::{self, TaskInstance};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::eval::{evaluate, mean_breakdown, EvalReport, Policy};
use super::log::{write_events, write_log};
use super::SCHEMA_VERSION;

const REWARD_EMA_DECAY: f64 = 0.9;

/// The frozen pieces every run needs: backbone, steering vector and the pinned suite.
#[derive(Clone, Debug)]
pub struct Setup {
    pub backbone: Backbone,
    pub steering: SteeringVector,
    pub suite: Vec<TaskInstance>,
}

impl Setup {
    pub fn build(config: &TrainConfig) -> Result<Setup> {
        let backbone = Backbone::build(config.backbone.clone())?;
        let layer = config.tasks.steering_layer.unwrap_or_else(|| steering::default_layer(&backbone));
        let set = ContrastiveSet::sample(config.seed, config.tasks.extraction_size)?;
        let steering = steering::extract(&backbone, &set, layer)?;
        let suite = tasks::suite(config.tasks.suite_seed, config.tasks.suite_per_level)?;
        Ok(Setup {
            backbone,
            steering,
            suite,
        })
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub schema_version: u32,
    pub step: usize,
    pub stage: Stage,
    pub teacher_prob: f64,
    pub temperature: f64,
    pub teacher_frac: f64,
    pub mean_steps: f64,
    pub mean_flops: f64,
    pub diversity: f64,
    pub diversity_alert: bool,
    pub batch_accuracy: f64,
    pub r_acc: f64,
    pub r_flops: f64,
    pub r_comp: f64,
    pub r_qual: f64,
    pub r_rep: f64,
    pub r_total: f64,
    pub gate_rejects: usize,
    pub masked: usize,
    /// `applied`, or the reason the update was skipped.
    pub update: String,
    pub grad_norm: f64,
    pub clipped: bool,
    pub reward_ema: f64,
    pub flops_mean: f64,
    pub flops_std: f64,
}

/// A structured event for the JSON-lines log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub schema_version: u32,
    pub step: usize,
    pub kind: String,
    pub detail: serde_json::Value,
}

impl Event {
    fn new(step: usize, kind: &str, detail: serde_json::Value) -> Event {
        Event {
            schema_version: SCHEMA_VERSION,
            step,
            kind: kind.into(),
            detail,
        }
    }
}

/// Mutable training state; everything else is derived from the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next step to run.
    pub step: usize,
    pub controller: Controller,
    pub weights: RewardWeights,
    pub flops_stats: FlopsStats,
    pub stage: Stage,
    pub reinit_count: u64,
    pub reward_ema: Option<f64>,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig, dim: usize) -> Result<TrainState> {
        let controller = Controller::init_with(
            dim,
            RngStream::new(config.seed, "controller-init").next_u64(),
            config.controller.temp_initial,
            config.controller.activations,
        )?;
        Ok(TrainState {
            step: 0,
            controller,
            weights: config.reward.clone(),
            flops_stats: FlopsStats::new(config.reward.flops_ema_decay),
            stage: Stage::TeacherForcing,
            reinit_count: 0,
            reward_ema: None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub steering: SteeringVector,
    pub rows: Vec<LogRow>,
    pub events: Vec<Event>,
    pub report: EvalReport,
}

impl TrainOutcome {
    pub fn controller(&self) -> &Controller {
        &self.state.controller
    }
}

/// Trains from scratch. With `out_dir`, writes the log, events, periodic
/// checkpoints and the final report there.
pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let setup = Setup::build(config)?;
    let state = TrainState::fresh(config, setup.backbone.dim())?;
    run(config, &setup, state, out_dir)
}

/// Continues a run from a checkpoint.
pub fn resume(checkpoint: Checkpoint, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let config = checkpoint.config.clone();
    config.validate()?;
    let setup = Setup::build(&config)?;
    let state = checkpoint.into_state(&setup)?;
    run(&config, &setup, state, out_dir)
}

/// The training loop over `state.step..config.steps`.
pub fn run(config: &TrainConfig, setup: &Setup, mut state: TrainState, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let checksum = setup.backbone.checksum().to_string();
    let mut rows = Vec::with_capacity(config.steps.saturating_sub(state.step));
    let mut events = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    while state.step < config.steps {
        let t = state.step;
        let row = train_step(config, setup, &mut state, &mut events)?;
        rows.push(row);
        state.step += 1;

        if t % config.eval_every == 0 {
            if let Some(dir) = out_dir {
                let ckpt = Checkpoint::capture(config, &state, &setup.steering, &checksum);
                ckpt.save(&dir.join(format!("checkpoint-{t:05}.json")))?;
                events.push(Event::new(t, "checkpoint", json!({ "next_step": state.step })));
            }
        }
    }

    let report = evaluate(
        &setup.backbone,
        &setup.steering,
        &config.ponder,
        &setup.suite,
        Policy::Controller(&state.controller),
        &state.weights,
        &state.flops_stats,
    )?;
    if let Some(dir) = out_dir {
        write_log(&rows, std::fs::File::create(dir.join("train_log.csv"))?)?;
        write_events(&events, std::fs::File::create(dir.join("events.jsonl"))?)?;
        Checkpoint::capture(config, &state, &setup.steering, &checksum).save(&dir.join("checkpoint.json"))?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(TrainOutcome {
        state,
        steering: setup.steering.clone(),
        rows,
        events,
        report,
    })
}

struct Scored {
    trajectory: Trajectory,
    rewards: RewardBreakdown,
    gate: Gate,
}

fn score(
    trajectory: Trajectory,
    task: &TaskInstance,
    state: &TrainState,
    config: &TrainConfig,
    gates: bool,
) -> Result<Scored> {
    let out = &trajectory.output;
    let outcome = Outcome {
        prediction: out.value,
        truth: task.answer,
        tokens: &out.tokens,
        perplexity: out.perplexity_proxy(),
        flops: trajectory.flops,
    };
    let rewards = reward::score(&outcome, &state.flops_stats, &state.weights)?;
    let gate = if gates {
        curriculum::quality_gate(
            rewards.comp,
            rewards.qual,
            config.curriculum.comp_threshold,
            config.curriculum.qual_threshold,
        )
    } else {
        Gate::Pass
    };
    Ok(Scored {
        trajectory,
        rewards,
        gate,
    })
}

fn train_step(config: &TrainConfig, setup: &Setup, state: &mut TrainState, events: &mut Vec<Event>) -> Result<LogRow> {
    let t = state.step;
    let cur = &config.curriculum;
    let batch = config.batch_size;

    let stage = cur.stage(t);
    if stage != state.stage {
        events.push(Event::new(t, "stage-transition", json!({ "from": state.stage, "to": stage })));
        state.stage = stage;
    }
    let temperature = config.controller.temperature(t, cur.t2);
    state.controller.set_temp(temperature)?;

    let batch_tasks = tasks::training_batch(config.seed, t as u64, batch);
    let z0s = batch_tasks
        .iter()
        .map(|task| Ok(setup.backbone.encode(&task.prompt(Mode::Direct))?.z0().clone()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_step(t, "encode"))?;

    // Guidance source and teacher target, one draw each per rollout.
    let teacher_prob = cur.teacher_probability(t);
    let guidance_stream = RngStream::new(config.seed, "curriculum").fork(t as u64);
    let guidance: Vec<Option<usize>> = (0..batch)
        .map(|i| {
            let mut rng = guidance_stream.fork(i as u64);
            let source = curriculum::sample_source(teacher_prob, &mut rng);
            let target = curriculum::draw_teacher_target(cur.teacher_steps, &mut rng);
            (source == Source::Teacher).then_some(target)
        })
        .collect();
    let teachers: Vec<Option<Box<dyn Fn(usize) -> u8>>> = guidance
        .iter()
        .map(|g| g.map(|target| Box::new(move |k| curriculum::teacher_action(k, target)) as Box<dyn Fn(usize) -> u8>))
        .collect();

    let ponder_stream = RngStream::new(config.seed, "ponder").fork(t as u64);
    let rollout = |i: usize, attempt: usize| Rollout {
        z0: z0s[i].clone(),
        prompt_len: batch_tasks[i].problem.len() + 1,
        rng: ponder_stream.fork((attempt * batch + i) as u64),
        teacher: teachers[i].as_deref().map(|f| f as Teacher),
    };
    let roll = |indices: &[usize], attempt: usize, state: &TrainState| -> Result<Vec<Trajectory>> {
        ponder::run_batch(
            &setup.backbone,
            &state.controller,
            std::slice::from_ref(&setup.steering),
            &config.ponder,
            ActionMode::Sample,
            indices.iter().map(|&i| rollout(i, attempt)).collect(),
        )
    };

    let gates = cur.gates_active(t);
    let all: Vec<usize> = (0..batch).collect();
    let mut scored = roll(&all, 0, state)
        .map_err(|e| e.at_step(t, "ponder"))?
        .into_iter()
        .zip(&batch_tasks)
        .map(|(traj, task)| score(traj, task, state, config, gates))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_step(t, "reward"))?;

    // Quality gates: resample rejected slots, then mask what is still rejected.
    let mut gate_rejects = 0;
    if gates {
        for attempt in 1..=cur.max_resamples {
            let rejected: Vec<usize> = (0..batch).filter(|&i| scored[i].gate == Gate::Reject).collect();
            if rejected.is_empty() {
                break;
            }
            gate_rejects += rejected.len();
            let fresh = roll(&rejected, attempt, state).map_err(|e| e.at_step(t, "ponder"))?;
            for (i, traj) in rejected.iter().zip(fresh) {
                scored[*i] = score(traj, &batch_tasks[*i], state, config, gates).map_err(|e| e.at_step(t, "reward"))?;
            }
        }
    }
    let masked: Vec<bool> = scored.iter().map(|s| s.gate == Gate::Reject).collect();
    if gate_rejects > 0 {
        events.push(Event::new(
            t,
            "gate-reject",
            json!({ "rejected": gate_rejects, "masked": masked.iter().filter(|m| **m).count() }),
        ));
    }

    for s in &scored {
        state.flops_stats.observe(s.trajectory.flops);
    }
    let flops: Vec<u64> = scored.iter().map(|s| s.trajectory.flops).collect();
    let diversity = curriculum::diversity(&flops, cur.diversity_eps).map_err(|e| e.at_step(t, "diversity"))?;

    let rewards: Vec<RewardBreakdown> = scored.iter().map(|s| s.rewards).collect();
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let means = mean_breakdown(&rewards);

    let mut update = String::from("applied");
    let mut grad_norm = 0.0;
    let mut clipped = false;
    if diversity.alert {
        let mut rng = RngStream::new(config.seed, "curriculum/reinit").fork(t as u64);
        let (fresh, seed) = curriculum::handle_alert(&state.controller, &mut rng).map_err(|e| e.at_step(t, "reinit"))?;
        state.controller = fresh;
        state.reinit_count += 1;
        events.push(Event::new(
            t,
            "diversity-alert",
            json!({ "diversity": diversity.value, "reinit_seed": seed, "reinit_count": state.reinit_count }),
        ));
        update = "skipped: controller reinitialized".into();
    } else if !cur.updates_enabled(t) {
        update = "skipped: teacher forcing".into();
    } else {
        let mut rng = RngStream::new(config.seed, "grpo").fork(t as u64);
        let groups = grpo::partition(batch, config.grpo.group_size, &mut rng).map_err(|e| e.at_step(t, "grpo"))?;
        let adv = grpo::advantages(&totals, &groups, config.grpo.baseline).map_err(|e| e.at_step(t, "grpo"))?;
        let samples: Vec<Sample> = scored
            .iter()
            .zip(&adv)
            .zip(&masked)
            .map(|((s, &advantage), &masked)| Sample {
                trajectory: &s.trajectory,
                advantage,
                masked,
            })
            .collect();
        let mut assembled =
            grpo::assemble_gradient(&state.controller, &samples, &config.grpo).map_err(|e| e.at_step(t, "grpo"))?;
        if let Some(cap) = config.grpo.clip_norm {
            (grad_norm, clipped) = grpo::clip_global_norm(&mut assembled.grad, cap);
        } else {
            grad_norm = assembled.grad.norm();
        }
        match grpo::apply_update(&mut state.controller, &assembled.grad, config.grpo.learning_rate) {
            Ok(()) => {}
            Err(Error::NonFinite(what)) => {
                update = format!("skipped: non-finite {what}");
                events.push(Event::new(t, "update-skipped", json!({ "reason": update })));
            }
            Err(e) => return Err(e.at_step(t, "update")),
        }
    }
    state.controller.check_budget().map_err(|e| e.at_step(t, "update"))?;

    if t % config.eval_every == 0 {
        let magnitudes = reward::mean_magnitudes(&rewards, &state.weights);
        let balance = reward::balance_check(magnitudes, state.weights.balance_ratio).map_err(|e| e.at_step(t, "monitor"))?;
        events.push(Event::new(
            t,
            "balance",
            json!({ "ok": balance.ok, "violations": balance.violations, "magnitudes": magnitudes }),
        ));
        if config.rebalance {
            state.weights = reward::rebalance(&state.weights, magnitudes);
            events.push(Event::new(t, "rebalance", json!({ "weights": state.weights.outer() })));
        }
    }

    let ema = match state.reward_ema {
        None => means.total,
        Some(prev) => REWARD_EMA_DECAY * prev + (1.0 - REWARD_EMA_DECAY) * means.total,
    };
    state.reward_ema = Some(ema);

    let n = batch as f64;
    Ok(LogRow {
        schema_version: SCHEMA_VERSION,
        step: t,
        stage,
        teacher_prob,
        temperature,
        teacher_frac: guidance.iter().filter(|g| g.is_some()).count() as f64 / n,
        mean_steps: scored.iter().map(|s| s.trajectory.halted_at as f64).sum::<f64>() / n,
        mean_flops: flops.iter().map(|&f| f as f64).sum::<f64>() / n,
        diversity: diversity.value,
        diversity_alert: diversity.alert,
        batch_accuracy: scored
            .iter()
            .zip(&batch_tasks)
            .filter(|(s, task)| tasks::grade(s.trajectory.output.value, task.answer).exact)
            .count() as f64
            / n,
        r_acc: means.acc,
        r_flops: means.flops,
        r_comp: means.comp,
        r_qual: means.qual,
        r_rep: means.rep,
        r_total: means.total,
        gate_rejects,
        masked: masked.iter().filter(|m| **m).count(),
        update,
        grad_norm,
        clipped,
        reward_ema: ema,
        flops_mean: state.flops_stats.mean,
        flops_std: state.flops_stats.std(),
    })
}
