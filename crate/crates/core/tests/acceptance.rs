//! End-to-end acceptance checks. Each test prints one `PASS` or `FAIL` line
//! to stderr (bypassing output capture) before asserting.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

mod common;

use common::{central, close, directional, random_controller, random_state};
use ponderlab::backbone::{Backbone, BackboneConfig, Mode, Token};
use ponderlab::controller::{self, Activation, Controller, HIDDEN};
use ponderlab::curriculum::{self, CurriculumConfig};
use ponderlab::grpo::{self, Baseline, GrpoConfig, IidRewards, Sample, TinyMdp};
use ponderlab::harness::sweep::{lambda_sweep, tau_sweep};
use ponderlab::harness::{evaluate, train, Checkpoint, EvalReport, Policy, Setup, TrainConfig, TrainOutcome};
use ponderlab::numerics::{RngStream, Vector};
use ponderlab::ponder::{self, ActionMode, PonderConfig, Rollout};
use ponderlab::reward::{self, FlopsStats, RewardBreakdown, RewardWeights};
use ponderlab::steering::{self, ContrastiveSet};
use ponderlab::tasks;

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{tag} [{id:02}] {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn backbone() -> Backbone {
    Backbone::build(BackboneConfig::default()).unwrap()
}

struct DefaultRun {
    outcome: TrainOutcome,
    baseline: EvalReport,
    setup: Setup,
    config: TrainConfig,
    checkpoints: Vec<PathBuf>,
    _dir: tempfile::TempDir,
}

/// The default 3,000-step run, shared by the end-to-end criteria.
fn default_run() -> &'static DefaultRun {
    static RUN: OnceLock<DefaultRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let config = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(&config, Some(dir.path())).unwrap();
        let setup = Setup::build(&config).unwrap();
        let baseline = evaluate(
            &setup.backbone,
            &setup.steering,
            &config.ponder,
            &setup.suite,
            Policy::FixedK(config.ponder.max_steps),
            &outcome.state.weights,
            &outcome.state.flops_stats,
        )
        .unwrap();
        let mut checkpoints: Vec<PathBuf> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "json") && p.to_string_lossy().contains("checkpoint"))
            .collect();
        checkpoints.sort();
        DefaultRun {
            outcome,
            baseline,
            setup,
            config,
            checkpoints,
            _dir: dir,
        }
    })
}

#[test]
fn c01_drift_bound() {
    let b = backbone();
    let h = steering::extract(&b, &ContrastiveSet::sample(1, 256).unwrap(), steering::default_layer(&b)).unwrap();
    let starts: Vec<(Vector, usize)> = tasks::training_batch(11, 0, 100)
        .iter()
        .map(|t| {
            let p = t.prompt(Mode::Direct);
            (b.encode(&p).unwrap().z0().clone(), p.len())
        })
        .collect();
    let mut rng = RngStream::new(11, "acceptance/drift");
    let keep_going = |_: usize| 1u8;
    let (mut runs, mut checks, mut violations, mut worst) = (0, 0, 0, f64::MIN);
    for r in 0..10u64 {
        let config = PonderConfig {
            alpha0: 0.05 + rng.uniform(),
            beta: 0.5 * rng.uniform(),
            threshold: 0.2 * rng.uniform(),
            ..Default::default()
        };
        let c = Controller::init(64, r, 0.5 + rng.uniform()).unwrap();
        let rollouts = starts
            .iter()
            .enumerate()
            .map(|(i, (z0, n))| Rollout {
                z0: z0.clone(),
                prompt_len: *n,
                rng: RngStream::new(r, "acceptance/drift-run").fork(i as u64),
                teacher: (r % 2 == 1).then_some(&keep_going as ponder::Teacher),
            })
            .collect();
        let trajectories =
            ponder::run_batch(&b, &c, std::slice::from_ref(&h), &config, ActionMode::Sample, rollouts).unwrap();
        for ((z0, _), t) in starts.iter().zip(&trajectories) {
            runs += 1;
            let mut states: Vec<Vector> = t.steps.iter().map(|s| s.z.clone()).collect();
            if t.steps.len() == t.halted_at {
                states.push(t.final_state(z0, std::slice::from_ref(&h), &config).unwrap());
            }
            for (k, z) in states.iter().enumerate() {
                let bound = config.alpha0 * (1.0 - (-config.beta * k as f64).exp()) / (1.0 - (-config.beta).exp());
                let excess = z.sub(z0).unwrap().norm() - bound;
                worst = worst.max(excess);
                checks += 1;
                violations += (excess > 1e-9) as usize;
            }
        }
    }
    verdict(
        1,
        "drift bound",
        runs == 1000 && violations == 0,
        format!("{runs} runs, {checks} states, {violations} violations, max excess {worst:.2e}"),
    );
}

#[test]
fn c02_steering_recovery() {
    let b = backbone();
    let layer = steering::default_layer(&b);
    let h = steering::extract(&b, &ContrastiveSet::sample(1, 256).unwrap(), layer).unwrap();
    let cosine = h.direction.cosine(&b.planted_direction()).unwrap();
    let pool = ContrastiveSet::sample(2, 4096).unwrap();
    let points =
        steering::convergence_probe(&b, &pool, layer, &[64, 256], 10, &mut RngStream::new(2, "acceptance/rate")).unwrap();
    let ratio = points[1].mean_angle / points[0].mean_angle;
    verdict(
        2,
        "steering recovery",
        cosine >= 0.9 && (0.35..=0.70).contains(&ratio),
        format!(
            "cosine {cosine:.4} at N=256; angle {:.4} (N=64) -> {:.4} (N=256), ratio {ratio:.3} over 10 trials",
            points[0].mean_angle, points[1].mean_angle
        ),
    );
}

#[test]
fn c03_divergence_monotone() {
    let b = backbone();
    let h = steering::extract(&b, &ContrastiveSet::sample(1, 256).unwrap(), steering::default_layer(&b)).unwrap();
    let grid: Vec<f64> = (0..=10).map(|i| 0.05 * i as f64).collect();
    let states: Vec<Vector> = tasks::training_batch(3, 0, 200)
        .iter()
        .map(|t| b.encode(&t.prompt(Mode::Direct)).unwrap().z0().clone())
        .collect();
    let monotone = states
        .iter()
        .filter(|z0| {
            let d: Vec<f64> = grid
                .iter()
                .map(|&a| steering::reasoning_divergence(&b, z0, &h, a).unwrap())
                .collect();
            d.windows(2).all(|w| w[1] >= w[0] - 1e-9)
        })
        .count();
    let frac = monotone as f64 / states.len() as f64;
    verdict(
        3,
        "divergence nondecreasing in strength",
        frac >= 0.95,
        format!("{monotone}/200 states monotone on alpha in [0, 0.5]"),
    );
}

#[test]
fn c04_gradients_match_finite_differences() {
    let h = 1e-5;
    let dim = 16;
    let (mut checked, mut failures) = (0usize, Vec::new());
    for case in 0..20u64 {
        let acts = if case % 2 == 0 {
            [Activation::Gelu; 2]
        } else {
            [Activation::Gelu, Activation::Relu]
        };
        let c = random_controller(500 + case, dim, acts, 0.5 + 0.05 * case as f64);
        let mut rng = RngStream::new(case, "acceptance/fd");
        let z = random_state(&mut rng, dim);
        let a = (case % 2) as u8;
        let grad = c.logprob_and_grad(&z, a).unwrap().grad.to_flat();
        let f = |p: &Controller| controller::bernoulli_logprob(p.forward(&z).unwrap(), a).0;
        let n = grad.len();
        let mut coords: Vec<usize> = (0..2 * dim).collect();
        coords.extend(n - HIDDEN - 1..n);
        coords.extend((0..100).map(|_| rng.below(n as u64) as usize));
        for &i in &coords {
            checked += 1;
            let numeric = central(&c, i, h, f);
            if !close(grad[i], numeric) {
                failures.push(format!("case {case} coord {i}"));
            }
        }
        for _ in 0..3 {
            checked += 1;
            let (analytic, numeric) = directional(&c, &grad, h, &mut rng, f);
            if !close(analytic, numeric) {
                failures.push(format!("case {case} direction"));
            }
        }
    }
    let config = GrpoConfig::default();
    let mut micro = 0;
    for case in 0..10u64 {
        let c = random_controller(900 + case, 12, [Activation::Gelu; 2], 0.9);
        let mut rng = RngStream::new(case, "acceptance/micro");
        let ts: Vec<ponder::Trajectory> = (0..2)
            .map(|_| {
                let k = 1 + rng.below(2) as usize;
                let mut t = ponder::Trajectory {
                    steps: Vec::new(),
                    halted_at: k - 1,
                    prompt_len: 3,
                    flops: 0,
                    output: Backbone::build(BackboneConfig { dim: 12, ..Default::default() })
                        .map(|bb| bb.decode(&Vector::zeros(12)).unwrap())
                        .unwrap(),
                    rewards: None,
                };
                for s in 0..k {
                    t.steps.push(ponder::StepRecord {
                        z: random_state(&mut rng, 12),
                        p: 0.5,
                        action: (s + 1 < k) as u8,
                        source: ponder::Source::Student,
                        forced: false,
                    });
                }
                t
            })
            .collect();
        let samples: Vec<Sample> = ts
            .iter()
            .map(|t| Sample {
                trajectory: t,
                advantage: rng.normal(),
                masked: false,
            })
            .collect();
        let grad = grpo::assemble_gradient(&c, &samples, &config).unwrap().grad.to_flat();
        let f = |p: &Controller| grpo::objective(p, &samples, &config).unwrap();
        let n = grad.len();
        let mut coords: Vec<usize> = (0..24).collect();
        coords.extend(n - HIDDEN - 1..n);
        coords.extend((0..60).map(|_| rng.below(n as u64) as usize));
        for &i in &coords {
            micro += 1;
            if !close(grad[i], central(&c, i, h, f)) {
                failures.push(format!("micro-batch {case} coord {i}"));
            }
        }
        micro += 1;
        let (analytic, numeric) = directional(&c, &grad, h, &mut rng, f);
        if !close(analytic, numeric) {
            failures.push(format!("micro-batch {case} direction"));
        }
    }
    verdict(
        4,
        "gradients vs central differences",
        failures.is_empty(),
        format!(
            "{checked} log-prob checks over 20 cases, {micro} GRPO checks over 10 micro-batches, {} outside rel 1e-4 {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn c05_advantages() {
    let mut rng = RngStream::new(5, "acceptance/adv");
    let mut exact_zero = true;
    let mut shift_exact = true;
    let mut max_float_sum: f64 = 0.0;
    let mut max_loo_shift: f64 = 0.0;
    for _ in 0..1000 {
        let groups = grpo::partition(64, 8, &mut rng).unwrap();
        // rewards on a dyadic grid, where every group sum is exact in binary floating point
        let dyadic: Vec<f64> = (0..64).map(|_| (rng.below(257) as f64 - 128.0) / 64.0).collect();
        let adv = grpo::advantages(&dyadic, &groups, Baseline::GroupMean).unwrap();
        for g in &groups {
            exact_zero &= g.iter().map(|&i| adv[i]).sum::<f64>() == 0.0;
        }
        let shift = (rng.below(1025) as f64 - 512.0) / 16.0;
        let moved: Vec<f64> = dyadic.iter().map(|r| r + shift).collect();
        shift_exact &= grpo::advantages(&moved, &groups, Baseline::GroupMean).unwrap()
            == grpo::advantages(&dyadic, &groups, Baseline::GroupMean).unwrap();
        // leave-one-out divides by G - 1, which rounds
        let loo = grpo::advantages(&dyadic, &groups, Baseline::LeaveOneOut).unwrap();
        for (a, b) in loo.iter().zip(grpo::advantages(&moved, &groups, Baseline::LeaveOneOut).unwrap()) {
            max_loo_shift = max_loo_shift.max((a - b).abs());
        }
        let floats: Vec<f64> = (0..64).map(|_| 3.0 * rng.normal()).collect();
        let adv = grpo::advantages(&floats, &groups, Baseline::GroupMean).unwrap();
        for g in &groups {
            max_float_sum = max_float_sum.max(g.iter().map(|&i| adv[i]).sum::<f64>().abs());
        }
    }
    verdict(
        5,
        "group advantages",
        exact_zero && shift_exact && max_float_sum < 1e-12 && max_loo_shift < 1e-12,
        format!(
            "1000 batches: dyadic sums exactly 0: {exact_zero}; group-mean shift invariance exact: {shift_exact}; leave-one-out shift error {max_loo_shift:.1e}; max |sum| for Gaussian rewards {max_float_sum:.1e}"
        ),
    );
}

#[test]
fn c06_unbiasedness() {
    let mdp = TinyMdp {
        theta: [0.3, -0.2],
        rewards: [0.0, 1.0, 0.5],
    };
    let report =
        grpo::unbiasedness_probe(&mdp, 8, Baseline::GroupMean, 100_000, &mut RngStream::new(6, "acceptance/mdp")).unwrap();
    verdict(
        6,
        "estimator unbiased on the enumerable MDP",
        report.within(3.0),
        format!(
            "exact {:?}, MC mean {:?}, z-scores {:?} at 1e5 samples",
            report.exact, report.mean, report.z_scores
        ),
    );
}

#[test]
fn c07_variance_reduction() {
    let rows = grpo::variance_probe(
        &[2, 4, 8],
        10_000,
        IidRewards { mean: 1.0, std: 1.0 },
        0.0,
        &mut RngStream::new(7, "acceptance/var"),
    )
    .unwrap();
    let decreasing = rows.windows(2).all(|w| w[1].grpo < w[0].grpo);
    let halved = rows[2].grpo <= rows[2].reinforce / 2.0;
    verdict(
        7,
        "variance reduction",
        decreasing && halved,
        format!(
            "GRPO var G=2/4/8: {:.4}/{:.4}/{:.4}, REINFORCE {:.4} (1e4 trials)",
            rows[0].grpo, rows[1].grpo, rows[2].grpo, rows[2].reinforce
        ),
    );
}

#[test]
fn c08_reward_engine() {
    let w = RewardWeights::default();
    let mut checks = Vec::new();
    checks.push(reward::accuracy_reward(42.0, 42.0, &w) == 1.0);
    checks.push(reward::accuracy_reward(100.0, 10.0, &w) == 0.0);
    checks.push(reward::accuracy_reward(9.9, 10.0, &w) == 0.5 * (-(10.0f64 - 9.9).abs() / (10.0 + 1e-8)).exp());
    let stats = FlopsStats {
        mean: 100.0,
        var: 16.0,
        decay: 0.99,
        count: 3,
    };
    checks.push(reward::flops_reward(100, &stats, 1.0) == 0.0);
    checks.push(reward::flops_reward(104, &stats, 1.0) == -4.0 / (4.0 + 1e-8));
    checks.push(reward::flops_reward(7, &FlopsStats::new(0.99), 1.0) == 0.0);
    let markers = [Token::SETUP, Token::COMPUTE, Token::VERIFY, Token::CONCLUDE];
    checks.push(reward::completeness_reward(&markers, &w) == 1.0);
    checks.push(reward::completeness_reward(&[], &w) == 0.0);
    checks.push(reward::completeness_reward(&[Token::SETUP], &w) == 0.25);
    let q = RewardWeights { w_qual: 1.0, ..w.clone() };
    checks.push(reward::quality_reward(8, 1.0, &q).unwrap() == 1.0);
    checks.push(reward::quality_reward(4, 1.0, &q).unwrap() == 0.5);
    checks.push(reward::quality_reward(16, 1.0, &q).unwrap() == 1.0);
    checks.push(reward::antirep_reward(&["a", "b", "c"], [0.1, 0.2, 0.3]) == 0.0);
    checks.push(reward::antirep_reward(&["a", "a", "a", "a"], [0.1, 0.2, 0.3]) == -(0.1 * 3.0 / 4.0 + 0.2 * 2.0 / 4.0 + 0.3 / 4.0));
    checks.push(reward::antirep_reward(&["a"], [0.1, 0.2, 0.3]) == 0.0);
    checks.push(RewardBreakdown::new(0.0, 0.0, 0.0, 0.0, 0.0, &w).total == 0.0);
    checks.push(RewardBreakdown::new(1.0, 0.0, 0.0, 0.0, 0.0, &w).total == 1.0);
    checks.push(RewardBreakdown::new(1.0, -0.5, 0.25, 0.0, 0.0, &w).total == 0.75);
    let mut s = FlopsStats::new(0.99);
    s.observe(100);
    checks.push((s.mean, s.var) == (100.0, 0.0));
    let mut alt = FlopsStats::new(0.99);
    (0..2000).for_each(|i| alt.observe(if i % 2 == 0 { 0 } else { 200 }));
    checks.push((alt.mean - 100.0).abs() <= 5.0);
    checks.push(reward::rebalance(&w, [w.rebalance_target; 5]).outer() == w.outer());
    let fast = RewardWeights { rebalance_rate: 1.0, ..w.clone() };
    let t = fast.rebalance_target;
    checks.push((reward::rebalance(&fast, [t / std::f64::consts::E, t, t, t, t]).w_acc - std::f64::consts::E).abs() < 1e-15);
    checks.push(reward::rebalance(&w, [2.0 * t, t, t, t, t]).w_acc < w.w_acc);
    checks.push(reward::balance_check([0.4; 5], 5.0).unwrap().ok);
    checks.push(!reward::balance_check([1.0, 0.5, 20.0, 1.0, 1.0], 10.0).unwrap().ok);
    let window = reward::balance_check([1.0, 0.05, 0.5, 0.5, 0.5], 10.0).unwrap();
    checks.push(window.violations.iter().any(|v| v.starts_with("flops/acc")));
    let examples = checks.iter().filter(|&&c| c).count();

    // synthetic linear response: each magnitude is a fixed base times its weight
    let mut rng = RngStream::new(8, "acceptance/rebalance");
    let mut worst_steps = 0;
    let mut converged = true;
    for _ in 0..50 {
        let base: Vec<f64> = (0..5).map(|_| (8.0 * rng.uniform() - 4.0).exp()).collect();
        let mags = |w: &RewardWeights| {
            let o = w.outer();
            [0, 1, 2, 3, 4].map(|i| base[i] * o[i])
        };
        let spread = |m: [f64; 5]| {
            let logs = m.map(f64::ln);
            logs.iter().cloned().fold(f64::MIN, f64::max) - logs.iter().cloned().fold(f64::MAX, f64::min)
        };
        let mut weights = RewardWeights::default();
        let reached = (1..=1000).find(|_| {
            weights = reward::rebalance(&weights, mags(&weights));
            spread(mags(&weights)) < weights.balance_ratio.ln()
        });
        match reached {
            Some(k) => worst_steps = worst_steps.max(k),
            None => converged = false,
        }
    }

    // the training monitor reports the window: with no FLOPs pressure the ratio is 0
    let mut config = TrainConfig::default()
        .with_overrides(
            ["steps=3", "batch_size=16", "eval_every=1", "tasks.suite_per_level=4", "tasks.extraction_size=32"],
            None,
        )
        .unwrap();
    config.reward.lambda_flops = 0.0;
    let out = train(&config, None).unwrap();
    let flagged = out
        .events
        .iter()
        .filter(|e| e.kind == "balance" && e.step > 0)
        .all(|e| e.detail["violations"].as_array().unwrap().iter().any(|v| v.as_str().unwrap().starts_with("flops/acc")));
    verdict(
        8,
        "reward engine",
        examples == checks.len() && converged && flagged,
        format!(
            "{examples}/{} component examples exact; rebalancing below ln(rho) within {worst_steps} steps (50 models); monitor flags the FLOPs/accuracy window: {flagged}",
            checks.len()
        ),
    );
}

#[test]
fn c09_curriculum() {
    let c = CurriculumConfig::default();
    let schedule = [c.teacher_probability(0), c.teacher_probability((c.t1 + c.t2) / 2), c.teacher_probability(c.t2)];
    let schedule_ok = schedule == [1.0, 0.5, 0.0];
    let gates_ok = (0..c.t2).all(|t| !c.gates_active(t)) && c.gates_active(c.t2);

    let mut rng = RngStream::new(9, "acceptance/diversity");
    let mut iff = true;
    for _ in 0..2000 {
        let base = 1_000_000 + rng.below(1000);
        let spread = rng.below(3000);
        let flops: Vec<u64> = (0..8).map(|_| base + rng.below(spread + 1)).collect();
        let xs: Vec<f64> = flops.iter().map(|&f| f as f64).collect();
        let mean = xs.iter().sum::<f64>() / 8.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
        let d = curriculum::diversity(&flops, 1e-6).unwrap();
        if ((var / (mean * mean)) - 1e-6).abs() > 1e-12 {
            iff &= d.alert == (var / (mean * mean) < 1e-6);
        }
    }

    let mut config = TrainConfig::default()
        .with_overrides(
            [
                "steps=4",
                "batch_size=16",
                "curriculum.t1=1",
                "curriculum.t2=2",
                "curriculum.diversity_eps=1e9",
                "tasks.suite_per_level=4",
                "tasks.extraction_size=32",
            ],
            None,
        )
        .unwrap();
    let alerted = train(&config, None).unwrap();
    config.curriculum.diversity_eps = 1e-6;
    let quiet = train(&config, None).unwrap();
    let reinit_ok = alerted.state.reinit_count == 4
        && alerted.events.iter().filter(|e| e.kind == "diversity-alert").count() == 4
        && alerted.state.controller != quiet.state.controller
        && quiet.state.reinit_count == 0;

    let run = default_run();
    let t2 = run.config.curriculum.t2;
    let early_rejects: usize = run.outcome.rows.iter().filter(|r| r.step < t2).map(|r| r.gate_rejects).sum();
    verdict(
        9,
        "curriculum",
        schedule_ok && gates_ok && iff && reinit_ok && early_rejects == 0,
        format!(
            "schedule {schedule:?}; gates off before T2: {gates_ok}; alert iff D < 1e-6: {iff}; reinit on alert: {reinit_ok}; gate rejects before T2 in the default run: {early_rejects}"
        ),
    );
}

#[test]
fn c10_efficiency() {
    let run = default_run();
    let r = &run.outcome.report;
    let b = &run.baseline;
    let saving = 1.0 - r.avg_ponder_flops / b.avg_ponder_flops;
    verdict(
        10,
        "accuracy and compute vs fixed K_max",
        r.accuracy >= b.accuracy - 0.02 && saving >= 0.20,
        format!(
            "controller acc {:.3} vs {:.3}; ponder+controller FLOPs {:.0} vs {:.0} ({:.1}% fewer); avg steps {:.2}",
            r.accuracy,
            b.accuracy,
            r.avg_ponder_flops,
            b.avg_ponder_flops,
            100.0 * saving,
            r.avg_steps
        ),
    );
}

#[test]
fn c11_difficulty_calibration() {
    let r = &default_run().outcome.report;
    let steps: Vec<String> = r.per_level.iter().map(|l| format!("{:.2}", l.avg_steps)).collect();
    verdict(
        11,
        "difficulty calibration",
        r.spearman_level_steps >= 0.8,
        format!("Spearman {:.3}; mean steps by level {}", r.spearman_level_steps, steps.join("/")),
    );
}

#[test]
fn c12_frontier_shape() {
    let run = default_run();
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let mut tau = tau_sweep(&run.config, &run.setup, run.outcome.controller(), &grid).unwrap();
    tau.sort_by(|a, b| a.knob.total_cmp(&b.knob));
    let tau_ok = tau.windows(2).all(|w| w[1].avg_steps <= w[0].avg_steps);

    let short = TrainConfig::default()
        .with_overrides(
            ["steps=600", "curriculum.t1=100", "curriculum.t2=300", "controller.anneal_steps=100"],
            None,
        )
        .unwrap();
    let mut lambda = lambda_sweep(&short, &[0.0, 0.5, 1.0, 2.0]).unwrap();
    lambda.sort_by(|a, b| a.knob.total_cmp(&b.knob));
    let lambda_ok = lambda.windows(2).all(|w| w[1].avg_flops <= 1.05 * w[0].avg_flops);
    let show = |rows: &[ponderlab::harness::sweep::FrontierRow]| {
        rows.iter()
            .map(|r| format!("{}:{:.2}", r.knob, r.avg_steps))
            .collect::<Vec<_>>()
            .join(" ")
    };
    verdict(
        12,
        "frontier shape",
        tau_ok && lambda_ok,
        format!(
            "tau sweep steps nonincreasing: {tau_ok} [{}]; lambda sweep FLOPs {} (steps [{}])",
            show(&tau[..tau.len().min(21)]),
            lambda.iter().map(|r| format!("{}:{:.3e}", r.knob, r.avg_flops)).collect::<Vec<_>>().join(" "),
            show(&lambda)
        ),
    );
}

#[test]
fn c13_determinism() {
    let config = TrainConfig::default()
        .with_overrides(
            ["steps=40", "eval_every=10", "curriculum.t1=10", "curriculum.t2=25", "controller.anneal_steps=10"],
            None,
        )
        .unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&config, Some(a.path())).unwrap();
    train(&config, Some(b.path())).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let identical = names
        .iter()
        .filter(|n| std::fs::read(a.path().join(n)).unwrap() == std::fs::read(b.path().join(n)).unwrap())
        .count();
    verdict(
        13,
        "determinism",
        identical == names.len() && names.len() == 8,
        format!("{identical}/{} output files byte-identical across two 40-step runs", names.len()),
    );
}

#[test]
fn c14_parameter_budget() {
    let fresh = Controller::init(64, 1, 1.0).unwrap();
    let run = default_run();
    let counts: Vec<usize> = run
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p).unwrap().state.controller.param_count())
        .collect();
    let applied = run.outcome.rows.iter().filter(|r| r.update == "applied").count();
    let ok = fresh.param_count() == 296_577
        && counts.iter().all(|&c| c == 296_577)
        && run.outcome.controller().param_count() <= 1_000_000;
    verdict(
        14,
        "parameter budget",
        ok,
        format!(
            "{} parameters at init; {} checkpoints all at {}; budget rechecked after each of {applied} updates",
            fresh.param_count(),
            counts.len(),
            counts.iter().max().copied().unwrap_or(0)
        ),
    );
}
