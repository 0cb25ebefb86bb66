use proptest::prelude::*;

mod common;

use common::{central, close, directional, random_controller, random_state};
use ponderlab::backbone::AnswerDistribution;
use ponderlab::controller::{Activation, Controller, Weights, HIDDEN};
use ponderlab::grpo::{self, Baseline, GrpoConfig, IidRewards, Sample, TinyMdp};
use ponderlab::numerics::{RngStream, Vector};
use ponderlab::ponder::{Source, StepRecord, Trajectory};

fn trajectory(states: Vec<Vector>, actions: &[u8], source: Source) -> Trajectory {
    let steps: Vec<StepRecord> = states
        .into_iter()
        .zip(actions)
        .map(|(z, &action)| StepRecord {
            z,
            p: 0.5,
            action,
            source,
            forced: false,
        })
        .collect();
    let halted_at = actions.iter().filter(|&&a| a == 1).count();
    Trajectory {
        steps,
        halted_at,
        prompt_len: 5,
        flops: 0,
        output: AnswerDistribution {
            probs: vec![1.0],
            value: 0.0,
            tokens: Vec::new(),
        },
        rewards: None,
    }
}

/// A random rollout of one or two recorded steps.
fn random_trajectory(rng: &mut RngStream, dim: usize) -> Trajectory {
    let actions: &[u8] = match rng.below(3) {
        0 => &[0],
        1 => &[1, 0],
        _ => &[1, 1],
    };
    let states = actions.iter().map(|_| random_state(rng, dim)).collect();
    trajectory(states, actions, Source::Student)
}

fn samples<'a>(ts: &'a [Trajectory], advantages: &[f64]) -> Vec<Sample<'a>> {
    ts.iter()
        .zip(advantages)
        .map(|(t, &advantage)| Sample {
            trajectory: t,
            advantage,
            masked: false,
        })
        .collect()
}

#[test]
fn assembled_gradient_matches_central_differences_on_micro_batches() {
    let dim = 12;
    let h = 1e-5;
    let config = GrpoConfig::default();
    for case in 0..10u64 {
        let c = random_controller(100 + case, dim, [Activation::Gelu, Activation::Relu], 0.8);
        let mut rng = RngStream::new(case, "micro");
        let ts = [random_trajectory(&mut rng, dim), random_trajectory(&mut rng, dim)];
        let adv = [rng.normal(), rng.normal()];
        let batch = samples(&ts, &adv);
        let assembled = grpo::assemble_gradient(&c, &batch, &config).unwrap();
        let loss = |p: &Controller| grpo::objective(p, &batch, &config).unwrap();
        assert!((assembled.objective - loss(&c)).abs() < 1e-12);
        let grad = assembled.grad.to_flat();
        let n = grad.len();
        let mut coords: Vec<usize> = (0..2 * dim).collect();
        coords.extend(n - HIDDEN - 1..n);
        coords.extend((0..60).map(|_| rng.below(n as u64) as usize));
        for &i in &coords {
            let numeric = central(&c, i, h, loss);
            assert!(close(grad[i], numeric), "case {case} coord {i}: {} vs {numeric}", grad[i]);
        }
        for _ in 0..3 {
            let (analytic, numeric) = directional(&c, &grad, h, &mut rng, loss);
            assert!(close(analytic, numeric), "case {case}: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn zero_advantages_without_entropy_give_a_zero_gradient() {
    let c = random_controller(1, 8, [Activation::Gelu; 2], 1.0);
    let mut rng = RngStream::new(1, "zero");
    let ts: Vec<Trajectory> = (0..4).map(|_| random_trajectory(&mut rng, 8)).collect();
    let config = GrpoConfig {
        entropy_coef: 0.0,
        ..Default::default()
    };
    let out = grpo::assemble_gradient(&c, &samples(&ts, &[0.0; 4]), &config).unwrap();
    assert_eq!(out.grad, Weights::zeros(8));
    assert_eq!(out.objective, 0.0);
}

#[test]
fn single_step_equals_the_controller_score() {
    let c = random_controller(2, 8, [Activation::Gelu; 2], 0.7);
    let z = random_state(&mut RngStream::new(2, "z"), 8);
    let config = GrpoConfig {
        entropy_coef: 0.0,
        ..Default::default()
    };
    for action in [0u8, 1] {
        let t = [trajectory(vec![z.clone()], &[action], Source::Student)];
        let out = grpo::assemble_gradient(&c, &samples(&t, &[1.0]), &config).unwrap();
        let expected = c.logprob_and_grad(&z, action).unwrap();
        let (a, b) = (out.grad.to_flat(), expected.grad.to_flat());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs())));
        assert!((out.objective - expected.logprob).abs() < 1e-12);
    }
}

#[test]
fn masked_forced_and_excluded_teacher_steps_contribute_nothing() {
    let c = random_controller(3, 8, [Activation::Relu; 2], 1.0);
    let mut rng = RngStream::new(3, "mask");
    let kept = random_trajectory(&mut rng, 8);
    let other = random_trajectory(&mut rng, 8);
    let config = GrpoConfig::default();
    let alone = grpo::assemble_gradient(&c, &samples(std::slice::from_ref(&kept), &[0.7]), &config).unwrap();

    let pair = [kept.clone(), other.clone()];
    let mut batch = samples(&pair, &[0.7, -2.0]);
    batch[1].masked = true;
    let with_mask = grpo::assemble_gradient(&c, &batch, &config).unwrap();
    assert_eq!(with_mask.grad, alone.grad);

    let mut forced = other.clone();
    forced.steps.iter_mut().for_each(|s| s.forced = true);
    let out = grpo::assemble_gradient(&c, &samples(&[kept.clone(), forced], &[0.7, -2.0]), &config).unwrap();
    assert_eq!(out.grad, alone.grad);
    assert_eq!(out.steps_used, kept.steps.len());

    let mut taught = other.clone();
    taught.steps.iter_mut().for_each(|s| s.source = Source::Teacher);
    let exclude = GrpoConfig {
        include_teacher: false,
        ..Default::default()
    };
    let out = grpo::assemble_gradient(&c, &samples(&[kept.clone(), taught.clone()], &[0.7, -2.0]), &exclude).unwrap();
    assert_eq!(out.grad, alone.grad);
    let out = grpo::assemble_gradient(&c, &samples(&[kept, taught], &[0.7, -2.0]), &config).unwrap();
    assert_ne!(out.grad, alone.grad);
}

#[test]
fn missing_step_records_are_rejected() {
    let c = Controller::init(8, 0, 1.0).unwrap();
    let mut t = random_trajectory(&mut RngStream::new(4, "t"), 8);
    t.halted_at = 5;
    assert!(grpo::assemble_gradient(&c, &samples(&[t], &[1.0]), &GrpoConfig::default()).is_err());
}

#[test]
fn update_moves_a_two_parameter_slice_by_lr_times_grad() {
    let mut c = Controller::init(4, 7, 1.0).unwrap();
    let before = c.weights().clone();
    let mut g = Weights::zeros(4);
    g.b_out = 0.3;
    g.ln_bias[1] = -0.8;
    grpo::apply_update(&mut c, &g, 0.5).unwrap();
    assert_eq!(c.weights().b_out, before.b_out + 0.15);
    assert_eq!(c.weights().ln_bias[1], before.ln_bias[1] - 0.4);
    assert_eq!(c.weights().w1, before.w1);
    assert_eq!(c.param_count(), before.param_count());
}

#[test]
fn tiny_mdp_estimator_is_unbiased() {
    let mdp = TinyMdp {
        theta: [0.3, -0.2],
        rewards: [0.0, 1.0, 0.5],
    };
    for (seed, baseline) in [(1, Baseline::GroupMean), (2, Baseline::LeaveOneOut)] {
        let report = grpo::unbiasedness_probe(&mdp, 8, baseline, 100_000, &mut RngStream::new(seed, "mdp")).unwrap();
        assert!(report.within(3.0), "{baseline:?}: {:?}", report.z_scores);
        assert!(report.std_err.iter().all(|&s| s > 0.0));
    }
}

#[test]
fn enumerated_gradient_by_hand() {
    let mdp = TinyMdp {
        theta: [0.0, 0.0],
        rewards: [1.0, 0.0, 1.0],
    };
    let probs = mdp.outcome_probs();
    assert_eq!(probs, [0.5, 0.25, 0.25]);
    // d/dtheta0: 0.5*1*(-0.5) + 0.25*1*(0.5+0.5) = 0; d/dtheta1: 0.25*(0.5) = 0.125
    let exact = mdp.exact_gradient();
    assert!(exact[0].abs() < 1e-15);
    assert!((exact[1] - 0.125).abs() < 1e-15);
    let flat = TinyMdp {
        theta: [0.0, 0.0],
        rewards: [0.7; 3],
    };
    assert_eq!(flat.exact_gradient(), [0.0, 0.0]);
    let report = grpo::unbiasedness_probe(&mdp, 4, Baseline::GroupMean, 100_000, &mut RngStream::new(3, "sym")).unwrap();
    assert!(report.within(3.0), "{:?}", report.z_scores);
    let report = grpo::unbiasedness_probe(&flat, 4, Baseline::GroupMean, 1000, &mut RngStream::new(3, "flat")).unwrap();
    assert_eq!(report.mean, vec![0.0, 0.0]);
    assert!(report.within(0.0));
}

#[test]
fn grouping_reduces_variance() {
    let rows = grpo::variance_probe(
        &[2, 4, 8],
        10_000,
        IidRewards { mean: 1.0, std: 1.0 },
        0.0,
        &mut RngStream::new(4, "var"),
    )
    .unwrap();
    assert!(rows[0].grpo > rows[1].grpo && rows[1].grpo > rows[2].grpo);
    assert!(rows[2].grpo <= rows[2].reinforce / 2.0);
    // with p = 1/2 and i.i.d. N(1, 1) rewards, REINFORCE variance is E[r^2] E[s^2] = 2 * 1/4
    assert!((rows[2].reinforce - 0.5).abs() < 0.05);
}

#[test]
fn constant_rewards_have_no_grpo_variance() {
    let rows = grpo::variance_probe(
        &[2, 8],
        2000,
        IidRewards { mean: 0.0, std: 0.0 },
        0.4,
        &mut RngStream::new(5, "flat"),
    )
    .unwrap();
    for row in rows {
        assert!(row.grpo.abs() < 1e-20);
        assert!(row.reinforce.abs() < 1e-20);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn group_mean_advantages_sum_to_zero_per_group(
        rewards in proptest::collection::vec(-100.0f64..100.0, 16),
        seed in 0u64..1000,
        shift in -1e3f64..1e3,
    ) {
        let groups = grpo::partition(16, 4, &mut RngStream::new(seed, "groups")).unwrap();
        let adv = grpo::advantages(&rewards, &groups, Baseline::GroupMean).unwrap();
        for g in &groups {
            let sum: f64 = g.iter().map(|&i| adv[i]).sum();
            let scale: f64 = g.iter().map(|&i| rewards[i].abs()).sum::<f64>() + 1.0;
            prop_assert!(sum.abs() <= 1e-13 * scale);
        }
        for baseline in [Baseline::GroupMean, Baseline::LeaveOneOut] {
            let base = grpo::advantages(&rewards, &groups, baseline).unwrap();
            let moved: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
            let shifted = grpo::advantages(&moved, &groups, baseline).unwrap();
            for (a, b) in base.iter().zip(&shifted) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn dyadic_rewards_give_exact_zero_sums_and_shift_invariance(
        ints in proptest::collection::vec(-64i32..64, 8),
        shift in -64i32..64,
    ) {
        // rewards and shifts on a coarse dyadic grid make every sum exact
        let rewards: Vec<f64> = ints.iter().map(|&k| k as f64 / 8.0).collect();
        let groups = vec![(0..8).collect::<Vec<_>>()];
        let adv = grpo::advantages(&rewards, &groups, Baseline::GroupMean).unwrap();
        prop_assert_eq!(adv.iter().sum::<f64>(), 0.0);
        let moved: Vec<f64> = rewards.iter().map(|r| r + shift as f64 / 8.0).collect();
        prop_assert_eq!(grpo::advantages(&moved, &groups, Baseline::GroupMean).unwrap(), adv);
    }

    #[test]
    fn partitions_cover_every_index_once(batch_groups in 1usize..9, g in 2usize..9, seed in 0u64..500) {
        let groups = grpo::partition(batch_groups * g, g, &mut RngStream::new(seed, "p")).unwrap();
        let mut all: Vec<usize> = groups.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..batch_groups * g).collect::<Vec<_>>());
        prop_assert!(groups.iter().all(|grp| grp.len() == g));
    }
}
