use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::models::BlockSetting;
use crate::synthetic::{label_teacher, noise_teacher, toy_dataset, ToySpec};
use crate::teachers::Teacher;

fn small_dataset(seed: u64) -> Dataset {
    let spec = ToySpec {
        per_class_train: 20,
        per_class_test: 10,
        length: 32,
        noise: 0.5,
        seed,
    };
    toy_dataset(&spec, 0.25).unwrap()
}

fn small_setting() -> StudentSetting {
    StudentSetting::uniform(1, BlockSetting::new(2, 10, 8)).unwrap()
}

fn small_config(seed: u64) -> DistillConfig {
    DistillConfig {
        epochs: 24,
        validation_interval: 3,
        lr_w: 0.05,
        lr_lambda: 0.5,
        batch_size: 8,
        filters: 4,
        seed,
        ..DistillConfig::default()
    }
}

fn corrupted_teachers(ds: &Dataset, seed: u64) -> TeacherDistributions {
    let mut teachers: Vec<Teacher> = (0..4)
        .map(|i| label_teacher(i, ds, 0.8, 0.1, seed * 10 + i as u64))
        .collect();
    teachers.push(noise_teacher(4, ds, seed * 10 + 9));
    TeacherDistributions {
        class_count: ds.class_count,
        teachers,
    }
}

/// Four trained teachers plus one uniform-noise teacher (id 4), with a
/// schedule that lets the student fit before the first weight update.
fn trained_corrupted(seed: u64) -> (Dataset, TeacherDistributions, DistillConfig) {
    let ds = toy_dataset(&ToySpec { seed, ..ToySpec::default() }, 0.25).unwrap();
    let mut tc = crate::teachers::TeacherConfig::new(4, 1, seed).unwrap();
    tc.epochs = 100;
    tc.filters = 4;
    tc.setting = StudentSetting::uniform(1, BlockSetting::new(3, 20, 32)).unwrap();
    let mut t = crate::teachers::train_teacher_ensemble(&ds, &tc).unwrap();
    t.teachers.push(noise_teacher(4, &ds, seed + 1000));
    let c = DistillConfig {
        epochs: 600,
        validation_interval: 60,
        lr_w: 0.1,
        lr_lambda: 0.5,
        batch_size: 8,
        filters: 4,
        seed,
        ..DistillConfig::default()
    };
    (ds, t, c)
}

fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0
}

#[test]
fn aed_loss_examples() {
    let probs = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3]];
    let labels = [0, 2];
    let q1 = vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.2, 0.6]];
    let q2 = vec![vec![0.1, 0.1, 0.8], vec![0.3, 0.3, 0.4]];
    let ce = (-(0.7f64).ln() - (0.3f64).ln()) / 2.0;
    let kl1 = (kl_divergence(&q1[0], &probs[0]) + kl_divergence(&q1[1], &probs[1])) / 2.0;

    let only_ce = aed_loss(&probs, &labels, &[&q1, &q2], &[0.3, 0.7], 1.0).unwrap();
    assert!((only_ce - ce).abs() < 1e-15);

    let single = aed_loss(&probs, &labels, &[&q1], &[1.0], 0.4).unwrap();
    assert!((single - (0.4 * ce + 0.6 * kl1)).abs() < 1e-15);

    let same = aed_loss(&probs, &labels, &[&q1, &q1, &q1], &[1.0 / 3.0; 3], 0.0).unwrap();
    assert!((same - kl1).abs() < 1e-12);
}

#[test]
fn gumbel_low_temperature_concentrates_on_smallest_lambda() {
    let lambda = [0.4, -0.3, 0.9, 0.1];
    let gamma = gumbel_unimportance_with_noise(&lambda, &[0.0; 4], 1e-3).unwrap();
    assert_eq!(argmin(&lambda), 1);
    assert!(gamma[1] >= 0.999);
}

#[test]
fn gumbel_high_temperature_is_flat() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lambda = [0.4, -0.3, 0.9, 0.1];
    let gamma = gumbel_unimportance(&lambda, 1e6, &mut rng).unwrap();
    assert!(gamma.iter().all(|g| (g - 0.25).abs() <= 1e-3));
}

#[test]
fn gumbel_closed_form() {
    let lambda = [0.2, 0.5, 0.3];
    let gs = [0.1, -0.2, 0.0];
    let tau = 0.5;
    let e: Vec<f64> = lambda
        .iter()
        .zip(gs)
        .map(|(l, g): (&f64, f64)| ((-l + g) / tau).exp())
        .collect();
    let z: f64 = e.iter().sum();
    let gamma = gumbel_unimportance_with_noise(&lambda, &gs, tau).unwrap();
    for (a, b) in gamma.iter().zip(&e) {
        assert!((a - b / z).abs() < 1e-15);
    }
    // hand values: exponents -0.2, -1.4, -0.6
    let hand = [(-0.2f64).exp(), (-1.4f64).exp(), (-0.6f64).exp()];
    let hz: f64 = hand.iter().sum();
    assert!((gamma[0] - hand[0] / hz).abs() < 1e-12);
    assert!(gumbel_unimportance_with_noise(&lambda, &gs, 0.0).is_err());
}

#[test]
fn reparam_examples() {
    assert!(reparam_importance(&[1.0 / 3.0; 3])
        .iter()
        .all(|l| (l - 1.0 / 3.0).abs() < 1e-15));
    let l = reparam_importance(&[0.9, 0.05, 0.05]);
    assert_eq!(argmin(&l), 0);
    assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn argmin_lhat_is_argmax_gamma(
        lambda in prop::collection::vec(-3.0f64..3.0, 2..8),
        seed in any::<u64>(),
        tau in 0.05f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = gumbel_unimportance(&lambda, tau, &mut rng).unwrap();
        let lhat = reparam_importance(&gamma);
        let top = gamma.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(argmin(&lhat), top);
    }

    #[test]
    fn removal_choice_ignores_constant_shift(
        lambda in prop::collection::vec(-3.0f64..3.0, 2..8),
        shift in -10.0f64..10.0,
        seed in any::<u64>(),
    ) {
        let gs = gumbel_noise(lambda.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        let shifted: Vec<f64> = lambda.iter().map(|l| l + shift).collect();
        let a = reparam_importance(&gumbel_unimportance_with_noise(&lambda, &gs, 0.5).unwrap());
        let b = reparam_importance(&gumbel_unimportance_with_noise(&shifted, &gs, 0.5).unwrap());
        prop_assert_eq!(argmin(&a), argmin(&b));
    }
}

#[test]
fn interval_beyond_epochs_keeps_uniform_weights() {
    let ds = small_dataset(1);
    let teachers = corrupted_teachers(&ds, 1);
    let mut c = small_config(1);
    c.epochs = 6;
    c.validation_interval = 7;
    let run = aed_train(&ds, &teachers, &small_setting(), &c).unwrap();
    assert_eq!(run.outer_steps, 0);
    assert_eq!(run.raw_lambda, vec![0.2; 5]);
    assert_eq!(run.lambda_hat, vec![0.2; 5]);
}

#[test]
fn bilevel_steps_touch_only_their_own_variables() {
    let ds = small_dataset(2);
    let teachers = corrupted_teachers(&ds, 2);
    let (mut inner, mut outer) = (0, 0);
    let mut observer = |e: &DistillEvent<'_>| match e {
        DistillEvent::Inner {
            lambda_before,
            lambda_after,
            lambda_hat,
            ..
        } => {
            inner += 1;
            assert_eq!(lambda_before, lambda_after);
            assert!(lambda_hat.iter().all(|l| *l >= 0.0));
            assert!((lambda_hat.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        DistillEvent::Outer {
            weights_before,
            weights_after,
            lambda_before,
            lambda_after,
            ..
        } => {
            outer += 1;
            assert_eq!(weights_before, weights_after);
            assert_ne!(lambda_before, lambda_after);
        }
    };
    let c = small_config(2);
    aed_train_observed(&ds, &teachers, &small_setting(), &c, Some(&mut observer)).unwrap();
    assert_eq!(inner, 24);
    assert_eq!(outer, 8);
}

#[test]
fn identical_teachers_stay_near_uniform() {
    let ds = small_dataset(3);
    let t = label_teacher(0, &ds, 0.8, 0.1, 5);
    let teachers = TeacherDistributions {
        class_count: 3,
        teachers: (0..4).map(|id| Teacher { id, ..t.clone() }).collect(),
    };
    let run = aed_train(&ds, &teachers, &small_setting(), &small_config(3)).unwrap();
    let w = crate::autodiff::softmax(&run.raw_lambda);
    assert!(w.iter().all(|x| (x - 0.25).abs() <= 0.05), "{w:?}");
}

#[test]
fn noise_teacher_gets_lowest_weight() {
    let (ds, teachers, c) = trained_corrupted(1);
    let run = aed_train(&ds, &teachers, &small_setting(), &c).unwrap();
    assert_eq!(argmin(&run.raw_lambda), 4, "{:?}", run.raw_lambda);
    assert_eq!(argmin(&run.removal_weights), 4, "{:?}", run.removal_weights);
    let again = aed_train(&ds, &teachers, &small_setting(), &c).unwrap();
    assert_eq!(run.student, again.student);
    assert_eq!(run.raw_lambda, again.raw_lambda);
}

#[test]
fn removal_with_one_teacher_is_a_single_run() {
    let ds = small_dataset(5);
    let teachers = TeacherDistributions {
        class_count: 3,
        teachers: vec![label_teacher(7, &ds, 0.8, 0.1, 1)],
    };
    let out = lightts_removal(&ds, &teachers, &small_setting(), &small_config(5)).unwrap();
    assert_eq!(out.distill_runs(), 1);
    assert!(out.removal_trace.is_empty());
    assert_eq!(out.active_ids, vec![7]);
}

#[test]
fn removal_drops_noise_first_and_runs_n_times() {
    let (ds, teachers, c) = trained_corrupted(3);
    let out = lightts_removal(&ds, &teachers, &small_setting(), &c).unwrap();
    assert_eq!(out.distill_runs(), 5);
    assert_eq!(out.removal_trace.len(), 4);
    assert_eq!(out.removal_trace[0].removed_id, 4);
    assert!(!out.active_ids.contains(&4));
    let mut removed: Vec<usize> = out.removal_trace.iter().map(|s| s.removed_id).collect();
    removed.sort_unstable();
    removed.dedup();
    assert_eq!(removed.len(), 4);
    let best = out.runs.iter().map(|r| r.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(out.val_accuracy, best);
}

#[test]
fn classic_matches_single_teacher_aed() {
    let ds = small_dataset(7);
    let teachers = TeacherDistributions {
        class_count: 3,
        teachers: vec![label_teacher(0, &ds, 0.8, 0.1, 2)],
    };
    let mut c = small_config(7);
    c.validation_interval = c.epochs + 1;
    let aed = aed_train(&ds, &teachers, &small_setting(), &c).unwrap();
    let classic = classic_kd_train(&ds, &teachers, &small_setting(), &c).unwrap();
    assert_eq!(aed.student, classic.student);
    assert_eq!(aed.val_accuracy, classic.val_accuracy);
}

#[test]
fn alpha_one_ignores_teachers() {
    let ds = small_dataset(8);
    let mut c = small_config(8);
    c.alpha = 1.0;
    let a = classic_kd_train(&ds, &corrupted_teachers(&ds, 1), &small_setting(), &c).unwrap();
    let b = classic_kd_train(&ds, &corrupted_teachers(&ds, 2), &small_setting(), &c).unwrap();
    assert_eq!(a.student, b.student);
}

#[test]
fn leave_one_out_counts() {
    let ds = small_dataset(9);
    let two = TeacherDistributions {
        class_count: 3,
        teachers: vec![label_teacher(0, &ds, 0.8, 0.1, 1), label_teacher(1, &ds, 0.7, 0.2, 2)],
    };
    let c = small_config(9);
    let out = leave_one_out_removal(&ds, &two, &small_setting(), &c, 3).unwrap();
    assert_eq!(out.distill_runs(), 3);
    let mut sets: Vec<Vec<usize>> = out.runs.iter().map(|r| r.active_ids.clone()).collect();
    sets.sort();
    assert_eq!(sets, vec![vec![0], vec![0, 1], vec![1]]);
    assert!(leave_one_out_removal(&ds, &two, &small_setting(), &c, 2).is_err());
}

#[test]
fn leave_one_out_stops_without_improvement() {
    // identical teachers: every removal gives the same student, so nothing improves
    let ds = small_dataset(10);
    let t = label_teacher(0, &ds, 0.8, 0.1, 5);
    let teachers = TeacherDistributions {
        class_count: 3,
        teachers: (0..3).map(|id| Teacher { id, ..t.clone() }).collect(),
    };
    let mut c = small_config(10);
    c.validation_interval = c.epochs + 1;
    let out = leave_one_out_removal(&ds, &teachers, &small_setting(), &c, 100).unwrap();
    assert_eq!(out.distill_runs(), 4);
}

#[test]
fn leave_one_out_excludes_noise_teacher() {
    let (ds, teachers, c) = trained_corrupted(3);
    let loo = leave_one_out_removal(&ds, &teachers, &small_setting(), &c, 40).unwrap();
    let guided = lightts_removal(&ds, &teachers, &small_setting(), &c).unwrap();
    assert!(loo.distill_runs() >= guided.distill_runs());
    assert!(!loo.active_ids.contains(&4) || loo.val_accuracy >= guided.val_accuracy);
}

#[test]
fn invalid_config_is_rejected() {
    let ds = small_dataset(1);
    let teachers = corrupted_teachers(&ds, 1);
    for bad in [
        DistillConfig { alpha: 1.5, ..small_config(1) },
        DistillConfig { tau: 0.0, ..small_config(1) },
        DistillConfig { validation_interval: 0, ..small_config(1) },
    ] {
        assert!(aed_train(&ds, &teachers, &small_setting(), &bad).is_err());
    }
}

#[test]
fn outer_step_lowers_weight_of_most_distant_teacher() {
    let mut lambda = Tensor::full(&[3], 1.0 / 3.0);
    let mut opt = Optimizer::sgd(0.1);
    let before = lambda.data().to_vec();
    outer_step(&mut lambda, &mut opt, 0.7, &[0.2, 1.5, 0.3], &[0.0; 3], 0.5, 0.5).unwrap();
    let after = lambda.data();
    assert!(after[1] < before[1], "{after:?}");
    assert!(after[0] > before[0] && after[2] > before[2], "{after:?}");
}
