//! End-to-end behavior of the search loop and training orchestration on
//! small synthetic workloads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repfuse_core::blocks::{BranchKind, RepNet};
use repfuse_core::data;
use repfuse_core::fusion;
use repfuse_core::optim::{Adam, Sgd};
use repfuse_core::search::{self, ArchState, SearchConfig};
use repfuse_core::train::{
    self, ArchPreset, DatasetSpec, LrSchedule, TrainConfig,
};

fn tiny_config(epochs: usize, budget: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        init_lr: 0.05,
        weight_decay: 1e-4,
        momentum: 0.9,
        lr_schedule: LrSchedule::Cosine,
        seed,
        budget,
        arch: ArchPreset::Custom {
            blocks: vec![(8, 1), (16, 2)],
        },
        subset_fraction: 1.0,
        dataset: DatasetSpec::Synthetic {
            n: 2048,
            classes: 4,
            noise: 0.1,
            n_test: 256,
        },
        alpha_lr: 1e-4,
        alpha_betas: (0.5, 0.999),
        k: 3,
        augment: false,
        single_path: false,
    }
}

fn search_fixture(seed: u64) -> (RepNet<f32>, ArchState, data::Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = RepNet::build(
        &mut rng,
        3,
        &[(8, 1), (16, 2)],
        3,
        4,
        &BranchKind::ALL,
    )
    .unwrap();
    let arch = ArchState::attach(&mut net, 1.0);
    let ds = data::synthetic_dataset(512, 4, seed);
    (net, arch, ds)
}

#[test]
fn full_budget_training_decreases_loss() {
    let (mut net, mut arch, ds) = search_fixture(1);
    let total = arch.total();
    let config = SearchConfig {
        budget: total,
        ..Default::default()
    };
    let mut sgd = Sgd::new(0.05, 0.9, 1e-4);
    let mut adam = Adam::new(1e-4, 0.5, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let mut first_five = 0.0;
    let mut last_five = 0.0;
    for step in 0..50 {
        let indices: Vec<usize> = (0..32).map(|i| (step * 32 + i) % ds.len()).collect();
        let (images, labels) = ds.gather::<f32>(&indices);
        let metrics = search::search_step(
            &mut net, &mut arch, &config, &mut sgd, &mut adam, images, &labels, &mut rng,
        )
        .unwrap();
        assert_eq!(metrics.active_branches, total, "full budget keeps all");
        if step < 5 {
            first_five += metrics.loss;
        }
        if step >= 45 {
            last_five += metrics.loss;
        }
    }
    assert!(
        last_five < first_five,
        "loss did not decrease: {first_five} -> {last_five}"
    );
}

#[test]
fn protected_only_budget_degenerates_to_single_path() {
    let (mut net, mut arch, ds) = search_fixture(3);
    let protected = arch.protected_count();
    let config = SearchConfig {
        budget: protected,
        ..Default::default()
    };
    let mut sgd = Sgd::new(0.05, 0.9, 0.0);
    let mut adam = Adam::new(1e-4, 0.5, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for step in 0..10 {
        let indices: Vec<usize> = (0..32).map(|i| (step * 32 + i) % ds.len()).collect();
        let (images, labels) = ds.gather::<f32>(&indices);
        let metrics = search::search_step(
            &mut net, &mut arch, &config, &mut sgd, &mut adam, images, &labels, &mut rng,
        )
        .unwrap();
        assert_eq!(metrics.active_branches, protected);
        for (i, entry) in arch.entries.iter().enumerate() {
            assert_eq!(arch.last_z_hard[i], entry.protected);
        }
    }
    // Only protected branches ever forwarded, so only their alphas moved.
    for entry in &arch.entries {
        let alpha = net.store.value(entry.alpha).data()[0];
        if entry.protected {
            assert!(alpha != 0.0, "protected alpha received gradient");
        } else {
            assert_eq!(alpha, 0.0, "pruned branch alpha must stay untouched");
        }
    }
}

#[test]
fn identical_seeds_give_identical_alpha_trajectories() {
    let run = || -> Vec<Vec<f64>> {
        let (mut net, mut arch, ds) = search_fixture(5);
        let config = SearchConfig {
            budget: arch.protected_count() + 4,
            ..Default::default()
        };
        let mut sgd = Sgd::new(0.05, 0.9, 1e-4);
        let mut adam = Adam::new(1e-4, 0.5, 0.999, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut trajectory = Vec::new();
        for step in 0..10 {
            let indices: Vec<usize> = (0..32).map(|i| (step * 32 + i) % ds.len()).collect();
            let (images, labels) = ds.gather::<f32>(&indices);
            search::search_step(
                &mut net, &mut arch, &config, &mut sgd, &mut adam, images, &labels, &mut rng,
            )
            .unwrap();
            trajectory.push(arch.alphas(&net));
        }
        trajectory
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "alpha trajectories diverged across identical runs");
}

#[test]
fn two_epoch_synthetic_training_exceeds_ninety_percent() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(2, usize::MAX, 7);
    let outcome = train::train_supernet(&config, dir.path()).unwrap();
    assert!(
        outcome.final_train_top1 > 0.9,
        "train top1 {} after 2 epochs",
        outcome.final_train_top1
    );
}

#[test]
fn zero_epochs_emits_valid_untouched_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(0, 10, 8);
    let outcome = train::train_supernet(&config, dir.path()).unwrap();
    assert!(outcome.checkpoint.exists());
    assert!(outcome.search_log.exists());
    assert!(outcome.arch_final.exists());

    // The checkpoint loads and evaluates at random-level accuracy.
    let (mut net, desc) = train::load_supernet(&outcome.checkpoint).unwrap();
    let (_, test) = config.load_datasets().unwrap();
    let report =
        train::evaluate_supernet(&mut net, &desc.hard_gates(), &test, 64).unwrap();
    assert!(report.top1 < 0.6, "untrained net suspiciously good");

    // Log contains only the header.
    let log = std::fs::read_to_string(&outcome.search_log).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn budget_is_enforced_every_iteration_across_sweep() {
    for (case, budget) in [(0usize, 2usize), (1, 7), (2, usize::MAX)] {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(1, budget, 100 + case as u64);
        let outcome = train::train_supernet(&config, dir.path()).unwrap();

        // Recover totals from the final architecture.
        let total: usize = outcome
            .final_arch
            .blocks
            .iter()
            .map(|b| b.branches.len())
            .sum();
        let protected = outcome.final_arch.blocks.len();
        let expect = budget.clamp(protected, total);

        let log = std::fs::read_to_string(&outcome.search_log).unwrap();
        let mut rows = 0;
        for line in log.lines().skip(1) {
            let active: usize = line.split(',').nth(4).unwrap().parse().unwrap();
            assert_eq!(active, expect, "active branch count off budget");
            rows += 1;
        }
        assert!(rows > 0);

        // Finalized architecture keeps every protected branch and the
        // total active count equals the budget.
        let gates = outcome.final_arch.hard_gates();
        let active_final: usize = gates.iter().flatten().filter(|&&g| g).count();
        assert_eq!(active_final, expect);
        for (block, desc) in gates.iter().zip(&outcome.final_arch.blocks) {
            let protected_idx = desc
                .branches
                .iter()
                .position(|&k| k == BranchKind::ConvKxK)
                .unwrap();
            assert!(block[protected_idx], "protected branch pruned in finalize");
        }
    }
}

#[test]
fn finalized_branches_have_above_median_keep_rates() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(5, 0, 11);
    // Budget well under half the branches, and a fast-moving alpha so the
    // keep-rate estimator resolves the ranking within five epochs.
    config.budget = 4;
    config.alpha_lr = 0.05;
    let outcome = train::train_supernet(&config, dir.path()).unwrap();

    let rates = &outcome.last_epoch_keep_rate;
    let mut sorted: Vec<f64> = rates.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];

    let gates = outcome.final_arch.hard_gates();
    let flat: Vec<bool> = gates.concat();
    for (i, &kept) in flat.iter().enumerate() {
        if kept {
            assert!(
                rates[i] > median,
                "finalized branch {i} keep rate {} not above median {median}",
                rates[i]
            );
        }
    }
}

#[test]
fn untrained_classifier_is_at_chance_on_balanced_data() {
    // Shuffling the labels severs any feature-label association, so every
    // classifier reduces to random guessing and the binomial bound holds.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut net = RepNet::build(&mut rng, 3, &[(8, 1)], 3, 10, &BranchKind::ALL).unwrap();
    let mut ds = data::synthetic_dataset(10_000, 10, 13);
    for i in (1..ds.labels.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        ds.labels.swap(i, j);
    }
    let gates: Vec<Vec<bool>> = net.blocks.iter().map(|b| vec![true; b.branches.len()]).collect();
    let report = train::evaluate_supernet(&mut net, &gates, &ds, 256).unwrap();
    assert!(
        (report.top1 - 0.1).abs() <= 0.02,
        "random 10-class classifier top1 {}",
        report.top1
    );
}

#[test]
fn memorizing_net_evaluates_to_perfect_accuracy() {
    // Train a small net on 64 easy samples until it memorizes them, then
    // the evaluation pass must report exactly 1.0 on that subset. Running
    // statistics are settled with calibration forwards before each eval,
    // the same way checkpoints are frozen before fusion.
    use repfuse_core::autodiff::{Mode, Tape};
    let (mut net, mut arch, _) = search_fixture(14);
    let ds = data::synthetic_dataset(64, 4, 15);
    let config = SearchConfig {
        budget: usize::MAX,
        ..Default::default()
    };
    let mut sgd = Sgd::new(0.05, 0.9, 0.0);
    let mut adam = Adam::new(1e-4, 0.5, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let gates: Vec<Vec<bool>> = net.blocks.iter().map(|b| vec![true; b.branches.len()]).collect();
    let indices: Vec<usize> = (0..64).collect();
    let mut memorized = false;
    for step in 0..400 {
        let (images, labels) = ds.gather::<f32>(&indices);
        search::search_step(
            &mut net, &mut arch, &config, &mut sgd, &mut adam, images, &labels, &mut rng,
        )
        .unwrap();
        if step % 20 != 19 {
            continue;
        }
        // Calibration: settle BN statistics at the current parameters.
        let signals = net.const_gates(&gates);
        for _ in 0..10 {
            let (images, _) = ds.gather::<f32>(&indices);
            let mut tape = Tape::new();
            net.forward(&mut tape, images, &signals, Mode::Train).unwrap();
        }
        let report = train::evaluate_supernet(&mut net, &gates, &ds, 64).unwrap();
        if report.top1 == 1.0 {
            memorized = true;
            break;
        }
    }
    assert!(memorized, "net failed to memorize 64 separable samples");
    let report = train::evaluate_supernet(&mut net, &gates, &ds, 64).unwrap();
    assert_eq!(report.top1, 1.0);
}

#[test]
fn eval_logits_are_batch_size_independent() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(1, usize::MAX, 17);
    let outcome = train::train_supernet(&config, dir.path()).unwrap();
    let (mut net, desc) = train::load_supernet(&outcome.checkpoint).unwrap();
    let gates = desc.hard_gates();
    let ds = data::synthetic_dataset(128, 4, 18);

    // Sample 0 alone vs inside a 128-batch.
    let (single, _) = ds.gather::<f32>(&[0]);
    let solo = train::supernet_logits(&mut net, &gates, single).unwrap();
    let all_idx: Vec<usize> = (0..128).collect();
    let (batch, _) = ds.gather::<f32>(&all_idx);
    let full = train::supernet_logits(&mut net, &gates, batch).unwrap();
    for j in 0..4 {
        let a = solo.get(0, j, 0, 0);
        let b = full.get(0, j, 0, 0);
        assert!((a - b).abs() <= 1e-6, "logit {j}: {a} vs {b}");
    }
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(1, 8, 19);
    let outcome = train::train_supernet(&config, dir.path()).unwrap();
    let (mut net, desc) = train::load_supernet(&outcome.checkpoint).unwrap();
    let gates = desc.hard_gates();
    let ds = data::synthetic_dataset(64, 4, 20);
    let idx: Vec<usize> = (0..64).collect();
    let (images, _) = ds.gather::<f32>(&idx);
    let logits1 = train::supernet_logits(&mut net, &gates, images.clone()).unwrap();

    // Save again, reload, evaluate again: bitwise identical.
    let path2 = dir.path().join("resaved.bin");
    train::save_supernet(&net, &desc, &path2).unwrap();
    let (mut net2, desc2) = train::load_supernet(&path2).unwrap();
    assert_eq!(desc, desc2);
    let logits2 = train::supernet_logits(&mut net2, &desc2.hard_gates(), images).unwrap();
    for (a, b) in logits1.data().iter().zip(logits2.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn searched_then_fused_preserves_test_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(2, 8, 21);
    config.dataset = DatasetSpec::Synthetic {
        n: 1024,
        classes: 4,
        noise: 0.1,
        n_test: 512,
    };
    let outcome = train::train_supernet(&config, dir.path()).unwrap();
    let (mut net, desc) = train::load_supernet(&outcome.checkpoint).unwrap();
    let gates = desc.hard_gates();
    let fused = fusion::fuse_network(&net, &gates).unwrap();
    let (_, test) = config.load_datasets().unwrap();

    let super_report = train::evaluate_supernet(&mut net, &gates, &test, 128).unwrap();
    let fused_report = train::evaluate_fused(&fused, &test, 128).unwrap();
    assert_eq!(
        super_report.top1, fused_report.top1,
        "fusion changed top-1 ({} vs {})",
        super_report.top1, fused_report.top1
    );

    // Logit-level agreement on a batch.
    let idx: Vec<usize> = (0..128).collect();
    let (images, _) = test.gather::<f32>(&idx);
    let a = train::supernet_logits(&mut net, &gates, images.clone()).unwrap();
    let b = fused.logits(images).unwrap();
    let diff = a.max_abs_diff(&b);
    assert!(diff <= 1e-3, "logit divergence {diff}");
}

#[test]
fn rerun_same_seed_reproduces_arch_json() {
    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let config = tiny_config(1, 7, 22);
    train::train_supernet(&config, dir1.path()).unwrap();
    train::train_supernet(&config, dir2.path()).unwrap();
    let a = std::fs::read_to_string(dir1.path().join("arch_final.json")).unwrap();
    let b = std::fs::read_to_string(dir2.path().join("arch_final.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn divergent_training_aborts_with_diagnostics() {
    // An absurd learning rate must end the run with a diagnostic error,
    // never a silent success. Depending on where the overflow lands first,
    // that is either the non-finite-loss abort (with last lr and batch
    // index) or the batch-norm variance guard.
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(3, usize::MAX, 23);
    config.init_lr = 1e12;
    config.lr_schedule = LrSchedule::Constant;
    let err = train::train_supernet(&config, dir.path()).unwrap_err();
    match err {
        repfuse_core::Error::NanLoss { last_lr, .. } => assert_eq!(last_lr, 1e12),
        repfuse_core::Error::Internal(msg) => {
            assert!(msg.contains("variance"), "unexpected internal error: {msg}")
        }
        other => panic!("expected a divergence diagnostic, got {other}"),
    }
}
