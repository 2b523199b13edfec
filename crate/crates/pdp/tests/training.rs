//! Training-flow behavior: allocation, ramp arithmetic, warm-up purity,
//! terminal sparsity, divergence handling, and the warm-up heuristic.

use pdp::harness::{synthetic_task, Dataset, Model, ModelSpec};
use pdp::mask::PruneMode;
use pdp::schedule::{
    allocate_per_layer, read_allocation, train_with_pdp, warmup_heuristic, write_allocation,
    AllocationSource, Method, OptimizerConfig, ScheduleError, SparsitySchedule, TrainConfig,
};
use pdp::tensor::LrSchedule;

fn small_task(seed: u64) -> (Dataset, Dataset) {
    let data = synthetic_task(seed, 600, 16, 4, 0.35);
    data.split_at(480)
}

fn base_config(r: f64, warmup: usize, eps: f64, total: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        schedule: SparsitySchedule::new(r, warmup, eps, total).unwrap(),
        allocation: AllocationSource::GlobalMagnitude,
        modes: vec![PruneMode::Unstructured; 2],
        optimizer: OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Constant,
        },
        tau: 1e-4,
        seed,
        batch_size: 64,
        method: Method::Pdp,
        snapshot_epoch: None,
    }
}

#[test]
fn allocation_example_two_layers() {
    // bottom-3 of {0.9, 0.1} ∪ {0.5, 0.2, 0.05, 0.8} is {0.05, 0.1, 0.2}
    let l0 = [0.9, 0.1];
    let l1 = [0.5, 0.2, 0.05, 0.8];
    let r = allocate_per_layer(&[&l0, &l1], 0.5).unwrap();
    assert_eq!(r, vec![0.5, 0.5]);
}

#[test]
fn allocation_zero_ratio_gives_zeros() {
    let l0 = [0.9, 0.1];
    let l1 = [0.5, 0.2];
    assert_eq!(allocate_per_layer(&[&l0, &l1], 0.0).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn allocation_matches_global_full_sort_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let n0 = rng.gen_range(50..400);
        let n1 = rng.gen_range(50..400);
        let l0: Vec<f64> = (0..n0).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l1: Vec<f64> = (0..n1).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ratio: f64 = rng.gen_range(0.0..0.99);
        let got = allocate_per_layer(&[&l0, &l1], ratio).unwrap();
        // oracle: full sort of all magnitudes with provenance
        let mut all: Vec<(f64, usize)> = l0
            .iter()
            .map(|w| (w.abs(), 0))
            .chain(l1.iter().map(|w| (w.abs(), 1)))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let k = (ratio * (n0 + n1) as f64).round() as usize;
        let c0 = all[..k].iter().filter(|&&(_, l)| l == 0).count();
        let c1 = k - c0;
        let expect = vec![c0 as f64 / n0 as f64, c1 as f64 / n1 as f64];
        assert_eq!(got, expect, "trial {trial}");
    }
}

#[test]
fn ramp_arithmetic_matches_schedule() {
    let s = SparsitySchedule::new(0.9, 16, 0.015, 120).unwrap();
    assert!((s.ramp_scale(50) - 0.51).abs() < 1e-12);
    assert_eq!(s.ramp_scale(10), 0.0);
    assert_eq!(s.ramp_scale(16), 0.0);
    assert_eq!(s.full_ramp_epoch(), 16 + 67);
    assert_eq!(s.ramp_scale(16 + 67), 1.0);
}

#[test]
fn schedule_validates_inputs() {
    assert!(SparsitySchedule::new(1.0, 0, 0.1, 10).is_err());
    assert!(SparsitySchedule::new(0.5, 0, 0.0, 10).is_err());
    assert!(SparsitySchedule::new(0.5, 11, 0.1, 10).is_err());
    assert!(SparsitySchedule::new(0.5, 10, 0.1, 10).is_ok());
}

#[test]
fn warmup_heuristic_examples() {
    let acc = [0.1, 0.3, 0.55, 0.6, 0.62, 0.61, 0.63, 0.64];
    assert_eq!(warmup_heuristic(&acc, 1.0, 0), Some(7));
    let low = [0.1, 0.2, 0.3, 0.4, 0.45, 0.49, 0.5];
    assert_eq!(warmup_heuristic(&low, 1.0, 0), None);
    // short history
    assert_eq!(warmup_heuristic(&[0.9, 0.9], 1.0, 0), None);
    // skipping LR warm-up epochs shifts the window start
    let spiky = [0.9, 0.2, 0.6, 0.6, 0.6, 0.6, 0.6];
    assert_eq!(warmup_heuristic(&spiky, 1.0, 1), Some(7));
}

#[test]
fn degenerate_schedule_is_pure_dense() {
    let (train, val) = small_task(1);
    let spec = ModelSpec::tiny_mlp(16, 12, 4, 1);
    let mut model = Model::init(spec);
    let cfg = base_config(0.0, 6, 0.25, 6, 1);
    let out = train_with_pdp(&mut model, &train, &val, &cfg).unwrap();
    assert_eq!(out.metrics.final_global_sparsity, 0.0);
    assert!(out.final_masks.iter().all(|m| m.data().iter().all(|&v| v == 1.0)));
    // dense training actually learns this separable task
    assert!(out.metrics.epochs.last().unwrap().train_accuracy > 0.9);
}

#[test]
fn warmup_epochs_are_bit_identical_to_dense() {
    let (train, val) = small_task(2);
    let warmup = 3;

    // dense reference: never prunes, snapshot after `warmup` epochs
    let spec = ModelSpec::tiny_mlp(16, 12, 4, 9);
    let mut dense_model = Model::init(spec.clone());
    let mut dense_cfg = base_config(0.0, 6, 0.25, 6, 5);
    dense_cfg.snapshot_epoch = Some(warmup);
    let dense = train_with_pdp(&mut dense_model, &train, &val, &dense_cfg).unwrap();

    // pruned run with the same seed, warm-up of the same length
    let mut pdp_model = Model::init(spec);
    let mut pdp_cfg = base_config(0.8, warmup, 0.25, 6, 5);
    pdp_cfg.snapshot_epoch = Some(warmup);
    let pruned = train_with_pdp(&mut pdp_model, &train, &val, &pdp_cfg).unwrap();

    let a = dense.snapshot.unwrap();
    let b = pruned.snapshot.unwrap();
    for (x, y) in a.iter().zip(&b) {
        let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

#[test]
fn dense_reproducibility_same_seed() {
    let (train, val) = small_task(3);
    let spec = ModelSpec::tiny_mlp(16, 12, 4, 11);
    let cfg = base_config(0.0, 8, 0.25, 8, 13);
    let mut m1 = Model::init(spec.clone());
    let r1 = train_with_pdp(&mut m1, &train, &val, &cfg).unwrap();
    let mut m2 = Model::init(spec);
    let r2 = train_with_pdp(&mut m2, &train, &val, &cfg).unwrap();
    for (x, y) in m1.weights.iter().zip(&m2.weights) {
        assert_eq!(x.data(), y.data());
    }
    assert_eq!(
        r1.metrics.epochs.last().unwrap().val_accuracy,
        r2.metrics.epochs.last().unwrap().val_accuracy
    );
}

#[test]
fn terminal_sparsity_matches_allocation() {
    let (train, val) = small_task(4);
    let spec = ModelSpec::tiny_mlp(16, 12, 4, 17);
    let mut model = Model::init(spec);
    // ramp completes by epoch 2 + 4
    let cfg = base_config(0.5, 2, 0.25, 10, 19);
    let out = train_with_pdp(&mut model, &train, &val, &cfg).unwrap();
    let n_total: usize = model.weights.iter().map(|w| w.len()).sum();
    let zeros: usize = model
        .weights
        .iter()
        .map(|w| w.data().iter().filter(|&&v| v == 0.0).count())
        .sum();
    let target = (0.5 * n_total as f64).round() as usize;
    let layers = model.weights.len();
    assert!(
        zeros.abs_diff(target) <= layers,
        "zeros={zeros} target={target} (±{layers})"
    );
    assert!((out.metrics.final_global_sparsity - 0.5).abs() < layers as f64 / n_total as f64 + 1e-9);
}

#[test]
fn monotone_ramp_of_effective_ratio() {
    let (train, val) = small_task(5);
    let spec = ModelSpec::tiny_mlp(16, 12, 4, 23);
    let mut model = Model::init(spec);
    let cfg = base_config(0.6, 2, 0.2, 9, 29);
    let out = train_with_pdp(&mut model, &train, &val, &cfg).unwrap();
    let ratios: Vec<f64> = out.metrics.epochs.iter().map(|e| e.effective_ratio).collect();
    for w in ratios.windows(2) {
        assert!(w[1] >= w[0] - 1e-12, "ramp decreased: {ratios:?}");
    }
    assert!((ratios.last().unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn manual_allocation_is_used_verbatim() {
    let (train, val) = small_task(6);
    let spec = ModelSpec::tiny_mlp(16, 12, 4, 31);
    let mut model = Model::init(spec);
    let mut cfg = base_config(0.5, 1, 0.5, 6, 37);
    cfg.allocation = AllocationSource::Manual(vec![0.25, 0.75]);
    let out = train_with_pdp(&mut model, &train, &val, &cfg).unwrap();
    assert_eq!(out.per_layer_ratios, vec![0.25, 0.75]);
}

#[test]
fn allocation_file_round_trip_drives_training() {
    let dir = std::env::temp_dir().join("pdp_alloc_file");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("alloc.txt");
    let names = vec!["linear0".to_string(), "linear2".to_string()];
    write_allocation(&path, &names, &[0.4, 0.6]).unwrap();
    let parsed = read_allocation(&path).unwrap();
    assert_eq!(parsed, vec![("linear0".to_string(), 0.4), ("linear2".to_string(), 0.6)]);

    let (train, val) = small_task(7);
    let spec = ModelSpec::tiny_mlp(16, 12, 4, 41);
    let mut model = Model::init(spec);
    let mut cfg = base_config(0.5, 1, 0.5, 6, 43);
    cfg.allocation = AllocationSource::FromFile(path);
    let out = train_with_pdp(&mut model, &train, &val, &cfg).unwrap();
    assert_eq!(out.per_layer_ratios, vec![0.4, 0.6]);
}

#[test]
fn allocation_file_rejects_garbage() {
    let dir = std::env::temp_dir().join("pdp_alloc_bad");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("bad.txt");
    std::fs::write(&path, "linear0 not_a_number\n").unwrap();
    assert!(matches!(read_allocation(&path), Err(ScheduleError::Parse(_))));
    std::fs::write(&path, "linear0 1.5\n").unwrap();
    assert!(matches!(read_allocation(&path), Err(ScheduleError::Parse(_))));
}

#[test]
fn divergence_aborts_with_diagnostics() {
    let (train, val) = small_task(8);
    let spec = ModelSpec::tiny_mlp(16, 12, 4, 47);
    let mut model = Model::init(spec);
    let mut cfg = base_config(0.5, 1, 0.5, 6, 53);
    cfg.optimizer.lr = 1e30;
    let err = train_with_pdp(&mut model, &train, &val, &cfg).unwrap_err();
    match err {
        ScheduleError::Diverged { diagnostics, .. } => {
            assert!(diagnostics.contains("loss"));
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn nm_training_satisfies_group_constraint() {
    let (train, val) = small_task(9);
    let spec = ModelSpec::tiny_mlp(16, 12, 4, 59);
    let mut model = Model::init(spec);
    let mut cfg = base_config(0.5, 1, 0.5, 6, 61);
    cfg.modes = vec![PruneMode::Nm { n: 2, m: 4 }; 2];
    let out = train_with_pdp(&mut model, &train, &val, &cfg).unwrap();
    for mask in &out.final_masks {
        for group in mask.data().chunks(4) {
            if group.len() == 4 {
                assert_eq!(group.iter().filter(|&&m| m != 0.0).count(), 2);
            }
        }
    }
}

#[test]
fn channel_training_prunes_whole_channels() {
    let (train, val) = small_task(10);
    let spec = ModelSpec::tiny_mlp(16, 12, 4, 67);
    let mut model = Model::init(spec);
    let mut cfg = base_config(0.5, 1, 0.5, 8, 71);
    cfg.modes = vec![PruneMode::Channel, PruneMode::Unstructured];
    let out = train_with_pdp(&mut model, &train, &val, &cfg).unwrap();
    // first layer: 12 rows of 16; half the rows must be all-zero
    let mask = &out.final_masks[0];
    let zero_rows = mask
        .data()
        .chunks(16)
        .filter(|row| row.iter().all(|&m| m == 0.0))
        .count();
    let full_rows = mask
        .data()
        .chunks(16)
        .filter(|row| row.iter().all(|&m| m == 1.0))
        .count();
    assert_eq!(zero_rows + full_rows, 12);
    assert_eq!(zero_rows, 6);
}

#[test]
fn baseline_shares_schedule_and_reaches_target() {
    let (train, val) = small_task(11);
    let spec = ModelSpec::tiny_mlp(16, 12, 4, 73);
    let mut model = Model::init(spec);
    let mut cfg = base_config(0.5, 2, 0.25, 10, 79);
    cfg.method = Method::HardBaseline;
    let out = train_with_pdp(&mut model, &train, &val, &cfg).unwrap();
    let n_total: usize = model.weights.iter().map(|w| w.len()).sum();
    let target = (0.5 * n_total as f64).round() as usize;
    let zeros: usize = model
        .weights
        .iter()
        .map(|w| w.data().iter().filter(|&&v| v == 0.0).count())
        .sum();
    assert!(zeros.abs_diff(target) <= model.weights.len());
    assert!(out.metrics.epochs.last().unwrap().train_accuracy > 0.5);
}
