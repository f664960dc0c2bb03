use lts_core::didl::*;
use lts_core::hist::{build_pool, InstancePool, LabeledInstance, INSTANCE_LEN, NUM_BINS};
use lts_core::nn::gradcheck::{gradcheck, GradcheckOptions};
use lts_core::nn::{Adam, Parameterized};
use lts_core::videoio::{generate_synthetic, FrameSequence, Label, SyntheticSceneSpec, Frame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random sparse histograms, three per instance, each of unit mass.
fn random_instance<R: Rng>(rng: &mut R, label: Label) -> LabeledInstance {
    let mut m = vec![0f32; INSTANCE_LEN];
    for c in 0..3 {
        for _ in 0..10 {
            let b = rng.random_range(100..140);
            m[c * NUM_BINS + b] += 0.1;
        }
    }
    LabeledInstance::new(0, 0, 0, label, m).unwrap()
}

fn random_pool(n: usize, seed: u64) -> InstancePool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = [Label::Background, Label::Foreground, Label::Other];
    InstancePool::from_instances(
        (0..n)
            .map(|_| {
                let l = labels[rng.random_range(0..3)];
                random_instance(&mut rng, l)
            })
            .collect(),
    )
}

fn scene_pool() -> InstancePool {
    let spec = SyntheticSceneSpec::moving_square(24, 24, 20, 6, 0.02, 3);
    let (seq, masks) = generate_synthetic(&spec).unwrap();
    let gt: Vec<(usize, _)> = masks.into_iter().enumerate().collect();
    build_pool(&seq, &gt, 5).unwrap()
}

#[test]
fn tiny_model_end_to_end_gradients() {
    let pool = random_pool(5, 1);
    let batch: Vec<&[f32]> = pool.instances().iter().map(|i| i.masses()).collect();
    let targets: Vec<usize> = pool.instances().iter().map(|i| i.label.class_index()).collect();
    let mut model = DidlModel::<f64>::build(DidlArch::tiny(), 2);
    let report = gradcheck(
        &mut model,
        |m: &mut DidlModel<f64>| m.loss_and_backward(&batch, &targets).unwrap(),
        |m: &DidlModel<f64>| {
            let lp = m.forward(&batch).unwrap();
            lts_core::nn::nll_loss(&lp, &targets).unwrap()
        },
        GradcheckOptions { max_entries: 40, ..Default::default() },
    );
    assert!(report.entries.len() > 200);
    assert!(report.passes(1e-4), "{:?}", report.worst());
}

#[test]
fn outputs_are_normalized_and_batch_independent() {
    let pool = random_pool(40, 2);
    let model = DidlModel::<f64>::build_default(3);
    let batch: Vec<&[f32]> = pool.instances().iter().map(|i| i.masses()).collect();
    let lp = model.forward(&batch).unwrap();
    for row in lp.data().chunks(3) {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!(lse.abs() < 1e-5);
    }
    let reversed: Vec<&[f32]> = batch.iter().rev().copied().collect();
    let lr = model.forward(&reversed).unwrap();
    for (i, row) in lp.data().chunks(3).enumerate() {
        let other = &lr.data()[(39 - i) * 3..(40 - i) * 3];
        for (a, b) in row.iter().zip(other) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(model.forward(&[]).is_err());
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let pool = random_pool(20, 4);
    let mut model = DidlModel::<f64>::build(DidlArch::tiny(), 0);
    let before = model.clone();
    let mut opt = Adam::new(1e-3);
    let idx: Vec<usize> = (0..20).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let losses = train_epochs(&mut model, &mut opt, &pool, &idx, 0, &TrainConfig::default(), &mut rng).unwrap();
    assert!(losses.is_empty());
    assert_eq!(model, before);
    assert!(train_epochs(&mut model, &mut opt, &pool, &[], 1, &TrainConfig::default(), &mut rng).is_err());
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let pool = scene_pool();
    let idx: Vec<usize> = (0..pool.len()).collect();
    let cfg = TrainConfig { learning_rate: 1e-3, batch_size: 256 };
    let run = || {
        let mut model = DidlModel::<f64>::build(DidlArch::tiny(), 7);
        let mut opt = Adam::new(cfg.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        train_epochs(&mut model, &mut opt, &pool, &idx, 15, &cfg, &mut rng).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!(a.last().unwrap() < &a[0], "{a:?}");
}

#[test]
fn untrained_accuracy_on_random_labels_is_near_chance() {
    let pool = random_pool(10_000, 5);
    let model = DidlModel::<f32>::build_default(1);
    let (acc, defects) = validate_and_collect_defects(&model, &pool).unwrap();
    assert!((acc - 1.0 / 3.0).abs() <= 0.05, "{acc}");
    assert!((acc + defects.len() as f64 / pool.len() as f64 - 1.0).abs() < 1e-12);
}

#[test]
fn full_initial_fraction_keeps_subset_constant() {
    let pool = scene_pool();
    let cfg = DefectConfig {
        initial_fraction: 1.0,
        iterations: 3,
        first_epochs: 2,
        later_epochs: 1,
        balance_ratio: f64::INFINITY,
        train: TrainConfig { learning_rate: 1e-3, batch_size: 512 },
        seed: 1,
    };
    let (_, report) = defect_iterate::<f32>(&pool, &cfg, DidlArch::tiny()).unwrap();
    assert_eq!(report.subset_sizes, vec![pool.len(); 3]);
    assert!(report.defects_added.iter().all(|&d| d == 0));
}

#[test]
fn subset_grows_monotonically_with_defects() {
    let pool = scene_pool();
    let cfg = DefectConfig {
        initial_fraction: 0.1,
        iterations: 3,
        first_epochs: 3,
        later_epochs: 2,
        train: TrainConfig { learning_rate: 1e-3, batch_size: 128 },
        seed: 2,
        ..Default::default()
    };
    let (_, report) = defect_iterate::<f32>(&pool, &cfg, DidlArch::tiny()).unwrap();
    for w in report.subset_sizes.windows(2) {
        assert!(w[0] <= w[1]);
    }
    for i in 1..report.subset_sizes.len() {
        assert_eq!(report.subset_sizes[i], report.subset_sizes[i - 1] + report.defects_added[i - 1]);
    }
    assert!(report.to_csv().starts_with("iteration,subset_size,accuracy\n1,"));
}

#[test]
fn initial_subset_respects_balance() {
    let pool = scene_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let subset = initial_subset(&pool, 0.2, 5.0, &mut rng).unwrap();
    let bg = subset.iter().filter(|&&i| pool.get(i).label == Label::Background).count();
    assert!(bg <= 5 * (subset.len() - bg));
    let mut sorted = subset.clone();
    sorted.dedup();
    assert_eq!(sorted.len(), subset.len());
    assert!(initial_subset(&pool, 0.0, 5.0, &mut rng).is_err());
    assert!(initial_subset(&pool, 1.5, 5.0, &mut rng).is_err());
}

#[test]
fn checkpoint_round_trip_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ltsm");
    let model = DidlModel::<f32>::build_default(9);
    model.save(&path).unwrap();
    assert!(std::fs::metadata(&path).unwrap().len() <= 2 * 1024 * 1024);
    let loaded = DidlModel::<f32>::load(&path).unwrap();
    assert_eq!(loaded, model);
    let tiny = DidlModel::<f64>::build(DidlArch::tiny(), 1);
    tiny.save(&path).unwrap();
    let back = DidlModel::<f64>::load(&path).unwrap();
    assert_eq!(back.arch, DidlArch::tiny());
    assert_eq!(back.parameter_count(), tiny.parameter_count());
}

#[test]
fn constant_video_is_all_background_after_training() {
    let frames: Vec<Frame> = (0..8).map(|_| Frame::filled(6, 6, 3, 0.4)).collect();
    let seq = FrameSequence::new(frames).unwrap();
    let masks = vec![lts_core::videoio::LabelMask::filled(6, 6, Label::Background, lts_core::videoio::Provenance::GroundTruth)];
    let pool = build_pool(&seq, &[(0, masks[0].clone())], 1).unwrap();
    let mut model = DidlModel::<f32>::build(DidlArch::tiny(), 4);
    let mut opt = Adam::new(1e-2);
    let idx: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    train_epochs(&mut model, &mut opt, &pool, &idx, 20, &TrainConfig { learning_rate: 1e-2, batch_size: 36 }, &mut rng).unwrap();
    let mask = predict_mask(&model, &seq, 3).unwrap();
    assert_eq!((mask.height, mask.width), (6, 6));
    assert_eq!(mask.count(Label::Background), 36);
    assert_eq!(predict_mask(&model, &seq, 3).unwrap(), mask);
    assert!(predict_mask(&model, &seq, 8).is_err());
}
