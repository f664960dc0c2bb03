use lts_core::nn::gradcheck::{gradcheck, GradcheckOptions};
use lts_core::nn::{Parameterized, Tensor};
use lts_core::sbr::*;
use lts_core::videoio::{generate_synthetic, Frame, Label, LabelMask, Provenance, SyntheticSceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(h: usize, w: usize) -> (Frame, LabelMask) {
    let spec = SyntheticSceneSpec::moving_square(h, w, 3, 10, 0.02, 8);
    let (seq, masks) = generate_synthetic(&spec).unwrap();
    (seq.frame(1).clone(), masks[1].clone())
}

/// Head that ignores its input and always votes foreground.
fn always_foreground(mut net: RefineNet<f32>) -> RefineNet<f32> {
    let mut params = net.parameters_mut();
    let bias = params.pop().unwrap();
    bias.value.data_mut().copy_from_slice(&[-20.0, 20.0]);
    params.pop().unwrap().value.fill(0.0);
    net
}

fn small_schedule() -> Vec<ScaleSchedule> {
    vec![
        ScaleSchedule { scale: 32, patches_per_image: 8, batch_size: 16 },
        ScaleSchedule { scale: 16, patches_per_image: 32, batch_size: 64 },
    ]
}

#[test]
fn tiny_refine_block_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::<f64>::from_fn(&[2, 4, 8, 8], |_| rng.random_range(0.0..1.0));
    let targets: Vec<usize> = (0..128).map(|_| rng.random_range(0..2)).collect();
    let mut net = RefineNet::<f64>::build(2, 4);
    // Zero biases put dead regions exactly on the ReLU kink.
    for p in net.parameters_mut().into_iter().filter(|p| p.name.ends_with("bias")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    let report = gradcheck(
        &mut net,
        |m: &mut RefineNet<f64>| m.loss_and_backward(&x, &targets, CLASS_WEIGHTS).unwrap(),
        |m: &RefineNet<f64>| {
            let logits = m.forward(&x).unwrap();
            let w = [CLASS_WEIGHTS[0], CLASS_WEIGHTS[1]];
            lts_core::nn::weighted_cross_entropy(&logits, &targets, &w).unwrap().0
        },
        GradcheckOptions { max_entries: 48, ..Default::default() },
    );
    assert!(report.entries.len() > 500);
    assert!(report.passes(1e-4), "{:?}", report.worst());
}

#[test]
fn default_net_budget_and_checkpoint() {
    let net = RefineNet::<f32>::build_default(1);
    let n = net.parameter_count();
    assert!((150_000..=350_000).contains(&n), "{n}");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sbr.ltsm");
    net.save(&path).unwrap();
    assert_eq!(RefineNet::<f32>::load(&path).unwrap(), net);
}

#[test]
fn sample_count_matches_ceiling() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    assert_eq!(sample_count(240, 360, 64, 32), 704);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..500), rng.random_range(1..500));
        let s = [16, 32, 64][rng.random_range(0..3)];
        let l = rng.random_range(0..40);
        let oracle = ((h * w) as f64 / (s * s) as f64).ceil() as usize * l;
        assert_eq!(sample_count(h, w, s, l), oracle);
    }
}

#[test]
fn training_patches_follow_schedule() {
    let schedule = default_schedule();
    let mut a = ChaCha8Rng::seed_from_u64(3);
    let patches = sample_training_patches(70, 90, &schedule, &mut a);
    for (s, n) in [(64, 64), (32, 256), (16, 1024)] {
        assert_eq!(patches.iter().filter(|p| p.scale == s).count(), n);
    }
    assert!(patches.iter().all(|p| p.fits(70, 90)));
    let mut b = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(sample_training_patches(70, 90, &schedule, &mut b), patches);
    let small = sample_training_patches(40, 40, &schedule, &mut b);
    assert!(small.iter().all(|p| p.scale <= 32));
}

#[test]
fn heatmap_invariants_hold_for_each_layer_count() {
    let net = RefineNet::<f32>::build(2, 5);
    for (h, w) in [(64, 64), (37, 53)] {
        let (frame, _) = scene(h, w);
        let mask = random_mask(h, w, 0.3, &mut ChaCha8Rng::seed_from_u64(1));
        let fitting = SCALES.iter().filter(|&&s| s <= h && s <= w).count() as u32;
        for l in [1, 4, 32] {
            let cfg = RefineConfig { layers: l, seed: 9, ..Default::default() };
            let (heat, out) = infer_refine(&net, &frame, &mask, &cfg).unwrap();
            assert!(heat.min_stack() >= fitting * l as u32);
            if fitting == 3 {
                assert!(heat.min_stack() >= 3 * l as u32);
            }
            for (&v, &c) in heat.vote_sum.iter().zip(&heat.stack_count) {
                assert!(v >= 0.0 && v <= c as f64);
            }
            assert!(heat.normalized().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(out.labels.iter().all(|&l| l != Label::Other));
        }
    }
}

#[test]
fn more_layers_never_reduce_coverage() {
    let net = RefineNet::<f32>::build(2, 6);
    let (frame, mask) = scene(48, 64);
    let run = |l| {
        let cfg = RefineConfig { layers: l, seed: 3, ..Default::default() };
        infer_refine(&net, &frame, &mask, &cfg).unwrap().0
    };
    let (a, b) = (run(2), run(5));
    assert!(a.stack_count.iter().zip(&b.stack_count).all(|(x, y)| x <= y));
}

#[test]
fn constant_network_gives_full_heatmap() {
    let net = always_foreground(RefineNet::build(2, 7));
    let (frame, mask) = scene(32, 48);
    let (heat, out) = infer_refine(&net, &frame, &mask, &RefineConfig { layers: 2, ..Default::default() }).unwrap();
    assert!(heat.normalized().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    assert_eq!(out.count(Label::Foreground), 32 * 48);
}

#[test]
fn inference_is_seeded_and_validated() {
    let net = RefineNet::<f32>::build(2, 8);
    let (frame, mask) = scene(40, 40);
    let cfg = RefineConfig { layers: 3, seed: 4, ..Default::default() };
    let a = infer_refine(&net, &frame, &mask, &cfg).unwrap();
    assert_eq!(infer_refine(&net, &frame, &mask, &cfg).unwrap(), a);
    let other = RefineConfig { seed: 5, ..cfg.clone() };
    assert_ne!(infer_refine(&net, &frame, &mask, &other).unwrap().0.stack_count, a.0.stack_count);
    assert!(infer_refine(&net, &frame, &mask, &RefineConfig { layers: 0, ..cfg.clone() }).is_err());
    let (tiny, tiny_mask) = scene(12, 12);
    assert!(infer_refine(&net, &tiny, &tiny_mask, &cfg).is_err());
    let wrong = LabelMask::filled(40, 41, Label::Background, Provenance::Predicted);
    assert!(infer_refine(&net, &frame, &wrong, &cfg).is_err());
}

#[test]
fn zero_epochs_and_empty_corpus() {
    let corpus = synthetic_corpus(&CorpusSpec { scenes: 1, frames_per_scene: 1, ..Default::default() }).unwrap();
    let mut net = RefineNet::<f32>::build(2, 0);
    let before = net.clone();
    let cfg = SbrTrainConfig { epochs: 0, ..Default::default() };
    assert!(train_sbr(&mut net, &corpus, &cfg).unwrap().is_empty());
    assert_eq!(net, before);
    assert!(train_sbr(&mut net, &[], &SbrTrainConfig::default()).is_err());
}

#[test]
fn training_loss_decreases_and_is_deterministic() {
    let corpus = synthetic_corpus(&CorpusSpec { scenes: 2, frames_per_scene: 2, height: 32, width: 32, ..Default::default() }).unwrap();
    let cfg = SbrTrainConfig {
        learning_rate: 1e-3,
        epochs: 10,
        schedule: small_schedule(),
        seed: 2,
        ..Default::default()
    };
    let run = || {
        let mut net = RefineNet::<f32>::build(4, 1);
        let losses = train_sbr(&mut net, &corpus, &cfg).unwrap();
        (net, losses)
    };
    let (net, losses) = run();
    assert!(losses[9] < losses[0], "{losses:?}");
    assert_eq!(run().0, net);
}

#[test]
fn clean_inputs_train_toward_identity() {
    let corpus = |seed| {
        let spec = CorpusSpec { scenes: 16, frames_per_scene: 1, height: 32, width: 32, seed, ..Default::default() };
        synthetic_corpus(&spec).unwrap()
    };
    let mut net = RefineNet::<f32>::build(4, 2);
    let cfg = SbrTrainConfig {
        learning_rate: 1e-3,
        epochs: 12,
        schedule: vec![
            ScaleSchedule { scale: 32, patches_per_image: 16, batch_size: 16 },
            ScaleSchedule { scale: 16, patches_per_image: 64, batch_size: 64 },
        ],
        seed: 3,
        ..Default::default()
    };
    train_sbr(&mut net, &corpus(1), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut agree, mut total, mut background) = (0usize, 0usize, 0usize);
    for mut pair in corpus(2) {
        pair.input.mask = pair.target.iter().map(|&t| t as f32).collect();
        let patches = sample_training_patches(32, 32, &small_schedule(), &mut rng);
        for s in [32, 16] {
            let group: Vec<PatchSample> = patches.iter().filter(|p| p.scale == s).copied().collect();
            let probs = net.foreground_probability(&patch_tensor::<f32>(&pair.input, &group).unwrap()).unwrap();
            for (p, pr) in group.iter().zip(probs.chunks_exact(s * s)) {
                for dy in 0..s {
                    for dx in 0..s {
                        let m = pair.target[(p.y + dy) * 32 + p.x + dx] == 1;
                        agree += usize::from((pr[dy * s + dx] > 0.5) == m);
                        background += usize::from(!m);
                        total += 1;
                    }
                }
            }
        }
    }
    let rate = agree as f64 / total as f64;
    let baseline = background as f64 / total as f64;
    assert!(rate >= 0.95 && rate > baseline + 0.5 * (1.0 - baseline), "{rate} vs {baseline}");
}

#[test]
fn corruption_perturbs_boundary_and_adds_noise() {
    let (_, gt) = scene(64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let quiet = corrupt_mask(&gt, 0.5, 0.0, &mut rng);
    let changed: Vec<usize> = (0..gt.labels.len()).filter(|&i| quiet.labels[i] != gt.labels[i]).collect();
    assert!(!changed.is_empty());
    for &i in &changed {
        let (y, x) = (i / 64, i % 64);
        let near_edge = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
            (0..64).contains(&yy) && (0..64).contains(&xx) && gt.labels[yy as usize * 64 + xx as usize] != gt.labels[i]
        });
        assert!(near_edge);
    }
    let blank = LabelMask::filled(100, 100, Label::Background, Provenance::GroundTruth);
    let noisy = corrupt_mask(&blank, 0.5, 0.1, &mut rng);
    let frac = noisy.count(Label::Foreground) as f64 / 10_000.0;
    assert!((frac - 0.05).abs() < 0.01, "{frac}");
}
