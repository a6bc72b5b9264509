use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarseg_core::datagen::{generate_scene, SceneSpec};
use sarseg_core::engine::{AdamW, OptimConfig, Schedule};
use sarseg_core::model::{AblationFlags, EncoderConfig, ModelConfig, SegModel};
use sarseg_core::numerics::gradcheck::max_gradient_error;
use sarseg_core::numerics::{Tape, Tensor};
use sarseg_core::pretrain::*;
use sarseg_core::sampling::{compute_norm_stats_of, NormStats};

fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, 1, h, w], |_| rng.random_range(-2.0..2.0))
}

#[test]
fn all_ones_mask_returns_first_image() {
    let x1 = random_image(8, 8, 1);
    let x2 = random_image(8, 8, 2);
    let m = MixMask::new(2, 2, 4, vec![true; 4]).unwrap();
    assert_eq!(apply_mix(&x1, &x2, &m).unwrap(), x1);
    assert_eq!(apply_mix(&x1, &x2, &m.complement()).unwrap(), x2);
}

#[test]
fn exact_patch_count() {
    let x = random_image(64, 64, 0);
    for seed in 0..20 {
        let (_, m) = make_mix(&x, &x, 0.5, 8, seed).unwrap();
        assert_eq!(m.num_patches(), 64);
        assert_eq!(m.first_count(), 32);
    }
    let (_, m) = make_mix(&x, &x, 0.3, 8, 1).unwrap();
    assert_eq!(m.first_count(), 19);
}

#[test]
fn mix_is_deterministic_and_seed_dependent() {
    let x1 = random_image(64, 64, 3);
    let x2 = random_image(64, 64, 4);
    let a = make_mix(&x1, &x2, 0.5, 8, 9).unwrap();
    let b = make_mix(&x1, &x2, 0.5, 8, 9).unwrap();
    let c = make_mix(&x1, &x2, 0.5, 8, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.1, c.1);
}

#[test]
fn mix_rejects_bad_input() {
    let x1 = random_image(8, 8, 1);
    let x2 = random_image(8, 4, 2);
    assert!(make_mix(&x1, &x2, 0.5, 4, 0).is_err());
    assert!(make_mix(&x1, &x1, 0.5, 3, 0).is_err());
    assert!(make_mix(&x1, &x1, 0.0, 4, 0).is_err());
    assert!(make_mix(&x1, &x1, 1.0, 4, 0).is_err());
}

proptest! {
    #[test]
    fn complementary_mixes_sum_to_both_images(seed in 0u64..1000, ratio in 0.05f64..0.95) {
        let x1 = random_image(16, 24, seed);
        let x2 = random_image(16, 24, seed + 1);
        let (a, m) = make_mix(&x1, &x2, ratio, 4, seed).unwrap();
        let b = apply_mix(&x1, &x2, &m.complement()).unwrap();
        for i in 0..a.numel() {
            prop_assert_eq!(a.data()[i] + b.data()[i], x1.data()[i] + x2.data()[i]);
        }
        let pm = m.pixel_mask();
        let firsts = pm.iter().filter(|&&f| f).count();
        prop_assert_eq!(firsts, m.first_count() * 16);
    }

    #[test]
    fn power_weights_are_scale_invariant(seed in 0u64..1000, c in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f32> = (0..256).map(|_| rng.random_range(0.0..3.0f32)).collect();
        let b: Vec<f32> = a.iter().map(|v| v * c).collect();
        let wa = power_weights(&a, None, PowerBounds::default()).unwrap();
        let wb = power_weights(&b, None, PowerBounds::default()).unwrap();
        for (x, y) in wa.weights.iter().zip(&wb.weights) {
            prop_assert!((x - y).abs() < 1e-4 * x.max(1.0));
        }
    }

    #[test]
    fn power_weights_have_unit_mean_and_respect_bounds_before_renormalization(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f32> = (0..300).map(|_| rng.random_range(0.0..1.0f32).powi(3) * 5.0).collect();
        let valid: Vec<bool> = (0..300).map(|i| i % 7 != 0).collect();
        let b = PowerBounds { w_min: 0.2, w_max: 4.0 };
        let w = power_weights(&a, Some(&valid), b).unwrap();
        let mean: f64 = w.weights.iter().zip(&valid).filter(|(_, v)| **v).map(|(w, _)| w).sum::<f64>() / 257.0;
        prop_assert!((mean - 1.0).abs() < 1e-6);
        for (x, v) in w.weights.iter().zip(&valid) {
            if *v {
                let raw = x / w.renorm;
                prop_assert!(raw >= b.w_min - 1e-12 && raw <= b.w_max + 1e-12);
            } else {
                prop_assert_eq!(*x, 0.0);
            }
        }
    }
}

#[test]
fn constant_image_gives_unit_weights() {
    for v in [0.3f32, 1.0, 7.25] {
        let w = power_weights(&vec![v; 100], None, PowerBounds::default()).unwrap();
        assert!(w.weights.iter().all(|&x| (x - 1.0).abs() < 1e-12), "{v}");
    }
}

#[test]
fn bright_pixel_among_zeros() {
    let mut a = vec![0.0f32; 16];
    a[5] = 2.0;
    let b = PowerBounds { w_min: 0.1, w_max: 1000.0 };
    let w = power_weights(&a, None, b).unwrap();
    // Before renormalization: 16 for the bright pixel, w_min elsewhere.
    let raw: Vec<f64> = w.weights.iter().map(|x| x / w.renorm).collect();
    assert!((raw[5] - 16.0).abs() < 1e-12);
    for (i, r) in raw.iter().enumerate() {
        if i != 5 {
            assert!((r - 0.1).abs() < 1e-12);
        }
    }
    let max = w.weights.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(max, w.weights[5]);
    assert!((w.renorm - 16.0 / (16.0 + 1.5)).abs() < 1e-12);
}

#[test]
fn zero_image_is_degenerate() {
    let e = power_weights(&[0.0; 8], None, PowerBounds::default()).unwrap_err();
    assert_eq!(e.category(), "degenerate");
    assert!(power_weights(&[1.0, -1.0], None, PowerBounds::default()).is_err());
}

fn unit_weights(n: usize) -> PowerWeight {
    PowerWeight { weights: vec![1.0; n], bounds: PowerBounds::default(), renorm: 1.0 }
}

#[test]
fn hand_case_sums_squared_errors() {
    // One 1×2 image pair: cell 0 from x1, cell 1 from x2. x1 loses pixel 1
    // (error 1), x2 loses pixel 0 (error 2).
    let m = MixMask::new(1, 2, 1, vec![true, false]).unwrap();
    let x1 = Tensor::new(&[1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
    let x2 = Tensor::new(&[1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
    let tape = Tape::new();
    let p1 = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![9.0, 1.0]).unwrap());
    let p2 = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![2.0, 9.0]).unwrap());
    let w = [unit_weights(2)];
    let l = reconstruction_loss(p1, p2, &x1, &x2, &[m], &w, &w).unwrap();
    assert_eq!(l.item(), 5.0);
}

#[test]
fn perfect_reconstruction_is_zero_and_unit_weights_give_masked_mse() {
    let x1 = random_image(4, 4, 1);
    let x2 = random_image(4, 4, 2);
    let m = MixMask::new(2, 2, 2, vec![true, false, false, true]).unwrap();
    let w = [unit_weights(16)];
    let tape = Tape::new();
    let l = reconstruction_loss(
        tape.constant(x1.clone()),
        tape.constant(x2.clone()),
        &x1,
        &x2,
        std::slice::from_ref(&m),
        &w,
        &w,
    );
    assert_eq!(l.unwrap().item(), 0.0);

    let p = random_image(4, 4, 3);
    let l = reconstruction_loss(
        tape.constant(p.clone()),
        tape.constant(p.clone()),
        &x1,
        &x2,
        std::slice::from_ref(&m),
        &w,
        &w,
    )
    .unwrap()
    .item();
    let pm = m.pixel_mask();
    let mse = |x: &Tensor<f64>, hidden: bool| {
        let idx: Vec<usize> = (0..16).filter(|&i| pm[i] != hidden).collect();
        idx.iter().map(|&i| (p.data()[i] - x.data()[i]).powi(2)).sum::<f64>() / idx.len() as f64
    };
    assert!((l - (mse(&x1, true) + mse(&x2, false))).abs() < 1e-12);
}

#[test]
fn empty_hidden_region_is_an_error() {
    let x = random_image(2, 2, 0);
    let m = MixMask::new(1, 1, 2, vec![true]).unwrap();
    let w = [unit_weights(4)];
    let tape = Tape::new();
    let e = reconstruction_loss(tape.constant(x.clone()), tape.constant(x.clone()), &x, &x, &[m], &w, &w);
    assert!(e.is_err());
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let x1 = random_image(4, 6, seed).reshape(&[2, 1, 2, 6]).unwrap();
        let x2 = random_image(4, 6, seed + 10).reshape(&[2, 1, 2, 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<MixMask> = (0..2).map(|_| MixMask::random(1, 3, 2, 0.5, &mut rng).unwrap()).collect();
        let amp = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            (0..12).map(|_| r.random_range(0.1..2.0f32)).collect::<Vec<_>>()
        };
        let w1: Vec<_> =
            (0..2).map(|i| power_weights(&amp(seed * 7 + i), None, PowerBounds::default()).unwrap()).collect();
        let w2: Vec<_> =
            (0..2).map(|i| power_weights(&amp(seed * 13 + i), None, PowerBounds::default()).unwrap()).collect();
        let p1 = random_image(4, 6, seed + 20).reshape(&[2, 1, 2, 6]).unwrap();
        let p2 = random_image(4, 6, seed + 30).reshape(&[2, 1, 2, 6]).unwrap();
        let err =
            max_gradient_error(&[p1, p2], 1e-4, |_, v| reconstruction_loss(v[0], v[1], &x1, &x2, &masks, &w1, &w2))
                .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

fn scenes(count: usize, seed: u64) -> Vec<Vec<f32>> {
    let r = generate_scene(&SceneSpec::long_tailed(128, 128, seed)).unwrap();
    let mut out = Vec::new();
    for t in 0..4 {
        let (oy, ox) = ((t / 2) * 64, (t % 2) * 64);
        out.push((0..64 * 64).map(|i| r.amplitude[(oy + i / 64) * 128 + ox + i % 64]).collect());
    }
    if count > 4 {
        out.extend(scenes(count - 4, seed + 1));
    }
    out
}

fn setup(steps: usize, batch: usize) -> (PretrainModel<f32>, AdamW<f32>, Schedule) {
    let model = PretrainModel::<f32>::new(EncoderConfig::desk(), PretrainConfig::default(), 0).unwrap();
    let cfg = OptimConfig { warmup_epochs: 1, total_epochs: steps, ..OptimConfig::pretrain_desk() };
    let opt = AdamW::new(&cfg, model.store()).unwrap();
    let sched = Schedule::new(cfg, 1, model.store().max_depth(), batch).unwrap();
    (model, opt, sched)
}

#[test]
fn odd_batch_is_rejected() {
    let (mut model, mut opt, sched) = setup(10, 3);
    let images = scenes(4, 1);
    let batch = PretrainBatch { size: 64, images: images[..3].to_vec() };
    let norm = NormStats::new(1.0, 1.0).unwrap();
    let e = pretrain_step(&mut model, &mut opt, &sched, 0, &batch, &norm, 0).unwrap_err();
    assert_eq!(e.category(), "argument");
}

#[test]
fn step_is_deterministic() {
    let images = scenes(4, 2);
    let norm = compute_norm_stats_of(images.iter().map(|v| v.as_slice())).unwrap();
    let batch = PretrainBatch { size: 64, images };
    let run = || {
        let (mut model, mut opt, sched) = setup(10, 4);
        let before = model.store().clone();
        let mut losses = Vec::new();
        for step in 0..2 {
            losses.push(pretrain_step(&mut model, &mut opt, &sched, step, &batch, &norm, 5).unwrap().loss);
        }
        let delta: Vec<Vec<f32>> = model
            .store()
            .iter()
            .zip(before.iter())
            .map(|(a, b)| a.value.data().iter().zip(b.value.data()).map(|(x, y)| x - y).collect())
            .collect();
        (losses, delta)
    };
    let (la, da) = run();
    let (lb, db) = run();
    assert!(la.iter().all(|l| l.is_finite()));
    assert_eq!(la, lb);
    assert_eq!(da, db);
    assert!(da.iter().any(|d| d.iter().any(|&v| v != 0.0)));
}

#[test]
fn pretrained_encoder_loads_into_segmentation_model() {
    let pre = PretrainModel::<f32>::new(EncoderConfig::desk(), PretrainConfig::default(), 4).unwrap();
    let enc = pre.encoder_store().unwrap();
    for flags in AblationFlags::all() {
        let mut seg = SegModel::<f32>::new(ModelConfig::desk(9), flags, 1).unwrap();
        let n = seg.store_mut().load_prefix(&enc, "encoder.").unwrap();
        assert_eq!(n, enc.len());
        let seg_enc = seg.store().iter().filter(|p| p.name.starts_with("encoder.")).count();
        assert_eq!(n, seg_enc);
    }
    assert!(pre.store().iter().all(|p| p.name.starts_with("encoder.") || p.name.starts_with("recon.")));
}

#[test]
fn mixed_tokens_do_not_attend_across_images() {
    // Changing the second image must not change the reconstruction of cells
    // taken from the first: every token only sees its own image.
    let model = PretrainModel::<f64>::new(EncoderConfig::desk(), PretrainConfig::default(), 2).unwrap();
    let m = MixMask::new(2, 2, 32, vec![true, false, false, true]).unwrap();
    let x1 = random_image(64, 64, 1);
    let run = |x2: &Tensor<f64>| {
        let mixed = apply_mix(&x1, x2, &m).unwrap();
        let tape = Tape::new();
        let cx = model.ctx(&tape, false);
        let (p1, _) = model.reconstruct(&cx, cx.constant(mixed), std::slice::from_ref(&m)).unwrap();
        p1.to_tensor()
    };
    let a = run(&random_image(64, 64, 2));
    let b = run(&random_image(64, 64, 3));
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9, "max change {diff}");
}

#[test]
fn loss_halves_within_200_steps() {
    let images = scenes(16, 30);
    let norm = compute_norm_stats_of(images.iter().map(|v| v.as_slice())).unwrap();
    let (mut model, mut opt, sched) = setup(200, 16);
    let batch = PretrainBatch { size: 64, images };
    let mut first = None;
    let mut last = 0.0;
    for step in 0..200 {
        let s = pretrain_step(&mut model, &mut opt, &sched, step, &batch, &norm, 0).unwrap();
        first.get_or_insert(s.loss);
        last = s.loss;
    }
    let first = first.unwrap();
    assert!(last <= 0.5 * first, "loss {first} → {last}");
}
