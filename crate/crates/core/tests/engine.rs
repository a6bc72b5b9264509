use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarseg_core::engine::*;
use sarseg_core::losses::{ClassWeights, LossParams};
use sarseg_core::metrics::ConfusionMatrix;
use sarseg_core::model::{AblationFlags, ModelConfig, ParamStore, SegModel};
use sarseg_core::numerics::Tensor;

fn schedule(cfg: OptimConfig, steps_per_epoch: usize, max_depth: usize, batch: usize) -> Schedule {
    Schedule::new(cfg, steps_per_epoch, max_depth, batch).unwrap()
}

#[test]
fn warmup_and_layer_decay_endpoints() {
    let cfg = OptimConfig { base_lr: 6e-4, warmup_epochs: 10, total_epochs: 200, ..OptimConfig::finetune_full() };
    let s = schedule(cfg.clone(), 5, 6, 8);
    assert_eq!(lr_at(0, 6, &s), 0.0);
    assert_eq!(lr_at(50, 6, &s), 6e-4);
    assert!((lr_at(50, 5, &s) - 6e-4 * 0.7).abs() < 1e-18);
    assert!((lr_at(50, 0, &s) - 6e-4 * 0.7f64.powi(6)).abs() < 1e-18);
    assert!((lr_at(25, 6, &s) - 3e-4).abs() < 1e-18);
    assert_eq!(lr_at(1000, 6, &s), 1e-6);

    let scaled = schedule(OptimConfig { global_batch_scaling: true, ..cfg }, 5, 6, 512);
    assert!((lr_at(50, 6, &scaled) - 6e-4 * 2.0).abs() < 1e-18);
}

#[test]
fn pretraining_schedule_reaches_zero() {
    let s = schedule(OptimConfig { warmup_epochs: 1, total_epochs: 4, ..OptimConfig::pretrain_desk() }, 10, 5, 16);
    assert_eq!(s.lr_at(40, 0), 0.0);
    assert!(s.lr_at(39, 0) > 0.0);
    // No layer decay during pretraining.
    assert_eq!(s.lr_at(20, 0), s.lr_at(20, 5));
}

#[test]
fn config_validation() {
    let ok = OptimConfig::finetune_desk();
    assert!(ok.validate().is_ok());
    for bad in [
        OptimConfig { layer_decay: 0.0, ..ok.clone() },
        OptimConfig { layer_decay: 1.5, ..ok.clone() },
        OptimConfig { min_lr: 1.0, ..ok.clone() },
        OptimConfig { warmup_epochs: 50, ..ok.clone() },
        OptimConfig { total_epochs: 0, warmup_epochs: 0, ..ok.clone() },
        OptimConfig { betas: (1.0, 0.999), ..ok.clone() },
        OptimConfig { eps: 0.0, ..ok.clone() },
    ] {
        assert_eq!(bad.validate().unwrap_err().category(), "config", "{bad:?}");
    }
}

proptest! {
    #[test]
    fn schedule_is_continuous_and_non_increasing_after_warmup(
        warm in 1usize..20, extra in 1usize..50, spe in 1usize..8, base in 1e-5f64..1e-2, depth in 0usize..7,
    ) {
        let cfg = OptimConfig { base_lr: base, min_lr: base * 0.01, warmup_epochs: warm, total_epochs: warm + extra, ..OptimConfig::finetune_desk() };
        let s = schedule(cfg, spe, 6, 8);
        let w = s.warmup_steps();
        // Warmup approaches the peak linearly and the cosine starts there.
        let before = s.lr_at(w - 1, depth);
        let at = s.lr_at(w, depth);
        prop_assert!((at - before) <= at / w as f64 + 1e-15);
        prop_assert!(before <= at);
        let mut prev = at;
        for step in w..=s.total_steps() + 3 {
            let lr = s.lr_at(step, depth);
            prop_assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }
}

fn scalar_store(value: f64, decay: bool) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("p".into(), Tensor::scalar(value), 0, decay).unwrap();
    s
}

#[test]
fn scalar_update_matches_hand_formula() {
    let cfg = OptimConfig { betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.05, ..OptimConfig::finetune_desk() };
    let mut store = scalar_store(1.5, true);
    let mut opt = AdamW::new(&cfg, &store).unwrap();
    let lr = 0.01;
    let (g1, g2) = (0.3, -0.7);

    opt.step(&mut store, &[Some(Tensor::scalar(g1))], &[lr]).unwrap();
    let (m1, v1) = (0.1 * g1, 0.001 * g1 * g1);
    let mut p = 1.5 - lr * 0.05 * 1.5;
    p -= lr * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-8);
    assert!((store.get(sarseg_core::model::ParamId(0)).value.item() - p).abs() < 1e-12);

    opt.step(&mut store, &[Some(Tensor::scalar(g2))], &[lr]).unwrap();
    let (m2, v2) = (0.9 * m1 + 0.1 * g2, 0.999 * v1 + 0.001 * g2 * g2);
    let (bc1, bc2) = (1.0 - 0.9f64.powi(2), 1.0 - 0.999f64.powi(2));
    p -= lr * 0.05 * p;
    p -= lr * (m2 / bc1) / ((v2 / bc2).sqrt() + 1e-8);
    let got = store.iter().next().unwrap().value.item();
    assert!((got - p).abs() < 1e-12, "{got} vs {p}");
    assert_eq!(opt.state().step, 2);
}

#[test]
fn zero_gradients_without_decay_change_nothing() {
    let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::finetune_desk() };
    let mut store = scalar_store(-2.0, true);
    let mut opt = AdamW::new(&cfg, &store).unwrap();
    for _ in 0..3 {
        opt.step(&mut store, &[Some(Tensor::scalar(0.0))], &[0.1]).unwrap();
    }
    assert_eq!(store.iter().next().unwrap().value.item(), -2.0);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let model = SegModel::<f32>::new(ModelConfig::desk(3), AblationFlags::FULL, 0).unwrap();
    let mut store = model.store().clone();
    let mut opt = AdamW::new(&OptimConfig::finetune_desk(), &store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grads: Vec<_> =
        store.iter().map(|p| Some(Tensor::from_fn(p.value.shape(), |_| rng.random_range(-1.0..1.0f32)))).collect();
    opt.step(&mut store, &grads, &vec![0.0; grads.len()]).unwrap();
    assert_eq!(&store, model.store());
}

#[test]
fn bias_is_exempt_from_weight_decay() {
    let cfg = OptimConfig { weight_decay: 0.5, ..OptimConfig::finetune_desk() };
    let mut store = ParamStore::<f64>::new();
    store.add("w".into(), Tensor::full(&[2], 1.0), 0, true).unwrap();
    store.add("b".into(), Tensor::full(&[2], 1.0), 0, false).unwrap();
    let mut opt = AdamW::new(&cfg, &store).unwrap();
    let zero = Some(Tensor::zeros(&[2]));
    opt.step(&mut store, &[zero.clone(), zero], &[0.1, 0.1]).unwrap();
    let vals: Vec<f64> = store.iter().map(|p| p.value.data()[0]).collect();
    assert!((vals[0] - 0.95).abs() < 1e-15);
    assert_eq!(vals[1], 1.0);
}

#[test]
fn non_finite_gradient_aborts_without_side_effects() {
    let mut store = ParamStore::<f32>::new();
    store.add("a".into(), Tensor::full(&[3], 1.0), 0, true).unwrap();
    store.add("b".into(), Tensor::full(&[3], 1.0), 0, true).unwrap();
    let before = store.clone();
    let mut opt = AdamW::new(&OptimConfig::finetune_desk(), &store).unwrap();
    let grads = [Some(Tensor::full(&[3], 0.5)), Some(Tensor::new(&[3], vec![0.0, f32::NAN, 1.0]).unwrap())];
    let e = opt.step(&mut store, &grads, &[0.1, 0.1]).unwrap_err();
    assert_eq!(e.category(), "numeric");
    assert_eq!(store, before);
    assert_eq!(opt.state().step, 0);
    assert!(opt.state().m.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn missing_gradient_leaves_parameter_alone() {
    let cfg = OptimConfig { weight_decay: 0.5, ..OptimConfig::finetune_desk() };
    let mut store = scalar_store(3.0, true);
    let mut opt = AdamW::new(&cfg, &store).unwrap();
    opt.step(&mut store, &[None], &[0.1]).unwrap();
    assert_eq!(store.iter().next().unwrap().value.item(), 3.0);
}

#[test]
fn state_round_trip_resumes_identically() {
    let cfg = OptimConfig::finetune_desk();
    let mut a = scalar_store(1.0, true);
    let mut opt = AdamW::new(&cfg, &a).unwrap();
    opt.step(&mut a, &[Some(Tensor::scalar(0.4))], &[0.01]).unwrap();
    let mut b = a.clone();
    let mut resumed = AdamW::from_state(&cfg, &b, opt.state().clone()).unwrap();
    opt.step(&mut a, &[Some(Tensor::scalar(-0.2))], &[0.01]).unwrap();
    resumed.step(&mut b, &[Some(Tensor::scalar(-0.2))], &[0.01]).unwrap();
    assert_eq!(a, b);

    let other = ParamStore::<f64>::new();
    assert!(AdamW::from_state(&cfg, &other, opt.state().clone()).is_err());
}

fn toy_batch(n: usize, k: u8, seed: u64) -> Batch<f32> {
    // Class given by the sign pattern of a smooth field so it is learnable.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f32 = rng.random_range(0.0..6.0);
    let mut labels = Vec::new();
    let mut img = Vec::new();
    for b in 0..n {
        for y in 0..64 {
            for x in 0..64 {
                let v = ((x as f32 * 0.15 + phase + b as f32).sin() + (y as f32 * 0.11).cos()) * 0.5;
                let class = (((v + 1.0) * 0.5 * k as f32) as u8).min(k - 1);
                labels.push(class);
                img.push(class as f32 - (k as f32 - 1.0) / 2.0 + rng.random_range(-0.3..0.3));
            }
        }
    }
    Batch { images: Tensor::new(&[n, 1, 64, 64], img).unwrap(), labels }
}

#[test]
fn loss_decreases_over_first_ten_steps() {
    let mut model = SegModel::<f32>::new(ModelConfig::desk(3), AblationFlags::FULL, 0).unwrap();
    let cfg = OptimConfig::finetune_desk();
    let sched = schedule(cfg.clone(), 1, model.store().max_depth(), 4);
    let mut opt = AdamW::new(&cfg, model.store()).unwrap();
    let w = ClassWeights { w: vec![0.6, 0.7, 0.7], alpha: vec![0.3, 0.35, 0.35] };
    let obj = Objective::lulc(&w, LossParams::default(), AblationFlags::FULL).unwrap();
    let batch = toy_batch(4, 3, 0);
    let mut losses = Vec::new();
    for step in 0..11 {
        losses.push(train_step(&mut model, &mut opt, &sched, step, &batch, &obj).unwrap().loss);
    }
    assert!(losses[10] < losses[0], "{losses:?}");
}

#[test]
fn evaluation_accumulates_both_tasks() {
    let model = SegModel::<f32>::new(ModelConfig::desk(3), AblationFlags::BASELINE, 0).unwrap();
    let w = ClassWeights::uniform(3);
    let obj = Objective::lulc(&w, LossParams::default(), AblationFlags::BASELINE).unwrap();
    let batch = toy_batch(2, 3, 1);
    let z = predict(&model, &batch.images).unwrap();
    let mut ev = Evaluation::for_model(&model, &obj, 0.5);
    ev.accumulate(&z, &batch.labels, 255).unwrap();
    match &ev {
        Evaluation::Lulc(cm) => assert_eq!(cm.total(), 2 * 64 * 64),
        _ => panic!("expected a confusion matrix"),
    }
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&sarseg_core::metrics::argmax_classes(&z).unwrap(), &batch.labels, 255).unwrap();
    assert_eq!(ev.primary(), cm.mean_iou());

    let water = SegModel::<f32>::new(ModelConfig::desk(1), AblationFlags::BASELINE, 0).unwrap();
    let logits = Tensor::new(&[1, 1, 1, 4], vec![3.0f32, -3.0, 0.0, -1.0]).unwrap();
    let mut ev = Evaluation::for_model(&water, &Objective::water(), 0.5);
    ev.accumulate(&logits, &[1, 0, 1, 255], 255).unwrap();
    assert_eq!(ev.primary(), Some(1.0));
}
