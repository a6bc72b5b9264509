use proptest::prelude::*;
use sarseg_core::numerics::gradcheck::{max_gradient_error, random_inputs};
use sarseg_core::numerics::{grad_check, required_op_set, OpDescriptor, Tape, Tensor};

#[test]
fn op_set_membership() {
    let names: Vec<&str> = required_op_set().iter().map(|d| d.name()).collect();
    assert!(names.contains(&"conv2d"));
    assert!(names.contains(&"adaptive_avg_pool"));
    for d in required_op_set() {
        assert!(!d.gradient_rule().is_empty(), "{} lacks a gradient rule", d);
    }
    assert!(OpDescriptor::from_name("fft").is_err());
    assert_eq!(OpDescriptor::from_name("softmax").unwrap(), OpDescriptor::Softmax);
}

#[test]
fn add_gradient_is_identity() {
    let r = grad_check(&OpDescriptor::Add, &[vec![2, 3], vec![2, 3]], 0).unwrap();
    assert!(r.passed && r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn softmax_and_conv_examples() {
    let r = grad_check(&OpDescriptor::Softmax, &[vec![4, 5]], 1).unwrap();
    assert!(r.passed && r.max_rel_error <= 1e-4, "{r:?}");
    let conv = OpDescriptor::Conv2d { stride: 1, pad: 1 };
    let r = grad_check(&conv, &[vec![1, 2, 8, 8], vec![4, 2, 3, 3]], 2).unwrap();
    assert!(r.passed && r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn every_required_op_passes_five_seeds() {
    for op in required_op_set() {
        for seed in 0..5 {
            let r = grad_check(&op, &op.default_shapes(), seed).unwrap();
            assert!(r.passed, "{} seed {seed}: {r:?}", op);
        }
    }
}

#[test]
fn strided_and_unpadded_convolutions() {
    for (stride, pad, k) in [(1, 0, 1), (4, 0, 4), (2, 0, 3), (1, 2, 3)] {
        let op = OpDescriptor::Conv2d { stride, pad };
        let r = grad_check(&op, &[vec![2, 3, 8, 8], vec![2, 3, k, k], vec![2]], 3).unwrap();
        assert!(r.passed, "stride {stride} pad {pad} k {k}: {r:?}");
    }
}

#[test]
fn broadcast_matmul_and_bias_gradients() {
    let inputs = random_inputs(&OpDescriptor::MatMul, &[vec![2, 3, 4], vec![4, 5], vec![5]], 9);
    let err = max_gradient_error(&inputs, 1e-4, |tape, v| {
        let y = v[0].matmul(v[1])?.add(v[2])?;
        let r = tape.constant(Tensor::from_fn(&[2, 3, 5], |i| (i as f64 * 0.37).sin()));
        Ok(y.mul(r)?.sum())
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let inputs = random_inputs(&OpDescriptor::MatMul, &[vec![2, 3, 4], vec![2, 5, 4], vec![5, 4]], 10);
    let err = max_gradient_error(&inputs, 1e-4, |tape, v| {
        let y = v[0].matmul_t(v[1])?;
        let z = v[0].matmul_t(v[2])?;
        let r = tape.constant(Tensor::from_fn(&[2, 3, 5], |i| (i as f64 * 0.11).cos()));
        y.mul(r)?.sum().add(z.mul(r)?.sum())
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let inputs = random_inputs(&OpDescriptor::Mul, &[vec![2, 3, 4], vec![3, 4]], 11);
    let err = max_gradient_error(&inputs, 1e-4, |_, v| Ok(v[0].mul(v[1])?.sub(v[1])?.sum())).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn bilinear_constant_and_single_sample() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 2, 3, 5], 3.0));
    let y = x.upsample_bilinear(2).unwrap();
    assert_eq!(y.shape(), vec![1, 2, 6, 10]);
    assert!(y.value().data().iter().all(|&v| v == 3.0));

    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], -0.7));
    let y = x.upsample_bilinear(4).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 4, 4]);
    assert!(y.value().data().iter().all(|&v| v == -0.7));
    assert!(x.upsample_bilinear(0).is_err());
}

/// Direct half-pixel bilinear evaluation at one output pixel.
fn bilinear_oracle(img: &[Vec<f64>], scale: usize, oy: usize, ox: usize) -> f64 {
    let (h, w) = (img.len(), img[0].len());
    let src = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let (y0, y1, ly) = src(oy, h);
    let (x0, x1, lx) = src(ox, w);
    (1.0 - ly) * ((1.0 - lx) * img[y0][x0] + lx * img[y0][x1]) + ly * ((1.0 - lx) * img[y1][x0] + lx * img[y1][x1])
}

#[test]
#[allow(clippy::needless_range_loop)]
fn bilinear_ramp_matches_oracle() {
    let img = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let y = x.upsample_bilinear(2).unwrap();
    let frozen = [[0.0, 0.25, 0.75, 1.0], [0.5, 0.75, 1.25, 1.5], [1.5, 1.75, 2.25, 2.5], [2.0, 2.25, 2.75, 3.0]];
    let v = y.value();
    for oy in 0..4 {
        for ox in 0..4 {
            let got = v.data()[oy * 4 + ox];
            assert!((got - bilinear_oracle(&img, 2, oy, ox)).abs() < 1e-12);
            assert!((got - frozen[oy][ox]).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_mean_with_full_mask_is_mean() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn(&[7, 13], |i| ((i * 7919) % 101) as f32 * 0.013 - 0.4));
    let full = vec![true; 91];
    let masked = x.masked_mean(&full).unwrap().item();
    assert_eq!(masked, x.mean().item());
    assert!(x.masked_mean(&[false; 91]).is_err());
}

#[test]
fn backward_requires_scalar() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(tape.backward(x.gelu()).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[3, 4], vals).unwrap());
        let y = x.softmax().unwrap();
        for row in y.value().data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn window_partition_then_reverse_is_identity(
        n in 1usize..3, wy in 1usize..4, wx in 1usize..4, ws in 1usize..5, c in 1usize..4, shift_frac in 0.0f64..1.0
    ) {
        let (h, w) = (wy * ws, wx * ws);
        let shift = ((ws as f64) * shift_frac) as usize % ws;
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[n, h, w, c], |i| i as f32));
        let win = x.window_partition(ws, shift).unwrap();
        prop_assert_eq!(win.shape(), vec![n * wy * wx, ws * ws, c]);
        let back = win.window_reverse(ws, shift, h, w).unwrap();
        prop_assert_eq!(back.to_tensor(), x.to_tensor());
    }

    #[test]
    fn permute_round_trip(a in 1usize..4, b in 1usize..4, c in 1usize..4, d in 1usize..4) {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[a, b, c, d], |i| i as f32));
        let y = x.permute(&[2, 0, 3, 1]).unwrap();
        prop_assert_eq!(y.shape(), vec![c, a, d, b]);
        let z = y.permute(&[1, 3, 0, 2]).unwrap();
        prop_assert_eq!(z.to_tensor(), x.to_tensor());
    }
}
