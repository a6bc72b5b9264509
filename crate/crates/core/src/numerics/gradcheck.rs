//! Finite-difference verification of the gradient rules.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{numel, Tensor};
use crate::error::{bail, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-4;
/// Tolerance for ops that are linear in each argument.
pub const LINEAR_TOLERANCE: f64 = 1e-6;
/// Tolerance for every other op.
pub const NONLINEAR_TOLERANCE: f64 = 1e-4;

/// One entry of the differentiable op set the model is written against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpDescriptor {
    MatMul,
    Conv2d { stride: usize, pad: usize },
    BilinearUpsample2x,
    NearestUpsample2x,
    AdaptiveAvgPool { out_h: usize, out_w: usize },
    LayerNorm,
    GroupNorm { groups: usize },
    Gelu,
    Softmax,
    Sigmoid,
    Log,
    Add,
    Mul,
    Sub,
    WindowPartition { window: usize, shift: usize },
    WindowReverse { window: usize, shift: usize, height: usize, width: usize },
    Reshape,
    Permute,
    Concat { axis: usize },
    Sum,
    Mean,
    MaskedSum,
    MaskedMean,
}

/// The complete op set required by the encoder, decoder and losses.
pub fn required_op_set() -> Vec<OpDescriptor> {
    use OpDescriptor::*;
    vec![
        MatMul,
        Conv2d { stride: 2, pad: 1 },
        BilinearUpsample2x,
        NearestUpsample2x,
        AdaptiveAvgPool { out_h: 3, out_w: 3 },
        LayerNorm,
        GroupNorm { groups: 2 },
        Gelu,
        Softmax,
        Sigmoid,
        Log,
        Add,
        Mul,
        Sub,
        WindowPartition { window: 2, shift: 1 },
        WindowReverse { window: 2, shift: 1, height: 4, width: 4 },
        Reshape,
        Permute,
        Concat { axis: 1 },
        Sum,
        Mean,
        MaskedSum,
        MaskedMean,
    ]
}

impl OpDescriptor {
    /// Canonical descriptor for an op name, as printed by [`OpDescriptor::name`].
    pub fn from_name(name: &str) -> Result<Self> {
        match required_op_set().into_iter().find(|d| d.name() == name) {
            Some(d) => Ok(d),
            None => bail!(Contract, "unsupported op descriptor `{name}`"),
        }
    }

    pub fn name(&self) -> &'static str {
        use OpDescriptor::*;
        match self {
            MatMul => "matmul",
            Conv2d { .. } => "conv2d",
            BilinearUpsample2x => "bilinear_upsample_2x",
            NearestUpsample2x => "nearest_upsample_2x",
            AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            LayerNorm => "layer_norm",
            GroupNorm { .. } => "group_norm",
            Gelu => "gelu",
            Softmax => "softmax",
            Sigmoid => "sigmoid",
            Log => "log",
            Add => "add",
            Mul => "mul",
            Sub => "sub",
            WindowPartition { .. } => "window_partition",
            WindowReverse { .. } => "window_reverse",
            Reshape => "reshape",
            Permute => "permute",
            Concat { .. } => "concat",
            Sum => "sum",
            Mean => "mean",
            MaskedSum => "masked_sum",
            MaskedMean => "masked_mean",
        }
    }

    /// The vector-Jacobian product implemented for this op.
    pub fn gradient_rule(&self) -> &'static str {
        use OpDescriptor::*;
        match self {
            MatMul => "dA = G·Bᵀ, dB = Aᵀ·G (summed over broadcast batches)",
            Conv2d { .. } => "dX = col2im(Wᵀ·G), dW = G·colsᵀ, db = Σ G",
            BilinearUpsample2x => "scatter G through the transposed interpolation taps",
            NearestUpsample2x => "sum G over each source pixel's 2×2 footprint",
            AdaptiveAvgPool { .. } => "spread G / |bin| uniformly over each pooling bin",
            LayerNorm => "dX = rstd·(dX̂ − mean(dX̂) − X̂·mean(dX̂·X̂)), dγ = Σ G·X̂, dβ = Σ G",
            GroupNorm { .. } => "layer-norm rule per (sample, group) segment",
            Gelu => "G·(Φ(x) + x·φ(x))",
            Softmax => "Y ⊙ (G − Σ G·Y)",
            Sigmoid => "G·y·(1 − y)",
            Log => "G / x",
            Add => "identity to both operands (reduced over broadcast axes)",
            Mul => "G·B to A, G·A to B (reduced over broadcast axes)",
            Sub => "G to A, −G to B",
            WindowPartition { .. } => "inverse row permutation (window reverse) of G",
            WindowReverse { .. } => "forward row permutation (window partition) of G",
            Reshape => "reshape G back",
            Permute => "permute G by the inverse permutation",
            Concat { .. } => "split G along the concat axis",
            Sum => "broadcast G",
            Mean => "broadcast G / n",
            MaskedSum => "broadcast G onto masked elements, zero elsewhere",
            MaskedMean => "broadcast G / |mask| onto masked elements, zero elsewhere",
        }
    }

    /// True when the op is linear in each argument separately, which makes
    /// central differences exact up to rounding.
    pub fn is_linear(&self) -> bool {
        use OpDescriptor::*;
        !matches!(self, LayerNorm | GroupNorm { .. } | Gelu | Softmax | Sigmoid | Log)
    }

    pub fn tolerance(&self) -> f64 {
        if self.is_linear() {
            LINEAR_TOLERANCE
        } else {
            NONLINEAR_TOLERANCE
        }
    }

    /// Small input shapes exercising the op.
    pub fn default_shapes(&self) -> Vec<Vec<usize>> {
        use OpDescriptor::*;
        match self {
            MatMul => vec![vec![2, 3, 4], vec![2, 4, 5]],
            Conv2d { .. } => vec![vec![1, 2, 8, 8], vec![4, 2, 3, 3], vec![4]],
            BilinearUpsample2x | NearestUpsample2x => vec![vec![1, 2, 3, 3]],
            AdaptiveAvgPool { .. } => vec![vec![1, 2, 5, 7]],
            LayerNorm => vec![vec![3, 5], vec![5], vec![5]],
            GroupNorm { .. } => vec![vec![2, 4, 3, 3], vec![4], vec![4]],
            Gelu | Sigmoid | Log | Sum | Mean | MaskedSum | MaskedMean => vec![vec![3, 4]],
            Softmax => vec![vec![4, 5]],
            Add | Mul | Sub => vec![vec![2, 3], vec![2, 3]],
            WindowPartition { .. } => vec![vec![1, 4, 4, 3]],
            WindowReverse { .. } => vec![vec![4, 4, 3]],
            Reshape => vec![vec![2, 3, 4]],
            Permute => vec![vec![2, 3, 4]],
            Concat { .. } => vec![vec![2, 3, 4], vec![2, 2, 4]],
        }
    }

    fn positive_domain(&self) -> bool {
        matches!(self, OpDescriptor::Log)
    }

    /// Records the op on `tape`.
    pub fn apply<'t>(&self, inputs: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
        use OpDescriptor::*;
        let arity = match self {
            MatMul | Add | Mul | Sub => 2,
            LayerNorm | GroupNorm { .. } => 3,
            Conv2d { .. } if inputs.len() == 2 => 2,
            Conv2d { .. } => 3,
            Concat { .. } => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            bail!(Argument, "{} takes {arity} inputs, got {}", self.name(), inputs.len());
        }
        let x = inputs[0];
        match self {
            MatMul => x.matmul(inputs[1]),
            Conv2d { stride, pad } => x.conv2d(inputs[1], inputs.get(2).copied(), *stride, *pad),
            BilinearUpsample2x => x.upsample_bilinear(2),
            NearestUpsample2x => x.upsample_nearest(2),
            AdaptiveAvgPool { out_h, out_w } => x.adaptive_avg_pool(*out_h, *out_w),
            LayerNorm => x.layer_norm(inputs[1], inputs[2], 1e-5),
            GroupNorm { groups } => x.group_norm(inputs[1], inputs[2], *groups, 1e-5),
            Gelu => Ok(x.gelu()),
            Softmax => x.softmax(),
            Sigmoid => Ok(x.sigmoid()),
            Log => Ok(x.log()),
            Add => x.add(inputs[1]),
            Mul => x.mul(inputs[1]),
            Sub => x.sub(inputs[1]),
            WindowPartition { window, shift } => x.window_partition(*window, *shift),
            WindowReverse { window, shift, height, width } => x.window_reverse(*window, *shift, *height, *width),
            Reshape => {
                let n = numel(&x.shape());
                x.reshape(&[n])
            }
            Permute => {
                let nd = x.shape().len();
                let perm: Vec<usize> = (0..nd).rev().collect();
                x.permute(&perm)
            }
            Concat { axis } => Var::concat(inputs, *axis),
            Sum => Ok(x.sum()),
            Mean => Ok(x.mean()),
            MaskedSum => x.masked_sum(&test_mask(numel(&x.shape()))),
            MaskedMean => x.masked_mean(&test_mask(numel(&x.shape()))),
        }
    }
}

impl fmt::Display for OpDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn test_mask(n: usize) -> Vec<bool> {
    (0..n).map(|i| i % 3 != 1).collect()
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Largest `|g_ad − g_fd| / max(1, |g_fd|)` over every input element, where
/// `g_fd` is the central difference with the given step.
///
/// `f` must record a scalar on the tape it is handed.
pub fn max_gradient_error<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            bail!(Argument, "gradient check target must be scalar, got {:?}", v.shape());
        }
        Ok(v.item())
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
    drop(grads);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, ga) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let err = (ga.data()[j] - fd).abs() / fd.abs().max(1.0);
            if !err.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Random inputs for `op` in float64, seeded.
pub fn random_inputs(op: &OpDescriptor, input_shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = if op.positive_domain() { (0.5, 2.0) } else { (-1.0, 1.0) };
    input_shapes.iter().map(|s| Tensor::from_fn(s, |_| rng.random_range(lo..hi))).collect()
}

/// Compares the reverse-mode gradient of a random scalar projection of the
/// op output against central finite differences (float64, step `1e-4`).
pub fn grad_check(op: &OpDescriptor, input_shapes: &[Vec<usize>], seed: u64) -> Result<GradCheckReport> {
    if input_shapes.iter().flatten().any(|&d| d > 8 || d == 0) {
        bail!(Argument, "gradient checks take extents in 1..=8, got {:?}", input_shapes);
    }
    let inputs = random_inputs(op, input_shapes, seed);

    // output shape, for the projection vector
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        op.apply(&vars)?.shape()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let projection = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));

    let err = max_gradient_error(&inputs, FD_STEP, |tape, vars| {
        let out = op.apply(vars)?;
        let r = tape.constant(projection.clone());
        Ok(out.mul(r)?.sum())
    })?;
    let tolerance = op.tolerance();
    Ok(GradCheckReport {
        op_name: String::from(op.name()),
        max_rel_error: err,
        step: FD_STEP,
        tolerance,
        passed: err <= tolerance,
    })
}
