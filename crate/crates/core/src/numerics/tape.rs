//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation on a [`Var`] appends one node holding its forward value.
//! [`Tape::backward`] walks the tape once in reverse and returns gradients for
//! leaf nodes. A tape is built for one forward pass and then dropped.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};

use super::kernels::ConvGeom;
use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{bail, Result};

/// A differentiable operation defined outside the numerics module.
///
/// `backward` receives the upstream gradient (shaped like `output`), the
/// forward input values and, per input, whether a gradient is wanted.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ResampleMode {
    Bilinear,
    Nearest,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Add {
        bcast: bool,
    },
    Sub {
        bcast: bool,
    },
    Mul {
        bcast: bool,
    },
    Scale(T),
    AddScalar,
    MatMul {
        trans_b: bool,
        bcast_b: bool,
    },
    Conv2d {
        geom: ConvGeom,
        has_bias: bool,
    },
    Resample(ResampleMode),
    AdaptivePool,
    LayerNorm {
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GroupNorm {
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        cdf: Vec<T>,
    },
    Sigmoid,
    Log,
    Softmax,
    /// Row permutation over rows of length `c`; `gather` is `out = in[map]`.
    Rows {
        map: Vec<usize>,
        c: usize,
        gather: bool,
    },
    Reshape,
    Permute(Vec<usize>),
    Concat {
        axis: usize,
    },
    Sum,
    Mean,
    MaskedSum {
        mask: Vec<bool>,
    },
    MaskedMean {
        mask: Vec<bool>,
        count: usize,
    },
    Custom(Box<dyn CustomOp<T>>),
}

pub(crate) struct Node<T: Real> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub inputs: Vec<usize>,
    pub requires_grad: bool,
    pub name: &'static str,
    pub scope: &'static str,
}

/// One recorded forward operation, for structural checks on a model.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub scope: &'static str,
    pub op: &'static str,
    pub input_shapes: Vec<Vec<usize>>,
    pub output_shape: Vec<usize>,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    scope: RefCell<&'static str>,
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> core::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), scope: RefCell::new("") }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf node. Gradients are collected for it when `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
            name: "leaf",
            scope: *self.scope.borrow(),
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Sets the label attached to subsequently recorded nodes; returns the
    /// previous label.
    pub fn set_scope(&self, scope: &'static str) -> &'static str {
        core::mem::replace(&mut *self.scope.borrow_mut(), scope)
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize], name: &'static str) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node { value, op, inputs: inputs.to_vec(), requires_grad, name, scope: *self.scope.borrow() });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records a node computed outside this module.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, T>],
        output: Tensor<T>,
        op: impl CustomOp<T> + 'static,
    ) -> Var<'t, T> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let name = op.name();
        self.push(output, Op::Custom(Box::new(op)), &ids, name)
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| TraceEntry {
                scope: n.scope,
                op: n.name,
                input_shapes: n.inputs.iter().map(|&i| nodes[i].value.shape().to_vec()).collect(),
                output_shape: n.value.shape().to_vec(),
            })
            .collect()
    }

    /// Gradients of a one-element `loss` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            bail!(Argument, "backward needs a scalar, got shape {:?}", root.value.shape());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::ONE));
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| nodes[j].requires_grad).collect();
            let input_grads = super::ops::backward(&node.op, &g, &inputs, &node.value, &needs);
            for (k, ig) in input_grads.into_iter().enumerate() {
                let Some(ig) = ig else { continue };
                if !needs[k] {
                    continue;
                }
                let j = node.inputs[k];
                debug_assert_eq!(ig.shape(), nodes[j].value.shape(), "grad shape for {}", node.name);
                match grads[j].as_mut() {
                    Some(acc) => acc.add_assign(&ig),
                    None => grads[j] = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Gradient, or zeros shaped like the variable when it did not reach it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> bool {
        core::ptr::eq(self.tape, other.tape)
    }
}

pub(crate) fn zeros_like<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(t.shape().to_vec(), vec![T::ZERO; t.numel()])
}
