//! Parameterized building blocks.

use alloc::format;

use rand_chacha::ChaCha8Rng;

use super::params::{Ctx, ParamId, ParamStore};
use crate::error::Result;
use crate::numerics::init::trunc_normal;
use crate::numerics::{Real, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const NORM_EPS: f64 = 1e-5;
const GN_GROUPS: usize = 8;

/// Registers freshly initialized parameters in a store.
pub(crate) struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    pub fn weight(&mut self, name: &str, shape: &[usize], depth: usize) -> Result<ParamId> {
        let v = trunc_normal(shape, INIT_STD, self.rng);
        self.store.add(name.into(), v, depth, true)
    }

    /// Zero-initialized parameter exempt from weight decay (biases).
    pub fn zeros(&mut self, name: &str, shape: &[usize], depth: usize) -> Result<ParamId> {
        self.store.add(name.into(), Tensor::zeros(shape), depth, false)
    }

    /// Small random parameter exempt from weight decay (bias tables, tokens).
    pub fn free(&mut self, name: &str, shape: &[usize], depth: usize) -> Result<ParamId> {
        let v = trunc_normal(shape, INIT_STD, self.rng);
        self.store.add(name.into(), v, depth, false)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], depth: usize) -> Result<ParamId> {
        self.store.add(name.into(), Tensor::full(shape, T::ONE), depth, false)
    }
}

/// `y = x·Wᵀ + b` over the last axis; `W` is out×in.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        depth: usize,
    ) -> Result<Self> {
        let w = b.weight(&format!("{name}.weight"), &[dout, din], depth)?;
        let bias = if bias { Some(b.zeros(&format!("{name}.bias"), &[dout], depth)?) } else { None };
        Ok(Self { w, b: bias })
    }

    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul_t(cx.p(self.w))?;
        match self.b {
            Some(b) => y.add(cx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    g: ParamId,
    b: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize, depth: usize) -> Result<Self> {
        Ok(Self {
            g: b.ones(&format!("{name}.weight"), &[dim], depth)?,
            b: b.zeros(&format!("{name}.bias"), &[dim], depth)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(cx.p(self.g), cx.p(self.b), NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        depth: usize,
    ) -> Result<Self> {
        let w = b.weight(&format!("{name}.weight"), &[cout, cin, k, k], depth)?;
        let bias = if bias { Some(b.zeros(&format!("{name}.bias"), &[cout], depth)?) } else { None };
        Ok(Self { w, b: bias, stride, pad: if stride == 1 { k / 2 } else { 0 } })
    }

    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(cx.p(self.w), self.b.map(|b| cx.p(b)), self.stride, self.pad)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Convolution (no bias), group normalization and GELU.
#[derive(Clone, Debug)]
pub(crate) struct ConvModule {
    conv: Conv,
    g: ParamId,
    b: ParamId,
    groups: usize,
}

impl ConvModule {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        depth: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(b, &format!("{name}.conv"), cin, cout, k, 1, false, depth)?,
            g: b.ones(&format!("{name}.gn.weight"), &[cout], depth)?,
            b: b.zeros(&format!("{name}.gn.bias"), &[cout], depth)?,
            groups: gcd(GN_GROUPS, cout),
        })
    }

    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv.forward(cx, x)?;
        Ok(y.group_norm(cx.p(self.g), cx.p(self.b), self.groups, NORM_EPS)?.gelu())
    }
}

/// NCHW → NHWC.
pub(crate) fn to_channels_last<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.permute(&[0, 2, 3, 1])
}

/// NHWC → NCHW.
pub(crate) fn to_channels_first<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.permute(&[0, 3, 1, 2])
}
