//! Named parameter storage and the per-forward binding of parameters to tape
//! leaves.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{bail, Result};
use crate::numerics::{Gradients, Real, Tape, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Layer depth for layer-wise learning-rate decay.
    pub depth: usize,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: String, value: Tensor<T>, depth: usize, decay: bool) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            bail!(Internal, "parameter {name} registered twice");
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, depth, decay });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn max_depth(&self) -> usize {
        self.params.iter().map(|p| p.depth).max().unwrap_or(0)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), depth: p.depth, decay: p.decay })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every parameter of `src` whose name starts with `prefix` into
    /// the parameter of the same name here. Returns how many were copied.
    pub fn load_prefix(&mut self, src: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in src.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let Some(id) = self.find(&p.name) else {
                bail!(Config, "parameter {} has no counterpart", p.name);
            };
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                bail!(Config, "parameter {} has shape {:?}, expected {:?}", p.name, p.value.shape(), dst.value.shape());
            }
            dst.value = p.value.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

/// Binds store parameters to tape leaves lazily, once per forward pass.
pub struct Ctx<'t, 's, T: Real> {
    pub tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    leaves: RefCell<Vec<Option<Var<'t, T>>>>,
    trainable: bool,
}

impl<'t, 's, T: Real> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self { tape, store, leaves: RefCell::new(alloc::vec![None; store.len()]), trainable }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.leaves.borrow()[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).value.clone(), self.trainable);
        self.leaves.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }

    /// Gradient per store parameter, `None` for parameters the forward pass
    /// did not touch.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.leaves.borrow().iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}
