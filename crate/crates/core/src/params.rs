//! Parameter registry and per-tape bindings.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbanet_autograd::{GradTape, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Owns every trainable tensor of a model under a unique name, in
/// registration order. The order fixes optimizer update order and the
/// checkpoint layout.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Registers `t` under `name`.
    ///
    /// # Panics
    /// If `name` is already taken; model builders generate names, so a clash
    /// is a programming error.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "parameter {name:?} registered twice");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `(-bound, bound)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.insert(name, t)
    }

    pub fn full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }
}

/// Parameters of a store recorded as leaves of one tape.
pub struct Ctx<'t> {
    tape: &'t GradTape,
    vars: Vec<Var<'t>>,
}

impl<'t> Ctx<'t> {
    /// Every parameter becomes a gradient-requiring leaf.
    pub fn bind(tape: &'t GradTape, store: &ParamStore) -> Self {
        Self { tape, vars: store.tensors.iter().map(|t| tape.param(t)).collect() }
    }

    /// Every parameter becomes a constant (inference, finite differences).
    pub fn frozen(tape: &'t GradTape, store: &ParamStore) -> Self {
        Self { tape, vars: store.tensors.iter().map(|t| tape.constant(t.clone())).collect() }
    }

    /// Uses already-recorded leaves, in registry order.
    pub fn from_vars(tape: &'t GradTape, vars: &[Var<'t>]) -> Self {
        Self { tape, vars: vars.to_vec() }
    }

    pub fn tape(&self) -> &'t GradTape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}
