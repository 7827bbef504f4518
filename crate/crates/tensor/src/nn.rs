use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named, insertion-ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable))).collect();
        BoundParams { vars }
    }
}

/// Tape handles for a [`ParamStore`] bound to one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn empty() -> Self {
        Self { vars: IndexMap::new() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Affine map `x · Wᵀ + b` with `W: [out, in]`, `b: [out]`.
#[derive(Clone, Debug)]
pub struct LinearBlock {
    weight: String,
    bias: String,
    in_dim: usize,
    out_dim: usize,
}

impl LinearBlock {
    /// Registers `{prefix}.weight` (uniform in ±√(1/in)) and a zero
    /// `{prefix}.bias` in `store`.
    pub fn init(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..=bound)).collect();
        let block = Self::named(prefix, in_dim, out_dim);
        store.insert(&block.weight, Tensor::new(vec![out_dim, in_dim], w).unwrap());
        store.insert(&block.bias, Tensor::zeros(&[out_dim]));
        block
    }

    /// Refers to parameters already present under `prefix`.
    pub fn named(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self { weight: format!("{prefix}.weight"), bias: format!("{prefix}.bias"), in_dim, out_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    /// `x: [rows, in]` → `[rows, out]`.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let w = params.var(&self.weight)?;
        let b = params.var(&self.bias)?;
        let y = tape.matmul_nt(x, w)?;
        tape.add(y, b)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    first: LinearBlock,
    second: LinearBlock,
}

impl MlpBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: LinearBlock::init(store, &format!("{prefix}.0"), in_dim, hidden, rng),
            second: LinearBlock::init(store, &format!("{prefix}.1"), hidden, out_dim, rng),
        }
    }

    pub fn named(prefix: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            first: LinearBlock::named(&format!("{prefix}.0"), in_dim, hidden),
            second: LinearBlock::named(&format!("{prefix}.1"), hidden, out_dim),
        }
    }

    pub fn layers(&self) -> [&LinearBlock; 2] {
        [&self.first, &self.second]
    }

    pub fn num_scalars(&self) -> usize {
        self.first.num_scalars() + self.second.num_scalars()
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, params, x)?;
        let h = tape.relu(h);
        self.second.forward(tape, params, h)
    }
}
