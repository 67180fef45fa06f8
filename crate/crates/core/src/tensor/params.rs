use std::collections::HashMap;
use std::ops::Index;

use super::dense::{Precision, Tensor};
use super::tape::{Tape, Var};
use crate::error::{contract, Result};

/// Handle of one named tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors: trainable parameters plus
/// non-trainable buffers (router biases). Insertion order is the canonical
/// order used by optimizers and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        self.insert(name.into(), t, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        self.insert(name.into(), t, false)
    }

    fn insert(&mut self, name: String, t: Tensor, trainable: bool) -> Result<ParamId> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return contract(format!("invalid parameter name {name:?}"));
        }
        if self.index.contains_key(&name) {
            return contract(format!("duplicate parameter {name}"));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        Ok(ParamId(id))
    }

    /// Adds a trainable tensor drawn from the `(seed, name)` stream.
    pub fn add_normal(&mut self, seed: u64, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = super::rng::normal_tensor(seed, name, shape, std);
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Scalar count over trainable tensors.
    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &tr)| tr)
            .map(|(t, _)| t.numel())
            .sum()
    }

    /// Puts every tensor on `tape`: trainable tensors as gradient leaves,
    /// buffers as constants.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .zip(&self.trainable)
                .map(|(t, &tr)| tape.leaf(t.clone(), tr))
                .collect(),
        }
    }

    /// Puts every tensor on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    pub fn round_to(&mut self, precision: Precision) {
        for t in &mut self.tensors {
            precision.round_slice(t.data_mut());
        }
    }

    /// True when both stores hold the same names, shapes and trainability.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.trainable == other.trainable
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Wraps vars that line up index-for-index with a store.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    /// Gradients after `backward`, aligned with the store; `None` for buffers.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}
