use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        self.frozen.push(false);
        ParamId(self.names.len() - 1)
    }

    /// Uniform init in `±sqrt(3 / fan_in)` (unit-variance preserving).
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (3.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be present.
    pub fn load_from<'a>(&mut self, mut source: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = source(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Per-parameter gradients from one backward pass.
#[derive(Debug)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    #[cfg(test)]
    pub(crate) fn from_tensors(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

/// A tape bound to a parameter set. Parameters are recorded lazily on first use.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ParamSet,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'p> Graph<'p> {
    /// Graph whose parameters are differentiated.
    pub fn train(params: &'p ParamSet) -> Self {
        Self { tape: Tape::new(), params, bound: vec![None; params.len()], train: true }
    }

    /// Graph whose parameters are recorded as constants.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self { tape: Tape::new(), params, bound: vec![None; params.len()], train: false }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.train && !self.params.is_frozen(id) { self.tape.leaf(t) } else { self.tape.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }

    /// Backpropagates `loss`; unused or frozen parameters receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads> {
        let mut g = self.tape.backward(loss)?;
        let grads = self
            .params
            .ids()
            .map(|id| {
                let shape = self.params.get(id).shape();
                match self.bound[id.0].and_then(|v| g.take(v)) {
                    Some(data) => Tensor::new(shape, data).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect();
        Ok(ParamGrads { grads })
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
