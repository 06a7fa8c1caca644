//! Named parameter storage.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered map from dot-separated parameter names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Parameters recorded on a tape for one forward pass.
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl Bound {
    /// Records every parameter as a leaf. With `trainable = false` the
    /// leaves are constants and no backward rules are recorded.
    pub fn new(tape: &mut Tape, params: &Params, trainable: bool) -> Self {
        let mut vars = HashMap::with_capacity(params.len());
        let mut order = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let v = tape.leaf(t.clone(), trainable);
            vars.insert(name.to_string(), v);
            order.push((name.to_string(), v));
        }
        Bound { vars, order }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients in parameter order; parameters the loss does not reach
    /// get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<(String, Tensor)> {
        self.order
            .iter()
            .map(|(name, v)| {
                let g = tape
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(*v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}
