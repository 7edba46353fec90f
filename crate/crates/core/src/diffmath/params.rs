use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<NamedTensor>", into = "Vec<NamedTensor>")]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    tensor: Tensor,
}

impl From<Vec<NamedTensor>> for ParamStore {
    fn from(v: Vec<NamedTensor>) -> Self {
        let mut s = ParamStore::new();
        for nt in v {
            s.insert(nt.name, nt.tensor);
        }
        s
    }
}

impl From<ParamStore> for Vec<NamedTensor> {
    fn from(s: ParamStore) -> Self {
        s.entries
            .into_iter()
            .map(|(name, tensor)| NamedTensor { name, tensor })
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = t;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Registers every tensor as a differentiable leaf on `tape`.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(t.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Registers a subset as differentiable and the rest as constants.
    pub fn register_with(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable(n) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }
}

/// Tape handles for a registered [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Collects gradients into a store shaped like `like`.
    pub fn gradients(&self, grads: &Gradients, like: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, var) in &self.vars {
            let t = like.get(name).expect("registered parameter");
            out.insert(name.clone(), grads.get_or_zeros(*var, t));
        }
        out
    }
}
