//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! replays the record in reverse. All model math (LSTMs, the output layer, the
//! emit network and the alignment lattice recursions) is expressed with these
//! ops, so gradients of the training loss flow through the full dynamic
//! programme.

mod graph;
mod tensor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use graph::{log_add_exp, sigmoid, Gradients, Graph, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Arithmetic width used for network values. Lattice recursions always run in
/// 64-bit; in `F32` mode network op outputs and parameters are rounded through
/// `f32`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// `log Σ exp(termᵢ)`; exactly `-inf` when every term is `-inf`.
pub fn log_sum_exp(terms: &[f64]) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::contract("log_sum_exp of an empty list"));
    }
    Ok(graph::log_sum_exp_slice(terms))
}

/// Softmax over `logits`; indices flagged in `mask` get exactly zero mass.
pub fn softmax(logits: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::contract("softmax of an empty vector"));
    }
    if let Some(m) = mask {
        if m.len() != logits.len() || m.iter().all(|&b| b) {
            return Err(Error::contract("softmax mask does not fit the logits"));
        }
    }
    Ok(graph::softmax_masked(logits, mask))
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn round_f32(&mut self) {
        self.tensors.values_mut().for_each(Tensor::round_f32);
    }
}
