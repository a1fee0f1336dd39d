//! Named trainable tensors split into optimizer groups.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tape, Tensor, Var};

/// Optimizer group. The autoencoder branch and the graph branch train at
/// different learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Ae,
    St,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore<T> {
    pub entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar count over the given parameters.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).len()).sum()
    }

    pub fn count_group(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Records every parameter on the tape as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.entries.iter().map(|e| tape.param(e.value.clone())).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(pub Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Zero-mean normal with variance `2 / fan_in`.
pub fn kaiming_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
