//! Parameter storage and the affine layer shared by every module.
//!
//! All trainable tensors of a network live in one [`ParamStore`]; layers hold
//! [`ParamId`]s into it. Binding the store to a [`Tape`] yields a [`Bound`]
//! map from ids to tape variables.

use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Classifier,
    Adaptation,
    /// Never updated.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) {
        self.params[id.0].group = group;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Places every parameter on the tape; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.group != ParamGroup::Frozen))
            .collect();
        Bound { vars }
    }
}

/// Tape variables for the parameters of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Uses caller-provided variables, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `y = x·Wᵀ + b` with `W: out×in`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Affine {
    /// Uniform `±1/sqrt(in)` initialisation for weights and bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / math::sqrt(input_dim.max(1) as f64);
        let mut uniform = |n: usize| -> Tensor {
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(alloc::vec![n], data).expect("1-D")
        };
        let w = uniform(output_dim * input_dim)
            .reshape(&[output_dim, input_dim])
            .expect("weight shape");
        let b = uniform(output_dim);
        Self::from_tensors(store, name, w, b, group)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input_dim: usize, output_dim: usize, group: ParamGroup) -> Self {
        Self::from_tensors(
            store,
            name,
            Tensor::zeros(&[output_dim, input_dim]),
            Tensor::zeros(&[output_dim]),
            group,
        )
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor, group: ParamGroup) -> Self {
        let (output_dim, input_dim) = (weight.shape()[0], weight.shape()[1]);
        let weight = store.add(alloc::format!("{name}.weight"), group, weight);
        let bias = store.add(alloc::format!("{name}.bias"), group, bias);
        Affine {
            weight,
            bias,
            input_dim,
            output_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound.var(self.weight), bound.var(self.bias))
    }

    /// Copies the weights and bias of `other` into `self`.
    pub fn copy_from(&self, store: &mut ParamStore, other: &Affine) {
        let w = store.get(other.weight).clone();
        let b = store.get(other.bias).clone();
        *store.get_mut(self.weight) = w;
        *store.get_mut(self.bias) = b;
    }
}

/// He-normal tensor for a convolution kernel.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = math::sqrt(2.0 / fan_in.max(1) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
