//! Named parameter storage and its binding into a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Hierarchically named parameters, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
    index: HashMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<R>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<R>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub(crate) fn tensor_at(&self, i: usize) -> &Tensor<R> {
        &self.tensors[i]
    }

    pub(crate) fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<R> {
        &mut self.tensors[i]
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        let keep: Vec<bool> = self.names.iter().map(|n| !n.starts_with(prefix)).collect();
        let mut it = keep.iter();
        self.names.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.tensors.retain(|_| *it.next().unwrap());
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }
}

/// Gradients aligned with a [`ParamStore`]'s order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<R> {
    grads: Vec<Tensor<R>>,
}

impl<R: Real> ParamGrads<R> {
    pub fn zeros_like(store: &ParamStore<R>) -> Self {
        Self {
            grads: store
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn from_tensors(grads: Vec<Tensor<R>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, i: usize) -> &Tensor<R> {
        &self.grads[i]
    }

    pub fn by_name<'a>(&'a self, store: &ParamStore<R>, name: &str) -> Option<&'a Tensor<R>> {
        store.position(name).map(|i| &self.grads[i])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds another gradient set into this one, in parameter order.
    pub fn accumulate(&mut self, other: &ParamGrads<R>) -> Result<()> {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_scaled(b, R::one())?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        let f = R::from_f64c(factor);
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = *v * f;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| {
                let x = v.to_f64c();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Lazily places parameters on a graph as trainable leaves.
pub struct Binder<'a, R> {
    store: &'a ParamStore<R>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, R: Real> Binder<'a, R> {
    pub fn new(store: &'a ParamStore<R>) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Binds parameters as constants: the forward pass records no gradient path to them.
    pub fn frozen(store: &'a ParamStore<R>) -> Self {
        Self {
            trainable: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore<R> {
        self.store
    }

    pub fn get(&mut self, graph: &mut Graph<R>, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let t = self.store.tensor_at(i).clone();
        let v = if self.trainable {
            graph.param(t)
        } else {
            graph.constant(t)
        };
        self.vars[i] = Some(v);
        Ok(v)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.store.position(name).and_then(|i| self.vars[i])
    }

    /// Adds the gradients of every bound parameter into `out`.
    pub fn collect(&self, grads: &Gradients<R>, out: &mut ParamGrads<R>) -> Result<()> {
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                out.grads[i].add_scaled(g, R::one())?;
            }
        }
        Ok(())
    }
}

pub fn normal_init<R: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<R> {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| R::from_f64c(dist.sample(rng))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("length matches shape")
}
