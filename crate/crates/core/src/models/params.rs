//! Named parameter groups and their binding onto a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::scalar::Scalar;

use super::ModelError;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    groups: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { groups: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a group, replacing any existing group with the same name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.groups.iter_mut().find(|(n, _)| *n == name) {
            Some((_, slot)) => *slot = value,
            None => self.groups.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.groups.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.groups.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.groups.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Number of groups.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.groups.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every group on `tape`. Groups named in `frozen` become
    /// constants and receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, frozen: &[&str]) -> BoundParams<'t, T> {
        let vars = self
            .groups
            .iter()
            .map(|(name, t)| {
                let var = if frozen.contains(&name.as_str()) { tape.constant(t.clone()) } else { tape.leaf(t.clone()) };
                (name.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    /// Pairs already-registered nodes with the group names, in store order.
    /// Used to differentiate with respect to externally created leaves.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t, T>]) -> Result<BoundParams<'t, T>, ModelError> {
        if vars.len() != self.groups.len() {
            return Err(ModelError::Shape(format!("{} nodes for {} parameter groups", vars.len(), self.groups.len())));
        }
        Ok(BoundParams { vars: self.groups.iter().zip(vars).map(|((n, _), v)| (n.clone(), *v)).collect() })
    }

    /// The group tensors in store order.
    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.groups.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Registers every group on `tape` as a constant, for inference.
    pub fn bind_constant<'t>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let vars = self.groups.iter().map(|(name, t)| (name.clone(), tape.constant(t.clone()))).collect();
        BoundParams { vars }
    }
}

/// Parameter groups registered on one tape.
pub struct BoundParams<'t, T> {
    vars: Vec<(String, Var<'t, T>)>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>, ModelError> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Glorot-uniform convolution kernel `[cout, cin, k, k]` and zero bias,
/// stored as `{prefix}.w` and `{prefix}.b`.
pub(crate) fn add_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    let fan = ((cin + cout) * k * k) as f64;
    let a = (6.0 / fan).sqrt();
    add_conv_uniform(store, rng, prefix, cin, cout, k, a);
}

/// Convolution kernel drawn uniformly from `[−a, a]` with zero bias.
pub(crate) fn add_conv_uniform<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    a: f64,
) {
    let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::lit(rng.random_range(-a..=a)));
    store.insert(format!("{prefix}.w"), w);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

/// Applies the convolution stored under `prefix`.
pub(crate) fn conv<'t, T: Scalar>(
    tape: &'t Tape<T>,
    p: &BoundParams<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
) -> Result<Var<'t, T>, ModelError> {
    Ok(tape.conv2d(x, p.get(&format!("{prefix}.w"))?, p.get(&format!("{prefix}.b"))?)?)
}
