use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Inserts or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Parameters whose names start with `prefix`, prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Merges `other` into `self` with `prefix` prepended to every name.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (n, t) in other.iter() {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Checks that two stores have the same names in the same order with
    /// the same shapes.
    pub fn ensure_congruent(&self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(TensorError::TreeMismatch(format!(
                "{} vs {} parameters",
                self.len(),
                other.len()
            )));
        }
        for (n, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(TensorError::TreeMismatch(format!(
                    "{n}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Exponential moving average: `teacher <- m * teacher + (1 - m) * student`.
pub fn ema_update<T: Scalar>(
    teacher: &mut ParamStore<T>,
    student: &ParamStore<T>,
    momentum: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(TensorError::Invalid(format!("momentum {momentum} outside [0,1]")));
    }
    teacher.ensure_congruent(student)?;
    let m = T::lit(momentum);
    let one_m = T::lit(1.0 - momentum);
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        if momentum == 1.0 {
            continue;
        }
        if momentum == 0.0 {
            t.data_mut().copy_from_slice(s.data());
            continue;
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + one_m * sv;
        }
    }
    Ok(())
}

/// Lazily binds parameters of a store as graph leaves.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    trainable: bool,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Binder {
            store,
            trainable,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| TensorError::Invalid(format!("missing parameter {name}")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = g.leaf(self.store.tensors[i].clone(), self.trainable)?;
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Collects gradients for every parameter into store order. Parameters
    /// never bound get zeros.
    pub fn collect(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.store
            .tensors
            .iter()
            .zip(&self.bound)
            .map(|(t, b)| {
                b.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }

    pub fn bound_vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.bound.iter().flatten().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[2, 2], v));
        s.insert("b", Tensor::full(&[2], v));
        s
    }

    #[test]
    fn ema_momentum_one_keeps_teacher() {
        let mut t = store(2.0);
        ema_update(&mut t, &store(0.0), 1.0).unwrap();
        assert_eq!(t, store(2.0));
    }

    #[test]
    fn ema_momentum_zero_copies_student() {
        let mut t = store(2.0);
        ema_update(&mut t, &store(5.0), 0.0).unwrap();
        assert_eq!(t, store(5.0));
    }

    #[test]
    fn ema_half() {
        let mut t = store(2.0);
        ema_update(&mut t, &store(0.0), 0.5).unwrap();
        assert_eq!(t, store(1.0));
    }

    #[test]
    fn ema_tree_mismatch() {
        let mut t = store(2.0);
        let mut s = store(0.0);
        s.insert("extra", Tensor::zeros(&[1]));
        assert!(ema_update(&mut t, &s, 0.5).is_err());
        assert!(ema_update(&mut t, &store(0.0), 1.5).is_err());
    }
}
