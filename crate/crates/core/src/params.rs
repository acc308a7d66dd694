//! Named parameter storage shared by the backbone, adapters and heads.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{AlopeError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

/// Graph nodes for every parameter of one store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AlopeError::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = vec![T::zero(); value.len()];
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replaces a value in place, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(AlopeError::shape("assign", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Adds every parameter to `g` as a leaf; frozen ones do not track gradients.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| g.leaf(p.value.clone(), p.trainable))
                .collect(),
        )
    }

    /// Adds gradients from a completed backward pass into the trainable parameters.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &Bound) {
        for (p, &node) in self.params.iter_mut().zip(&bound.0) {
            if !p.trainable {
                continue;
            }
            if let Some(gr) = g.grad(node) {
                for (acc, &v) in p.grad.iter_mut().zip(gr) {
                    *acc += v;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Squared L2 norm of all trainable gradients.
    pub fn grad_sq_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter())
            .map(|&v| v.as_f64() * v.as_f64())
            .sum()
    }

    pub fn scale_grads(&mut self, factor: T) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            p.grad.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// SHA-256 over names and values of the parameters selected by `filter`.
    pub fn digest(&self, filter: impl Fn(&Param<T>) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            h.update(p.name.as_bytes());
            for &v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Clips the joint gradient norm of `stores` to `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(stores: &mut [&mut ParamStore<T>], max_norm: Option<f64>) -> f64 {
    let norm = stores.iter().map(|s| s.grad_sq_norm()).sum::<f64>().sqrt();
    if let Some(max) = max_norm {
        if norm > max && norm.is_finite() {
            let factor = T::lit(max / (norm + 1e-12));
            for s in stores.iter_mut() {
                s.scale_grads(factor);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let b = store.insert("b", Tensor::vector(vec![3.0, 4.0]), false).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let s = g.mul(bound.node(a), bound.node(b)).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        store.accumulate_grads(&g, &bound);
        assert_eq!(store.get(a).grad, vec![3.0, 4.0]);
        assert_eq!(store.get(b).grad, vec![0.0, 0.0]);
        assert_eq!(store.trainable_count(), 2);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::vector(vec![0.0, 0.0]), true).unwrap();
        store.get_mut(w).grad = vec![3.0, 4.0];
        let norm = clip_grad_norm(&mut [&mut store], Some(1.0));
        assert_eq!(norm, 5.0);
        let g = &store.get(w).grad;
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1.0).abs() < 1e-9);
    }
}
