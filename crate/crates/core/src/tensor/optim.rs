use std::collections::BTreeMap;

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradients keyed by parameter name.
pub type Gradients<S> = BTreeMap<String, Tensor<S>>;

/// Named trainable tensors. Iteration order is the lexicographic name order,
/// which is also the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn shapes(&self) -> BTreeMap<String, Shape> {
        self.params.iter().map(|(k, v)| (k.clone(), v.shape())).collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, Default)]
pub struct SgdState<S> {
    velocity: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new() -> Self {
        SgdState { velocity: BTreeMap::new() }
    }
}

/// One SGD step with momentum: `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &Gradients<S>,
    state: &mut SgdState<S>,
    learning_rate: S,
    momentum: S,
) -> Result<()> {
    if learning_rate <= S::zero() {
        return Err(Error::invalid("sgd_step", "learning rate must be positive"));
    }
    if momentum < S::zero() || momentum >= S::one() {
        return Err(Error::invalid("sgd_step", "momentum must lie in [0, 1)"));
    }
    if let Some(missing) = params.names().find(|n| !grads.contains_key(*n)) {
        return Err(Error::invalid("sgd_step", format!("no gradient for parameter `{missing}`")));
    }
    for (name, p) in params.params.iter_mut() {
        let g = &grads[name];
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch { op: "sgd_step", left: p.shape().to_vec(), right: g.shape().to_vec() });
        }
        let v = state.velocity.entry(name.clone()).or_insert_with(|| vec![S::zero(); p.numel()]);
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= learning_rate * *vv;
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut Gradients<S>, max_norm: S) -> S {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| v * v)
        .sum::<S>()
        .sqrt();
    if norm > max_norm && norm > S::zero() {
        let f = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= f;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v));
        s
    }

    fn grad(v: f64) -> Gradients<f64> {
        [("p".to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(1.25);
        let mut st = SgdState::new();
        sgd_step(&mut p, &grad(0.0), &mut st, 0.1, 0.9).unwrap();
        assert_eq!(p.get("p").unwrap().data(), &[1.25]);
    }

    #[test]
    fn plain_step() {
        let mut p = store(1.0);
        let mut st = SgdState::new();
        sgd_step(&mut p, &grad(1.0), &mut st, 0.1, 0.0).unwrap();
        assert!((p.get("p").unwrap().data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // v1 = g1, p1 = p0 - lr g1; v2 = 0.9 g1 + g2, p2 = p1 - lr v2.
        let (p0, g1, g2, lr, mu) = (2.0, 0.5, -0.25, 0.1, 0.9);
        let v1 = g1;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + g2;
        let p2 = p1 - lr * v2;

        let mut p = store(p0);
        let mut st = SgdState::new();
        sgd_step(&mut p, &grad(g1), &mut st, lr, mu).unwrap();
        sgd_step(&mut p, &grad(g2), &mut st, lr, mu).unwrap();
        assert!((p.get("p").unwrap().data()[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = store(1.0);
        let mut st = SgdState::new();
        let err = sgd_step(&mut p, &Gradients::new(), &mut st, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("`p`"));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g: Gradients<f64> = [
            ("a".to_string(), Tensor::scalar(3.0)),
            ("b".to_string(), Tensor::scalar(4.0)),
        ]
        .into_iter()
        .collect();
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert!((g["b"].data()[0] - 0.8).abs() < 1e-15);
    }
}
