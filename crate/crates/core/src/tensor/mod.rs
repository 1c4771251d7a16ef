//! Dense rank-4 tensors, a reverse-mode gradient tape and plain SGD.

mod kernels;
mod optim;
mod tape;

pub use kernels::{conv_output_extent, RoiBox};
pub use optim::{clip_grad_norm, sgd_step, Gradients, ParamStore, SgdState};
pub use tape::{Grads, LossValue, ParamVars, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents in (batch, channel, height, width) order.
pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![S::zero(); numel(&shape)] }
    }

    pub fn full(shape: Shape, value: S) -> Self {
        Tensor { shape, data: vec![value; numel(&shape)] }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: [1, 1, 1, 1], data: vec![value] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> S) -> Self {
        let mut data = Vec::with_capacity(numel(&shape));
        for b in 0..shape[0] {
            for c in 0..shape[1] {
                for y in 0..shape[2] {
                    for x in 0..shape[3] {
                        data.push(f([b, c, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    pub fn at(&self, idx: [usize; 4]) -> S {
        self.data[self.offset(idx)]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<S> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type; used to move between the f32 training path and
    /// the f64 reference path.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    /// Batch item `b` as a `1 x C x H x W` tensor.
    pub fn batch_item(&self, b: usize) -> Tensor<S> {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Stacks `1 x C x H x W` tensors along the batch axis.
    pub fn stack(items: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut batch = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.to_vec(),
                    right: t.shape.to_vec(),
                });
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: [batch, c, h, w], data })
    }
}
