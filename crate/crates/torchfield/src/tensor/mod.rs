//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only record of executed operations. Every
//! [`Tensor`] is a handle into one tape; running [`Tensor::backward`] on a
//! scalar replays the tape in reverse and populates gradients for every
//! reachable grad-enabled node. Tapes are built per forward pass and freed
//! after backward; a tape is confined to one worker.

mod ops;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use ops::{BinaryKind, Op, ReduceKind, UnaryKind};

/// Flat row-major n-dimensional array of f64.
pub type Arr = ArrayD<f64>;

pub fn arr1(values: &[f64]) -> Arr {
    ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap()
}

pub fn scalar(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[1]), v)
}

struct Node {
    value: Arc<Arr>,
    grad: Option<Arr>,
    grad_enabled: bool,
    /// True if this node is grad-enabled or depends on a grad-enabled node.
    needs_grad: bool,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    spent: bool,
}

/// Ordered record of executed operations for one forward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                spent: false,
            })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Create a leaf node. Gradients accumulate into it iff `grad_enabled`.
    pub fn leaf(&self, value: Arr, grad_enabled: bool) -> Tensor {
        self.leaf_shared(Arc::new(value), grad_enabled)
    }

    /// Leaf from a shared array without copying the data.
    pub fn leaf_shared(&self, value: Arc<Arr>, grad_enabled: bool) -> Tensor {
        self.push(value, Op::Leaf, grad_enabled, grad_enabled)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Arr) -> Tensor {
        self.leaf(value, false)
    }

    fn push(&self, value: Arc<Arr>, op: Op, grad_enabled: bool, needs_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            grad: None,
            grad_enabled,
            needs_grad,
            op,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to one node of a tape. Cheap to clone; values are immutable after
/// construction.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// Shared handle to the value array.
    pub fn value(&self) -> Arc<Arr> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// Gradient populated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Arr> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn grad_enabled(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].grad_enabled
    }

    fn unary(&self, kind: UnaryKind) -> Tensor {
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (ops::unary_forward(kind, &n.value), n.needs_grad)
        };
        self.tape
            .push(Arc::new(value), Op::Unary(kind, self.id), false, needs)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnaryKind::Neg)
    }
    pub fn exp(&self) -> Tensor {
        self.unary(UnaryKind::Exp)
    }
    pub fn log(&self) -> Tensor {
        self.unary(UnaryKind::Log)
    }
    pub fn sin(&self) -> Tensor {
        self.unary(UnaryKind::Sin)
    }
    pub fn cos(&self) -> Tensor {
        self.unary(UnaryKind::Cos)
    }
    pub fn relu(&self) -> Tensor {
        self.unary(UnaryKind::Relu)
    }
    pub fn softplus(&self) -> Tensor {
        self.unary(UnaryKind::Softplus)
    }
    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnaryKind::Sigmoid)
    }
    pub fn sqrt(&self) -> Tensor {
        self.unary(UnaryKind::Sqrt)
    }

    fn binary(&self, other: &Tensor, kind: BinaryKind) -> Result<Tensor> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::Tape("operands belong to different tapes".into()));
        }
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            let value = ops::binary_forward(kind, &a.value, &b.value)?;
            (value, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape.push(
            Arc::new(value),
            Op::Binary(kind, self.id, other.id),
            false,
            needs,
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add)
    }
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub)
    }
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul)
    }
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.value.mapv(|v| v + s), n.needs_grad)
        };
        self.tape
            .push(Arc::new(value), Op::AddScalar(self.id), false, needs)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.value.mapv(|v| v * s), n.needs_grad)
        };
        self.tape
            .push(Arc::new(value), Op::MulScalar(self.id, s), false, needs)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::Tape("operands belong to different tapes".into()));
        }
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            let value = ops::matmul_forward(&a.value, &b.value)?;
            (value, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape.push(
            Arc::new(value),
            Op::Matmul(self.id, other.id),
            false,
            needs,
        ))
    }

    fn reduce(&self, kind: ReduceKind, axis: Option<usize>) -> Result<Tensor> {
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let value = ops::reduce_forward(kind, &n.value, axis)?;
            (value, n.needs_grad)
        };
        Ok(self
            .tape
            .push(Arc::new(value), Op::Reduce(kind, self.id, axis), false, needs))
    }

    /// Sum over all elements, yielding a scalar (shape `[1]`).
    pub fn sum(&self) -> Tensor {
        self.reduce(ReduceKind::Sum, None).unwrap()
    }
    pub fn mean(&self) -> Tensor {
        self.reduce(ReduceKind::Mean, None).unwrap()
    }
    pub fn max(&self) -> Tensor {
        self.reduce(ReduceKind::Max, None).unwrap()
    }
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, Some(axis))
    }
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, Some(axis))
    }
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Max, Some(axis))
    }

    /// Exclusive prefix sum along axis 0: `y[n] = sum_{m<n} x[m]`.
    pub fn cumsum_exclusive(&self) -> Tensor {
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (ops::cumsum_exclusive_forward(&n.value), n.needs_grad)
        };
        self.tape
            .push(Arc::new(value), Op::CumsumExclusive(self.id), false, needs)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            if n.value.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "cannot reshape {:?} into {:?}",
                    n.value.shape(),
                    shape
                )));
            }
            let value = n
                .value
                .to_shape(IxDyn(shape))
                .map_err(|e| Error::Shape(e.to_string()))?
                .to_owned();
            (value, n.needs_grad)
        };
        Ok(self
            .tape
            .push(Arc::new(value), Op::Reshape(self.id), false, needs))
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (value, needs) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            let value = ops::narrow_forward(&n.value, axis, start, len)?;
            (value, n.needs_grad)
        };
        Ok(self.tape.push(
            Arc::new(value),
            Op::Narrow {
                input: self.id,
                axis,
                start,
                len,
            },
            false,
            needs,
        ))
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let tape = first.tape.clone();
        for p in parts {
            if !tape.same_tape(&p.tape) {
                return Err(Error::Tape("operands belong to different tapes".into()));
            }
        }
        let (value, needs) = {
            let inner = tape.inner.borrow();
            let arrs: Vec<&Arr> = parts.iter().map(|p| &*inner.nodes[p.id].value).collect();
            let value = ops::concat_forward(&arrs, axis)?;
            let needs = parts.iter().any(|p| inner.nodes[p.id].needs_grad);
            (value, needs)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(
            Arc::new(value),
            Op::Concat { parts: ids, axis },
            false,
            needs,
        ))
    }

    /// 1D convolution along the sample axis with a per-tap scale.
    ///
    /// `features` is `N x C_in`, `kernel` is `K x C_in x C_out` (K odd),
    /// `scale` is `N x K`. The sequence is treated as independent segments of
    /// `seg_len` samples; indices past a segment edge clamp to the edge.
    pub fn conv1d(
        features: &Tensor,
        kernel: &Tensor,
        scale: &Tensor,
        seg_len: usize,
    ) -> Result<Tensor> {
        let tape = features.tape.clone();
        if !tape.same_tape(&kernel.tape) || !tape.same_tape(&scale.tape) {
            return Err(Error::Tape("operands belong to different tapes".into()));
        }
        let (value, cache, needs) = {
            let inner = tape.inner.borrow();
            let f = &inner.nodes[features.id];
            let k = &inner.nodes[kernel.id];
            let s = &inner.nodes[scale.id];
            let (value, cache) = ops::conv1d_forward(&f.value, &k.value, &s.value, seg_len)?;
            (
                value,
                cache,
                f.needs_grad || k.needs_grad || s.needs_grad,
            )
        };
        Ok(tape.push(
            Arc::new(value),
            Op::Conv1d {
                features: features.id,
                kernel: kernel.id,
                scale: scale.id,
                seg_len,
                cache,
            },
            false,
            needs,
        ))
    }

    /// Fused per-channel batch normalization with affine output:
    /// `y = (x - mean) * scale / sqrt(var + eps) + shift`, where mean and
    /// variance are this batch's axis-0 moments. Gradients flow through the
    /// batch statistics. Also returns the (mean, var) values for
    /// running-statistic updates.
    pub fn batch_norm(
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let tape = x.tape.clone();
        if !tape.same_tape(&scale.tape) || !tape.same_tape(&shift.tape) {
            return Err(Error::Tape("operands belong to different tapes".into()));
        }
        let (value, mean, var, inv_std, needs) = {
            let inner = tape.inner.borrow();
            let xn = &inner.nodes[x.id];
            let sn = &inner.nodes[scale.id];
            let hn = &inner.nodes[shift.id];
            let (value, mean, var, inv_std) =
                ops::batch_norm_forward(&xn.value, &sn.value, &hn.value, eps)?;
            (
                value,
                mean,
                var,
                inv_std,
                xn.needs_grad || sn.needs_grad || hn.needs_grad,
            )
        };
        let out = tape.push(
            Arc::new(value),
            Op::BatchNorm {
                x: x.id,
                scale: scale.id,
                shift: shift.id,
                mean: mean.clone(),
                inv_std,
            },
            false,
            needs,
        );
        Ok((out, mean, var))
    }

    /// Reverse-replay the tape from this scalar, populating gradients.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.spent {
            return Err(Error::Tape(
                "backward already ran on this tape; build a fresh tape per forward pass".into(),
            ));
        }
        if inner.nodes[self.id].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                inner.nodes[self.id].value.shape()
            )));
        }
        inner.spent = true;
        if !inner.nodes[self.id].needs_grad {
            // No grad-enabled inputs reachable: nothing to do.
            return Ok(());
        }
        let mut grads: Vec<Option<Arr>> = Vec::with_capacity(self.id + 1);
        grads.resize_with(self.id + 1, || None);
        grads[self.id] = Some(Arr::ones(inner.nodes[self.id].value.raw_dim()));

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let contributions = {
                let nodes = &inner.nodes;
                ops::vjp(&nodes[id].op, &g, &nodes[id].value, nodes)
            };
            for (input, contrib) in contributions {
                match &mut grads[input] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            inner.nodes[id].grad = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
