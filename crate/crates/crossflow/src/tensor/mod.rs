//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The tape is implicit: every differentiable op records its parents on the
//! output node, and [`backward`] replays the graph in reverse topological
//! order. Graphs are rebuilt per training step and confined to one thread
//! (`Tensor` is deliberately `!Send`). Tensors that do not require gradients
//! carry no tape at all, so inference pays nothing for autodiff.

mod adam;
mod ops;
mod records;

pub use adam::{adam_update, AdamState};
pub use ops::*;
pub use records::{
    read_cft1, read_tensor_record, write_cft1, write_tensor_record, CFT1_MAGIC,
};

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Recorded operation metadata; consumed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f32),
    AddScalar,
    Matmul,
    Transpose,
    Reshape,
    ConcatRows { first_rows: usize },
    SliceRows { start: usize },
    AddRowBroadcast,
    MulRowBroadcast,
    AddChannelBias,
    Relu,
    Silu,
    Sigmoid,
    SoftmaxRows,
    LayerNormRows { eps: f32 },
    Conv2d { stride: usize, pad: usize },
    AvgPool2,
    Sum,
    Mean,
    BceWithLogitsSum { targets: Vec<f32>, weights: Vec<f32> },
    SoftmaxCrossEntropySum { targets: Vec<usize>, weights: Vec<f32>, classes: usize },
    Unpatchify { channels: usize, patch: usize, hp: usize, wp: usize },
}

#[derive(Debug)]
pub(crate) struct TapeOp {
    pub kind: OpKind,
    pub parents: Vec<Tensor>,
}

#[derive(Debug)]
struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    /// Leaf flag: gradient is retained here after backward.
    requires_grad: Cell<bool>,
    /// Derived at construction: some ancestor leaf requires grad.
    needs_grad: bool,
    op: Option<TapeOp>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases storage.
#[derive(Debug, Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    /// Leaf tensor from raw row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                needs_grad: false,
                op: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("consistent shape")
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("consistent shape")
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).expect("consistent shape")
    }

    /// Internal: result node of an op. Records the tape only when some parent
    /// needs a gradient.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>, kind: OpKind, parents: Vec<Tensor>) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let needs = parents.iter().any(|p| p.needs_grad());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                needs_grad: needs,
                op: if needs { Some(TapeOp { kind, parents }) } else { None },
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Borrow the value buffer.
    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f32 {
        self.inner.data.borrow()[0]
    }

    /// Mark a leaf as trainable. Only leaves can require gradients.
    pub fn set_requires_grad(&self, value: bool) {
        assert!(self.inner.op.is_none(), "requires_grad is a leaf property");
        self.inner.requires_grad.set(value);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub(crate) fn needs_grad(&self) -> bool {
        if self.inner.op.is_none() {
            self.inner.requires_grad.get()
        } else {
            self.inner.needs_grad
        }
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Gradient buffer, treating "never touched by backward" as zero.
    pub fn grad_or_zeros(&self) -> Vec<f32> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    /// Detached deep copy: fresh leaf with the same data, no tape, no grad.
    pub fn detach_copy(&self) -> Tensor {
        Tensor::from_vec(&self.inner.shape, self.to_vec()).expect("consistent shape")
    }

    /// In-place overwrite of the value buffer (optimizer use).
    pub(crate) fn set_data(&self, data: Vec<f32>) {
        assert_eq!(data.len(), self.numel());
        *self.inner.data.borrow_mut() = data;
    }

    /// Copy another tensor's values into this leaf's buffer (checkpoint load).
    pub fn set_data_from(&self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "set_data_from shape mismatch");
        *self.inner.data.borrow_mut() = other.to_vec();
    }

    pub fn is_finite_all(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// NaN/Inf detection as an error.
    pub fn validate_finite(&self) -> Result<()> {
        if self.is_finite_all() {
            Ok(())
        } else {
            Err(Error::Contract("tensor contains NaN or Inf".into()))
        }
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, d) in buf.iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }
}

/// Reverse-mode sweep from a scalar loss.
///
/// Every leaf with `requires_grad` reachable from `loss` receives
/// d(loss)/d(leaf) in its grad buffer; repeated calls accumulate into leaves.
pub fn backward(loss: &Tensor) -> Result<()> {
    if !loss.is_scalar() {
        return Err(Error::Contract(format!(
            "backward expects a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.needs_grad() {
        // Constant w.r.t. every trainable leaf; nothing to do.
        return Ok(());
    }

    // Iterative post-order DFS over nodes that need gradients.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.id());
    while let Some((node, child_idx)) = stack.pop() {
        let parents: Vec<Tensor> = match &node.inner.op {
            Some(op) => op.parents.clone(),
            None => Vec::new(),
        };
        if child_idx < parents.len() {
            stack.push((node, child_idx + 1));
            let child = &parents[child_idx];
            if child.needs_grad() && !visited.contains(&child.id()) {
                visited.insert(child.id());
                stack.push((child.clone(), 0));
            }
        } else {
            order.push(node);
        }
    }

    // Reset interior grads so a second backward on the same graph stays
    // correct; leaves keep theirs (accumulation contract).
    for node in &order {
        if node.inner.op.is_some() {
            node.clear_grad();
        }
    }
    loss.accumulate_grad(&[1.0]);

    for node in order.iter().rev() {
        let Some(op) = &node.inner.op else { continue };
        let out_grad = match node.grad() {
            Some(g) => g,
            None => continue,
        };
        ops::backward_op(node, op, &out_grad);
    }
    Ok(())
}

impl Tensor {
    pub fn backward(&self) -> Result<()> {
        backward(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn grad_absent_until_backward() {
        let t = Tensor::zeros(&[3]);
        t.set_requires_grad(true);
        assert!(t.grad().is_none());
        assert_eq!(t.grad_or_zeros(), vec![0.0; 3]);
    }

    #[test]
    fn square_gradient_at_three() {
        // f(x) = x*x at x = 3 -> df/dx = 6
        let x = Tensor::scalar(3.0);
        x.set_requires_grad(true);
        let y = mul(&x, &x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 6.0);
    }

    #[test]
    fn constant_loss_leaves_grad_zero() {
        let x = Tensor::scalar(3.0);
        x.set_requires_grad(true);
        let c = Tensor::scalar(7.0);
        let loss = mean(&c);
        loss.backward().unwrap();
        assert_eq!(x.grad_or_zeros(), vec![0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros(&[2]);
        x.set_requires_grad(true);
        let y = relu(&x);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::scalar(2.0);
        x.set_requires_grad(true);
        let y = mul(&x, &x).unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 8.0); // 2 * (2x)
    }

    #[test]
    fn validity_check_detects_nan() {
        let t = Tensor::from_vec(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(!t.is_finite_all());
        assert!(t.validate_finite().is_err());
        let ok = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(ok.validate_finite().is_ok());
    }
}
