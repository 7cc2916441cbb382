//! Dense `f64` tensors with dynamic, tape-free reverse-mode differentiation.
//!
//! Each operation allocates a fresh node that keeps its parents alive and a
//! closure mapping the output gradient to parent gradients. Node ids grow
//! monotonically, so sorting the reachable set by descending id is a valid
//! reverse topological order for [`Tensor::backward`].

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub mod fault;
pub mod freeze;
mod linalg;
mod ops;
mod reduce;
mod shape;

pub use shape::broadcast_shape;

/// Operation that produced a tensor. Used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar,
    Exp,
    Sigmoid,
    Relu,
    Gelu,
    Abs,
    Sqrt,
    Clamp,
    MatMul,
    Softmax,
    Sum,
    Mean,
    Var,
    Max,
    Reshape,
    Permute,
    Concat,
    Slice,
    BroadcastTo,
    Detach,
    HardUnit,
}

impl Op {
    pub const DIFFERENTIABLE: [Op; 26] = [
        Op::Add,
        Op::Sub,
        Op::Mul,
        Op::Div,
        Op::Neg,
        Op::AddScalar,
        Op::MulScalar,
        Op::Exp,
        Op::Sigmoid,
        Op::Relu,
        Op::Gelu,
        Op::Abs,
        Op::Sqrt,
        Op::Clamp,
        Op::MatMul,
        Op::Softmax,
        Op::Sum,
        Op::Mean,
        Op::Var,
        Op::Max,
        Op::Reshape,
        Op::Permute,
        Op::Concat,
        Op::Slice,
        Op::BroadcastTo,
        Op::HardUnit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::AddScalar => "add_scalar",
            Op::MulScalar => "mul_scalar",
            Op::Exp => "exp",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Abs => "abs",
            Op::Sqrt => "sqrt",
            Op::Clamp => "clamp",
            Op::MatMul => "matmul",
            Op::Softmax => "softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Var => "var",
            Op::Max => "max",
            Op::Reshape => "reshape",
            Op::Permute => "permute",
            Op::Concat => "concat",
            Op::Slice => "slice",
            Op::BroadcastTo => "broadcast_to",
            Op::Detach => "detach",
            Op::HardUnit => "hard_unit",
        }
    }

    pub fn from_name(name: &str) -> Option<Op> {
        Op::DIFFERENTIABLE
            .iter()
            .chain([Op::Leaf, Op::Detach].iter())
            .copied()
            .find(|op| op.name() == name)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps (output gradient, output values, which parents need a gradient) to
/// one optional gradient per parent.
type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: u64,
    op: Op,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.0));
    }
}

/// Runs `f` without recording gradient closures.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let _guard = GradModeGuard(prev);
    f()
}

/// Reference-counted handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            op: Op::Leaf,
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Constant tensor. Fails if `values.len()` is not the product of `shape`.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::shape("new", shape, &[values.len()]));
        }
        Ok(Tensor::leaf(shape.to_vec(), values, false))
    }

    /// Trainable leaf.
    pub fn parameter(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::shape("parameter", shape, &[values.len()]));
        }
        Ok(Tensor::leaf(shape.to_vec(), values, true))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(Vec::new(), vec![value], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    /// Builds an operation node. The backward closure is dropped when no
    /// parent needs a gradient or gradient recording is disabled.
    pub(crate) fn from_op(
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if requires_grad {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: next_id(),
            op,
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn op(&self) -> Op {
        self.0.op
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    /// Overwrites the stored values in place (optimizer updates, checkpoint
    /// loading, finite-difference probes).
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        let mut data = self.0.data.borrow_mut();
        if data.len() != values.len() {
            return Err(Error::shape("set_values", &self.0.shape, &[values.len()]));
        }
        data.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Errors if any value is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        let data = self.0.data.borrow();
        match data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} of {:?} is {}",
                self.0.shape, data[i]
            ))),
        }
    }

    /// Accumulates d(self)/d(leaf) into every gradient-requiring ancestor.
    /// Gradients add onto whatever a previous call left behind.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        self.backward_with(vec![1.0])
    }

    /// Backpropagates an explicit output gradient (vector-Jacobian product).
    pub fn backward_with(&self, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(Error::shape("backward_with", self.shape(), &[seed.len()]));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                if p.requires_grad() && !seen.contains(&p.0.id) {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| std::cmp::Reverse(t.0.id));

        let fault = fault::active();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, seed);

        for node in &nodes {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            if let Some(backward) = &node.0.backward {
                let needs: Vec<bool> = node.0.parents.iter().map(Tensor::requires_grad).collect();
                let parent_grads = {
                    let out = node.0.data.borrow();
                    backward(&g, &out, &needs)
                };
                for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                    let Some(mut pg) = pg else { continue };
                    if fault == Some(node.0.op) {
                        pg.iter_mut().for_each(|v| *v *= fault::FAULT_SCALE);
                    }
                    match pending.get_mut(&parent.0.id) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.0.id, pg);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let x = Tensor::parameter(&[], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::parameter(&[], vec![3.0]).unwrap();
        x.mul(&x).unwrap().backward().unwrap();
        x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constant_graph_writes_no_gradients() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let loss = a.mul(&a).unwrap().sum_all();
        assert!(!loss.requires_grad());
        loss.backward().unwrap();
        assert!(a.grad().is_none());
        assert!(loss.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let a = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(a.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn ancestors_receive_matching_shapes() {
        let a = Tensor::parameter(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b = Tensor::parameter(&[3], vec![1.0, -1.0, 2.0]).unwrap();
        let h = a.mul(&b).unwrap().sigmoid();
        h.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap().len(), 6);
        assert_eq!(b.grad().unwrap().len(), 3);
        assert_eq!(h.grad().unwrap().len(), 6);
    }

    #[test]
    fn no_grad_skips_recording() {
        let a = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| a.exp());
        assert!(!y.requires_grad());
        assert!(a.exp().requires_grad());
    }

    #[test]
    fn op_names_round_trip() {
        for op in Op::DIFFERENTIABLE {
            assert_eq!(Op::from_name(op.name()), Some(op));
        }
        assert_eq!(Op::from_name("nope"), None);
    }
}
