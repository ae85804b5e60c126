//! Reverse-mode autodiff over a linear operation tape.
//!
//! Every forward operation appends one node holding its value and a
//! backward closure; nodes are therefore already in topological order and
//! a single reverse sweep propagates gradients. Leaves (nodes without a
//! backward closure) retain their gradients on the tape, and repeated
//! [`Tape::backward`] calls accumulate into them.
//!
//! [`Var`] is a cheap copyable handle (tape reference + node index); the
//! actual operations on it live in [`super::ops`].

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Value slot of one tape node.
pub(crate) struct Value {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub needs_grad: bool,
}

impl Value {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Backward rule: receives the node's output gradient, read access to all
/// node values, and the in-flight gradient buffers to accumulate into.
pub(crate) type BackOp = Box<dyn Fn(&[f64], &[Value], &mut [Option<Vec<f64>>])>;

/// Adds `contribution` to the gradient buffer of node `id`, skipping
/// nodes outside the differentiable subgraph.
pub(crate) fn accumulate(
    values: &[Value],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    contribution: &[f64],
) {
    if !values[id].needs_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; values[id].numel()]);
    debug_assert_eq!(buf.len(), contribution.len());
    for (g, c) in buf.iter_mut().zip(contribution) {
        *g += c;
    }
}

pub struct Tape {
    values: RefCell<Vec<Value>>,
    backops: RefCell<Vec<Option<BackOp>>>,
    /// Persistent per-leaf gradients, parallel to `values`.
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
    check_finite: Cell<bool>,
    poison: RefCell<Option<String>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: RefCell::new(Vec::new()),
            backops: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
            check_finite: Cell::new(false),
            poison: RefCell::new(None),
        }
    }

    /// Enable NaN/Inf detection on every op output (checked mode).
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    /// First operation that produced a non-finite value, if any.
    pub fn finite_violation(&self) -> Option<String> {
        self.poison.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push_node(
        &self,
        data: Vec<f64>,
        shape: Vec<usize>,
        needs_grad: bool,
        op: &'static str,
        back: Option<BackOp>,
    ) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.check_finite.get()
            && self.poison.borrow().is_none()
            && !data.iter().all(|v| v.is_finite())
        {
            *self.poison.borrow_mut() = Some(op.to_string());
        }
        let mut values = self.values.borrow_mut();
        let id = values.len();
        values.push(Value {
            data,
            shape,
            needs_grad,
        });
        self.backops.borrow_mut().push(back);
        self.leaf_grads.borrow_mut().push(None);
        Var { tape: self, id }
    }

    /// Non-differentiable input node.
    pub fn input(&self, t: &Tensor) -> Var<'_> {
        self.push_node(t.data().to_vec(), t.shape().to_vec(), false, "input", None)
    }

    /// Leaf node; participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_node(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            "leaf",
            None,
        )
    }

    /// Leaf node from raw parts.
    pub fn leaf_from(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Var<'_> {
        self.push_node(data, shape, requires_grad, "leaf", None)
    }

    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Var<'_> {
        self.push_node(data, shape, false, "constant", None)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push_node(vec![v], vec![1], false, "constant", None)
    }

    pub(crate) fn values(&self) -> Ref<'_, Vec<Value>> {
        self.values.borrow()
    }

    /// One reverse sweep from a scalar loss. Gradients of leaves are
    /// accumulated into the tape's persistent leaf storage.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(
            std::ptr::eq(self, loss.tape),
            "loss belongs to a different tape"
        );
        let values = self.values.borrow();
        if values.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if values[loss.id].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                values[loss.id].shape
            )));
        }
        let backops = self.backops.borrow();
        let n = values.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if values[loss.id].needs_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &backops[i] {
                Some(op) => op(&g, &values, &mut grads),
                None => {
                    // grad-bearing leaf: accumulate persistently
                    let slot = leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, gv) in slot.iter_mut().zip(&g) {
                        *s += gv;
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.leaf_grads.borrow()[v.id].clone()
    }
}

/// Handle to one tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.values()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.values()[self.id].numel()
    }

    /// Detached copy of the node's value.
    pub fn value(&self) -> Vec<f64> {
        self.tape.values()[self.id].data.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let values = self.tape.values();
        let v = &values[self.id];
        Tensor::new(v.shape.clone(), v.data.clone()).expect("tape node is always consistent")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let values = self.tape.values();
        let v = &values[self.id];
        assert!(
            v.numel() == 1,
            "item() requires a scalar node, got shape {:?}",
            v.shape
        );
        v.data[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.values()[self.id].needs_grad
    }

    /// Accumulated leaf gradient (after `Tape::backward`).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad(*self)
    }
}
