//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `f64` buffers with an optional gradient accumulator.
//! Every differentiable op is built through [`Tensor::from_op`], which takes
//! the parent handles plus a backward closure. The same hook is what the
//! quantizer uses to install straight-through and learnable-scale gradients,
//! so there is no special casing anywhere in the graph walker.

pub mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{CoreError, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording while alive. Used for teacher forwards,
/// evaluation and calibration passes.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&[f64], &[f64])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense real tensor participating in the autodiff graph.
///
/// Cloning is cheap (shared node). Values are interiorly mutable so that an
/// optimizer can update leaf parameters in place between iterations.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

impl Tensor {
    /// Constant leaf tensor (no gradient).
    pub fn new(shape: &[usize], values: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "value count must match shape"
        );
        Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            values: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad: Cell::new(false),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Tensor {
        let t = Tensor::new(shape, values);
        t.0.requires_grad.set(true);
        t
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; shape.iter().product()])
    }

    /// Builds a new graph node from explicit parents and a backward closure.
    ///
    /// The closure receives `(out_grad, out_values)` and is responsible for
    /// accumulating into each parent via [`Tensor::accum_grad`]. When grad
    /// recording is disabled, or no parent requires grad, the result is a
    /// plain leaf and the closure is dropped.
    pub fn from_op(
        shape: &[usize],
        values: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64], &[f64]) + 'static,
    ) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Tensor::new(shape, values);
        }
        let t = Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            values: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad: Cell::new(true),
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Some(Box::new(backward)),
        }))
        ;
        t
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Toggle gradient tracking on a leaf (used to freeze curriculum groups).
    pub fn set_requires_grad(&self, on: bool) {
        assert!(
            self.0.backward.is_none(),
            "requires_grad can only be toggled on leaves"
        );
        self.0.requires_grad.set(on);
    }

    pub fn values(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.0.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.values.borrow().clone()
    }

    /// Scalar extraction; panics unless numel == 1.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.0.values.borrow()[0]
    }

    /// Overwrites the stored values (leaf parameter updates, grad checking).
    pub fn set_values(&self, new: &[f64]) {
        let mut v = self.0.values.borrow_mut();
        assert_eq!(v.len(), new.len());
        v.copy_from_slice(new);
    }

    pub fn map_values(&self, f: impl FnMut(&mut f64)) {
        self.0.values.borrow_mut().iter_mut().for_each(f);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Accumulate into this tensor's gradient buffer (allocated on demand).
    /// No-op when the tensor does not require grad.
    pub fn accum_grad(&self, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad() {
            return;
        }
        let mut g = self.0.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(buf);
    }

    pub fn is_finite(&self) -> bool {
        self.0.values.borrow().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar output.
    ///
    /// Gradients accumulate on every reachable tensor with `requires_grad`;
    /// interior gradients are dropped once consumed to bound memory.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward requires a scalar loss");
        if !self.requires_grad() {
            return;
        }
        let order = self.topo_order();
        self.accum_grad(|g| g[0] = 1.0);
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            // Take the accumulated gradient; interior buffers are not needed
            // after their backward runs.
            let grad = node.0.grad.borrow_mut().take();
            let Some(grad) = grad else { continue };
            let values = node.0.values.borrow();
            backward(&grad, &values);
        }
    }

    /// Topological order, parents before children, deterministic in node ids.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                let parent = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

/// Max relative error between backpropagated and central-difference gradients
/// of a scalar function, per the contract
/// `max_i |analytic_i - fd_i| / max(1, |fd_i|)`.
///
/// The caller must keep `x` away from rounding/clip boundaries of any
/// quantizers inside `f`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(step > 0.0, "step must be positive");
    let probe = Tensor::param(x.shape(), x.to_vec());
    let out = f(&probe)?;
    if out.numel() != 1 {
        return Err(CoreError::ShapeMismatch(format!(
            "grad_check needs a scalar function, got {} elements",
            out.numel()
        )));
    }
    if !out.is_finite() {
        return Err(CoreError::NonFinite {
            context: "grad_check function value".into(),
        });
    }
    out.backward();
    let analytic = probe.grad().unwrap_or_else(|| vec![0.0; probe.numel()]);

    let base = x.to_vec();
    let mut worst = 0.0f64;
    let _guard = NoGradGuard::new();
    for i in 0..base.len() {
        let mut bumped = base.clone();
        bumped[i] = base[i] + step;
        let hi = f(&Tensor::new(x.shape(), bumped.clone()))?.item();
        bumped[i] = base[i] - step;
        let lo = f(&Tensor::new(x.shape(), bumped))?.item();
        if !hi.is_finite() || !lo.is_finite() {
            return Err(CoreError::NonFinite {
                context: "grad_check finite-difference probe".into(),
            });
        }
        let fd = (hi - lo) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
