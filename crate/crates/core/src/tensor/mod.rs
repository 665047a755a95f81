//! Dense f64 tensors with a dynamic reverse-mode gradient graph.
//!
//! Every operation that consumes a tensor which *tracks* gradients (a leaf
//! created with [`Tensor::param`], or the output of another tracked
//! operation) records a node holding its parents and a backward rule.
//! [`Tensor::backward`] walks that graph in reverse topological order and
//! accumulates (`+=`) into the `grad` slot of every `requires_grad` leaf. The
//! graph lives exactly as long as the tensors that reference it.
//!
//! Binary element-wise operations broadcast with the trailing-axis rule:
//! shapes are right-aligned, missing leading axes count as extent 1, and an
//! axis of extent 1 expands to match the other operand. Any other mismatch is
//! a dimension error.

mod conv;
mod gradcheck;
mod ops;

pub use conv::{conv2d, Conv2dGeometry};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::rng::Rng;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph nodes on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// What a backward rule sees.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to the node output.
    pub grad_out: &'a [f64],
    /// The node output value.
    pub out: &'a [f64],
    pub parents: &'a [Tensor],
    /// `needs[i]` is false when parent `i` does not track gradients; its entry
    /// in the returned vector is then ignored.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Cheap-to-clone handle; clones share value, gradient slot and graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.inner.shape);
        if self.numel() <= 16 {
            s.field("data", &self.inner.data);
        }
        if let Some(node) = &self.inner.node {
            s.field("op", &node.op);
        }
        s.field("requires_grad", &self.inner.requires_grad).finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// Constant tensor. Fails when the data length disagrees with the shape or
    /// an extent is zero.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Input(format!("zero extent in shape {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::Dimension {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf: gradients accumulate into it during `backward`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::build(t.inner.shape.clone(), t.into_vec(), true, None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(vec![1], vec![v], false, None)
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Self::build(vec![data.len()], data.to_vec(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self::build(shape.to_vec(), vec![v; numel_of(shape)], false, None)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let data = (0..numel_of(shape)).map(|_| std * rng.normal()).collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..numel_of(shape)).map(|_| rng.uniform_in(lo, hi)).collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Records a custom differentiable operation. `parents` are the inputs the
    /// backward rule differentiates against, in the order of the returned
    /// gradient vector. When no parent tracks gradients (or grad is disabled)
    /// the result is a plain constant.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let tracked = grad_enabled() && parents.iter().any(Tensor::tracks);
        let node = tracked.then(|| Node {
            op,
            parents,
            backward,
        });
        Self::build(shape, data, false, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn into_vec(self) -> Vec<f64> {
        match Arc::try_unwrap(self.inner) {
            Ok(inner) => inner.data,
            Err(arc) => arc.data.clone(),
        }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True for trainable leaves and for outputs of recorded operations.
    pub fn tracks(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    /// Same value, no graph, no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    /// A fresh trainable leaf with this value.
    pub fn to_param(&self) -> Tensor {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), true, None)
    }

    /// Back-propagates from a one-element loss, adding into the gradient of
    /// every trainable leaf reachable from it.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            if t.inner.requires_grad {
                let mut slot = t.inner.grad.lock().expect("grad lock");
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g.clone()),
                }
            }
            let Some(node) = &t.inner.node else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Tensor::tracks).collect();
            let ctx = BackwardCtx {
                grad_out: &g,
                out: t.data(),
                parents: &node.parents,
                needs: &needs,
            };
            let parent_grads = (node.backward)(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else {
                    continue;
                };
                debug_assert_eq!(pg.len(), p.numel(), "{} grad size", node.op);
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Tracked tensors reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // (tensor, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    if p.tracks() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
