//! Recorded values and reverse-mode accumulation.
//!
//! A [`Var`] is an immutable node in a dynamically built graph. Each node
//! produced by a primitive keeps its parents and a backward rule. Backward
//! rules are themselves written with `Var` primitives, so running them while
//! recording (`create_graph = true`) yields gradients that can be
//! differentiated again. That is what the R1 penalty needs.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static FIRST_ORDER_ONLY: Cell<bool> = const { Cell::new(false) };
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Var<T>) -> Vec<Option<Var<T>>>>;

struct Node<T: Real> {
    id: u64,
    op: &'static str,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a recorded tensor value.
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Restores the previous recording mode on drop.
pub struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Disables graph recording on this thread until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    set_grad_enabled(false)
}

pub fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    GradModeGuard(GRAD_ENABLED.with(|g| g.replace(enabled)))
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Whether this thread can differentiate a gradient a second time.
///
/// Always true for this engine unless [`set_first_order_only`] was used to
/// emulate a first-order facility.
pub fn double_backward_available() -> bool {
    !FIRST_ORDER_ONLY.with(|f| f.get())
}

/// Restrict this thread to first-order gradients. Returns the previous value.
pub fn set_first_order_only(on: bool) -> bool {
    FIRST_ORDER_ONLY.with(|f| f.replace(on))
}

impl<T: Real> Var<T> {
    /// A leaf. Gradients are accumulated for it when `requires_grad` is set.
    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op: "leaf",
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(value: T) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    /// Records the result of a primitive. The backward rule receives the
    /// gradient of the output and returns one optional gradient per parent.
    pub(crate) fn from_op(
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Var<T>) -> Vec<Option<Var<T>>> + 'static,
    ) -> Self {
        let record = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let (parents, backward): (_, Option<BackwardFn<T>>) = if record {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            value,
            requires_grad: record,
            parents,
            backward,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// First primitive (in recording order) whose output holds a non-finite
    /// value, searching the graph that produced `self`.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let order = topo_order(self);
        order
            .iter()
            .find(|v| !v.value().all_finite())
            .map(|v| v.op_name())
    }

    /// Returns an error naming the first primitive with a non-finite output.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(op) => Err(Error::NonFinite(op)),
            None => Ok(()),
        }
    }
}

/// Gradients of a scalar output with respect to every leaf that requires one.
pub struct Gradients<T: Real> {
    map: HashMap<u64, Var<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.map.get(&v.id()).map(|g| g.value())
    }

    pub fn get_var(&self, v: &Var<T>) -> Option<&Var<T>> {
        self.map.get(&v.id())
    }

    /// Gradient for `v`, zero-filled when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

/// Leaves-first ordering of every recorded node reachable from `root`.
fn topo_order<T: Real>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

fn accumulate<T: Real>(map: &mut HashMap<u64, Var<T>>, id: u64, g: Var<T>) {
    match map.remove(&id) {
        Some(prev) => {
            map.insert(id, prev.add(&g));
        }
        None => {
            map.insert(id, g);
        }
    }
}

fn run_backward<T: Real>(
    output: &Var<T>,
    create_graph: bool,
    keep: &HashSet<u64>,
) -> Result<HashMap<u64, Var<T>>> {
    if create_graph && !double_backward_available() {
        return Err(Error::Grad(
            "create_graph requested on a first-order-only thread".into(),
        ));
    }
    let _mode = set_grad_enabled(create_graph);
    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    if !output.requires_grad() {
        return Ok(grads);
    }
    grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
    let order = topo_order(output);
    for v in order.iter().rev() {
        let Some(backward) = &v.0.backward else {
            continue;
        };
        let g = if keep.contains(&v.id()) {
            grads.get(&v.id()).cloned()
        } else {
            grads.remove(&v.id())
        };
        let Some(g) = g else {
            continue;
        };
        let parent_grads = backward(&g);
        debug_assert_eq!(parent_grads.len(), v.0.parents.len(), "op {}", v.op_name());
        for (p, pg) in v.0.parents.iter().zip(parent_grads) {
            if let Some(pg) = pg {
                if p.requires_grad() {
                    debug_assert_eq!(pg.shape(), p.shape(), "grad shape from {}", v.op_name());
                    accumulate(&mut grads, p.id(), pg);
                }
            }
        }
    }
    Ok(grads)
}

/// Gradient of the sum of `output` with respect to every leaf.
pub fn backward<T: Real>(output: &Var<T>) -> Gradients<T> {
    let map = run_backward(output, false, &HashSet::new()).expect("first-order backward cannot fail");
    Gradients { map }
}

/// Gradients of the sum of `output` with respect to `inputs`.
///
/// With `create_graph`, the returned gradients are recorded and can be fed
/// into further differentiable computations.
pub fn grad<T: Real>(
    output: &Var<T>,
    inputs: &[&Var<T>],
    create_graph: bool,
) -> Result<Vec<Option<Var<T>>>> {
    let keep = inputs.iter().map(|v| v.id()).collect();
    let mut map = run_backward(output, create_graph, &keep)?;
    Ok(inputs.iter().map(|v| map.remove(&v.id())).collect())
}
