//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! Every operation produces a [`Var`] holding its value. When at least one
//! input requires a gradient the node also keeps its parents and a backward
//! closure; otherwise the node is a plain constant and intermediate values
//! are released as soon as the caller drops them.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>>>;

struct GradFn<T: Real> {
    name: &'static str,
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    grad: RefCell<Option<Tensor<T>>>,
    grad_fn: Option<GradFn<T>>,
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Differentiable array: a value plus its place in the recorded graph.
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Real> Var<T> {
    fn from_node(value: Tensor<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn,
        }))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::from_node(value, false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    /// A leaf whose gradient is accumulated by [`Var::backward`].
    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "leaf".to_string(),
            });
        }
        Ok(Self::from_node(value, requires_grad, None))
    }

    /// Records an operation result. Fails if the value is not finite.
    pub(crate) fn from_op(
        name: &'static str,
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            parents,
            backward,
        });
        Ok(Self::from_node(value, requires_grad, grad_fn))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.0.value.data()
    }

    pub fn numel(&self) -> usize {
        self.0.value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Value of a single-element array.
    pub fn item(&self) -> T {
        self.0.value.data()[0]
    }

    /// Same value, cut from the graph (stop-gradient).
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Gradient accumulated into this leaf by the last backward pass.
    pub fn grad(&self) -> Option<Ref<'_, Tensor<T>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn take_grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow_mut().take()
    }

    /// Backpropagates from a single-element output, seeding with 1.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must hold one element, shape {:?}", self.shape()),
            ));
        }
        let seed = Tensor::filled(self.shape().to_vec(), T::one());
        self.backward_with(seed)
    }

    pub fn backward_with(&self, seed: Tensor<T>) -> Result<()> {
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
        grads.insert(self.id(), seed);
        for var in order.iter().rev() {
            let Some(g) = grads.remove(&var.id()) else {
                continue;
            };
            match &var.0.grad_fn {
                None => {
                    let mut slot = var.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g, &var.0.value, &gf.parents);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        if pg.shape() != p.shape() {
                            return Err(Error::shape(
                                "backward",
                                format!(
                                    "{} produced grad {:?} for input {:?}",
                                    gf.name,
                                    pg.shape(),
                                    p.shape()
                                ),
                            ));
                        }
                        if !pg.is_finite() {
                            return Err(Error::NonFinite {
                                op: format!("{} (backward)", gf.name),
                            });
                        }
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes requiring grad, parents before children.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !visited.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            if let Some(gf) = &v.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
