//! Recording tape and reverse sweep.
//!
//! Every op appends one node holding its forward value and, when any parent
//! requires a gradient, a closure mapping the output gradient to parent
//! gradients. Nodes are topologically ordered by construction, so the
//! reverse sweep is a single backwards pass over the node list.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::element::Element;
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees.
pub struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    needs: &'a [bool],
}

impl<T> BackwardCtx<'_, T> {
    /// Whether parent `i` wants a gradient at all.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::default(), grad_enabled: true }
    }

    /// A tape that never records backward closures.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Node { value: Arc::new(value), parents: vec![], backward: None, requires_grad: false })
    }

    /// A shared constant, e.g. a frozen parameter.
    pub fn constant_shared(&self, value: &Arc<Tensor<T>>) -> Var {
        self.push(Node { value: Arc::clone(value), parents: vec![], backward: None, requires_grad: false })
    }

    /// A leaf that receives a gradient (e.g. an input under test).
    pub fn input(&self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(Node { value: Arc::new(value), parents: vec![], backward: None, requires_grad })
    }

    /// Bind a trainable parameter. Binding the same id twice returns the
    /// first binding, so gradients from every use accumulate in one place.
    pub fn param(&self, id: ParamId, value: &Arc<Tensor<T>>) -> Var {
        if let Some(&idx) = self.params.borrow().get(&id) {
            return Var(idx);
        }
        let requires_grad = self.grad_enabled;
        let var = self.push(Node {
            value: Arc::clone(value),
            parents: vec![],
            backward: None,
            requires_grad,
        });
        self.params.borrow_mut().insert(id, var.0);
        var
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Record a custom op. `backward` returns one optional gradient per
    /// parent, each shaped like that parent's value.
    pub fn op<F>(&self, parents: &[Var], value: Tensor<T>, backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.grad_enabled && parents.iter().any(|&p| self.requires_grad(p));
        self.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar (single-element) output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.0];
        assert_eq!(out_node.value.numel(), 1, "backward expects a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out_node.value.shape(), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackwardCtx { grad: &grad, inputs: &inputs, output: &node.value, needs: &needs };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape for parent {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep gradients of leaves only; interior grads were consumed
            if !node.parents.is_empty() {
                grads[idx] = None;
            } else {
                grads[idx] = Some(grad);
            }
        }
        Gradients { grads, params: self.params.borrow().clone() }
    }
}

/// Gradients of leaves (inputs and parameters) after a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&i| self.grads[i].as_ref())
    }

    /// Ids of every parameter that received a gradient.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> =
            self.params.iter().filter(|(_, &i)| self.grads[i].is_some()).map(|(&id, _)| id).collect();
        ids.sort();
        ids
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}
