//! Append-only computation record and the reverse sweep over it.
//!
//! Every forward operation pushes one node holding its output value and the
//! ids of its inputs. Inputs always precede their consumers, so a reverse
//! walk over node ids visits the record in reverse topological order.
//! [`Graph::backward`] consumes the record and returns parameter gradients.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use super::AutodiffError;

/// Layout shared by the same-time pairwise attention kernels.
///
/// Keys, queries and values are stored `[steps, batch, agents, heads * head_dim]`;
/// scores and attention weights are `[batch, agents, agents, heads, steps]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairDims {
    pub steps: usize,
    pub batch: usize,
    pub agents: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl PairDims {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn value_len(&self) -> usize {
        self.steps * self.batch * self.agents * self.width()
    }

    pub fn score_len(&self) -> usize {
        self.batch * self.agents * self.agents * self.heads * self.steps
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Mish(usize),
    Softplus(usize),
    LeakyRelu(usize, T),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    ConcatLast(Vec<usize>),
    NarrowLast {
        a: usize,
        start: usize,
    },
    Stack(Vec<usize>),
    Reshape(usize),
    GatherRows {
        a: usize,
        index: Vec<usize>,
    },
    Softmax(usize),
    SameTimeScores {
        keys: usize,
        queries: usize,
        dims: PairDims,
        scale: T,
    },
    TimeWeightedSum {
        weights: usize,
        values: usize,
        dims: PairDims,
    },
    Gru(Box<GruSaved<T>>),
    GaussianNll {
        target: usize,
        mean: usize,
        var: usize,
        scale: T,
    },
    SumAll(usize),
}

#[derive(Debug)]
pub(crate) struct GruSaved<T> {
    pub x: usize,
    pub h: usize,
    pub w_ih: usize,
    pub w_hh: usize,
    pub b_ih: usize,
    pub b_hh: usize,
    pub r: Vec<T>,
    pub z: Vec<T>,
    pub n: Vec<T>,
    pub ghn: Vec<T>,
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// A computation record. Single-threaded; build one per worker.
pub struct Graph<T: Real> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    param_leaves: RefCell<HashMap<ParamId, usize>>,
    score_evals: Cell<u64>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
            score_evals: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Number of pairwise key/query dot products evaluated on this record.
    pub fn score_evaluations(&self) -> u64 {
        self.score_evals.get()
    }

    pub(crate) fn count_scores(&self, n: u64) {
        self.score_evals.set(self.score_evals.get() + n);
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so fan-out across time steps accumulates into a single gradient.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_leaves.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push(store.get(id).clone(), Op::Leaf { param: Some(id) }, true);
        self.param_leaves.borrow_mut().insert(id, v.id);
        v
    }

    /// Reverse sweep from a scalar. The record is cleared afterwards; any
    /// [`Var`] created before the call must not be used again.
    pub fn backward(&self, loss: Var<'_, T>, n_params: usize) -> Result<Gradients<T>, AutodiffError> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        self.param_leaves.borrow_mut().clear();
        let root = loss.id;
        if root >= nodes.len() {
            return Err(AutodiffError::StaleRecord);
        }
        if nodes[root].value.len() != 1 {
            return Err(AutodiffError::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(nodes[root].value.shape(), T::one()));
        let mut out = Gradients::empty(n_params);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            if let Op::Leaf { param: Some(p) } = nodes[id].op {
                out.set(p, g);
                continue;
            }
            super::backprop::propagate(&nodes, id, &g, &mut grads);
        }
        Ok(out)
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }
}
