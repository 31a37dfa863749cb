//! Reverse-mode automatic differentiation with support for differentiating
//! through gradients.
//!
//! Nodes live in an arena owned by an [`AdGraph`]; a [`Var`] is a cheap handle
//! (graph + node id). Every op records, per grad-requiring input, a closure
//! that maps the upstream gradient to that input's contribution. The closures
//! build their results out of the same public ops, so when
//! [`Var::backward`] is called with `create_graph = true` the returned
//! gradients are themselves graph nodes and a second backward pass computes
//! Hessian terms.
//!
//! A graph and its vars are confined to one thread (`Rc` inside); distinct
//! graphs — one per task, say — run on distinct threads freely.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node within its graph's arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

type GradFn = Rc<dyn Fn(&AdGraph, &Var) -> Result<Var>>;

struct Node {
    value: Tensor,
    parents: Vec<(NodeId, GradFn)>,
    requires_grad: bool,
}

struct GraphInner {
    nodes: Vec<Node>,
    recording: bool,
}

static GRAPH_IDS: AtomicU64 = AtomicU64::new(0);

/// Owner of a computation graph.
#[derive(Clone)]
pub struct AdGraph {
    inner: Rc<RefCell<GraphInner>>,
    id: u64,
}

impl Default for AdGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl AdGraph {
    pub fn new() -> Self {
        AdGraph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                recording: true,
            })),
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Leaf variable. Gradients are collected for leaves with `requires_grad`.
    pub fn var(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Vec::new(), requires_grad)
    }

    /// Leaf constant; never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Vec::new(), false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Runs `f` with op recording disabled: ops executed inside produce
    /// constant nodes with no parent edges.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = {
            let mut g = self.inner.borrow_mut();
            std::mem::replace(&mut g.recording, false)
        };
        let out = f();
        self.inner.borrow_mut().recording = prev;
        out
    }

    fn push(&self, value: Tensor, parents: Vec<(NodeId, GradFn)>, requires_grad: bool) -> Var {
        let mut g = self.inner.borrow_mut();
        let id = NodeId(g.nodes.len());
        g.nodes.push(Node {
            value,
            parents,
            requires_grad,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    fn wrap(&self, id: NodeId) -> Var {
        Var {
            graph: self.clone(),
            id,
        }
    }

    fn value_of(&self, id: NodeId) -> Tensor {
        self.inner.borrow().nodes[id.0].value.clone()
    }

    fn requires_grad_of(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id.0].requires_grad
    }
}

/// Handle to one node of an [`AdGraph`].
#[derive(Clone)]
pub struct Var {
    graph: AdGraph,
    id: NodeId,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("graph", &self.graph.id)
            .field("node", &self.id.0)
            .field("shape", &self.value().shape().to_vec())
            .finish()
    }
}

struct OpBuild {
    value: Tensor,
    parents: Vec<(NodeId, GradFn)>,
    any_grad: bool,
}

impl Var {
    pub fn graph(&self) -> &AdGraph {
        &self.graph
    }

    pub fn node_id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id.0].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var {
        self.graph.constant(self.value())
    }

    fn same_graph(&self, other: &Var, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.graph.inner, &other.graph.inner) {
            Ok(())
        } else {
            Err(Error::ForeignGraph {
                op,
                expected: self.graph.id,
                got: other.graph.id,
            })
        }
    }

    fn finish(&self, b: OpBuild) -> Var {
        let recording = self.graph.inner.borrow().recording;
        if recording && b.any_grad {
            self.graph.push(b.value, b.parents, true)
        } else {
            self.graph.push(b.value, Vec::new(), false)
        }
    }

    fn unary(
        &self,
        value: Tensor,
        grad: impl Fn(&AdGraph, &Var) -> Result<Var> + 'static,
    ) -> Var {
        self.finish(OpBuild {
            value,
            parents: vec![(self.id, Rc::new(grad))],
            any_grad: self.requires_grad(),
        })
    }

    fn binary(
        &self,
        other: &Var,
        value: Tensor,
        grad_a: impl Fn(&AdGraph, &Var) -> Result<Var> + 'static,
        grad_b: impl Fn(&AdGraph, &Var) -> Result<Var> + 'static,
    ) -> Var {
        let mut parents: Vec<(NodeId, GradFn)> = Vec::with_capacity(2);
        let a_grad = self.requires_grad();
        let b_grad = other.requires_grad();
        if a_grad {
            parents.push((self.id, Rc::new(grad_a)));
        }
        if b_grad {
            parents.push((other.id, Rc::new(grad_b)));
        }
        self.finish(OpBuild {
            value,
            parents,
            any_grad: a_grad || b_grad,
        })
    }

    /// Reduces `g` back to the shape of the operand it flows to. Needed when a
    /// scalar was broadcast against a tensor: the scalar's gradient is the sum
    /// of the elementwise contributions.
    fn reduce_to_shape(g: Var, shape: &[usize]) -> Result<Var> {
        if g.shape() == shape {
            Ok(g)
        } else {
            // only scalar-with-tensor broadcasting exists, so the target is scalar
            g.sum()
        }
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_graph(other, "add")?;
        let value = self.value().add(&other.value())?;
        let (sa, sb) = (self.shape(), other.shape());
        Ok(self.binary(
            other,
            value,
            move |_, up| Self::reduce_to_shape(up.clone(), &sa),
            move |_, up| Self::reduce_to_shape(up.clone(), &sb),
        ))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_graph(other, "sub")?;
        let value = self.value().sub(&other.value())?;
        let (sa, sb) = (self.shape(), other.shape());
        Ok(self.binary(
            other,
            value,
            move |_, up| Self::reduce_to_shape(up.clone(), &sa),
            move |_, up| Self::reduce_to_shape(up.neg()?, &sb),
        ))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_graph(other, "mul")?;
        let value = self.value().mul(&other.value())?;
        let (a_id, b_id) = (self.id, other.id);
        let (sa, sb) = (self.shape(), other.shape());
        Ok(self.binary(
            other,
            value,
            move |g, up| Self::reduce_to_shape(up.mul(&g.wrap(b_id))?, &sa),
            move |g, up| Self::reduce_to_shape(up.mul(&g.wrap(a_id))?, &sb),
        ))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.same_graph(other, "div")?;
        let value = self.value().div(&other.value())?;
        let (a_id, b_id) = (self.id, other.id);
        let (sa, sb) = (self.shape(), other.shape());
        Ok(self.binary(
            other,
            value,
            move |g, up| Self::reduce_to_shape(up.div(&g.wrap(b_id))?, &sa),
            move |g, up| {
                // d(a/b)/db = -a / b^2
                let b = g.wrap(b_id);
                let a = g.wrap(a_id);
                Self::reduce_to_shape(up.mul(&a)?.div(&b)?.div(&b)?.neg()?, &sb)
            },
        ))
    }

    pub fn neg(&self) -> Result<Var> {
        let value = self.value().neg();
        Ok(self.unary(value, |_, up| up.neg()))
    }

    pub fn scale(&self, s: f64) -> Result<Var> {
        let value = self.value().scale(s)?;
        Ok(self.unary(value, move |_, up| up.scale(s)))
    }

    pub fn relu(&self) -> Result<Var> {
        let value = self.value().relu();
        // The local slope is a constant 0/1 mask; its second derivative is
        // zero almost everywhere, which is exactly what entering the backward
        // as a constant encodes.
        let mask = self.value().relu_mask();
        Ok(self.unary(value, move |g, up| up.mul(&g.constant(mask.clone()))))
    }

    pub fn exp(&self) -> Result<Var> {
        let value = self.value().exp()?;
        let a_id = self.id;
        Ok(self.unary(value, move |g, up| {
            // recompute exp(a) as a graph op so second order flows through it
            up.mul(&g.wrap(a_id).exp()?)
        }))
    }

    pub fn log(&self) -> Result<Var> {
        let value = self.value().ln()?;
        let a_id = self.id;
        Ok(self.unary(value, move |g, up| up.div(&g.wrap(a_id))))
    }

    pub fn sum(&self) -> Result<Var> {
        let value = self.value().sum();
        let shape = self.shape();
        Ok(self.unary(value, move |g, up| {
            // broadcast the scalar upstream over the operand's shape
            up.mul(&g.constant(Tensor::ones(&shape)))
        }))
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().len();
        if n == 0 {
            return Err(Error::EmptyInput { op: "mean" });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_graph(other, "matmul")?;
        let value = self.value().matmul(&other.value())?;
        let (a_id, b_id) = (self.id, other.id);
        Ok(self.binary(
            other,
            value,
            move |g, up| up.matmul(&g.wrap(b_id).transpose()?),
            move |g, up| g.wrap(a_id).transpose()?.matmul(up),
        ))
    }

    pub fn transpose(&self) -> Result<Var> {
        let value = self.value().transpose()?;
        Ok(self.unary(value, |_, up| up.transpose()))
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// With `create_graph` the returned gradients are live graph nodes, so a
    /// further backward over them yields second-order derivatives. Without it
    /// they are plain constants. The sweep never mutates existing nodes, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, create_graph: bool) -> Result<GradMap> {
        let root_value = self.value();
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot {
                got: root_value.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Err(Error::RootWithoutGrad);
        }

        let order = self.reverse_topo_order();

        let prev_recording = {
            let mut g = self.graph.inner.borrow_mut();
            std::mem::replace(&mut g.recording, create_graph)
        };
        let result = self.propagate(&order);
        self.graph.inner.borrow_mut().recording = prev_recording;

        result.map(|grads| GradMap {
            graph_id: self.graph.id,
            grads,
        })
    }

    /// Reverse topological order (root first) over grad-requiring ancestors,
    /// computed by an explicit-stack DFS so unrolled inner loops cannot
    /// overflow the call stack.
    fn reverse_topo_order(&self) -> Vec<NodeId> {
        let inner = self.graph.inner.borrow();
        let n = inner.nodes.len();
        let mut visited = vec![false; n];
        let mut postorder = Vec::new();
        // (node, next parent edge to explore)
        let mut stack: Vec<(NodeId, usize)> = vec![(self.id, 0)];
        visited[self.id.0] = true;
        while let Some((node, edge)) = stack.pop() {
            let parents = &inner.nodes[node.0].parents;
            if edge < parents.len() {
                stack.push((node, edge + 1));
                let (pid, _) = parents[edge];
                if !visited[pid.0] && inner.nodes[pid.0].requires_grad {
                    visited[pid.0] = true;
                    stack.push((pid, 0));
                }
            } else {
                postorder.push(node);
            }
        }
        postorder.reverse();
        postorder
    }

    fn propagate(&self, order: &[NodeId]) -> Result<HashMap<NodeId, Var>> {
        let mut grads: HashMap<NodeId, Var> = HashMap::new();
        grads.insert(self.id, self.graph.constant(Tensor::scalar(1.0)));

        for &node in order {
            let Some(upstream) = grads.get(&node).cloned() else {
                continue;
            };
            let parents: Vec<(NodeId, GradFn)> = {
                let inner = self.graph.inner.borrow();
                inner.nodes[node.0].parents.clone()
            };
            for (pid, grad_fn) in parents {
                let contribution = grad_fn(&self.graph, &upstream)?;
                match grads.remove(&pid) {
                    Some(existing) => {
                        grads.insert(pid, existing.add(&contribution)?);
                    }
                    None => {
                        grads.insert(pid, contribution);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Gradients produced by one backward sweep, keyed by node.
pub struct GradMap {
    graph_id: u64,
    grads: HashMap<NodeId, Var>,
}

impl GradMap {
    pub fn get(&self, v: &Var) -> Option<&Var> {
        if v.graph.id != self.graph_id {
            return None;
        }
        self.grads.get(&v.id)
    }

    /// Gradient tensor for `v`, zeros if `v` is off the gradient path.
    pub fn tensor_or_zeros(&self, v: &Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.value(),
            None => v.value().zeros_like(),
        }
    }
}
