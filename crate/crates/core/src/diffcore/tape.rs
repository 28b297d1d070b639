//! Define-by-run computation graph with reverse-mode gradients.
//!
//! A [`Tape`] only records structure. Leaves refer to inputs and
//! parameters by name; values are supplied when the tape is evaluated, so
//! the same tape can be replayed against perturbed parameters (which is
//! what the finite-difference checks do).

use std::collections::{BTreeMap, HashMap};

use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Param(String),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulTransB(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// Adds a 1 x C row to every row of an n x C matrix.
    AddRow(NodeId, NodeId),
    /// Scales row i of an n x C matrix by entry i of an n x 1 column.
    ScaleRows(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    RowSoftmax(NodeId),
    ConcatCols(Vec<NodeId>),
    /// Sum of squared entries, 1 x 1.
    SumSquares(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulTransB(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::RowSoftmax(_) => "row_softmax",
            Op::ConcatCols(_) => "concat_cols",
            Op::SumSquares(_) => "sum_squares",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// Ordered list of primitive operations. Nodes can only reference
/// earlier nodes, so insertion order is a topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    outputs: BTreeMap<String, NodeId>,
}

/// Something that resolves names to tensors.
pub trait Bindings<T: Real> {
    fn lookup(&self, name: &str) -> Option<&Tensor2<T>>;
}

impl<T: Real> Bindings<T> for HashMap<String, Tensor2<T>> {
    fn lookup(&self, name: &str) -> Option<&Tensor2<T>> {
        self.get(name)
    }
}

impl<T: Real> Bindings<T> for BTreeMap<String, Tensor2<T>> {
    fn lookup(&self, name: &str) -> Option<&Tensor2<T>> {
        self.get(name)
    }
}

impl<T: Real> Bindings<T> for HashMap<String, &Tensor2<T>> {
    fn lookup(&self, name: &str) -> Option<&Tensor2<T>> {
        self.get(name).copied()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let check = |id: &NodeId| assert!(id.0 < self.nodes.len(), "node {} not on this tape", id.0);
        match &op {
            Op::Input(_) | Op::Param(_) => {}
            Op::MatMul(a, b)
            | Op::MatMulTransB(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleRows(a, b) => {
                check(a);
                check(b);
            }
            Op::Scale(a, _) | Op::Relu(a) | Op::RowSoftmax(a) | Op::SumSquares(a) => check(a),
            Op::ConcatCols(parts) => parts.iter().for_each(check),
        }
        self.nodes.push(Node { op, label: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param(name.into()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulTransB(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Hadamard(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(a, row))
    }

    pub fn scale_rows(&mut self, a: NodeId, weights: NodeId) -> NodeId {
        self.push(Op::ScaleRows(a, weights))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSoftmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumSquares(a))
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, node: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[node.0].label = Some(label.into());
        node
    }

    /// Registers `node` as a named output returned by [`evaluate`].
    pub fn mark_output(&mut self, name: impl Into<String>, node: NodeId) {
        self.outputs.insert(name.into(), node);
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.0].op
    }

    /// Names of all parameter leaves, in tape order, deduplicated.
    pub fn param_names(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) if seen.insert(name.as_str()) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    fn describe(&self, id: usize) -> String {
        let node = &self.nodes[id];
        match (&node.label, &node.op) {
            (Some(l), op) => format!("node {id} ({}, `{l}`)", op.name()),
            (None, Op::Input(n) | Op::Param(n)) => format!("node {id} ({} `{n}`)", node.op.name()),
            (None, op) => format!("node {id} ({})", op.name()),
        }
    }
}

/// Values of every node after a forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation<T: Real> {
    values: Vec<Tensor2<T>>,
}

impl<T: Real> Evaluation<T> {
    pub fn value(&self, node: NodeId) -> &Tensor2<T> {
        &self.values[node.0]
    }

    pub fn into_value(mut self, node: NodeId) -> Tensor2<T> {
        self.values.swap_remove(node.0)
    }
}

/// Runs every node of the tape in order.
pub fn forward<T: Real>(
    tape: &Tape,
    inputs: &dyn Bindings<T>,
    params: &dyn Bindings<T>,
) -> Result<Evaluation<T>> {
    let mut values: Vec<Tensor2<T>> = Vec::with_capacity(tape.nodes.len());
    for (id, node) in tape.nodes.iter().enumerate() {
        let v = |n: &NodeId| &values[n.0];
        let wrap = |e: Error| match e {
            Error::Shape(msg) => Error::Shape(format!("{}: {msg}", tape.describe(id))),
            other => other,
        };
        let out = match &node.op {
            Op::Input(name) => inputs
                .lookup(name)
                .cloned()
                .ok_or_else(|| Error::Unbound(format!("input {name}")))?,
            Op::Param(name) => params
                .lookup(name)
                .cloned()
                .ok_or_else(|| Error::Unbound(format!("param {name}")))?,
            Op::MatMul(a, b) => v(a).matmul(v(b)).map_err(wrap)?,
            Op::MatMulTransB(a, b) => v(a).matmul_ex(false, v(b), true).map_err(wrap)?,
            Op::Add(a, b) => v(a).add(v(b)).map_err(wrap)?,
            Op::Sub(a, b) => v(a).sub(v(b)).map_err(wrap)?,
            Op::Hadamard(a, b) => v(a).hadamard(v(b)).map_err(wrap)?,
            Op::AddRow(a, b) => v(a).add_row(v(b)).map_err(wrap)?,
            Op::ScaleRows(a, b) => v(a).scale_rows(v(b)).map_err(wrap)?,
            Op::Scale(a, s) => v(a).scale(T::from_f64_lossy(*s)),
            Op::Relu(a) => v(a).relu(),
            Op::RowSoftmax(a) => v(a).row_softmax(),
            Op::ConcatCols(parts) => {
                let parts: Vec<&Tensor2<T>> = parts.iter().map(v).collect();
                Tensor2::concat_cols(&parts).map_err(wrap)?
            }
            Op::SumSquares(a) => Tensor2::scalar(v(a).sum_squares()),
        };
        values.push(out);
    }
    Ok(Evaluation { values })
}

/// Evaluates the tape and returns every output registered with
/// [`Tape::mark_output`].
pub fn evaluate<T: Real>(
    tape: &Tape,
    inputs: &dyn Bindings<T>,
    params: &dyn Bindings<T>,
) -> Result<BTreeMap<String, Tensor2<T>>> {
    let eval = forward(tape, inputs, params)?;
    Ok(tape
        .outputs
        .iter()
        .map(|(name, id)| (name.clone(), eval.value(*id).clone()))
        .collect())
}

fn accumulate<T: Real>(slot: &mut Option<Tensor2<T>>, g: Tensor2<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shapes agree"),
        None => *slot = Some(g),
    }
}

/// Reverse accumulation from a scalar node over an already computed
/// forward pass. Returns one gradient per distinct parameter name on the
/// tape; parameters the loss does not depend on get zeros.
pub fn backward<T: Real>(
    tape: &Tape,
    eval: &Evaluation<T>,
    loss: NodeId,
) -> Result<BTreeMap<String, Tensor2<T>>> {
    let loss_value = eval.value(loss);
    if loss_value.shape() != (1, 1) {
        let (r, c) = loss_value.shape();
        return Err(Error::Shape(format!(
            "loss {} is {r}x{c}, expected 1x1",
            tape.describe(loss.0)
        )));
    }
    let mut adj: Vec<Option<Tensor2<T>>> = vec![None; loss.0 + 1];
    adj[loss.0] = Some(Tensor2::scalar(T::one()));
    let mut grads: BTreeMap<String, Tensor2<T>> = BTreeMap::new();

    for id in (0..=loss.0).rev() {
        let Some(g) = adj[id].take() else { continue };
        let val = |n: &NodeId| eval.value(*n);
        match &tape.nodes[id].op {
            Op::Input(_) => {}
            Op::Param(name) => match grads.get_mut(name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    grads.insert(name.clone(), g);
                }
            },
            Op::MatMul(a, b) => {
                accumulate(&mut adj[a.0], g.matmul_ex(false, val(b), true)?);
                accumulate(&mut adj[b.0], val(a).matmul_ex(true, &g, false)?);
            }
            Op::MatMulTransB(a, b) => {
                // y = a b^T: da = g b, db = g^T a
                accumulate(&mut adj[a.0], g.matmul(val(b))?);
                accumulate(&mut adj[b.0], g.matmul_ex(true, val(a), false)?);
            }
            Op::Add(a, b) => {
                accumulate(&mut adj[b.0], g.clone());
                accumulate(&mut adj[a.0], g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[b.0], g.scale(-T::one()));
                accumulate(&mut adj[a.0], g);
            }
            Op::Hadamard(a, b) => {
                accumulate(&mut adj[a.0], g.hadamard(val(b))?);
                accumulate(&mut adj[b.0], g.hadamard(val(a))?);
            }
            Op::AddRow(a, row) => {
                accumulate(&mut adj[row.0], g.column_sums());
                accumulate(&mut adj[a.0], g);
            }
            Op::ScaleRows(a, w) => {
                let av = val(a);
                let mut dw = Tensor2::zeros(av.rows(), 1);
                for r in 0..av.rows() {
                    let s: T = g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum();
                    dw.set(r, 0, s);
                }
                accumulate(&mut adj[w.0], dw);
                accumulate(&mut adj[a.0], g.scale_rows(val(w))?);
            }
            Op::Scale(a, s) => accumulate(&mut adj[a.0], g.scale(T::from_f64_lossy(*s))),
            Op::Relu(a) => {
                let av = val(a);
                let mut d = g;
                for (dv, &x) in d.data_mut().iter_mut().zip(av.data()) {
                    if x <= T::zero() {
                        *dv = T::zero();
                    }
                }
                accumulate(&mut adj[a.0], d);
            }
            Op::RowSoftmax(a) => {
                // dx = y * (g - rowsum(g * y))
                let y = eval.value(NodeId(id));
                let mut d = g;
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: T = d.row(r).iter().zip(yr).map(|(&x, &p)| x * p).sum();
                    for (dv, &p) in d.row_mut(r).iter_mut().zip(yr) {
                        *dv = p * (*dv - dot);
                    }
                }
                accumulate(&mut adj[a.0], d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(p).cols();
                    accumulate(&mut adj[p.0], g.slice_cols(start, w));
                    start += w;
                }
            }
            Op::SumSquares(a) => {
                let s = g.item().expect("scalar adjoint");
                let two = T::one() + T::one();
                accumulate(&mut adj[a.0], val(a).scale(two * s));
            }
        }
    }

    for (id, node) in tape.nodes.iter().enumerate() {
        if let Op::Param(name) = &node.op {
            grads.entry(name.clone()).or_insert_with(|| {
                let (r, c) = eval.value(NodeId(id)).shape();
                Tensor2::zeros(r, c)
            });
        }
    }
    Ok(grads)
}

/// Forward pass followed by reverse accumulation from `loss`.
pub fn gradients<T: Real>(
    tape: &Tape,
    loss: NodeId,
    inputs: &dyn Bindings<T>,
    params: &dyn Bindings<T>,
) -> Result<BTreeMap<String, Tensor2<T>>> {
    let eval = forward(tape, inputs, params)?;
    backward(tape, &eval, loss)
}
