//! Minimal dynamic reverse-mode tape.
//!
//! Nodes are evaluated eagerly as they are recorded, so creation order is a
//! valid forward order. [`Tape::backward`] walks the nodes in reverse,
//! visiting each node's parents in the order they were given, which makes the
//! accumulated adjoints bit-for-bit reproducible.
//!
//! Trainable tensors live in a [`ParameterStore`]; a tape only copies their
//! current values into leaf nodes and, after the backward sweep, adds the leaf
//! adjoints into the store's gradient slots.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grad;
use crate::quantized::{bin_term, Quantizer};
use crate::signal::Signal;
use crate::tf::TransferFunctionParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Parameter {
    name: String,
    value: Vec<f64>,
    grad: Vec<f64>,
}

/// Named parameter vectors with gradient slots.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::DuplicateParameter(name));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        let grad = vec![0.0; value.len()];
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    /// Mutable view; the length is fixed at registration.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            assert_eq!(p.value.len(), v.len());
            p.value.copy_from_slice(v);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.grad.iter().all(|g| g.is_finite()))
    }
}

/// Forward value (and adjoint) of a node.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Signal(Signal),
    Vector(Vec<f64>),
    Scalar(f64),
}

impl Value {
    fn zeros_like(&self) -> Value {
        match self {
            Value::Signal(s) => {
                let (b, t, c) = s.shape();
                Value::Signal(Signal::zeros(b, t, c))
            }
            Value::Vector(v) => Value::Vector(vec![0.0; v.len()]),
            Value::Scalar(_) => Value::Scalar(0.0),
        }
    }

    fn data(&self) -> &[f64] {
        match self {
            Value::Signal(s) => s.as_slice(),
            Value::Vector(v) => v,
            Value::Scalar(x) => std::slice::from_ref(x),
        }
    }

    fn data_mut(&mut self) -> &mut [f64] {
        match self {
            Value::Signal(s) => s.as_mut_slice(),
            Value::Vector(v) => v,
            Value::Scalar(x) => std::slice::from_mut(x),
        }
    }

    pub fn as_signal(&self) -> Option<&Signal> {
        match self {
            Value::Signal(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Signal(_) => "signal",
            Value::Vector(_) => "vector",
            Value::Scalar(_) => "scalar",
        }
    }
}

/// A user-defined differentiable operation.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Value]) -> Result<Value>;
    /// Adjoints of every input given the output adjoint.
    fn backward(&self, inputs: &[&Value], output: &Value, out_adj: &Value) -> Result<Vec<Value>>;
}

/// Shape of a MIMO G-block: a grid of SISO filters sharing orders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GBlockShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub n_b: usize,
    pub n_a: usize,
    pub n_k: usize,
}

impl GBlockShape {
    pub fn cells(&self) -> usize {
        self.in_channels * self.out_channels
    }

    pub fn b_len(&self) -> usize {
        self.cells() * (self.n_b + 1)
    }

    pub fn a_len(&self) -> usize {
        self.cells() * self.n_a
    }

    /// Filter of cell (`out`, `inp`) from flat coefficient arrays.
    pub fn cell(&self, b: &[f64], a: &[f64], out: usize, inp: usize) -> TransferFunctionParams {
        let c = out * self.in_channels + inp;
        TransferFunctionParams {
            b: b[c * (self.n_b + 1)..(c + 1) * (self.n_b + 1)].to_vec(),
            a: a[c * self.n_a..(c + 1) * self.n_a].to_vec(),
            n_k: self.n_k,
        }
    }
}

/// Widths of a single-hidden-layer tanh network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    GBlock {
        x: NodeId,
        b: NodeId,
        a: NodeId,
        shape: GBlockShape,
        // per batch element, per cell: the cell's own output
        cell_out: Vec<Vec<Vec<f64>>>,
    },
    Mlp {
        x: NodeId,
        w1: NodeId,
        c1: NodeId,
        w2: NodeId,
        c2: NodeId,
        shape: MlpShape,
        hidden_act: Vec<f64>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    ChannelAffine {
        x: NodeId,
        scale: Vec<f64>,
    },
    SelectChannels {
        x: NodeId,
        start: usize,
    },
    Concat(Vec<NodeId>),
    QuantizedNll {
        y: NodeId,
        log_sigma: NodeId,
        d_y: Vec<f64>,
        d_log_sigma: f64,
    },
    Detach,
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    op: Op,
    value: Value,
}

/// Accumulated adjoints of one backward sweep.
pub struct Adjoints {
    adj: Vec<Option<Value>>,
}

impl Adjoints {
    /// Adjoint of a node; `None` when the loss does not depend on it.
    pub fn get(&self, node: NodeId) -> Option<&Value> {
        self.adj[node.0].as_ref()
    }

    pub fn signal(&self, node: NodeId) -> Option<&Signal> {
        self.get(node).and_then(Value::as_signal)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamped: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Value) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id.0].value
    }

    pub fn signal(&self, id: NodeId) -> Result<&Signal> {
        self.value(id)
            .as_signal()
            .ok_or_else(|| Error::Shape(format!("node {} is not a signal", id.0)))
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.value(id)
            .as_scalar()
            .ok_or_else(|| Error::Shape(format!("node {} is not a scalar", id.0)))
    }

    fn vector(&self, id: NodeId) -> Result<&[f64]> {
        match self.value(id) {
            Value::Vector(v) => Ok(v),
            other => Err(Error::Shape(format!(
                "node {} is a {}, expected a parameter vector",
                id.0,
                other.kind()
            ))),
        }
    }

    /// Samples clamped to the probability floor by quantized-likelihood nodes.
    pub fn clamped_samples(&self) -> usize {
        self.clamped
    }

    /// Records a constant input signal.
    pub fn input(&mut self, s: Signal) -> NodeId {
        self.push(Op::Leaf, Value::Signal(s))
    }

    pub fn constant(&mut self, v: Value) -> NodeId {
        self.push(Op::Leaf, v)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), Value::Vector(store.value(id).to_vec()))
    }

    /// Copies a node's value; nothing flows back through the copy.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(Op::Detach, v)
    }

    /// MIMO transfer-function block: output `o` is `sum_i G_{o,i}(q) x_i`.
    pub fn gblock(&mut self, x: NodeId, b: NodeId, a: NodeId, shape: GBlockShape) -> Result<NodeId> {
        let xs = self.signal(x)?;
        if xs.channels() != shape.in_channels {
            return Err(Error::Shape(format!(
                "G-block expects {} input channels, got {}",
                shape.in_channels,
                xs.channels()
            )));
        }
        let (bv, av) = (self.vector(b)?, self.vector(a)?);
        if bv.len() != shape.b_len() || av.len() != shape.a_len() {
            return Err(Error::Shape(format!(
                "G-block coefficient lengths {}/{} do not match {:?}",
                bv.len(),
                av.len(),
                shape
            )));
        }
        let (batch, len, _) = xs.shape();
        let mut y = Signal::zeros(batch, len, shape.out_channels);
        let mut cell_out = Vec::with_capacity(batch);
        for bi in 0..batch {
            let inputs: Vec<Vec<f64>> = (0..shape.in_channels).map(|i| xs.channel(bi, i)).collect();
            let mut cells = Vec::with_capacity(shape.cells());
            for o in 0..shape.out_channels {
                for (i, u) in inputs.iter().enumerate() {
                    let out = shape.cell(bv, av, o, i).filter(u)?;
                    y.add_to_channel(bi, o, &out);
                    cells.push(out);
                }
            }
            cell_out.push(cells);
        }
        Ok(self.push(
            Op::GBlock {
                x,
                b,
                a,
                shape,
                cell_out,
            },
            Value::Signal(y),
        ))
    }

    /// Static network `W2 tanh(W1 x_t + c1) + c2` applied at every time step.
    /// Weight matrices are row-major (`hidden x input`, `output x hidden`).
    pub fn mlp(
        &mut self,
        x: NodeId,
        [w1, c1, w2, c2]: [NodeId; 4],
        shape: MlpShape,
    ) -> Result<NodeId> {
        let xs = self.signal(x)?;
        let MlpShape {
            input,
            hidden,
            output,
        } = shape;
        if xs.channels() != input {
            return Err(Error::Shape(format!(
                "MLP expects {input} input channels, got {}",
                xs.channels()
            )));
        }
        let (w1v, c1v, w2v, c2v) = (
            self.vector(w1)?,
            self.vector(c1)?,
            self.vector(w2)?,
            self.vector(c2)?,
        );
        if w1v.len() != hidden * input
            || c1v.len() != hidden
            || w2v.len() != output * hidden
            || c2v.len() != output
        {
            return Err(Error::Shape(format!("MLP weights do not match {shape:?}")));
        }
        let (batch, len, _) = xs.shape();
        let frames = batch * len;
        let mut hidden_act = vec![0.0; frames * hidden];
        let mut y = vec![0.0; frames * output];
        for (f, x_t) in xs.as_slice().chunks(input).enumerate() {
            let h = &mut hidden_act[f * hidden..(f + 1) * hidden];
            for (k, hk) in h.iter_mut().enumerate() {
                let row = &w1v[k * input..(k + 1) * input];
                let pre = c1v[k] + row.iter().zip(x_t).map(|(w, x)| w * x).sum::<f64>();
                *hk = pre.tanh();
            }
            let y_t = &mut y[f * output..(f + 1) * output];
            for (o, yo) in y_t.iter_mut().enumerate() {
                let row = &w2v[o * hidden..(o + 1) * hidden];
                *yo = c2v[o] + row.iter().zip(h.iter()).map(|(w, h)| w * h).sum::<f64>();
            }
        }
        let value = Value::Signal(Signal::from_raw(batch, len, output, y));
        Ok(self.push(
            Op::Mlp {
                x,
                w1,
                c1,
                w2,
                c2,
                shape,
                hidden_act,
            },
            value,
        ))
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let v = self.binary(x, y, |a, b| a + b)?;
        Ok(self.push(Op::Add(x, y), v))
    }

    pub fn sub(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let v = self.binary(x, y, |a, b| a - b)?;
        Ok(self.push(Op::Sub(x, y), v))
    }

    fn binary(&self, x: NodeId, y: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Value> {
        match (self.value(x), self.value(y)) {
            (Value::Signal(a), Value::Signal(b)) => Ok(Value::Signal(a.zip_map(b, f)?)),
            (Value::Scalar(a), Value::Scalar(b)) => Ok(Value::Scalar(f(*a, *b))),
            (Value::Vector(a), Value::Vector(b)) if a.len() == b.len() => Ok(Value::Vector(
                a.iter().zip(b).map(|(&a, &b)| f(a, b)).collect(),
            )),
            (a, b) => Err(Error::Shape(format!(
                "cannot combine {} and {}",
                a.kind(),
                b.kind()
            ))),
        }
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|e| *e *= factor);
        self.push(Op::Scale(x, factor), v)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|e| *e *= *e);
        self.push(Op::Square(x), v)
    }

    /// Mean over every element.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let d = self.value(x).data();
        let m = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.push(Op::Mean(x), Value::Scalar(m))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Value::Scalar(s))
    }

    /// Per-channel `scale_c * x + shift_c`.
    pub fn channel_affine(&mut self, x: NodeId, scale: &[f64], shift: &[f64]) -> Result<NodeId> {
        let xs = self.signal(x)?;
        let c = xs.channels();
        if scale.len() != c || shift.len() != c {
            return Err(Error::Shape("channel affine width mismatch".into()));
        }
        let data = xs
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, v)| v * scale[i % c] + shift[i % c])
            .collect();
        let (b, t, _) = xs.shape();
        let v = Value::Signal(Signal::from_raw(b, t, c, data));
        Ok(self.push(
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            v,
        ))
    }

    pub fn select_channels(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let xs = self.signal(x)?;
        let (b, t, c) = xs.shape();
        if start + count > c {
            return Err(Error::Shape(format!(
                "channels {start}..{} out of {c}",
                start + count
            )));
        }
        let data = xs
            .as_slice()
            .chunks(c)
            .flat_map(|frame| frame[start..start + count].iter().copied())
            .collect();
        let v = Value::Signal(Signal::from_raw(b, t, count, data));
        Ok(self.push(Op::SelectChannels { x, start }, v))
    }

    /// Stacks signals along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let sigs = parts
            .iter()
            .map(|&p| self.signal(p))
            .collect::<Result<Vec<_>>>()?;
        let first = sigs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (b, t, _) = first.shape();
        if sigs.iter().any(|s| s.batch() != b || s.len() != t) {
            return Err(Error::Shape("concat needs equal batch and length".into()));
        }
        let total: usize = sigs.iter().map(|s| s.channels()).sum();
        let mut data = Vec::with_capacity(b * t * total);
        for f in 0..b * t {
            for s in &sigs {
                let c = s.channels();
                data.extend_from_slice(&s.as_slice()[f * c..(f + 1) * c]);
            }
        }
        let v = Value::Signal(Signal::from_raw(b, t, total, data));
        Ok(self.push(Op::Concat(parts.to_vec()), v))
    }

    /// Negative mean log-likelihood of quantized observations `z` (one per
    /// sample of the single-channel signal `y`), with noise `exp(log_sigma)`.
    pub fn quantized_nll(
        &mut self,
        y: NodeId,
        log_sigma: NodeId,
        z: &Arc<[usize]>,
        quantizer: &Quantizer,
    ) -> Result<NodeId> {
        let ys = self.signal(y)?;
        if ys.channels() != 1 || ys.as_slice().len() != z.len() {
            return Err(Error::Shape(format!(
                "quantized likelihood needs one observation per sample ({} vs {})",
                ys.as_slice().len(),
                z.len()
            )));
        }
        if let Some(&m) = z.iter().find(|&&m| m >= quantizer.bins()) {
            return Err(Error::InvalidParams(format!("observed bin {m} out of range")));
        }
        let ls = self.vector(log_sigma)?;
        if ls.len() != 1 {
            return Err(Error::Shape("log_sigma must hold one value".into()));
        }
        let sigma = ls[0].exp();
        let n = z.len().max(1) as f64;
        let mut total = 0.0;
        let mut d_y = Vec::with_capacity(z.len());
        let mut d_log_sigma = 0.0;
        let mut clamped = 0;
        for (&yv, &m) in ys.as_slice().iter().zip(z.iter()) {
            let (lo, hi) = quantizer.interval(m);
            let term = bin_term(yv, sigma, lo, hi);
            total += term.log_prob;
            d_y.push(-term.d_y / n);
            d_log_sigma -= term.d_log_sigma / n;
            clamped += usize::from(term.clamped);
        }
        self.clamped += clamped;
        Ok(self.push(
            Op::QuantizedNll {
                y,
                log_sigma,
                d_y,
                d_log_sigma,
            },
            Value::Scalar(-total / n),
        ))
    }

    pub fn custom(&mut self, inputs: &[NodeId], op: Box<dyn CustomOp>) -> Result<NodeId> {
        let vals: Vec<&Value> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = op.forward(&vals)?;
        Ok(self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            v,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Adjoints> {
        if self.scalar(loss).is_err() {
            return Err(Error::Shape("backward needs a scalar loss node".into()));
        }
        let mut adj: Vec<Option<Value>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Value::Scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Adjoints { adj })
    }

    /// Backward sweep that also adds parameter adjoints into `store`.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParameterStore) -> Result<Adjoints> {
        let adj = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &adj.adj[i]) {
                for (s, d) in store.grad_mut(*id).iter_mut().zip(g.data()) {
                    *s += d;
                }
            }
        }
        Ok(adj)
    }

    fn propagate(&self, i: usize, g: &Value, adj: &mut [Option<Value>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Detach => {}
            Op::Add(x, y) => {
                self.accumulate(adj, *x, g.data(), 1.0);
                self.accumulate(adj, *y, g.data(), 1.0);
            }
            Op::Sub(x, y) => {
                self.accumulate(adj, *x, g.data(), 1.0);
                self.accumulate(adj, *y, g.data(), -1.0);
            }
            Op::Scale(x, f) => self.accumulate(adj, *x, g.data(), *f),
            Op::Square(x) => {
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, g)| 2.0 * v * g)
                    .collect();
                self.accumulate(adj, *x, &d, 1.0);
            }
            Op::Mean(x) => {
                let n = self.value(*x).data().len().max(1);
                let d = vec![g.data()[0] / n as f64; n];
                self.accumulate(adj, *x, &d, 1.0);
            }
            Op::Sum(x) => {
                let n = self.value(*x).data().len();
                self.accumulate(adj, *x, &vec![g.data()[0]; n], 1.0);
            }
            Op::ChannelAffine { x, scale } => {
                let c = scale.len();
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, g)| g * scale[k % c])
                    .collect();
                self.accumulate(adj, *x, &d, 1.0);
            }
            Op::SelectChannels { x, start } => {
                let c_in = self.signal(*x)?.channels();
                let count = node.value.as_signal().map_or(0, Signal::channels);
                let mut d = vec![0.0; self.value(*x).data().len()];
                for (f, frame) in g.data().chunks(count.max(1)).enumerate() {
                    d[f * c_in + start..f * c_in + start + count].copy_from_slice(frame);
                }
                self.accumulate(adj, *x, &d, 1.0);
            }
            Op::Concat(parts) => {
                let total = node.value.as_signal().map_or(0, Signal::channels);
                let mut offset = 0;
                for &p in parts {
                    let c = self.signal(p)?.channels();
                    let d: Vec<f64> = g
                        .data()
                        .chunks(total)
                        .flat_map(|frame| frame[offset..offset + c].iter().copied())
                        .collect();
                    self.accumulate(adj, p, &d, 1.0);
                    offset += c;
                }
            }
            Op::QuantizedNll {
                y,
                log_sigma,
                d_y,
                d_log_sigma,
            } => {
                let up = g.data()[0];
                self.accumulate(adj, *y, d_y, up);
                self.accumulate(adj, *log_sigma, &[*d_log_sigma], up);
            }
            Op::GBlock {
                x,
                b,
                a,
                shape,
                cell_out,
            } => self.gblock_backward(g, *x, *b, *a, *shape, cell_out, adj)?,
            Op::Mlp {
                x,
                w1,
                c1,
                w2,
                c2,
                shape,
                hidden_act,
            } => self.mlp_backward(g, *x, [*w1, *c1, *w2, *c2], *shape, hidden_act, adj)?,
            Op::Custom { inputs, op } => {
                let vals: Vec<&Value> = inputs.iter().map(|&p| self.value(p)).collect();
                let grads = op.backward(&vals, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Shape(format!(
                        "custom op `{}` returned {} adjoints for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&p, gp) in inputs.iter().zip(&grads) {
                    if gp.data().len() != self.value(p).data().len() {
                        return Err(Error::Shape(format!(
                            "custom op `{}` adjoint shape mismatch",
                            op.name()
                        )));
                    }
                    self.accumulate(adj, p, gp.data(), 1.0);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn gblock_backward(
        &self,
        g: &Value,
        x: NodeId,
        b: NodeId,
        a: NodeId,
        shape: GBlockShape,
        cell_out: &[Vec<Vec<f64>>],
        adj: &mut [Option<Value>],
    ) -> Result<()> {
        let gs = g
            .as_signal()
            .ok_or_else(|| Error::Shape("G-block adjoint must be a signal".into()))?;
        let xs = self.signal(x)?;
        let (bv, av) = (self.vector(b)?, self.vector(a)?);
        let (batch, len, _) = xs.shape();
        let mut b_bar = vec![0.0; shape.b_len()];
        let mut a_bar = vec![0.0; shape.a_len()];
        let mut u_bar = Signal::zeros(batch, len, shape.in_channels);
        let nb1 = shape.n_b + 1;
        for (bi, cells) in cell_out.iter().enumerate() {
            let inputs: Vec<Vec<f64>> = (0..shape.in_channels).map(|i| xs.channel(bi, i)).collect();
            for o in 0..shape.out_channels {
                let y_bar = gs.channel(bi, o);
                for (i, u) in inputs.iter().enumerate() {
                    let c = o * shape.in_channels + i;
                    let cell = shape.cell(bv, av, o, i);
                    let gr = grad::backward(&cell, u, &cells[c], &y_bar)?;
                    for (s, d) in b_bar[c * nb1..(c + 1) * nb1].iter_mut().zip(&gr.b_bar) {
                        *s += d;
                    }
                    for (s, d) in a_bar[c * shape.n_a..(c + 1) * shape.n_a]
                        .iter_mut()
                        .zip(&gr.a_bar)
                    {
                        *s += d;
                    }
                    u_bar.add_to_channel(bi, i, &gr.u_bar);
                }
            }
        }
        self.accumulate(adj, x, u_bar.as_slice(), 1.0);
        self.accumulate(adj, b, &b_bar, 1.0);
        self.accumulate(adj, a, &a_bar, 1.0);
        Ok(())
    }

    fn mlp_backward(
        &self,
        g: &Value,
        x: NodeId,
        [w1, c1, w2, c2]: [NodeId; 4],
        shape: MlpShape,
        hidden_act: &[f64],
        adj: &mut [Option<Value>],
    ) -> Result<()> {
        let MlpShape {
            input,
            hidden,
            output,
        } = shape;
        let xs = self.signal(x)?;
        let (w1v, w2v) = (self.vector(w1)?, self.vector(w2)?);
        let mut dw1 = vec![0.0; hidden * input];
        let mut dc1 = vec![0.0; hidden];
        let mut dw2 = vec![0.0; output * hidden];
        let mut dc2 = vec![0.0; output];
        let mut dx = vec![0.0; xs.as_slice().len()];
        let mut dpre = vec![0.0; hidden];
        for (f, dy) in g.data().chunks(output).enumerate() {
            let h = &hidden_act[f * hidden..(f + 1) * hidden];
            let x_t = &xs.as_slice()[f * input..(f + 1) * input];
            dpre.iter_mut().for_each(|d| *d = 0.0);
            for (o, &dyo) in dy.iter().enumerate() {
                dc2[o] += dyo;
                let row = o * hidden;
                for k in 0..hidden {
                    dw2[row + k] += dyo * h[k];
                    dpre[k] += dyo * w2v[row + k];
                }
            }
            for k in 0..hidden {
                dpre[k] *= 1.0 - h[k] * h[k];
                dc1[k] += dpre[k];
                let row = k * input;
                for j in 0..input {
                    dw1[row + j] += dpre[k] * x_t[j];
                    dx[f * input + j] += dpre[k] * w1v[row + j];
                }
            }
        }
        self.accumulate(adj, x, &dx, 1.0);
        self.accumulate(adj, w1, &dw1, 1.0);
        self.accumulate(adj, c1, &dc1, 1.0);
        self.accumulate(adj, w2, &dw2, 1.0);
        self.accumulate(adj, c2, &dc2, 1.0);
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Value>], target: NodeId, d: &[f64], factor: f64) {
        let slot = adj[target.0].get_or_insert_with(|| self.value(target).zeros_like());
        for (s, v) in slot.data_mut().iter_mut().zip(d) {
            *s += factor * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_difference, rel_err, rng};
    use rand::Rng;

    fn sig(v: &[f64]) -> Signal {
        Signal::from_samples(v.to_vec()).unwrap()
    }

    fn siso(n_b: usize, n_a: usize, n_k: usize) -> GBlockShape {
        GBlockShape {
            in_channels: 1,
            out_channels: 1,
            n_b,
            n_a,
            n_k,
        }
    }

    #[test]
    fn identity_filter_mean_square() {
        let mut store = ParameterStore::new();
        let b = store.register("b", vec![1.0]).unwrap();
        let a = store.register("a", vec![]).unwrap();
        let u = [1.0, -2.0, 0.5, 3.0];
        let mut tape = Tape::new();
        let x = tape.input(sig(&u));
        let (bn, an) = (tape.param(&store, b), tape.param(&store, a));
        let y = tape.gblock(x, bn, an, siso(0, 0, 0)).unwrap();
        let sq = tape.square(y);
        let loss = tape.mean(sq);
        let raw: f64 = u.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert_eq!(tape.scalar(loss).unwrap(), raw);
        let adj = tape.backward(loss).unwrap();
        let ubar = adj.signal(x).unwrap();
        for (g, v) in ubar.as_slice().iter().zip(&u) {
            assert!((g - 2.0 * v / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_block_mean_square_matches_formula() {
        let p = TransferFunctionParams::new(vec![0.5, -0.2], vec![-0.7], 1).unwrap();
        let u = [0.3, -1.0, 2.0, 0.1, 0.0, 0.8];
        let y = p.filter(&u).unwrap();
        let expect = y.iter().map(|v| v * v).sum::<f64>() / u.len() as f64;
        let mut store = ParameterStore::new();
        let b = store.register("b", p.b.clone()).unwrap();
        let a = store.register("a", p.a.clone()).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(sig(&u));
        let (bn, an) = (tape.param(&store, b), tape.param(&store, a));
        let y = tape.gblock(x, bn, an, siso(1, 1, 1)).unwrap();
        let sq = tape.square(y);
        let loss = tape.mean(sq);
        assert!((tape.scalar(loss).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn fan_out_adds_branch_gradients() {
        let mut r = rng(1);
        let u: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut store = ParameterStore::new();
        let b1 = store.register("b1", vec![0.4, 0.2]).unwrap();
        let a1 = store.register("a1", vec![-0.5]).unwrap();
        let b2 = store.register("b2", vec![1.0, -0.3]).unwrap();
        let a2 = store.register("a2", vec![0.2]).unwrap();
        let w: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();

        let branch = |store: &ParameterStore, which: [ParamId; 2]| {
            let mut tape = Tape::new();
            let x = tape.input(sig(&u));
            let (bn, an) = (tape.param(store, which[0]), tape.param(store, which[1]));
            let y = tape.gblock(x, bn, an, siso(1, 1, 0)).unwrap();
            let wn = tape.constant(Value::Signal(sig(&w)));
            let prod = tape
                .custom(&[y, wn], Box::new(crate::testutil::Mul))
                .unwrap();
            let loss = tape.sum(prod);
            let adj = tape.backward(loss).unwrap();
            adj.signal(x).unwrap().clone()
        };
        let g1 = branch(&store, [b1, a1]);
        let g2 = branch(&store, [b2, a2]);

        let mut tape = Tape::new();
        let x = tape.input(sig(&u));
        let (bn1, an1) = (tape.param(&store, b1), tape.param(&store, a1));
        let (bn2, an2) = (tape.param(&store, b2), tape.param(&store, a2));
        let y1 = tape.gblock(x, bn1, an1, siso(1, 1, 0)).unwrap();
        let y2 = tape.gblock(x, bn2, an2, siso(1, 1, 0)).unwrap();
        let s = tape.add(y1, y2).unwrap();
        let wn = tape.constant(Value::Signal(sig(&w)));
        let prod = tape.custom(&[s, wn], Box::new(crate::testutil::Mul)).unwrap();
        let loss = tape.sum(prod);
        let adj = tape.backward(loss).unwrap();
        let total = adj.signal(x).unwrap();
        for i in 0..20 {
            let e = g1.as_slice()[i] + g2.as_slice()[i];
            assert!((total.as_slice()[i] - e).abs() < 1e-14);
        }
    }

    #[test]
    fn unreachable_nodes_have_no_adjoint() {
        let mut tape = Tape::new();
        let x = tape.input(sig(&[1.0, 2.0]));
        let unused = tape.input(sig(&[3.0, 4.0]));
        let loss = tape.sum(x);
        let adj = tape.backward(loss).unwrap();
        assert!(adj.get(unused).is_none());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParameterStore::new();
        let p = store.register("p", vec![2.0]).unwrap();
        let q = store.register("q", vec![3.0]).unwrap();
        let mut tape = Tape::new();
        let pn = tape.param(&store, p);
        let qn = tape.param(&store, q);
        let pd = tape.detach(pn);
        let s = tape.add(pd, qn).unwrap();
        let sq = tape.square(s);
        let loss = tape.sum(sq);
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad(p), &[0.0]);
        assert_eq!(store.grad(q), &[10.0]);
    }

    #[test]
    fn mimo_gradients_match_finite_differences() {
        let mut r = rng(12);
        let shape = GBlockShape {
            in_channels: 2,
            out_channels: 2,
            n_b: 2,
            n_a: 2,
            n_k: 1,
        };
        let b: Vec<f64> = (0..shape.b_len()).map(|_| r.random_range(-0.5..0.5)).collect();
        let a: Vec<f64> = (0..shape.cells())
            .flat_map(|_| crate::testutil::random_stable_tf(&mut r, 0, 2, 0).a)
            .collect();
        let u = Signal::new(
            2,
            16,
            2,
            (0..64).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
        let eval = |b: &[f64], a: &[f64], u: &Signal, store_out: Option<&mut ParameterStore>| {
            let mut store = ParameterStore::new();
            let bi = store.register("b", b.to_vec()).unwrap();
            let ai = store.register("a", a.to_vec()).unwrap();
            let mut tape = Tape::new();
            let x = tape.input(u.clone());
            let (bn, an) = (tape.param(&store, bi), tape.param(&store, ai));
            let y = tape.gblock(x, bn, an, shape).unwrap();
            let wn = tape.constant(Value::Signal(Signal::new(2, 16, 2, w.clone()).unwrap()));
            let prod = tape.custom(&[y, wn], Box::new(crate::testutil::Mul)).unwrap();
            let loss = tape.sum(prod);
            let val = tape.scalar(loss).unwrap();
            let adj = tape.backward_into(loss, &mut store).unwrap();
            let ubar = adj.signal(x).unwrap().clone();
            if let Some(out) = store_out {
                *out = store;
            }
            (val, ubar)
        };
        let mut grads = ParameterStore::new();
        let (_, ubar) = eval(&b, &a, &u, Some(&mut grads));
        let gb = grads.grad(ParamId(0)).to_vec();
        let ga = grads.grad(ParamId(1)).to_vec();
        for j in 0..b.len() {
            let fd = central_difference(b[j], |v| {
                let mut bb = b.clone();
                bb[j] = v;
                eval(&bb, &a, &u, None).0
            });
            assert!(rel_err(gb[j], fd) <= 1e-5);
        }
        for j in 0..a.len() {
            let fd = central_difference(a[j], |v| {
                let mut aa = a.clone();
                aa[j] = v;
                eval(&b, &aa, &u, None).0
            });
            assert!(rel_err(ga[j], fd) <= 1e-5);
        }
        // input adjoint equals the per-cell flip-trick contributions summed per input
        for bi in 0..2 {
            for i in 0..2 {
                let mut expect = [0.0; 16];
                for o in 0..2 {
                    let wo: Vec<f64> = (0..16).map(|t| w[(bi * 16 + t) * 2 + o]).collect();
                    let gu = grad::grad_u(&shape.cell(&b, &a, o, i), &wo).unwrap();
                    expect.iter_mut().zip(&gu).for_each(|(e, g)| *e += g);
                }
                let got = ubar.channel(bi, i);
                for t in 0..16 {
                    assert!((got[t] - expect[t]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut r = rng(5);
        let shape = MlpShape {
            input: 2,
            hidden: 4,
            output: 3,
        };
        let sizes = [8, 4, 12, 3];
        let params: Vec<Vec<f64>> = sizes
            .iter()
            .map(|&n| (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let x = Signal::new(1, 5, 2, (0..10).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let loss_of = |params: &[Vec<f64>], store_out: Option<&mut ParameterStore>| {
            let mut store = ParameterStore::new();
            let ids: Vec<ParamId> = params
                .iter()
                .enumerate()
                .map(|(i, p)| store.register(format!("p{i}"), p.clone()).unwrap())
                .collect();
            let mut tape = Tape::new();
            let xn = tape.input(x.clone());
            let nodes = [0, 1, 2, 3].map(|i| tape.param(&store, ids[i]));
            let y = tape.mlp(xn, nodes, shape).unwrap();
            let sq = tape.square(y);
            let loss = tape.mean(sq);
            tape.backward_into(loss, &mut store).unwrap();
            let v = tape.scalar(loss).unwrap();
            if let Some(out) = store_out {
                *out = store;
            }
            v
        };
        let mut grads = ParameterStore::new();
        loss_of(&params, Some(&mut grads));
        for (pi, p) in params.iter().enumerate() {
            for j in 0..p.len() {
                let fd = central_difference(p[j], |v| {
                    let mut pp = params.clone();
                    pp[pi][j] = v;
                    loss_of(&pp, None)
                });
                let g = grads.grad(ParamId(pi))[j];
                assert!(rel_err(g, fd) <= 1e-5, "param {pi}[{j}]: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let run = || {
            let mut store = ParameterStore::new();
            let b = store.register("b", vec![0.3, -0.1, 0.05]).unwrap();
            let a = store.register("a", vec![-0.4, 0.1]).unwrap();
            let mut tape = Tape::new();
            let x = tape.input(sig(&[0.1, 0.7, -0.2, 0.4, 0.9, -1.1]));
            let (bn, an) = (tape.param(&store, b), tape.param(&store, a));
            let y = tape.gblock(x, bn, an, siso(2, 2, 0)).unwrap();
            let sq = tape.square(y);
            let loss = tape.mean(sq);
            tape.backward_into(loss, &mut store).unwrap();
            (store.grad(b).to_vec(), store.grad(a).to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn select_and_concat_roundtrip_gradient() {
        let x = Signal::new(1, 3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let c0 = tape.select_channels(xn, 0, 1).unwrap();
        let c1 = tape.select_channels(xn, 1, 1).unwrap();
        let c1s = tape.scale(c1, 3.0);
        let cat = tape.concat(&[c0, c1s]).unwrap();
        assert_eq!(tape.signal(cat).unwrap().as_slice(), &[1.0, 6.0, 3.0, 12.0, 5.0, 18.0]);
        let loss = tape.sum(cat);
        let adj = tape.backward(loss).unwrap();
        assert_eq!(adj.signal(xn).unwrap().as_slice(), &[1.0, 3.0, 1.0, 3.0, 1.0, 3.0]);
    }

    #[test]
    fn shape_errors() {
        let mut store = ParameterStore::new();
        let b = store.register("b", vec![1.0, 0.0]).unwrap();
        let a = store.register("a", vec![]).unwrap();
        assert!(store.register("b", vec![0.0]).is_err());
        let mut tape = Tape::new();
        let x = tape.input(Signal::zeros(1, 4, 2));
        let (bn, an) = (tape.param(&store, b), tape.param(&store, a));
        assert!(tape.gblock(x, bn, an, siso(1, 0, 0)).is_err());
        let y = tape.input(Signal::zeros(1, 5, 2));
        assert!(tape.add(x, y).is_err());
    }
}
