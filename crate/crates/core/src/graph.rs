//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every batch: node construction evaluates the
//! forward value eagerly, and [`Graph::backward`] walks the arena in reverse
//! creation order, which is a valid reverse topological order because inputs
//! always exist before the nodes that consume them.
//!
//! Custom-gradient nodes carry an explicit backward closure that the engine
//! never inspects. Gradient reversal is built on this extension point: its
//! backward rule is deliberately not the derivative of its forward rule, so
//! such nodes are tagged `non_derivative` and the finite-difference checker
//! refuses graphs that contain one.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

type CustomBackward = dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + Send + Sync;

pub struct CustomOp {
    pub tag: &'static str,
    /// True when the backward rule is not the derivative of the forward rule.
    pub non_derivative: bool,
    pub backward: Box<CustomBackward>,
}

enum Op {
    Input,
    Param,
    Const,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Matmul,
    AddBias,
    Relu,
    Tanh,
    Exp,
    LayerNorm,
    LogSoftmax,
    SoftmaxVec,
    Pick(usize),
    Sum,
    Reshape,
    Custom(CustomOp),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Matmul => "matmul",
            Op::AddBias => "add_bias",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::LayerNorm => "layer_norm",
            Op::LogSoftmax => "log_softmax",
            Op::SoftmaxVec => "softmax_vec",
            Op::Pick(_) => "pick",
            Op::Sum => "sum",
            Op::Reshape => "reshape",
            Op::Custom(c) => c.tag,
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    label: Option<String>,
}

/// Scale shared with a gradient-reversal node, settable after the forward
/// pass (the adaptive reversal strength depends on batch statistics that are
/// only known once the discriminator branch has been built).
#[derive(Clone)]
pub struct ReversalScale(Arc<AtomicU64>);

impl ReversalScale {
    pub fn new(value: f64) -> Self {
        ReversalScale(Arc::new(AtomicU64::new(value.to_bits())))
    }

    pub fn set(&self, value: f64) {
        self.0.store(value.to_bits(), Ordering::Relaxed);
    }

    pub fn get(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Relaxed))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// First node whose forward value went non-finite, if any. Checked by
    /// consumers that must abort loudly instead of training on garbage.
    non_finite: Option<String>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    /// Name of the first node with a non-finite forward value, if any.
    pub fn finite_violation(&self) -> Option<&str> {
        self.non_finite.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.scalar_value()
    }

    fn node_name(&self, id: NodeId) -> String {
        match &self.nodes[id.0].label {
            Some(l) => l.clone(),
            None => format!("{}#{}", self.nodes[id.0].op.tag(), id.0),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, label: Option<String>) -> NodeId {
        if self.non_finite.is_none() && !value.all_finite() {
            let name = match &label {
                Some(l) => l.clone(),
                None => format!("{}#{}", op.tag(), self.nodes.len()),
            };
            self.non_finite = Some(name);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            label,
        });
        id
    }

    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(Op::Input, vec![], value, Some(name.to_string()))
    }

    /// Fetches `name` from a feed map, failing loudly when the leaf is unfed.
    pub fn input_from(&mut self, feeds: &BTreeMap<String, Tensor>, name: &str) -> Result<NodeId> {
        let value = feeds
            .get(name)
            .ok_or_else(|| Error::UnfedInput(name.to_string()))?;
        Ok(self.input(name, value.clone()))
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(Op::Param, vec![], value, Some(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, vec![], value, None)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = match op {
            Op::Add => tensor::add(self.value(a), self.value(b)),
            Op::Sub => tensor::sub(self.value(a), self.value(b)),
            Op::Mul => tensor::mul(self.value(a), self.value(b)),
            Op::Matmul => tensor::matmul(self.value(a), self.value(b)),
            Op::AddBias => tensor::add_row_broadcast(self.value(a), self.value(b)),
            _ => unreachable!(),
        };
        let value = value.map_err(|e| self.name_shape_error(e, a, b))?;
        Ok(self.push(op, vec![a, b], value, None))
    }

    /// Rewrites a kernel shape error so it names the offending graph nodes.
    fn name_shape_error(&self, e: Error, a: NodeId, b: NodeId) -> Error {
        match e {
            Error::ShapeMismatch { op, lhs, rhs, .. } => Error::ShapeMismatch {
                op,
                lhs_name: self.node_name(a),
                rhs_name: self.node_name(b),
                lhs,
                rhs,
            },
            other => other,
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Matmul, a, b)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.binary(Op::AddBias, a, bias)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = tensor::scale(self.value(a), c);
        self.push(Op::Scale(c), vec![a], value, None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = tensor::relu(self.value(a));
        self.push(Op::Relu, vec![a], value, None)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = tensor::tanh(self.value(a));
        self.push(Op::Tanh, vec![a], value, None)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = tensor::exp(self.value(a));
        self.push(Op::Exp, vec![a], value, None)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias))
            .map_err(|e| self.name_shape_error(e, x, gain))?;
        Ok(self.push(Op::LayerNorm, vec![x, gain, bias], value, None))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let value = tensor::log_softmax(self.value(a));
        self.push(Op::LogSoftmax, vec![a], value, None)
    }

    /// Stable softmax over a rank-1 tensor.
    pub fn softmax_vec(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).rank() != 1 {
            return Err(Error::InvalidTensor(format!(
                "softmax_vec expects rank 1, got shape {:?} from `{}`",
                self.value(a).shape(),
                self.node_name(a)
            )));
        }
        let value = tensor::softmax(self.value(a));
        Ok(self.push(Op::SoftmaxVec, vec![a], value, None))
    }

    /// Selects one element of a rank-1 tensor as a scalar node.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 1 || index >= v.len() {
            return Err(Error::InvalidTensor(format!(
                "pick index {index} out of bounds for shape {:?} from `{}`",
                v.shape(),
                self.node_name(a)
            )));
        }
        let value = Tensor::scalar(v.data()[index]);
        Ok(self.push(Op::Pick(index), vec![a], value, None))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum, vec![a], value, None)
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = Tensor::from_vec(shape, self.value(a).data().to_vec())?;
        Ok(self.push(Op::Reshape, vec![a], value, None))
    }

    /// `a + c · b` for scalar nodes; the workhorse of loss assembly.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> Result<NodeId> {
        let sb = self.scale(b, c);
        self.add(a, sb)
    }

    /// Generic custom-gradient node. `value` must already be computed by the
    /// caller; the engine only stores the backward closure.
    pub fn custom(&mut self, inputs: Vec<NodeId>, value: Tensor, op: CustomOp) -> NodeId {
        self.push(Op::Custom(op), inputs, value, None)
    }

    /// Identity forward, `g ↦ −scale·g` backward. Returns the node and a
    /// handle for setting the reversal scale after the forward pass.
    pub fn gradient_reversal(&mut self, a: NodeId, scale: f64) -> (NodeId, ReversalScale) {
        let handle = ReversalScale::new(scale);
        let closure_handle = handle.clone();
        let value = self.value(a).clone();
        let id = self.custom(
            vec![a],
            value,
            CustomOp {
                tag: "grad_reverse",
                non_derivative: true,
                backward: Box::new(move |upstream, _inputs, _out| {
                    vec![tensor::scale(upstream, -closure_handle.get())]
                }),
            },
        );
        (id, handle)
    }

    /// Name of the first non-derivative node, if any.
    pub fn non_derivative_node(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| match &n.op {
            Op::Custom(c) if c.non_derivative => Some(format!("{}#{}", c.tag, i)),
            _ => None,
        })
    }

    /// Reverse accumulation from a scalar loss node. Returns per-node
    /// gradients for every node that influences the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let input_grads = self.vjp(node, &upstream);
            grads[id] = Some(upstream);
            for (slot, grad) in node.inputs.iter().zip(input_grads) {
                match &mut grads[slot.0] {
                    Some(acc) => tensor::add_into(acc, &grad),
                    empty => *empty = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node, upstream: &Tensor) -> Vec<Tensor> {
        let input = |k: usize| self.value(node.inputs[k]);
        match &node.op {
            Op::Input | Op::Param | Op::Const => vec![],
            Op::Add => vec![upstream.clone(), upstream.clone()],
            Op::Sub => vec![upstream.clone(), tensor::scale(upstream, -1.0)],
            Op::Mul => vec![
                tensor::mul(upstream, input(1)).expect("mul vjp"),
                tensor::mul(upstream, input(0)).expect("mul vjp"),
            ],
            Op::Scale(c) => vec![tensor::scale(upstream, *c)],
            Op::Matmul => {
                let a = input(0);
                let b = input(1);
                let da = tensor::matmul_nt(upstream, b).expect("matmul vjp lhs");
                let db = tensor::matmul_tn(a, upstream).expect("matmul vjp rhs");
                vec![reshape_like(da, a), reshape_like(db, b)]
            }
            Op::AddBias => {
                let db = column_sums(upstream);
                vec![upstream.clone(), db]
            }
            Op::Relu => {
                let x = input(0);
                let data = x
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect();
                vec![Tensor::from_vec(x.shape(), data).expect("relu vjp")]
            }
            Op::Tanh => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&yv, &g)| g * (1.0 - yv * yv))
                    .collect();
                vec![Tensor::from_vec(y.shape(), data).expect("tanh vjp")]
            }
            Op::Exp => {
                let y = &node.value;
                vec![tensor::mul(upstream, y).expect("exp vjp")]
            }
            Op::LayerNorm => self.layer_norm_vjp(node, upstream),
            Op::LogSoftmax => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = upstream.clone();
                for i in 0..y.rows() {
                    let gsum: f64 = upstream.row(i).iter().sum();
                    let slice = &mut dx.data_mut()[i * cols..(i + 1) * cols];
                    for (d, &yv) in slice.iter_mut().zip(y.row(i)) {
                        *d -= yv.exp() * gsum;
                    }
                }
                vec![dx]
            }
            Op::SoftmaxVec => {
                let y = &node.value;
                let dot: f64 = upstream
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &yv)| g * yv)
                    .sum();
                let data = y
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&yv, &g)| yv * (g - dot))
                    .collect();
                vec![Tensor::from_vec(y.shape(), data).expect("softmax vjp")]
            }
            Op::Pick(i) => {
                let x = input(0);
                let mut dx = Tensor::zeros(x.shape());
                dx.data_mut()[*i] = upstream.scalar_value();
                vec![dx]
            }
            Op::Sum => {
                let x = input(0);
                vec![Tensor::filled(x.shape(), upstream.scalar_value())]
            }
            Op::Reshape => {
                let x = input(0);
                vec![reshape_like(upstream.clone(), x)]
            }
            Op::Custom(c) => {
                let values: Vec<&Tensor> = node.inputs.iter().map(|&i| self.value(i)).collect();
                let grads = (c.backward)(upstream, &values, &node.value);
                assert_eq!(
                    grads.len(),
                    node.inputs.len(),
                    "custom backward for `{}` returned {} gradients for {} inputs",
                    c.tag,
                    grads.len(),
                    node.inputs.len()
                );
                grads
            }
        }
    }

    fn layer_norm_vjp(&self, node: &Node, upstream: &Tensor) -> Vec<Tensor> {
        let x = self.value(node.inputs[0]);
        let gain = self.value(node.inputs[1]);
        let c = x.cols();
        let n = c as f64;
        let mut dx = Tensor::zeros(x.shape());
        let mut dgain = Tensor::zeros(gain.shape());
        let mut dbias = Tensor::zeros(gain.shape());
        for i in 0..x.rows() {
            let row = x.row(i);
            let (mean, rstd) = tensor::layer_norm_stats(row);
            let g = upstream.row(i);
            // dy = g ⊙ gain, in normalized coordinates x̂ = (x − μ)·rstd
            let mut dy_sum = 0.0;
            let mut dy_xhat_sum = 0.0;
            for j in 0..c {
                let xhat = (row[j] - mean) * rstd;
                let dy = g[j] * gain.data()[j];
                dy_sum += dy;
                dy_xhat_sum += dy * xhat;
                dgain.data_mut()[j] += g[j] * xhat;
                dbias.data_mut()[j] += g[j];
            }
            let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
            for j in 0..c {
                let xhat = (row[j] - mean) * rstd;
                let dy = g[j] * gain.data()[j];
                dst[j] = rstd * (dy - dy_sum / n - xhat * dy_xhat_sum / n);
            }
        }
        vec![dx, dgain, dbias]
    }

    /// Collects gradients of all [`Op::Param`] nodes keyed by parameter name.
    pub fn param_gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param = node.op {
                if let Some(g) = &grads.grads[i] {
                    let name = node.label.clone().unwrap_or_default();
                    out.entry(name)
                        .and_modify(|acc: &mut Tensor| tensor::add_into(acc, g))
                        .or_insert_with(|| g.clone());
                }
            }
        }
        out
    }
}

fn reshape_like(mut t: Tensor, like: &Tensor) -> Tensor {
    if t.shape() != like.shape() {
        debug_assert_eq!(t.len(), like.len());
        t = Tensor::from_vec(like.shape(), t.data().to_vec()).expect("reshape_like");
    }
    t
}

fn column_sums(m: &Tensor) -> Tensor {
    let c = m.cols();
    let mut out = Tensor::zeros(&[c]);
    for i in 0..m.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}
