//! Reverse-mode differentiation of scalar losses with respect to network
//! parameters, including differentiation through interval propagation.
//!
//! Nodes are batch-valued (rows are samples), recorded in topological order
//! on an append-only [`Tape`]. Loss functions are built by chaining the
//! primitive ops below; anything outside this set is by construction not
//! expressible, which is why double backward (and with it gradient-alignment
//! style regularizers) is unsupported.
//!
//! Subgradient policy: ReLU takes slope 0 at z = 0; min/max route the
//! gradient through the attaining argument with ties broken toward the first
//! argument; |·| takes 0 at 0. Interval-affine nodes keep the positive /
//! negative weight split fixed at the forward value.

use crate::linalg::Matrix;
use crate::model::{ActivationKind, Network};
use std::collections::HashMap;
use thiserror::Error;

/// Slope chosen for the ReLU derivative, including exactly at the kink.
#[inline]
pub fn relu_subgradient(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Error)]
pub enum GradError {
    #[error("non-finite value in forward pass at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("non-finite gradient at node {node} ({op})")]
    NonFiniteGrad { node: usize, op: &'static str },
}

enum Op {
    Constant,
    InputVar,
    Affine { layer: usize, x: NodeId },
    Activation { layer: usize, z: NodeId },
    IntervalAffineLo { layer: usize, lo: NodeId, hi: NodeId },
    IntervalAffineHi { layer: usize, lo: NodeId, hi: NodeId },
    IntervalActLo { layer: usize, lo: NodeId, hi: NodeId },
    IntervalActHi { layer: usize, lo: NodeId, hi: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Abs(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Max(NodeId, NodeId),
    Min(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MaskFill { a: NodeId, mask: Matrix },
    LogSumExp(NodeId),
    GatherCol { a: NodeId, idx: Vec<usize> },
    RowSum(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SlopeParam { layer: usize },
    BroadcastRows { a: NodeId },
    L1Weights,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::InputVar => "input",
            Op::Affine { .. } => "affine",
            Op::Activation { .. } => "activation",
            Op::IntervalAffineLo { .. } => "interval-affine-lo",
            Op::IntervalAffineHi { .. } => "interval-affine-hi",
            Op::IntervalActLo { .. } => "interval-act-lo",
            Op::IntervalActHi { .. } => "interval-act-hi",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Abs(..) => "abs",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Max(..) => "max",
            Op::Min(..) => "min",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add-scalar",
            Op::MaskFill { .. } => "mask-fill",
            Op::LogSumExp(..) => "log-sum-exp",
            Op::GatherCol { .. } => "gather-col",
            Op::RowSum(..) => "row-sum",
            Op::SumAll(..) => "sum-all",
            Op::MeanAll(..) => "mean-all",
            Op::SlopeParam { .. } => "slope-param",
            Op::BroadcastRows { .. } => "broadcast-rows",
            Op::L1Weights => "l1-weights",
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Per-layer gradients mirroring [`Network`] shapes, plus gradients for
/// grafted slopes and intercepts.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub slopes: Vec<Vec<f64>>,
    pub intercepts: Vec<Vec<f64>>,
}

impl ParamGrad {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows, l.weights.cols))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            slopes: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.out_dim()])
                .collect(),
            intercepts: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.out_dim()])
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrad, c: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += c * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        for (a, b) in self.slopes.iter_mut().zip(&other.slopes) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        for (a, b) in self.intercepts.iter_mut().zip(&other.intercepts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|m| m.data.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.slopes.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self
                .intercepts
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Grads {
    pub params: ParamGrad,
    input_grads: HashMap<usize, Matrix>,
}

impl Grads {
    /// Gradient with respect to a [`Tape::input_var`] node.
    pub fn input(&self, id: NodeId) -> Option<&Matrix> {
        self.input_grads.get(&id.0)
    }
}

/// Append-only evaluation tape over one network.
pub struct Tape<'a> {
    net: &'a Network,
    nodes: Vec<Node>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl<'a> Tape<'a> {
    pub fn new(net: &'a Network) -> Self {
        Self {
            net,
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a (1×1) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!((v.rows, v.cols), (1, 1), "node is not scalar");
        v.data[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        if self.first_non_finite.is_none() && value.data.iter().any(|v| !v.is_finite()) {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Leaf whose gradient is tracked (e.g. the input under attack).
    pub fn input_var(&mut self, value: Matrix) -> NodeId {
        self.push(Op::InputVar, value)
    }

    pub fn affine(&mut self, layer: usize, x: NodeId) -> NodeId {
        let l = &self.net.layers[layer];
        let value = crate::linalg::affine_batch(&l.weights, &l.bias, self.value(x));
        self.push(Op::Affine { layer, x }, value)
    }

    pub fn activation(&mut self, layer: usize, z: NodeId) -> NodeId {
        let l = &self.net.layers[layer];
        let zv = self.value(z);
        let mut value = zv.clone();
        for i in 0..value.rows {
            let row = value.row_mut(i);
            for (v, a) in row.iter_mut().zip(&l.activations) {
                *v = a.apply(*v);
            }
        }
        self.push(Op::Activation { layer, z }, value)
    }

    /// Full forward pass from an input node to the logits node.
    pub fn forward_network(&mut self, x: NodeId) -> NodeId {
        let mut h = x;
        for layer in 0..self.net.layers.len() {
            let z = self.affine(layer, h);
            h = self.activation(layer, z);
        }
        h
    }

    /// Interval affine step; returns (lower, upper) pre-activation nodes.
    pub fn interval_affine(&mut self, layer: usize, lo: NodeId, hi: NodeId) -> (NodeId, NodeId) {
        let l = &self.net.layers[layer];
        let (vlo, vhi) = crate::linalg::interval_affine_batch(
            &l.weights,
            &l.bias,
            self.value(lo),
            self.value(hi),
        );
        let n_lo = self.push(Op::IntervalAffineLo { layer, lo, hi }, vlo);
        let n_hi = self.push(Op::IntervalAffineHi { layer, lo, hi }, vhi);
        (n_lo, n_hi)
    }

    /// Interval activation step; returns (lower, upper) post-activation nodes.
    pub fn interval_act(&mut self, layer: usize, lo: NodeId, hi: NodeId) -> (NodeId, NodeId) {
        let acts = self.net.layers[layer].activations.clone();
        let vlo = self.value(lo);
        let vhi = self.value(hi);
        let mut out_lo = Matrix::zeros(vlo.rows, vlo.cols);
        let mut out_hi = Matrix::zeros(vhi.rows, vhi.cols);
        for i in 0..vlo.rows {
            for j in 0..vlo.cols {
                let (a, b) = match acts[j] {
                    ActivationKind::Relu => (vlo.get(i, j).max(0.0), vhi.get(i, j).max(0.0)),
                    ActivationKind::GraftedLinear { slope, intercept } => {
                        if slope >= 0.0 {
                            (
                                slope * vlo.get(i, j) + intercept,
                                slope * vhi.get(i, j) + intercept,
                            )
                        } else {
                            (
                                slope * vhi.get(i, j) + intercept,
                                slope * vlo.get(i, j) + intercept,
                            )
                        }
                    }
                    ActivationKind::Identity => (vlo.get(i, j), vhi.get(i, j)),
                };
                out_lo.set(i, j, a);
                out_hi.set(i, j, b);
            }
        }
        let n_lo = self.push(Op::IntervalActLo { layer, lo, hi }, out_lo);
        let n_hi = self.push(Op::IntervalActHi { layer, lo, hi }, out_hi);
        (n_lo, n_hi)
    }

    /// Interval propagation through the whole network; returns per-layer
    /// (lower, upper) pre-activation nodes. Values match
    /// [`crate::bounds::ibp_batch_pre`] bit for bit.
    pub fn interval_network(&mut self, x: &Matrix, epsilon: f64) -> Vec<(NodeId, NodeId)> {
        let lo0 = self.constant(x.map(|v| v - epsilon));
        let hi0 = self.constant(x.map(|v| v + epsilon));
        let mut lo = lo0;
        let mut hi = hi0;
        let mut pre = Vec::with_capacity(self.net.layers.len());
        for layer in 0..self.net.layers.len() {
            let (zlo, zhi) = self.interval_affine(layer, lo, hi);
            pre.push((zlo, zhi));
            let (hlo, hhi) = self.interval_act(layer, zlo, zhi);
            lo = hlo;
            hi = hhi;
        }
        pre
    }

    fn zip_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(
            (va.rows, va.cols),
            (vb.rows, vb.cols),
            "shape mismatch in {}",
            op.name()
        );
        let value = Matrix {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        self.push(op, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    fn map_elementwise(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(a, f64::abs, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map_elementwise(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_elementwise(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_elementwise(a, |x| x + c, Op::AddScalar(a))
    }

    /// Keep entries where `mask` is nonzero; replace the rest with `fill`.
    /// Gradient flows only through kept entries.
    pub fn mask_fill(&mut self, a: NodeId, mask: Matrix, fill: f64) -> NodeId {
        let va = self.value(a);
        assert_eq!((va.rows, va.cols), (mask.rows, mask.cols));
        let value = Matrix {
            rows: va.rows,
            cols: va.cols,
            data: va
                .data
                .iter()
                .zip(&mask.data)
                .map(|(&x, &m)| if m != 0.0 { x } else { fill })
                .collect(),
        };
        self.push(Op::MaskFill { a, mask }, value)
    }

    /// Row-wise log-sum-exp, (n×d) → (n×1).
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = Matrix::zeros(va.rows, 1);
        for i in 0..va.rows {
            let row = va.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            value.set(i, 0, m + s.ln());
        }
        self.push(Op::LogSumExp(a), value)
    }

    /// Pick one column per row, (n×d) → (n×1).
    pub fn gather_col(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows, idx.len());
        let mut value = Matrix::zeros(va.rows, 1);
        for (i, &j) in idx.iter().enumerate() {
            value.set(i, 0, va.get(i, j));
        }
        self.push(Op::GatherCol { a, idx }, value)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = Matrix::zeros(va.rows, 1);
        for i in 0..va.rows {
            value.set(i, 0, va.row(i).iter().sum());
        }
        self.push(Op::RowSum(a), value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Op::SumAll(a), Matrix::from_vec(1, 1, vec![s]))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let s: f64 = va.data.iter().sum();
        let n = va.data.len() as f64;
        self.push(Op::MeanAll(a), Matrix::from_vec(1, 1, vec![s / n]))
    }

    /// The layer's grafted slope parameters as a (1×d) node; non-grafted
    /// entries read 0 and never receive gradient downstream of a mask.
    pub fn slope_param(&mut self, layer: usize) -> NodeId {
        let l = &self.net.layers[layer];
        let mut value = Matrix::zeros(1, l.out_dim());
        for (j, a) in l.activations.iter().enumerate() {
            value.set(
                0,
                j,
                match *a {
                    ActivationKind::GraftedLinear { slope, .. } => slope,
                    _ => 0.0,
                },
            );
        }
        self.push(Op::SlopeParam { layer }, value)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows, 1, "broadcast_rows expects a row vector");
        let mut value = Matrix::zeros(n, va.cols);
        for i in 0..n {
            value.row_mut(i).copy_from_slice(va.row(0));
        }
        self.push(Op::BroadcastRows { a }, value)
    }

    /// Σ|w| over all weight matrices (biases excluded), as a scalar node.
    pub fn l1_weights(&mut self) -> NodeId {
        let s: f64 = self.net.layers.iter().map(|l| l.weights.abs_sum()).sum();
        self.push(Op::L1Weights, Matrix::from_vec(1, 1, vec![s]))
    }

    /// Mean cross-entropy of logits against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lse = self.logsumexp(logits);
        let picked = self.gather_col(logits, labels.to_vec());
        let per_sample = self.sub(lse, picked);
        self.mean_all(per_sample)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Grads, GradError> {
        if let Some((node, op)) = self.first_non_finite {
            return Err(GradError::NonFinite { node, op });
        }
        let lv = self.value(loss);
        assert_eq!((lv.rows, lv.cols), (1, 1), "loss node must be scalar");

        let mut adjoints: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        let mut params = ParamGrad::zeros_like(self.net);
        let mut input_grads: HashMap<usize, Matrix> = HashMap::new();

        for idx in (0..self.nodes.len()).rev() {
            let g = match adjoints[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::InputVar => {
                    input_grads
                        .entry(idx)
                        .and_modify(|m| m.add_in_place(&g))
                        .or_insert(g);
                }
                Op::Affine { layer, x } => {
                    let l = &self.net.layers[*layer];
                    let xv = self.value(*x);
                    let dw = &mut params.weights[*layer];
                    let db = &mut params.biases[*layer];
                    for i in 0..g.rows {
                        let gr = g.row(i);
                        let xr = xv.row(i);
                        for (j, &gij) in gr.iter().enumerate() {
                            db[j] += gij;
                            if gij != 0.0 {
                                let dwr = dw.row_mut(j);
                                for (k, &xk) in xr.iter().enumerate() {
                                    dwr[k] += gij * xk;
                                }
                            }
                        }
                    }
                    let mut dx = Matrix::zeros(g.rows, l.weights.cols);
                    for i in 0..g.rows {
                        let gr = g.row(i);
                        let dr = dx.row_mut(i);
                        for (j, &gij) in gr.iter().enumerate() {
                            if gij != 0.0 {
                                let wr = l.weights.row(j);
                                for (k, &w) in wr.iter().enumerate() {
                                    dr[k] += gij * w;
                                }
                            }
                        }
                    }
                    accumulate(&mut adjoints, *x, dx);
                }
                Op::Activation { layer, z } => {
                    let l = &self.net.layers[*layer];
                    let zv = self.value(*z);
                    let mut dz = Matrix::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        for (j, act) in l.activations.iter().enumerate() {
                            let gij = g.get(i, j);
                            if gij == 0.0 {
                                continue;
                            }
                            match *act {
                                ActivationKind::Relu => {
                                    dz.set(i, j, gij * relu_subgradient(zv.get(i, j)));
                                }
                                ActivationKind::GraftedLinear { slope, .. } => {
                                    dz.set(i, j, gij * slope);
                                    params.slopes[*layer][j] += gij * zv.get(i, j);
                                    params.intercepts[*layer][j] += gij;
                                }
                                ActivationKind::Identity => dz.set(i, j, gij),
                            }
                        }
                    }
                    accumulate(&mut adjoints, *z, dz);
                }
                Op::IntervalAffineLo { layer, lo, hi } => {
                    self.backward_interval_affine(
                        *layer,
                        *lo,
                        *hi,
                        &g,
                        true,
                        &mut params,
                        &mut adjoints,
                    );
                }
                Op::IntervalAffineHi { layer, lo, hi } => {
                    self.backward_interval_affine(
                        *layer,
                        *lo,
                        *hi,
                        &g,
                        false,
                        &mut params,
                        &mut adjoints,
                    );
                }
                Op::IntervalActLo { layer, lo, hi } => {
                    self.backward_interval_act(
                        *layer,
                        *lo,
                        *hi,
                        &g,
                        true,
                        &mut params,
                        &mut adjoints,
                    );
                }
                Op::IntervalActHi { layer, lo, hi } => {
                    self.backward_interval_act(
                        *layer,
                        *lo,
                        *hi,
                        &g,
                        false,
                        &mut params,
                        &mut adjoints,
                    );
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, g.clone());
                    accumulate(&mut adjoints, *b, g);
                }
                Op::Sub(a, b) => {
                    let mut gb = g.clone();
                    gb.scale_in_place(-1.0);
                    accumulate(&mut adjoints, *a, g);
                    accumulate(&mut adjoints, *b, gb);
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let ga = elementwise(&g, vb, |x, y| x * y);
                    let gb = elementwise(&g, va, |x, y| x * y);
                    accumulate(&mut adjoints, *a, ga);
                    accumulate(&mut adjoints, *b, gb);
                }
                Op::Div(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let ga = elementwise(&g, vb, |x, y| x / y);
                    let mut gb = Matrix::zeros(g.rows, g.cols);
                    for i in 0..g.data.len() {
                        gb.data[i] = -g.data[i] * va.data[i] / (vb.data[i] * vb.data[i]);
                    }
                    accumulate(&mut adjoints, *a, ga);
                    accumulate(&mut adjoints, *b, gb);
                }
                Op::Abs(a) => {
                    let va = self.value(*a);
                    let ga = elementwise(&g, va, |x, y| {
                        if y > 0.0 {
                            x
                        } else if y < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::Tanh(a) => {
                    let tv = &node.value;
                    let ga = elementwise(&g, tv, |x, y| x * (1.0 - y * y));
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let ga = elementwise(&g, va, |x, y| x * relu_subgradient(y));
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::Max(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let mut ga = Matrix::zeros(g.rows, g.cols);
                    let mut gb = Matrix::zeros(g.rows, g.cols);
                    for i in 0..g.data.len() {
                        if va.data[i] >= vb.data[i] {
                            ga.data[i] = g.data[i];
                        } else {
                            gb.data[i] = g.data[i];
                        }
                    }
                    accumulate(&mut adjoints, *a, ga);
                    accumulate(&mut adjoints, *b, gb);
                }
                Op::Min(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let mut ga = Matrix::zeros(g.rows, g.cols);
                    let mut gb = Matrix::zeros(g.rows, g.cols);
                    for i in 0..g.data.len() {
                        if va.data[i] <= vb.data[i] {
                            ga.data[i] = g.data[i];
                        } else {
                            gb.data[i] = g.data[i];
                        }
                    }
                    accumulate(&mut adjoints, *a, ga);
                    accumulate(&mut adjoints, *b, gb);
                }
                Op::Scale(a, c) => {
                    let mut ga = g.clone();
                    ga.scale_in_place(*c);
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::AddScalar(a) => {
                    accumulate(&mut adjoints, *a, g);
                }
                Op::MaskFill { a, mask } => {
                    let ga = elementwise(&g, mask, |x, m| if m != 0.0 { x } else { 0.0 });
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::LogSumExp(a) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows, va.cols);
                    for i in 0..va.rows {
                        let gi = g.get(i, 0);
                        if gi == 0.0 {
                            continue;
                        }
                        let lse = node.value.get(i, 0);
                        let row = va.row(i);
                        let gr = ga.row_mut(i);
                        for (j, &x) in row.iter().enumerate() {
                            gr[j] = gi * (x - lse).exp();
                        }
                    }
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::GatherCol { a, idx } => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows, va.cols);
                    for (i, &j) in idx.iter().enumerate() {
                        ga.set(i, j, g.get(i, 0));
                    }
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::RowSum(a) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows, va.cols);
                    for i in 0..va.rows {
                        let gi = g.get(i, 0);
                        ga.row_mut(i).fill(gi);
                    }
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows, va.cols);
                    ga.data.fill(g.data[0]);
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::MeanAll(a) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows, va.cols);
                    ga.data.fill(g.data[0] / va.data.len() as f64);
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::SlopeParam { layer } => {
                    for (j, v) in g.row(0).iter().enumerate() {
                        params.slopes[*layer][j] += v;
                    }
                }
                Op::BroadcastRows { a } => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(1, va.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            ga.data[j] += g.get(i, j);
                        }
                    }
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::L1Weights => {
                    let gs = g.data[0];
                    for (l, layer) in self.net.layers.iter().enumerate() {
                        let dw = &mut params.weights[l];
                        for (dst, &w) in dw.data.iter_mut().zip(&layer.weights.data) {
                            if w > 0.0 {
                                *dst += gs;
                            } else if w < 0.0 {
                                *dst -= gs;
                            }
                        }
                    }
                }
            }
        }

        if !params.is_finite() {
            return Err(GradError::NonFiniteGrad {
                node: loss.0,
                op: "backward",
            });
        }
        Ok(Grads {
            params,
            input_grads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_interval_affine(
        &self,
        layer: usize,
        lo: NodeId,
        hi: NodeId,
        g: &Matrix,
        is_lower: bool,
        params: &mut ParamGrad,
        adjoints: &mut [Option<Matrix>],
    ) {
        let l = &self.net.layers[layer];
        let vlo = self.value(lo);
        let vhi = self.value(hi);
        let mut dlo = Matrix::zeros(vlo.rows, vlo.cols);
        let mut dhi = Matrix::zeros(vhi.rows, vhi.cols);
        let dw = &mut params.weights[layer];
        let db = &mut params.biases[layer];
        for i in 0..g.rows {
            let gr = g.row(i);
            let lr = vlo.row(i);
            let hr = vhi.row(i);
            for (j, &gij) in gr.iter().enumerate() {
                db[j] += gij;
                if gij == 0.0 {
                    continue;
                }
                let wr = l.weights.row(j);
                let dwr = dw.row_mut(j);
                let dlr = dlo.row_mut(i);
                let dhr = dhi.row_mut(i);
                // Split fixed at the forward sign of each weight: the lower
                // output reads the lower input through w ≥ 0 and the upper
                // input through w < 0; mirrored for the upper output.
                for (k, &w) in wr.iter().enumerate() {
                    let takes_lo = (w >= 0.0) == is_lower;
                    if takes_lo {
                        dlr[k] += gij * w;
                        dwr[k] += gij * lr[k];
                    } else {
                        dhr[k] += gij * w;
                        dwr[k] += gij * hr[k];
                    }
                }
            }
        }
        accumulate_slice(adjoints, lo, dlo);
        accumulate_slice(adjoints, hi, dhi);
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_interval_act(
        &self,
        layer: usize,
        lo: NodeId,
        hi: NodeId,
        g: &Matrix,
        is_lower: bool,
        params: &mut ParamGrad,
        adjoints: &mut [Option<Matrix>],
    ) {
        let acts = &self.net.layers[layer].activations;
        let vlo = self.value(lo);
        let vhi = self.value(hi);
        let mut dlo = Matrix::zeros(vlo.rows, vlo.cols);
        let mut dhi = Matrix::zeros(vhi.rows, vhi.cols);
        for i in 0..g.rows {
            for (j, act) in acts.iter().enumerate() {
                let gij = g.get(i, j);
                if gij == 0.0 {
                    continue;
                }
                match *act {
                    ActivationKind::Relu => {
                        if is_lower {
                            dlo.set(i, j, gij * relu_subgradient(vlo.get(i, j)));
                        } else {
                            dhi.set(i, j, gij * relu_subgradient(vhi.get(i, j)));
                        }
                    }
                    ActivationKind::GraftedLinear { slope, .. } => {
                        // Endpoint choice fixed at the forward sign of γ.
                        let src_is_lo = (slope >= 0.0) == is_lower;
                        let src = if src_is_lo {
                            vlo.get(i, j)
                        } else {
                            vhi.get(i, j)
                        };
                        if src_is_lo {
                            dlo.set(i, j, dlo.get(i, j) + gij * slope);
                        } else {
                            dhi.set(i, j, dhi.get(i, j) + gij * slope);
                        }
                        params.slopes[layer][j] += gij * src;
                        params.intercepts[layer][j] += gij;
                    }
                    ActivationKind::Identity => {
                        if is_lower {
                            dlo.set(i, j, gij);
                        } else {
                            dhi.set(i, j, gij);
                        }
                    }
                }
            }
        }
        accumulate_slice(adjoints, lo, dlo);
        accumulate_slice(adjoints, hi, dhi);
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    debug_assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn accumulate(adjoints: &mut Vec<Option<Matrix>>, id: NodeId, g: Matrix) {
    accumulate_slice(adjoints.as_mut_slice(), id, g);
}

fn accumulate_slice(adjoints: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut adjoints[id.0] {
        Some(existing) => existing.add_in_place(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Evaluate a loss built on a fresh tape and return (loss value, gradients).
pub fn grad<F>(net: &Network, build: F) -> Result<(f64, ParamGrad), GradError>
where
    F: FnOnce(&mut Tape) -> NodeId,
{
    let mut tape = Tape::new(net);
    let loss = build(&mut tape);
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok((value, grads.params))
}
