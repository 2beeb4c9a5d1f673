//! Reverse-mode differentiation over jet-valued nodes.
//!
//! Every node holds a [`Jet`]. Plain training records order-0 jets (one
//! coefficient per node), Taylorized training records order-`k` jets whose
//! parameters are lifted onto `θ0 + r(θ - θ0)`. Since `∂/∂θ` of a Taylorized
//! output equals `∂/∂(direction)`, the gradient of a parameter is the adjoint
//! of its coefficient 1 (coefficient 0 for order-0 tapes).
//!
//! Each node records the lowest coefficient index that depends on a trainable
//! parameter (`grad_from`). Every op is causal in the coefficient index, so
//! lower adjoints never reach a parameter and are not computed.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::jet::{self, Elementary, Jet};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

/// Shared, thread-safe elementary function handle.
pub type ElementaryFn = Arc<dyn Elementary + Send + Sync>;

#[derive(Clone)]
enum Op {
    Param { name: String },
    Constant,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `a[m×n] · b[q×n]ᵀ`
    MatMulTb(NodeId, NodeId),
    /// Adds `bias[C]` along axis 1 of `input[N, C, ...]`.
    AddBias { input: NodeId, bias: NodeId },
    Activation { input: NodeId, f: ElementaryFn },
    /// Same-padded, stride-1 convolution, `[N,Ci,H,W] ⊛ [Co,Ci,kh,kw]`.
    Conv2d { input: NodeId, kernel: NodeId },
    GlobalAvgPool(NodeId),
    Sum(NodeId),
    EvalSum(NodeId),
    CrossEntropy { logits: NodeId, labels: Arc<Vec<usize>> },
    SquaredError { pred: NodeId, targets: Arc<Tensor> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param { .. } => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMulTb(..) => "matmul_tb",
            Op::AddBias { .. } => "add_bias",
            Op::Activation { .. } => "activation",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Sum(_) => "sum",
            Op::EvalSum(_) => "eval_sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SquaredError { .. } => "squared_error",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Param { .. } | Op::Constant => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMulTb(a, b) => vec![*a, *b],
            Op::AddBias { input, bias } => vec![*input, *bias],
            Op::Conv2d { input, kernel } => vec![*input, *kernel],
            Op::Scale(a, _)
            | Op::GlobalAvgPool(a)
            | Op::Sum(a)
            | Op::EvalSum(a)
            | Op::Activation { input: a, .. }
            | Op::CrossEntropy { logits: a, .. }
            | Op::SquaredError { pred: a, .. } => vec![*a],
        }
    }
}

const NO_GRAD: usize = usize::MAX;

struct Node {
    op: Op,
    value: Jet,
    grad_from: usize,
}

/// Named parameter gradients, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.0.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `sqrt(Σ ‖g‖²)` over all entries.
    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.0.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Jet {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn get(&self, id: NodeId) -> Result<&Jet> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Tape(format!("node {} is not on this tape", id.0)))
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        for input in op.inputs() {
            self.get(input)?;
        }
        let value = compute(&op, |id| &self.nodes[id.0].value)?;
        let grad_from = op
            .inputs()
            .iter()
            .map(|i| self.nodes[i.0].grad_from)
            .min()
            .unwrap_or(NO_GRAD);
        let grad_from = match op {
            // Output coefficient 0 collects every input coefficient.
            Op::EvalSum(_) | Op::CrossEntropy { .. } | Op::SquaredError { .. }
                if grad_from != NO_GRAD =>
            {
                0
            }
            _ => grad_from,
        };
        self.nodes.push(Node {
            op,
            value,
            grad_from,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A trainable leaf. Order 0 records `θ` itself; order `k >= 1` records
    /// the lift `anchor + r(θ - anchor)`.
    pub fn param(&mut self, name: &str, theta: &Tensor, anchor: &Tensor, order: usize) -> Result<NodeId> {
        if self
            .nodes
            .iter()
            .any(|n| matches!(&n.op, Op::Param { name: other } if other == name))
        {
            return Err(Error::Tape(format!("duplicate parameter {name:?}")));
        }
        let (value, grad_from) = if order == 0 {
            (Jet::lift_const(theta, 0)?, 0)
        } else {
            (Jet::lift_param(anchor, &theta.sub(anchor)?, order)?, 1)
        };
        self.nodes.push(Node {
            op: Op::Param { name: name.to_string() },
            value,
            grad_from,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that receives no gradient (inputs, frozen parameters).
    pub fn constant(&mut self, value: &Tensor, order: usize) -> Result<NodeId> {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Jet::lift_const(value, order)?,
            grad_from: NO_GRAD,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMulTb(a, b))
    }

    pub fn add_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias { input, bias })
    }

    pub fn activation(&mut self, input: NodeId, f: ElementaryFn) -> Result<NodeId> {
        self.push(Op::Activation { input, f })
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.push(Op::Conv2d { input, kernel })
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        self.push(Op::GlobalAvgPool(input))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(input))
    }

    pub fn eval_sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.push(Op::EvalSum(input))
    }

    /// Mean softmax cross-entropy of `[N×C]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::CrossEntropy {
            logits,
            labels: Arc::new(labels.to_vec()),
        })
    }

    /// `(1/N) Σ_i ½‖pred_i - target_i‖²`
    pub fn squared_error(&mut self, pred: NodeId, targets: &Tensor) -> Result<NodeId> {
        self.push(Op::SquaredError {
            pred,
            targets: Arc::new(targets.clone()),
        })
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Jet>> {
        let mut values: Vec<Jet> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Param { .. } | Op::Constant => node.value.clone(),
                ref op => compute(op, |id| &values[id.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Gradient of a scalar order-0 node with respect to every parameter
    /// leaf on the tape.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let lv = self.get(loss)?;
        if lv.order() != 0 || lv.shape() != [1] {
            return Err(Error::Tape(format!(
                "loss must be an order-0 scalar, got order {} shape {:?}",
                lv.order(),
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<Tensor>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![Tensor::scalar(1.0)]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.grad_from == NO_GRAD || matches!(node.op, Op::Param { .. }) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.backprop(node, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        let mut grads = GradientMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param { name } = &node.op {
                let slot = if node.value.order() == 0 { 0 } else { 1 };
                let g = adj[idx]
                    .as_ref()
                    .map(|g| g[slot].clone())
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }

    fn backprop(&self, node: &Node, g: &[Tensor], adj: &mut [Option<Vec<Tensor>>]) -> Result<()> {
        let out = &node.value;
        let out_active = out.active();
        match &node.op {
            Op::Param { .. } | Op::Constant => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some((ga, lo, hi)) = self.slot(id, adj) {
                        for i in lo..hi.min(out_active) {
                            kernels::axpy(1.0, g[i].data(), ga[i].data_mut());
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some((ga, lo, hi)) = self.slot(*a, adj) {
                    for i in lo..hi {
                        kernels::axpy(*c, g[i].data(), ga[i].data_mut());
                    }
                }
            }
            Op::Mul(a, b) => {
                self.bilinear_back(*a, *b, g, out_active, adj, |gc, bv, ga| {
                    kernels::mul_acc(gc, bv, ga)
                }, |av, gc, gb| kernels::mul_acc(gc, av, gb));
            }
            Op::MatMulTb(a, b) => {
                let (m, n) = self.value(*a).coeff(0).dims2()?;
                let (q, _) = self.value(*b).coeff(0).dims2()?;
                self.bilinear_back(
                    *a,
                    *b,
                    g,
                    out_active,
                    adj,
                    |gc, bv, ga| kernels::matmul_acc(gc, bv, ga, m, q, n),
                    |av, gc, gb| kernels::matmul_ta_acc(gc, av, gb, m, q, n),
                );
            }
            Op::Conv2d { input, kernel } => {
                let geom = ConvGeom::new(self.value(*input).shape(), self.value(*kernel).shape())?;
                self.bilinear_back(
                    *input,
                    *kernel,
                    g,
                    out_active,
                    adj,
                    |gc, kv, gx| conv_back_input(gc, kv, gx, &geom),
                    |xv, gc, gk| conv_back_kernel(xv, gc, gk, &geom),
                );
            }
            Op::AddBias { input, bias } => {
                if let Some((ga, lo, hi)) = self.slot(*input, adj) {
                    for i in lo..hi.min(out_active) {
                        kernels::axpy(1.0, g[i].data(), ga[i].data_mut());
                    }
                }
                let (channels, inner) = bias_layout(out.shape());
                if let Some((gb, lo, hi)) = self.slot(*bias, adj) {
                    for i in lo..hi.min(out_active) {
                        let gb = gb[i].data_mut();
                        for (blk, chunk) in g[i].data().chunks(inner).enumerate() {
                            gb[blk % channels] += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Activation { input, f } => {
                let a = self.value(*input);
                if let Some((ga, lo, hi)) = self.slot(*input, adj) {
                    activation_back(a, f.as_ref(), g, out_active, ga, lo, hi);
                }
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.value(*a).shape().to_vec();
                let hw: usize = shape[2..].iter().product();
                if let Some((ga, lo, hi)) = self.slot(*a, adj) {
                    let inv = 1.0 / hw as f64;
                    for i in lo..hi.min(out_active) {
                        let gi = g[i].data();
                        for (c, chunk) in ga[i].data_mut().chunks_mut(hw).enumerate() {
                            chunk.iter_mut().for_each(|v| *v += gi[c] * inv);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some((ga, lo, hi)) = self.slot(*a, adj) {
                    for i in lo..hi.min(out_active) {
                        let s = g[i].data()[0];
                        ga[i].data_mut().iter_mut().for_each(|v| *v += s);
                    }
                }
            }
            Op::EvalSum(a) => {
                if let Some((ga, lo, hi)) = self.slot(*a, adj) {
                    for gi in &mut ga[lo..hi] {
                        kernels::axpy(1.0, g[0].data(), gi.data_mut());
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let z = self.value(*logits).coeff(0);
                let (nrows, c) = z.dims2()?;
                if let Some((ga, _, _)) = self.slot(*logits, adj) {
                    let scale = g[0].data()[0] / nrows as f64;
                    let ga = ga[0].data_mut();
                    for (r, &y) in labels.iter().enumerate() {
                        let row = z.row(r);
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / denom;
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            ga[r * c + j] += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::SquaredError { pred, targets } => {
                let z = self.value(*pred).coeff(0);
                let nrows = z.shape()[0];
                if let Some((ga, _, _)) = self.slot(*pred, adj) {
                    let scale = g[0].data()[0] / nrows as f64;
                    for ((o, &p), &t) in ga[0].data_mut().iter_mut().zip(z.data()).zip(targets.data()) {
                        *o += scale * (p - t);
                    }
                }
            }
        }
        Ok(())
    }

    /// Mutable adjoint buffer of an input plus the coefficient range
    /// `[grad_from, active)` that needs accumulating.
    fn slot<'a>(
        &self,
        id: NodeId,
        adj: &'a mut [Option<Vec<Tensor>>],
    ) -> Option<(&'a mut Vec<Tensor>, usize, usize)> {
        let node = &self.nodes[id.0];
        if node.grad_from == NO_GRAD {
            return None;
        }
        let v = &node.value;
        let buf = adj[id.0].get_or_insert_with(|| {
            (0..=v.order()).map(|_| Tensor::zeros(v.shape())).collect()
        });
        Some((buf, node.grad_from, v.active()))
    }

    /// Adjoint of `C_j = Σ_{i+l=j} op(A_i, B_l)`:
    /// `gA_i += Σ_l adj_a(gC_{i+l}, B_l)`, `gB_l += Σ_i adj_b(A_i, gC_{i+l})`.
    #[allow(clippy::too_many_arguments)]
    fn bilinear_back(
        &self,
        a: NodeId,
        b: NodeId,
        g: &[Tensor],
        out_active: usize,
        adj: &mut [Option<Vec<Tensor>>],
        adj_a: impl Fn(&[f64], &[f64], &mut [f64]),
        adj_b: impl Fn(&[f64], &[f64], &mut [f64]),
    ) {
        let av = self.value(a);
        let bv = self.value(b);
        if let Some((ga, lo, hi)) = self.slot(a, adj) {
            for i in lo..hi {
                for l in 0..bv.active() {
                    if i + l < out_active {
                        adj_a(g[i + l].data(), bv.coeff(l).data(), ga[i].data_mut());
                    }
                }
            }
        }
        if let Some((gb, lo, hi)) = self.slot(b, adj) {
            for l in lo..hi {
                for i in 0..av.active() {
                    if i + l < out_active {
                        adj_b(av.coeff(i).data(), g[i + l].data(), gb[l].data_mut());
                    }
                }
            }
        }
    }
}

fn activation_back(
    a: &Jet,
    f: &(dyn Elementary + Send + Sync),
    g: &[Tensor],
    out_active: usize,
    ga: &mut [Tensor],
    lo: usize,
    hi: usize,
) {
    let k = a.order();
    let n = a.coeff(0).len();
    let mut s = vec![0.0; k + 2];
    let mut e = vec![0.0; k + 1];
    let mut local = vec![0.0; k + 1];
    let mut d = vec![0.0; k + 1];
    for idx in 0..n {
        for (j, slot) in local.iter_mut().enumerate() {
            *slot = if j < a.active() { a.coeff(j).data()[idx] } else { 0.0 };
        }
        f.taylor_coeffs(local[0], &mut s);
        // σ' as a series: e_j = (j+1) s_{j+1}.
        for (j, ej) in e.iter_mut().enumerate() {
            *ej = (j + 1) as f64 * s[j + 1];
        }
        if a.active() == 1 {
            d.iter_mut().for_each(|v| *v = 0.0);
            d[0] = e[0];
        } else {
            jet::compose_series(&e, &local, &mut d);
        }
        for i in lo..hi {
            let mut acc = 0.0;
            for j in i..out_active {
                acc += g[j].data()[idx] * d[j - i];
            }
            ga[i].data_mut()[idx] += acc;
        }
    }
}

fn bias_layout(shape: &[usize]) -> (usize, usize) {
    let channels = shape[1];
    let inner: usize = shape[2..].iter().product();
    (channels, inner)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: &[usize]) -> Result<Self> {
        match (x, k) {
            ([n, ci, h, w], [co, ci2, kh, kw]) if ci == ci2 && kh % 2 == 1 && kw % 2 == 1 => {
                Ok(Self {
                    n: *n,
                    ci: *ci,
                    co: *co,
                    h: *h,
                    w: *w,
                    kh: *kh,
                    kw: *kw,
                })
            }
            _ => Err(Error::shape("conv2d", x, k)),
        }
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.n, self.co, self.h, self.w]
    }

    /// Calls `f(out_offset, in_offset, len)` for every valid row segment of
    /// output channel `o`, input channel `c`, tap `(dy, dx)`, sample `b`.
    #[inline]
    fn for_each_segment(&self, b: usize, o: usize, c: usize, dy: usize, dx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (py, px) = (self.kh / 2, self.kw / 2);
        let x_lo = px.saturating_sub(dx);
        let x_hi = (self.w + px).saturating_sub(dx).min(self.w);
        if x_lo >= x_hi {
            return;
        }
        let len = x_hi - x_lo;
        for y in 0..self.h {
            let iy = y + dy;
            if iy < py || iy - py >= self.h {
                continue;
            }
            let iy = iy - py;
            let ix = x_lo + dx - px;
            let out_off = ((b * self.co + o) * self.h + y) * self.w + x_lo;
            let in_off = ((b * self.ci + c) * self.h + iy) * self.w + ix;
            f(out_off, in_off, len);
        }
    }

    fn kernel_index(&self, o: usize, c: usize, dy: usize, dx: usize) -> usize {
        ((o * self.ci + c) * self.kh + dy) * self.kw + dx
    }
}

fn conv_acc(x: &[f64], k: &[f64], out: &mut [f64], g: &ConvGeom) {
    for b in 0..g.n {
        for o in 0..g.co {
            for c in 0..g.ci {
                for dy in 0..g.kh {
                    for dx in 0..g.kw {
                        let wv = k[g.kernel_index(o, c, dy, dx)];
                        g.for_each_segment(b, o, c, dy, dx, |oo, io, len| {
                            kernels::axpy(wv, &x[io..io + len], &mut out[oo..oo + len]);
                        });
                    }
                }
            }
        }
    }
}

fn conv_back_input(gout: &[f64], k: &[f64], gx: &mut [f64], g: &ConvGeom) {
    for b in 0..g.n {
        for o in 0..g.co {
            for c in 0..g.ci {
                for dy in 0..g.kh {
                    for dx in 0..g.kw {
                        let wv = k[g.kernel_index(o, c, dy, dx)];
                        g.for_each_segment(b, o, c, dy, dx, |oo, io, len| {
                            kernels::axpy(wv, &gout[oo..oo + len], &mut gx[io..io + len]);
                        });
                    }
                }
            }
        }
    }
}

fn conv_back_kernel(x: &[f64], gout: &[f64], gk: &mut [f64], g: &ConvGeom) {
    for b in 0..g.n {
        for o in 0..g.co {
            for c in 0..g.ci {
                for dy in 0..g.kh {
                    for dx in 0..g.kw {
                        let mut acc = 0.0;
                        g.for_each_segment(b, o, c, dy, dx, |oo, io, len| {
                            acc += kernels::dot(&gout[oo..oo + len], &x[io..io + len]);
                        });
                        gk[g.kernel_index(o, c, dy, dx)] += acc;
                    }
                }
            }
        }
    }
}

fn same_order(op: &'static str, a: &Jet, b: &Jet) -> Result<()> {
    if a.order() != b.order() {
        return Err(Error::OrderMismatch {
            op,
            lhs: a.order(),
            rhs: b.order(),
        });
    }
    Ok(())
}

fn require_order0(op: &'static str, a: &Jet) -> Result<()> {
    if a.order() != 0 {
        return Err(Error::OrderMismatch {
            op,
            lhs: a.order(),
            rhs: 0,
        });
    }
    Ok(())
}

fn compute<'a>(op: &Op, get: impl Fn(NodeId) -> &'a Jet) -> Result<Jet> {
    Ok(match op {
        Op::Param { .. } | Op::Constant => {
            return Err(Error::Tape("leaves are not computed".into()))
        }
        Op::Add(a, b) => get(*a).add(get(*b))?,
        Op::Mul(a, b) => get(*a).mul(get(*b))?,
        Op::Scale(a, c) => get(*a).scale(*c),
        Op::MatMulTb(a, b) => {
            let (a, b) = (get(*a), get(*b));
            same_order("matmul_tb", a, b)?;
            let (m, n) = a.coeff(0).dims2()?;
            let (q, n2) = b.coeff(0).dims2()?;
            if n != n2 {
                return Err(Error::shape("matmul_tb", a.shape(), b.shape()));
            }
            jet::bilinear(a, b, &[m, q], |x, y, out| kernels::matmul_tb_acc(x, y, out, m, n, q))
        }
        Op::AddBias { input, bias } => {
            let (a, b) = (get(*input), get(*bias));
            same_order("add_bias", a, b)?;
            if a.shape().len() < 2 || b.shape() != [a.shape()[1]] {
                return Err(Error::shape("add_bias", a.shape(), b.shape()));
            }
            let (channels, inner) = bias_layout(a.shape());
            let active = a.active().max(b.active());
            let coeffs = (0..=a.order())
                .map(|j| {
                    let mut t = a.coeff(j).clone();
                    if j < b.active() {
                        let bj = b.coeff(j).data();
                        for (blk, chunk) in t.data_mut().chunks_mut(inner).enumerate() {
                            let v = bj[blk % channels];
                            chunk.iter_mut().for_each(|x| *x += v);
                        }
                    }
                    t
                })
                .collect();
            Jet::from_parts(coeffs, active)
        }
        Op::Activation { input, f } => jet::compose_jet(get(*input), f.as_ref()),
        Op::Conv2d { input, kernel } => {
            let (x, k) = (get(*input), get(*kernel));
            same_order("conv2d", x, k)?;
            let geom = ConvGeom::new(x.shape(), k.shape())?;
            jet::bilinear(x, k, &geom.out_shape(), |xv, kv, out| conv_acc(xv, kv, out, &geom))
        }
        Op::GlobalAvgPool(a) => {
            let a = get(*a);
            let shape = a.shape();
            if shape.len() != 4 {
                return Err(Error::InvalidArgument(format!(
                    "global_avg_pool expects [N,C,H,W], got {shape:?}"
                )));
            }
            let hw = shape[2] * shape[3];
            let inv = 1.0 / hw as f64;
            let coeffs = a
                .coeffs()
                .iter()
                .map(|c| {
                    let data = c.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() * inv).collect();
                    Tensor::new(vec![shape[0], shape[1]], data)
                })
                .collect::<Result<_>>()?;
            Jet::from_parts(coeffs, a.active())
        }
        Op::Sum(a) => {
            let a = get(*a);
            let coeffs = a.coeffs().iter().map(|c| Tensor::scalar(c.sum())).collect();
            Jet::from_parts(coeffs, a.active())
        }
        Op::EvalSum(a) => Jet::lift_const(&get(*a).eval_sum(), 0)?,
        Op::CrossEntropy { logits, labels } => {
            let z = get(*logits);
            require_order0("cross_entropy", z)?;
            let (nrows, c) = z.coeff(0).dims2()?;
            if labels.len() != nrows {
                return Err(Error::shape("cross_entropy", z.shape(), &[labels.len()]));
            }
            if let Some(bad) = labels.iter().find(|&&y| y >= c) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} out of range for {c} classes"
                )));
            }
            let z = z.coeff(0);
            let total: f64 = labels
                .iter()
                .enumerate()
                .map(|(r, &y)| {
                    let row = z.row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    lse - row[y]
                })
                .sum();
            Jet::lift_const(&Tensor::scalar(total / nrows as f64), 0)?
        }
        Op::SquaredError { pred, targets } => {
            let z = get(*pred);
            require_order0("squared_error", z)?;
            if z.shape() != targets.shape() {
                return Err(Error::shape("squared_error", z.shape(), targets.shape()));
            }
            let nrows = z.shape()[0].max(1);
            let total: f64 = z
                .coeff(0)
                .data()
                .iter()
                .zip(targets.data())
                .map(|(p, t)| 0.5 * (p - t) * (p - t))
                .sum();
            Jet::lift_const(&Tensor::scalar(total / nrows as f64), 0)?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ActivationKind;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn half_square_gradient() {
        let mut tape = Tape::new();
        let theta = t(&[3], &[1.0, -2.0, 3.0]);
        let p = tape.param("theta", &theta, &theta, 0).unwrap();
        let sq = tape.mul(p, p).unwrap();
        let h = tape.scale(sq, 0.5).unwrap();
        let l = tape.sum(h).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get("theta").unwrap(), &theta);
    }

    #[test]
    fn linear_loss_gradient() {
        let mut tape = Tape::new();
        let w = t(&[1, 3], &[0.5, 1.0, -1.0]);
        let x = t(&[1, 3], &[2.0, 3.0, 4.0]);
        let p = tape.param("w", &w, &w, 0).unwrap();
        let xc = tape.constant(&x, 0).unwrap();
        let y = tape.matmul_tb(xc, p).unwrap();
        let l = tape.sum(y).unwrap();
        assert_eq!(tape.backward(l).unwrap().get("w").unwrap(), &x);
    }

    #[test]
    fn constant_leaves_get_no_gradient_and_unused_params_get_zero() {
        let mut tape = Tape::new();
        let a = tape.param("a", &t(&[2], &[1.0, 2.0]), &t(&[2], &[1.0, 2.0]), 0).unwrap();
        let _b = tape.param("b", &t(&[2], &[5.0, 6.0]), &t(&[2], &[5.0, 6.0]), 0).unwrap();
        let c = tape.constant(&t(&[2], &[3.0, 4.0]), 0).unwrap();
        let m = tape.mul(a, c).unwrap();
        let l = tape.sum(m).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get("a").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.get("b").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_non_scalar_loss_and_duplicates() {
        let mut tape = Tape::new();
        let v = t(&[2], &[1.0, 2.0]);
        let a = tape.param("a", &v, &v, 0).unwrap();
        assert!(tape.backward(a).is_err());
        assert!(tape.param("a", &v, &v, 0).is_err());
    }

    #[test]
    fn loss_ops_require_order_zero() {
        let mut tape = Tape::new();
        let v = t(&[1, 2], &[1.0, 2.0]);
        let a = tape.param("a", &v, &v, 2).unwrap();
        assert!(matches!(
            tape.cross_entropy(a, &[0]),
            Err(Error::OrderMismatch { .. })
        ));
        let e = tape.eval_sum(a).unwrap();
        assert!(tape.cross_entropy(e, &[0]).is_ok());
        assert!(tape.cross_entropy(e, &[2]).is_err());
    }

    #[test]
    fn taylor_gradient_of_a_quadratic_is_exact() {
        // f(θ) = Σ tanh-free quadratic: ½ Σ θ², order 2 → exact.
        let mut tape = Tape::new();
        let anchor = t(&[2], &[0.3, -0.7]);
        let theta = t(&[2], &[1.1, 0.4]);
        let p = tape.param("p", &theta, &anchor, 2).unwrap();
        let sq = tape.mul(p, p).unwrap();
        let h = tape.scale(sq, 0.5).unwrap();
        let s = tape.sum(h).unwrap();
        let l = tape.eval_sum(s).unwrap();
        assert!((tape.value(l).coeff(0).data()[0] - 0.5 * (1.21 + 0.16)).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        assert!(g.get("p").unwrap().max_abs_diff(&theta).unwrap() < 1e-15);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(&[2, 4]), 0).unwrap();
        let l = tape.cross_entropy(z, &[1, 3]).unwrap();
        assert!((tape.value(l).coeff(0).data()[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let w = t(&[2, 3], &[0.1, -0.2, 0.3, 0.5, 0.4, -0.6]);
        let w0 = t(&[2, 3], &[0.0, -0.1, 0.2, 0.4, 0.3, -0.5]);
        let x = t(&[1, 3], &[1.0, 2.0, -1.0]);
        let p = tape.param("w", &w, &w0, 3).unwrap();
        let xc = tape.constant(&x, 3).unwrap();
        let h = tape.matmul_tb(xc, p).unwrap();
        let a = tape.activation(h, Arc::new(ActivationKind::Tanh)).unwrap();
        let s = tape.sum(a).unwrap();
        let _ = tape.eval_sum(s).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(NodeId(i)));
        }
    }

    #[test]
    fn conv_matches_direct_definition() {
        let x: Vec<f64> = (0..2 * 2 * 4 * 3).map(|v| ((v as f64) * 0.37).sin()).collect();
        let k: Vec<f64> = (0..3 * 2 * 3 * 3).map(|v| ((v as f64) * 0.11).cos()).collect();
        let g = ConvGeom::new(&[2, 2, 4, 3], &[3, 2, 3, 3]).unwrap();
        let mut out = vec![0.0; 2 * 3 * 4 * 3];
        conv_acc(&x, &k, &mut out, &g);
        for b in 0..2 {
            for o in 0..3 {
                for y in 0..4i64 {
                    for xx in 0..3i64 {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for dy in 0..3i64 {
                                for dx in 0..3i64 {
                                    let (iy, ix) = (y + dy - 1, xx + dx - 1);
                                    if (0..4).contains(&iy) && (0..3).contains(&ix) {
                                        acc += k[((o * 2 + c) * 3 + dy as usize) * 3 + dx as usize]
                                            * x[((b * 2 + c) * 4 + iy as usize) * 3 + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = out[((b * 3 + o) * 4 + y as usize) * 3 + xx as usize];
                        assert!((got - acc).abs() < 1e-13);
                    }
                }
            }
        }
    }
}
