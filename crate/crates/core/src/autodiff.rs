//! Reverse-mode differentiation over dense real tensors.
//!
//! Operations are recorded on a tape ([`Graph`]) as they are evaluated;
//! [`Graph::backward`] replays the tape in reverse and accumulates gradients
//! into the parameter store. The op set is the minimum needed for dense
//! feed-forward networks and vector-quantization losses: elementwise
//! arithmetic, matrix multiply, ReLU-family nonlinearities, softmax,
//! reductions, cross-entropy, stop-gradient and the straight-through
//! pass-through.

use std::fmt::{Debug, Display};

use thiserror::Error;

/// Scalar type the engine is generic over. Training runs in `f32`;
/// gradient-check oracles instantiate `f64`.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + std::iter::Sum + Debug + Display + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: data length {got} does not match shape {rows}x{cols}")]
    BadLength {
        op: &'static str,
        got: usize,
        rows: usize,
        cols: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

/// A dense tensor with an optional accumulated gradient.
///
/// `data` is row-major; `grad`, when present, has the same length as `data`.
#[derive(Debug, Clone)]
pub struct Tensor<F: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, GradError> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&s| s == 0) || expect != data.len() {
            return Err(GradError::BadLength {
                op: "tensor",
                got: data.len(),
                rows: shape.first().copied().unwrap_or(0),
                cols: shape.get(1).copied().unwrap_or(1),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
            requires_grad: true,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view: 1-D tensors are treated as a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[F]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

pub type ParamId = usize;

/// Owning store for trainable tensors. Gradients accumulate here across
/// `backward` calls and are cleared explicitly by the caller.
#[derive(Debug, Clone, Default)]
pub struct Params<F: Real> {
    slots: Vec<Tensor<F>>,
}

impl<F: Real> Params<F> {
    pub fn new() -> Self {
        Params { slots: Vec::new() }
    }

    pub fn add(&mut self, t: Tensor<F>) -> ParamId {
        self.slots.push(t);
        self.slots.len() - 1
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.slots[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.slots[id]
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        self.slots[id].requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.slots {
            t.zero_grad();
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.slots.len()
    }

    pub fn cast<T: Real>(&self) -> Params<T> {
        Params {
            slots: self.slots.iter().map(|t| t.cast()).collect(),
        }
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    BiasAdd(NodeId, NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, F),
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SquaredL2(NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    // the input id is kept for graph introspection; backward ignores it
    StopGrad(#[allow(dead_code)] NodeId),
    /// Forward value was injected at construction; backward passes the
    /// incoming gradient unchanged to the wrapped node.
    StraightThrough(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    Scale(NodeId, F),
}

#[derive(Debug)]
struct Node<F: Real> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// A tape of compute nodes. Construction order is a topological order, so
/// backward is a single reverse sweep; shared subexpressions accumulate
/// gradients additively.
#[derive(Debug, Default)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    // ----- leaves -------------------------------------------------------

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<NodeId, GradError> {
        if data.len() != rows * cols {
            return Err(GradError::BadLength {
                op: "constant",
                got: data.len(),
                rows,
                cols,
            });
        }
        Ok(self.push(rows, cols, data, Op::Constant, false))
    }

    pub fn scalar(&mut self, v: F) -> NodeId {
        self.push(1, 1, vec![v], Op::Constant, false)
    }

    pub fn param(&mut self, params: &Params<F>, id: ParamId) -> NodeId {
        let t = params.get(id);
        let (rows, cols) = t.matrix_shape();
        self.push(rows, cols, t.data.clone(), Op::Param(id), t.requires_grad)
    }

    // ----- elementwise ---------------------------------------------------

    fn check_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::ShapeMismatch {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.check_same("add", a, b)?;
        let (r, c) = self.shape(a);
        let v = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.check_same("sub", a, b)?;
        let (r, c) = self.shape(a);
        let v = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.check_same("mul", a, b)?;
        let (r, c) = self.shape(a);
        let v = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, k: F) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.nodes[a].value.iter().map(|&x| x * k).collect();
        let ng = self.needs(a);
        self.push(r, c, v, Op::Scale(a, k), ng)
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                left: (m, k),
                right: (k2, n),
            });
        }
        let mut v = vec![F::zero(); m * n];
        {
            let av = &self.nodes[a].value;
            let bv = &self.nodes[b].value;
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == F::zero() {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let out = &mut v[i * n..(i + 1) * n];
                    for (o, &y) in out.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, v, Op::MatMul(a, b), ng))
    }

    /// Broadcasts a `[1, n]` bias over every row of `[m, n]`.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, GradError> {
        let (m, n) = self.shape(x);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != n {
            return Err(GradError::ShapeMismatch {
                op: "bias_add",
                left: (m, n),
                right: (br, bc),
            });
        }
        let mut v = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                v.push(self.nodes[x].value[i * n + j] + self.nodes[bias].value[j]);
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(m, n, v, Op::BiasAdd(x, bias), ng))
    }

    // ----- nonlinearities --------------------------------------------------

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.nodes[a]
            .value
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let ng = self.needs(a);
        self.push(r, c, v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: F) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.nodes[a]
            .value
            .iter()
            .map(|&x| if x > F::zero() { x } else { x * slope })
            .collect();
        let ng = self.needs(a);
        self.push(r, c, v, Op::LeakyRelu(a, slope), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut v = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &self.nodes[a].value[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = row.iter().map(|&x| (x - m).exp()).collect();
            let z: F = exps.iter().cloned().sum();
            v.extend(exps.iter().map(|&e| e / z));
        }
        let ng = self.needs(a);
        self.push(r, c, v, Op::Softmax(a), ng)
    }

    // ----- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: F = self.nodes[a].value.iter().cloned().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len();
        let s: F = self.nodes[a].value.iter().cloned().sum();
        let v = s / F::from_f64(n as f64);
        let ng = self.needs(a);
        self.push(1, 1, vec![v], Op::Mean(a), ng)
    }

    /// Sum of squared entries, as a scalar node.
    pub fn squared_l2(&mut self, a: NodeId) -> NodeId {
        let s: F = self.nodes[a].value.iter().map(|&x| x * x).sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s], Op::SquaredL2(a), ng)
    }

    /// Mean over rows of softmax cross-entropy against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, GradError> {
        let (r, c) = self.shape(logits);
        if labels.len() != r {
            return Err(GradError::BadLength {
                op: "cross_entropy",
                got: labels.len(),
                rows: r,
                cols: 1,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(GradError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                limit: c,
            });
        }
        let mut total = F::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &self.nodes[logits].value[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&x| (x - m).exp()).sum();
            total += m + z.ln() - row[label];
        }
        let v = total / F::from_f64(r as f64);
        let ng = self.needs(logits);
        Ok(self.push(1, 1, vec![v], Op::CrossEntropy(logits, labels.to_vec()), ng))
    }

    // ----- gradient routing ---------------------------------------------------

    /// Identity forward, zero gradient backward.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.nodes[a].value.clone();
        self.push(r, c, v, Op::StopGrad(a), false)
    }

    /// Forward value is `value` (bit-exact); the incoming gradient is passed
    /// through unchanged to `grad_to`.
    pub fn straight_through(&mut self, grad_to: NodeId, value: &[F]) -> Result<NodeId, GradError> {
        let (r, c) = self.shape(grad_to);
        if value.len() != r * c {
            return Err(GradError::BadLength {
                op: "straight_through",
                got: value.len(),
                rows: r,
                cols: c,
            });
        }
        let ng = self.needs(grad_to);
        Ok(self.push(r, c, value.to_vec(), Op::StraightThrough(grad_to), ng))
    }

    // ----- indexing -------------------------------------------------------------

    /// Selects rows of `src` by index; backward scatter-adds into the source rows.
    pub fn gather_rows(&mut self, src: NodeId, indices: &[usize]) -> Result<NodeId, GradError> {
        let (r, c) = self.shape(src);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(GradError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                limit: r,
            });
        }
        let mut v = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            v.extend_from_slice(&self.nodes[src].value[i * c..(i + 1) * c]);
        }
        let ng = self.needs(src);
        Ok(self.push(indices.len(), c, v, Op::GatherRows(src, indices.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId, GradError> {
        let (r, c) = self.shape(src);
        if start + len > c {
            return Err(GradError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                limit: c,
            });
        }
        let mut v = Vec::with_capacity(r * len);
        for i in 0..r {
            v.extend_from_slice(&self.nodes[src].value[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(src);
        Ok(self.push(r, len, v, Op::SliceCols(src, start, len), ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GradError> {
        if parts.is_empty() {
            return Err(GradError::Invalid("concat_cols: no inputs".into()));
        }
        let (r, _) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(GradError::ShapeMismatch {
                    op: "concat_cols",
                    left: (r, 0),
                    right: (pr, pc),
                });
            }
            total += pc;
        }
        let mut v = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let (_, pc) = self.shape(p);
                v.extend_from_slice(&self.nodes[p].value[i * pc..(i + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(r, total, v, Op::ConcatCols(parts.to_vec()), ng))
    }

    // ----- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of `Param` leaves are
    /// accumulated into `params`; repeated calls without `zero_grad` add up.
    pub fn backward(&mut self, loss: NodeId, params: &mut Params<F>) -> Result<(), GradError> {
        if self.shape(loss) != (1, 1) {
            return Err(GradError::NonScalarLoss(self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![F::one()]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            macro_rules! acc {
                ($target:expr, $idx:expr, $val:expr) => {{
                    let t: NodeId = $target;
                    if self.nodes[t].needs_grad {
                        let slot = grads[t].get_or_insert_with(|| {
                            vec![F::zero(); self.nodes[t].value.len()]
                        });
                        slot[$idx] += $val;
                    }
                }};
            }
            match &self.nodes[id].op {
                Op::Constant | Op::StopGrad(_) => {}
                Op::Param(pid) => {
                    params.get_mut(*pid).accumulate_grad(&g);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    for (i, &gi) in g.iter().enumerate() {
                        acc!(a, i, gi);
                        acc!(b, i, gi);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    for (i, &gi) in g.iter().enumerate() {
                        acc!(a, i, gi);
                        acc!(b, i, -gi);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    for i in 0..g.len() {
                        let av = self.nodes[a].value[i];
                        let bv = self.nodes[b].value[i];
                        acc!(a, i, g[i] * bv);
                        acc!(b, i, g[i] * av);
                    }
                }
                Op::Scale(a, k) => {
                    let (a, k) = (*a, *k);
                    for (i, &gi) in g.iter().enumerate() {
                        acc!(a, i, gi * k);
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                    let n = self.nodes[b].cols;
                    // dA = g . B^T, dB = A^T . g
                    if self.nodes[a].needs_grad {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = F::zero();
                                for j in 0..n {
                                    s += g[i * n + j] * self.nodes[b].value[p * n + j];
                                }
                                acc!(a, i * k + p, s);
                            }
                        }
                    }
                    if self.nodes[b].needs_grad {
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = F::zero();
                                for i in 0..m {
                                    s += self.nodes[a].value[i * k + p] * g[i * n + j];
                                }
                                acc!(b, p * n + j, s);
                            }
                        }
                    }
                }
                Op::BiasAdd(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    let n = self.nodes[x].cols;
                    for (i, &gi) in g.iter().enumerate() {
                        acc!(x, i, gi);
                        acc!(bias, i % n, gi);
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    for (i, &gi) in g.iter().enumerate() {
                        if self.nodes[a].value[i] > F::zero() {
                            acc!(a, i, gi);
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let (a, slope) = (*a, *slope);
                    for (i, &gi) in g.iter().enumerate() {
                        let passed = if self.nodes[a].value[i] > F::zero() {
                            gi
                        } else {
                            gi * slope
                        };
                        acc!(a, i, passed);
                    }
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let (r, c) = (self.nodes[id].rows, self.nodes[id].cols);
                    for i in 0..r {
                        let s = &self.nodes[id].value[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: F = s.iter().zip(gr).map(|(&si, &gi)| si * gi).sum();
                        for j in 0..c {
                            acc!(a, i * c + j, s[j] * (gr[j] - dot));
                        }
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    for i in 0..self.nodes[a].value.len() {
                        acc!(a, i, g[0]);
                    }
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = F::from_f64(self.nodes[a].value.len() as f64);
                    for i in 0..self.nodes[a].value.len() {
                        acc!(a, i, g[0] / n);
                    }
                }
                Op::SquaredL2(a) => {
                    let a = *a;
                    let two = F::from_f64(2.0);
                    for i in 0..self.nodes[a].value.len() {
                        let xv = self.nodes[a].value[i];
                        acc!(a, i, two * xv * g[0]);
                    }
                }
                Op::CrossEntropy(logits, labels) => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let (r, c) = (self.nodes[logits].rows, self.nodes[logits].cols);
                    let inv_r = F::one() / F::from_f64(r as f64);
                    for i in 0..r {
                        let row = &self.nodes[logits].value[i * c..(i + 1) * c];
                        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                        let exps: Vec<F> = row.iter().map(|&x| (x - m).exp()).collect();
                        let z: F = exps.iter().cloned().sum();
                        for j in 0..c {
                            let mut p = exps[j] / z;
                            if j == labels[i] {
                                p -= F::one();
                            }
                            acc!(logits, i * c + j, p * inv_r * g[0]);
                        }
                    }
                }
                Op::StraightThrough(grad_to) => {
                    let grad_to = *grad_to;
                    for (i, &gi) in g.iter().enumerate() {
                        acc!(grad_to, i, gi);
                    }
                }
                Op::GatherRows(src, indices) => {
                    let src = *src;
                    let indices = indices.clone();
                    let c = self.nodes[src].cols;
                    for (out_row, &src_row) in indices.iter().enumerate() {
                        for j in 0..c {
                            acc!(src, src_row * c + j, g[out_row * c + j]);
                        }
                    }
                }
                Op::SliceCols(src, start, len) => {
                    let (src, start, len) = (*src, *start, *len);
                    let c = self.nodes[src].cols;
                    let r = self.nodes[id].rows;
                    for i in 0..r {
                        for j in 0..len {
                            acc!(src, i * c + start + j, g[i * len + j]);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let r = self.nodes[id].rows;
                    let total = self.nodes[id].cols;
                    let mut offset = 0;
                    for &p in &parts {
                        let pc = self.nodes[p].cols;
                        for i in 0..r {
                            for j in 0..pc {
                                acc!(p, i * pc + j, g[i * total + offset + j]);
                            }
                        }
                        offset += pc;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn add_forward() {
        let mut g = graph();
        let a = g.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let b = g.constant(1, 2, vec![3.0, 4.0]).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn squared_l2_forward() {
        let mut g = graph();
        let a = g.constant(1, 2, vec![3.0, 4.0]).unwrap();
        let n = g.squared_l2(a);
        assert_eq!(g.scalar_value(n), 25.0);
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let mut g = graph();
        let logits = g.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let ce = g.cross_entropy(logits, &[0]).unwrap();
        assert!((g.scalar_value(ce) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = graph();
        let a = g.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let b = g.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn backward_square() {
        // loss = x^2 at x=3 -> grad 6
        let mut params = Params::new();
        let x = params.add(Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut g = graph();
        let xn = g.param(&params, x);
        let sq = g.mul(xn, xn).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(x).grad.as_deref(), Some(&[6.0][..]));
    }

    #[test]
    fn backward_distance_to_target() {
        // loss = ||x - c||^2 at x=(1,1), c=(0,0) -> grad (2,2)
        let mut params = Params::new();
        let x = params.add(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut g = graph();
        let xn = g.param(&params, x);
        let c = g.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let d = g.sub(xn, c).unwrap();
        let loss = g.squared_l2(d);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(x).grad.as_deref(), Some(&[2.0, 2.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut params = Params::new();
        let x = params.add(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut g = graph();
        let xn = g.param(&params, x);
        assert!(matches!(
            g.backward(xn, &mut params),
            Err(GradError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut params = Params::new();
        let x = params.add(Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut g = graph();
        let xn = g.param(&params, x);
        let sq = g.mul(xn, xn).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut params).unwrap();
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(x).grad.as_deref(), Some(&[12.0][..]));
        params.zero_grad();
        assert!(params.get(x).grad.is_none());
    }

    #[test]
    fn shared_subexpression_sums_over_paths() {
        // loss = y + y with y = 2x  =>  dloss/dx = 4
        let mut params = Params::new();
        let x = params.add(Tensor::new(vec![1], vec![5.0]).unwrap());
        let mut g = graph();
        let xn = g.param(&params, x);
        let y = g.scale(xn, 2.0);
        let s = g.add(y, y).unwrap();
        let loss = g.sum(s);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(x).grad.as_deref(), Some(&[4.0][..]));
    }

    #[test]
    fn stop_grad_blocks_one_path() {
        // d/dx [x * sg(x)] at x=2 -> 2 (not 4)
        let mut params = Params::new();
        let x = params.add(Tensor::new(vec![1], vec![2.0]).unwrap());
        let mut g = graph();
        let xn = g.param(&params, x);
        let sg = g.stop_grad(xn);
        let prod = g.mul(xn, sg).unwrap();
        let loss = g.sum(prod);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(x).grad.as_deref(), Some(&[2.0][..]));
    }

    #[test]
    fn stop_grad_blocks_fully() {
        // d/dx ||sg(x) - c||^2 == 0 for all x, c
        let mut params = Params::new();
        let x = params.add(Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        let mut g = graph();
        let xn = g.param(&params, x);
        let sg = g.stop_grad(xn);
        let c = g.constant(1, 2, vec![0.3, 0.7]).unwrap();
        let d = g.sub(sg, c).unwrap();
        let loss = g.squared_l2(d);
        g.backward(loss, &mut params).unwrap();
        assert!(params.get(x).grad.is_none());
        assert!(g.scalar_value(loss) > 0.0);
    }

    #[test]
    fn stop_grad_is_identity_forward() {
        let mut g = graph();
        let a = g.constant(1, 3, vec![0.1, -2.0, 7.5]).unwrap();
        let sg = g.stop_grad(a);
        assert_eq!(g.value(sg), g.value(a));
    }

    #[test]
    fn straight_through_forward_and_backward() {
        // out = st(x, z); loss = ||out - c||^2; grad(x) = 2(z - c) regardless of x
        let mut params = Params::new();
        let x = params.add(Tensor::new(vec![2], vec![9.0, -9.0]).unwrap());
        let mut g = graph();
        let xn = g.param(&params, x);
        let z = [0.5, 1.5];
        let st = g.straight_through(xn, &z).unwrap();
        assert_eq!(g.value(st), &z);
        let c = g.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let d = g.sub(st, c).unwrap();
        let loss = g.squared_l2(d);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(x).grad.as_deref(), Some(&[1.0, 3.0][..]));
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut params = Params::new();
        let w = params.add(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mut g = graph();
        let wn = g.param(&params, w);
        let sel = g.gather_rows(wn, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(sel), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = g.sum(sel);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(
            params.get(w).grad.as_deref(),
            Some(&[1.0, 1.0, 2.0, 2.0, 0.0, 0.0][..])
        );
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let mut g = graph();
        let a = g.constant(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let left = g.slice_cols(a, 0, 2).unwrap();
        let right = g.slice_cols(a, 2, 2).unwrap();
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.value(back), g.value(a));
    }

    /// Central finite differences on an f64 parameter vector.
    fn finite_diff(
        build: &dyn Fn(&Params<f64>) -> f64,
        params: &Params<f64>,
        pid: ParamId,
        idx: usize,
    ) -> f64 {
        let h = 1e-4;
        let mut p = params.clone();
        p.get_mut(pid).data[idx] += h;
        let up = build(&p);
        p.get_mut(pid).data[idx] -= 2.0 * h;
        let down = build(&p);
        (up - down) / (2.0 * h)
    }

    /// Gradient check harness: `build` assembles the loss on a fresh graph.
    fn assert_grads_match(build: &dyn Fn(&mut Graph<f64>, &Params<f64>) -> NodeId, params: &Params<f64>) {
        let mut p = params.clone();
        let mut g = Graph::new();
        let loss = build(&mut g, &p);
        g.backward(loss, &mut p).unwrap();

        let value_of = |pp: &Params<f64>| -> f64 {
            let mut gg = Graph::new();
            let l = build(&mut gg, pp);
            gg.scalar_value(l)
        };

        for pid in params.ids() {
            let n = params.get(pid).numel();
            for idx in 0..n {
                let fd = finite_diff(&value_of, params, pid, idx);
                let ad = p.get(pid).grad.as_ref().map(|g| g[idx]).unwrap_or(0.0);
                let tol = 1e-4 * fd.abs().max(1.0);
                assert!(
                    (fd - ad).abs() <= tol,
                    "grad mismatch pid={pid} idx={idx}: fd={fd} ad={ad}"
                );
            }
        }
    }

    #[test]
    fn finite_difference_all_ops() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);

        let mut params = Params::new();
        let a = params.add(
            Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        let b = params.add(
            Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        let w = params.add(
            Tensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        let bias = params.add(
            Tensor::new(vec![2], (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        // keep relu inputs away from the kink
        for v in params.get_mut(a).data.iter_mut() {
            if (*v as f64).abs() < 1e-2 {
                *v += 0.05;
            }
        }

        let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, &Params<f64>) -> NodeId>)> = vec![
            ("add", Box::new(|g, p| {
                let an = g.param(p, 0);
                let bn = g.param(p, 1);
                let s = g.add(an, bn).unwrap();
                let sq = g.squared_l2(s);
                g.scale(sq, 0.5)
            })),
            ("sub_mul", Box::new(|g, p| {
                let an = g.param(p, 0);
                let bn = g.param(p, 1);
                let d = g.sub(an, bn).unwrap();
                let m = g.mul(d, an).unwrap();
                g.sum(m)
            })),
            ("matmul_bias_relu", Box::new(|g, p| {
                let an = g.param(p, 0);
                let wn = g.param(p, 2);
                let bn = g.param(p, 3);
                let mm = g.matmul(an, wn).unwrap();
                let ba = g.bias_add(mm, bn).unwrap();
                let r = g.relu(ba);
                g.squared_l2(r)
            })),
            ("leaky", Box::new(|g, p| {
                let an = g.param(p, 0);
                let r = g.leaky_relu(an, 0.1);
                g.squared_l2(r)
            })),
            ("softmax_mean", Box::new(|g, p| {
                let an = g.param(p, 0);
                let s = g.softmax(an);
                let c = g.constant(2, 3, vec![0.3, -1.0, 0.7, 0.2, 0.1, -0.4]).unwrap();
                let m = g.mul(s, c).unwrap();
                g.mean(m)
            })),
            ("cross_entropy", Box::new(|g, p| {
                let an = g.param(p, 0);
                g.cross_entropy(an, &[2, 0]).unwrap()
            })),
            ("gather_slice_concat", Box::new(|g, p| {
                let wn = g.param(p, 2);
                let sel = g.gather_rows(wn, &[2, 0, 2]).unwrap();
                let l = g.slice_cols(sel, 0, 1).unwrap();
                let r = g.slice_cols(sel, 1, 1).unwrap();
                let cat = g.concat_cols(&[r, l]).unwrap();
                g.squared_l2(cat)
            })),
        ];

        let _ = (b, w, bias);
        for (_name, build) in &cases {
            let mut p = params.clone();
            p.zero_grad();
            let b = build.as_ref();
            assert_grads_match(&|g, pp| b(g, pp), &p);
        }
    }
}
