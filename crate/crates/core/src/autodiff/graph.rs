use crate::autodiff::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, transpose_data, Tensor};
use crate::error::{AlopeError, Result};
use crate::scalar::Scalar;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a node was produced; parents always have smaller ids.
#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MulScalar(NodeId, NodeId),
    Sum(NodeId),
    Silu(NodeId),
    Gelu(NodeId),
    RmsNorm { x: NodeId, gain: NodeId, eps: T },
    Gather { table: NodeId, ids: Vec<usize> },
    Row { x: NodeId, index: usize },
    ConcatRows(Vec<NodeId>),
    ColSlice { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    Softmax(NodeId),
    MaskedSoftmax(NodeId),
    Reshape(NodeId),
    Element { x: NodeId, index: usize },
    Mse(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in creation order, so the tape is already topologically
/// sorted and `backward` visits each node exactly once walking it in reverse.
///
/// Leaf gradients accumulate across repeated `backward` calls until
/// [`Graph::zero_grads`] is called; intermediate gradients are recomputed.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the most recent `backward` target w.r.t. `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn matrix(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        self.value(id)
            .dims2()
            .ok_or_else(|| AlopeError::invalid(format!("{op}: expected a matrix, got shape {:?}", self.shape(id))))
    }

    fn map_unary(&mut self, x: NodeId, op: Op<T>, f: impl Fn(T) -> T) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(AlopeError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(AlopeError::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.matrix(a, "transpose")?;
        let data = transpose_data(self.value(a).data(), m, n);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::Transpose(a), &[a]))
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(AlopeError::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds `bias[n]` to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "add_row")?;
        if self.shape(bias) != [n] {
            return Err(AlopeError::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        self.map_unary(x, Op::Scale(x, c), |a| a * c)
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn mul_scalar(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(AlopeError::shape("mul_scalar", self.shape(s), self.shape(x)));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * sv).collect())?;
        Ok(self.push(out, Op::MulScalar(s, x), &[s, x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, Op::Silu(x), |a| a * sigmoid(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.map_unary(x, Op::Gelu(x), |a| {
            let u = T::lit(SQRT_2_OVER_PI) * (a + T::lit(GELU_CUBIC) * a * a * a);
            T::lit(0.5) * a * (T::one() + u.tanh())
        })
    }

    /// Row-wise RMS normalisation of `x[m×n]` followed by a per-column `gain[n]`.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: T) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "rms_norm")?;
        if self.shape(gain) != [n] {
            return Err(AlopeError::shape("rms_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let inv = rms_inv(row, eps);
            data.extend(row.iter().zip(g).map(|(&a, &gj)| a * inv * gj));
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::RmsNorm { x, gain, eps }, &[x, gain]))
    }

    /// Selects rows `ids` of `table[v×d]`, giving `[ids.len()×d]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.matrix(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AlopeError::invalid(format!("gather: row {bad} out of range for table with {v} rows")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Row `index` of `x[m×n]` as a vector `[n]`.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let (m, _) = self.matrix(x, "row")?;
        if index >= m {
            return Err(AlopeError::invalid(format!("row: index {index} out of range for {m} rows")));
        }
        let out = Tensor::vector(self.value(x).row(index).to_vec());
        Ok(self.push(out, Op::Row { x, index }, &[x]))
    }

    /// Stacks equal-length vectors into a matrix `[k×n]`.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(AlopeError::Empty("stack"))?;
        let n = match self.shape(first) {
            [n] => *n,
            s => return Err(AlopeError::invalid(format!("stack: expected vectors, got shape {s:?}"))),
        };
        for &p in parts {
            if self.shape(p) != [n] {
                return Err(AlopeError::shape("stack", self.shape(first), self.shape(p)));
            }
        }
        let data = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let out = Tensor::new(vec![parts.len(), n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Concatenates matrices with equal column counts along the row axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(AlopeError::Empty("concat"))?;
        let (_, n) = self.matrix(first, "concat")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix(p, "concat")?;
            if c != n {
                return Err(AlopeError::shape("concat", self.shape(first), self.shape(p)));
            }
            rows += r;
        }
        let data = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of `x[m×n]`.
    pub fn col_slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "col_slice")?;
        if start + len > n || len == 0 {
            return Err(AlopeError::invalid(format!("col_slice: {start}..{} out of range for {n} columns", start + len)));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(out, Op::ColSlice { x, start }, &[x]))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(AlopeError::Empty("concat_cols"))?;
        let (m, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_cols")?;
            if r != m {
                return Err(AlopeError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Numerically stable softmax of a vector.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape().len() != 1 {
            return Err(AlopeError::invalid(format!("softmax: expected a vector, got shape {:?}", v.shape())));
        }
        if v.is_empty() {
            return Err(AlopeError::Empty("softmax"));
        }
        let out = Tensor::vector(softmax_masked(v.data(), None));
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Row-wise softmax of `x[m×n]` restricted to entries where `allowed` is set;
    /// other entries become exactly zero. Every row needs one allowed entry.
    pub fn masked_softmax(&mut self, x: NodeId, allowed: Vec<bool>) -> Result<NodeId> {
        let (m, n) = self.matrix(x, "masked_softmax")?;
        if allowed.len() != m * n {
            return Err(AlopeError::invalid("masked_softmax: mask size differs from input"));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let mask = &allowed[i * n..(i + 1) * n];
            if !mask.iter().any(|&a| a) {
                return Err(AlopeError::invalid(format!("masked_softmax: row {i} has no allowed entry")));
            }
            data.extend(softmax_masked(v.row(i), Some(mask)));
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MaskedSoftmax(x), &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Element `index` of a flat view of `x`, as a scalar node.
    pub fn element(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(x);
        let value = *v
            .data()
            .get(index)
            .ok_or_else(|| AlopeError::invalid(format!("element: index {index} out of range for {} elements", v.len())))?;
        Ok(self.push(Tensor::scalar(value), Op::Element { x, index }, &[x]))
    }

    /// Mean squared error between two equal-length vectors.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.len() != t.len() {
            return Err(AlopeError::shape("mse_loss", p.shape(), t.shape()));
        }
        if p.is_empty() {
            return Err(AlopeError::Empty("mse_loss"));
        }
        let n = T::lit(p.len() as f64);
        let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(self.push(Tensor::scalar(total / n), Op::Mse(pred, target), &[pred, target]))
    }

    /// Back-propagates from the single-element node `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(AlopeError::invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[T::one()]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: &[T]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        let op = self.nodes[idx].op.clone();
        let out_dims = self.nodes[idx].value.dims2();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).dims2().unwrap().1;
                if self.wants(a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt_acc(g, self.value(b).data(), &mut ga, m, n, k);
                    self.accumulate(a, &ga);
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn_acc(self.value(a).data(), g, &mut gb, m, k, n);
                    self.accumulate(b, &gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).dims2().unwrap().0;
                if self.wants(a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_acc(g, self.value(b).data(), &mut ga, m, n, k);
                    self.accumulate(a, &ga);
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); n * k];
                    gemm_tn_acc(g, self.value(a).data(), &mut gb, m, n, k);
                    self.accumulate(b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = out_dims.unwrap();
                let ga = transpose_data(g, m, n);
                self.accumulate(a, &ga);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga: Vec<T> = g.iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(a, &ga);
                }
                if self.wants(b) {
                    let gb: Vec<T> = g.iter().zip(self.value(a).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(b, &gb);
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(x, g);
                if self.wants(bias) {
                    let (m, n) = out_dims.unwrap();
                    let mut gb = vec![T::zero(); n];
                    for i in 0..m {
                        for (o, &v) in gb.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *o += v;
                        }
                    }
                    self.accumulate(bias, &gb);
                }
            }
            Op::Scale(x, c) => {
                let gx: Vec<T> = g.iter().map(|&v| v * c).collect();
                self.accumulate(x, &gx);
            }
            Op::MulScalar(s, x) => {
                let sv = self.value(s).data()[0];
                if self.wants(s) {
                    let gs: T = g.iter().zip(self.value(x).data()).map(|(&a, &b)| a * b).sum();
                    self.accumulate(s, &[gs]);
                }
                if self.wants(x) {
                    let gx: Vec<T> = g.iter().map(|&v| v * sv).collect();
                    self.accumulate(x, &gx);
                }
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(x).len()];
                self.accumulate(x, &gx);
            }
            Op::Silu(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &a)| {
                        let s = sigmoid(a);
                        gv * (s + a * s * (T::one() - s))
                    })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Gelu(x) => {
                let c = T::lit(SQRT_2_OVER_PI);
                let k = T::lit(GELU_CUBIC);
                let half = T::lit(0.5);
                let gx: Vec<T> = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &a)| {
                        let th = (c * (a + k * a * a * a)).tanh();
                        let du = c * (T::one() + T::lit(3.0) * k * a * a);
                        gv * (half * (T::one() + th) + half * a * (T::one() - th * th) * du)
                    })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::RmsNorm { x, gain, eps } => {
                let (m, n) = out_dims.unwrap();
                let xv = self.value(x).data();
                let gv = self.value(gain).data();
                let nf = T::lit(n as f64);
                let mut gx = vec![T::zero(); m * n];
                let mut gg = vec![T::zero(); n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let inv = rms_inv(row, eps);
                    let mut dot = T::zero();
                    for j in 0..n {
                        let xhat = row[j] * inv;
                        gg[j] += grow[j] * xhat;
                        dot += grow[j] * gv[j] * xhat;
                    }
                    for j in 0..n {
                        let xhat = row[j] * inv;
                        gx[i * n + j] = inv * (grow[j] * gv[j] - xhat * dot / nf);
                    }
                }
                if self.wants(x) {
                    self.accumulate(x, &gx);
                }
                if self.wants(gain) {
                    self.accumulate(gain, &gg);
                }
            }
            Op::Gather { table, ids } => {
                let (v, d) = self.value(table).dims2().unwrap();
                let mut gt = vec![T::zero(); v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &x) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += x;
                    }
                }
                self.accumulate(table, &gt);
            }
            Op::Row { x, index } => {
                let (m, n) = self.value(x).dims2().unwrap();
                let mut gx = vec![T::zero(); m * n];
                gx[index * n..(index + 1) * n].copy_from_slice(g);
                self.accumulate(x, &gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(p).len();
                    self.accumulate(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ColSlice { x, start } => {
                let (m, len) = out_dims.unwrap();
                let n = self.value(x).dims2().unwrap().1;
                let mut gx = vec![T::zero(); m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(x, &gx);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out_dims.unwrap();
                let mut start = 0;
                for p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    let mut gp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        gp.extend_from_slice(&g[i * total + start..i * total + start + w]);
                    }
                    self.accumulate(p, &gp);
                    start += w;
                }
            }
            Op::Softmax(x) => {
                let gx = softmax_backward(self.nodes[idx].value.data(), g);
                self.accumulate(x, &gx);
            }
            Op::MaskedSoftmax(x) => {
                let (m, n) = out_dims.unwrap();
                let mut gx = Vec::with_capacity(m * n);
                for i in 0..m {
                    gx.extend(softmax_backward(self.nodes[idx].value.row(i), &g[i * n..(i + 1) * n]));
                }
                self.accumulate(x, &gx);
            }
            Op::Reshape(x) => self.accumulate(x, g),
            Op::Element { x, index } => {
                let mut gx = vec![T::zero(); self.value(x).len()];
                gx[index] = g[0];
                self.accumulate(x, &gx);
            }
            Op::Mse(pred, target) => {
                let p = self.value(pred).data();
                let t = self.value(target).data();
                let c = T::lit(2.0) / T::lit(p.len() as f64) * g[0];
                let gp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| c * (a - b)).collect();
                if self.wants(target) {
                    let gt: Vec<T> = gp.iter().map(|&v| -v).collect();
                    self.accumulate(target, &gt);
                }
                self.accumulate(pred, &gp);
            }
        }
    }
}

fn sigmoid<T: Scalar>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}

fn rms_inv<T: Scalar>(row: &[T], eps: T) -> T {
    let ms: T = row.iter().map(|&a| a * a).sum::<T>() / T::lit(row.len() as f64);
    T::one() / (ms + eps).sqrt()
}

fn softmax_masked<T: Scalar>(x: &[T], mask: Option<&[bool]>) -> Vec<T> {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { (v - max).exp() } else { T::zero() })
        .collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax_backward<T: Scalar>(y: &[T], g: &[T]) -> Vec<T> {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    y.iter().zip(g).map(|(&a, &b)| a * (b - dot)).collect()
}
