//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation as a node. Nodes are appended in
//! evaluation order, so walking the tape backwards visits each node after
//! all of its consumers.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which branch of the discretized-logistic mass a bin uses.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BinEdge {
    /// `log(σ(a) − σ(b))`
    Interior,
    /// `log σ(a)`: lowest bin, lower CDF bound is −∞.
    Lower,
    /// `log(1 − σ(b))`: highest bin, upper CDF bound is +∞.
    Upper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub in_channels: usize,
}

impl ConvSpec {
    pub fn out_len(&self, t_in: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = t_in + self.pad_left + self.pad_right;
        if padded < span {
            0
        } else {
            (padded - span) / self.stride + 1
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Reciprocal(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RepeatRows(Var, usize),
    BroadcastRows(Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    Conv1d { x: Var, w: Var, spec: ConvSpec, cols: Tensor },
    LstmCell { gates: Var, c_prev: Var },
    LogSigmoidDiff { a: Var, b: Var, edges: Vec<BinEdge> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A tape of tensor operations.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    frozen_prefixes: Vec<String>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: HashMap::new(), frozen_prefixes: Vec::new() }
    }

    pub fn with_store(store: &'s ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new(), frozen_prefixes: Vec::new() }
    }

    /// Treats every parameter whose name starts with `prefix` as frozen in this
    /// graph only. Must be called before those parameters are first used.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen_prefixes.push(prefix.to_string());
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store.expect("graph has no parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store();
        let value = store.value(id).clone();
        let frozen = store.is_frozen(id) || self.frozen_prefixes.iter().any(|p| store.name(id).starts_with(p.as_str()));
        let v = self.push(value, Op::Param, !frozen);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a + row`, broadcasting a `1 × m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_row(self.value(a), self.value(row), |x, y| x + y);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_row(self.value(a), self.value(row), |x, y| x * y);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    /// `a + col`, broadcasting an `n × 1` column over every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let out = broadcast_col(self.value(a), self.value(col), |x, y| x + y);
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::AddCol(a, col), ng)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let out = broadcast_col(self.value(a), self.value(col), |x, y| x * y);
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `a · s` for a `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::ScaleBy(a, s), ng)
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / x);
        let ng = self.ng(a);
        self.push(out, Op::Reciprocal(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(out, Op::Sqrt(a), ng)
    }

    /// `max(a, min)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let out = self.value(a).map(|x| x.max(min));
        let ng = self.ng(a);
        self.push(out, Op::ClampMin(a, min), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Sums over rows: `n × m → 1 × m`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(t.row_slice(r)) {
                *o += *v;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Sums over columns: `n × m → n × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let out = Tensor::from_vec(t.rows(), 1, data);
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows().max(1) as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&tensors);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    /// Repeats each row `k` times consecutively (nearest-neighbour upsampling in time).
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len() * k);
        for r in 0..t.rows() {
            for _ in 0..k {
                data.extend_from_slice(t.row_slice(r));
            }
        }
        let out = Tensor::from_vec(t.rows() * k, t.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::RepeatRows(a, k), ng)
    }

    /// Tiles a `1 × m` row into `n × m`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "broadcast_rows expects a single row");
        let mut data = Vec::with_capacity(n * t.cols());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(n, t.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::BroadcastRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, t.data().to_vec());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows() {
            let row = out.row_slice_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows() {
            let row = out.row_slice_mut(r);
            let lse = logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// Row-wise log-sum-exp: `n × m → n × 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| logsumexp(t.row_slice(r))).collect();
        let out = Tensor::from_vec(t.rows(), 1, data);
        let ng = self.ng(a);
        self.push(out, Op::LogSumExpRows(a), ng)
    }

    /// 1-D convolution over time. `x` is `T × C_in`, `w` is `(K·C_in) × C_out`
    /// with tap-major rows (`row = k·C_in + c`).
    pub fn conv1d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.cols(), spec.in_channels, "conv1d input channels");
        assert_eq!(self.value(w).rows(), spec.kernel * spec.in_channels, "conv1d weight rows");
        let cols = im2col(xt, &spec);
        let out = cols.matmul(self.value(w));
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::Conv1d { x, w, spec, cols }, ng)
    }

    /// Fused LSTM cell. `gates` is `B × 4H` in `[i, f, g, o]` order, `c_prev`
    /// is `B × H`. Returns `B × 2H` holding `[h | c]`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let g = self.value(gates);
        let c = self.value(c_prev);
        let (b, h4) = g.shape();
        let h = h4 / 4;
        assert_eq!(c.shape(), (b, h), "lstm cell state shape");
        let mut out = Tensor::zeros(b, 2 * h);
        for r in 0..b {
            let gr = g.row_slice(r);
            let cr = c.row_slice(r);
            let or = out.row_slice_mut(r);
            for j in 0..h {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[h + j]);
                let gg = gr[2 * h + j].tanh();
                let o = sigmoid(gr[3 * h + j]);
                let cn = f * cr[j] + i * gg;
                or[j] = o * cn.tanh();
                or[h + j] = cn;
            }
        }
        let ng = self.ng(gates) || self.ng(c_prev);
        self.push(out, Op::LstmCell { gates, c_prev }, ng)
    }

    /// Elementwise `log(σ(a) − σ(b))` with per-element edge handling; see [`BinEdge`].
    /// Requires `a > b` for interior elements.
    pub fn log_sigmoid_diff(&mut self, a: Var, b: Var, edges: Vec<BinEdge>) -> Var {
        let at = self.value(a);
        let bt = self.value(b);
        assert_eq!(at.shape(), bt.shape(), "log_sigmoid_diff shape mismatch");
        assert_eq!(edges.len(), at.len(), "log_sigmoid_diff edge count");
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .zip(&edges)
            .map(|((&x, &y), e)| log_sigmoid_diff(x, y, *e))
            .collect();
        let out = Tensor::from_vec(at.rows(), at.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::LogSigmoidDiff { a, b, edges }, ng)
    }

    /// Runs the backward pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Backward {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let mut params = Vec::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                params.push((id, g.clone()));
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Backward { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.ng(v) {
            let g = f();
            self.accumulate(grads, v, g);
        }
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate_with(grads, a, || {
                    let bt = self.value(b);
                    let mut ga = Tensor::zeros(self.value(a).rows(), self.value(a).cols());
                    gemm(false, true, 1.0, gout, bt, 0.0, &mut ga);
                    ga
                });
                self.accumulate_with(grads, b, || {
                    let at = self.value(a);
                    let mut gb = Tensor::zeros(self.value(b).rows(), self.value(b).cols());
                    gemm(true, false, 1.0, at, gout, 0.0, &mut gb);
                    gb
                });
            }
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, || gout.clone());
                self.accumulate_with(grads, *b, || gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, *a, || gout.clone());
                self.accumulate_with(grads, *b, || gout.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate_with(grads, a, || gout.zip_map(self.value(b), |g, y| g * y));
                self.accumulate_with(grads, b, || gout.zip_map(self.value(a), |g, x| g * x));
            }
            Op::AddRow(a, row) => {
                self.accumulate_with(grads, *a, || gout.clone());
                self.accumulate_with(grads, *row, || column_sums(gout));
            }
            Op::MulRow(a, row) => {
                let (a, row) = (*a, *row);
                self.accumulate_with(grads, a, || broadcast_row(gout, self.value(row), |g, y| g * y));
                self.accumulate_with(grads, row, || {
                    let prod = gout.zip_map(self.value(a), |g, x| g * x);
                    column_sums(&prod)
                });
            }
            Op::AddCol(a, col) => {
                self.accumulate_with(grads, *a, || gout.clone());
                self.accumulate_with(grads, *col, || row_sums(gout));
            }
            Op::MulCol(a, col) => {
                let (a, col) = (*a, *col);
                self.accumulate_with(grads, a, || broadcast_col(gout, self.value(col), |g, y| g * y));
                self.accumulate_with(grads, col, || {
                    let prod = gout.zip_map(self.value(a), |g, x| g * x);
                    row_sums(&prod)
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate_with(grads, *a, || gout.map(|g| g * c));
            }
            Op::AddScalar(a) => self.accumulate_with(grads, *a, || gout.clone()),
            Op::ScaleBy(a, s) => {
                let (a, s) = (*a, *s);
                let sv = self.value(s).item();
                self.accumulate_with(grads, a, || gout.map(|g| g * sv));
                self.accumulate_with(grads, s, || {
                    let dot: f64 = gout.data().iter().zip(self.value(a).data()).map(|(g, x)| g * x).sum();
                    Tensor::scalar(dot)
                });
            }
            Op::Reciprocal(a) => {
                self.accumulate_with(grads, *a, || gout.zip_map(out, |g, y| -g * y * y));
            }
            Op::Sigmoid(a) => {
                self.accumulate_with(grads, *a, || gout.zip_map(out, |g, y| g * y * (1.0 - y)));
            }
            Op::Tanh(a) => {
                self.accumulate_with(grads, *a, || gout.zip_map(out, |g, y| g * (1.0 - y * y)));
            }
            Op::Relu(a) => {
                self.accumulate_with(grads, *a, || gout.zip_map(out, |g, y| if y > 0.0 { g } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                self.accumulate_with(grads, a, || {
                    gout.zip_map(self.value(a), |g, x| if x > 0.0 { g } else { g * slope })
                });
            }
            Op::Exp(a) => {
                self.accumulate_with(grads, *a, || gout.zip_map(out, |g, y| g * y));
            }
            Op::Log(a) => {
                let a = *a;
                self.accumulate_with(grads, a, || gout.zip_map(self.value(a), |g, x| g / x));
            }
            Op::Softplus(a) => {
                let a = *a;
                self.accumulate_with(grads, a, || gout.zip_map(self.value(a), |g, x| g * sigmoid(x)));
            }
            Op::Abs(a) => {
                let a = *a;
                self.accumulate_with(grads, a, || gout.zip_map(self.value(a), |g, x| g * sign(x)));
            }
            Op::Square(a) => {
                let a = *a;
                self.accumulate_with(grads, a, || gout.zip_map(self.value(a), |g, x| 2.0 * g * x));
            }
            Op::Sqrt(a) => {
                self.accumulate_with(grads, *a, || gout.zip_map(out, |g, y| 0.5 * g / y));
            }
            Op::ClampMin(a, min) => {
                let (a, min) = (*a, *min);
                self.accumulate_with(grads, a, || gout.zip_map(self.value(a), |g, x| if x > min { g } else { 0.0 }));
            }
            Op::Sum(a) => {
                let a = *a;
                let g = gout.item();
                self.accumulate_with(grads, a, || {
                    let (r, c) = self.shape(a);
                    Tensor::full(r, c, g)
                });
            }
            Op::Mean(a) => {
                let a = *a;
                let (r, c) = self.shape(a);
                let g = gout.item() / (r * c).max(1) as f64;
                self.accumulate_with(grads, a, || Tensor::full(r, c, g));
            }
            Op::SumRows(a) => {
                let a = *a;
                let (r, _) = self.shape(a);
                self.accumulate_with(grads, a, || {
                    let mut data = Vec::with_capacity(r * gout.cols());
                    for _ in 0..r {
                        data.extend_from_slice(gout.data());
                    }
                    Tensor::from_vec(r, gout.cols(), data)
                });
            }
            Op::SumCols(a) => {
                let a = *a;
                let (r, c) = self.shape(a);
                self.accumulate_with(grads, a, || {
                    let mut t = Tensor::zeros(r, c);
                    for i in 0..r {
                        let g = gout.get(i, 0);
                        t.row_slice_mut(i).iter_mut().for_each(|v| *v = g);
                    }
                    t
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    self.accumulate_with(grads, p, || gout.slice_rows(start, rows));
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    self.accumulate_with(grads, p, || gout.slice_cols(start, cols));
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let (a, start) = (*a, *start);
                self.accumulate_with(grads, a, || {
                    let (r, c) = self.shape(a);
                    let mut t = Tensor::zeros(r, c);
                    t.data_mut()[start * c..start * c + gout.len()].copy_from_slice(gout.data());
                    t
                });
            }
            Op::SliceCols(a, start) => {
                let (a, start) = (*a, *start);
                self.accumulate_with(grads, a, || {
                    let (r, c) = self.shape(a);
                    let mut t = Tensor::zeros(r, c);
                    let w = gout.cols();
                    for i in 0..r {
                        t.row_slice_mut(i)[start..start + w].copy_from_slice(gout.row_slice(i));
                    }
                    t
                });
            }
            Op::RepeatRows(a, k) => {
                let (a, k) = (*a, *k);
                self.accumulate_with(grads, a, || {
                    let (r, c) = self.shape(a);
                    let mut t = Tensor::zeros(r, c);
                    for i in 0..r {
                        let dst = t.row_slice_mut(i);
                        for j in 0..k {
                            for (d, g) in dst.iter_mut().zip(gout.row_slice(i * k + j)) {
                                *d += *g;
                            }
                        }
                    }
                    t
                });
            }
            Op::BroadcastRows(a) => self.accumulate_with(grads, *a, || column_sums(gout)),
            Op::Transpose(a) => self.accumulate_with(grads, *a, || gout.transpose()),
            Op::Reshape(a) => {
                let a = *a;
                let (r, c) = self.shape(a);
                self.accumulate_with(grads, a, || Tensor::from_vec(r, c, gout.data().to_vec()));
            }
            Op::SoftmaxRows(a) => {
                self.accumulate_with(grads, *a, || {
                    let mut t = Tensor::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let y = out.row_slice(r);
                        let g = gout.row_slice(r);
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in t.row_slice_mut(r).iter_mut().zip(y).zip(g) {
                            *d = yv * (gv - dot);
                        }
                    }
                    t
                });
            }
            Op::LogSoftmaxRows(a) => {
                self.accumulate_with(grads, *a, || {
                    let mut t = Tensor::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let y = out.row_slice(r);
                        let g = gout.row_slice(r);
                        let gs: f64 = g.iter().sum();
                        for ((d, &yv), &gv) in t.row_slice_mut(r).iter_mut().zip(y).zip(g) {
                            *d = gv - yv.exp() * gs;
                        }
                    }
                    t
                });
            }
            Op::LogSumExpRows(a) => {
                let a = *a;
                self.accumulate_with(grads, a, || {
                    let x = self.value(a);
                    let mut t = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let lse = out.get(r, 0);
                        let g = gout.get(r, 0);
                        for (d, &xv) in t.row_slice_mut(r).iter_mut().zip(x.row_slice(r)) {
                            *d = g * (xv - lse).exp();
                        }
                    }
                    t
                });
            }
            Op::Conv1d { x, w, spec, cols } => {
                let (x, w) = (*x, *w);
                self.accumulate_with(grads, w, || {
                    let wt = self.value(w);
                    let mut gw = Tensor::zeros(wt.rows(), wt.cols());
                    gemm(true, false, 1.0, cols, gout, 0.0, &mut gw);
                    gw
                });
                self.accumulate_with(grads, x, || {
                    let wt = self.value(w);
                    let mut gcols = Tensor::zeros(cols.rows(), cols.cols());
                    gemm(false, true, 1.0, gout, wt, 0.0, &mut gcols);
                    col2im(&gcols, self.value(x).rows(), spec)
                });
            }
            Op::LstmCell { gates, c_prev } => {
                let (gates, c_prev) = (*gates, *c_prev);
                let g = self.value(gates);
                let c = self.value(c_prev);
                let (b, h4) = g.shape();
                let h = h4 / 4;
                let mut dg = Tensor::zeros(b, h4);
                let mut dc = Tensor::zeros(b, h);
                for r in 0..b {
                    let gr = g.row_slice(r);
                    let cr = c.row_slice(r);
                    let go = gout.row_slice(r);
                    let or = out.row_slice(r);
                    for j in 0..h {
                        let i = sigmoid(gr[j]);
                        let f = sigmoid(gr[h + j]);
                        let gg = gr[2 * h + j].tanh();
                        let o = sigmoid(gr[3 * h + j]);
                        let cn = or[h + j];
                        let tc = cn.tanh();
                        let dh = go[j];
                        let dcn = go[h + j] + dh * o * (1.0 - tc * tc);
                        let drow = dg.row_slice_mut(r);
                        drow[j] = dcn * gg * i * (1.0 - i);
                        drow[h + j] = dcn * cr[j] * f * (1.0 - f);
                        drow[2 * h + j] = dcn * i * (1.0 - gg * gg);
                        drow[3 * h + j] = dh * tc * o * (1.0 - o);
                        dc.row_slice_mut(r)[j] = dcn * f;
                    }
                }
                self.accumulate(grads, gates, dg);
                self.accumulate(grads, c_prev, dc);
            }
            Op::LogSigmoidDiff { a, b, edges } => {
                let (a, b) = (*a, *b);
                let at = self.value(a);
                let bt = self.value(b);
                let n = at.len();
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for k in 0..n {
                    let g = gout.data()[k];
                    let (x, y) = (at.data()[k], bt.data()[k]);
                    match edges[k] {
                        BinEdge::Interior => {
                            // d/dx log(σ(x)σ(−y)(1 − e^{y−x}))
                            let r = 1.0 / (x - y).exp_m1();
                            ga[k] = g * (sigmoid(-x) + r);
                            gb[k] = g * (-sigmoid(y) - r);
                        }
                        BinEdge::Lower => ga[k] = g * sigmoid(-x),
                        BinEdge::Upper => gb[k] = -g * sigmoid(y),
                    }
                }
                let (r, c) = at.shape();
                self.accumulate(grads, a, Tensor::from_vec(r, c, ga));
                self.accumulate(grads, b, Tensor::from_vec(r, c, gb));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Backward {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Backward {
    /// Gradient of the loss with respect to any node (None if unreachable or not tracked).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    /// Adds the parameter gradients, scaled by `weight`, into `acc`.
    pub fn accumulate_into(&self, acc: &mut Gradients, weight: f64) {
        for (id, g) in &self.params {
            if weight == 1.0 {
                acc.accumulate(*id, g);
            } else {
                acc.accumulate(*id, &g.map(|v| v * weight));
            }
        }
    }

    pub fn into_gradients(self, n_params: usize) -> Gradients {
        let mut acc = Gradients::new(n_params);
        for (id, g) in &self.params {
            acc.accumulate(*id, g);
        }
        acc
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `log σ(x)`, stable for large |x|.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Scalar form of [`Graph::log_sigmoid_diff`].
pub fn log_sigmoid_diff(a: f64, b: f64, edge: BinEdge) -> f64 {
    match edge {
        BinEdge::Interior => log_sigmoid(a) + log_sigmoid(-b) + (-(b - a).exp_m1()).ln(),
        BinEdge::Lower => log_sigmoid(a),
        BinEdge::Upper => log_sigmoid(-b),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn broadcast_row(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(row.rows(), 1, "broadcast row must be 1 x m");
    assert_eq!(a.cols(), row.cols(), "broadcast row width mismatch");
    let mut out = a.clone();
    for r in 0..a.rows() {
        for (o, &y) in out.row_slice_mut(r).iter_mut().zip(row.data()) {
            *o = f(*o, y);
        }
    }
    out
}

fn broadcast_col(a: &Tensor, col: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(col.cols(), 1, "broadcast column must be n x 1");
    assert_eq!(a.rows(), col.rows(), "broadcast column height mismatch");
    let mut out = a.clone();
    for r in 0..a.rows() {
        let y = col.get(r, 0);
        for o in out.row_slice_mut(r) {
            *o = f(*o, y);
        }
    }
    out
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row_slice(r)) {
            *o += *v;
        }
    }
    out
}

fn row_sums(t: &Tensor) -> Tensor {
    Tensor::from_vec(t.rows(), 1, (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect())
}

fn im2col(x: &Tensor, spec: &ConvSpec) -> Tensor {
    let t_in = x.rows();
    let c = spec.in_channels;
    let t_out = spec.out_len(t_in);
    let mut cols = Tensor::zeros(t_out, spec.kernel * c);
    for t in 0..t_out {
        let row = cols.row_slice_mut(t);
        for k in 0..spec.kernel {
            let src = (t * spec.stride + k * spec.dilation) as isize - spec.pad_left as isize;
            if src >= 0 && (src as usize) < t_in {
                row[k * c..(k + 1) * c].copy_from_slice(x.row_slice(src as usize));
            }
        }
    }
    cols
}

fn col2im(gcols: &Tensor, t_in: usize, spec: &ConvSpec) -> Tensor {
    let c = spec.in_channels;
    let mut gx = Tensor::zeros(t_in, c);
    for t in 0..gcols.rows() {
        let row = gcols.row_slice(t);
        for k in 0..spec.kernel {
            let src = (t * spec.stride + k * spec.dilation) as isize - spec.pad_left as isize;
            if src >= 0 && (src as usize) < t_in {
                for (d, g) in gx.row_slice_mut(src as usize).iter_mut().zip(&row[k * c..(k + 1) * c]) {
                    *d += *g;
                }
            }
        }
    }
    gx
}
