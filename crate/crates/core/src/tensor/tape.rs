use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::kernels::{self, Layout};
use super::{shape_err, ParamId, ParamSet, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    Neg,
    /// Swaps the last two axes.
    Transpose,
    /// Divides by the square root of the last axis size.
    Scale,
    /// Row-wise over the last axis.
    Softmax,
    LogSigmoid,
    Softsign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Matmul,
    /// Row-pairwise cosine similarity, `n×d, n×d -> n×n`.
    Cosine,
    /// Row-pairwise euclidean distance, `n×d, n×d -> n×n`.
    Euclidean,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Transpose => "transpose",
            UnaryOp::Scale => "scale",
            UnaryOp::Softmax => "softmax",
            UnaryOp::LogSigmoid => "logsigmoid",
            UnaryOp::Softsign => "softsign",
        }
    }
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Matmul => "matmul",
            BinaryOp::Cosine => "cosine",
            BinaryOp::Euclidean => "euclidean",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    DepthwiseConv {
        x: Var,
        kernel: Var,
        normalized: Vec<f64>,
    },
    Glu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    MulScalar(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward values so that [`Tape::backward`] can replay them in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Adds the gradient of every reachable parameter into `params`;
    /// unreachable parameters keep whatever gradient they had.
    pub fn accumulate_into(&self, params: &mut ParamSet) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                params.accumulate_grad(id, g);
            }
        }
    }
}

fn last_axis(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn expect_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .map_err(|_| shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())))
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter as a gradient-tracking leaf. Registering the
    /// same parameter twice returns the same handle.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: params.get(id).value.clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let data = xt.data();
        let (out_shape, out) = match op {
            UnaryOp::Neg => (shape, data.iter().map(|v| -v).collect()),
            UnaryOp::Transpose => {
                if shape.len() < 2 {
                    return Err(shape_err("transpose", format!("rank {} < 2", shape.len())));
                }
                let r = shape.len();
                let (rows, cols) = (shape[r - 2], shape[r - 1]);
                let batch = data.len() / (rows * cols);
                let mut s = shape.clone();
                s.swap(r - 2, r - 1);
                (s, kernels::transpose_last2(data, batch, rows, cols))
            }
            UnaryOp::Scale => {
                let f = (last_axis(&shape) as f64).sqrt();
                (shape, data.iter().map(|v| v / f).collect())
            }
            UnaryOp::Softmax => {
                let w = last_axis(&shape);
                (shape, kernels::softmax_rows(data, w))
            }
            UnaryOp::LogSigmoid => (shape, data.iter().map(|&v| kernels::logsigmoid(v)).collect()),
            UnaryOp::Softsign => (shape, data.iter().map(|v| v / (1.0 + v.abs())).collect()),
        };
        self.push(op.name(), Tensor::with_data(out_shape, out), Op::Unary(op, x), &[x])
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let value = match op {
            BinaryOp::Add => {
                if at.shape() != bt.shape() {
                    return Err(shape_err(
                        "add",
                        format!("{:?} vs {:?}", at.shape(), bt.shape()),
                    ));
                }
                let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
                Tensor::with_data(at.shape().to_vec(), data)
            }
            BinaryOp::Matmul => {
                let (m, k) = expect_rank2("matmul", at)?;
                let (k2, n) = expect_rank2("matmul", bt)?;
                if k != k2 {
                    return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
                }
                let mut out = vec![0.0; m * n];
                kernels::gemm(m, k, n, at.data(), Layout::Plain, bt.data(), Layout::Plain, 0.0, &mut out);
                Tensor::with_data(vec![m, n], out)
            }
            BinaryOp::Cosine | BinaryOp::Euclidean => {
                let (n, d) = expect_rank2(op.name(), at)?;
                if at.shape() != bt.shape() {
                    return Err(shape_err(
                        op.name(),
                        format!("operands must share a shape, got {:?} vs {:?}", at.shape(), bt.shape()),
                    ));
                }
                let out = if op == BinaryOp::Cosine {
                    kernels::cosine_pairwise(at.data(), bt.data(), n, d)
                } else {
                    kernels::euclidean_pairwise(at.data(), bt.data(), n, d)
                };
                Tensor::with_data(vec![n, n], out)
            }
        };
        self.push(op.name(), value, Op::Binary(op, a, b), &[a, b])
    }

    /// `x · w` for `x: n×d`, `w: d×m`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        expect_rank2("linear", self.value(x))?;
        expect_rank2("linear", self.value(w))?;
        self.binary(BinaryOp::Matmul, x, w)
            .map_err(|e| match e {
                TensorError::Shape { detail, .. } => shape_err("linear", detail),
                other => other,
            })
    }

    /// Same-length depthwise 1-D convolution over the row (time) axis with
    /// taps softmax-normalized per channel.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (n, d) = expect_rank2("depthwise_conv1d", self.value(x))?;
        let (k, kd) = expect_rank2("depthwise_conv1d", self.value(kernel))?;
        if kd != d {
            return Err(shape_err("depthwise_conv1d", format!("kernel has {kd} channels, input {d}")));
        }
        if k % 2 == 0 {
            return Err(shape_err("depthwise_conv1d", format!("kernel size {k} is even")));
        }
        let normalized = kernels::softmax_cols(self.value(kernel).data(), k, d);
        let out = kernels::depthwise_conv(self.value(x).data(), &normalized, n, d, k);
        self.push(
            "depthwise_conv1d",
            Tensor::with_data(vec![n, d], out),
            Op::DepthwiseConv { x, kernel, normalized },
            &[x, kernel],
        )
    }

    /// Gated linear unit: splits the last axis into `a | b` and returns `a ⊙ σ(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let (n, two_d) = expect_rank2("glu", self.value(x))?;
        if two_d % 2 != 0 {
            return Err(shape_err("glu", format!("last axis {two_d} is odd")));
        }
        let d = two_d / 2;
        let data = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &data[i * two_d..(i + 1) * two_d];
            for c in 0..d {
                out[i * d + c] = row[c] * kernels::sigmoid(row[d + c]);
            }
        }
        self.push("glu", Tensor::with_data(vec![n, d], out), Op::Glu(x), &[x])
    }

    pub const LAYER_NORM_EPS: f64 = 1e-5;

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = expect_rank2("layer_norm", self.value(x))?;
        if d < 2 {
            return Err(shape_err("layer_norm", "needs at least two features"));
        }
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(shape_err("layer_norm", format!("gain/bias must have shape [{d}]")));
        }
        let (xd, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + Self::LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[i * d + c] = h;
                out[i * d + c] = h * g[c] + b[c];
            }
        }
        self.push(
            "layer_norm",
            Tensor::with_data(vec![n, d], out),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            &[x, gain, bias],
        )
    }

    /// Mean negative log-likelihood of `targets` over positions where `mask` is set.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, vocab) = expect_rank2("masked_cross_entropy", self.value(logits))?;
        if targets.len() != n || mask.len() != n {
            return Err(shape_err(
                "masked_cross_entropy",
                format!("{n} rows but {} targets / {} mask entries", targets.len(), mask.len()),
            ));
        }
        if let Some(&t) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= vocab).map(|(t, _)| t) {
            return Err(TensorError::Invalid {
                op: "masked_cross_entropy",
                detail: format!("target {t} outside vocabulary of {vocab}"),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), vocab);
        let data = self.value(logits).data();
        let mut loss = 0.0;
        for i in (0..n).filter(|&i| mask[i]) {
            let row = &data[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
        }
        loss /= count as f64;
        self.push(
            "masked_cross_entropy",
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Row lookup `table[ids]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = expect_rank2("gather_rows", self.value(table))?;
        if ids.is_empty() {
            return Err(shape_err("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("id {bad} >= {rows} rows")));
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        self.push(
            "gather_rows",
            Tensor::with_data(vec![ids.len(), d], out),
            Op::Gather { table, ids: ids.to_vec() },
            &[table],
        )
    }

    /// First `rows` rows of a matrix, as a gather of `0..rows`.
    pub fn take_rows(&mut self, table: Var, rows: usize) -> Result<Var> {
        let ids: Vec<usize> = (0..rows).collect();
        self.gather_rows(table, &ids)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = expect_rank2("slice_cols", self.value(x))?;
        if len == 0 || start + len > d {
            return Err(shape_err("slice_cols", format!("columns {start}..{} of {d}", start + len)));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&data[i * d + start..i * d + start + len]);
        }
        self.push("slice_cols", Tensor::with_data(vec![n, len], out), Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "nothing to concatenate"))?;
        let (n, _) = expect_rank2("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pd) = expect_rank2("concat_cols", self.value(p))?;
            if pn != n {
                return Err(shape_err("concat_cols", format!("row counts {n} vs {pn}")));
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::with_data(vec![n, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = expect_rank2("slice_rows", self.value(x))?;
        if len == 0 || start + len > n {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {n}", start + len)));
        }
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        self.push("slice_rows", Tensor::with_data(vec![len, d], out), Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "nothing to concatenate"))?;
        let (_, d) = expect_rank2("concat_rows", self.value(*first))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pn, pd) = expect_rank2("concat_rows", self.value(p))?;
            if pd != d {
                return Err(shape_err("concat_rows", format!("column counts {d} vs {pd}")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += pn;
        }
        self.push(
            "concat_rows",
            Tensor::with_data(vec![rows, d], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::with_data(t.shape().to_vec(), data);
        self.push("mul_scalar", value, Op::MulScalar(x, c), &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::with_data(loss_value.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let mut send = |v: Var, data: Vec<f64>| {
            let shape = self.nodes[v.0].value.shape().to_vec();
            let t = Tensor::with_data(shape, data);
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, x) => {
                let xt = &self.nodes[x.0].value;
                let gx: Vec<f64> = match op {
                    UnaryOp::Neg => gd.iter().map(|v| -v).collect(),
                    UnaryOp::Transpose => {
                        let s = node.value.shape();
                        let r = s.len();
                        let (rows, cols) = (s[r - 2], s[r - 1]);
                        kernels::transpose_last2(gd, gd.len() / (rows * cols), rows, cols)
                    }
                    UnaryOp::Scale => {
                        let f = (last_axis(xt.shape()) as f64).sqrt();
                        gd.iter().map(|v| v / f).collect()
                    }
                    UnaryOp::Softmax => {
                        kernels::softmax_rows_backward(node.value.data(), gd, last_axis(xt.shape()))
                    }
                    UnaryOp::LogSigmoid => xt
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&x, &gv)| gv * kernels::sigmoid(-x))
                        .collect(),
                    UnaryOp::Softsign => xt
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&x, &gv)| gv / ((1.0 + x.abs()) * (1.0 + x.abs())))
                        .collect(),
                };
                send(*x, gx);
            }
            Op::Binary(op, a, b) => {
                let (a, b) = (*a, *b);
                let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                match op {
                    BinaryOp::Add => {
                        if self.wants(a) {
                            send(a, gd.to_vec());
                        }
                        if self.wants(b) {
                            send(b, gd.to_vec());
                        }
                    }
                    BinaryOp::Matmul => {
                        let (m, k) = (at.shape()[0], at.shape()[1]);
                        let n = bt.shape()[1];
                        if self.wants(a) {
                            let mut ga = vec![0.0; m * k];
                            kernels::gemm(m, n, k, gd, Layout::Plain, bt.data(), Layout::Transposed, 0.0, &mut ga);
                            send(a, ga);
                        }
                        if self.wants(b) {
                            let mut gb = vec![0.0; k * n];
                            kernels::gemm(k, m, n, at.data(), Layout::Transposed, gd, Layout::Plain, 0.0, &mut gb);
                            send(b, gb);
                        }
                    }
                    BinaryOp::Cosine => {
                        let (ga, gb) = cosine_backward(at, bt, &node.value, gd);
                        if self.wants(a) {
                            send(a, ga);
                        }
                        if self.wants(b) {
                            send(b, gb);
                        }
                    }
                    BinaryOp::Euclidean => {
                        let (ga, gb) = euclidean_backward(at, bt, &node.value, gd);
                        if self.wants(a) {
                            send(a, ga);
                        }
                        if self.wants(b) {
                            send(b, gb);
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, kernel, normalized } => {
                let xt = &self.nodes[x.0].value;
                let (n, d) = (xt.shape()[0], xt.shape()[1]);
                let k = normalized.len() / d;
                let pad = (k - 1) / 2;
                let xd = xt.data();
                let mut gx = vec![0.0; n * d];
                let mut gw = vec![0.0; k * d];
                for t in 0..n {
                    let grow = &gd[t * d..(t + 1) * d];
                    for j in 0..k {
                        let src = t + j;
                        if src < pad || src - pad >= n {
                            continue;
                        }
                        let s = src - pad;
                        for c in 0..d {
                            gx[s * d + c] += normalized[j * d + c] * grow[c];
                            gw[j * d + c] += xd[s * d + c] * grow[c];
                        }
                    }
                }
                if self.wants(*x) {
                    send(*x, gx);
                }
                if self.wants(*kernel) {
                    let mut gk = vec![0.0; k * d];
                    for c in 0..d {
                        let dotc: f64 = (0..k).map(|j| normalized[j * d + c] * gw[j * d + c]).sum();
                        for j in 0..k {
                            gk[j * d + c] = normalized[j * d + c] * (gw[j * d + c] - dotc);
                        }
                    }
                    send(*kernel, gk);
                }
            }
            Op::Glu(x) => {
                let xd = self.nodes[x.0].value.data();
                let (n, two_d) = (self.nodes[x.0].value.shape()[0], self.nodes[x.0].value.shape()[1]);
                let d = two_d / 2;
                let mut gx = vec![0.0; n * two_d];
                for i in 0..n {
                    for c in 0..d {
                        let a = xd[i * two_d + c];
                        let s = kernels::sigmoid(xd[i * two_d + d + c]);
                        let gv = gd[i * d + c];
                        gx[i * two_d + c] = gv * s;
                        gx[i * two_d + d + c] = gv * a * s * (1.0 - s);
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                let gvals = self.nodes[gain.0].value.data();
                if self.wants(*x) {
                    let mut gx = vec![0.0; n * d];
                    for i in 0..n {
                        let gh: Vec<f64> = (0..d).map(|c| gd[i * d + c] * gvals[c]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghx = (0..d).map(|c| gh[c] * xhat[i * d + c]).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[i * d + c] = inv_std[i] * (gh[c] - mean_gh - xhat[i * d + c] * mean_ghx);
                        }
                    }
                    send(*x, gx);
                }
                if self.wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for i in 0..n {
                        for c in 0..d {
                            gg[c] += gd[i * d + c] * xhat[i * d + c];
                        }
                    }
                    send(*gain, gg);
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for i in 0..n {
                        for c in 0..d {
                            gb[c] += gd[i * d + c];
                        }
                    }
                    send(*bias, gb);
                }
            }
            Op::MaskedCrossEntropy { logits, targets, mask, probs, count } => {
                let vocab = self.nodes[logits.0].value.shape()[1];
                let scale = gd[0] / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for v in 0..vocab {
                        gl[i * vocab + v] = scale * probs[i * vocab + v];
                    }
                    gl[i * vocab + targets[i]] -= scale;
                }
                send(*logits, gl);
            }
            Op::Gather { table, ids } => {
                let tt = &self.nodes[table.0].value;
                let d = tt.shape()[1];
                let mut gt = vec![0.0; tt.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] += gd[r * d + c];
                    }
                }
                send(*table, gt);
            }
            Op::SliceCols { x, start } => {
                let xt = &self.nodes[x.0].value;
                let (n, d) = (xt.shape()[0], xt.shape()[1]);
                let len = node.value.shape()[1];
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    gx[i * d + start..i * d + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                send(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if self.wants(p) {
                        let mut gp = vec![0.0; n * w];
                        for i in 0..n {
                            gp[i * w..(i + 1) * w].copy_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        send(p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xt = &self.nodes[x.0].value;
                let d = xt.shape()[1];
                let mut gx = vec![0.0; xt.numel()];
                gx[start * d..start * d + gd.len()].copy_from_slice(gd);
                send(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if self.wants(p) {
                        send(p, gd[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let numel = self.nodes[x.0].value.numel();
                send(*x, vec![gd[0]; numel]);
            }
            Op::MulScalar(x, c) => send(*x, gd.iter().map(|v| v * c).collect()),
        }
    }
}

fn cosine_backward(at: &Tensor, bt: &Tensor, y: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (at.shape()[0], at.shape()[1]);
    let (a, b, c) = (at.data(), bt.data(), y.data());
    let na: Vec<f64> = a.chunks(d).map(kernels::norm).collect();
    let nb: Vec<f64> = b.chunks(d).map(kernels::norm).collect();
    let mut ga = vec![0.0; n * d];
    let mut gb = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            let denom = na[i] * nb[j];
            if denom == 0.0 {
                continue;
            }
            let gij = g[i * n + j];
            let cij = c[i * n + j];
            for k in 0..d {
                let (ai, bj) = (a[i * d + k], b[j * d + k]);
                ga[i * d + k] += gij * (bj / denom - cij * ai / (na[i] * na[i]));
                gb[j * d + k] += gij * (ai / denom - cij * bj / (nb[j] * nb[j]));
            }
        }
    }
    (ga, gb)
}

fn euclidean_backward(at: &Tensor, bt: &Tensor, y: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (at.shape()[0], at.shape()[1]);
    let (a, b, dist) = (at.data(), bt.data(), y.data());
    let mut ga = vec![0.0; n * d];
    let mut gb = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..n {
            let dij = dist[i * n + j];
            if dij == 0.0 {
                continue;
            }
            let f = g[i * n + j] / dij;
            for k in 0..d {
                let diff = a[i * d + k] - b[j * d + k];
                ga[i * d + k] += f * diff;
                gb[j * d + k] -= f * diff;
            }
        }
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let y = tape.unary(UnaryOp::Softmax, x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logsigmoid_of_zero_is_minus_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.unary(UnaryOp::LogSigmoid, x).unwrap();
        assert!((tape.value(y).item() + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softsign_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.unary(UnaryOp::Softsign, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5]);
    }

    #[test]
    fn transpose_rejects_low_rank() {
        let mut tape = Tape::new();
        let v = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.unary(UnaryOp::Transpose, v), Err(TensorError::Shape { .. })));
        let s = tape.constant(Tensor::scalar(1.0));
        assert!(tape.unary(UnaryOp::Transpose, s).is_err());
    }

    #[test]
    fn transpose_handles_batched_rank3() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 3], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let y = tape.unary(UnaryOp::Transpose, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 2]);
        assert_eq!(tape.value(y).data()[..6], [0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(tape.value(y).data()[6..], [6.0, 9.0, 7.0, 10.0, 8.0, 11.0]);
    }

    #[test]
    fn add_requires_identical_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.binary(BinaryOp::Add, a, b).is_err());
    }

    #[test]
    fn matmul_identity_is_noop() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]));
        let y = tape.binary(BinaryOp::Matmul, i, m).unwrap();
        assert_eq!(tape.value(y), tape.value(m));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[7, 5]));
        let b = tape.constant(Tensor::zeros(&[7, 5]));
        assert!(tape.binary(BinaryOp::Matmul, a, b).is_err());
    }

    #[test]
    fn cosine_with_zero_row_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]));
        let y = tape.binary(BinaryOp::Cosine, a, a).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(0, 0), 0.0);
        assert_eq!(v.at(0, 1), 0.0);
        assert!((v.at(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euclidean_self_distance_has_zero_diagonal() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3, 2], &[1.0, 2.0, -3.0, 0.5, 4.0, 4.0]));
        let y = tape.binary(BinaryOp::Euclidean, a, a).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(y).at(i, i), 0.0);
        }
        assert!((tape.value(y).at(0, 1) - (16.0f64 + 2.25).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn linear_with_zero_input_and_identity_weight() {
        let mut tape = Tape::new();
        let x0 = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(t(&[3, 4], &[0.3; 12]));
        let y = tape.linear(x0, w).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(&[2, 4]));
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = tape.constant(Tensor::identity(3));
        let y = tape.linear(x, eye).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let bad = tape.constant(Tensor::zeros(&[4, 4]));
        assert!(matches!(tape.linear(x, bad), Err(TensorError::Shape { op: "linear", .. })));
    }

    #[test]
    fn conv_with_single_tap_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, -1.0, 2.0, 0.5, 3.0, 7.0]));
        let k = tape.constant(t(&[1, 2], &[0.3, -4.0]));
        let y = tape.depthwise_conv1d(x, k).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        let k = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.depthwise_conv1d(x, k).is_err());
    }

    #[test]
    fn conv_of_constant_signal_is_constant_away_from_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[9, 2], &[3.0, -2.0].repeat(9)));
        let k = tape.constant(t(&[3, 2], &[0.1, 2.0, -0.7, 0.0, 1.3, 0.4]));
        let y = tape.depthwise_conv1d(x, k).unwrap();
        for r in 1..8 {
            assert!((tape.value(y).at(r, 0) - 3.0).abs() < 1e-12);
            assert!((tape.value(y).at(r, 1) + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn glu_half_gate_and_saturation() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[2.0, -6.0, 0.0, 0.0]));
        let y = tape.glu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -3.0]);
        let x = tape.constant(t(&[1, 4], &[2.0, -6.0, 60.0, 60.0]));
        let y = tape.glu(x).unwrap();
        assert!((tape.value(y).data()[0] - 2.0).abs() < 1e-12);
        let odd = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.glu(odd).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let expected = 1.0 / (1.0 + Tape::LAYER_NORM_EPS).sqrt();
        assert!((tape.value(y).data()[0] - expected).abs() < 1e-15);
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-5);
        let c = tape.constant(t(&[1, 2], &[4.0, 4.0]));
        let y = tape.layer_norm(c, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 16]));
        let loss = tape.masked_cross_entropy(logits, &[1, 2, 3], &[true, false, true]).unwrap();
        assert!((tape.value(loss).item() - 16f64.ln()).abs() < 1e-12);
        assert!(matches!(
            tape.masked_cross_entropy(logits, &[1, 2, 3], &[false; 3]),
            Err(TensorError::EmptyMask)
        ));
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 8];
        data[3] = 50.0;
        let logits = tape.constant(t(&[1, 8], &data));
        let loss = tape.masked_cross_entropy(logits, &[3], &[true]).unwrap();
        assert!(tape.value(loss).item() < 1e-15);
    }

    #[test]
    fn backward_of_sum_and_scaled_sum() {
        let mut ps = ParamSet::new();
        let id = ps.insert("w", t(&[2, 2], &[0.5, -1.0, 2.0, 3.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&ps, id);
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap().accumulate_into(&mut ps);
        assert_eq!(ps.get(id).grad.as_ref().unwrap(), &Tensor::ones(&[2, 2]));

        ps.zero_grad();
        let mut tape = Tape::new();
        let w = tape.param(&ps, id);
        let w2 = tape.param(&ps, id);
        assert_eq!(w, w2);
        let scaled = tape.mul_scalar(w, 3.0).unwrap();
        let both = tape.binary(BinaryOp::Add, scaled, w2).unwrap();
        let s = tape.sum(both).unwrap();
        tape.backward(s).unwrap().accumulate_into(&mut ps);
        assert_eq!(ps.get(id).grad.as_ref().unwrap(), &Tensor::full(&[2, 2], 4.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_params_keep_their_gradient() {
        let mut ps = ParamSet::new();
        let a = ps.insert("a", Tensor::ones(&[2])).unwrap();
        let b = ps.insert("b", Tensor::ones(&[2])).unwrap();
        ps.accumulate_grad(b, &Tensor::full(&[2], 7.0));
        let mut tape = Tape::new();
        let av = tape.param(&ps, a);
        let _bv = tape.param(&ps, b);
        let loss = tape.sum(av).unwrap();
        tape.backward(loss).unwrap().accumulate_into(&mut ps);
        assert_eq!(ps.get(b).grad.as_ref().unwrap(), &Tensor::full(&[2], 7.0));
        assert_eq!(ps.get(a).grad.as_ref().unwrap(), &Tensor::ones(&[2]));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let big = tape.constant(Tensor::full(&[1, 2], f64::MAX));
        assert!(matches!(
            tape.binary(BinaryOp::Add, big, big),
            Err(TensorError::NonFinite { op: "add" })
        ));
    }
}
