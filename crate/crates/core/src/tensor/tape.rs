use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor inside batch normalization.
pub const BATCHNORM_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a training-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    DivCols(Var, Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    LogSoftmaxRows(Var),
    PairwiseSqDist(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        k: usize,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        centered: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanSpatial(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so parents always precede children and
/// the backward sweep is a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Leaves that require a
    /// gradient but do not influence the loss get an all-zero tensor; values
    /// that were recorded as constants have none.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn expect_rank(op: &str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::config(format!(
            "{op}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(name, value, op, &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape(name, x, y)?;
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |p, q| p / q, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |v| v * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |v| v + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |v| v.max(0.0), Op::Relu(a))
    }

    /// `max(x, 0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |v| v * v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(Error::config("mean of an empty tensor"));
        }
        let m = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        expect_rank("matmul", x, 2)?;
        expect_rank("matmul", y, 2)?;
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let (k2, n) = (y.shape()[0], y.shape()[1]);
        if k != k2 {
            return Err(Error::config(format!(
                "matmul: inner dimensions differ {:?} x {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let out = matmul_raw(x.data(), y.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds `bias[C]` to every length-`C` slice along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = *xv.shape().last().unwrap_or(&0);
        if bv.shape() != [c] {
            return Err(Error::config(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(bv.data()).for_each(|(a, b)| *a += b);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    /// `out[i, j] = x[i, j] / v[j]`.
    pub fn div_cols(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        expect_rank("div_cols", xv, 2)?;
        let n = xv.shape()[1];
        if vv.shape() != [n] {
            return Err(Error::config(format!(
                "div_cols: divisor {:?} does not match columns of {:?}",
                vv.shape(),
                xv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(vv.data()).for_each(|(a, d)| *a /= d);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("div_cols", value, Op::DivCols(x, v), &[x, v])
    }

    /// Stacks tensors along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat of zero tensors"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(Error::config(format!(
                    "concat: trailing shape {:?} differs from {:?}",
                    v.shape(),
                    tail
                )));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(shape.to_vec(), x.data().to_vec()).map_err(|_| {
            Error::config(format!("reshape: cannot view {:?} as {shape:?}", x.shape()))
        })?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Gathers leading-axis slices.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 {
            return Err(Error::config("select_rows on a scalar"));
        }
        let rows = x.shape()[0];
        let len = x.row_len();
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            if i >= rows {
                return Err(Error::config(format!(
                    "select_rows: index {i} out of {rows}"
                )));
            }
            data.extend_from_slice(&x.data()[i * len..(i + 1) * len]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, data)?;
        self.push("select_rows", value, Op::SelectRows(a, idx.to_vec()), &[a])
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        expect_rank("pick", x, 2)?;
        let (m, n) = (x.shape()[0], x.shape()[1]);
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(Error::config(format!(
                "pick: bad indices for shape {:?}",
                x.shape()
            )));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| x.data()[i * n + j])
            .collect();
        let value = Tensor::vector(data);
        self.push("pick", value, Op::Pick(a, idx.to_vec()), &[a])
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        expect_rank("log_softmax_rows", x, 2)?;
        let n = x.shape()[1];
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            log_softmax_in_place(row);
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("log_softmax_rows", value, Op::LogSoftmaxRows(a), &[a])
    }

    /// `out[i, j] = ||a_i - b_j||^2` for rows of `a: [m, d]` and `b: [n, d]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        expect_rank("pairwise_sq_dist", x, 2)?;
        expect_rank("pairwise_sq_dist", y, 2)?;
        if x.shape()[1] != y.shape()[1] {
            return Err(Error::config(format!(
                "pairwise_sq_dist: feature sizes differ {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let (m, n) = (x.shape()[0], y.shape()[0]);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let xi = x.row(i);
            for j in 0..n {
                data.push(sq_dist(xi, y.row(j)));
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        self.push("pairwise_sq_dist", value, Op::PairwiseSqDist(a, b), &[a, b])
    }

    /// SAME-padded stride-1 convolution. `x: [B, H, W, Cin]`,
    /// `w: [k, k, Cin, Cout]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        expect_rank("conv2d", xv, 4)?;
        expect_rank("conv2d", wv, 4)?;
        let [b, h, wd, cin] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [k, k2, wcin, cout] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
        if k != k2 || k % 2 == 0 || wcin != cin {
            return Err(Error::config(format!(
                "conv2d: kernel {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let out = conv_forward(xv.data(), wv.data(), b, h, wd, cin, cout, k);
        let value = Tensor::new(vec![b, h, wd, cout], out)?;
        let name = if k == 1 {
            "conv2d_1x1"
        } else {
            "conv2d_3x3_same"
        };
        self.push(name, value, Op::Conv2d { x, w, k }, &[x, w])
    }

    /// 2x2 stride-2 max pooling; odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("maxpool2x2", xv, 4)?;
        let [b, h, w, c] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::config(format!(
                "maxpool2x2: input {:?} too small",
                xv.shape()
            )));
        }
        let src = xv.data();
        let mut out = Vec::with_capacity(b * oh * ow * c);
        let mut argmax = Vec::with_capacity(b * oh * ow * c);
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((bi * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if src[idx] > best {
                                best = src[idx];
                                at = idx;
                            }
                        }
                        out.push(best);
                        argmax.push(at);
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, oh, ow, c], out)?;
        self.push("maxpool2x2", value, Op::MaxPool2x2 { x, argmax }, &[x])
    }

    /// Batch normalization over every axis but the last, using batch
    /// statistics. Returns the observed statistics for running averages.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let c = self.bn_channels("batchnorm", x, gamma, beta)?;
        let m = xv.numel() / c;
        if m == 0 {
            return Err(Error::config("batchnorm over an empty batch"));
        }
        let mut mean = vec![0.0; c];
        for row in xv.data().chunks(c) {
            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        let mut var = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|a| *a /= m as f64);
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
            .collect();
        let mut xhat = xv.data().to_vec();
        for row in xhat.chunks_mut(c) {
            for ch in 0..c {
                row[ch] = (row[ch] - mean[ch]) * inv_std[ch];
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ch in 0..c {
                row[ch] = row[ch] * g[ch] + bt[ch];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let var_out = self.push(
            "batchnorm",
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let c = self.bn_channels("batchnorm", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::config(
                "batchnorm: running statistics do not match channels",
            ));
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
            .collect();
        let xv = self.value(x);
        let mut centered = xv.data().to_vec();
        for row in centered.chunks_mut(c) {
            row.iter_mut().zip(mean).for_each(|(a, mu)| *a -= mu);
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = centered.clone();
        for row in out.chunks_mut(c) {
            for ch in 0..c {
                row[ch] = row[ch] * inv_std[ch] * g[ch] + bt[ch];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            "batchnorm",
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                centered,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    fn bn_channels(&self, op: &str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let xv = self.value(x);
        let c = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::config(format!("{op} on a scalar")))?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::config(format!(
                "{op}: affine parameters do not match {} channels",
                c
            )));
        }
        Ok(c)
    }

    /// `[B, H, W, C] -> [B, C]` global average pooling.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("mean_spatial", xv, 4)?;
        let [b, h, w, c] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let hw = h * w;
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for p in 0..hw {
                let src = &xv.data()[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                out[bi * c..(bi + 1) * c]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, v)| *a += v);
            }
        }
        out.iter_mut().for_each(|a| *a /= hw as f64);
        let value = Tensor::new(vec![b, c], out)?;
        self.push("mean_spatial", value, Op::MeanSpatial(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let g = grads.get_mut(i).and_then(|g| g.take());
            let t = match (g, node.requires_grad) {
                (Some(g), true) => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                (None, true) if matches!(node.op, Op::Leaf) => {
                    Some(Tensor::zeros(node.value.shape()))
                }
                _ => None,
            };
            out.push(t);
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut emit = |v: Var, d: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], &d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, g.to_vec());
                emit(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, g.to_vec());
                emit(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if wants(*a) {
                    emit(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    emit(*b, g.iter().zip(x).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if wants(*a) {
                    emit(*a, g.iter().zip(y).map(|(g, y)| g / y).collect());
                }
                if wants(*b) {
                    emit(
                        *b,
                        g.iter()
                            .zip(x)
                            .zip(y)
                            .map(|((g, x), y)| -g * x / (y * y))
                            .collect(),
                    );
                }
            }
            Op::Scale(a, s) => emit(*a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => emit(*a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if wants(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let yp = &y.data()[p * n..(p + 1) * n];
                            da[i * k + p] = gi.iter().zip(yp).map(|(a, b)| a * b).sum();
                        }
                    }
                    emit(*a, da);
                }
                if wants(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let xa = x.data()[i * k + p];
                            if xa == 0.0 {
                                continue;
                            }
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(d, g)| *d += xa * g);
                        }
                    }
                    emit(*b, db);
                }
            }
            Op::AddBias(x, b) => {
                emit(*x, g.to_vec());
                if wants(*b) {
                    let c = self.nodes[b.0].value.numel();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    emit(*b, db);
                }
            }
            Op::DivCols(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                let n = vv.len();
                if wants(*x) {
                    let mut dx = g.to_vec();
                    for row in dx.chunks_mut(n) {
                        row.iter_mut().zip(vv).for_each(|(a, d)| *a /= d);
                    }
                    emit(*x, dx);
                }
                if wants(*v) {
                    let mut dv = vec![0.0; n];
                    for (grow, xrow) in g.chunks(n).zip(xv.chunks(n)) {
                        for j in 0..n {
                            dv[j] -= grow[j] * xrow[j] / (vv[j] * vv[j]);
                        }
                    }
                    emit(*v, dv);
                }
            }
            Op::Relu(a) => emit(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Softplus(a) => emit(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| g * sigmoid(*x))
                    .collect(),
            ),
            Op::Square(a) => emit(
                *a,
                g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect(),
            ),
            Op::Sqrt(a) => emit(
                *a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g / (2.0 * y))
                    .collect(),
            ),
            Op::Exp(a) => emit(
                *a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect(),
            ),
            Op::Log(a) => emit(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
            Op::Sum(a) => emit(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                emit(*a, vec![g[0] / n as f64; n]);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    emit(*p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Reshape(a) => emit(*a, g.to_vec()),
            Op::SelectRows(a, idx) => {
                let x = &self.nodes[a.0].value;
                let len = x.row_len();
                let mut dx = vec![0.0; x.numel()];
                for (o, &i) in idx.iter().enumerate() {
                    dx[i * len..(i + 1) * len]
                        .iter_mut()
                        .zip(&g[o * len..(o + 1) * len])
                        .for_each(|(d, g)| *d += g);
                }
                emit(*a, dx);
            }
            Op::Pick(a, idx) => {
                let x = &self.nodes[a.0].value;
                let n = x.shape()[1];
                let mut dx = vec![0.0; x.numel()];
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * n + j] += g[i];
                }
                emit(*a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let n = node.value.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(n).zip(node.value.data().chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    dx.extend(grow.iter().zip(yrow).map(|(g, y)| g - y.exp() * total));
                }
                emit(*a, dx);
            }
            Op::PairwiseSqDist(a, b) => {
                let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, d) = (x.shape()[0], x.shape()[1]);
                let n = y.shape()[0];
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                for i in 0..m {
                    let xi = x.row(i);
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let yj = y.row(j);
                        for t in 0..d {
                            let diff = 2.0 * gij * (xi[t] - yj[t]);
                            da[i * d + t] += diff;
                            db[j * d + t] -= diff;
                        }
                    }
                }
                emit(*a, da);
                emit(*b, db);
            }
            Op::Conv2d { x, w, k } => {
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let [b, h, wd, cin] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
                let cout = wv.shape()[3];
                let (dx, dw) = conv_backward(
                    xv.data(),
                    wv.data(),
                    g,
                    (b, h, wd, cin, cout, *k),
                    wants(*x),
                    wants(*w),
                );
                if let Some(dx) = dx {
                    emit(*x, dx);
                }
                if let Some(dw) = dw {
                    emit(*w, dw);
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (gi, &at) in g.iter().zip(argmax) {
                    dx[at] += gi;
                }
                emit(*x, dx);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let m = (xhat.len() / c) as f64;
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_g[ch] += grow[ch];
                        sum_gx[ch] += grow[ch] * xrow[ch];
                    }
                }
                if wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            let s = gam[ch] * inv_std[ch] / m;
                            dx.push(s * (m * grow[ch] - sum_g[ch] - xrow[ch] * sum_gx[ch]));
                        }
                    }
                    emit(*x, dx);
                }
                emit(*gamma, sum_gx);
                emit(*beta, sum_g);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                centered,
                inv_std,
            } => {
                let c = inv_std.len();
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Vec::with_capacity(g.len());
                for (grow, crow) in g.chunks(c).zip(centered.chunks(c)) {
                    for ch in 0..c {
                        dgamma[ch] += grow[ch] * crow[ch] * inv_std[ch];
                        dbeta[ch] += grow[ch];
                        dx.push(grow[ch] * gam[ch] * inv_std[ch]);
                    }
                }
                emit(*x, dx);
                emit(*gamma, dgamma);
                emit(*beta, dbeta);
            }
            Op::MeanSpatial(x) => {
                let xv = &self.nodes[x.0].value;
                let [b, h, w, c] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
                let hw = h * w;
                let mut dx = vec![0.0; xv.numel()];
                for bi in 0..b {
                    for p in 0..hw {
                        for ch in 0..c {
                            dx[(bi * hw + p) * c + ch] = g[bi * c + ch] / hw as f64;
                        }
                    }
                }
                emit(*x, dx);
            }
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}

pub(crate) fn matmul_raw(x: &[f64], y: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a = x[i * k + p];
            if a == 0.0 {
                continue;
            }
            orow.iter_mut()
                .zip(&y[p * n..(p + 1) * n])
                .for_each(|(o, b)| *o += a * b);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    w: &[f64],
    b: usize,
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; b * h * wd * cout];
    for bi in 0..b {
        for oy in 0..h {
            for ox in 0..wd {
                let o = ((bi * h + oy) * wd + ox) * cout;
                let orow = &mut out[o..o + cout];
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xi = ((bi * h + iy as usize) * wd + ix as usize) * cin;
                        let wi = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[xi + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &w[wi + ci * cout..wi + (ci + 1) * cout];
                            orow.iter_mut().zip(wrow).for_each(|(o, w)| *o += xv * w);
                        }
                    }
                }
            }
        }
    }
    out
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>);

fn conv_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    (b, h, wd, cin, cout, k): (usize, usize, usize, usize, usize, usize),
    want_x: bool,
    want_w: bool,
) -> ConvGrads {
    let pad = (k / 2) as isize;
    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dw = want_w.then(|| vec![0.0; w.len()]);
    for bi in 0..b {
        for oy in 0..h {
            for ox in 0..wd {
                let o = ((bi * h + oy) * wd + ox) * cout;
                let grow = &g[o..o + cout];
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xi = ((bi * h + iy as usize) * wd + ix as usize) * cin;
                        let wi = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let wrow = &w[wi + ci * cout..wi + (ci + 1) * cout];
                            if let Some(dx) = dx.as_mut() {
                                dx[xi + ci] +=
                                    grow.iter().zip(wrow).map(|(g, w)| g * w).sum::<f64>();
                            }
                            if let Some(dw) = dw.as_mut() {
                                let xv = x[xi + ci];
                                if xv != 0.0 {
                                    dw[wi + ci * cout..wi + (ci + 1) * cout]
                                        .iter_mut()
                                        .zip(grow)
                                        .for_each(|(d, g)| *d += xv * g);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
