use std::sync::Arc;

use super::gemm::{gemm, gemm_strided, Strides};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fixed linear map applied separately along the H and W axes of an
/// `N×H×W×C` batch: `y[n,u,v,c] = Σ_{m,k} rows[u,m]·x[n,m,k,c]·cols[v,k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableMap {
    pub height: usize,
    pub width: usize,
    /// `height × height`, row-major.
    pub rows: Vec<f64>,
    /// `width × width`, row-major.
    pub cols: Vec<f64>,
}

impl SeparableMap {
    /// Applies the map (or its transpose) to `x`, writing into `out`.
    pub(crate) fn apply(&self, x: &[f64], batch: usize, channels: usize, transpose: bool, out: &mut [f64]) {
        let (h, w, c) = (self.height, self.width, channels);
        let plane = h * w * c;
        let mut tmp = vec![0.0; plane];
        let rs = Strides::dense(h, transpose);
        let cs = Strides::dense(w, transpose);
        for n in 0..batch {
            let xin = &x[n * plane..(n + 1) * plane];
            // tmp[u, k, c] = Σ_m rows[u,m] x[m, k, c]
            gemm_strided(
                h,
                h,
                w * c,
                1.0,
                &self.rows,
                rs,
                xin,
                Strides::dense(w * c, false),
                0.0,
                &mut tmp,
                Strides::dense(w * c, false),
            );
            let xout = &mut out[n * plane..(n + 1) * plane];
            if c == 1 {
                // out[u, v] = Σ_k tmp[u, k] cols[v, k], one call per image.
                let bt = Strides {
                    row: cs.col,
                    col: cs.row,
                };
                gemm_strided(h, w, w, 1.0, &tmp, Strides::dense(w, false), &self.cols, bt, 0.0, xout, Strides::dense(w, false));
                continue;
            }
            // out[u, v, c] = Σ_k cols[v,k] tmp[u, k, c]
            for u in 0..h {
                gemm_strided(
                    w,
                    w,
                    c,
                    1.0,
                    &self.cols,
                    cs,
                    &tmp[u * w * c..(u + 1) * w * c],
                    Strides::dense(c, false),
                    0.0,
                    &mut xout[u * w * c..(u + 1) * w * c],
                    Strides::dense(c, false),
                );
            }
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Sum(Var),
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    Ln(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Separable {
        input: Var,
        map: Arc<SeparableMap>,
        transpose: bool,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of recorded operations. Operands always precede their results, so
/// the reverse pass is a single backwards sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_FLOOR: f64 = f64::MIN_POSITIVE;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if !s.is_finite() {
            return Err(Error::NonFinite("mul_scalar factor"));
        }
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * s).collect())?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::MulScalar(a, s)))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(total), rg, Op::Sum(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Adds a vector along the trailing axis.
    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let n = *va.shape().last().unwrap();
        if vb.rank() != 1 || vb.shape()[0] != n {
            return Err(Error::shape("bias_add", va.shape(), vb.shape()));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, rg, Op::BiasAdd(a, bias)))
    }

    /// Valid (unpadded) 2-D convolution of an `N×H×W×C` batch with a
    /// `KH×KW×C×F` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (vx, vk) = (self.value(input), self.value(kernel));
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if vx.rank() != 4 || vk.rank() != 4 || vx.shape()[3] != vk.shape()[2] {
            return Err(Error::shape("conv2d", vx.shape(), vk.shape()));
        }
        let [n, h, w, c] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let [kh, kw, _, f] = [vk.shape()[0], vk.shape()[1], vk.shape()[2], vk.shape()[3]];
        if kh > h || kw > w {
            return Err(Error::shape("conv2d", vx.shape(), vk.shape()));
        }
        let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
        let rows = n * oh * ow;
        let patch = kh * kw * c;
        let mut cols = vec![0.0; rows * patch];
        let x = vx.data();
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let r = (b * oh + i) * ow + j;
                    let dst = &mut cols[r * patch..(r + 1) * patch];
                    for di in 0..kh {
                        let src = ((b * h + i * stride + di) * w + j * stride) * c;
                        dst[di * kw * c..(di + 1) * kw * c].copy_from_slice(&x[src..src + kw * c]);
                    }
                }
            }
        }
        let mut out = vec![0.0; rows * f];
        gemm(rows, patch, f, &cols, false, vk.data(), false, 0.0, &mut out);
        let value = Tensor::new(vec![n, oh, ow, f], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                stride,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| x.max(0.0)).collect())?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Relu(a)))
    }

    /// Non-overlapping max pooling over `window × window` blocks of an
    /// `N×H×W×C` batch; trailing rows/columns that do not fill a block are
    /// dropped. Ties resolve to the first element in scan order.
    pub fn max_pool2d(&mut self, a: Var, window: usize) -> Result<Var> {
        let va = self.value(a);
        if window == 0 {
            return Err(Error::invalid("max_pool2d", "window must be at least 1"));
        }
        if va.rank() != 4 || va.shape()[1] < window || va.shape()[2] < window {
            return Err(Error::shape("max_pool2d", va.shape(), &[window, window]));
        }
        let [n, h, w, c] = [va.shape()[0], va.shape()[1], va.shape()[2], va.shape()[3]];
        let (oh, ow) = (h / window, w / window);
        let x = va.data();
        let mut out = vec![0.0; n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let o = ((b * oh + i) * ow + j) * c + ch;
                        let mut best_idx = ((b * h + i * window) * w + j * window) * c + ch;
                        let mut best = x[best_idx];
                        for di in 0..window {
                            for dj in 0..window {
                                let idx = ((b * h + i * window + di) * w + j * window + dj) * c + ch;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, c], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::MaxPool2d { input: a, argmax }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Collapses every axis after the first: `N×…` → `N×rest`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let lead = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(a, &[lead, rest])
    }

    /// Row-wise softmax of a `B×K` tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = super::softmax_rows(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Softmax(a)))
    }

    /// Natural log, with inputs floored at the smallest positive normal.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.data().iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("ln", "negative input"));
        }
        let value = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| x.max(LN_FLOOR).ln()).collect(),
        )?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Ln(a)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// subtracting the row maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("logits must be batch×classes, got {:?}", vl.shape()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::Empty("softmax_cross_entropy batch"));
        }
        let per = super::cross_entropy_per_example(vl, labels)?;
        let probs = super::softmax_rows(vl)?.into_data();
        let mean = per.iter().sum::<f64>() / labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(mean),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Applies a [`SeparableMap`] (or its transpose) to an `N×H×W×C` batch.
    pub fn separable(&mut self, input: Var, map: &Arc<SeparableMap>, transpose: bool) -> Result<Var> {
        let vx = self.value(input);
        if vx.rank() != 4 || vx.shape()[1] != map.height || vx.shape()[2] != map.width {
            return Err(Error::shape(
                "separable",
                vx.shape(),
                &[map.height, map.width],
            ));
        }
        let (n, c) = (vx.shape()[0], vx.shape()[3]);
        let mut out = vec![0.0; vx.len()];
        map.apply(vx.data(), n, c, transpose, &mut out);
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            rg,
            Op::Separable {
                input,
                map: Arc::clone(map),
                transpose,
            },
        ))
    }

    /// Reverse sweep from a one-element root. Every `requires_grad` node
    /// ends up with a gradient buffer (zeros when disconnected from `root`).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if self.nodes[root.0].requires_grad {
            self.nodes[root.0].grad = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            propagate(before, node, g);
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }
}

fn grad_buf(nodes: &mut [Node], v: Var) -> Option<&mut Vec<f64>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(node.grad.get_or_insert_with(|| vec![0.0; len]))
}

/// Runs `f` on `v`'s gradient buffer while still allowing reads of every
/// node's value. The buffer is moved out for the duration of the call.
fn accumulate(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let mut buf = nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; len]);
    f(&mut buf, nodes);
    nodes[v.0].grad = Some(buf);
}

fn propagate(before: &mut [Node], node: &Node, g: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(buf) = grad_buf(before, v) {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Mul(a, b) => {
            accumulate(before, *a, |buf, nodes| {
                for ((d, s), y) in buf.iter_mut().zip(g).zip(nodes[b.0].value.data()) {
                    *d += s * y;
                }
            });
            accumulate(before, *b, |buf, nodes| {
                for ((d, s), x) in buf.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                    *d += s * x;
                }
            });
        }
        Op::MulScalar(a, s) => {
            if let Some(buf) = grad_buf(before, *a) {
                buf.iter_mut().zip(g).for_each(|(d, u)| *d += u * s);
            }
        }
        Op::Sum(a) => {
            if let Some(buf) = grad_buf(before, *a) {
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (before[a.0].value.shape()[0], before[a.0].value.shape()[1]);
            let n = before[b.0].value.shape()[1];
            accumulate(before, *a, |buf, nodes| {
                gemm(m, n, k, g, false, nodes[b.0].value.data(), true, 1.0, buf);
            });
            accumulate(before, *b, |buf, nodes| {
                gemm(k, m, n, nodes[a.0].value.data(), true, g, false, 1.0, buf);
            });
        }
        Op::BiasAdd(a, bias) => {
            if let Some(buf) = grad_buf(before, *a) {
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if let Some(buf) = grad_buf(before, *bias) {
                let n = buf.len();
                for row in g.chunks_exact(n) {
                    buf.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            cols,
        } => {
            let in_shape = before[input.0].value.shape().to_vec();
            let k_shape = before[kernel.0].value.shape().to_vec();
            let [n, h, w, c] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
            let [kh, kw, _, f] = [k_shape[0], k_shape[1], k_shape[2], k_shape[3]];
            let out_shape = node.value.shape();
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let rows = n * oh * ow;
            let patch = kh * kw * c;
            if let Some(buf) = grad_buf(before, *kernel) {
                gemm(patch, rows, f, cols, true, g, false, 1.0, buf);
            }
            if before[input.0].requires_grad {
                let mut dcols = vec![0.0; rows * patch];
                gemm(rows, f, patch, g, false, before[kernel.0].value.data(), true, 0.0, &mut dcols);
                let buf = grad_buf(before, *input).unwrap();
                for b in 0..n {
                    for i in 0..oh {
                        for j in 0..ow {
                            let r = (b * oh + i) * ow + j;
                            let src = &dcols[r * patch..(r + 1) * patch];
                            for di in 0..kh {
                                let dst = ((b * h + i * stride + di) * w + j * stride) * c;
                                buf[dst..dst + kw * c]
                                    .iter_mut()
                                    .zip(&src[di * kw * c..(di + 1) * kw * c])
                                    .for_each(|(d, s)| *d += s);
                            }
                        }
                    }
                }
            }
        }
        Op::Relu(a) => {
            accumulate(before, *a, |buf, nodes| {
                for ((d, s), x) in buf.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                    if *x > 0.0 {
                        *d += s;
                    }
                }
            });
        }
        Op::MaxPool2d { input, argmax } => {
            if let Some(buf) = grad_buf(before, *input) {
                for (s, &idx) in g.iter().zip(argmax) {
                    buf[idx] += s;
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(buf) = grad_buf(before, *a) {
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Softmax(a) => {
            let k = *node.value.shape().last().unwrap();
            let y = node.value.data();
            if let Some(buf) = grad_buf(before, *a) {
                for ((drow, grow), yrow) in buf.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(y.chunks_exact(k)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(u, v)| u * v).sum();
                    for ((d, u), v) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += v * (u - dot);
                    }
                }
            }
        }
        Op::Ln(a) => {
            accumulate(before, *a, |buf, nodes| {
                for ((d, s), x) in buf.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                    *d += s / x.max(LN_FLOOR);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let batch = labels.len();
            let k = probs.len() / batch;
            let scale = g[0] / batch as f64;
            if let Some(buf) = grad_buf(before, *logits) {
                for (b, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        buf[b * k + j] += scale * (probs[b * k + j] - onehot);
                    }
                }
            }
        }
        Op::Separable {
            input,
            map,
            transpose,
        } => {
            let shape = node.value.shape();
            let (n, c) = (shape[0], shape[3]);
            if let Some(buf) = grad_buf(before, *input) {
                let mut tmp = vec![0.0; g.len()];
                map.apply(g, n, c, !transpose, &mut tmp);
                buf.iter_mut().zip(&tmp).for_each(|(d, s)| *d += s);
            }
        }
    }
}
