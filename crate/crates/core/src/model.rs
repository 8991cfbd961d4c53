//! The classifier `f_θ`: a small convolutional network over `H×W×C` images,
//! with flat parameter storage, snapshots, weight averaging, ensembles and a
//! binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Graph, Tensor, Var};

/// One layer of the network, in application order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Valid convolution with a `kernel × kernel` window.
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    Flatten,
    Dense {
        units: usize,
    },
}

/// Where one layer's weights and bias live in the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
struct ParamBlock {
    layer: usize,
    weight_offset: usize,
    weight_shape: Vec<usize>,
    bias_offset: usize,
    bias_len: usize,
}

impl ParamBlock {
    fn weight_len(&self) -> usize {
        self.weight_shape.iter().product()
    }
}

/// Layer structure plus the derived parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    num_classes: usize,
    blocks: Vec<ParamBlock>,
    param_count: usize,
}

impl Architecture {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("architecture", "input dimensions must be positive"));
        }
        let mut shape: Vec<usize> = input_shape.to_vec();
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    filters,
                    kernel,
                    stride,
                } => {
                    if shape.len() != 3 || filters == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::invalid(
                            "architecture",
                            format!("layer {i}: conv needs an image input and positive sizes, got {shape:?}"),
                        ));
                    }
                    let (h, w, c) = (shape[0], shape[1], shape[2]);
                    if kernel > h || kernel > w {
                        return Err(Error::invalid(
                            "architecture",
                            format!("layer {i}: kernel {kernel} larger than input {h}×{w}"),
                        ));
                    }
                    let weight_shape = vec![kernel, kernel, c, filters];
                    let wlen: usize = weight_shape.iter().product();
                    blocks.push(ParamBlock {
                        layer: i,
                        weight_offset: offset,
                        weight_shape,
                        bias_offset: offset + wlen,
                        bias_len: filters,
                    });
                    offset += wlen + filters;
                    shape = vec![(h - kernel) / stride + 1, (w - kernel) / stride + 1, filters];
                }
                Layer::Relu => {}
                Layer::MaxPool { window } => {
                    if shape.len() != 3 || window == 0 || shape[0] < window || shape[1] < window {
                        return Err(Error::invalid(
                            "architecture",
                            format!("layer {i}: pool window {window} does not fit {shape:?}"),
                        ));
                    }
                    shape = vec![shape[0] / window, shape[1] / window, shape[2]];
                }
                Layer::Flatten => {
                    shape = vec![shape.iter().product()];
                }
                Layer::Dense { units } => {
                    if shape.len() != 1 || units == 0 {
                        return Err(Error::invalid(
                            "architecture",
                            format!("layer {i}: dense needs a flattened input, got {shape:?}"),
                        ));
                    }
                    let weight_shape = vec![shape[0], units];
                    let wlen = shape[0] * units;
                    blocks.push(ParamBlock {
                        layer: i,
                        weight_offset: offset,
                        weight_shape,
                        bias_offset: offset + wlen,
                        bias_len: units,
                    });
                    offset += wlen + units;
                    shape = vec![units];
                }
            }
        }
        if shape.len() != 1 {
            return Err(Error::invalid(
                "architecture",
                format!("network must end in a flat class-score vector, ends in {shape:?}"),
            ));
        }
        Ok(Architecture {
            input_shape,
            layers,
            num_classes: shape[0],
            blocks,
            param_count: offset,
        })
    }

    /// conv(16,3×3) → relu → pool2 → conv(32,3×3) → relu → pool2 → flatten → dense.
    pub fn desk(input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        Self::new(
            input_shape,
            vec![
                Layer::Conv {
                    filters: 16,
                    kernel: 3,
                    stride: 1,
                },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
                Layer::Conv {
                    filters: 32,
                    kernel: 3,
                    stride: 1,
                },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
                Layer::Flatten,
                Layer::Dense { units: num_classes },
            ],
        )
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }
}

/// Anything that maps an image batch to class scores whose softmax is the
/// predicted distribution. Attacks and metrics are written against this.
pub trait Predictor: Send + Sync {
    fn input_shape(&self) -> [usize; 3];

    fn num_classes(&self) -> usize;

    /// Records the score computation for an `N×H×W×C` batch on `g`.
    fn scores_var(&self, g: &mut Graph, x: Var) -> Result<Var>;

    fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = self.scores_var(&mut g, xv)?;
        Ok(g.value(s).clone())
    }
}

/// A network architecture together with a parameter vector θ.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    arch: Arc<Architecture>,
    params: Vec<f64>,
}

/// Immutable copy of θ taken at a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    step: usize,
    arch: Arc<Architecture>,
    params: Arc<[f64]>,
}

impl ParamSnapshot {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn to_classifier(&self) -> Classifier {
        Classifier {
            arch: Arc::clone(&self.arch),
            params: self.params.to_vec(),
        }
    }
}

impl Classifier {
    /// All-zero parameters.
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count;
        Classifier {
            arch: Arc::new(arch),
            params: vec![0.0; n],
        }
    }

    /// He-scaled normal weights (std `√(2/fan_in)`), zero biases.
    pub fn he_init(arch: Architecture, seed: u64) -> Self {
        let mut model = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = model.arch.blocks.clone();
        for block in &blocks {
            let fan_in: usize = block.weight_shape[..block.weight_shape.len() - 1].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut model.params[block.weight_offset..block.weight_offset + block.weight_len()] {
                *p = normal.sample(&mut rng);
            }
        }
        model
    }

    pub fn with_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count {
            return Err(Error::invalid(
                "classifier",
                format!("architecture needs {} parameters, got {}", arch.param_count, params.len()),
            ));
        }
        Ok(Classifier {
            arch: Arc::new(arch),
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn snapshot(&self, step: usize) -> ParamSnapshot {
        ParamSnapshot {
            step,
            arch: Arc::clone(&self.arch),
            params: Arc::from(self.params.as_slice()),
        }
    }

    fn batched_input(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [h, w, c] = self.arch.input_shape;
        match g.shape(x) {
            [a, b, d] if [*a, *b, *d] == [h, w, c] => g.reshape(x, &[1, h, w, c]),
            [_, a, b, d] if [*a, *b, *d] == [h, w, c] => Ok(x),
            other => Err(Error::shape("classifier forward", other, &[h, w, c])),
        }
    }

    /// Records the forward pass. Returns the logits (`N×classes`) and one
    /// leaf per weight/bias block, in layout order.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let mut h = self.batched_input(g, x)?;
        let mut leaves = Vec::with_capacity(self.arch.blocks.len() * 2);
        let mut blocks = self.arch.blocks.iter().peekable();
        for (i, layer) in self.arch.layers.iter().enumerate() {
            match *layer {
                Layer::Conv { .. } | Layer::Dense { .. } if blocks.peek().map(|b| b.layer) == Some(i) => {
                    let b = blocks.next().expect("peeked");
                    let wt = Tensor::new(
                        b.weight_shape.clone(),
                        self.params[b.weight_offset..b.weight_offset + b.weight_len()].to_vec(),
                    )?;
                    let bt = Tensor::new(
                        vec![b.bias_len],
                        self.params[b.bias_offset..b.bias_offset + b.bias_len].to_vec(),
                    )?;
                    let (wv, bv) = if trainable {
                        (g.param(wt), g.param(bt))
                    } else {
                        (g.constant(wt), g.constant(bt))
                    };
                    leaves.push(wv);
                    leaves.push(bv);
                    h = match *layer {
                        Layer::Conv { stride, .. } => g.conv2d(h, wv, stride)?,
                        _ => g.matmul(h, wv)?,
                    };
                    h = g.bias_add(h, bv)?;
                }
                Layer::Relu => h = g.relu(h)?,
                Layer::MaxPool { window } => h = g.max_pool2d(h, window)?,
                Layer::Flatten => h = g.flatten(h)?,
                Layer::Conv { .. } | Layer::Dense { .. } => unreachable!("layer {i} has a parameter block"),
            }
        }
        Ok((h, leaves))
    }

    /// Logits for a single image or a batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.scores(x)
    }

    /// Mean cross-entropy on a batch and its gradient with respect to θ.
    pub fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (logits, leaves) = self.forward_graph(&mut g, xv, true)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        g.backward(loss)?;
        let mut grad = vec![0.0; self.params.len()];
        for (b, pair) in self.arch.blocks.iter().zip(leaves.chunks_exact(2)) {
            grad[b.weight_offset..b.weight_offset + b.weight_len()]
                .copy_from_slice(g.grad(pair[0]).expect("param grad"));
            grad[b.bias_offset..b.bias_offset + b.bias_len].copy_from_slice(g.grad(pair[1]).expect("param grad"));
        }
        let value = g.value(loss).data()[0];
        Ok((value, grad))
    }

    /// `θ ← θ − lr·grad`.
    pub fn sgd_step(&mut self, grads: &[f64], learning_rate: f64) -> Result<()> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid("sgd_step", format!("learning rate {learning_rate} must be ≥ 0")));
        }
        if grads.len() != self.params.len() {
            return Err(Error::shape("sgd_step", &[self.params.len()], &[grads.len()]));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            *p -= learning_rate * g;
        }
        Ok(())
    }

    /// Serializes to the checkpoint layout (see [`Classifier::load`]).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in self.arch.input_shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.arch.layers.len() as u32).to_le_bytes());
        for layer in &self.arch.layers {
            let (tag, fields): (u8, Vec<usize>) = match *layer {
                Layer::Conv {
                    filters,
                    kernel,
                    stride,
                } => (0, vec![filters, kernel, stride]),
                Layer::Relu => (1, vec![]),
                Layer::MaxPool { window } => (2, vec![window]),
                Layer::Flatten => (3, vec![]),
                Layer::Dense { units } => (4, vec![units]),
            };
            out.push(tag);
            for f in fields {
                out.extend_from_slice(&(f as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Parses the checkpoint layout:
    ///
    /// ```text
    /// magic "MREPCKPT" | u32 version | u32 H, W, C | u32 layer count
    /// per layer: u8 tag (0 conv, 1 relu, 2 pool, 3 flatten, 4 dense) + u32 fields
    ///   conv: filters, kernel, stride   pool: window   dense: units
    /// u64 parameter count | f64 parameters in layer order
    /// ```
    /// All integers and floats are little-endian.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let tag = r.take(1)?[0];
            layers.push(match tag {
                0 => Layer::Conv {
                    filters: r.u32()? as usize,
                    kernel: r.u32()? as usize,
                    stride: r.u32()? as usize,
                },
                1 => Layer::Relu,
                2 => Layer::MaxPool {
                    window: r.u32()? as usize,
                },
                3 => Layer::Flatten,
                4 => Layer::Dense {
                    units: r.u32()? as usize,
                },
                t => return Err(Error::Checkpoint(format!("unknown layer tag {t}"))),
            });
        }
        let arch = Architecture::new(input_shape, layers)?;
        let n = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        if n != arch.param_count {
            return Err(Error::Checkpoint(format!(
                "parameter count {n} does not match architecture ({})",
                arch.param_count
            )));
        }
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Classifier::with_params(arch, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MREPCKPT";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Predictor for Classifier {
    fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn scores_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward_graph(g, x, false)?.0)
    }
}

/// Coordinatewise mean of the snapshots' parameters.
pub fn average_params(snapshots: &[ParamSnapshot]) -> Result<Classifier> {
    let first = snapshots.first().ok_or(Error::Empty("snapshot list"))?;
    if snapshots.iter().any(|s| s.arch != first.arch) {
        return Err(Error::invalid("average_params", "snapshots have different architectures"));
    }
    let mut params = vec![0.0; first.params.len()];
    for s in snapshots {
        params.iter_mut().zip(s.params.iter()).for_each(|(a, p)| *a += p);
    }
    let k = snapshots.len() as f64;
    params.iter_mut().for_each(|a| *a /= k);
    Ok(Classifier {
        arch: Arc::clone(&first.arch),
        params,
    })
}

/// Uniform mixture of classifiers, predicting the mean of their softmax
/// outputs. Its scores are `ln` of that mean.
#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<Classifier>,
}

impl Ensemble {
    pub fn new(members: Vec<Classifier>) -> Result<Self> {
        let first = members.first().ok_or(Error::Empty("ensemble"))?;
        if members.iter().any(|m| m.arch.input_shape != first.arch.input_shape || m.arch.num_classes != first.arch.num_classes) {
            return Err(Error::invalid("ensemble", "members disagree on input shape or class count"));
        }
        Ok(Ensemble { members })
    }

    pub fn from_snapshots(snapshots: &[ParamSnapshot]) -> Result<Self> {
        Self::new(snapshots.iter().map(ParamSnapshot::to_classifier).collect())
    }

    pub fn members(&self) -> &[Classifier] {
        &self.members
    }

    /// Mean of the members' softmax outputs.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for m in &self.members {
            let p = tensor::softmax_rows(&m.scores(x)?)?;
            match acc.as_mut() {
                None => acc = Some(p),
                Some(a) => a.data_mut().iter_mut().zip(p.data()).for_each(|(s, v)| *s += v),
            }
        }
        let mut acc = acc.expect("nonempty ensemble");
        let k = self.members.len() as f64;
        acc.data_mut().iter_mut().for_each(|v| *v /= k);
        Ok(acc)
    }
}

impl Predictor for Ensemble {
    fn input_shape(&self) -> [usize; 3] {
        self.members[0].arch.input_shape
    }

    fn num_classes(&self) -> usize {
        self.members[0].arch.num_classes
    }

    fn scores_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut total: Option<Var> = None;
        for m in &self.members {
            let logits = m.scores_var(g, x)?;
            let p = g.softmax(logits)?;
            total = Some(match total {
                None => p,
                Some(t) => g.add(t, p)?,
            });
        }
        let mean = g.mul_scalar(total.expect("nonempty ensemble"), 1.0 / self.members.len() as f64)?;
        g.ln(mean)
    }
}

/// Mean post-softmax distribution of the snapshots on `x`.
pub fn ensemble_predict(snapshots: &[ParamSnapshot], x: &Tensor) -> Result<Tensor> {
    Ensemble::from_snapshots(snapshots)?.predict_proba(x)
}
