//! Fully connected networks, their optimizer state, and text checkpoints.
//!
//! An [`Mlp`] owns plain parameter tensors. Training binds the parameters
//! into a [`Graph`](crate::ndgrad::Graph) as leaves ([`Mlp::bind`]), runs the
//! graph forward and backward, then applies the collected gradients through
//! [`SgdState::step`]. Inference outside a graph goes through [`Mlp::infer`],
//! which replays the identical arithmetic and therefore matches the bound
//! forward pass bit for bit.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{matmul_raw, Graph, NodeId, Tensor};
use crate::rng::gauss;

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// What the final linear layer feeds into.
///
/// `Logits` leaves the output raw for a downstream softmax or loss.
/// `Bounded` squashes through tanh and rescales per output dimension into
/// `[lo_j, hi_j]`, which keeps generated samples inside the data domain.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputHead {
    Logits,
    Bounded { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    act: Option<Activation>,
}

/// Fully connected network with a fixed hidden activation and an output head.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
    head: OutputHead,
    activation: Activation,
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Mlp {
    /// Build a network with the given layer widths, Glorot-uniform weights,
    /// and zero biases. `dims` runs input first, output last.
    pub fn new(
        dims: &[usize],
        activation: Activation,
        head: OutputHead,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Contract(format!(
                "network needs at least input and output widths, got {dims:?}"
            )));
        }
        if let Some(zero) = dims.iter().find(|&&d| d == 0) {
            return Err(Error::Dimension(format!("zero layer width {zero} in {dims:?}")));
        }
        if let OutputHead::Bounded { lo, hi } = &head {
            let out = *dims.last().unwrap();
            if lo.len() != out || hi.len() != out {
                return Err(Error::Dimension(format!(
                    "bounded head has {} / {} bounds for {out} outputs",
                    lo.len(),
                    hi.len()
                )));
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                return Err(Error::Domain("bounded head needs lo < hi per dimension".into()));
            }
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let limit = glorot_limit(fan_in, fan_out);
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            let last = k == dims.len() - 2;
            layers.push(Layer {
                weight: Tensor::from_raw(vec![fan_in, fan_out], w),
                bias: Tensor::zeros(vec![fan_out]),
                act: if last { None } else { Some(activation) },
            });
        }
        Ok(Mlp {
            layers,
            head,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.shape()[1]));
        dims
    }

    pub fn head(&self) -> &OutputHead {
        &self.head
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// Insert the parameters into `graph` as leaves, ready for a differentiable
    /// forward pass.
    pub fn bind(&self, graph: &mut Graph) -> BoundMlp {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(BoundLayer {
                weight: graph.leaf(l.weight.clone()),
                bias: graph.leaf(l.bias.clone()),
                act: l.act,
            });
        }
        let head = match &self.head {
            OutputHead::Logits => BoundHead::Logits,
            OutputHead::Bounded { lo, hi } => {
                let span: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
                BoundHead::Bounded {
                    lo: graph.leaf(Tensor::from_raw(vec![lo.len()], lo.clone())),
                    span: graph.leaf(Tensor::from_raw(vec![span.len()], span)),
                }
            }
        };
        BoundMlp { layers, head }
    }

    /// Forward pass without a graph. Matches the bound forward exactly.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "infer: input shape {:?} does not match input width {}",
                x.shape(),
                self.input_dim()
            )));
        }
        let mut cur = x.data().to_vec();
        let mut rows = x.rows();
        let mut width = x.cols();
        for l in &self.layers {
            let out_w = l.weight.shape()[1];
            let mut next = matmul_raw(&cur, rows, width, l.weight.data(), out_w);
            let b = l.bias.data();
            for i in 0..rows {
                for j in 0..out_w {
                    next[i * out_w + j] += b[j];
                }
            }
            if let Some(act) = l.act {
                for v in next.iter_mut() {
                    *v = match act {
                        Activation::Relu => {
                            if *v > 0.0 {
                                *v
                            } else {
                                0.0
                            }
                        }
                        Activation::Tanh => v.tanh(),
                    };
                }
            }
            cur = next;
            width = out_w;
            rows = x.rows();
        }
        if let OutputHead::Bounded { lo, hi } = &self.head {
            for i in 0..rows {
                for j in 0..width {
                    let v = &mut cur[i * width + j];
                    *v = (v.tanh() + 1.0) * 0.5 * (hi[j] - lo[j]) + lo[j];
                }
            }
        }
        Ok(Tensor::from_raw(vec![rows, width], cur))
    }

    /// Widen the final layer to `new_out` outputs, Glorot-initializing the new
    /// columns and zeroing the new bias entries. Existing parameters keep
    /// their values.
    pub fn grow_last_layer(&mut self, new_out: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.head != OutputHead::Logits {
            return Err(Error::Contract("only a logits head can grow".into()));
        }
        let last = self.layers.last_mut().unwrap();
        let (fan_in, old_out) = (last.weight.shape()[0], last.weight.shape()[1]);
        if new_out <= old_out {
            return Err(Error::Contract(format!(
                "grow_last_layer: new width {new_out} must exceed current {old_out}"
            )));
        }
        let limit = glorot_limit(fan_in, new_out);
        let old = last.weight.data();
        let mut w = vec![0.0; fan_in * new_out];
        for i in 0..fan_in {
            for j in 0..old_out {
                w[i * new_out + j] = old[i * old_out + j];
            }
        }
        for j in old_out..new_out {
            for (i, row) in w.chunks_exact_mut(new_out).enumerate().take(fan_in) {
                let _ = i;
                row[j] = rng.gen_range(-limit..limit);
            }
        }
        last.weight = Tensor::from_raw(vec![fan_in, new_out], w);
        let mut b = last.bias.data().to_vec();
        b.resize(new_out, 0.0);
        last.bias = Tensor::from_raw(vec![new_out], b);
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Flattened copy of every parameter, layer by layer, weight before bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.param_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Add iid Gaussian noise of the given standard deviation to every
    /// parameter.
    pub fn add_param_noise(&mut self, sigma: f64, rng: &mut ChaCha8Rng) {
        for t in self.param_tensors_mut() {
            for v in t.data_mut() {
                *v += sigma * gauss(rng);
            }
        }
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }
}

#[derive(Clone, Copy)]
struct BoundLayer {
    weight: NodeId,
    bias: NodeId,
    act: Option<Activation>,
}

enum BoundHead {
    Logits,
    Bounded { lo: NodeId, span: NodeId },
}

/// An [`Mlp`] whose parameters live as leaves of some graph.
pub struct BoundMlp {
    layers: Vec<BoundLayer>,
    head: BoundHead,
}

impl BoundMlp {
    /// Differentiable forward pass from an input node.
    pub fn forward(&self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        for l in &self.layers {
            cur = graph.matmul(cur, l.weight)?;
            cur = graph.add_row(cur, l.bias)?;
            if let Some(act) = l.act {
                cur = match act {
                    Activation::Relu => graph.relu(cur),
                    Activation::Tanh => graph.tanh(cur),
                };
            }
        }
        if let BoundHead::Bounded { lo, span } = self.head {
            cur = graph.tanh(cur);
            cur = graph.add_scalar(cur, 1.0);
            cur = graph.mul_scalar(cur, 0.5);
            cur = graph.mul_row(cur, span)?;
            cur = graph.add_row(cur, lo)?;
        }
        Ok(cur)
    }

    /// Parameter node ids in update order (weight then bias per layer).
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight);
            out.push(l.bias);
        }
        out
    }

    /// Gradients for every parameter after a backward pass, zeros where the
    /// pass never reached the parameter.
    pub fn collect_grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.param_ids()
            .iter()
            .map(|&id| match graph.grad(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(graph.value(id).shape().to_vec()),
            })
            .collect()
    }
}

/// Momentum SGD with decoupled-from-nothing weight decay folded into the
/// gradient, velocity kept per parameter tensor.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(net: &Mlp, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = net
            .param_tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        SgdState {
            lr,
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// v <- momentum v + g + wd p; p <- p - lr v.
    pub fn step(&mut self, net: &mut Mlp, grads: &[Tensor]) -> Result<()> {
        let mut params = net.param_tensors_mut();
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::Contract(format!(
                "sgd step: {} gradients for {} parameter tensors",
                grads.len(),
                params.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if g.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "sgd step: gradient shape {:?} vs parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let pv = p.data_mut();
            let vv = v.data_mut();
            for i in 0..pv.len() {
                vv[i] = self.momentum * vv[i] + g.data()[i] + self.weight_decay * pv[i];
                pv[i] -= self.lr * vv[i];
            }
        }
        Ok(())
    }

    /// Mirror [`Mlp::grow_last_layer`]: widen the final weight and bias
    /// velocity, new entries starting from rest.
    pub fn grow_last_layer(&mut self, fan_in: usize, old_out: usize, new_out: usize) {
        let n = self.velocity.len();
        let wv = self.velocity[n - 2].data().to_vec();
        let mut w = vec![0.0; fan_in * new_out];
        for i in 0..fan_in {
            for j in 0..old_out {
                w[i * new_out + j] = wv[i * old_out + j];
            }
        }
        self.velocity[n - 2] = Tensor::from_raw(vec![fan_in, new_out], w);
        let mut b = self.velocity[n - 1].data().to_vec();
        b.resize(new_out, 0.0);
        self.velocity[n - 1] = Tensor::from_raw(vec![new_out], b);
    }
}

/// Exponential moving average of a network's parameters.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub decay: f64,
    shadow: Vec<Tensor>,
}

impl EmaState {
    /// Shadow starts as a copy of the current parameters.
    pub fn new(net: &Mlp, decay: f64) -> Self {
        EmaState {
            decay,
            shadow: net.param_tensors().into_iter().cloned().collect(),
        }
    }

    /// shadow <- decay shadow + (1 - decay) p.
    pub fn update(&mut self, net: &Mlp) {
        for (s, p) in self.shadow.iter_mut().zip(net.param_tensors()) {
            let sv = s.data_mut();
            for (i, pv) in p.data().iter().enumerate() {
                sv[i] = self.decay * sv[i] + (1.0 - self.decay) * pv;
            }
        }
    }

    /// A copy of `net` with the averaged parameters swapped in.
    pub fn apply(&self, net: &Mlp) -> Mlp {
        let mut out = net.clone();
        for (p, s) in out.param_tensors_mut().iter_mut().zip(&self.shadow) {
            **p = s.clone();
        }
        out
    }

    /// Mirror [`Mlp::grow_last_layer`]: the shadow adopts the freshly
    /// initialized columns verbatim so averaging starts from them.
    pub fn grow_last_layer(&mut self, net: &Mlp, old_out: usize) {
        let params = net.param_tensors();
        let n = params.len();
        let w = params[n - 2];
        let (fan_in, new_out) = (w.shape()[0], w.shape()[1]);
        let sv = self.shadow[n - 2].data().to_vec();
        let mut grown = w.data().to_vec();
        for i in 0..fan_in {
            for j in 0..old_out {
                grown[i * new_out + j] = sv[i * old_out + j];
            }
        }
        self.shadow[n - 2] = Tensor::from_raw(vec![fan_in, new_out], grown);
        let mut b = params[n - 1].data().to_vec();
        let sb = self.shadow[n - 1].data();
        b[..old_out].copy_from_slice(&sb[..old_out]);
        self.shadow[n - 1] = Tensor::from_raw(vec![new_out], b);
    }
}

/// A checkpoint as parsed back from disk.
pub struct Checkpoint {
    pub net: Mlp,
    pub seed: u64,
    pub label: String,
}

const CKPT_FORMAT: &str = "dsx-mlp 1";

fn write_values(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("{v:.16e}"));
    }
    out.push('\n');
}

/// Serialize a network to a self-describing text file. Values carry 17
/// significant digits, enough for an exact binary round trip.
pub fn save_checkpoint(path: &Path, net: &Mlp, seed: u64, label: &str) -> Result<()> {
    if label.is_empty() || label.contains(char::is_whitespace) {
        return Err(Error::Contract(format!(
            "checkpoint label must be a single token, got {label:?}"
        )));
    }
    let mut s = String::new();
    s.push_str(&format!("format {CKPT_FORMAT}\n"));
    s.push_str(&format!("seed {seed}\n"));
    s.push_str(&format!("label {label}\n"));
    s.push_str(&format!("activation {}\n", net.activation.name()));
    match &net.head {
        OutputHead::Logits => s.push_str("head logits\n"),
        OutputHead::Bounded { lo, hi } => {
            s.push_str("head bounded\n");
            s.push_str("bounds_lo ");
            write_values(&mut s, lo);
            s.push_str("bounds_hi ");
            write_values(&mut s, hi);
        }
    }
    let dims = net.layer_dims();
    s.push_str("dims");
    for d in &dims {
        s.push_str(&format!(" {d}"));
    }
    s.push('\n');
    for (k, l) in net.layers.iter().enumerate() {
        let (rows, cols) = (l.weight.shape()[0], l.weight.shape()[1]);
        s.push_str(&format!("layer {k}\nweight {rows} {cols}\n"));
        for r in 0..rows {
            write_values(&mut s, &l.weight.data()[r * cols..(r + 1) * cols]);
        }
        s.push_str(&format!("bias {cols}\n"));
        write_values(&mut s, l.bias.data());
    }
    s.push_str("end\n");
    let mut f = fs::File::create(path)?;
    f.write_all(s.as_bytes())?;
    Ok(())
}

struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    lineno: usize,
}

impl<'a> LineReader<'a> {
    fn next(&mut self) -> Result<&'a str> {
        loop {
            match self.lines.next() {
                Some(l) => {
                    self.lineno += 1;
                    if !l.trim().is_empty() {
                        return Ok(l.trim());
                    }
                }
                None => {
                    return Err(Error::Parse {
                        line: self.lineno,
                        message: "unexpected end of checkpoint".into(),
                    })
                }
            }
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.lineno,
            message: message.into(),
        }
    }

    fn expect_tag(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some(t) if t == tag => Ok(parts.collect()),
            other => Err(self.err(format!("expected `{tag}`, found {other:?}"))),
        }
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let line = self.next()?;
        let vals: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| self.err(format!("bad number: {e}")))?;
        if vals.len() != n {
            return Err(self.err(format!("expected {n} values, found {}", vals.len())));
        }
        Ok(vals)
    }
}

/// Parse a checkpoint produced by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let mut r = LineReader {
        lines: text.lines(),
        lineno: 0,
    };
    let fmt = r.expect_tag("format")?;
    if fmt.join(" ") != CKPT_FORMAT {
        return Err(r.err(format!(
            "unsupported checkpoint format {:?}, expected {CKPT_FORMAT:?}",
            fmt.join(" ")
        )));
    }
    let seed: u64 = r
        .expect_tag("seed")?
        .first()
        .ok_or_else(|| r.err("missing seed value"))?
        .parse()
        .map_err(|e| r.err(format!("bad seed: {e}")))?;
    let label = r
        .expect_tag("label")?
        .first()
        .ok_or_else(|| r.err("missing label value"))?
        .to_string();
    let act_name = r
        .expect_tag("activation")?
        .first()
        .ok_or_else(|| r.err("missing activation"))?
        .to_string();
    let activation =
        Activation::from_name(&act_name).ok_or_else(|| r.err(format!("unknown activation {act_name:?}")))?;
    let head_kind = r
        .expect_tag("head")?
        .first()
        .ok_or_else(|| r.err("missing head kind"))?
        .to_string();
    let mut pending_head = None;
    match head_kind.as_str() {
        "logits" => {}
        "bounded" => {
            let line = r.next()?;
            let lo = parse_tagged_values(&r, line, "bounds_lo")?;
            let line = r.next()?;
            let hi = parse_tagged_values(&r, line, "bounds_hi")?;
            pending_head = Some((lo, hi));
        }
        other => return Err(r.err(format!("unknown head kind {other:?}"))),
    }
    let dims: std::result::Result<Vec<usize>, _> =
        r.expect_tag("dims")?.iter().map(|s| s.parse::<usize>()).collect();
    let dims = dims.map_err(|e| r.err(format!("bad dims: {e}")))?;
    if dims.len() < 2 {
        return Err(r.err(format!("dims needs at least two entries, got {dims:?}")));
    }
    let head = match pending_head {
        None => OutputHead::Logits,
        Some((lo, hi)) => {
            let out = *dims.last().unwrap();
            if lo.len() != out || hi.len() != out {
                return Err(r.err(format!(
                    "bounds carry {} / {} values for {out} outputs",
                    lo.len(),
                    hi.len()
                )));
            }
            OutputHead::Bounded { lo, hi }
        }
    };
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for k in 0..dims.len() - 1 {
        let idx = r.expect_tag("layer")?;
        if idx.first() != Some(&format!("{k}").as_str()) {
            return Err(r.err(format!("expected layer {k}, found {idx:?}")));
        }
        let wdims = r.expect_tag("weight")?;
        let (rows, cols): (usize, usize) = match wdims.as_slice() {
            [a, b] => (
                a.parse().map_err(|e| r.err(format!("bad weight rows: {e}")))?,
                b.parse().map_err(|e| r.err(format!("bad weight cols: {e}")))?,
            ),
            _ => return Err(r.err("weight line needs rows and cols")),
        };
        if rows != dims[k] || cols != dims[k + 1] {
            return Err(r.err(format!(
                "weight {rows}x{cols} disagrees with dims {}x{}",
                dims[k],
                dims[k + 1]
            )));
        }
        let mut w = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            w.extend(r.values(cols)?);
        }
        let bdims = r.expect_tag("bias")?;
        if bdims.first().map(|s| s.parse::<usize>()) != Some(Ok(cols)) {
            return Err(r.err(format!("bias width disagrees with weight cols {cols}")));
        }
        let b = r.values(cols)?;
        let last = k == dims.len() - 2;
        layers.push(Layer {
            weight: Tensor::new(vec![rows, cols], w)?,
            bias: Tensor::new(vec![cols], b)?,
            act: if last { None } else { Some(activation) },
        });
    }
    let line = r.next()?;
    if line != "end" {
        return Err(r.err(format!("expected trailing `end`, found {line:?}")));
    }
    Ok(Checkpoint {
        net: Mlp {
            layers,
            head,
            activation,
        },
        seed,
        label,
    })
}

fn parse_tagged_values(r: &LineReader, line: &str, tag: &str) -> Result<Vec<f64>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(r.err(format!("expected `{tag}` line")));
    }
    parts
        .map(|s| s.parse::<f64>().map_err(|e| r.err(format!("bad number: {e}"))))
        .collect()
}
