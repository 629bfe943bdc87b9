//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in topological order during the forward pass;
//! `backward` replays the tape in reverse, accumulating gradients through
//! each op's local rule. Nodes never reached by the backward sweep keep no
//! gradient, so a single reverse pass over the tape visits exactly the
//! ancestors of the loss.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Local-gradient rule tag plus parent ids.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    SumRows(NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    AddCol(NodeId, NodeId),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Computation graph confined to one thread; build forward, then call
/// [`Graph::backward`] on a scalar loss.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

// out[m×k] = g[m×n] · b[k×n]ᵀ
fn matmul_nt(g: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

// out[k×n] = a[m×k]ᵀ · g[m×n]
fn matmul_tn(a: &[f64], m: usize, k: usize, g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Insert a leaf node (input, parameter, or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id`, if the last backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn dims2(&self, id: NodeId, ctx: &str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "{ctx}: expected 2-D operand, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product of two 2-D nodes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul: inner dims disagree, {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = matmul_raw(
            self.nodes[a.0].value.data(),
            m,
            ka,
            self.nodes[b.0].value.data(),
            n,
        );
        Ok(self.push(Tensor::from_raw(vec![m, n], data), Op::Matmul(a, b)))
    }

    fn broadcast_pair(&self, a: NodeId, b: NodeId, name: &str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let na = self.nodes[a.0].value.numel();
        let nb = self.nodes[b.0].value.numel();
        if sa == sb {
            Ok(sa.to_vec())
        } else if nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::Dimension(format!(
                "{name}: shapes {sa:?} and {sb:?} are neither equal nor scalar-broadcastable"
            )))
        }
    }

    fn zip_broadcast(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let shape = self.broadcast_pair(a, b, name)?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let n = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = if av.len() == 1 { av[0] } else { av[i] };
            let y = if bv.len() == 1 { bv[0] } else { bv[i] };
            out.push(f(x, y));
        }
        Ok(self.push(Tensor::from_raw(shape, out), op))
    }

    /// Elementwise sum; either operand may be a scalar broadcast.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_broadcast(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise difference; either operand may be a scalar broadcast.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_broadcast(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product; either operand may be a scalar broadcast.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_broadcast(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_raw(shape, out), op)
    }

    /// max(0, x); subgradient 0 at the kink.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Alias of [`Graph::relu`] under the name used by hinge-style losses.
    pub fn max0(&mut self, a: NodeId) -> NodeId {
        self.relu(a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.nodes[a.0].value.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.map(a, f64::ln, Op::Log(a)))
    }

    /// |x|; subgradient 0 at the kink.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.map(a, |x| x * s, Op::MulScalar(a, s))
    }

    /// Row-wise softmax of a `[b, C]` node, computed with max-subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "softmax")?;
        if n < 2 {
            return Err(Error::Contract(format!(
                "softmax: needs at least 2 classes, got {n}"
            )));
        }
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&av[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::Softmax(a)))
    }

    /// Row-wise log-softmax of a `[b, C]` node, via log-sum-exp.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "log_softmax")?;
        if n < 2 {
            return Err(Error::Contract(format!(
                "log_softmax: needs at least 2 classes, got {n}"
            )));
        }
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::LogSoftmax(a)))
    }

    /// Sum all elements into a `[1]` scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Per-row sums of a `[m, n]` node into a `[m]` node.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "sum_rows")?;
        let av = self.nodes[a.0].value.data();
        let out: Vec<f64> = (0..m).map(|i| av[i * n..(i + 1) * n].iter().sum()).collect();
        Ok(self.push(Tensor::from_raw(vec![m], out), Op::SumRows(a)))
    }

    fn row_arg(&self, a: NodeId, r: NodeId, name: &str) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(a, name)?;
        if self.nodes[r.0].value.numel() != n {
            return Err(Error::Dimension(format!(
                "{name}: row operand has {} elements, matrix has {n} columns",
                self.nodes[r.0].value.numel()
            )));
        }
        Ok((m, n))
    }

    /// Add a length-`n` row vector to every row of a `[m, n]` node.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.row_arg(a, row, "add_row")?;
        let av = self.nodes[a.0].value.data();
        let rv = self.nodes[row.0].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + rv[j]);
            }
        }
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::AddRow(a, row)))
    }

    /// Multiply every row of a `[m, n]` node by a length-`n` row vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.row_arg(a, row, "mul_row")?;
        let av = self.nodes[a.0].value.data();
        let rv = self.nodes[row.0].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] * rv[j]);
            }
        }
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MulRow(a, row)))
    }

    /// Add a length-`m` column vector to every column of a `[m, n]` node.
    pub fn add_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "add_col")?;
        if self.nodes[col.0].value.numel() != m {
            return Err(Error::Dimension(format!(
                "add_col: column operand has {} elements, matrix has {m} rows",
                self.nodes[col.0].value.numel()
            )));
        }
        let av = self.nodes[a.0].value.data();
        let cv = self.nodes[col.0].value.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + cv[i]);
            }
        }
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::AddCol(a, col)))
    }

    fn persist_grad(&mut self, idx: usize, pass_grad: Vec<f64>) {
        let node = &mut self.nodes[idx];
        match node.grad.as_mut() {
            Some(g) => {
                for (gi, ci) in g.data_mut().iter_mut().zip(&pass_grad) {
                    *gi += ci;
                }
            }
            None => {
                node.grad = Some(Tensor::from_raw(node.value.shape().to_vec(), pass_grad));
            }
        }
    }

    /// Run the reverse sweep from a scalar loss node, adding this pass's
    /// dLoss/dNode into every reachable node's gradient. Repeated calls
    /// without a fresh graph accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        // Scratch holds gradients of the current pass only, so earlier
        // passes are never re-propagated.
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let g = match scratch[i].take() {
                Some(g) => g,
                None => continue,
            };
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    let ga = matmul_nt(&g, m, n, self.nodes[b.0].value.data(), k);
                    let gb = matmul_tn(self.nodes[a.0].value.data(), m, k, &g, n);
                    accum(&mut scratch, a, &ga);
                    accum(&mut scratch, b, &gb);
                }
                Op::Add(a, b) => {
                    self.accum_broadcast(&mut scratch, a, &g, 1.0);
                    self.accum_broadcast(&mut scratch, b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accum_broadcast(&mut scratch, a, &g, 1.0);
                    self.accum_broadcast(&mut scratch, b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(idx, gi)| gi * if bv.len() == 1 { bv[0] } else { bv[idx] })
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(idx, gi)| gi * if av.len() == 1 { av[0] } else { av[idx] })
                        .collect();
                    self.accum_broadcast(&mut scratch, a, &ga, 1.0);
                    self.accum_broadcast(&mut scratch, b, &gb, 1.0);
                }
                Op::Relu(a) => {
                    let av = self.nodes[a.0].value.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(av)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accum(&mut scratch, a, &ga);
                }
                Op::Tanh(a) => {
                    let yv = self.nodes[i].value.data();
                    let ga: Vec<f64> =
                        g.iter().zip(yv).map(|(gi, &y)| gi * (1.0 - y * y)).collect();
                    accum(&mut scratch, a, &ga);
                }
                Op::Exp(a) => {
                    let yv = self.nodes[i].value.data();
                    let ga: Vec<f64> = g.iter().zip(yv).map(|(gi, &y)| gi * y).collect();
                    accum(&mut scratch, a, &ga);
                }
                Op::Log(a) => {
                    let av = self.nodes[a.0].value.data();
                    let ga: Vec<f64> = g.iter().zip(av).map(|(gi, &x)| gi / x).collect();
                    accum(&mut scratch, a, &ga);
                }
                Op::Abs(a) => {
                    let av = self.nodes[a.0].value.data();
                    let ga: Vec<f64> = g.iter().zip(av).map(|(gi, &x)| gi * sign0(x)).collect();
                    accum(&mut scratch, a, &ga);
                }
                Op::AddScalar(a) => accum(&mut scratch, a, &g),
                Op::MulScalar(a, s) => {
                    let ga: Vec<f64> = g.iter().map(|gi| gi * s).collect();
                    accum(&mut scratch, a, &ga);
                }
                Op::Softmax(a) => {
                    let yv = self.nodes[i].value.data();
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        let y = &yv[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for j in 0..n {
                            ga[r * n + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    accum(&mut scratch, a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let yv = self.nodes[i].value.data();
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        let y = &yv[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[r * n + j] = gr[j] - y[j].exp() * gsum;
                        }
                    }
                    accum(&mut scratch, a, &ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.numel();
                    accum(&mut scratch, a, &vec![g[0]; n]);
                }
                Op::SumRows(a) => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        for j in 0..n {
                            ga[r * n + j] = g[r];
                        }
                    }
                    accum(&mut scratch, a, &ga);
                }
                Op::AddRow(a, row) => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    accum(&mut scratch, a, &g);
                    let mut gr = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            gr[j] += g[r * n + j];
                        }
                    }
                    accum(&mut scratch, row, &gr);
                }
                Op::MulRow(a, row) => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let av = self.nodes[a.0].value.data();
                    let rv = self.nodes[row.0].value.data();
                    let mut ga = vec![0.0; m * n];
                    let mut gr = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            ga[r * n + j] = g[r * n + j] * rv[j];
                            gr[j] += g[r * n + j] * av[r * n + j];
                        }
                    }
                    accum(&mut scratch, a, &ga);
                    accum(&mut scratch, row, &gr);
                }
                Op::AddCol(a, col) => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    accum(&mut scratch, a, &g);
                    let mut gc = vec![0.0; m];
                    for r in 0..m {
                        for j in 0..n {
                            gc[r] += g[r * n + j];
                        }
                    }
                    accum(&mut scratch, col, &gc);
                }
            }
            self.persist_grad(i, g);
        }
        Ok(())
    }

    // One side of a broadcast binary op: a scalar side collapses the
    // gradient by summation.
    fn accum_broadcast(
        &self,
        scratch: &mut [Option<Vec<f64>>],
        id: NodeId,
        g: &[f64],
        scale: f64,
    ) {
        if self.nodes[id.0].value.numel() == 1 && g.len() > 1 {
            let s: f64 = g.iter().sum();
            accum(scratch, id, &[s * scale]);
        } else if scale == 1.0 {
            accum(scratch, id, g);
        } else {
            let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
            accum(scratch, id, &scaled);
        }
    }
}

fn accum(scratch: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]) {
    match &mut scratch[id.0] {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        slot => *slot = Some(contrib.to_vec()),
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax of a plain tensor, outside any graph.
pub fn softmax_tensor(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        softmax_row(t.row(i), &mut out[i * n..(i + 1) * n]);
    }
    Tensor::from_raw(vec![m, n], out)
}
