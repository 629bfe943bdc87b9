//! Training losses: ℓ1 distance, KL divergence, cross-entropy, multi-margin,
//! and the disagreement loss that drives the dual-student generator.
//!
//! Each loss has a graph-building form (differentiable, mean over the batch)
//! and a plain per-sample evaluator used by the zeroth-order estimator,
//! which only ever needs values.

use crate::error::{Error, Result};
use crate::ndgrad::{softmax_tensor, Graph, NodeId, Tensor};

const LOG_FLOOR: f64 = 1e-12;
const PROB_TOL: f64 = 1e-6;

/// Loss selector carried through configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
    Kl,
    Ce,
    MultiMargin,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Kl => "kl",
            LossKind::Ce => "ce",
            LossKind::MultiMargin => "multi_margin",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "l1" => Some(LossKind::L1),
            "kl" => Some(LossKind::Kl),
            "ce" => Some(LossKind::Ce),
            "multi_margin" => Some(LossKind::MultiMargin),
            _ => None,
        }
    }

    /// Whether the loss consumes the student's probabilities rather than
    /// raw logits.
    pub fn wants_probabilities(self) -> bool {
        matches!(self, LossKind::L1)
    }
}

fn check_same_shape(g: &Graph, p: NodeId, q: &Tensor, name: &str) -> Result<(usize, usize)> {
    let s = g.value(p).shape();
    if s.len() != 2 || s != q.shape() {
        return Err(Error::Dimension(format!(
            "{name}: prediction shape {s:?} vs target shape {:?}",
            q.shape()
        )));
    }
    Ok((s[0], s[1]))
}

fn check_one_hot(t: &Tensor, name: &str) -> Result<Vec<usize>> {
    let (b, c) = (t.rows(), t.cols());
    let mut labels = Vec::with_capacity(b);
    for i in 0..b {
        let row = t.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::Contract(format!(
                "{name}: row {i} is not one-hot: {row:?}"
            )));
        }
        labels.push(row.iter().position(|&v| v == 1.0).unwrap());
    }
    Ok(labels)
}

fn check_prob_rows(t: &Tensor, name: &str) -> Result<()> {
    for i in 0..t.rows() {
        let row = t.row(i);
        if row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!(
                "{name}: row {i} has a negative entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > PROB_TOL {
            return Err(Error::Contract(format!(
                "{name}: row {i} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

// Sum over the whole batch of Σ_j |p_ij − q_ij|.
fn l1_sum_node(g: &mut Graph, p: NodeId, q: &Tensor) -> Result<NodeId> {
    let ql = g.leaf(q.clone());
    let d = g.sub(p, ql)?;
    let a = g.abs(d);
    Ok(g.sum(a))
}

/// Mean over the batch of the per-sample ℓ1 distance between probability
/// rows. `p` is a graph node, `q` a constant.
pub fn l1_loss(g: &mut Graph, p: NodeId, q: &Tensor) -> Result<NodeId> {
    let (b, _) = check_same_shape(g, p, q, "l1_loss")?;
    let total = l1_sum_node(g, p, q)?;
    Ok(g.mul_scalar(total, 1.0 / b as f64))
}

/// Mean cross-entropy of logits against one-hot targets, via log-sum-exp.
pub fn ce_loss(g: &mut Graph, logits: NodeId, hard: &Tensor) -> Result<NodeId> {
    let (b, _) = check_same_shape(g, logits, hard, "ce_loss")?;
    check_one_hot(hard, "ce_loss")?;
    let lsm = g.log_softmax(logits)?;
    let mask = g.leaf(hard.clone());
    let picked = g.mul(lsm, mask)?;
    let total = g.sum(picked);
    Ok(g.mul_scalar(total, -1.0 / b as f64))
}

/// Mean over the batch of (1/C)·Σ_{j≠y} max(0, margin − logit_y + logit_j).
pub fn multi_margin_loss(
    g: &mut Graph,
    logits: NodeId,
    hard: &Tensor,
    margin: f64,
) -> Result<NodeId> {
    let (b, c) = check_same_shape(g, logits, hard, "multi_margin_loss")?;
    check_one_hot(hard, "multi_margin_loss")?;
    let mask = g.leaf(hard.clone());
    let picked = g.mul(logits, mask)?;
    let true_logit = g.sum_rows(picked)?;
    let neg_true = g.mul_scalar(true_logit, -1.0);
    let shifted = g.add_col(logits, neg_true)?;
    let with_margin = g.add_scalar(shifted, margin);
    let hinged = g.max0(with_margin);
    // The j == y term is max(0, margin) exactly; mask it out.
    let off: Vec<f64> = hard.data().iter().map(|&v| 1.0 - v).collect();
    let off_mask = g.leaf(Tensor::from_raw(hard.shape().to_vec(), off));
    let kept = g.mul(hinged, off_mask)?;
    let total = g.sum(kept);
    Ok(g.mul_scalar(total, 1.0 / (b * c) as f64))
}

/// Mean KL(q ‖ softmax(logits)) with a floor inside the logs.
pub fn kl_loss(g: &mut Graph, logits: NodeId, q: &Tensor) -> Result<NodeId> {
    let (b, _) = check_same_shape(g, logits, q, "kl_loss")?;
    check_prob_rows(q, "kl_loss")?;
    let entropy_term: f64 = q
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v * v.max(LOG_FLOOR).ln() } else { 0.0 })
        .sum::<f64>()
        / b as f64;
    let lsm = g.log_softmax(logits)?;
    let ql = g.leaf(q.clone());
    let cross = g.mul(ql, lsm)?;
    let total = g.sum(cross);
    let neg_cross = g.mul_scalar(total, -1.0 / b as f64);
    Ok(g.add_scalar(neg_cross, entropy_term))
}

/// −ℓ1(s1, s2) over softmax outputs of the two students; minimizing this
/// drives the generator toward points where the students disagree.
pub fn generator_loss_ds(g: &mut Graph, s1: NodeId, s2: NodeId) -> Result<NodeId> {
    let s1_shape = g.value(s1).shape().to_vec();
    if s1_shape != g.value(s2).shape() {
        return Err(Error::Dimension(format!(
            "generator_loss_ds: student output shapes {:?} vs {:?}",
            s1_shape,
            g.value(s2).shape()
        )));
    }
    let b = s1_shape[0];
    let d = g.sub(s1, s2)?;
    let a = g.abs(d);
    let total = g.sum(a);
    Ok(g.mul_scalar(total, -1.0 / b as f64))
}

/// Sum over the whole batch of Σ_j |a_ij − b_ij| where both sides are graph
/// nodes. Sum reduction keeps per-sample input gradients unscaled.
pub fn l1_pair_sum(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::Dimension(format!(
            "l1_pair_sum: shapes {:?} vs {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    let d = g.sub(a, b)?;
    let abs = g.abs(d);
    Ok(g.sum(abs))
}

/// Sum (not mean) cross-entropy of logits against one-hot targets.
pub fn ce_sum(g: &mut Graph, logits: NodeId, hard: &Tensor) -> Result<NodeId> {
    check_same_shape(g, logits, hard, "ce_sum")?;
    check_one_hot(hard, "ce_sum")?;
    let lsm = g.log_softmax(logits)?;
    let mask = g.leaf(hard.clone());
    let picked = g.mul(lsm, mask)?;
    let total = g.sum(picked);
    Ok(g.mul_scalar(total, -1.0))
}

/// Graph form of the student loss for a (kind, reply) pair: `pred_probs`
/// feeds ℓ1, `pred_logits` feeds the rest.
pub fn student_loss(
    g: &mut Graph,
    kind: LossKind,
    pred_logits: NodeId,
    pred_probs: NodeId,
    reply: &Tensor,
    margin: f64,
) -> Result<NodeId> {
    match kind {
        LossKind::L1 => l1_loss(g, pred_probs, reply),
        LossKind::Kl => kl_loss(g, pred_logits, reply),
        LossKind::Ce => ce_loss(g, pred_logits, reply),
        LossKind::MultiMargin => multi_margin_loss(g, pred_logits, reply, margin),
    }
}

/// Per-sample loss values outside any graph: entry i is the loss of row i of
/// `logits` against row i of `reply`.
pub fn loss_rows(kind: LossKind, logits: &Tensor, reply: &Tensor, margin: f64) -> Result<Vec<f64>> {
    if logits.shape() != reply.shape() || logits.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "loss_rows: logits shape {:?} vs reply shape {:?}",
            logits.shape(),
            reply.shape()
        )));
    }
    let (b, c) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(b);
    match kind {
        LossKind::L1 => {
            let probs = softmax_tensor(logits);
            for i in 0..b {
                out.push(
                    probs
                        .row(i)
                        .iter()
                        .zip(reply.row(i))
                        .map(|(p, q)| (p - q).abs())
                        .sum(),
                );
            }
        }
        LossKind::Ce | LossKind::Kl => {
            check_prob_rows(reply, "loss_rows")?;
            let probs = softmax_tensor(logits);
            for i in 0..b {
                let mut v = 0.0;
                for (p, &q) in probs.row(i).iter().zip(reply.row(i)) {
                    if q > 0.0 {
                        v -= q * p.max(LOG_FLOOR).ln();
                        if kind == LossKind::Kl {
                            v += q * q.max(LOG_FLOOR).ln();
                        }
                    }
                }
                out.push(v);
            }
        }
        LossKind::MultiMargin => {
            check_one_hot(reply, "loss_rows")?;
            for i in 0..b {
                let row = logits.row(i);
                let y = reply.row(i).iter().position(|&v| v == 1.0).unwrap();
                let mut v = 0.0;
                for (j, &xj) in row.iter().enumerate() {
                    if j != y {
                        v += (margin - row[y] + xj).max(0.0);
                    }
                }
                out.push(v / c as f64);
            }
        }
    }
    Ok(out)
}

/// One-hot rows for a list of class ids.
pub fn one_hot_rows(labels: &[usize], classes: usize) -> Result<Tensor> {
    if classes < 2 {
        return Err(Error::Contract(format!(
            "one_hot_rows: {classes} classes"
        )));
    }
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!(
                "one_hot_rows: label {y} outside 0..{classes}"
            )));
        }
        data[i * classes + y] = 1.0;
    }
    Ok(Tensor::from_raw(vec![labels.len(), classes], data))
}

/// Per-sample ℓ1 distances between two plain probability tensors.
pub fn l1_rows(p: &Tensor, q: &Tensor) -> Result<Vec<f64>> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "l1_rows: shapes {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    Ok((0..p.rows())
        .map(|i| {
            p.row(i)
                .iter()
                .zip(q.row(i))
                .map(|(a, b)| (a - b).abs())
                .sum()
        })
        .collect())
}

/// Batch means of both sides of the disagreement lower bound
/// ℓ1(s1,s2) ≤ ℓ1(s1,t) + ℓ1(s2,t); all arguments are probability tensors.
pub fn triangle_sides(s1: &Tensor, s2: &Tensor, t: &Tensor) -> Result<(f64, f64)> {
    let b = s1.rows() as f64;
    let lhs: f64 = l1_rows(s1, s2)?.iter().sum::<f64>() / b;
    let rhs: f64 = (l1_rows(s1, t)?.iter().sum::<f64>() + l1_rows(s2, t)?.iter().sum::<f64>()) / b;
    Ok((lhs, rhs))
}
