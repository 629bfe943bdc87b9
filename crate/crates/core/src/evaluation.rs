//! Measurement suite: agreement curves, gradient-direction fidelity of the
//! surrogates, class balance of generated queries, and queries-to-accuracy
//! tables.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::extraction::{ensemble_predict, fd_input_gradient, EvalSnapshot};
use crate::losses::{ce_sum, l1_pair_sum, l1_rows, loss_rows, one_hot_rows, LossKind};
use crate::ndgrad::{Graph, Tensor};
use crate::nets::Mlp;
use crate::oracle::{LabelMode, Oracle, Phase};
use crate::rng::substream;

/// Gradients (or losses) below this norm are excluded from fidelity reports.
const EXCLUDE_EPS: f64 = 1e-12;

/// One evaluation interval's worth of measurements.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub epoch: usize,
    pub queries: u64,
    pub agreement_s1: f64,
    /// NaN when the run trains a single student.
    pub agreement_s2: f64,
    pub agreement_ensemble: f64,
    /// NaN when no student pair exists or the run discovers classes.
    pub grad_fidelity_ds: f64,
    /// NaN when the run discovers classes.
    pub grad_fidelity_fd: f64,
    pub class_histogram: Vec<f64>,
    pub tv_from_uniform: f64,
}

fn agreement_ok(v: f64) -> bool {
    v.is_nan() || (0.0..=1.0).contains(&v)
}

impl MetricsRow {
    pub fn check(&self) -> Result<()> {
        for (v, name) in [
            (self.agreement_s1, "agreement_s1"),
            (self.agreement_s2, "agreement_s2"),
            (self.agreement_ensemble, "agreement_ensemble"),
        ] {
            if !agreement_ok(v) {
                return Err(Error::Contract(format!("{name} {v} outside [0, 1]")));
            }
        }
        let sum: f64 = self.class_histogram.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "class histogram sums to {sum}, not 1"
            )));
        }
        Ok(())
    }

    pub fn csv_header(classes: usize) -> String {
        let mut h = String::from(
            "epoch,queries,agreement_s1,agreement_s2,agreement_ensemble,\
             grad_fidelity_ds,grad_fidelity_fd",
        );
        for k in 0..classes {
            h.push_str(&format!(",class_hist_{k}"));
        }
        h.push_str(",tv_from_uniform");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.epoch, self.queries);
        for v in [
            self.agreement_s1,
            self.agreement_s2,
            self.agreement_ensemble,
            self.grad_fidelity_ds,
            self.grad_fidelity_fd,
        ] {
            s.push_str(&format!(",{v}"));
        }
        for v in &self.class_histogram {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{}", self.tv_from_uniform));
        s
    }

    pub fn from_csv(line: &str, classes: usize, line_no: usize) -> Result<MetricsRow> {
        let fields: Vec<&str> = line.split(',').collect();
        let expect = 8 + classes;
        if fields.len() != expect {
            return Err(Error::Parse {
                line: line_no,
                message: format!("{} fields where {expect} were expected", fields.len()),
            });
        }
        let int = |s: &str, name: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad {name} value {s:?}"),
            })
        };
        let float = |s: &str, name: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad {name} value {s:?}"),
            })
        };
        let mut hist = Vec::with_capacity(classes);
        for (k, s) in fields[7..7 + classes].iter().enumerate() {
            hist.push(float(s, &format!("class_hist_{k}"))?);
        }
        Ok(MetricsRow {
            epoch: int(fields[0], "epoch")? as usize,
            queries: int(fields[1], "queries")?,
            agreement_s1: float(fields[2], "agreement_s1")?,
            agreement_s2: float(fields[3], "agreement_s2")?,
            agreement_ensemble: float(fields[4], "agreement_ensemble")?,
            grad_fidelity_ds: float(fields[5], "grad_fidelity_ds")?,
            grad_fidelity_fd: float(fields[6], "grad_fidelity_fd")?,
            class_histogram: hist,
            tv_from_uniform: float(fields[7 + classes], "tv_from_uniform")?,
        })
    }
}

/// Write a metrics table with the exact column schema of
/// [`MetricsRow::csv_header`].
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow], classes: usize) -> Result<()> {
    let mut out = MetricsRow::csv_header(classes);
    out.push('\n');
    for r in rows {
        r.check()?;
        if r.class_histogram.len() != classes {
            return Err(Error::Contract(format!(
                "row carries {} histogram bins, file header says {classes}",
                r.class_histogram.len()
            )));
        }
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read back a metrics table, inferring the class count from the header.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty metrics file".into(),
    })?;
    let classes = header.split(',').filter(|f| f.starts_with("class_hist_")).count();
    if header != MetricsRow::csv_header(classes) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected metrics header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        rows.push(MetricsRow::from_csv(line, classes, i + 1)?);
    }
    Ok(rows)
}

/// How a per-sample gradient is normalized before the two sides are compared.
///
/// `Gradient` scales each gradient to unit length, which bounds distances by
/// 2 and is the default. `Loss` divides each gradient by the magnitude of its
/// loss value instead; both variants are invariant to positive rescaling of
/// the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FidelityNorm {
    Gradient,
    Loss,
}

impl FidelityNorm {
    pub fn name(self) -> &'static str {
        match self {
            FidelityNorm::Gradient => "gradient",
            FidelityNorm::Loss => "loss",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "gradient" => Some(FidelityNorm::Gradient),
            "loss" => Some(FidelityNorm::Loss),
            _ => None,
        }
    }
}

/// The gradient source being judged against white-box truth.
pub enum Surrogate<'a> {
    /// Dual students: the estimate differentiates the loss between S1 and S2.
    Pair { s1: &'a Mlp, s2: &'a Mlp },
    /// Zeroth-order baseline: the estimate probes the oracle around x.
    FdEstimator {
        student: &'a Mlp,
        directions: usize,
        step: f64,
    },
}

/// Per-sample distances between normalized true and estimated input
/// gradients, plus how many samples were dropped for vanishing norms.
#[derive(Clone, Debug)]
pub struct GradFidelityReport {
    pub distances: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub excluded: usize,
}

impl GradFidelityReport {
    fn from_distances(distances: Vec<f64>, excluded: usize) -> Self {
        let mean = if distances.is_empty() {
            f64::NAN
        } else {
            distances.iter().sum::<f64>() / distances.len() as f64
        };
        let median = if distances.is_empty() {
            f64::NAN
        } else {
            let mut sorted = distances.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            }
        };
        GradFidelityReport {
            distances,
            mean,
            median,
            excluded,
        }
    }
}

/// ‖a/‖a‖ − b/‖b‖‖₂, or None when either norm vanishes.
pub fn normalized_gradient_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < EXCLUDE_EPS || nb < EXCLUDE_EPS {
        return None;
    }
    Some(
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d = x / na - y / nb;
                d * d
            })
            .sum::<f64>()
            .sqrt(),
    )
}

/// ‖a/|la| − b/|lb|‖₂, or None when a gradient or loss magnitude vanishes.
pub fn loss_scaled_distance(a: &[f64], la: f64, b: &[f64], lb: f64) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < EXCLUDE_EPS || nb < EXCLUDE_EPS || la.abs() < EXCLUDE_EPS || lb.abs() < EXCLUDE_EPS {
        return None;
    }
    Some(
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d = x / la.abs() - y / lb.abs();
                d * d
            })
            .sum::<f64>()
            .sqrt(),
    )
}

// Per-sample input gradients of the loss between `student` and `reference`,
// plus the per-sample loss values. The ℓ1 loss differentiates through both
// networks; cross-entropy treats the reference's argmax as a constant label.
fn grads_against_net(
    student: &Mlp,
    reference: &Mlp,
    xs: &Tensor,
    loss: LossKind,
) -> Result<(Tensor, Vec<f64>)> {
    if student.output_dim() != reference.output_dim() {
        return Err(Error::Contract(format!(
            "gradient fidelity across head widths {} and {}",
            student.output_dim(),
            reference.output_dim()
        )));
    }
    let mut g = Graph::new();
    let x = g.leaf(xs.clone());
    let sb = student.bind(&mut g);
    let s_logits = sb.forward(&mut g, x)?;
    match loss {
        LossKind::L1 => {
            let sp = g.softmax(s_logits)?;
            let rb = reference.bind(&mut g);
            let r_logits = rb.forward(&mut g, x)?;
            let rp = g.softmax(r_logits)?;
            let values = l1_rows(g.value(sp), g.value(rp))?;
            let total = l1_pair_sum(&mut g, sp, rp)?;
            g.backward(total)?;
            Ok((g.grad(x).unwrap().clone(), values))
        }
        LossKind::Ce => {
            let labels = reference.infer(xs)?.argmax_rows();
            let hard = one_hot_rows(&labels, student.output_dim())?;
            let values = loss_rows(LossKind::Ce, g.value(s_logits), &hard, 1.0)?;
            let total = ce_sum(&mut g, s_logits, &hard)?;
            g.backward(total)?;
            Ok((g.grad(x).unwrap().clone(), values))
        }
        other => Err(Error::Config(format!(
            "gradient fidelity supports l1 and ce, not {}",
            other.name()
        ))),
    }
}

/// Compare a surrogate's input gradients against white-box truth on `xs`.
///
/// Truth is the gradient of the loss between the surrogate's student and the
/// target, differentiated directly. The estimate comes from the student pair
/// or from centered differences through the oracle (whose queries are
/// evaluation-only and need `oracle` and `rng`).
pub fn grad_fidelity(
    target: &Mlp,
    surrogate: &Surrogate,
    xs: &Tensor,
    loss: LossKind,
    norm: FidelityNorm,
    oracle: Option<&mut Oracle>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<GradFidelityReport> {
    let student = match surrogate {
        Surrogate::Pair { s1, .. } => *s1,
        Surrogate::FdEstimator { student, .. } => *student,
    };
    let (g_true, l_true) = grads_against_net(student, target, xs, loss)?;
    let (g_est, l_est) = match surrogate {
        Surrogate::Pair { s1, s2 } => grads_against_net(s1, s2, xs, loss)?,
        Surrogate::FdEstimator { student, directions, step } => {
            let oracle = oracle.ok_or_else(|| {
                Error::Contract("the fd estimator needs an oracle".into())
            })?;
            let rng = rng.ok_or_else(|| {
                Error::Contract("the fd estimator needs a direction stream".into())
            })?;
            let est = fd_input_gradient(
                oracle,
                student,
                xs,
                loss,
                1.0,
                *step,
                *directions,
                rng,
                Phase::EvalExcluded,
            )?;
            let reply = oracle.query(xs, Phase::EvalExcluded)?;
            let values = loss_rows(loss, &student.infer(xs)?, &reply, 1.0)?;
            (est, values)
        }
    };
    let d = xs.cols();
    let mut distances = Vec::with_capacity(xs.rows());
    let mut excluded = 0;
    for i in 0..xs.rows() {
        let (gt, ge) = (&g_true.data()[i * d..(i + 1) * d], &g_est.data()[i * d..(i + 1) * d]);
        let dist = match norm {
            FidelityNorm::Gradient => normalized_gradient_distance(gt, ge),
            FidelityNorm::Loss => loss_scaled_distance(gt, l_true[i], ge, l_est[i]),
        };
        match dist {
            Some(v) => distances.push(v),
            None => excluded += 1,
        }
    }
    Ok(GradFidelityReport::from_distances(distances, excluded))
}

/// How the target classifies a fresh batch of generated samples.
#[derive(Clone, Debug)]
pub struct ClassDistribution {
    pub counts: Vec<u64>,
    pub histogram: Vec<f64>,
    pub max_share: f64,
    pub min_share: f64,
    pub tv_from_uniform: f64,
}

/// Sample `n` latents, push them through the generator, and tally the
/// target's classifications. Evaluation-only accounting.
pub fn class_distribution(
    generator: &Mlp,
    oracle: &mut Oracle,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClassDistribution> {
    if n == 0 {
        return Err(Error::Contract("class_distribution needs n >= 1".into()));
    }
    let d_z = generator.input_dim();
    let z = Tensor::from_raw(
        vec![n, d_z],
        (0..n * d_z).map(|_| rng.gen_range(0.0..1.0)).collect(),
    );
    let x = generator.infer(&z)?;
    let ids = oracle.query_class_ids(&x, Phase::EvalExcluded)?;
    let c = oracle.classes();
    let mut counts = vec![0u64; c];
    for id in ids {
        counts[id] += 1;
    }
    let histogram: Vec<f64> = counts.iter().map(|&k| k as f64 / n as f64).collect();
    let max_share = histogram.iter().cloned().fold(f64::MIN, f64::max);
    let min_share = histogram.iter().cloned().fold(f64::MAX, f64::min);
    let uniform = 1.0 / c as f64;
    let tv_from_uniform = 0.5 * histogram.iter().map(|h| (h - uniform).abs()).sum::<f64>();
    Ok(ClassDistribution {
        counts,
        histogram,
        max_share,
        min_share,
        tv_from_uniform,
    })
}

/// For each threshold, the first queries value whose ensemble agreement
/// reaches it, or None when the run never got there.
pub fn queries_to_accuracy(
    history: &[MetricsRow],
    thresholds: &[f64],
) -> Result<Vec<(f64, Option<u64>)>> {
    if history.is_empty() {
        return Err(Error::Contract("queries_to_accuracy on an empty history".into()));
    }
    for w in history.windows(2) {
        if w[1].queries < w[0].queries {
            return Err(Error::Contract(format!(
                "history queries go backwards: {} then {}",
                w[0].queries, w[1].queries
            )));
        }
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hit = history
                .iter()
                .find(|r| r.agreement_ensemble >= t)
                .map(|r| r.queries);
            (t, hit)
        })
        .collect())
}

/// The standard evaluation hook: agreements on a held-out set, gradient
/// fidelity of both surrogates on freshly generated points, and class
/// balance of the generator, all through evaluation-only oracle accounting.
pub struct Evaluator {
    target: Mlp,
    eval_xs: Tensor,
    pub fidelity_loss: LossKind,
    pub norm: FidelityNorm,
    pub fd_directions: usize,
    pub fd_step: f64,
    pub fidelity_samples: usize,
    pub hist_samples: usize,
    rng: ChaCha8Rng,
}

impl Evaluator {
    pub fn new(target: Mlp, eval_xs: Tensor, label_mode: LabelMode, seed: u64) -> Self {
        Evaluator {
            target,
            eval_xs,
            fidelity_loss: match label_mode {
                LabelMode::Soft => LossKind::L1,
                LabelMode::Hard => LossKind::Ce,
            },
            norm: FidelityNorm::Gradient,
            fd_directions: 1,
            fd_step: 1e-3,
            fidelity_samples: 256,
            hist_samples: 10_000,
            rng: substream(seed, "eval"),
        }
    }

    pub fn row(&mut self, snap: &EvalSnapshot, oracle: &mut Oracle) -> Result<MetricsRow> {
        let truth = oracle.query_class_ids(&self.eval_xs, Phase::EvalExcluded)?;
        let agree = |pred: &[usize]| -> f64 {
            let hits = pred
                .iter()
                .zip(&truth)
                .filter(|(p, t)| match snap.class_map {
                    Some(map) => map.dense_of(**t) == Some(**p),
                    None => *p == *t,
                })
                .count();
            hits as f64 / truth.len() as f64
        };
        let agreement_s1 = agree(&snap.s1.infer(&self.eval_xs)?.argmax_rows());
        let (agreement_s2, agreement_ensemble) = match snap.s2 {
            Some(s2) => {
                let a2 = agree(&s2.infer(&self.eval_xs)?.argmax_rows());
                let ens = ensemble_predict(snap.s1, s2, &self.eval_xs)?;
                (a2, agree(&ens.argmax_rows()))
            }
            None => (f64::NAN, agreement_s1),
        };

        // Fidelity is undefined while the student head is still discovering
        // the target's classes.
        let (grad_fidelity_ds, grad_fidelity_fd) = if snap.class_map.is_some() {
            (f64::NAN, f64::NAN)
        } else {
            let d_z = snap.generator.input_dim();
            let n = self.fidelity_samples;
            let z = Tensor::from_raw(
                vec![n, d_z],
                (0..n * d_z).map(|_| self.rng.gen_range(0.0..1.0)).collect(),
            );
            let xg = snap.generator.infer(&z)?;
            let ds = match snap.s2 {
                Some(s2) => {
                    grad_fidelity(
                        &self.target,
                        &Surrogate::Pair { s1: snap.s1, s2 },
                        &xg,
                        self.fidelity_loss,
                        self.norm,
                        None,
                        None,
                    )?
                    .mean
                }
                None => f64::NAN,
            };
            let fd = grad_fidelity(
                &self.target,
                &Surrogate::FdEstimator {
                    student: snap.s1,
                    directions: self.fd_directions,
                    step: self.fd_step,
                },
                &xg,
                self.fidelity_loss,
                self.norm,
                Some(oracle),
                Some(&mut self.rng),
            )?
            .mean;
            (ds, fd)
        };

        let dist = class_distribution(snap.generator, oracle, self.hist_samples, &mut self.rng)?;
        let row = MetricsRow {
            epoch: snap.epoch,
            queries: snap.queries,
            agreement_s1,
            agreement_s2,
            agreement_ensemble,
            grad_fidelity_ds,
            grad_fidelity_fd,
            class_histogram: dist.histogram,
            tv_from_uniform: dist.tv_from_uniform,
        };
        row.check()?;
        Ok(row)
    }
}
