//! Black-box access to the target model with exact query accounting.
//!
//! The oracle wraps an opaque callable, so extraction code can never reach
//! the target's parameters or gradients. Every query is counted per sample
//! under a named phase; evaluation queries are recorded but excluded from
//! the budget total.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{softmax_tensor, Tensor};
use crate::nets::Mlp;

/// Whether the target reveals full probability vectors or only argmax classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    Soft,
    Hard,
}

impl LabelMode {
    pub fn name(self) -> &'static str {
        match self {
            LabelMode::Soft => "soft",
            LabelMode::Hard => "hard",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "soft" => Some(LabelMode::Soft),
            "hard" => Some(LabelMode::Hard),
            _ => None,
        }
    }
}

/// Accounting bucket for a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    StudentTrain,
    GeneratorGradEst,
    EvalExcluded,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::StudentTrain => "student_train",
            Phase::GeneratorGradEst => "generator_grad_est",
            Phase::EvalExcluded => "eval_excluded",
        }
    }

    /// Evaluation traffic never counts against the budget.
    pub fn excluded(self) -> bool {
        matches!(self, Phase::EvalExcluded)
    }
}

/// Per-sample query counts, split by phase.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct QueryLedger {
    pub total_samples: u64,
    pub by_phase: BTreeMap<String, u64>,
}

impl QueryLedger {
    pub fn record(&mut self, phase: Phase, n: u64) {
        *self.by_phase.entry(phase.name().to_string()).or_insert(0) += n;
        if !phase.excluded() {
            self.total_samples += n;
        }
    }

    pub fn phase_count(&self, phase: Phase) -> u64 {
        self.by_phase.get(phase.name()).copied().unwrap_or(0)
    }
}

type TargetFn = Box<dyn Fn(&Tensor) -> Result<Tensor> + Send>;

/// The black-box target: a logits callable, a label mode, a ledger, and an
/// optional budget cap.
pub struct Oracle {
    target: TargetFn,
    classes: usize,
    mode: LabelMode,
    budget: Option<u64>,
    ledger: QueryLedger,
}

impl Oracle {
    /// Wrap an arbitrary logits function. The callable is the only channel to
    /// the target, so nothing downstream can see parameters or gradients.
    pub fn from_fn(
        target: impl Fn(&Tensor) -> Result<Tensor> + Send + 'static,
        classes: usize,
        mode: LabelMode,
        budget: Option<u64>,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Contract(format!(
                "oracle needs at least 2 classes, got {classes}"
            )));
        }
        Ok(Oracle {
            target: Box::new(target),
            classes,
            mode,
            budget,
            ledger: QueryLedger::default(),
        })
    }

    /// Wrap a trained network by value; only its outputs escape.
    pub fn from_mlp(net: Mlp, mode: LabelMode, budget: Option<u64>) -> Result<Self> {
        let classes = net.output_dim();
        Self::from_fn(move |x| net.infer(x), classes, mode, budget)
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    /// Whether `n` more counted samples would still fit under the budget.
    pub fn fits(&self, n: u64) -> bool {
        match self.budget {
            Some(b) => self.ledger.total_samples + n <= b,
            None => true,
        }
    }

    fn admit(&mut self, x: &Tensor, phase: Phase) -> Result<u64> {
        if x.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "oracle query expects a 2-D batch, got shape {:?}",
                x.shape()
            )));
        }
        let n = x.rows() as u64;
        if !phase.excluded() {
            if let Some(b) = self.budget {
                if self.ledger.total_samples + n > b {
                    return Err(Error::BudgetExhausted {
                        budget: b,
                        requested: n,
                        ledger: self.ledger.clone(),
                    });
                }
            }
        }
        Ok(n)
    }

    fn logits(&mut self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let n = self.admit(x, phase)?;
        let out = (self.target)(x)?;
        if out.shape() != [x.rows(), self.classes] {
            return Err(Error::Dimension(format!(
                "target returned shape {:?} for a batch of {} with {} classes",
                out.shape(),
                x.rows(),
                self.classes
            )));
        }
        self.ledger.record(phase, n);
        Ok(out)
    }

    /// Query the target. Soft mode returns softmax probabilities, hard mode
    /// one-hot vectors of the argmax class (ties go to the lowest index).
    /// The result is a plain tensor, detached from every graph.
    pub fn query(&mut self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let logits = self.logits(x, phase)?;
        Ok(match self.mode {
            LabelMode::Soft => softmax_tensor(&logits),
            LabelMode::Hard => {
                let (b, c) = (logits.rows(), logits.cols());
                let mut data = vec![0.0; b * c];
                for (i, y) in logits.argmax_rows().into_iter().enumerate() {
                    data[i * c + y] = 1.0;
                }
                Tensor::from_raw(vec![b, c], data)
            }
        })
    }

    /// Query for raw class ids regardless of label mode. Same accounting as
    /// [`Oracle::query`].
    pub fn query_class_ids(&mut self, x: &Tensor, phase: Phase) -> Result<Vec<usize>> {
        let logits = self.logits(x, phase)?;
        Ok(logits.argmax_rows())
    }

    /// Fraction of samples where a prediction function agrees with the
    /// target's argmax. Uses evaluation accounting, so the budget is untouched.
    pub fn eval_agreement_with(
        &mut self,
        xs: &Tensor,
        predict: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<f64> {
        let truth = self.query_class_ids(xs, Phase::EvalExcluded)?;
        let pred = predict(xs)?;
        if pred.rows() != xs.rows() {
            return Err(Error::Contract(format!(
                "prediction returned {} rows for {} samples",
                pred.rows(),
                xs.rows()
            )));
        }
        let hits = pred
            .argmax_rows()
            .into_iter()
            .zip(&truth)
            .filter(|(p, t)| p == *t)
            .count();
        Ok(hits as f64 / truth.len() as f64)
    }

    /// Agreement between a network's argmax and the target's argmax.
    pub fn eval_agreement(&mut self, net: &Mlp, xs: &Tensor) -> Result<f64> {
        self.eval_agreement_with(xs, |x| net.infer(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, OutputHead};
    use crate::rng::substream;
    use rand::Rng;

    fn target_net(seed: u64) -> Mlp {
        let mut rng = substream(seed, "init_target");
        Mlp::new(&[3, 8, 4], Activation::Relu, OutputHead::Logits, &mut rng).unwrap()
    }

    fn batch(seed: u64, rows: usize) -> Tensor {
        let mut rng = substream(seed, "x");
        Tensor::from_raw(
            vec![rows, 3],
            (0..rows * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn soft_rows_are_probabilities_and_hard_rows_one_hot() {
        let net = target_net(1);
        let xs = batch(1, 16);
        let mut soft = Oracle::from_mlp(net.clone(), LabelMode::Soft, None).unwrap();
        let p = soft.query(&xs, Phase::StudentTrain).unwrap();
        for i in 0..16 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mut hard = Oracle::from_mlp(net, LabelMode::Hard, None).unwrap();
        let h = hard.query(&xs, Phase::StudentTrain).unwrap();
        for i in 0..16 {
            let ones = h.row(i).iter().filter(|&&v| v == 1.0).count();
            let zeros = h.row(i).iter().filter(|&&v| v == 0.0).count();
            assert_eq!((ones, zeros), (1, 3));
        }
    }

    #[test]
    fn five_batches_of_256_count_1280() {
        let mut oracle = Oracle::from_mlp(target_net(2), LabelMode::Soft, None).unwrap();
        let xs = batch(2, 256);
        for _ in 0..5 {
            oracle.query(&xs, Phase::StudentTrain).unwrap();
        }
        assert_eq!(oracle.ledger().total_samples, 1280);
        assert_eq!(oracle.ledger().phase_count(Phase::StudentTrain), 1280);
    }

    #[test]
    fn eval_phase_is_recorded_but_not_budgeted() {
        let mut oracle = Oracle::from_mlp(target_net(3), LabelMode::Soft, Some(100)).unwrap();
        let xs = batch(3, 64);
        oracle.query(&xs, Phase::EvalExcluded).unwrap();
        oracle.query(&xs, Phase::EvalExcluded).unwrap();
        assert_eq!(oracle.ledger().total_samples, 0);
        assert_eq!(oracle.ledger().phase_count(Phase::EvalExcluded), 128);
        oracle.query(&xs, Phase::StudentTrain).unwrap();
        assert_eq!(oracle.ledger().total_samples, 64);
    }

    #[test]
    fn budget_refusal_carries_ledger_snapshot() {
        let mut oracle = Oracle::from_mlp(target_net(4), LabelMode::Soft, Some(1000)).unwrap();
        let xs = batch(4, 256);
        for _ in 0..3 {
            oracle.query(&xs, Phase::StudentTrain).unwrap();
        }
        assert!(oracle.fits(232));
        assert!(!oracle.fits(256));
        match oracle.query(&xs, Phase::StudentTrain) {
            Err(Error::BudgetExhausted {
                budget,
                requested,
                ledger,
            }) => {
                assert_eq!(budget, 1000);
                assert_eq!(requested, 256);
                assert_eq!(ledger.total_samples, 768);
            }
            other => panic!("expected budget exhaustion, got {other:?}"),
        }
        assert_eq!(oracle.ledger().total_samples, 768);
        oracle.query(&xs, Phase::EvalExcluded).unwrap();
    }

    #[test]
    fn agreement_is_one_for_target_copy_and_matches_recount() {
        let net = target_net(5);
        let xs = batch(5, 200);
        let mut oracle = Oracle::from_mlp(net.clone(), LabelMode::Hard, None).unwrap();
        assert_eq!(oracle.eval_agreement(&net, &xs).unwrap(), 1.0);

        let other = target_net(6);
        let got = oracle.eval_agreement(&other, &xs).unwrap();
        let truth = net.infer(&xs).unwrap().argmax_rows();
        let pred = other.infer(&xs).unwrap().argmax_rows();
        let hits = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        assert!((got - hits as f64 / 200.0).abs() < 1e-15);
    }
}
