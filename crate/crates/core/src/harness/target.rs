//! Plain supervised training of the black-box victim. The same routine
//! trains the same-data proxy used by the transfer-attack comparison.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::losses::{ce_loss, one_hot_rows};
use crate::ndgrad::{Graph, Tensor};
use crate::nets::{Activation, Mlp, OutputHead, SgdState};
use crate::rng::substream;

#[derive(Clone, Debug)]
pub struct TargetSpec {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Minimum test accuracy the victim must reach before extraction runs
    /// are allowed to use it.
    pub floor: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec {
            hidden: vec![32, 32],
            epochs: 60,
            batch: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            floor: 0.9,
        }
    }
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.floor) {
            return Err(Error::Config(format!(
                "floor must be in [0, 1], got {}",
                self.floor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TargetReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Fraction of samples the network labels like the dataset does.
pub fn accuracy(net: &Mlp, ds: &Dataset) -> Result<f64> {
    let pred = net.infer(&ds.xs)?.argmax_rows();
    let hits = pred.iter().zip(&ds.ys).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Minibatch SGD with cross-entropy. `stream` names the substream so the
/// victim and a same-data proxy started from the same seed still get
/// independent initializations and shuffles.
pub fn train_target(
    train: &Dataset,
    test: &Dataset,
    classes: usize,
    spec: &TargetSpec,
    seed: u64,
    stream: &str,
) -> Result<(Mlp, TargetReport)> {
    spec.validate()?;
    if let Some(&bad) = train.ys.iter().chain(&test.ys).find(|&&y| y >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} outside the configured {classes} classes"
        )));
    }
    let d = train.xs.cols();
    let mut dims = vec![d];
    dims.extend_from_slice(&spec.hidden);
    dims.push(classes);
    let mut rng = substream(seed, stream);
    let mut net = Mlp::new(&dims, Activation::Relu, OutputHead::Logits, &mut rng)?;
    let mut sgd = SgdState::new(&net, spec.lr, spec.momentum, spec.weight_decay);

    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.batch) {
            let mut xb = Vec::with_capacity(chunk.len() * d);
            let mut yb = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xb.extend_from_slice(&train.xs.data()[i * d..(i + 1) * d]);
                yb.push(train.ys[i]);
            }
            let hard = one_hot_rows(&yb, classes)?;
            let mut g = Graph::new();
            let x = g.leaf(Tensor::from_raw(vec![chunk.len(), d], xb));
            let bound = net.bind(&mut g);
            let logits = bound.forward(&mut g, x)?;
            let loss = ce_loss(&mut g, logits, &hard)?;
            g.backward(loss)?;
            let grads = bound.collect_grads(&g);
            sgd.step(&mut net, &grads)?;
        }
    }

    let report = TargetReport {
        train_accuracy: accuracy(&net, train)?,
        test_accuracy: accuracy(&net, test)?,
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{make_dataset, DataSource, DatasetSpec};

    fn blob_spec() -> DatasetSpec {
        let mut spec = DatasetSpec::new(DataSource::Blobs);
        spec.noise = 0.02;
        spec.n_train = 800;
        spec.n_test = 400;
        spec
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let (train, test, _) = make_dataset(&blob_spec(), 4).unwrap();
        let mut tspec = TargetSpec::default();
        tspec.epochs = 30;
        let (_, report) = train_target(&train, &test, 4, &tspec, 4, "target").unwrap();
        assert!(report.test_accuracy >= 0.99, "got {}", report.test_accuracy);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (train, test, _) = make_dataset(&blob_spec(), 6).unwrap();
        let mut tspec = TargetSpec::default();
        tspec.epochs = 5;
        let (n1, r1) = train_target(&train, &test, 4, &tspec, 6, "target").unwrap();
        let (n2, r2) = train_target(&train, &test, 4, &tspec, 6, "target").unwrap();
        assert_eq!(n1.params_flat(), n2.params_flat());
        assert_eq!(r1.test_accuracy, r2.test_accuracy);

        let (n3, _) = train_target(&train, &test, 4, &tspec, 6, "data_proxy").unwrap();
        assert_ne!(n1.params_flat(), n3.params_flat());
    }

    #[test]
    fn reported_accuracy_matches_a_recount() {
        let (train, test, _) = make_dataset(&blob_spec(), 8).unwrap();
        let mut tspec = TargetSpec::default();
        tspec.epochs = 3;
        let (net, report) = train_target(&train, &test, 4, &tspec, 8, "target").unwrap();
        let pred = net.infer(&test.xs).unwrap().argmax_rows();
        let hits = pred.iter().zip(&test.ys).filter(|(p, y)| p == y).count();
        assert_eq!(report.test_accuracy, hits as f64 / test.len() as f64);
    }

    #[test]
    fn labels_beyond_class_count_are_rejected() {
        let (mut train, test, _) = make_dataset(&blob_spec(), 9).unwrap();
        train.ys[0] = 7;
        let err = train_target(&train, &test, 4, &TargetSpec::default(), 9, "target");
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
