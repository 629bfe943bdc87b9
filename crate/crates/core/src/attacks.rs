//! Adversarial attacks crafted white-box on a proxy network and evaluated
//! against the black-box target: FGSM, BIM, and PGD, targeted or not.

use rand::Rng;

use crate::domain::DataDomain;
use crate::error::{Error, Result};
use crate::losses::{ce_sum, one_hot_rows};
use crate::ndgrad::{Graph, Tensor};
use crate::nets::Mlp;
use crate::oracle::{Oracle, Phase};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "fgsm" => Some(AttackKind::Fgsm),
            "bim" => Some(AttackKind::Bim),
            "pgd" => Some(AttackKind::Pgd),
            _ => None,
        }
    }
}

/// Attack parameters. `epsilon` is the ℓ∞ budget in data units; iterative
/// kinds walk `steps` steps of `step_size`, projecting after each one.
#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub targeted: bool,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        AttackConfig {
            kind,
            epsilon,
            steps: 10,
            step_size: epsilon / 4.0,
            targeted: false,
            random_start: kind == AttackKind::Pgd,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be finite and >= 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.kind != AttackKind::Fgsm && self.epsilon > 0.0 && !(self.step_size > 0.0) {
            return Err(Error::Config(
                "iterative attacks need step_size > 0".into(),
            ));
        }
        Ok(())
    }
}

/// How one attack configuration fared against the target.
#[derive(Clone, Debug)]
pub struct FoolingReport {
    pub kind: AttackKind,
    pub targeted: bool,
    pub epsilon: f64,
    pub n_total: usize,
    /// Untargeted: samples the target originally classified correctly.
    /// Targeted: every sample (the drawn class always differs from the
    /// original prediction).
    pub n_evaluated: usize,
    pub n_success: usize,
    pub success_rate: f64,
    /// The per-sample attack classes of a targeted run.
    pub targets: Option<Vec<usize>>,
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ∇_x of the summed cross-entropy of the proxy's logits against the labels.
fn ce_input_grad(proxy: &Mlp, x: &Tensor, y: &[usize]) -> Result<Tensor> {
    let hard = one_hot_rows(y, proxy.output_dim())?;
    let mut g = Graph::new();
    let xl = g.leaf(x.clone());
    let pb = proxy.bind(&mut g);
    let logits = pb.forward(&mut g, xl)?;
    let loss = ce_sum(&mut g, logits, &hard)?;
    g.backward(loss)?;
    Ok(g.grad(xl).unwrap().clone())
}

// Per-entry projection onto the ε-ball around x0 intersected with the
// domain box. Both constraints are per-coordinate intervals, so clamping
// one after the other lands in the intersection.
fn project(x: &mut Vec<f64>, x0: &Tensor, epsilon: f64, domain: &DataDomain) {
    let d = domain.dim();
    for (i, v) in x.iter_mut().enumerate() {
        let center = x0.data()[i];
        *v = v
            .clamp(center - epsilon, center + epsilon)
            .clamp(domain.lo()[i % d], domain.hi()[i % d]);
    }
}

#[allow(clippy::too_many_arguments)]
fn attack_core(
    proxy: &Mlp,
    x0: &Tensor,
    y: &[usize],
    domain: &DataDomain,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    targeted: bool,
    random_start: bool,
    seed: u64,
) -> Result<Tensor> {
    if x0.shape().len() != 2 || x0.cols() != proxy.input_dim() {
        return Err(Error::Dimension(format!(
            "attack batch shape {:?} vs proxy input width {}",
            x0.shape(),
            proxy.input_dim()
        )));
    }
    if x0.rows() != y.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} samples",
            y.len(),
            x0.rows()
        )));
    }
    if !domain.contains(x0, 1e-9) {
        return Err(Error::Contract(
            "attack inputs must start inside the data domain".into(),
        ));
    }
    // Ascend the loss at the true class, or descend it at the attack class.
    let dir = if targeted { -1.0 } else { 1.0 };
    let mut x = x0.data().to_vec();
    if random_start && epsilon > 0.0 {
        let mut rng = substream(seed, "attacks");
        for v in x.iter_mut() {
            *v += rng.gen_range(-epsilon..epsilon);
        }
        project(&mut x, x0, epsilon, domain);
    }
    for _ in 0..steps {
        let cur = Tensor::from_raw(x0.shape().to_vec(), x.clone());
        let g = ce_input_grad(proxy, &cur, y)?;
        for (v, gv) in x.iter_mut().zip(g.data()) {
            *v += dir * step_size * sign0(*gv);
        }
        project(&mut x, x0, epsilon, domain);
    }
    Ok(Tensor::from_raw(x0.shape().to_vec(), x))
}

/// One signed-gradient step of size ε.
pub fn fgsm(
    proxy: &Mlp,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    domain: &DataDomain,
) -> Result<Tensor> {
    cfg.validate()?;
    attack_core(
        proxy,
        x,
        y,
        domain,
        cfg.epsilon,
        1,
        cfg.epsilon,
        cfg.targeted,
        false,
        cfg.seed,
    )
}

/// Iterated FGSM with re-projection after every step; no random start.
pub fn bim(
    proxy: &Mlp,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    domain: &DataDomain,
) -> Result<Tensor> {
    cfg.validate()?;
    attack_core(
        proxy,
        x,
        y,
        domain,
        cfg.epsilon,
        cfg.steps,
        cfg.step_size,
        cfg.targeted,
        false,
        cfg.seed,
    )
}

/// BIM plus an optional uniform random start inside the ε-ball.
pub fn pgd(
    proxy: &Mlp,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    domain: &DataDomain,
) -> Result<Tensor> {
    cfg.validate()?;
    attack_core(
        proxy,
        x,
        y,
        domain,
        cfg.epsilon,
        cfg.steps,
        cfg.step_size,
        cfg.targeted,
        cfg.random_start,
        cfg.seed,
    )
}

/// Dispatch on the configured attack kind.
pub fn run_attack(
    proxy: &Mlp,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    domain: &DataDomain,
) -> Result<Tensor> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(proxy, x, y, cfg, domain),
        AttackKind::Bim => bim(proxy, x, y, cfg, domain),
        AttackKind::Pgd => pgd(proxy, x, y, cfg, domain),
    }
}

/// Craft adversarial samples on the proxy and measure how often they fool
/// the black-box target. The proxy may be an extracted student, a network
/// trained on the target's own data, or the target itself (the white-box
/// ceiling). Oracle accounting is evaluation-only.
pub fn transfer_eval(
    oracle: &mut Oracle,
    proxy: &Mlp,
    cfg: &AttackConfig,
    xs: &Tensor,
    labels: &[usize],
    domain: &DataDomain,
) -> Result<FoolingReport> {
    cfg.validate()?;
    if xs.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} samples",
            labels.len(),
            xs.rows()
        )));
    }
    let c = oracle.classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!(
            "label {bad} outside the target's {c} classes"
        )));
    }
    let orig = oracle.query_class_ids(xs, Phase::EvalExcluded)?;
    let (y_attack, targets) = if cfg.targeted {
        let mut rng = substream(cfg.seed, "attack_targets");
        let t: Vec<usize> = orig
            .iter()
            .map(|&o| {
                let mut pick = rng.gen_range(0..c - 1);
                if pick >= o {
                    pick += 1;
                }
                pick
            })
            .collect();
        (t.clone(), Some(t))
    } else {
        (labels.to_vec(), None)
    };
    let adv = run_attack(proxy, xs, &y_attack, cfg, domain)?;
    for (a, b) in adv.data().iter().zip(xs.data()) {
        if (a - b).abs() > cfg.epsilon + 1e-12 {
            return Err(Error::Contract(format!(
                "attack left the ε-ball: moved {} against budget {}",
                (a - b).abs(),
                cfg.epsilon
            )));
        }
    }
    if !domain.contains(&adv, 1e-12) {
        return Err(Error::Contract("attack left the data domain".into()));
    }
    let adv_pred = oracle.query_class_ids(&adv, Phase::EvalExcluded)?;
    let mut n_evaluated = 0;
    let mut n_success = 0;
    for i in 0..xs.rows() {
        if cfg.targeted {
            n_evaluated += 1;
            if adv_pred[i] == y_attack[i] {
                n_success += 1;
            }
        } else if orig[i] == labels[i] {
            n_evaluated += 1;
            if adv_pred[i] != labels[i] {
                n_success += 1;
            }
        }
    }
    if n_evaluated == 0 {
        return Err(Error::Contract(
            "no eligible samples: the target got every original sample wrong".into(),
        ));
    }
    Ok(FoolingReport {
        kind: cfg.kind,
        targeted: cfg.targeted,
        epsilon: cfg.epsilon,
        n_total: xs.rows(),
        n_evaluated,
        n_success,
        success_rate: n_success as f64 / n_evaluated as f64,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, OutputHead};
    use crate::oracle::LabelMode;

    fn linear_proxy(seed: u64, d: usize, c: usize) -> Mlp {
        let mut rng = substream(seed, "lin");
        Mlp::new(&[d, c], Activation::Relu, OutputHead::Logits, &mut rng).unwrap()
    }

    fn small_net(seed: u64, d: usize, c: usize) -> Mlp {
        let mut rng = substream(seed, "net");
        Mlp::new(&[d, 12, c], Activation::Tanh, OutputHead::Logits, &mut rng).unwrap()
    }

    fn interior_batch(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = substream(seed, "batch");
        Tensor::from_raw(
            vec![n, d],
            (0..n * d).map(|_| rng.gen_range(0.2..0.8)).collect(),
        )
    }

    #[test]
    fn zero_epsilon_returns_inputs_and_scores_zero() {
        let proxy = small_net(1, 3, 4);
        let dom = DataDomain::unit(3);
        let x = interior_batch(2, 8, 3);
        let y = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let cfg = AttackConfig::new(AttackKind::Fgsm, 0.0);
        let adv = fgsm(&proxy, &x, &y, &cfg, &dom).unwrap();
        assert_eq!(adv.data(), x.data());

        let mut oracle = Oracle::from_mlp(proxy.clone(), LabelMode::Soft, None).unwrap();
        let labels = proxy.infer(&x).unwrap().argmax_rows();
        let report = transfer_eval(&mut oracle, &proxy, &cfg, &x, &labels, &dom).unwrap();
        assert_eq!(report.n_evaluated, 8);
        assert_eq!(report.success_rate, 0.0);
    }

    #[test]
    fn outputs_respect_ball_and_domain() {
        let proxy = small_net(3, 4, 3);
        let dom = DataDomain::unit(4);
        let x = interior_batch(4, 10, 4);
        let y = vec![0; 10];
        for kind in [AttackKind::Bim, AttackKind::Pgd] {
            let mut cfg = AttackConfig::new(kind, 0.3);
            cfg.steps = 7;
            cfg.step_size = 0.09;
            let adv = run_attack(&proxy, &x, &y, &cfg, &dom).unwrap();
            let worst = adv
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst <= cfg.epsilon + 1e-12, "moved {worst}");
            assert!(dom.contains(&adv, 0.0));
        }
    }

    #[test]
    fn one_step_variants_coincide_with_fgsm() {
        let proxy = small_net(5, 3, 3);
        let dom = DataDomain::unit(3);
        let x = interior_batch(6, 6, 3);
        let y = vec![2, 0, 1, 2, 0, 1];
        let mut cfg = AttackConfig::new(AttackKind::Fgsm, 0.05);
        cfg.steps = 1;
        cfg.step_size = cfg.epsilon;
        cfg.random_start = false;
        let a = fgsm(&proxy, &x, &y, &cfg, &dom).unwrap();
        let b = bim(&proxy, &x, &y, &cfg, &dom).unwrap();
        let c = pgd(&proxy, &x, &y, &cfg, &dom).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn fgsm_takes_the_signed_gradient_step_on_a_linear_proxy() {
        let proxy = linear_proxy(7, 3, 4);
        let dom = DataDomain::unit(3);
        let x = interior_batch(8, 5, 3);
        let y = vec![1, 3, 0, 2, 1];
        let cfg = AttackConfig::new(AttackKind::Fgsm, 0.05);
        let adv = fgsm(&proxy, &x, &y, &cfg, &dom).unwrap();
        let g = ce_input_grad(&proxy, &x, &y).unwrap();
        for i in 0..x.numel() {
            let expect = x.data()[i] + cfg.epsilon * sign0(g.data()[i]);
            assert!((adv.data()[i] - expect).abs() < 1e-15);
        }

        // First-order exactness: on an affine model the loss increase tends
        // to ε·‖∇‖₁ as ε shrinks.
        let loss_at = |pts: &Tensor| -> f64 {
            let hard = one_hot_rows(&y, 4).unwrap();
            let mut graph = Graph::new();
            let xl = graph.leaf(pts.clone());
            let pb = proxy.bind(&mut graph);
            let logits = pb.forward(&mut graph, xl).unwrap();
            let loss = ce_sum(&mut graph, logits, &hard).unwrap();
            graph.value(loss).item()
        };
        let mut cfg_small = cfg.clone();
        cfg_small.epsilon = 1e-6;
        let adv_small = fgsm(&proxy, &x, &y, &cfg_small, &dom).unwrap();
        let increase = loss_at(&adv_small) - loss_at(&x);
        let l1: f64 = g.data().iter().map(|v| v.abs()).sum();
        let rel = (increase - cfg_small.epsilon * l1).abs() / (cfg_small.epsilon * l1);
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn bim_loss_never_decreases_on_a_linear_proxy() {
        let proxy = linear_proxy(9, 4, 3);
        let dom = DataDomain::unit(4);
        let x = interior_batch(10, 6, 4);
        let y = vec![0, 1, 2, 0, 1, 2];
        let loss_at = |pts: &Tensor| -> f64 {
            let hard = one_hot_rows(&y, 3).unwrap();
            let mut graph = Graph::new();
            let xl = graph.leaf(pts.clone());
            let pb = proxy.bind(&mut graph);
            let logits = pb.forward(&mut graph, xl).unwrap();
            let loss = ce_sum(&mut graph, logits, &hard).unwrap();
            graph.value(loss).item()
        };
        let mut prev = loss_at(&x);
        for steps in 1..=5 {
            let mut cfg = AttackConfig::new(AttackKind::Bim, 0.2);
            cfg.steps = steps;
            cfg.step_size = 0.04;
            let adv = bim(&proxy, &x, &y, &cfg, &dom).unwrap();
            let cur = loss_at(&adv);
            assert!(
                cur >= prev - 1e-12,
                "loss fell from {prev} to {cur} at step {steps}"
            );
            prev = cur;
        }
    }

    #[test]
    fn pgd_matches_or_beats_fgsm_white_box() {
        let proxy = small_net(11, 4, 3);
        let dom = DataDomain::unit(4);
        let x = interior_batch(12, 64, 4);
        let labels = proxy.infer(&x).unwrap().argmax_rows();
        let mut oracle = Oracle::from_mlp(proxy.clone(), LabelMode::Soft, None).unwrap();

        let fg = AttackConfig::new(AttackKind::Fgsm, 0.08);
        let fg_rep = transfer_eval(&mut oracle, &proxy, &fg, &x, &labels, &dom).unwrap();

        let mut pg = AttackConfig::new(AttackKind::Pgd, 0.08);
        pg.steps = 40;
        pg.step_size = 0.008;
        pg.random_start = false;
        let pg_rep = transfer_eval(&mut oracle, &proxy, &pg, &x, &labels, &dom).unwrap();
        assert!(
            pg_rep.success_rate >= fg_rep.success_rate,
            "pgd {} < fgsm {}",
            pg_rep.success_rate,
            fg_rep.success_rate
        );
        assert_eq!(oracle.ledger().total_samples, 0);
    }

    #[test]
    fn targeted_draws_avoid_originals_and_recount_matches() {
        let proxy = small_net(13, 3, 5);
        let target = small_net(14, 3, 5);
        let dom = DataDomain::unit(3);
        let x = interior_batch(15, 40, 3);
        let mut oracle = Oracle::from_mlp(target.clone(), LabelMode::Hard, None).unwrap();
        let labels = target.infer(&x).unwrap().argmax_rows();
        let mut cfg = AttackConfig::new(AttackKind::Pgd, 0.2);
        cfg.targeted = true;
        cfg.seed = 21;
        let report = transfer_eval(&mut oracle, &proxy, &cfg, &x, &labels, &dom).unwrap();
        let targets = report.targets.clone().unwrap();
        let orig = target.infer(&x).unwrap().argmax_rows();
        assert!(targets.iter().zip(&orig).all(|(t, o)| t != o));
        assert_eq!(report.n_evaluated, 40);

        let adv = run_attack(&proxy, &x, &targets, &cfg, &dom).unwrap();
        let adv_pred = target.infer(&adv).unwrap().argmax_rows();
        let manual = adv_pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
        assert_eq!(report.n_success, manual);

        let again = transfer_eval(&mut oracle, &proxy, &cfg, &x, &labels, &dom).unwrap();
        assert_eq!(again.targets.unwrap(), targets);
        assert_eq!(again.n_success, report.n_success);
    }

    #[test]
    fn fgsm_success_is_monotone_in_epsilon_on_a_binary_linear_model() {
        let model = linear_proxy(17, 3, 2);
        let dom = DataDomain::unit(3);
        let x = interior_batch(18, 50, 3);
        let labels = model.infer(&x).unwrap().argmax_rows();
        let mut oracle = Oracle::from_mlp(model.clone(), LabelMode::Soft, None).unwrap();
        let mut prev = 0.0;
        for eps in [0.0, 0.02, 0.05, 0.1, 0.2] {
            let cfg = AttackConfig::new(AttackKind::Fgsm, eps);
            let rep = transfer_eval(&mut oracle, &model, &cfg, &x, &labels, &dom).unwrap();
            assert!(
                rep.success_rate >= prev,
                "rate fell to {} at eps {eps}",
                rep.success_rate
            );
            prev = rep.success_rate;
        }
    }
}
