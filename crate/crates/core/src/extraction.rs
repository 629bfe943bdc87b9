//! Extraction loops: the dual-student min-max game, a forward-differences
//! baseline that buys input gradients with extra queries, the unknown-class
//! variant, and dual-student fine-tuning of an existing student.

use std::mem;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::domain::DataDomain;
use crate::error::{Error, Result};
use crate::evaluation::MetricsRow;
use crate::losses::{
    generator_loss_ds, loss_rows, one_hot_rows, student_loss, triangle_sides, LossKind,
};
use crate::ndgrad::{softmax_tensor, Graph, Tensor};
use crate::nets::{Activation, EmaState, Mlp, OutputHead, SgdState};
use crate::oracle::{LabelMode, Oracle, Phase, QueryLedger};
use crate::rng::{gauss, substream};

/// Slack allowed when asserting the disagreement lower bound on a batch.
const TRIANGLE_TOL: f64 = 1e-9;

/// Which extraction loop to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    DualStudents,
    DfmeFd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DualStudents => "dual_students",
            Method::DfmeFd => "dfme_fd",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "dual_students" => Some(Method::DualStudents),
            "dfme_fd" => Some(Method::DfmeFd),
            _ => None,
        }
    }
}

/// Everything one extraction run needs. `new` fills in the defaults for a
/// (method, label mode) pair; callers override fields directly.
#[derive(Clone, Debug)]
pub struct ExtractionConfig {
    pub method: Method,
    pub label_mode: LabelMode,
    /// Epoch count used when no query budget is set; with a budget the count
    /// is derived, see [`ExtractionConfig::resolved_epochs`].
    pub epochs: usize,
    pub generator_iters: usize,
    pub student_iters: usize,
    pub batch: usize,
    pub latent_dim: usize,
    pub lr_generator: f64,
    pub lr_student: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub student_loss: LossKind,
    pub generator_loss: LossKind,
    pub fd_directions: usize,
    pub fd_step: f64,
    pub query_budget: Option<u64>,
    pub seed: u64,
    pub unknown_classes: bool,
    pub max_classes: usize,
    pub student_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    pub margin: f64,
    /// Diagnostic switch: initialize S1 from the S2 stream and vice versa.
    /// The loop treats the students symmetrically, so this exactly swaps
    /// their trajectories.
    pub swap_student_init: bool,
}

impl ExtractionConfig {
    pub fn new(method: Method, label_mode: LabelMode) -> Self {
        ExtractionConfig {
            method,
            label_mode,
            epochs: 100,
            generator_iters: 1,
            student_iters: 5,
            batch: 256,
            latent_dim: 16,
            lr_generator: 1e-4,
            lr_student: match label_mode {
                LabelMode::Soft => 0.3,
                LabelMode::Hard => 0.05,
            },
            momentum: 0.9,
            weight_decay: 5e-4,
            ema_decay: 0.9,
            student_loss: match label_mode {
                LabelMode::Soft => LossKind::L1,
                LabelMode::Hard => LossKind::Ce,
            },
            generator_loss: LossKind::L1,
            fd_directions: 1,
            fd_step: 1e-3,
            query_budget: None,
            seed: 0,
            unknown_classes: false,
            max_classes: 32,
            student_hidden: vec![32, 32],
            generator_hidden: vec![64, 64],
            margin: 1.0,
            swap_student_init: false,
        }
    }

    /// Counted oracle samples per full epoch. Student steps pay one batch
    /// each; a forward-differences generator step pays two batches per
    /// probed direction.
    pub fn queries_per_epoch(&self) -> u64 {
        let b = self.batch as u64;
        let students = self.student_iters as u64 * b;
        match self.method {
            Method::DualStudents => students,
            Method::DfmeFd => {
                students + 2 * self.fd_directions as u64 * self.generator_iters as u64 * b
            }
        }
    }

    /// Epochs the run will attempt: with a budget, the smallest count whose
    /// full-epoch cost covers it (the last epoch may truncate); otherwise
    /// `epochs` as given.
    pub fn resolved_epochs(&self) -> usize {
        match self.query_budget {
            Some(b) => {
                let per = self.queries_per_epoch();
                ((b + per - 1) / per) as usize
            }
            None => self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.generator_iters, "generator_iters"),
            (self.student_iters, "student_iters"),
            (self.batch, "batch"),
            (self.latent_dim, "latent_dim"),
            (self.fd_directions, "fd_directions"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (v, name) in [
            (self.lr_generator, "lr_generator"),
            (self.lr_student, "lr_student"),
            (self.weight_decay, "weight_decay"),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        for (v, name) in [(self.momentum, "momentum"), (self.ema_decay, "ema_decay")] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.fd_step > 0.0) || !self.fd_step.is_finite() {
            return Err(Error::Config("fd_step must be finite and > 0".into()));
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config("margin must be finite and > 0".into()));
        }
        if self.method == Method::DualStudents && self.generator_loss != LossKind::L1 {
            return Err(Error::Config(
                "dual_students drives the generator with the l1 disagreement loss".into(),
            ));
        }
        let allowed: &[LossKind] = match self.label_mode {
            LabelMode::Soft => &[LossKind::L1, LossKind::Kl],
            LabelMode::Hard => &[LossKind::Ce, LossKind::MultiMargin],
        };
        if !allowed.contains(&self.student_loss) {
            return Err(Error::Config(format!(
                "student_loss {} does not fit {} labels",
                self.student_loss.name(),
                self.label_mode.name()
            )));
        }
        if self.label_mode == LabelMode::Soft
            && !matches!(self.generator_loss, LossKind::L1 | LossKind::Kl)
        {
            return Err(Error::Config(format!(
                "generator_loss {} needs one-hot replies",
                self.generator_loss.name()
            )));
        }
        if self.unknown_classes {
            if self.method != Method::DualStudents {
                return Err(Error::Config(
                    "unknown_classes runs use the dual_students method".into(),
                ));
            }
            if self.label_mode != LabelMode::Hard {
                return Err(Error::Config(
                    "unknown_classes runs use hard labels".into(),
                ));
            }
            if self.max_classes < 2 {
                return Err(Error::Config("max_classes must be at least 2".into()));
            }
        }
        Ok(())
    }
}

/// Insertion-ordered map from raw target class ids to dense student outputs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassMap {
    seen: Vec<usize>,
}

impl ClassMap {
    pub fn new() -> Self {
        ClassMap { seen: Vec::new() }
    }

    /// Dense index of a raw id, appending it on first sight.
    pub fn observe(&mut self, raw: usize) -> usize {
        match self.seen.iter().position(|&r| r == raw) {
            Some(i) => i,
            None => {
                self.seen.push(raw);
                self.seen.len() - 1
            }
        }
    }

    pub fn dense_of(&self, raw: usize) -> Option<usize> {
        self.seen.iter().position(|&r| r == raw)
    }

    pub fn raw_of(&self, dense: usize) -> Option<usize> {
        self.seen.get(dense).copied()
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    /// Raw ids in first-occurrence order.
    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    /// Output width the students carry: at least two, otherwise one per
    /// discovered class.
    pub fn head_width(&self) -> usize {
        self.seen.len().max(2)
    }
}

/// State handed to the evaluation hook: students with their moving averages
/// applied, plus the live generator.
pub struct EvalSnapshot<'a> {
    pub epoch: usize,
    pub queries: u64,
    pub s1: &'a Mlp,
    pub s2: Option<&'a Mlp>,
    pub generator: &'a Mlp,
    pub class_map: Option<&'a ClassMap>,
}

/// Callback invoked at every evaluation interval. Its oracle queries should
/// use [`Phase::EvalExcluded`] so the budget stays untouched.
pub type EvalHook<'a> = dyn FnMut(&EvalSnapshot, &mut Oracle) -> Result<MetricsRow> + 'a;

/// Outcome of one extraction run. `s2` is present for dual-student runs and
/// absent for the single-student baseline.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub s1: Mlp,
    pub s2: Option<Mlp>,
    pub generator: Mlp,
    pub ledger: QueryLedger,
    pub metrics: Vec<MetricsRow>,
    pub truncated: bool,
    pub class_map: Option<ClassMap>,
    /// Greatest amount by which the batch disagreement exceeded its upper
    /// bound; stays at 0 when the bound holds everywhere.
    pub triangle_max_excess: f64,
    /// Batches the bound was checked on.
    pub triangle_batches: u64,
}

/// Zeroth-order estimate of ∇_x loss(student(x), target(x)), one row per
/// sample. Each direction draws a per-sample unit vector u, probes the loss
/// at x ± step·u through the oracle, and adds the centered difference times
/// u; one direction costs two oracle batches under `phase`.
pub fn fd_input_gradient(
    oracle: &mut Oracle,
    student: &Mlp,
    x: &Tensor,
    loss: LossKind,
    margin: f64,
    step: f64,
    directions: usize,
    rng: &mut ChaCha8Rng,
    phase: Phase,
) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != student.input_dim() {
        return Err(Error::Dimension(format!(
            "fd_input_gradient: batch shape {:?} vs input width {}",
            x.shape(),
            student.input_dim()
        )));
    }
    if !(step > 0.0) || directions == 0 {
        return Err(Error::Config(
            "fd_input_gradient needs step > 0 and at least one direction".into(),
        ));
    }
    let (b, d) = (x.rows(), x.cols());
    let mut est = vec![0.0; b * d];
    for _ in 0..directions {
        let mut u = vec![0.0; b * d];
        for i in 0..b {
            let row = &mut u[i * d..(i + 1) * d];
            for v in row.iter_mut() {
                *v = gauss(rng);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            } else {
                row[0] = 1.0;
            }
        }
        let shift = |sign: f64| {
            Tensor::from_raw(
                vec![b, d],
                x.data()
                    .iter()
                    .zip(&u)
                    .map(|(&xv, &uv)| xv + sign * step * uv)
                    .collect(),
            )
        };
        let (xp, xm) = (shift(1.0), shift(-1.0));
        let rp = oracle.query(&xp, phase)?;
        let rm = oracle.query(&xm, phase)?;
        let lp = loss_rows(loss, &student.infer(&xp)?, &rp, margin)?;
        let lm = loss_rows(loss, &student.infer(&xm)?, &rm, margin)?;
        for i in 0..b {
            let scale = (lp[i] - lm[i]) / (2.0 * step);
            for j in 0..d {
                est[i * d + j] += scale * u[i * d + j];
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, d], est))
}

fn build_student(cfg: &ExtractionConfig, d_in: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Mlp> {
    let mut dims = vec![d_in];
    dims.extend_from_slice(&cfg.student_hidden);
    dims.push(width);
    Mlp::new(&dims, Activation::Relu, OutputHead::Logits, rng)
}

fn build_generator(cfg: &ExtractionConfig, domain: &DataDomain, rng: &mut ChaCha8Rng) -> Result<Mlp> {
    let mut dims = vec![cfg.latent_dim];
    dims.extend_from_slice(&cfg.generator_hidden);
    dims.push(domain.dim());
    Mlp::new(
        &dims,
        Activation::Relu,
        OutputHead::Bounded {
            lo: domain.lo().to_vec(),
            hi: domain.hi().to_vec(),
        },
        rng,
    )
}

/// Run the dual-student game: the generator maximizes student disagreement
/// for free, the students chase the oracle's replies.
pub fn train_dual_students(
    cfg: &ExtractionConfig,
    oracle: &mut Oracle,
    domain: &DataDomain,
    hook: Option<&mut EvalHook>,
) -> Result<RunResult> {
    if cfg.method != Method::DualStudents {
        return Err(Error::Config("config method is not dual_students".into()));
    }
    if cfg.unknown_classes {
        return Err(Error::Config(
            "unknown_classes configs go through train_unknown_classes".into(),
        ));
    }
    cfg.validate()?;
    let (mut r1, mut r2) = student_init_streams(cfg);
    let s1 = build_student(cfg, domain.dim(), oracle.classes(), &mut r1)?;
    let s2 = build_student(cfg, domain.dim(), oracle.classes(), &mut r2)?;
    let gen = build_generator(cfg, domain, &mut substream(cfg.seed, "init_g"))?;
    Trainer::new(cfg, oracle, s1, Some(s2), gen, None).run(hook)
}

/// Run the forward-differences baseline: one student, generator steps paid
/// for with oracle queries.
pub fn train_dfme_fd(
    cfg: &ExtractionConfig,
    oracle: &mut Oracle,
    domain: &DataDomain,
    hook: Option<&mut EvalHook>,
) -> Result<RunResult> {
    if cfg.method != Method::DfmeFd {
        return Err(Error::Config("config method is not dfme_fd".into()));
    }
    if cfg.unknown_classes {
        return Err(Error::Config(
            "unknown_classes runs use the dual_students method".into(),
        ));
    }
    cfg.validate()?;
    let (mut r1, _) = student_init_streams(cfg);
    let s1 = build_student(cfg, domain.dim(), oracle.classes(), &mut r1)?;
    let gen = build_generator(cfg, domain, &mut substream(cfg.seed, "init_g"))?;
    Trainer::new(cfg, oracle, s1, None, gen, None).run(hook)
}

/// Dual-student run against a target whose class count is unknown upfront:
/// students start two outputs wide and grow as new raw ids appear.
pub fn train_unknown_classes(
    cfg: &ExtractionConfig,
    oracle: &mut Oracle,
    domain: &DataDomain,
    hook: Option<&mut EvalHook>,
) -> Result<RunResult> {
    if !cfg.unknown_classes {
        return Err(Error::Config("config does not set unknown_classes".into()));
    }
    cfg.validate()?;
    let map = ClassMap::new();
    let width = map.head_width();
    let (mut r1, mut r2) = student_init_streams(cfg);
    let s1 = build_student(cfg, domain.dim(), width, &mut r1)?;
    let s2 = build_student(cfg, domain.dim(), width, &mut r2)?;
    let gen = build_generator(cfg, domain, &mut substream(cfg.seed, "init_g"))?;
    Trainer::new(cfg, oracle, s1, Some(s2), gen, Some(map)).run(hook)
}

/// Resume from a trained student: S1 keeps the given weights, S2 and the
/// generator start fresh, and the usual dual-student game runs for whatever
/// (small) budget the config carries. A zero budget returns S1 untouched.
pub fn finetune_with_ds(
    pretrained: &Mlp,
    cfg: &ExtractionConfig,
    oracle: &mut Oracle,
    domain: &DataDomain,
    hook: Option<&mut EvalHook>,
) -> Result<RunResult> {
    if cfg.method != Method::DualStudents || cfg.unknown_classes {
        return Err(Error::Config(
            "fine-tuning runs the plain dual_students method".into(),
        ));
    }
    cfg.validate()?;
    if pretrained.output_dim() != oracle.classes() {
        return Err(Error::Contract(format!(
            "pretrained student has {} outputs for {} classes",
            pretrained.output_dim(),
            oracle.classes()
        )));
    }
    if pretrained.input_dim() != domain.dim() {
        return Err(Error::Dimension(format!(
            "pretrained student reads {} inputs, domain has {}",
            pretrained.input_dim(),
            domain.dim()
        )));
    }
    let s2 = build_student(
        cfg,
        domain.dim(),
        oracle.classes(),
        &mut substream(cfg.seed, "init_s2"),
    )?;
    let gen = build_generator(cfg, domain, &mut substream(cfg.seed, "init_g"))?;
    Trainer::new(cfg, oracle, pretrained.clone(), Some(s2), gen, None).run(hook)
}

/// Average of the two students' softmax outputs.
pub fn ensemble_predict(s1: &Mlp, s2: &Mlp, x: &Tensor) -> Result<Tensor> {
    if s1.output_dim() != s2.output_dim() {
        return Err(Error::Contract(format!(
            "ensemble over head widths {} and {}",
            s1.output_dim(),
            s2.output_dim()
        )));
    }
    let p1 = softmax_tensor(&s1.infer(x)?);
    let p2 = softmax_tensor(&s2.infer(x)?);
    let data = p1
        .data()
        .iter()
        .zip(p2.data())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    Ok(Tensor::from_raw(p1.shape().to_vec(), data))
}

/// The student that agrees with the target more often on the probe batch;
/// ties keep the first.
pub fn select_proxy<'a>(
    s1: &'a Mlp,
    s2: &'a Mlp,
    oracle: &mut Oracle,
    probe: &Tensor,
) -> Result<&'a Mlp> {
    let a1 = oracle.eval_agreement(s1, probe)?;
    let a2 = oracle.eval_agreement(s2, probe)?;
    Ok(if a2 > a1 { s2 } else { s1 })
}

fn student_init_streams(cfg: &ExtractionConfig) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut r1 = substream(cfg.seed, "init_s1");
    let mut r2 = substream(cfg.seed, "init_s2");
    if cfg.swap_student_init {
        mem::swap(&mut r1, &mut r2);
    }
    (r1, r2)
}

struct Student {
    net: Mlp,
    sgd: SgdState,
    ema: EmaState,
}

impl Student {
    fn new(net: Mlp, cfg: &ExtractionConfig) -> Self {
        let sgd = SgdState::new(&net, cfg.lr_student, cfg.momentum, cfg.weight_decay);
        let ema = EmaState::new(&net, cfg.ema_decay);
        Student { net, sgd, ema }
    }
}

struct Trainer<'a> {
    cfg: &'a ExtractionConfig,
    oracle: &'a mut Oracle,
    gen: Mlp,
    sgd_g: SgdState,
    s1: Student,
    s2: Option<Student>,
    latents: ChaCha8Rng,
    fd_rng: ChaCha8Rng,
    growth_rng: ChaCha8Rng,
    class_map: Option<ClassMap>,
    triangle_max_excess: f64,
    triangle_batches: u64,
    truncated: bool,
}

impl<'a> Trainer<'a> {
    fn new(
        cfg: &'a ExtractionConfig,
        oracle: &'a mut Oracle,
        s1: Mlp,
        s2: Option<Mlp>,
        gen: Mlp,
        class_map: Option<ClassMap>,
    ) -> Self {
        let sgd_g = SgdState::new(&gen, cfg.lr_generator, cfg.momentum, cfg.weight_decay);
        Trainer {
            cfg,
            oracle,
            sgd_g,
            s1: Student::new(s1, cfg),
            s2: s2.map(|s| Student::new(s, cfg)),
            gen,
            latents: substream(cfg.seed, "latents"),
            fd_rng: substream(cfg.seed, "fd_dirs"),
            growth_rng: substream(cfg.seed, "head_growth"),
            class_map,
            triangle_max_excess: 0.0,
            triangle_batches: 0,
            truncated: false,
        }
    }

    fn sample_latents(&mut self) -> Tensor {
        let (b, d) = (self.cfg.batch, self.cfg.latent_dim);
        Tensor::from_raw(
            vec![b, d],
            (0..b * d).map(|_| self.latents.gen_range(0.0..1.0)).collect(),
        )
    }

    // Push the generator toward points where the students disagree. Costs no
    // oracle queries.
    fn gen_step_ds(&mut self) -> Result<()> {
        let z = self.sample_latents();
        let mut g = Graph::new();
        let zl = g.leaf(z);
        let gb = self.gen.bind(&mut g);
        let x = gb.forward(&mut g, zl)?;
        let b1 = self.s1.net.bind(&mut g);
        let l1 = b1.forward(&mut g, x)?;
        let p1 = g.softmax(l1)?;
        let s2 = self.s2.as_ref().expect("dual-student generator step needs two students");
        let b2 = s2.net.bind(&mut g);
        let l2 = b2.forward(&mut g, x)?;
        let p2 = g.softmax(l2)?;
        let loss = generator_loss_ds(&mut g, p1, p2)?;
        g.backward(loss)?;
        let grads = gb.collect_grads(&g);
        self.sgd_g.step(&mut self.gen, &grads)
    }

    // Ascend the estimated loss between student and target: the estimate
    // enters as a constant, so minimizing −Σ x·ĝ carries it through the
    // generator by reverse mode.
    fn gen_step_fd(&mut self) -> Result<()> {
        let z = self.sample_latents();
        let mut g = Graph::new();
        let zl = g.leaf(z);
        let gb = self.gen.bind(&mut g);
        let x = gb.forward(&mut g, zl)?;
        let x_val = g.value(x).clone();
        let ghat = fd_input_gradient(
            self.oracle,
            &self.s1.net,
            &x_val,
            self.cfg.generator_loss,
            self.cfg.margin,
            self.cfg.fd_step,
            self.cfg.fd_directions,
            &mut self.fd_rng,
            Phase::GeneratorGradEst,
        )?;
        let neg = Tensor::from_raw(
            ghat.shape().to_vec(),
            ghat.data().iter().map(|v| -v).collect(),
        );
        let nl = g.leaf(neg);
        let prod = g.mul(x, nl)?;
        let loss = g.sum(prod);
        g.backward(loss)?;
        let grads = gb.collect_grads(&g);
        self.sgd_g.step(&mut self.gen, &grads)
    }

    // Grow student heads to cover newly observed raw ids, then return the
    // dense one-hot replies.
    fn map_hard_replies(&mut self, raw: &[usize]) -> Result<Tensor> {
        let map = self.class_map.as_mut().expect("reply mapping needs a class map");
        let old_width = self.s1.net.output_dim();
        let dense: Vec<usize> = raw.iter().map(|&r| map.observe(r)).collect();
        if map.len() > self.cfg.max_classes {
            return Err(Error::Config(format!(
                "target produced {} classes, above the max_classes cap {}",
                map.len(),
                self.cfg.max_classes
            )));
        }
        let new_width = map.head_width();
        if new_width > old_width {
            for student in [Some(&mut self.s1), self.s2.as_mut()].into_iter().flatten() {
                student.net.grow_last_layer(new_width, &mut self.growth_rng)?;
                let dims = student.net.layer_dims();
                let fan_in = dims[dims.len() - 2];
                student.sgd.grow_last_layer(fan_in, old_width, new_width);
                student.ema.grow_last_layer(&student.net, old_width);
            }
        }
        one_hot_rows(&dense, new_width)
    }

    // One oracle batch teaching every student present.
    fn student_step(&mut self) -> Result<()> {
        let z = self.sample_latents();
        let x = self.gen.infer(&z)?;
        let reply = if self.class_map.is_some() {
            let raw = self.oracle.query_class_ids(&x, Phase::StudentTrain)?;
            self.map_hard_replies(&raw)?
        } else {
            self.oracle.query(&x, Phase::StudentTrain)?
        };
        let kind = self.cfg.student_loss;
        let margin = self.cfg.margin;
        let train_one = |student: &mut Student| -> Result<Tensor> {
            let mut g = Graph::new();
            let xl = g.leaf(x.clone());
            let nb = student.net.bind(&mut g);
            let logits = nb.forward(&mut g, xl)?;
            let probs = g.softmax(logits)?;
            let before = g.value(probs).clone();
            let loss = student_loss(&mut g, kind, logits, probs, &reply, margin)?;
            g.backward(loss)?;
            let grads = nb.collect_grads(&g);
            student.sgd.step(&mut student.net, &grads)?;
            student.ema.update(&student.net);
            Ok(before)
        };
        let p1 = train_one(&mut self.s1)?;
        let p2 = match self.s2.as_mut() {
            Some(s) => Some(train_one(s)?),
            None => None,
        };
        if let Some(p2) = p2 {
            if self.cfg.label_mode == LabelMode::Soft {
                let (lhs, rhs) = triangle_sides(&p1, &p2, &reply)?;
                let excess = lhs - rhs;
                self.triangle_batches += 1;
                if excess > self.triangle_max_excess {
                    self.triangle_max_excess = excess;
                }
                if excess > TRIANGLE_TOL {
                    return Err(Error::Contract(format!(
                        "disagreement bound violated: lhs {lhs} exceeds rhs {rhs}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn emit(
        &mut self,
        epoch: usize,
        hook: &mut Option<&mut EvalHook>,
        metrics: &mut Vec<MetricsRow>,
    ) -> Result<()> {
        let Some(h) = hook.as_deref_mut() else {
            return Ok(());
        };
        let queries = self.oracle.ledger().total_samples;
        if metrics.last().map(|r| r.queries) == Some(queries) {
            return Ok(());
        }
        let s1 = self.s1.ema.apply(&self.s1.net);
        let s2 = self.s2.as_ref().map(|s| s.ema.apply(&s.net));
        let snap = EvalSnapshot {
            epoch,
            queries,
            s1: &s1,
            s2: s2.as_ref(),
            generator: &self.gen,
            class_map: self.class_map.as_ref(),
        };
        metrics.push(h(&snap, self.oracle)?);
        Ok(())
    }

    fn run(mut self, mut hook: Option<&mut EvalHook>) -> Result<RunResult> {
        let epochs = self.cfg.resolved_epochs();
        let per_epoch = self.cfg.queries_per_epoch();
        let planned = self.cfg.query_budget.unwrap_or(epochs as u64 * per_epoch);
        let interval = (planned / 20).max(1);
        let mut metrics = Vec::new();
        let mut next_mark = interval;
        let mut reached = 0;
        self.emit(0, &mut hook, &mut metrics)?;
        'outer: for epoch in 1..=epochs {
            reached = epoch;
            for _ in 0..self.cfg.generator_iters {
                match self.cfg.method {
                    Method::DualStudents => self.gen_step_ds()?,
                    Method::DfmeFd => {
                        let cost = 2
                            * self.cfg.fd_directions as u64
                            * self.cfg.batch as u64;
                        if !self.oracle.fits(cost) {
                            self.truncated = true;
                            break 'outer;
                        }
                        self.gen_step_fd()?;
                    }
                }
            }
            for _ in 0..self.cfg.student_iters {
                if !self.oracle.fits(self.cfg.batch as u64) {
                    self.truncated = true;
                    break 'outer;
                }
                self.student_step()?;
            }
            let total = self.oracle.ledger().total_samples;
            if total >= next_mark {
                self.emit(epoch, &mut hook, &mut metrics)?;
                while next_mark <= total {
                    next_mark += interval;
                }
            }
        }
        self.emit(reached, &mut hook, &mut metrics)?;
        Ok(RunResult {
            s1: self.s1.ema.apply(&self.s1.net),
            s2: self.s2.as_ref().map(|s| s.ema.apply(&s.net)),
            generator: self.gen,
            ledger: self.oracle.ledger().clone(),
            metrics,
            truncated: self.truncated,
            class_map: self.class_map,
            triangle_max_excess: self.triangle_max_excess,
            triangle_batches: self.triangle_batches,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::LabelMode;

    fn blob_target(seed: u64, d_in: usize, classes: usize) -> Mlp {
        let mut rng = substream(seed, "init_target");
        Mlp::new(
            &[d_in, 16, classes],
            Activation::Tanh,
            OutputHead::Logits,
            &mut rng,
        )
        .unwrap()
    }

    fn oracle_for(seed: u64, d_in: usize, classes: usize, mode: LabelMode, budget: Option<u64>) -> Oracle {
        Oracle::from_mlp(blob_target(seed, d_in, classes), mode, budget).unwrap()
    }

    fn small_cfg(method: Method, mode: LabelMode) -> ExtractionConfig {
        let mut cfg = ExtractionConfig::new(method, mode);
        cfg.batch = 32;
        cfg.latent_dim = 4;
        cfg.student_hidden = vec![16];
        cfg.generator_hidden = vec![16];
        cfg.epochs = 2;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn ds_query_arithmetic_is_exact() {
        let mut oracle = oracle_for(3, 4, 3, LabelMode::Soft, None);
        let cfg = small_cfg(Method::DualStudents, LabelMode::Soft);
        let dom = DataDomain::unit(4);
        let res = train_dual_students(&cfg, &mut oracle, &dom, None).unwrap();
        let expect = (cfg.epochs * cfg.student_iters * cfg.batch) as u64;
        assert_eq!(res.ledger.total_samples, expect);
        assert_eq!(res.ledger.phase_count(Phase::StudentTrain), expect);
        assert_eq!(res.ledger.phase_count(Phase::GeneratorGradEst), 0);
        assert!(!res.truncated);
        assert!(res.s2.is_some());
    }

    #[test]
    fn fd_query_arithmetic_is_exact() {
        let mut oracle = oracle_for(3, 4, 3, LabelMode::Soft, None);
        let cfg = small_cfg(Method::DfmeFd, LabelMode::Soft);
        let dom = DataDomain::unit(4);
        let res = train_dfme_fd(&cfg, &mut oracle, &dom, None).unwrap();
        let per_epoch = (cfg.student_iters + 2 * cfg.fd_directions * cfg.generator_iters)
            * cfg.batch;
        assert_eq!(res.ledger.total_samples, (cfg.epochs * per_epoch) as u64);
        assert_eq!(
            res.ledger.phase_count(Phase::GeneratorGradEst),
            (cfg.epochs * 2 * cfg.fd_directions * cfg.generator_iters * cfg.batch) as u64
        );
        assert!(res.s2.is_none());
    }

    #[test]
    fn zero_learning_rates_leave_parameters_at_init() {
        let dom = DataDomain::unit(4);
        let mut cfg = small_cfg(Method::DualStudents, LabelMode::Soft);
        cfg.lr_student = 0.0;
        cfg.lr_generator = 0.0;
        // Zero decay makes the moving average equal the raw parameters, so
        // the comparison below is exact rather than within an ulp.
        cfg.ema_decay = 0.0;

        let mut oracle = oracle_for(3, 4, 3, LabelMode::Soft, None);
        let trained = train_dual_students(&cfg, &mut oracle, &dom, None).unwrap();

        let mut cfg0 = cfg.clone();
        cfg0.query_budget = Some(0);
        let mut oracle0 = oracle_for(3, 4, 3, LabelMode::Soft, None);
        let untouched = train_dual_students(&cfg0, &mut oracle0, &dom, None).unwrap();

        assert_eq!(trained.s1.params_flat(), untouched.s1.params_flat());
        assert_eq!(
            trained.s2.unwrap().params_flat(),
            untouched.s2.unwrap().params_flat()
        );
        assert_eq!(trained.generator.params_flat(), untouched.generator.params_flat());
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let dom = DataDomain::unit(4);
        let cfg = small_cfg(Method::DfmeFd, LabelMode::Soft);
        let mut o1 = oracle_for(3, 4, 3, LabelMode::Soft, None);
        let mut o2 = oracle_for(3, 4, 3, LabelMode::Soft, None);
        let a = train_dfme_fd(&cfg, &mut o1, &dom, None).unwrap();
        let b = train_dfme_fd(&cfg, &mut o2, &dom, None).unwrap();
        assert_eq!(a.s1.params_flat(), b.s1.params_flat());
        assert_eq!(a.generator.params_flat(), b.generator.params_flat());
        assert_eq!(a.ledger, b.ledger);
    }

    #[test]
    fn swapping_student_init_swaps_trajectories_exactly() {
        let dom = DataDomain::unit(4);
        let mut cfg = small_cfg(Method::DualStudents, LabelMode::Soft);
        let mut o1 = oracle_for(3, 4, 3, LabelMode::Soft, None);
        let plain = train_dual_students(&cfg, &mut o1, &dom, None).unwrap();
        cfg.swap_student_init = true;
        let mut o2 = oracle_for(3, 4, 3, LabelMode::Soft, None);
        let swapped = train_dual_students(&cfg, &mut o2, &dom, None).unwrap();
        assert_eq!(plain.s1.params_flat(), swapped.s2.unwrap().params_flat());
        assert_eq!(plain.s2.unwrap().params_flat(), swapped.s1.params_flat());
    }

    #[test]
    fn budget_truncates_at_step_granularity() {
        let dom = DataDomain::unit(4);
        let mut cfg = small_cfg(Method::DualStudents, LabelMode::Soft);
        cfg.query_budget = Some(100);
        let mut oracle = oracle_for(3, 4, 3, LabelMode::Soft, Some(100));
        let res = train_dual_students(&cfg, &mut oracle, &dom, None).unwrap();
        assert!(res.truncated);
        assert_eq!(res.ledger.total_samples, 96);

        let mut cfg = small_cfg(Method::DfmeFd, LabelMode::Soft);
        cfg.query_budget = Some(150);
        let mut oracle = oracle_for(3, 4, 3, LabelMode::Soft, Some(150));
        let res = train_dfme_fd(&cfg, &mut oracle, &dom, None).unwrap();
        assert!(res.truncated);
        assert_eq!(res.ledger.total_samples, 128);
        assert_eq!(res.ledger.phase_count(Phase::GeneratorGradEst), 64);
    }

    #[test]
    fn triangle_bound_checked_every_student_batch() {
        let dom = DataDomain::unit(4);
        let cfg = small_cfg(Method::DualStudents, LabelMode::Soft);
        let mut oracle = oracle_for(3, 4, 3, LabelMode::Soft, None);
        let res = train_dual_students(&cfg, &mut oracle, &dom, None).unwrap();
        assert_eq!(
            res.triangle_batches,
            (cfg.epochs * cfg.student_iters) as u64
        );
        assert!(res.triangle_max_excess <= TRIANGLE_TOL);
    }

    // Four angular sectors meeting at the center of the unit box: any spread
    // of generated points around the middle touches every class.
    fn sector_oracle(budget: Option<u64>) -> Oracle {
        Oracle::from_fn(
            |x: &Tensor| {
                let mut data = Vec::with_capacity(x.rows() * 4);
                for i in 0..x.rows() {
                    let (v0, v1) = (x.row(i)[0] - 0.5, x.row(i)[1] - 0.5);
                    data.extend_from_slice(&[v0, v1, -v0, -v1]);
                }
                Ok(Tensor::new(vec![x.rows(), 4], data)?)
            },
            4,
            LabelMode::Hard,
            budget,
        )
        .unwrap()
    }

    #[test]
    fn unknown_class_run_discovers_all_classes_and_grows() {
        let dom = DataDomain::unit(4);
        let mut cfg = small_cfg(Method::DualStudents, LabelMode::Hard);
        cfg.unknown_classes = true;
        cfg.epochs = 3;
        let mut oracle = sector_oracle(None);
        let res = train_unknown_classes(&cfg, &mut oracle, &dom, None).unwrap();
        let map = res.class_map.unwrap();
        let mut seen = map.seen().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert_eq!(res.s1.output_dim(), 4);
        assert_eq!(res.s2.unwrap().output_dim(), 4);

        cfg.max_classes = 3;
        let mut oracle = sector_oracle(None);
        assert!(matches!(
            train_unknown_classes(&cfg, &mut oracle, &dom, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn class_map_orders_by_first_sight() {
        let mut map = ClassMap::new();
        assert_eq!(map.head_width(), 2);
        assert_eq!(map.observe(3), 0);
        assert_eq!(map.observe(1), 1);
        assert_eq!(map.observe(3), 0);
        assert_eq!(map.observe(0), 2);
        assert_eq!(map.seen(), &[3, 1, 0]);
        assert_eq!(map.dense_of(1), Some(1));
        assert_eq!(map.raw_of(2), Some(0));
        assert_eq!(map.dense_of(9), None);
        assert_eq!(map.head_width(), 3);
    }

    #[test]
    fn finetune_with_zero_budget_returns_input_student() {
        let dom = DataDomain::unit(4);
        let mut cfg = small_cfg(Method::DualStudents, LabelMode::Soft);
        cfg.query_budget = Some(0);
        let pretrained = blob_target(77, 4, 3);
        let mut oracle = oracle_for(3, 4, 3, LabelMode::Soft, Some(0));
        let res = finetune_with_ds(&pretrained, &cfg, &mut oracle, &dom, None).unwrap();
        assert_eq!(res.s1.params_flat(), pretrained.params_flat());
        assert_eq!(res.ledger.total_samples, 0);
    }

    #[test]
    fn finetune_rejects_width_mismatch() {
        let dom = DataDomain::unit(4);
        let cfg = small_cfg(Method::DualStudents, LabelMode::Soft);
        let pretrained = blob_target(77, 4, 5);
        let mut oracle = oracle_for(3, 4, 3, LabelMode::Soft, None);
        assert!(matches!(
            finetune_with_ds(&pretrained, &cfg, &mut oracle, &dom, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fd_gradient_is_exact_where_the_loss_is_linear() {
        // A single-layer student keeps the logits affine in x, a constant
        // oracle pins the label, and a margin large enough to keep every
        // hinge active makes the multi-margin loss exactly linear. One probe
        // direction u then recovers (∇f·u)·u to rounding error.
        let mut rng = substream(5, "lin");
        let student = Mlp::new(&[2, 3], Activation::Relu, OutputHead::Logits, &mut rng).unwrap();
        let mut oracle = Oracle::from_fn(
            |x: &Tensor| {
                let mut data = vec![0.0; x.rows() * 3];
                for i in 0..x.rows() {
                    data[i * 3 + 1] = 5.0;
                }
                Ok(Tensor::new(vec![x.rows(), 3], data)?)
            },
            3,
            LabelMode::Hard,
            None,
        )
        .unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.3, 0.4, 0.8, 0.1]).unwrap();
        let margin = 50.0;
        let (b, d, c, y) = (2, 2, 3, 1usize);
        let mut dir_rng = substream(5, "dirs");
        let est = fd_input_gradient(
            &mut oracle,
            &student,
            &x,
            LossKind::MultiMargin,
            margin,
            1e-3,
            1,
            &mut dir_rng,
            Phase::EvalExcluded,
        )
        .unwrap();
        // Replay the probe directions from an identical stream.
        let mut replay = substream(5, "dirs");
        let mut u = vec![0.0; b * d];
        for i in 0..b {
            let row = &mut u[i * d..(i + 1) * d];
            for v in row.iter_mut() {
                *v = gauss(&mut replay);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        // ∇_x of (1/C)·Σ_{j≠y}(margin − s_y + s_j) is (1/C)·Σ_{j≠y}(w_j − w_y).
        let w = &student.layers()[0].weight;
        for i in 0..b {
            let mut grad = [0.0; 2];
            for (dim, gv) in grad.iter_mut().enumerate() {
                for j in 0..c {
                    if j != y {
                        *gv += w.data()[dim * c + j] - w.data()[dim * c + y];
                    }
                }
                *gv /= c as f64;
            }
            let slope = grad[0] * u[i * d] + grad[1] * u[i * d + 1];
            for dim in 0..d {
                let truth = slope * u[i * d + dim];
                let got = est.data()[i * d + dim];
                assert!(
                    (got - truth).abs() < 1e-8,
                    "sample {i} dim {dim}: {got} vs {truth}"
                );
            }
        }
        assert_eq!(oracle.ledger().total_samples, 0);
        assert_eq!(oracle.ledger().phase_count(Phase::EvalExcluded), 4);
    }

    #[test]
    fn ensemble_and_proxy_match_recounts() {
        let dom = DataDomain::unit(3);
        let _ = dom;
        let mut rng = substream(9, "nets");
        let a = Mlp::new(&[3, 8, 4], Activation::Relu, OutputHead::Logits, &mut rng).unwrap();
        let b = Mlp::new(&[3, 8, 4], Activation::Relu, OutputHead::Logits, &mut rng).unwrap();
        let x = Tensor::from_raw(vec![6, 3], (0..18).map(|i| (i as f64) / 18.0).collect());
        let ens = ensemble_predict(&a, &b, &x).unwrap();
        let pa = softmax_tensor(&a.infer(&x).unwrap());
        let pb = softmax_tensor(&b.infer(&x).unwrap());
        for i in 0..ens.numel() {
            assert!((ens.data()[i] - 0.5 * (pa.data()[i] + pb.data()[i])).abs() < 1e-15);
        }
        for i in 0..6 {
            let s: f64 = ens.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        let target = blob_target(13, 3, 4);
        let mut oracle = Oracle::from_mlp(target.clone(), LabelMode::Soft, None).unwrap();
        let picked = select_proxy(&target, &b, &mut oracle, &x).unwrap();
        assert!(std::ptr::eq(picked, &target));
        let tied = select_proxy(&a, &a, &mut oracle, &x).unwrap();
        assert!(std::ptr::eq(tied, &a));
    }

    #[test]
    fn validate_rejects_inconsistent_configs() {
        let mut cfg = ExtractionConfig::new(Method::DualStudents, LabelMode::Soft);
        cfg.generator_loss = LossKind::Ce;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ExtractionConfig::new(Method::DualStudents, LabelMode::Hard);
        cfg.student_loss = LossKind::L1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ExtractionConfig::new(Method::DfmeFd, LabelMode::Soft);
        cfg.momentum = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ExtractionConfig::new(Method::DfmeFd, LabelMode::Hard);
        cfg.unknown_classes = true;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
