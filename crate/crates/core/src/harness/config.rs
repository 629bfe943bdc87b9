//! Run configuration: a flat key-value format with one section per
//! subsystem, parsed into a fully resolved spec that echoes back out as a
//! file the parser accepts again.

use std::path::PathBuf;

use crate::attacks::AttackKind;
use crate::error::{Error, Result};
use crate::evaluation::FidelityNorm;
use crate::extraction::{ExtractionConfig, Method};
use crate::harness::dataset::{DataSource, DatasetSpec};
use crate::harness::run::{AttackRun, ProxySource};
use crate::harness::target::TargetSpec;
use crate::losses::LossKind;
use crate::oracle::LabelMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    TrainTarget,
    Extract,
    Finetune,
    GradFidelity,
    AttackEval,
    Report,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::TrainTarget => "train_target",
            Task::Extract => "extract",
            Task::Finetune => "finetune",
            Task::GradFidelity => "eval_grad_fidelity",
            Task::AttackEval => "attack_eval",
            Task::Report => "report",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "train_target" => Some(Task::TrainTarget),
            "extract" => Some(Task::Extract),
            "finetune" => Some(Task::Finetune),
            "eval_grad_fidelity" => Some(Task::GradFidelity),
            "attack_eval" => Some(Task::AttackEval),
            "report" => Some(Task::Report),
            _ => None,
        }
    }
}

/// One fully resolved run. The root seed is pushed into every subsystem by
/// [`RunSpec::finalize`].
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub task: Task,
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub target: TargetSpec,
    pub extraction: ExtractionConfig,
    pub attacks: Vec<AttackRun>,
    /// Checkpoint the finetune task starts from; defaults to the output
    /// directory's own student.
    pub pretrained: Option<PathBuf>,
    /// Oracle budget for the finetune task; defaults to 5% of the full
    /// extraction budget.
    pub finetune_budget: Option<u64>,
    pub fidelity_norm: FidelityNorm,
    pub fidelity_samples: usize,
    pub hist_samples: usize,
}

/// Extraction defaults recalibrated for the bundled synthetic tasks; the
/// tiny networks here want smaller batches and gentler generator steps than
/// the core defaults, and soft-label runs distill faster under KL.
pub fn desk_extraction(method: Method, label_mode: LabelMode) -> ExtractionConfig {
    let mut e = ExtractionConfig::new(method, label_mode);
    e.batch = 64;
    e.latent_dim = 64;
    e.generator_hidden = vec![64];
    e.lr_generator = 1e-4;
    e.lr_student = match (method, label_mode) {
        (Method::DualStudents, LabelMode::Hard) => 0.15,
        _ => 0.1,
    };
    if label_mode == LabelMode::Soft {
        e.student_loss = LossKind::Kl;
    }
    e
}

impl RunSpec {
    pub fn new(task: Task) -> Self {
        let mut extraction = desk_extraction(Method::DualStudents, LabelMode::Soft);
        extraction.query_budget = Some(200_000);
        RunSpec {
            task,
            seed: 0,
            out: PathBuf::from("runs/out"),
            dataset: DatasetSpec::new(DataSource::Blobs),
            target: TargetSpec::default(),
            extraction,
            attacks: Vec::new(),
            pretrained: None,
            finetune_budget: None,
            fidelity_norm: FidelityNorm::Gradient,
            fidelity_samples: 256,
            hist_samples: 10_000,
        }
    }

    /// Push the root seed into every subsystem config.
    pub fn finalize(&mut self) {
        self.extraction.seed = self.seed;
        for a in &mut self.attacks {
            a.cfg.seed = self.seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.target.validate()?;
        self.extraction.validate()?;
        for a in &self.attacks {
            a.cfg.validate()?;
        }
        if self.fidelity_samples == 0 || self.hist_samples == 0 {
            return Err(Error::Config(
                "fidelity_samples and hist_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn p_err(line: usize, message: String) -> Error {
    Error::Parse { line, message }
}

fn p_u64(v: &str, line: usize) -> Result<u64> {
    v.parse()
        .map_err(|e| p_err(line, format!("bad integer {v:?}: {e}")))
}

fn p_usize(v: &str, line: usize) -> Result<usize> {
    v.parse()
        .map_err(|e| p_err(line, format!("bad integer {v:?}: {e}")))
}

fn p_f64(v: &str, line: usize) -> Result<f64> {
    v.parse()
        .map_err(|e| p_err(line, format!("bad number {v:?}: {e}")))
}

fn p_bool(v: &str, line: usize) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(p_err(line, format!("expected true or false, got {v:?}"))),
    }
}

fn p_dims(v: &str, line: usize) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| p_usize(s.trim(), line))
        .collect()
}

fn dims_text(dims: &[usize]) -> String {
    dims.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn opt_path_text(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => p.display().to_string(),
        None => "none".into(),
    }
}

fn apply_key(spec: &mut RunSpec, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
    let unknown = || p_err(line, format!("unknown key {key:?} in [{section}]"));
    match section {
        "run" => match key {
            "task" => {
                spec.task = Task::from_name(value)
                    .ok_or_else(|| p_err(line, format!("unknown task {value:?}")))?;
            }
            "seed" => spec.seed = p_u64(value, line)?,
            "out" => spec.out = PathBuf::from(value),
            "pretrained" => {
                spec.pretrained = (value != "none").then(|| PathBuf::from(value));
            }
            "finetune_budget" => {
                spec.finetune_budget = if value == "none" {
                    None
                } else {
                    Some(p_u64(value, line)?)
                };
            }
            "fidelity_norm" => {
                spec.fidelity_norm = FidelityNorm::from_name(value)
                    .ok_or_else(|| p_err(line, format!("unknown fidelity norm {value:?}")))?;
            }
            "fidelity_samples" => spec.fidelity_samples = p_usize(value, line)?,
            "hist_samples" => spec.hist_samples = p_usize(value, line)?,
            _ => return Err(unknown()),
        },
        "dataset" => match key {
            "source" => {
                spec.dataset.source = DataSource::from_name(value)
                    .ok_or_else(|| p_err(line, format!("unknown dataset source {value:?}")))?;
            }
            "classes" => spec.dataset.classes = p_usize(value, line)?,
            "dim" => spec.dataset.dim = p_usize(value, line)?,
            "n_train" => spec.dataset.n_train = p_usize(value, line)?,
            "n_test" => spec.dataset.n_test = p_usize(value, line)?,
            "noise" => spec.dataset.noise = p_f64(value, line)?,
            "csv_path" => {
                spec.dataset.csv_path = (value != "none").then(|| PathBuf::from(value));
            }
            _ => return Err(unknown()),
        },
        "target" => match key {
            "hidden" => spec.target.hidden = p_dims(value, line)?,
            "epochs" => spec.target.epochs = p_usize(value, line)?,
            "batch" => spec.target.batch = p_usize(value, line)?,
            "lr" => spec.target.lr = p_f64(value, line)?,
            "momentum" => spec.target.momentum = p_f64(value, line)?,
            "weight_decay" => spec.target.weight_decay = p_f64(value, line)?,
            "floor" => spec.target.floor = p_f64(value, line)?,
            _ => return Err(unknown()),
        },
        "extraction" => {
            let e = &mut spec.extraction;
            match key {
                "method" => {
                    e.method = Method::from_name(value)
                        .ok_or_else(|| p_err(line, format!("unknown method {value:?}")))?;
                }
                "label_mode" => {
                    e.label_mode = LabelMode::from_name(value)
                        .ok_or_else(|| p_err(line, format!("unknown label mode {value:?}")))?;
                }
                "epochs" => e.epochs = p_usize(value, line)?,
                "generator_iters" => e.generator_iters = p_usize(value, line)?,
                "student_iters" => e.student_iters = p_usize(value, line)?,
                "batch" => e.batch = p_usize(value, line)?,
                "latent_dim" => e.latent_dim = p_usize(value, line)?,
                "lr_generator" => e.lr_generator = p_f64(value, line)?,
                "lr_student" => e.lr_student = p_f64(value, line)?,
                "momentum" => e.momentum = p_f64(value, line)?,
                "weight_decay" => e.weight_decay = p_f64(value, line)?,
                "ema_decay" => e.ema_decay = p_f64(value, line)?,
                "student_loss" => {
                    e.student_loss = LossKind::from_name(value)
                        .ok_or_else(|| p_err(line, format!("unknown loss {value:?}")))?;
                }
                "generator_loss" => {
                    e.generator_loss = LossKind::from_name(value)
                        .ok_or_else(|| p_err(line, format!("unknown loss {value:?}")))?;
                }
                "fd_directions" => e.fd_directions = p_usize(value, line)?,
                "fd_step" => e.fd_step = p_f64(value, line)?,
                "budget" => {
                    e.query_budget = if value == "none" {
                        None
                    } else {
                        Some(p_u64(value, line)?)
                    };
                }
                "unknown_classes" => e.unknown_classes = p_bool(value, line)?,
                "max_classes" => e.max_classes = p_usize(value, line)?,
                "student_hidden" => e.student_hidden = p_dims(value, line)?,
                "generator_hidden" => e.generator_hidden = p_dims(value, line)?,
                "margin" => e.margin = p_f64(value, line)?,
                "swap_student_init" => e.swap_student_init = p_bool(value, line)?,
                _ => return Err(unknown()),
            }
        }
        "attack" => {
            if spec.attacks.is_empty() {
                spec.attacks.push(AttackRun::default_run());
            }
            let a = spec.attacks.last_mut().unwrap();
            match key {
                "proxy" => {
                    a.proxy = ProxySource::from_name(value)
                        .ok_or_else(|| p_err(line, format!("unknown proxy source {value:?}")))?;
                }
                "kind" => {
                    a.cfg.kind = AttackKind::from_name(value)
                        .ok_or_else(|| p_err(line, format!("unknown attack kind {value:?}")))?;
                }
                "epsilon" => {
                    // Keep the ε/4 step default in sync unless the step was
                    // set to something else already.
                    let derived = a.cfg.step_size == a.cfg.epsilon / 4.0;
                    a.cfg.epsilon = p_f64(value, line)?;
                    if derived {
                        a.cfg.step_size = a.cfg.epsilon / 4.0;
                    }
                }
                "steps" => a.cfg.steps = p_usize(value, line)?,
                "step_size" => a.cfg.step_size = p_f64(value, line)?,
                "targeted" => a.cfg.targeted = p_bool(value, line)?,
                "random_start" => a.cfg.random_start = p_bool(value, line)?,
                _ => return Err(unknown()),
            }
        }
        other => return Err(p_err(line, format!("unknown section [{other}]"))),
    }
    Ok(())
}

/// Parse configuration text. Missing keys keep their defaults; an empty
/// string yields the default extract run. Method and label mode are read
/// first so their dependent defaults (student loss and learning rate) are
/// in place before any explicit overrides apply.
pub fn parse_config(text: &str) -> Result<RunSpec> {
    let mut entries: Vec<(String, String, String, usize)> = Vec::new();
    let mut section = String::from("run");
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let name = inner
                .strip_suffix(']')
                .ok_or_else(|| p_err(line_no, "unterminated section header".into()))?
                .trim();
            match name {
                "run" | "dataset" | "target" | "extraction" => section = name.to_string(),
                "attack" => {
                    section = "attack".to_string();
                    entries.push(("attack".into(), String::new(), String::new(), line_no));
                }
                other => return Err(p_err(line_no, format!("unknown section [{other}]"))),
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| p_err(line_no, format!("expected key = value, got {line:?}")))?;
        entries.push((
            section.clone(),
            key.trim().to_string(),
            value.trim().to_string(),
            line_no,
        ));
    }

    let mut method = Method::DualStudents;
    let mut label_mode = LabelMode::Soft;
    for (section, key, value, line) in &entries {
        if section == "extraction" && key == "method" {
            method = Method::from_name(value)
                .ok_or_else(|| p_err(*line, format!("unknown method {value:?}")))?;
        }
        if section == "extraction" && key == "label_mode" {
            label_mode = LabelMode::from_name(value)
                .ok_or_else(|| p_err(*line, format!("unknown label mode {value:?}")))?;
        }
    }
    let mut spec = RunSpec::new(Task::Extract);
    let budget = spec.extraction.query_budget;
    spec.extraction = desk_extraction(method, label_mode);
    spec.extraction.query_budget = budget;

    for (section, key, value, line) in &entries {
        if section == "attack" && key.is_empty() {
            spec.attacks.push(AttackRun::default_run());
            continue;
        }
        apply_key(&mut spec, section, key, value, *line)?;
    }
    spec.finalize();
    Ok(spec)
}

/// Apply one `section.key=value` override, as given on the command line.
pub fn apply_override(spec: &mut RunSpec, kv: &str) -> Result<()> {
    let fail = |m: String| Error::Config(format!("bad override {kv:?}: {m}"));
    let (path, value) = kv
        .split_once('=')
        .ok_or_else(|| fail("expected section.key=value".into()))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| fail("expected section.key=value".into()))?;
    if section == "attack" && spec.attacks.is_empty() {
        spec.attacks.push(AttackRun::default_run());
    }
    // Method and label mode carry their own loss and learning-rate defaults,
    // so switching either resets the extraction section; pass those overrides
    // before any finer-grained extraction key.
    if section.trim() == "extraction" {
        let key = key.trim();
        let value = value.trim();
        let rebuilt = match key {
            "method" => Method::from_name(value)
                .map(|m| (m, spec.extraction.label_mode)),
            "label_mode" => LabelMode::from_name(value)
                .map(|l| (spec.extraction.method, l)),
            _ => None,
        };
        if let Some((method, label_mode)) = rebuilt {
            let budget = spec.extraction.query_budget;
            spec.extraction = desk_extraction(method, label_mode);
            spec.extraction.query_budget = budget;
            spec.finalize();
            return Ok(());
        }
    }
    apply_key(spec, section.trim(), key.trim(), value.trim(), 0).map_err(|e| match e {
        Error::Parse { message, .. } => fail(message),
        other => other,
    })?;
    spec.finalize();
    Ok(())
}

/// Render the fully resolved spec in the format [`parse_config`] reads.
pub fn echo_config(spec: &RunSpec) -> String {
    let mut s = String::new();
    s.push_str("[run]\n");
    s.push_str(&format!("task = {}\n", spec.task.name()));
    s.push_str(&format!("seed = {}\n", spec.seed));
    s.push_str(&format!("out = {}\n", spec.out.display()));
    s.push_str(&format!("pretrained = {}\n", opt_path_text(&spec.pretrained)));
    s.push_str(&format!(
        "finetune_budget = {}\n",
        spec.finetune_budget
            .map_or("none".into(), |b| b.to_string())
    ));
    s.push_str(&format!("fidelity_norm = {}\n", spec.fidelity_norm.name()));
    s.push_str(&format!("fidelity_samples = {}\n", spec.fidelity_samples));
    s.push_str(&format!("hist_samples = {}\n", spec.hist_samples));

    let d = &spec.dataset;
    s.push_str("\n[dataset]\n");
    s.push_str(&format!("source = {}\n", d.source.name()));
    s.push_str(&format!("classes = {}\n", d.classes));
    s.push_str(&format!("dim = {}\n", d.dim));
    s.push_str(&format!("n_train = {}\n", d.n_train));
    s.push_str(&format!("n_test = {}\n", d.n_test));
    s.push_str(&format!("noise = {}\n", d.noise));
    s.push_str(&format!("csv_path = {}\n", opt_path_text(&d.csv_path)));

    let t = &spec.target;
    s.push_str("\n[target]\n");
    s.push_str(&format!("hidden = {}\n", dims_text(&t.hidden)));
    s.push_str(&format!("epochs = {}\n", t.epochs));
    s.push_str(&format!("batch = {}\n", t.batch));
    s.push_str(&format!("lr = {}\n", t.lr));
    s.push_str(&format!("momentum = {}\n", t.momentum));
    s.push_str(&format!("weight_decay = {}\n", t.weight_decay));
    s.push_str(&format!("floor = {}\n", t.floor));

    let e = &spec.extraction;
    s.push_str("\n[extraction]\n");
    s.push_str(&format!("method = {}\n", e.method.name()));
    s.push_str(&format!("label_mode = {}\n", e.label_mode.name()));
    s.push_str(&format!("epochs = {}\n", e.epochs));
    s.push_str(&format!("generator_iters = {}\n", e.generator_iters));
    s.push_str(&format!("student_iters = {}\n", e.student_iters));
    s.push_str(&format!("batch = {}\n", e.batch));
    s.push_str(&format!("latent_dim = {}\n", e.latent_dim));
    s.push_str(&format!("lr_generator = {}\n", e.lr_generator));
    s.push_str(&format!("lr_student = {}\n", e.lr_student));
    s.push_str(&format!("momentum = {}\n", e.momentum));
    s.push_str(&format!("weight_decay = {}\n", e.weight_decay));
    s.push_str(&format!("ema_decay = {}\n", e.ema_decay));
    s.push_str(&format!("student_loss = {}\n", e.student_loss.name()));
    s.push_str(&format!("generator_loss = {}\n", e.generator_loss.name()));
    s.push_str(&format!("fd_directions = {}\n", e.fd_directions));
    s.push_str(&format!("fd_step = {}\n", e.fd_step));
    s.push_str(&format!(
        "budget = {}\n",
        e.query_budget.map_or("none".into(), |b| b.to_string())
    ));
    s.push_str(&format!("unknown_classes = {}\n", e.unknown_classes));
    s.push_str(&format!("max_classes = {}\n", e.max_classes));
    s.push_str(&format!("student_hidden = {}\n", dims_text(&e.student_hidden)));
    s.push_str(&format!(
        "generator_hidden = {}\n",
        dims_text(&e.generator_hidden)
    ));
    s.push_str(&format!("margin = {}\n", e.margin));
    s.push_str(&format!("swap_student_init = {}\n", e.swap_student_init));

    for a in &spec.attacks {
        s.push_str("\n[attack]\n");
        s.push_str(&format!("proxy = {}\n", a.proxy.name()));
        s.push_str(&format!("kind = {}\n", a.cfg.kind.name()));
        s.push_str(&format!("epsilon = {}\n", a.cfg.epsilon));
        s.push_str(&format!("steps = {}\n", a.cfg.steps));
        s.push_str(&format!("step_size = {}\n", a.cfg.step_size));
        s.push_str(&format!("targeted = {}\n", a.cfg.targeted));
        s.push_str(&format!("random_start = {}\n", a.cfg.random_start));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_the_default_run() {
        let spec = parse_config("").unwrap();
        assert_eq!(spec.task, Task::Extract);
        assert_eq!(spec.extraction.query_budget, Some(200_000));
        assert_eq!(spec.extraction.batch, 256);
        assert_eq!(spec.dataset.classes, 4);
        assert!(spec.attacks.is_empty());
        spec.validate().unwrap();
    }

    #[test]
    fn echo_round_trips_byte_for_byte() {
        let text = "\
[run]
task = attack_eval
seed = 13
out = runs/demo

[dataset]
source = spirals
classes = 3
noise = 0.1

[extraction]
method = dfme_fd
label_mode = hard
student_loss = multi_margin
budget = 50000

[attack]
kind = fgsm
epsilon = 0.05

[attack]
kind = pgd
epsilon = 0.1
steps = 40
proxy = whitebox_target
";
        let spec = parse_config(text).unwrap();
        let echo = echo_config(&spec);
        let spec2 = parse_config(&echo).unwrap();
        assert_eq!(echo_config(&spec2), echo);
        assert_eq!(spec2.attacks.len(), 2);
        assert_eq!(spec2.attacks[0].cfg.step_size, 0.05 / 4.0);
        assert_eq!(spec2.attacks[1].cfg.steps, 40);
    }

    #[test]
    fn hard_mode_defaults_follow_label_mode_regardless_of_key_order() {
        let spec = parse_config("[extraction]\nlabel_mode = hard\n").unwrap();
        assert_eq!(spec.extraction.student_loss, LossKind::Ce);
        assert_eq!(spec.extraction.lr_student, 0.05);

        let spec = parse_config("[extraction]\nlr_student = 0.2\nlabel_mode = hard\n").unwrap();
        assert_eq!(spec.extraction.lr_student, 0.2);
    }

    #[test]
    fn unknown_keys_and_sections_fail_with_line_numbers() {
        match parse_config("[dataset]\nsourcez = blobs\n") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("sourcez"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            parse_config("[nope]\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_config("[run]\nseed = x\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_config("[run]\nno equals sign\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn the_root_seed_reaches_every_subsystem() {
        let spec = parse_config("[run]\nseed = 9\n\n[attack]\nkind = fgsm\nepsilon = 0.1\n").unwrap();
        assert_eq!(spec.extraction.seed, 9);
        assert_eq!(spec.attacks[0].cfg.seed, 9);
    }

    #[test]
    fn overrides_apply_and_reject_garbage() {
        let mut spec = parse_config("").unwrap();
        apply_override(&mut spec, "extraction.batch=64").unwrap();
        assert_eq!(spec.extraction.batch, 64);
        apply_override(&mut spec, "run.seed=21").unwrap();
        assert_eq!(spec.extraction.seed, 21);
        apply_override(&mut spec, "attack.epsilon=0.2").unwrap();
        assert_eq!(spec.attacks[0].cfg.epsilon, 0.2);

        assert!(apply_override(&mut spec, "no-dots=3").is_err());
        assert!(apply_override(&mut spec, "extraction.nope=3").is_err());
        assert!(apply_override(&mut spec, "extraction.batch").is_err());
    }

    #[test]
    fn explicit_step_size_survives_a_later_epsilon() {
        let spec =
            parse_config("[attack]\nstep_size = 0.03\nepsilon = 0.4\n").unwrap();
        assert_eq!(spec.attacks[0].cfg.step_size, 0.03);
        assert_eq!(spec.attacks[0].cfg.epsilon, 0.4);
    }
}
