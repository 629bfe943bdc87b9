//! Task orchestration. Every task writes into one output directory whose
//! contents are a pure function of the config echo and the seed, so the
//! report can always be regenerated from what is on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{transfer_eval, AttackConfig, AttackKind};
use crate::domain::DataDomain;
use crate::error::{Error, Result};
use crate::evaluation::{
    grad_fidelity, queries_to_accuracy, read_metrics_csv, write_metrics_csv, Evaluator,
    Surrogate,
};
use crate::extraction::{
    finetune_with_ds, train_dfme_fd, train_dual_students, train_unknown_classes, EvalSnapshot,
    Method, RunResult,
};
use crate::harness::config::{echo_config, RunSpec, Task};
use crate::harness::dataset::{make_dataset, Dataset};
use crate::harness::target::{accuracy, train_target};
use crate::losses::LossKind;
use crate::ndgrad::Tensor;
use crate::nets::{load_checkpoint, save_checkpoint, Mlp};
use crate::oracle::{LabelMode, Oracle, QueryLedger};
use crate::rng::substream;

/// Which network the adversarial samples are crafted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxySource {
    ExtractedStudent,
    WhiteboxTarget,
    DataProxy,
}

impl ProxySource {
    pub fn name(self) -> &'static str {
        match self {
            ProxySource::ExtractedStudent => "extracted_student",
            ProxySource::WhiteboxTarget => "whitebox_target",
            ProxySource::DataProxy => "data_proxy",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "extracted_student" => Some(ProxySource::ExtractedStudent),
            "whitebox_target" => Some(ProxySource::WhiteboxTarget),
            "data_proxy" => Some(ProxySource::DataProxy),
            _ => None,
        }
    }
}

/// One attack evaluation: the attack parameters plus the proxy choice.
#[derive(Clone, Debug)]
pub struct AttackRun {
    pub cfg: AttackConfig,
    pub proxy: ProxySource,
}

impl AttackRun {
    pub fn default_run() -> Self {
        AttackRun {
            cfg: AttackConfig::new(AttackKind::Pgd, 0.01),
            proxy: ProxySource::ExtractedStudent,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LedgerFile {
    total_samples: u64,
    truncated: bool,
    by_phase: BTreeMap<String, u64>,
}

fn write_ledger(path: &Path, ledger: &QueryLedger, truncated: bool) -> Result<()> {
    let file = LedgerFile {
        total_samples: ledger.total_samples,
        truncated,
        by_phase: ledger.by_phase.clone(),
    };
    let mut text =
        serde_json::to_string_pretty(&file).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_ledger(path: &Path) -> Result<LedgerFile> {
    serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Execute the spec's task into its output directory. Partial outputs stay
/// on disk when a step fails, the failure lands in error.txt, and the
/// report reflects whatever artifacts exist.
pub fn run(spec: &RunSpec) -> Result<()> {
    spec.validate()?;
    if spec.task == Task::Report {
        let report = compose_report(&spec.out)?;
        fs::write(spec.out.join("report.txt"), report)?;
        return Ok(());
    }
    fs::create_dir_all(&spec.out)?;
    let _ = fs::remove_file(spec.out.join("error.txt"));
    fs::write(spec.out.join("config.txt"), echo_config(spec))?;
    let outcome = run_task(spec);
    if let Err(e) = &outcome {
        let _ = fs::write(spec.out.join("error.txt"), format!("{e}\n"));
    }
    match compose_report(&spec.out) {
        Ok(report) => fs::write(spec.out.join("report.txt"), report)?,
        Err(e) => {
            if outcome.is_ok() {
                return Err(e);
            }
        }
    }
    outcome
}

fn run_task(spec: &RunSpec) -> Result<()> {
    match spec.task {
        Task::TrainTarget => task_train_target(spec),
        Task::Extract => task_extract(spec),
        Task::Finetune => task_finetune(spec),
        Task::GradFidelity => task_grad_fidelity(spec),
        Task::AttackEval => task_attack(spec),
        Task::Report => Ok(()),
    }
}

fn datasets(spec: &RunSpec) -> Result<(Dataset, Dataset)> {
    let (train, test, rescale) = make_dataset(&spec.dataset, spec.seed)?;
    if let Some(r) = rescale {
        r.save(&spec.out.join("rescale.txt"))?;
    }
    Ok((train, test))
}

fn require_ckpt(path: &Path, what: &str) -> Result<Mlp> {
    if !path.exists() {
        return Err(Error::Contract(format!(
            "{what} checkpoint missing at {}; run the producing task first",
            path.display()
        )));
    }
    Ok(load_checkpoint(path)?.net)
}

// Reuse an existing victim checkpoint or train one into the directory.
fn load_or_train_target(spec: &RunSpec, train: &Dataset, test: &Dataset) -> Result<Mlp> {
    let path = spec.out.join("target.ckpt");
    if path.exists() {
        return Ok(load_checkpoint(&path)?.net);
    }
    let (net, report) = train_target(
        train,
        test,
        spec.dataset.classes,
        &spec.target,
        spec.seed,
        "target",
    )?;
    save_checkpoint(&path, &net, spec.seed, "target")?;
    fs::write(
        spec.out.join("target.txt"),
        format!(
            "train_accuracy {}\ntest_accuracy {}\n",
            report.train_accuracy, report.test_accuracy
        ),
    )?;
    Ok(net)
}

fn gate_floor(target: &Mlp, test: &Dataset, floor: f64) -> Result<f64> {
    let acc = accuracy(target, test)?;
    if acc < floor {
        return Err(Error::Contract(format!(
            "target test accuracy {acc} is below the floor {floor}; extraction \
             against a weak victim is not meaningful"
        )));
    }
    Ok(acc)
}

fn task_train_target(spec: &RunSpec) -> Result<()> {
    let (train, test) = datasets(spec)?;
    let (net, report) = train_target(
        &train,
        &test,
        spec.dataset.classes,
        &spec.target,
        spec.seed,
        "target",
    )?;
    save_checkpoint(&spec.out.join("target.ckpt"), &net, spec.seed, "target")?;
    fs::write(
        spec.out.join("target.txt"),
        format!(
            "train_accuracy {}\ntest_accuracy {}\n",
            report.train_accuracy, report.test_accuracy
        ),
    )?;
    if report.test_accuracy < spec.target.floor {
        return Err(Error::Contract(format!(
            "target test accuracy {} is below the floor {}",
            report.test_accuracy, spec.target.floor
        )));
    }
    Ok(())
}

fn save_run_outputs(spec: &RunSpec, result: &RunResult) -> Result<()> {
    write_metrics_csv(
        &spec.out.join("metrics.csv"),
        &result.metrics,
        spec.dataset.classes,
    )?;
    write_ledger(&spec.out.join("ledger.json"), &result.ledger, result.truncated)?;
    save_checkpoint(&spec.out.join("s1.ckpt"), &result.s1, spec.seed, "s1")?;
    if let Some(s2) = &result.s2 {
        save_checkpoint(&spec.out.join("s2.ckpt"), s2, spec.seed, "s2")?;
    }
    save_checkpoint(
        &spec.out.join("generator.ckpt"),
        &result.generator,
        spec.seed,
        "generator",
    )?;
    if let Some(map) = &result.class_map {
        let seen: Vec<String> = map.seen().iter().map(|c| c.to_string()).collect();
        fs::write(spec.out.join("class_map.txt"), seen.join(",") + "\n")?;
    }
    Ok(())
}

fn run_extraction(spec: &RunSpec, target: &Mlp, test: &Dataset) -> Result<RunResult> {
    let cfg = &spec.extraction;
    let mut oracle = Oracle::from_mlp(target.clone(), cfg.label_mode, cfg.query_budget)?;
    let domain = DataDomain::unit(spec.dataset.dim);
    let mut evaluator = Evaluator::new(target.clone(), test.xs.clone(), cfg.label_mode, spec.seed);
    evaluator.norm = spec.fidelity_norm;
    evaluator.fd_directions = cfg.fd_directions;
    evaluator.fd_step = cfg.fd_step;
    evaluator.fidelity_samples = spec.fidelity_samples;
    evaluator.hist_samples = spec.hist_samples;
    let mut hook = |snap: &EvalSnapshot, oracle: &mut Oracle| evaluator.row(snap, oracle);
    if cfg.unknown_classes {
        train_unknown_classes(cfg, &mut oracle, &domain, Some(&mut hook))
    } else {
        match cfg.method {
            Method::DualStudents => train_dual_students(cfg, &mut oracle, &domain, Some(&mut hook)),
            Method::DfmeFd => train_dfme_fd(cfg, &mut oracle, &domain, Some(&mut hook)),
        }
    }
}

fn task_extract(spec: &RunSpec) -> Result<()> {
    let (train, test) = datasets(spec)?;
    let target = load_or_train_target(spec, &train, &test)?;
    gate_floor(&target, &test, spec.target.floor)?;
    let result = run_extraction(spec, &target, &test)?;
    save_run_outputs(spec, &result)
}

fn task_finetune(spec: &RunSpec) -> Result<()> {
    let (train, test) = datasets(spec)?;
    let target = load_or_train_target(spec, &train, &test)?;
    gate_floor(&target, &test, spec.target.floor)?;
    let src = spec
        .pretrained
        .clone()
        .unwrap_or_else(|| spec.out.join("s1.ckpt"));
    let pretrained = require_ckpt(&src, "pretrained student")?;

    let mut cfg = spec.extraction.clone();
    if cfg.method != Method::DualStudents {
        return Err(Error::Config(
            "finetune runs the dual_students method; set extraction method accordingly".into(),
        ));
    }
    let nominal = cfg
        .query_budget
        .unwrap_or(cfg.epochs as u64 * cfg.queries_per_epoch());
    cfg.query_budget = Some(spec.finetune_budget.unwrap_or_else(|| (nominal / 20).max(1)));

    let mut oracle = Oracle::from_mlp(target.clone(), cfg.label_mode, cfg.query_budget)?;
    let domain = DataDomain::unit(spec.dataset.dim);
    let mut evaluator = Evaluator::new(target.clone(), test.xs.clone(), cfg.label_mode, spec.seed);
    evaluator.norm = spec.fidelity_norm;
    evaluator.fd_directions = cfg.fd_directions;
    evaluator.fd_step = cfg.fd_step;
    evaluator.fidelity_samples = spec.fidelity_samples;
    evaluator.hist_samples = spec.hist_samples;
    let mut hook = |snap: &EvalSnapshot, oracle: &mut Oracle| evaluator.row(snap, oracle);
    let result = finetune_with_ds(&pretrained, &cfg, &mut oracle, &domain, Some(&mut hook))?;
    save_run_outputs(spec, &result)
}

fn task_grad_fidelity(spec: &RunSpec) -> Result<()> {
    let (train, test) = datasets(spec)?;
    let target = load_or_train_target(spec, &train, &test)?;
    let s1 = require_ckpt(&spec.out.join("s1.ckpt"), "student")?;
    let s2_path = spec.out.join("s2.ckpt");
    let s2 = s2_path
        .exists()
        .then(|| load_checkpoint(&s2_path).map(|c| c.net))
        .transpose()?;
    let generator = require_ckpt(&spec.out.join("generator.ckpt"), "generator")?;

    let cfg = &spec.extraction;
    let mut oracle = Oracle::from_mlp(target.clone(), cfg.label_mode, None)?;
    let mut rng = substream(spec.seed, "eval");
    let d_z = generator.input_dim();
    let n = spec.fidelity_samples;
    let z = Tensor::from_raw(
        vec![n, d_z],
        (0..n * d_z).map(|_| rng.gen_range(0.0..1.0)).collect(),
    );
    let xs = generator.infer(&z)?;
    let loss = match cfg.label_mode {
        LabelMode::Soft => LossKind::L1,
        LabelMode::Hard => LossKind::Ce,
    };

    let mut csv = String::from("surrogate,loss,norm,samples,excluded,mean,median\n");
    if let Some(s2) = &s2 {
        let rep = grad_fidelity(
            &target,
            &Surrogate::Pair { s1: &s1, s2 },
            &xs,
            loss,
            spec.fidelity_norm,
            None,
            None,
        )?;
        csv.push_str(&format!(
            "dual_students,{},{},{n},{},{},{}\n",
            loss.name(),
            spec.fidelity_norm.name(),
            rep.excluded,
            rep.mean,
            rep.median
        ));
    }
    let rep = grad_fidelity(
        &target,
        &Surrogate::FdEstimator {
            student: &s1,
            directions: cfg.fd_directions,
            step: cfg.fd_step,
        },
        &xs,
        loss,
        spec.fidelity_norm,
        Some(&mut oracle),
        Some(&mut rng),
    )?;
    csv.push_str(&format!(
        "fd,{},{},{n},{},{},{}\n",
        loss.name(),
        spec.fidelity_norm.name(),
        rep.excluded,
        rep.mean,
        rep.median
    ));
    fs::write(spec.out.join("fidelity.csv"), csv)?;
    Ok(())
}

fn task_attack(spec: &RunSpec) -> Result<()> {
    if spec.attacks.is_empty() {
        return Err(Error::Config(
            "attack_eval needs at least one [attack] section".into(),
        ));
    }
    let (train, test) = datasets(spec)?;
    let target = load_or_train_target(spec, &train, &test)?;
    let domain = DataDomain::unit(spec.dataset.dim);
    let mut oracle = Oracle::from_mlp(target.clone(), spec.extraction.label_mode, None)?;

    let mut student: Option<Mlp> = None;
    let mut data_proxy: Option<Mlp> = None;
    let mut csv = String::from(
        "proxy,kind,targeted,epsilon,steps,step_size,random_start,\
         n_total,n_evaluated,n_success,success_rate\n",
    );
    for a in &spec.attacks {
        let proxy: &Mlp = match a.proxy {
            ProxySource::WhiteboxTarget => &target,
            ProxySource::ExtractedStudent => {
                if student.is_none() {
                    student = Some(require_ckpt(&spec.out.join("s1.ckpt"), "student")?);
                }
                student.as_ref().unwrap()
            }
            ProxySource::DataProxy => {
                if data_proxy.is_none() {
                    let path = spec.out.join("data_proxy.ckpt");
                    data_proxy = Some(if path.exists() {
                        load_checkpoint(&path)?.net
                    } else {
                        let (net, _) = train_target(
                            &train,
                            &test,
                            spec.dataset.classes,
                            &spec.target,
                            spec.seed,
                            "data_proxy",
                        )?;
                        save_checkpoint(&path, &net, spec.seed, "data_proxy")?;
                        net
                    });
                }
                data_proxy.as_ref().unwrap()
            }
        };
        let report = transfer_eval(&mut oracle, proxy, &a.cfg, &test.xs, &test.ys, &domain)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            a.proxy.name(),
            a.cfg.kind.name(),
            a.cfg.targeted,
            a.cfg.epsilon,
            a.cfg.steps,
            a.cfg.step_size,
            a.cfg.random_start,
            report.n_total,
            report.n_evaluated,
            report.n_success,
            report.success_rate
        ));
    }
    fs::write(spec.out.join("attacks.csv"), csv)?;
    Ok(())
}

fn push_section(s: &mut String, title: &str) {
    s.push('\n');
    s.push_str(title);
    s.push('\n');
    s.push_str(&"-".repeat(title.len()));
    s.push('\n');
}

/// Build report.txt from the artifacts present in a run directory. The
/// result depends only on those files, so rerunning the report task
/// reproduces it byte for byte.
pub fn compose_report(out: &Path) -> Result<String> {
    let mut s = String::from("run report\n==========\n");

    let error_path = out.join("error.txt");
    if error_path.exists() {
        push_section(&mut s, "error");
        s.push_str(&fs::read_to_string(&error_path)?);
    }

    let target_path = out.join("target.txt");
    if target_path.exists() {
        push_section(&mut s, "target");
        s.push_str(&fs::read_to_string(&target_path)?);
    }

    let metrics_path = out.join("metrics.csv");
    if metrics_path.exists() {
        let rows = read_metrics_csv(&metrics_path)?;
        if let Some(last) = rows.last() {
            push_section(&mut s, "extraction");
            s.push_str(&format!(
                "evaluation rows {}\nfinal epoch {} after {} queries\n",
                rows.len(),
                last.epoch,
                last.queries
            ));
            s.push_str(&format!(
                "agreement: s1 {}, s2 {}, ensemble {}\n",
                last.agreement_s1, last.agreement_s2, last.agreement_ensemble
            ));
            s.push_str(&format!(
                "grad fidelity: dual_students {}, fd {}\n",
                last.grad_fidelity_ds, last.grad_fidelity_fd
            ));
            s.push_str(&format!("tv from uniform: {}\n", last.tv_from_uniform));

            push_section(&mut s, "queries to agreement (ensemble)");
            for (t, q) in queries_to_accuracy(&rows, &[0.75, 0.80, 0.85])? {
                match q {
                    Some(q) => s.push_str(&format!("{t}: {q}\n")),
                    None => s.push_str(&format!("{t}: not reached\n")),
                }
            }
        }
    }

    let class_map_path = out.join("class_map.txt");
    if class_map_path.exists() {
        push_section(&mut s, "discovered classes");
        s.push_str(&fs::read_to_string(&class_map_path)?);
    }

    let ledger_path = out.join("ledger.json");
    if ledger_path.exists() {
        let ledger = read_ledger(&ledger_path)?;
        push_section(&mut s, "ledger");
        s.push_str(&format!("total queries: {}\n", ledger.total_samples));
        s.push_str(&format!("truncated: {}\n", ledger.truncated));
        for (phase, n) in &ledger.by_phase {
            s.push_str(&format!("  {phase}: {n}\n"));
        }
    }

    let fidelity_path = out.join("fidelity.csv");
    if fidelity_path.exists() {
        push_section(&mut s, "gradient fidelity");
        for line in fs::read_to_string(&fidelity_path)?.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 7 {
                s.push_str(&format!(
                    "{} ({} loss, {} norm, {} samples, {} excluded): mean {}, median {}\n",
                    f[0], f[1], f[2], f[3], f[4], f[5], f[6]
                ));
            }
        }
    }

    let attacks_path = out.join("attacks.csv");
    if attacks_path.exists() {
        push_section(&mut s, "attacks");
        for line in fs::read_to_string(&attacks_path)?.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 11 {
                let mode = if f[2] == "true" { "targeted" } else { "untargeted" };
                s.push_str(&format!(
                    "{} {} {mode} eps {}: fooled {}/{} = {}\n",
                    f[0], f[1], f[3], f[9], f[8], f[10]
                ));
            }
        }
    }

    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_config;

    fn tiny_spec(task: Task, out: &Path) -> RunSpec {
        let mut spec = parse_config(
            "[dataset]\n\
             n_train = 200\n\
             n_test = 120\n\
             noise = 0.02\n\
             [target]\n\
             epochs = 12\n\
             [extraction]\n\
             batch = 64\n\
             budget = 3000\n\
             [run]\n\
             fidelity_samples = 64\n\
             hist_samples = 500\n",
        )
        .unwrap();
        spec.task = task;
        spec.out = out.to_path_buf();
        spec.seed = 17;
        spec.finalize();
        spec
    }

    #[test]
    fn extract_writes_every_artifact_and_respects_the_budget() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(Task::Extract, &dir.path().join("a"));
        run(&spec).unwrap();
        for f in [
            "config.txt",
            "metrics.csv",
            "ledger.json",
            "report.txt",
            "target.ckpt",
            "target.txt",
            "s1.ckpt",
            "s2.ckpt",
            "generator.ckpt",
        ] {
            assert!(spec.out.join(f).exists(), "missing {f}");
        }
        assert!(!spec.out.join("error.txt").exists());

        let ledger = read_ledger(&spec.out.join("ledger.json")).unwrap();
        assert!(ledger.total_samples <= 3000);
        assert!(ledger.total_samples > 0);

        let rows = read_metrics_csv(&spec.out.join("metrics.csv")).unwrap();
        assert!(rows.len() >= 2);
        assert_eq!(rows[0].queries, 0);

        // The echo parses back to a spec that reruns to identical metrics.
        let echo = fs::read_to_string(spec.out.join("config.txt")).unwrap();
        let mut spec2 = parse_config(&echo).unwrap();
        spec2.out = dir.path().join("b");
        run(&spec2).unwrap();
        assert_eq!(
            fs::read(spec.out.join("metrics.csv")).unwrap(),
            fs::read(spec2.out.join("metrics.csv")).unwrap()
        );
        assert_eq!(
            fs::read(spec.out.join("ledger.json")).unwrap(),
            fs::read(spec2.out.join("ledger.json")).unwrap()
        );
    }

    #[test]
    fn report_task_regenerates_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(Task::Extract, &dir.path().join("run"));
        run(&spec).unwrap();
        let original = fs::read(spec.out.join("report.txt")).unwrap();
        fs::remove_file(spec.out.join("report.txt")).unwrap();

        let mut report_spec = spec.clone();
        report_spec.task = Task::Report;
        run(&report_spec).unwrap();
        assert_eq!(fs::read(spec.out.join("report.txt")).unwrap(), original);
    }

    #[test]
    fn floor_violations_are_explicit_and_preserved_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(Task::TrainTarget, &dir.path().join("weak"));
        spec.dataset.source = crate::harness::dataset::DataSource::Spirals;
        spec.dataset.noise = 0.3;
        spec.target.epochs = 1;
        spec.target.floor = 0.999;
        let err = run(&spec).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("below the floor"), "{msg}");
        assert!(spec.out.join("target.ckpt").exists());
        assert!(spec.out.join("error.txt").exists());
        let report = fs::read_to_string(spec.out.join("report.txt")).unwrap();
        assert!(report.contains("error"), "{report}");
    }

    #[test]
    fn finetune_defaults_to_five_percent_of_the_budget() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(Task::Extract, &dir.path().join("run"));
        run(&spec).unwrap();

        let mut ft = spec.clone();
        ft.task = Task::Finetune;
        run(&ft).unwrap();
        let ledger = read_ledger(&ft.out.join("ledger.json")).unwrap();
        assert!(ledger.total_samples <= 150, "{}", ledger.total_samples);
        assert!(ledger.total_samples > 0);
    }

    #[test]
    fn attack_task_writes_fooling_rates_the_report_picks_up() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(Task::AttackEval, &dir.path().join("atk"));
        spec.attacks = vec![
            AttackRun {
                cfg: AttackConfig::new(AttackKind::Fgsm, 0.1),
                proxy: ProxySource::WhiteboxTarget,
            },
            AttackRun {
                cfg: AttackConfig::new(AttackKind::Pgd, 0.1),
                proxy: ProxySource::DataProxy,
            },
        ];
        spec.finalize();
        run(&spec).unwrap();

        let csv = fs::read_to_string(spec.out.join("attacks.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        for line in csv.lines().skip(1) {
            let rate: f64 = line.split(',').last().unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&rate));
        }
        assert!(spec.out.join("data_proxy.ckpt").exists());
        let report = fs::read_to_string(spec.out.join("report.txt")).unwrap();
        assert!(report.contains("attacks"), "{report}");
        assert!(report.contains("whitebox_target fgsm untargeted"), "{report}");
    }

    #[test]
    fn grad_fidelity_task_reports_both_surrogates() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(Task::Extract, &dir.path().join("run"));
        run(&spec).unwrap();

        let mut gf = spec.clone();
        gf.task = Task::GradFidelity;
        gf.fidelity_samples = 32;
        run(&gf).unwrap();
        let csv = fs::read_to_string(gf.out.join("fidelity.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("dual_students,"));
        assert!(lines[2].starts_with("fd,"));
        for line in &lines[1..] {
            let mean: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
            assert!(mean.is_finite() && (0.0..=2.0).contains(&mean), "{line}");
        }
    }

    #[test]
    fn missing_checkpoints_fail_with_guidance() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(Task::AttackEval, &dir.path().join("none"));
        spec.attacks = vec![AttackRun::default_run()];
        spec.finalize();
        let err = run(&spec).unwrap_err();
        assert!(format!("{err}").contains("student checkpoint missing"));
    }
}
