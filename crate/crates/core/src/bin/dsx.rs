//! Command-line front end for the extraction lab.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsx_core::harness::{apply_override, parse_config, run, RunSpec, Task};
use dsx_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dsx",
    about = "Data-free model extraction lab: dual students, a forward-differences \
             baseline, gradient-fidelity evaluation, and transfer attacks.",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file; defaults apply for anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra override, repeatable: section.key=value
    /// (for example --set extraction.batch=128). Setting extraction.method or
    /// extraction.label_mode resets that section's defaults, so pass those
    /// before finer extraction keys.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the black-box victim network.
    TrainTarget(Common),
    /// Extract a student from the victim with the configured method.
    Extract(Common),
    /// Fine-tune a pretrained student with the dual-student game.
    Finetune(Common),
    /// Measure gradient fidelity of the extracted surrogates.
    GradFidelity(Common),
    /// Craft adversarial samples on a proxy and score them on the victim.
    Attack(Common),
    /// Regenerate report.txt from the artifacts in the output directory.
    Report(Common),
}

impl Command {
    fn split(&self) -> (Task, &Common) {
        match self {
            Command::TrainTarget(c) => (Task::TrainTarget, c),
            Command::Extract(c) => (Task::Extract, c),
            Command::Finetune(c) => (Task::Finetune, c),
            Command::GradFidelity(c) => (Task::GradFidelity, c),
            Command::Attack(c) => (Task::AttackEval, c),
            Command::Report(c) => (Task::Report, c),
        }
    }
}

fn build_spec(task: Task, common: &Common) -> Result<RunSpec> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut spec = parse_config(&text)?;
    spec.task = task;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    if let Some(out) = &common.out {
        spec.out = out.clone();
    }
    for kv in &common.set {
        apply_override(&mut spec, kv)?;
    }
    spec.finalize();
    Ok(spec)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (task, common) = cli.command.split();
    match build_spec(task, common).and_then(|spec| run(&spec)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
