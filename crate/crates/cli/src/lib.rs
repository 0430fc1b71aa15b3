//! Commands behind the `dualseq` binary. Each returns `Ok(())` or an error
//! carrying its exit code.

pub mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use dualseq::data::{parse_interactions, write_interactions, Interaction, Prepared, Split};
use dualseq::encoder::Variant;
use dualseq::encoder::{load_checkpoint, save_checkpoint};
use dualseq::evaluation::{evaluate, Task};
use dualseq::gradsuite::{run_suite, SuiteReport};
use dualseq::numerics::gradcheck::Options;
use dualseq::synth::generate;
use dualseq::training::{run_ablation_grid, train};
use dualseq::Error;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// A check ran and did not pass.
    CheckFailed(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    /// 0 success, 1 check failure, 2 config, 3 I/O, 4 numeric, 5 checkpoint
    /// mismatch.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::Parameter(_)
                | Error::Parse { .. }
                | Error::Schema { .. }
                | Error::Contract(_) => 2,
                Error::Io { .. } | Error::Json(_) => 3,
                Error::Numeric { .. } => 4,
                Error::Checkpoint(_) | Error::Dimension { .. } => 5,
            },
        }
    }
}

pub type CliResult = std::result::Result<(), CliError>;

/// Command-line values that take precedence over the config document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub task: Option<Task>,
    pub workers: Option<usize>,
    pub variant: Option<Variant>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> dualseq::Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.task {
            cfg.task = t;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        cfg.validate()
    }
}

pub fn load_config(path: Option<&Path>, o: &Overrides) -> dualseq::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    o.apply(&mut cfg)?;
    Ok(cfg)
}

fn create_parent(path: &Path) -> dualseq::Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> dualseq::Result<()> {
    create_parent(path)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes to `out` or, when absent, to stdout.
fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> dualseq::Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn read_log(path: &Path) -> dualseq::Result<Vec<Interaction>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(f))
}

/// Ground-truth sidecar next to a generated log: `log.jsonl` -> `log.truth.json`.
pub fn truth_path(log: &Path) -> PathBuf {
    log.with_extension("truth.json")
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> CliResult {
    let (log, truth) = generate(&cfg.synth_spec())?;
    create_parent(out)?;
    let f = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(f);
    write_interactions(&mut w, &log).map_err(|e| Error::io(out, e))?;
    w.flush().map_err(|e| Error::io(out, e))?;
    write_json(&truth_path(out), &truth)?;
    println!(
        "{} events for {} users written to {}",
        log.len(),
        cfg.num_users,
        out.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> CliResult {
    let data = cfg.require_data()?;
    let log = read_log(data)?;
    let prepared = Prepared::new(&log, &cfg.split())?;
    let lc = cfg.labels();
    let train_set = prepared.dataset(Split::Train, &lc)?;
    let val = prepared.dataset(Split::Val, &lc)?;
    let val = (!val.is_empty()).then_some(&val);
    let (model, report) = train(&train_set, val, &cfg.encoder(), &cfg.train())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_checkpoint(
        &out_dir.join("checkpoint.json"),
        &model,
        Some(&prepared.vocabs),
    )?;
    write_json(&out_dir.join("train_report.json"), &report)?;
    let last = report
        .epochs
        .last()
        .map(|e| e.loss.total)
        .unwrap_or(f64::NAN);
    println!(
        "trained {} epochs (best {}), final loss {last:.6}; outputs in {}",
        report.epochs.len(),
        report.best_epoch,
        out_dir.display()
    );
    Ok(())
}

/// Scores the test split of `data` with a saved model. The encoder settings
/// of `cfg` must be the ones the checkpoint was trained with.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: Option<&Path>,
) -> CliResult {
    let (model, vocabs) = load_checkpoint(checkpoint)?;
    if model.config != cfg.encoder() {
        return Err(Error::Checkpoint(format!(
            "{} was trained with different encoder settings than this config",
            checkpoint.display()
        ))
        .into());
    }
    let log = read_log(data)?;
    let mut prepared = Prepared::new(&log, &cfg.split())?;
    if let Some(v) = vocabs {
        prepared = prepared.with_vocabs(v);
    }
    let (ni, ns) = (prepared.vocabs.items.size(), prepared.vocabs.scenes.size());
    if ni != model.num_items || ns != model.num_scenes {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} items and {} scenes, data has {ni} and {ns}",
            model.num_items, model.num_scenes
        ))
        .into());
    }
    let lc = dualseq::data::LabelConfig {
        max_len: model.config.max_len,
        ..cfg.labels()
    };
    let test = prepared.dataset(Split::Test, &lc)?;
    let report = evaluate(&model, &test, cfg.task, &cfg.eval())?;
    emit(out, &report)?;
    Ok(())
}

pub fn gradient_report(
    instances: usize,
    seed: u64,
    flip_sign: bool,
) -> dualseq::Result<SuiteReport> {
    run_suite(
        instances,
        seed,
        Options {
            flip_sign,
            ..Options::default()
        },
    )
}

pub fn cmd_gradcheck(instances: usize, seed: u64, flip_sign: bool) -> CliResult {
    let report = gradient_report(instances, seed, flip_sign)?;
    for c in &report.checks {
        println!(
            "{:<32} worst {:.3e}  {}",
            c.name,
            c.worst,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} checks x {instances} instances in {:.1}s",
        report.checks.len(),
        report.seconds
    );
    if report.passed() {
        Ok(())
    } else {
        let bad: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::CheckFailed(bad.join(", ")))
    }
}

pub fn cmd_ablate(cfg: &RunConfig, out: Option<&Path>) -> CliResult {
    let data = cfg.require_data()?;
    let log = read_log(data)?;
    let prepared = Prepared::new(&log, &cfg.split())?;
    let lc = cfg.labels();
    let train_set = prepared.dataset(Split::Train, &lc)?;
    let val = prepared.dataset(Split::Val, &lc)?;
    let test = prepared.dataset(Split::Test, &lc)?;
    if test.is_empty() {
        return Err(Error::Config("test_fraction leaves no test users".into()).into());
    }
    let table = run_ablation_grid(
        &train_set,
        (!val.is_empty()).then_some(&val),
        &test,
        &cfg.encoder(),
        &cfg.train(),
        &cfg.eval(),
        cfg.task,
        cfg.grid,
    )?;
    emit(out, &table)?;
    Ok(())
}
