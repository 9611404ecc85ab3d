//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a runtime error (reported as one JSON line
//! `{"error": <kind>, "message": <text>}` on stderr), 2 on a usage error.
//!
//! Parameters come from an optional flat `key = value` file (`--config`);
//! flags given on the command line override file values. Unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::logit::wald_table_text;
use crate::metrics::{roc_points, roc_points_csv};
use crate::pipeline::{begin, CascadeConfig, CascadeReport, ImportanceThreshold, PartialReport, SCHEMA_VERSION};
use crate::tabular::{load_csv, synth_dataset_with_shift, FeatureMatrix, DEFAULT_SHIFT};

pub const REPORT_FILE: &str = "cascade_report.json";
pub const WALD_FILE: &str = "wald_table.txt";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const ROC_FILE: &str = "roc_points.csv";
pub const STAGE1_FILE: &str = "stage1.json";
pub const STAGE2_FILE: &str = "stage2.json";
pub const STAGE3_FILE: &str = "stage3.json";

#[derive(Debug, Parser)]
#[command(name = "sli-cascade", version, about = "Forest screening, Wald refinement and k-NN classification")]
pub struct Cli {
    /// Worker threads for forest growing and cross-validation.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run all three stages and the held-out evaluation.
    Run(RunArgs),
    /// Stage 1: forest importance and correlation screening.
    Screen(RunArgs),
    /// Stage 2: backward elimination on the screened features.
    Refine(StageArgs),
    /// Stage 3: cross-validated choice of k.
    Train(StageArgs),
    /// Held-out evaluation of the trained cascade.
    Evaluate(StageArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat key=value parameter file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Name of the 0/1 label column.
    #[arg(long)]
    pub label: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub n_trees: Option<usize>,
    #[arg(long)]
    pub mtry: Option<usize>,
    #[arg(long)]
    pub min_leaf: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Fixed importance threshold.
    #[arg(long, conflicts_with = "threshold_rule")]
    pub importance_threshold: Option<f64>,
    /// `fixed` or `median-q3` (mean of median and upper quartile).
    #[arg(long)]
    pub threshold_rule: Option<String>,
    #[arg(long)]
    pub correlation_floor: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_elimination_rounds: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Stratify cross-validation folds by class.
    #[arg(long)]
    pub stratify: bool,
    /// Select features on all rows instead of the training split.
    #[arg(long)]
    pub select_on_all: bool,
}

#[derive(Debug, Clone, Args)]
pub struct StageArgs {
    #[arg(long, required = true)]
    pub data: PathBuf,
    #[arg(long, required = true)]
    pub label: String,
    /// Directory holding the previous stage's artifact.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(20..))]
    pub n: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub informative: u64,
    #[arg(long, default_value_t = 0)]
    pub noise: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class-mean separation of informative columns, in standard deviations.
    #[arg(long, default_value_t = DEFAULT_SHIFT)]
    pub shift: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Fully resolved run parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub data: PathBuf,
    pub label: String,
    pub out: PathBuf,
    pub cascade: CascadeConfig,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key = value", n + 1))?;
        let key = key.trim().replace('-', "_");
        if map.insert(key.clone(), value.trim().to_owned()).is_some() {
            return Err(format!("config key {key} given twice"));
        }
    }
    Ok(map)
}

#[derive(Default)]
struct Partial {
    data: Option<PathBuf>,
    label: Option<String>,
    out: Option<PathBuf>,
    cascade: CascadeConfig,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid value {value:?} for {key}")),
    }
}

fn threshold_rule(value: &str, current: ImportanceThreshold) -> std::result::Result<ImportanceThreshold, String> {
    match value.replace('_', "-").as_str() {
        "fixed" => Ok(match current {
            ImportanceThreshold::Fixed { .. } => current,
            ImportanceThreshold::MedianQ3Mean => ImportanceThreshold::Fixed { value: 6.0 },
        }),
        "median-q3" => Ok(ImportanceThreshold::MedianQ3Mean),
        _ => Err(format!("unknown threshold rule {value:?}")),
    }
}

fn apply_key(p: &mut Partial, key: &str, value: &str) -> std::result::Result<(), String> {
    let c = &mut p.cascade;
    match key {
        "data" => p.data = Some(PathBuf::from(value)),
        "label" => p.label = Some(value.to_owned()),
        "out" => p.out = Some(PathBuf::from(value)),
        "seed" => c.seed = parse_value(key, value)?,
        "train_fraction" => c.train_fraction = parse_value(key, value)?,
        "n_trees" => c.n_trees = parse_value(key, value)?,
        "mtry" => c.mtry = Some(parse_value(key, value)?),
        "min_leaf" => c.min_leaf = parse_value(key, value)?,
        "max_depth" => c.max_depth = Some(parse_value(key, value)?),
        "importance_threshold" => {
            c.criteria.importance = ImportanceThreshold::Fixed {
                value: parse_value(key, value)?,
            }
        }
        "threshold_rule" => c.criteria.importance = threshold_rule(value, c.criteria.importance)?,
        "correlation_floor" => c.criteria.correlation_floor = parse_value(key, value)?,
        "alpha" => c.alpha = parse_value(key, value)?,
        "max_elimination_rounds" => c.max_elimination_rounds = Some(parse_value(key, value)?),
        "k_max" => c.k_max = Some(parse_value(key, value)?),
        "folds" => c.folds = parse_value(key, value)?,
        "stratify" => c.stratify = parse_bool(key, value)?,
        "select_on_all" => c.select_on_all = parse_bool(key, value)?,
        _ => return Err(format!("unknown config key {key:?}")),
    }
    Ok(())
}

/// Merges the config file (if any) and the flags. `Err` is a usage message.
pub fn resolve_settings(args: &RunArgs) -> std::result::Result<RunSettings, String> {
    let mut p = Partial::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        for (key, value) in parse_config_text(&text)? {
            apply_key(&mut p, &key, &value)?;
        }
    }
    let c = &mut p.cascade;
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.train_fraction {
        c.train_fraction = v;
    }
    if let Some(v) = args.n_trees {
        c.n_trees = v;
    }
    if args.mtry.is_some() {
        c.mtry = args.mtry;
    }
    if let Some(v) = args.min_leaf {
        c.min_leaf = v;
    }
    if args.max_depth.is_some() {
        c.max_depth = args.max_depth;
    }
    if let Some(rule) = &args.threshold_rule {
        c.criteria.importance = threshold_rule(rule, c.criteria.importance)?;
    }
    if let Some(v) = args.importance_threshold {
        c.criteria.importance = ImportanceThreshold::Fixed { value: v };
    }
    if let Some(v) = args.correlation_floor {
        c.criteria.correlation_floor = v;
    }
    if let Some(v) = args.alpha {
        c.alpha = v;
    }
    if args.max_elimination_rounds.is_some() {
        c.max_elimination_rounds = args.max_elimination_rounds;
    }
    if args.k_max.is_some() {
        c.k_max = args.k_max;
    }
    if let Some(v) = args.folds {
        c.folds = v;
    }
    c.stratify |= args.stratify;
    c.select_on_all |= args.select_on_all;
    if let Some(v) = &args.data {
        p.data = Some(v.clone());
    }
    if let Some(v) = &args.label {
        p.label = Some(v.clone());
    }
    if let Some(v) = &args.out {
        p.out = Some(v.clone());
    }
    p.cascade.validate().map_err(|e| e.to_string())?;
    Ok(RunSettings {
        data: p.data.ok_or("the following required argument was not provided: --data")?,
        label: p.label.ok_or("the following required argument was not provided: --label")?,
        out: p.out.unwrap_or_else(|| PathBuf::from("out")),
        cascade: p.cascade,
    })
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| io_error(&path, e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(dir, name, &text)
}

/// Reads a stage artifact, checking its schema version before decoding.
fn read_artifact(dir: &Path, name: &str, artifact: &'static str) -> Result<PartialReport> {
    let path = dir.join(name);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingArtifact(artifact)),
        Err(e) => return Err(io_error(&path, e)),
    };
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value.get("schema_version").and_then(serde_json::Value::as_u64);
    if found != Some(u64::from(SCHEMA_VERSION)) {
        return Err(Error::SchemaVersion {
            artifact,
            expected: SCHEMA_VERSION,
            found: found.map_or(0, |v| v.min(u64::from(u32::MAX)) as u32),
        });
    }
    Ok(serde_json::from_value(value)?)
}

/// Writes every artifact of a finished cascade.
pub fn write_report(dir: &Path, report: &CascadeReport) -> Result<()> {
    write_json(dir, REPORT_FILE, report)?;
    write_text(dir, WALD_FILE, &wald_table_text(&report.stage2.wald_table))?;
    write_json(dir, EVALUATION_FILE, &report.evaluation)?;
    let labels: Vec<u8> = report.evaluation.predictions.iter().map(|p| p.label).collect();
    let scores: Vec<f64> = report.evaluation.predictions.iter().map(|p| p.proba).collect();
    write_text(dir, ROC_FILE, &roc_points_csv(&roc_points(&labels, &scores)?))
}

fn load(path: &Path, label: &str) -> Result<FeatureMatrix> {
    load_csv(path, label)
}

fn unwrap_stage(e: Error) -> Error {
    match e {
        Error::Stage { source, .. } => *source,
        other => other,
    }
}

fn cmd_run(s: &RunSettings) -> Result<()> {
    let data = load(&s.data, &s.label)?;
    let report = crate::pipeline::run_cascade(&data, &s.cascade).map_err(unwrap_stage)?;
    write_report(&s.out, &report)?;
    println!("{}", report.summary);
    print!("{}", report.evaluation.metrics.to_text());
    Ok(())
}

fn cmd_screen(s: &RunSettings) -> Result<()> {
    let data = load(&s.data, &s.label)?;
    let mut partial = begin(&data, &s.cascade)?;
    partial.run_stage1(&data)?;
    write_json(&s.out, STAGE1_FILE, &partial)?;
    let kept = &partial.stage1.as_ref().map_or(0, |r| r.kept.len());
    println!("{kept} of {} features kept", partial.features.len());
    Ok(())
}

fn require<T>(v: Option<T>, artifact: &'static str) -> Result<T> {
    v.ok_or_else(|| Error::ArtifactMismatch {
        artifact,
        reason: "the stage result is absent".into(),
    })
}

fn cmd_refine(a: &StageArgs) -> Result<()> {
    let mut partial = read_artifact(&a.out, STAGE1_FILE, "stage1")?;
    require(partial.stage1.as_ref(), "stage1")?;
    let data = load(&a.data, &a.label)?;
    partial.run_stage2(&data)?;
    let stage2 = require(partial.stage2.as_ref(), "stage2")?;
    write_text(&a.out, WALD_FILE, &wald_table_text(&stage2.wald_table))?;
    println!("{} features survive elimination", stage2.trace.surviving.len());
    write_json(&a.out, STAGE2_FILE, &partial)
}

fn cmd_train(a: &StageArgs) -> Result<()> {
    let mut partial = read_artifact(&a.out, STAGE2_FILE, "stage2")?;
    require(partial.stage2.as_ref(), "stage2")?;
    let data = load(&a.data, &a.label)?;
    partial.run_stage3(&data)?;
    let stage3 = require(partial.stage3.as_ref(), "stage3")?;
    print!("{}", stage3.selection.to_text());
    write_json(&a.out, STAGE3_FILE, &partial)
}

fn cmd_evaluate(a: &StageArgs) -> Result<()> {
    let partial = read_artifact(&a.out, STAGE3_FILE, "stage3")?;
    require(partial.stage3.as_ref(), "stage3")?;
    let data = load(&a.data, &a.label)?;
    let report = partial.finish(&data)?;
    write_report(&a.out, &report)?;
    println!("{}", report.summary);
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let data = synth_dataset_with_shift(a.n as usize, a.informative as usize, a.noise as usize, a.shift, a.seed)?;
    data.write_csv(&a.out, "group")
}

fn usage_error(message: &str) -> i32 {
    let mut cmd = Cli::command();
    cmd.error(ErrorKind::ArgumentConflict, message).print().ok();
    2
}

fn execute(command: &Command) -> Result<(), i32> {
    let result = match command {
        Command::Run(args) | Command::Screen(args) => {
            let settings = resolve_settings(args).map_err(|m| usage_error(&m))?;
            if matches!(command, Command::Run(_)) {
                cmd_run(&settings)
            } else {
                cmd_screen(&settings)
            }
        }
        Command::Refine(a) => cmd_refine(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Synth(a) => cmd_synth(a),
    };
    result.map_err(|e| {
        let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
        eprintln!("{line}");
        1
    })
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let run = || match execute(&cli.command) {
        Ok(()) => 0,
        Err(code) => code,
    };
    match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n as usize).build() {
            Ok(pool) => pool.install(run),
            Err(e) => {
                eprintln!("{}", serde_json::json!({ "error": "threads", "message": e.to_string() }));
                1
            }
        },
        None => run(),
    }
}
