use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use owcl_core::driver::{
    ablation_variants, load_checkpoint, save_checkpoint, AblationKind, Experiment, ExperimentConfig, RunSummary,
};
use owcl_core::verify::{run_suite, Mutation, VerifyOptions};
use owcl_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unusable configuration or arguments; nothing was written.
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Self::Config(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// What produced a run directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub config_hash: String,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ABLATION_FILE: &str = "ablation.csv";

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_metrics(out: &Path, recalls: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join(METRICS_FILE)).map_err(runtime)?;
    w.write_record(["stage", "R_n"]).map_err(runtime)?;
    for (i, r) in recalls.iter().enumerate() {
        w.write_record([(i + 1).to_string(), r.to_string()]).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

/// Trains the remaining stages, writing a checkpoint and metrics after each.
fn drive(mut exp: Experiment, out: &Path) -> Result<RunSummary> {
    let total = exp.num_stages();
    while !exp.is_finished() {
        let outcome = exp.run_next_stage()?;
        let bytes = save_checkpoint(&exp.checkpoint()?)?;
        fs::write(out.join(format!("stage_{}.owcl", outcome.stage)), bytes).map_err(runtime)?;
        write_metrics(out, exp.recalls())?;
        eprintln!("stage {}/{total}: R = {:.4}", outcome.stage, outcome.recall);
    }
    let summary = exp.summary()?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn start_run(cfg: ExperimentConfig, config_path: Option<&Path>, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    fs::write(out.join("config.json"), cfg.to_json() + "\n").map_err(runtime)?;
    write_json(
        &out.join("manifest.json"),
        &RunManifest {
            config_path: config_path.map(Path::to_path_buf),
            out_dir: out.to_path_buf(),
            config_hash: cfg.hash(),
        },
    )?;
    let exp = Experiment::new(cfg).map_err(runtime)?;
    drive(exp, out)
}

fn print_summary(s: &RunSummary) {
    println!("R_N {:.4}  F_N {:.4}  gap {:.4}  config {}", s.r_n, s.f_n, s.histogram_gap, &s.config_hash[..12]);
}

pub fn run(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<ExitCode> {
    let cfg = load_config(config, seed)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.hash()[..12]));
    let summary = start_run(cfg, Some(config), &out)?;
    print_summary(&summary);
    Ok(ExitCode::SUCCESS)
}

pub fn resume(checkpoint: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let bytes = fs::read(checkpoint)
        .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", checkpoint.display())))?;
    let record = load_checkpoint(&bytes).map_err(|e| CliError::Config(e.to_string()))?;
    let exp = Experiment::resume(&record).map_err(runtime)?;
    let out = match out {
        Some(o) => o.to_path_buf(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&out).map_err(runtime)?;
    if !out.join("config.json").exists() {
        fs::write(out.join("config.json"), exp.config.to_json() + "\n").map_err(runtime)?;
    }
    let summary = drive(exp, &out)?;
    print_summary(&summary);
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(kind: &str, config: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let kind: AblationKind = kind.parse()?;
    let base = load_config(config, seed)?;
    let variants = ablation_variants(kind, &base)?;
    fs::create_dir_all(out).map_err(runtime)?;
    let mut w = csv::Writer::from_path(out.join(ABLATION_FILE)).map_err(runtime)?;
    w.write_record(["variant", "R_N", "F_N"]).map_err(runtime)?;
    println!("{:<12} {:>8} {:>8}", "variant", "R_N", "F_N");
    for (name, cfg) in variants {
        eprintln!("variant {name}");
        let s = start_run(cfg, Some(config), &out.join(&name))?;
        w.write_record([name.clone(), s.r_n.to_string(), s.f_n.to_string()])
            .map_err(runtime)?;
        w.flush().map_err(runtime)?;
        println!("{name:<12} {:>8.4} {:>8.4}", s.r_n, s.f_n);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn verify(only: Option<&str>, mutate: Option<&str>) -> Result<ExitCode> {
    let mutation = mutate.map(str::parse::<Mutation>).transpose()?;
    let results = run_suite(only, &VerifyOptions { mutation })?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!("{} passed, {} failed", results.len() - failed.len(), failed.len());
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failing properties: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

pub fn report(out: &Path) -> Result<ExitCode> {
    let ablation = out.join(ABLATION_FILE);
    if ablation.exists() {
        let mut r = csv::Reader::from_path(&ablation).map_err(runtime)?;
        println!("{:<12} {:>8} {:>8}", "variant", "R_N", "F_N");
        for row in r.records() {
            let row = row.map_err(runtime)?;
            let num = |i: usize| row.get(i).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
            println!("{:<12} {:>8.4} {:>8.4}", row.get(0).unwrap_or("?"), num(1), num(2));
        }
        return Ok(ExitCode::SUCCESS);
    }
    let summary_path = out.join(SUMMARY_FILE);
    let text = fs::read_to_string(&summary_path)
        .map_err(|e| CliError::Config(format!("no finished run in {}: {e}", out.display())))?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(runtime)?;
    println!("{:>5} {:>8}", "stage", "R_n");
    for (i, r) in summary.recalls.iter().enumerate() {
        println!("{:>5} {:>8.4}", i + 1, r);
    }
    print_summary(&summary);
    Ok(ExitCode::SUCCESS)
}
