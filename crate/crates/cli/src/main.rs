//! `mfrl`: runs one experiment from a TOML config and writes its CSV tables,
//! a JSON report and a run manifest.
//!
//! Exit status: 0 all verdicts pass, 1 a verdict failed, 2 config error (no
//! artifacts written), 3 numeric blow-up.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use mfrl::harness::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentOutput, ReportBody};
use serde::Serialize;

const EXIT_VERDICT: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BLOW_UP: u8 = 3;

#[derive(Parser)]
#[command(name = "mfrl", version, about = "Finite vs. continuous-depth vs. mean-field ResNet training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Loss gap between discrete GD and the continuous-path flow vs. depth or width.
    Consistency(RunArgs),
    /// Particle flow from a separating initializer toward zero loss.
    Zeroloss(RunArgs),
    /// Residual of the energy dissipation identity along the particle flow.
    Dissipation(RunArgs),
    /// Discrete costate against the continuous costate as depth grows.
    AdjointLimit(RunArgs),
    /// Analytic gradient against central finite differences.
    GradCheck(RunArgs),
    /// Hungarian W2 against exhaustive permutations.
    W2Check(RunArgs),
    /// Homogeneity, Jacobian and growth probes of the activations.
    Assumptions(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; omitted keys take the experiment's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `runs/<experiment>`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Command {
    fn split(&self) -> (ExperimentKind, &RunArgs) {
        match self {
            Command::Consistency(a) => (ExperimentKind::Consistency, a),
            Command::Zeroloss(a) => (ExperimentKind::Zeroloss, a),
            Command::Dissipation(a) => (ExperimentKind::Dissipation, a),
            Command::AdjointLimit(a) => (ExperimentKind::AdjointLimit, a),
            Command::GradCheck(a) => (ExperimentKind::GradCheck, a),
            Command::W2Check(a) => (ExperimentKind::W2Check, a),
            Command::Assumptions(a) => (ExperimentKind::Assumptions, a),
        }
    }
}

#[derive(Serialize)]
struct VerdictEntry {
    passed: bool,
    detail: String,
}

#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    schema_version: u32,
    experiment: &'static str,
    status: &'static str,
    error: Option<String>,
    config: ExperimentConfig,
    config_hash: String,
    seeds: Vec<u64>,
    rng: &'static str,
    threads: usize,
    started_at: String,
    finished_at: String,
    walltime_s: f64,
    outputs: Vec<String>,
    verdicts: BTreeMap<String, VerdictEntry>,
}

fn load_config(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig, String> {
    let text = match &args.config {
        Some(path) => fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::from_toml_str(kind, &text).map_err(|e| match &args.config {
        Some(path) => format!("{}: {e}", path.display()),
        None => e.to_string(),
    })?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<usize, String> {
    let Ok(raw) = std::env::var("MFRL_THREADS") else {
        return Ok(rayon::current_num_threads());
    };
    let n: usize = raw.trim().parse().map_err(|_| format!("MFRL_THREADS must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        return Err("MFRL_THREADS must be a positive integer, got 0".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())?;
    Ok(n)
}

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, &target).with_context(|| format!("renaming to {}", target.display()))?;
    Ok(target)
}

fn seeds_of(cfg: &ExperimentConfig) -> Vec<u64> {
    match cfg.experiment {
        ExperimentKind::Consistency => (0..cfg.replicates as u64).map(|r| cfg.seed + r).collect(),
        _ => vec![cfg.seed],
    }
}

fn write_artifacts(
    out_dir: &Path,
    cfg: &ExperimentConfig,
    result: &mfrl::Result<ExperimentOutput>,
    mut manifest: RunManifest,
) -> Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut outputs = Vec::new();
    outputs.push(write_atomic(out_dir, "config.toml", cfg.to_toml_string().as_bytes())?);
    if let Ok(out) = result {
        for table in &out.tables {
            outputs.push(write_atomic(out_dir, &table.file_name, table.body.as_bytes())?);
        }
        let report = serde_json::to_string_pretty(&out.body)? + "\n";
        outputs.push(write_atomic(out_dir, "report.json", report.as_bytes())?);
    }
    manifest.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    manifest.outputs.push(out_dir.join("manifest.json").display().to_string());
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    write_atomic(out_dir, "manifest.json", json.as_bytes())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = cli.command.split();
    let cfg = match load_config(kind, args) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let threads = match configure_threads() {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let out_dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(kind.name()));

    let started_at = Utc::now();
    let clock = Instant::now();
    let result = run_experiment(&cfg);
    let walltime_s = clock.elapsed().as_secs_f64();

    let (status, code, error) = match &result {
        Ok(out) if out.passed() => ("pass", ExitCode::SUCCESS, None),
        Ok(_) => ("fail", ExitCode::from(EXIT_VERDICT), None),
        Err(e) if e.is_blow_up() => ("blow_up", ExitCode::from(EXIT_BLOW_UP), Some(e.to_string())),
        Err(e) => ("config_error", ExitCode::from(EXIT_CONFIG), Some(e.to_string())),
    };
    if status == "config_error" {
        eprintln!("config error: {}", error.unwrap_or_default());
        return code;
    }

    let verdicts = match &result {
        Ok(out) => out
            .verdicts
            .iter()
            .map(|v| (v.id.clone(), VerdictEntry { passed: v.passed, detail: v.detail.clone() }))
            .collect(),
        Err(_) => BTreeMap::new(),
    };
    let manifest = RunManifest {
        tool: "mfrl",
        version: env!("CARGO_PKG_VERSION"),
        schema_version: mfrl::harness::SCHEMA_VERSION,
        experiment: kind.name(),
        status,
        error: error.clone(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seeds: seeds_of(&cfg),
        rng: mfrl::measures::RNG_ALGORITHM,
        threads,
        started_at: started_at.to_rfc3339_opts(SecondsFormat::Millis, true),
        finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        walltime_s,
        outputs: Vec::new(),
        verdicts,
    };
    if let Err(e) = write_artifacts(&out_dir, &cfg, &result, manifest) {
        eprintln!("error writing artifacts: {e:#}");
        return ExitCode::from(EXIT_CONFIG);
    }

    match &result {
        Ok(out) => {
            for v in &out.verdicts {
                println!("{} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.detail);
            }
            if let ReportBody::Zeroloss(r) = &out.body {
                if let (Some(a), Some(b)) = (r.curve.first(), r.curve.last()) {
                    println!("loss {:.4e} -> {:.4e} over s in [0, {}]", a.loss, b.loss, b.s);
                }
            }
        }
        Err(e) => eprintln!("numeric blow-up: {e}"),
    }
    println!("artifacts in {}", out_dir.display());
    code
}
