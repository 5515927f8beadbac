//! Runs scenarios to an output directory and sweeps one parameter.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::report::{read_metrics_csv, render_text, summarize, summarize_csv, Summary};
use crate::scenario::{parse_value, ScenarioError, ScenarioSource};
use crate::sim::write_metrics_csv;
use crate::world::{self, AuditStats, RunError, RunOptions, RunOutput};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("metrics csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("audit mismatch: report recomputed from metrics.csv differs")]
    AuditMismatch,
}

#[derive(Debug, Serialize)]
struct JsonReport<'a> {
    scenario: &'a str,
    seed: u64,
    events: u64,
    wall_time_ms: f64,
    audit: AuditJson,
    summary: &'a Summary,
}

#[derive(Debug, Serialize)]
struct AuditJson {
    enabled: bool,
    subframes_checked: u64,
    cells_checked: u64,
}

impl From<&AuditStats> for AuditJson {
    fn from(a: &AuditStats) -> Self {
        AuditJson {
            enabled: a.enabled,
            subframes_checked: a.subframes_checked,
            cells_checked: a.cells_checked,
        }
    }
}

#[derive(Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub output: RunOutput,
    pub summary: Summary,
}

/// Writes metrics.csv, paths.csv, report.txt and report.json into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path, wall_time_ms: f64) -> Result<Summary, RunnerError> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    write_metrics_csv(&mut w, &out.records, &out.names)?;
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("paths.csv"))?);
    writeln!(w, "time_us,flow,radio_slice,ran_slice,cn_slice")?;
    for p in &out.paths {
        writeln!(w, "{},{},{},{},{}", p.time, p.flow.0, p.radio.0, p.ran.0, p.cn.0)?;
    }
    w.flush()?;

    let summary = summarize(&out.records, out.duration_us);
    fs::write(dir.join("report.txt"), render_text(&out.scenario, out.seed, &summary))?;
    let json = JsonReport {
        scenario: &out.scenario,
        seed: out.seed,
        events: out.events,
        wall_time_ms,
        audit: (&out.audit).into(),
        summary: &summary,
    };
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&json).expect("report serializes"),
    )?;
    Ok(summary)
}

/// Recomputes the summary from `dir/metrics.csv` and compares it with `expected`.
pub fn audit_outputs(dir: &Path, expected: &Summary) -> Result<(), RunnerError> {
    let rows = read_metrics_csv(File::open(dir.join("metrics.csv"))?)?;
    if summarize_csv(&rows, expected.duration_us) == *expected {
        Ok(())
    } else {
        Err(RunnerError::AuditMismatch)
    }
}

pub fn run_source(source: &ScenarioSource, opts: RunOptions, dir: &Path, audit: bool) -> Result<Artifacts, RunnerError> {
    let sc = source.scenario()?;
    let started = Instant::now();
    let output = world::run(&sc, opts)?;
    let wall = started.elapsed().as_secs_f64() * 1000.0;
    let summary = write_outputs(&output, dir, wall)?;
    if audit {
        audit_outputs(dir, &summary)?;
    }
    Ok(Artifacts {
        dir: dir.to_path_buf(),
        output,
        summary,
    })
}

fn dir_name(i: usize, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{i:02}_{clean}")
}

/// Runs one scenario per value of `path`, in parallel, each into its own
/// subdirectory of `out`. Every variant is validated before any run starts.
pub fn sweep(
    source: &ScenarioSource,
    path: &str,
    values: &[String],
    opts: RunOptions,
    out: &Path,
    audit: bool,
) -> Result<Vec<(String, Result<Artifacts, RunnerError>)>, RunnerError> {
    let mut variants = Vec::new();
    for v in values {
        let src = source.with_param(path, &parse_value(v))?;
        src.scenario()?;
        variants.push((v.clone(), src));
    }
    let results = std::thread::scope(|scope| {
        let handles: Vec<_> = variants
            .iter()
            .enumerate()
            .map(|(i, (v, src))| {
                let dir = out.join(dir_name(i, v));
                scope.spawn(move || run_source(src, opts, &dir, audit))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect::<Vec<_>>()
    });
    Ok(values.iter().cloned().zip(results).collect())
}
