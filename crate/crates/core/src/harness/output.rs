//! CSV sinks and plot-ready bundles.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::worldline::WorldlineHistory;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> OutputError + '_ {
    move |e| OutputError::Io { path: path.to_path_buf(), message: e.to_string() }
}

/// Header comment carried by every artifact.
pub fn hash_comment(hash: &str) -> String {
    format!("config_hash={hash}")
}

/// One row of a pass/fail table. `threshold == None` marks an informational row.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub value: f64,
    pub threshold: Option<f64>,
    pub passed: bool,
}

impl CheckRow {
    /// Passes when `value ≤ threshold`.
    pub fn at_most(check: &str, value: f64, threshold: f64) -> Self {
        CheckRow { check: check.into(), value, threshold: Some(threshold), passed: value <= threshold }
    }

    /// Passes when `value > threshold`.
    pub fn above(check: &str, value: f64, threshold: f64) -> Self {
        CheckRow { check: check.into(), value, threshold: Some(threshold), passed: value > threshold }
    }

    pub fn info(check: &str, value: f64) -> Self {
        CheckRow { check: check.into(), value, threshold: None, passed: true }
    }
}

fn csv_writer(path: &Path, comment: &str) -> Result<csv::Writer<BufWriter<File>>, OutputError> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(f, "# {comment}").map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(f))
}

/// Writes a table with a fixed header.
pub fn write_table(path: &Path, comment: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), OutputError> {
    let err = |e: csv::Error| OutputError::Io { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv_writer(path, comment)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_checks(path: &Path, comment: &str, rows: &[CheckRow]) -> Result<(), OutputError> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let verdict = match (r.threshold, r.passed) {
                (None, _) => "info",
                (Some(_), true) => "pass",
                (Some(_), false) => "fail",
            };
            vec![r.check.clone(), r.value.to_string(), r.threshold.map(|t| t.to_string()).unwrap_or_default(), verdict.to_string()]
        })
        .collect();
    write_table(path, comment, &["check", "value", "threshold", "verdict"], &body)
}

pub fn trajectory_path(dir: &Path, label: &str) -> PathBuf {
    dir.join(format!("trajectory_{label}.csv"))
}

/// Writes the samples at `t ≥ t0`.
pub fn write_trajectory(dir: &Path, label: &str, h: &WorldlineHistory, t0: f64, comment: &str) -> Result<(), OutputError> {
    let path = trajectory_path(dir, label);
    let samples: Vec<_> = h.samples().iter().filter(|s| s.t >= t0).copied().collect();
    let f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    crate::worldline::write_trajectory_csv(f, &samples, Some(comment)).map_err(|e| OutputError::Io { path: path.clone(), message: e.to_string() })
}

/// Reads a CSV written by this module: leading comment, header, numeric rows.
pub fn read_table(path: &Path) -> Result<(Option<String>, Vec<String>, Vec<Vec<String>>), OutputError> {
    let file = File::open(path).map_err(|_| OutputError::MissingArtifact(path.display().to_string()))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(io_err(path))?;
    let comment = first.strip_prefix("# ").map(|s| s.trim_end().to_string());
    let rest: Box<dyn std::io::Read> = if comment.is_some() { Box::new(reader) } else { Box::new(std::io::Read::chain(std::io::Cursor::new(first.into_bytes()), reader)) };
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(rest);
    let err = |e: csv::Error| OutputError::Io { path: path.to_path_buf(), message: e.to_string() };
    let header = rdr.headers().map_err(err)?.iter().map(str::to_string).collect();
    let rows = rdr.records().map(|r| r.map(|r| r.iter().map(str::to_string).collect()).map_err(err)).collect::<Result<_, _>>()?;
    Ok((comment, header, rows))
}

/// Files written by [`emit_plot_data`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotBundle {
    pub files: Vec<PathBuf>,
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize, OutputError> {
    header.iter().position(|h| h == name).ok_or_else(|| OutputError::MissingArtifact(format!("column {name} in {}", path.display())))
}

/// Derives per-figure CSVs from the artifacts found in `run_dir`.
pub fn emit_plot_data(run_dir: &Path, out_dir: &Path) -> Result<PlotBundle, OutputError> {
    let entries = std::fs::read_dir(run_dir).map_err(|_| OutputError::MissingArtifact(run_dir.display().to_string()))?;
    let mut names: Vec<String> = entries.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    let trajectories: Vec<&String> = names.iter().filter(|n| n.starts_with("trajectory_") && n.ends_with(".csv")).collect();
    let has = |n: &str| names.iter().any(|x| x == n);
    if trajectories.is_empty() && !has("asymptotic_gap.csv") && !has("pb_residuals.csv") {
        return Err(OutputError::MissingArtifact(format!("no run artifacts in {}", run_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut bundle = PlotBundle::default();

    for name in trajectories {
        let path = run_dir.join(name);
        let (comment, header, rows) = read_table(&path)?;
        let idx: Vec<usize> = ["t", "r1", "r2", "r3"].iter().map(|c| column(&header, c, &path)).collect::<Result<_, _>>()?;
        let body: Vec<Vec<String>> = rows.iter().map(|r| idx.iter().map(|&k| r[k].clone()).collect()).collect();
        let label = name.trim_start_matches("trajectory_").trim_end_matches(".csv");
        let out = out_dir.join(format!("projection_{label}.csv"));
        write_table(&out, comment.as_deref().unwrap_or(""), &["t", "x", "y", "z"], &body)?;
        bundle.files.push(out);
    }

    if has("diagnostics.csv") {
        let path = run_dir.join("diagnostics.csv");
        let (comment, header, rows) = read_table(&path)?;
        let mut idx = vec![column(&header, "t", &path)?];
        idx.extend(header.iter().enumerate().filter(|(_, h)| h.starts_with("defect_")).map(|(k, _)| k));
        let names: Vec<&str> = idx.iter().map(|&k| header[k].as_str()).collect();
        let body: Vec<Vec<String>> = rows.iter().map(|r| idx.iter().map(|&k| r[k].clone()).collect()).collect();
        let out = out_dir.join("constraint_drift.csv");
        write_table(&out, comment.as_deref().unwrap_or(""), &names, &body)?;
        bundle.files.push(out);
    }

    if has("asymptotic_gap.csv") {
        let path = run_dir.join("asymptotic_gap.csv");
        let (comment, header, rows) = read_table(&path)?;
        let idx: Vec<usize> = ["sigma", "self_force_gap", "max_position_gap"].iter().map(|c| column(&header, c, &path)).collect::<Result<_, _>>()?;
        let body: Vec<Vec<String>> = rows.iter().map(|r| idx.iter().map(|&k| r[k].clone()).collect()).collect();
        let out = out_dir.join("gap_vs_sigma.csv");
        write_table(&out, comment.as_deref().unwrap_or(""), &["sigma", "self_force_gap", "max_position_gap"], &body)?;
        bundle.files.push(out);
    }

    for table in ["pb_residuals.csv", "oracle_summary.csv", "no_interaction.csv"] {
        if has(table) {
            let path = run_dir.join(table);
            let (comment, header, rows) = read_table(&path)?;
            let names: Vec<&str> = header.iter().map(String::as_str).collect();
            let out = out_dir.join(format!("table_{table}"));
            write_table(&out, comment.as_deref().unwrap_or(""), &names, &rows)?;
            bundle.files.push(out);
        }
    }
    Ok(bundle)
}
