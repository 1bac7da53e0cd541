//! On-disk artifacts: CSV tables, JSON summaries and run manifests.
//!
//! Numbers are written with 17 significant digits so that every value
//! re-parses to the identical `f64`. Missing relative errors (theory below
//! the floor) are empty cells. The fixed-point rows of `trajectory.csv` carry
//! iteration `-1`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{DmfpError, Result};
use crate::harness::{ComparisonReport, ComparisonRow};

pub const TRAJECTORY_HEADER: &str =
    "iteration,s,a,emp_mean,emp_var,theory_mean,theory_var,rel_err_mean,rel_err_var";
pub const QQ_HEADER: &str = "theoretical_q,sample_q";

/// 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn trajectory_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 160);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.s,
            r.a,
            fmt_f64(r.emp_mean),
            fmt_f64(r.emp_var),
            fmt_f64(r.theory_mean),
            fmt_f64(r.theory_var),
            fmt_opt(r.rel_err_mean),
            fmt_opt(r.rel_err_var),
        );
    }
    out
}

pub fn qq_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from(QQ_HEADER);
    out.push('\n');
    for (t, s) in points {
        let _ = writeln!(out, "{},{}", fmt_f64(*t), fmt_f64(*s));
    }
    out
}

fn bad_row(line: usize, what: &str) -> DmfpError {
    DmfpError::InvalidArgument(format!("trajectory.csv line {line}: {what}"))
}

/// Inverse of [`trajectory_csv`].
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<ComparisonRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRAJECTORY_HEADER) {
        return Err(bad_row(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 9 {
                return Err(bad_row(i + 2, "expected 9 columns"));
            }
            let num = |c: &str| c.parse::<f64>().map_err(|_| bad_row(i + 2, "bad number"));
            let opt = |c: &str| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    num(c).map(Some)
                }
            };
            let int = |c: &str| c.parse::<usize>().map_err(|_| bad_row(i + 2, "bad index"));
            Ok(ComparisonRow {
                iteration: cells[0]
                    .parse()
                    .map_err(|_| bad_row(i + 2, "bad iteration"))?,
                s: int(cells[1])?,
                a: int(cells[2])?,
                emp_mean: num(cells[3])?,
                emp_var: num(cells[4])?,
                theory_mean: num(cells[5])?,
                theory_var: num(cells[6])?,
                rel_err_mean: opt(cells[7])?,
                rel_err_var: opt(cells[8])?,
            })
        })
        .collect()
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| DmfpError::io(path, e))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DmfpError::io(dir, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| {
        DmfpError::InvalidArgument(format!("cannot serialize {}: {e}", path.display()))
    })?;
    write_file(path, text + "\n")
}

#[derive(Serialize)]
struct Summary<'a> {
    metadata: &'a crate::harness::RunMetadata,
    snapshots: &'a [crate::harness::SnapshotSummary],
    ks: &'a [crate::harness::KsRecord],
    correlation: &'a Option<crate::harness::CorrelationSummary>,
}

/// Writes `trajectory.csv`, `qq.csv` and `summary.json` into `dir`, creating
/// it if needed, and returns the written paths.
pub fn write_report(report: &ComparisonReport, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let trajectory = dir.join("trajectory.csv");
    let qq = dir.join("qq.csv");
    let summary = dir.join("summary.json");
    write_file(&trajectory, trajectory_csv(&report.rows))?;
    write_file(&qq, qq_csv(&report.qq))?;
    write_json(
        &summary,
        &Summary {
            metadata: &report.metadata,
            snapshots: &report.summaries,
            ks: &report.ks,
            correlation: &report.correlation,
        },
    )?;
    Ok(vec![trajectory, qq, summary])
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_digest: String,
    pub seed: u64,
    pub versions: Versions,
    pub workers: Option<usize>,
    pub wall_time_secs: f64,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub dmfp_core: String,
    pub artifact_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Versions {
            dmfp_core: env!("CARGO_PKG_VERSION").into(),
            artifact_format: 1,
        }
    }
}

pub fn write_manifest(manifest: &Manifest, dir: &Path) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join("manifest.json");
    write_json(&path, manifest)?;
    Ok(path)
}
