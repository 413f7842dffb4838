//! `trace-analysis`: per-method tables of the recorded gradient norms and
//! term cosines, averaged over the seeds found in a trace directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use udslab::metrics::COSINE_SENTINEL;

use crate::experiment::TRACE_COLUMNS;
use crate::output::{fmt_f64, Csv};
use crate::ConfigError;

/// Fraction of trailing records averaged for the cosine tail statistic.
pub const TAIL_FRACTION: f64 = 0.2;

/// One parsed trace file: rows of `TRACE_COLUMNS`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub path: PathBuf,
    pub rows: Vec<[f64; 7]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodAnalysis {
    pub method: String,
    pub traces: usize,
    /// Seed-averaged rows; `step` must agree across seeds.
    pub rows: Vec<[f64; 7]>,
    /// Mean of `cos_recon` over the last [`TAIL_FRACTION`] of each trace,
    /// averaged over traces.
    pub tail_cos_recon: f64,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("{}: {what}", path.display()))
}

pub fn parse_trace(path: &Path) -> Result<Trace, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| corrupt(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| corrupt(path, "empty file"))?;
    if header != TRACE_COLUMNS.join(",") {
        return Err(corrupt(path, format!("unexpected header '{header}'")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != TRACE_COLUMNS.len() {
            return Err(corrupt(
                path,
                format!("line {}: expected 7 fields, got {}", i + 2, cells.len()),
            ));
        }
        let mut row = [0.0; 7];
        for (slot, cell) in row.iter_mut().zip(&cells) {
            *slot = cell
                .parse()
                .map_err(|_| corrupt(path, format!("line {}: bad number '{cell}'", i + 2)))?;
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(corrupt(path, "no records"));
    }
    Ok(Trace {
        path: path.to_path_buf(),
        rows,
    })
}

/// Method name encoded in `trace_<METHOD>_seed<N>.csv`.
fn method_of(name: &str) -> Option<&str> {
    let stem = name.strip_prefix("trace_")?.strip_suffix(".csv")?;
    let (method, seed) = stem.rsplit_once("_seed")?;
    seed.parse::<u64>().ok()?;
    Some(method)
}

/// Mean of the non-sentinel values among the trailing `fraction` of `values`.
pub fn tail_mean(values: &[f64], fraction: f64) -> f64 {
    let n = ((values.len() as f64) * fraction).ceil().max(1.0) as usize;
    let tail: Vec<f64> = values[values.len().saturating_sub(n)..]
        .iter()
        .copied()
        .filter(|v| *v != COSINE_SENTINEL)
        .collect();
    if tail.is_empty() {
        COSINE_SENTINEL
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

pub fn analyse(dir: &Path) -> Result<Vec<MethodAnalysis>, ConfigError> {
    let entries = std::fs::read_dir(dir).map_err(|e| corrupt(dir, e))?;
    let mut groups: BTreeMap<String, Vec<Trace>> = BTreeMap::new();
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| corrupt(dir, e))?;
        if let Some(name) = entry.file_name().to_str() {
            names.push(name.to_string());
        }
    }
    names.sort();
    for name in names {
        if let Some(method) = method_of(&name) {
            let trace = parse_trace(&dir.join(&name))?;
            groups.entry(method.to_string()).or_default().push(trace);
        }
    }
    if groups.is_empty() {
        return Err(corrupt(dir, "no trace_<METHOD>_seed<N>.csv files"));
    }
    groups
        .into_iter()
        .map(|(method, traces)| {
            let len = traces[0].rows.len();
            for t in &traces {
                let aligned = t.rows.len() == len && t.rows.iter().zip(&traces[0].rows).all(|(a, b)| a[0] == b[0]);
                if !aligned {
                    return Err(corrupt(
                        &t.path,
                        "recorded steps differ from the other traces of this method",
                    ));
                }
            }
            let rows = (0..len)
                .map(|i| {
                    let mut row = [0.0; 7];
                    for (c, slot) in row.iter_mut().enumerate() {
                        let vals: Vec<f64> = traces
                            .iter()
                            .map(|t| t.rows[i][c])
                            .filter(|v| c < 4 || *v != COSINE_SENTINEL)
                            .collect();
                        *slot = if vals.is_empty() {
                            COSINE_SENTINEL
                        } else {
                            vals.iter().sum::<f64>() / vals.len() as f64
                        };
                    }
                    row
                })
                .collect();
            let tails: Vec<f64> = traces
                .iter()
                .map(|t| tail_mean(&t.rows.iter().map(|r| r[4]).collect::<Vec<_>>(), TAIL_FRACTION))
                .filter(|v| *v != COSINE_SENTINEL)
                .collect();
            let tail_cos_recon = if tails.is_empty() {
                COSINE_SENTINEL
            } else {
                tails.iter().sum::<f64>() / tails.len() as f64
            };
            Ok(MethodAnalysis {
                method,
                traces: traces.len(),
                rows,
                tail_cos_recon,
            })
        })
        .collect()
}

/// Writes `analysis_<METHOD>.csv` per method and `analysis_summary.csv`.
pub fn write_analysis(results: &[MethodAnalysis], out_dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut summary = Csv::new(&["method", "traces", "records", "tail_mean_cos_recon"]);
    for m in results {
        let mut csv = Csv::new(&TRACE_COLUMNS);
        for r in &m.rows {
            let mut cells = vec![format!("{}", r[0] as u64)];
            cells.push(if m.traces == 1 {
                format!("{}", r[1] as u64)
            } else {
                fmt_f64(r[1])
            });
            cells.extend(r[2..].iter().map(|v| fmt_f64(*v)));
            csv.row(&cells);
        }
        let path = out_dir.join(format!("analysis_{}.csv", m.method));
        csv.write(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        summary.row(&[
            m.method.clone(),
            m.traces.to_string(),
            m.rows.len().to_string(),
            fmt_f64(m.tail_cos_recon),
        ]);
    }
    let path = out_dir.join("analysis_summary.csv");
    summary
        .write(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
