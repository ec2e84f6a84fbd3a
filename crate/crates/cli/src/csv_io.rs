//! Series files: header `t,<c1>,…,<cD>`, one row per time, every value in
//! 17-significant-digit scientific notation.

use std::io::Write;
use std::path::Path;

use gpfield_core::dynamics::Trajectory;

use crate::error::{CliError, CliResult};
use crate::fsutil::write_atomic;

/// Formats a float so that parsing it back gives the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `x1,…,xD`.
pub fn state_columns(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("x{i}")).collect()
}

/// `std_x1,…,std_xD`.
pub fn std_columns(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("std_x{i}")).collect()
}

pub fn series_to_bytes(columns: &[String], times: &[f64], rows: &[Vec<f64>]) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    let mut w = csv::Writer::from_writer(&mut out);
    let header: Vec<&str> = std::iter::once("t").chain(columns.iter().map(String::as_str)).collect();
    w.write_record(&header).map_err(|e| CliError::format("<memory>", e))?;
    for (t, row) in times.iter().zip(rows) {
        if row.len() != columns.len() {
            return Err(CliError::format("<memory>", "row width does not match header"));
        }
        let record: Vec<String> = std::iter::once(*t).chain(row.iter().copied()).map(fmt_f64).collect();
        w.write_record(&record).map_err(|e| CliError::format("<memory>", e))?;
    }
    w.flush().map_err(|e| CliError::io("<memory>", e))?;
    drop(w);
    Ok(out)
}

pub fn write_series(path: &Path, columns: &[String], times: &[f64], rows: &[Vec<f64>]) -> CliResult<()> {
    let bytes = series_to_bytes(columns, times, rows)?;
    write_atomic(path, |f| f.write_all(&bytes))
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> CliResult<()> {
    write_series(path, &state_columns(traj.dim()), traj.times(), traj.states())
}

/// Column names after `t`, times and rows of a series file.
pub type Series = (Vec<String>, Vec<f64>, Vec<Vec<f64>>);

pub fn read_series(path: &Path) -> CliResult<Series> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            _ => unreachable!(),
        },
        _ => CliError::format(path, e),
    })?;
    let header = r.headers().map_err(|e| CliError::format(path, e))?.clone();
    if header.get(0) != Some("t") || header.len() < 2 {
        return Err(CliError::format(path, "header must start with `t` followed by at least one column"));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::format(path, e))?;
        let values: Vec<f64> = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::format(path, format!("row {}: {e}", line + 1)))?;
        times.push(values[0]);
        rows.push(values[1..].to_vec());
    }
    Ok((columns, times, rows))
}

/// Reads a trajectory file with header `t,x1,…,xD`.
pub fn read_trajectory(path: &Path) -> CliResult<Trajectory> {
    let (columns, times, rows) = read_series(path)?;
    if columns != state_columns(columns.len()) {
        return Err(CliError::format(path, "expected header t,x1,...,xD"));
    }
    Trajectory::new(times, rows).map_err(|e| CliError::format(path, e))
}
