//! CSV output of [`MetricSeries`]: header `x,mean,stderr`, one row per point,
//! numbers written with 17 significant digits so they parse back exactly.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::montecarlo::MetricSeries;

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::config(format!("csv: {other:?}")),
    }
}

pub fn write_csv(path: &Path, series: &MetricSeries) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["x", "mean", "stderr"]).map_err(csv_error)?;
    for i in 0..series.len() {
        w.write_record([fmt17(series.x[i]), fmt17(series.mean[i]), fmt17(series.stderr[i])])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_csv`]; the name is taken from the stem.
pub fn read_csv(path: &Path) -> Result<MetricSeries> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let mut s = MetricSeries::new(name);
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::config(format!("{}: bad number in row {}", path.display(), i + 2)))
        };
        s.push(num(0)?, num(1)?, num(2)?);
    }
    Ok(s)
}

/// File-name-safe form of a series name: `/` becomes `.`.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '.' })
        .collect()
}

/// Writes each series to `<out>/<suite>/<name>_<hash>.csv`.
pub fn write_suite(out: &Path, suite: &str, series: &[MetricSeries], hash: &str) -> Result<Vec<PathBuf>> {
    series
        .iter()
        .map(|s| {
            let path = out.join(suite).join(format!("{}_{hash}.csv", file_stem(&s.name)));
            write_csv(&path, s)?;
            Ok(path)
        })
        .collect()
}
