//! CSV rows with a fixed header, and the JSON mirror.

use std::io::Write;

use crate::config::fmt_num;
use crate::experiment::{Row, CODE_VERSION};

pub const HEADER: [&str; 19] = [
    "icase",
    "tol",
    "T",
    "theta",
    "exact",
    "residual_estimate",
    "hager",
    "n_steps",
    "wall_seconds",
    "two_lg",
    "p",
    "dt",
    "Tinf",
    "bvp_solves",
    "mean_newton",
    "status",
    "model",
    "config_hash",
    "code_version",
];

/// Column of `wall_seconds`, the only non-deterministic cell.
pub const WALL_COLUMN: usize = 8;

/// A number cell: `Inf` for overflow, empty when absent.
pub fn cell(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x == f64::INFINITY => "Inf".into(),
        Some(x) if x == f64::NEG_INFINITY => "-Inf".into(),
        Some(x) if x.is_nan() => "NaN".into(),
        Some(x) => fmt_num(x),
    }
}

pub fn record(row: &Row) -> Vec<String> {
    let im = row.im.as_ref();
    vec![
        row.case.index().to_string(),
        fmt_num(row.tol),
        fmt_num(row.t_final),
        cell(row.theta),
        cell(row.exact),
        cell(row.residual_estimate),
        cell(row.hager),
        row.n_steps.map(|n| n.to_string()).unwrap_or_default(),
        format!("{:.3}", row.wall_seconds),
        cell(row.global_error),
        im.map(|s| s.settings.p.to_string()).unwrap_or_default(),
        cell(im.map(|s| s.settings.dt)),
        cell(im.map(|s| s.settings.t_inf)),
        im.map(|s| s.bvp_solves.to_string()).unwrap_or_default(),
        cell(im.map(|s| s.mean_newton)),
        row.status.label(),
        row.model.to_string(),
        row.config_hash.clone(),
        CODE_VERSION.to_string(),
    ]
}

pub fn write_csv<W: Write>(out: W, rows: &[Row]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for row in rows {
        w.write_record(record(row))?;
    }
    w.flush()?;
    Ok(())
}

/// The CSV records as JSON objects keyed by column name.
pub fn to_json(rows: &[Row]) -> serde_json::Value {
    let objects = rows
        .iter()
        .map(|row| {
            let map = HEADER.iter().zip(record(row)).map(|(k, v)| (k.to_string(), serde_json::Value::String(v)));
            serde_json::Value::Object(map.collect())
        })
        .collect();
    serde_json::Value::Array(objects)
}
