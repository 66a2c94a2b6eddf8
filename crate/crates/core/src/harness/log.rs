//! Per-run CSV log rows.

use std::io::{Read, Write};
use std::path::Path;

use crate::dismetric::{MetricConfig, MetricReport};
use crate::error::{Result, TedError};

pub const LOG_COLUMNS: [&str; 8] = [
    "seed",
    "step",
    "phase",
    "eval_return_mean",
    "eval_return_std",
    "td_loss",
    "ted_loss",
    "disentanglement",
];

pub const ZERO_SHOT_COLUMN: &str = "zero_shot_return_mean";

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub seed: u64,
    pub step: u64,
    /// `train`, `test` or `error`.
    pub phase: String,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub td_loss: Option<f64>,
    pub ted_loss: Option<f64>,
    pub disentanglement: Option<f64>,
    pub zero_shot_return_mean: Option<f64>,
    /// Whether the zero-shot column is part of the schema.
    pub zero_shot_column: bool,
}

impl LogRow {
    pub fn error(seed: u64, step: u64, zero_shot_column: bool) -> Self {
        LogRow {
            seed,
            step,
            phase: "error".into(),
            eval_return_mean: None,
            eval_return_std: None,
            td_loss: None,
            ted_loss: None,
            disentanglement: None,
            zero_shot_return_mean: None,
            zero_shot_column,
        }
    }

    pub fn is_error(&self) -> bool {
        self.phase == "error"
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_header<W: Write>(w: &mut csv::Writer<W>, zero_shot: bool) -> Result<()> {
    let mut cols: Vec<&str> = LOG_COLUMNS.to_vec();
    if zero_shot {
        cols.push(ZERO_SHOT_COLUMN);
    }
    w.write_record(&cols)?;
    Ok(())
}

pub fn write_row<W: Write>(w: &mut csv::Writer<W>, row: &LogRow) -> Result<()> {
    let mut rec = vec![
        row.seed.to_string(),
        row.step.to_string(),
        row.phase.clone(),
        fmt_opt(row.eval_return_mean),
        fmt_opt(row.eval_return_std),
        fmt_opt(row.td_loss),
        fmt_opt(row.ted_loss),
        fmt_opt(row.disentanglement),
    ];
    if row.zero_shot_column {
        rec.push(fmt_opt(row.zero_shot_return_mean));
    }
    w.write_record(&rec)?;
    Ok(())
}

pub(crate) fn parse_opt(field: &str, path: &Path, line: usize, column: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse::<f64>().map(Some).map_err(|_| TedError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad value `{field}` in column {column}"),
    })
}

/// Parses a run log. `path` is used for error messages only.
pub fn read_log<R: Read>(input: R, path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(input);
    let headers = reader.headers()?.clone();
    let zero_shot = match headers.len() {
        8 => false,
        9 if &headers[8] == ZERO_SHOT_COLUMN => true,
        _ => {
            return Err(TedError::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "unexpected log header".into(),
            })
        }
    };
    if headers.iter().take(8).ne(LOG_COLUMNS.iter().copied()) {
        return Err(TedError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "unexpected log header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let int = |idx: usize| -> Result<u64> {
            rec[idx].parse().map_err(|_| TedError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("bad integer in column {}", LOG_COLUMNS[idx]),
            })
        };
        let opt = |idx: usize, name: &str| parse_opt(&rec[idx], path, line, name);
        rows.push(LogRow {
            seed: int(0)?,
            step: int(1)?,
            phase: rec[2].to_string(),
            eval_return_mean: opt(3, LOG_COLUMNS[3])?,
            eval_return_std: opt(4, LOG_COLUMNS[4])?,
            td_loss: opt(5, LOG_COLUMNS[5])?,
            ted_loss: opt(6, LOG_COLUMNS[6])?,
            disentanglement: opt(7, LOG_COLUMNS[7])?,
            zero_shot_return_mean: if zero_shot { opt(8, ZERO_SHOT_COLUMN)? } else { None },
            zero_shot_column: zero_shot,
        });
    }
    Ok(rows)
}

pub fn read_log_file(path: &Path) -> Result<Vec<LogRow>> {
    read_log(std::fs::File::open(path)?, path)
}

/// Header of the metric CSV: fixed columns, then one accuracy per factor.
pub fn metric_columns(num_factors: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["seed", "samples", "B", "accuracy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((0..num_factors).map(|k| format!("per_factor_acc_{k}")));
    cols
}

/// Writes a header and one row for `report` to `out`.
pub fn write_metric_csv<W: Write>(out: W, seed: u64, config: &MetricConfig, report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metric_columns(report.per_factor.len()))?;
    let mut rec = vec![
        seed.to_string(),
        config.total_samples.to_string(),
        config.pairs_per_sample.to_string(),
        format!("{}", report.accuracy),
    ];
    rec.extend(report.per_factor.iter().map(|a| format!("{a}")));
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}
