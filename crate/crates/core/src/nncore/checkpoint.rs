//! Plain-text network checkpoints.
//!
//! ```text
//! ted-densenet v1
//! layers 3
//! layer 0 relu 48 128
//! <one line per weight row, values space separated>
//! <one line of biases>
//! layer 1 ...
//! norm 6            (or `norm none`)
//! <gain line>
//! <bias line>
//! ```
//!
//! Values are written in shortest round-trip exponent form, so a reload is
//! bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::matrix::Matrix;
use super::net::{Activation, DenseLayer, DenseNet, LayerNorm};
use crate::error::{Result, TedError};

const MAGIC: &str = "ted-densenet v1";

pub fn to_string(net: &DenseNet) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "layers {}", net.layers.len()).unwrap();
    for (i, layer) in net.layers.iter().enumerate() {
        let (r, c) = layer.weights.shape();
        writeln!(out, "layer {i} {} {r} {c}", layer.activation.name()).unwrap();
        for row in 0..r {
            write_row(&mut out, layer.weights.row(row));
        }
        write_row(&mut out, layer.biases.as_slice());
    }
    match &net.final_norm {
        Some(ln) => {
            writeln!(out, "norm {}", ln.gain.cols()).unwrap();
            write_row(&mut out, ln.gain.as_slice());
            write_row(&mut out, ln.bias.as_slice());
        }
        None => writeln!(out, "norm none").unwrap(),
    }
    out
}

fn write_row(out: &mut String, values: &[f64]) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        write!(out, "{v:e}").unwrap();
        first = false;
    }
    out.push('\n');
}

pub fn save(net: &DenseNet, path: &Path) -> Result<()> {
    fs::write(path, to_string(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DenseNet> {
    let text = fs::read_to_string(path)?;
    parse(&text, path)
}

pub fn parse(text: &str, path: &Path) -> Result<DenseNet> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let err = |line: usize, message: String| TedError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
    };

    let (ln, magic) = next("header")?;
    if magic != MAGIC {
        return Err(err(ln, format!("bad header `{magic}`")));
    }
    let (ln, count_line) = next("layer count")?;
    let count: usize = count_line
        .strip_prefix("layers ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err(ln, "expected `layers <n>`".into()))?;

    let parse_values = |ln: usize, line: &str, expected: usize| -> Result<Vec<f64>> {
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(ln, format!("bad number: {e}")))?;
        if vals.len() != expected {
            return Err(err(ln, format!("expected {expected} values, found {}", vals.len())));
        }
        Ok(vals)
    };

    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let (ln, header) = next("layer header")?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "layer" || parts[1] != i.to_string() {
            return Err(err(ln, format!("expected `layer {i} <act> <rows> <cols>`")));
        }
        let activation =
            Activation::parse(parts[2]).ok_or_else(|| err(ln, format!("unknown activation `{}`", parts[2])))?;
        let rows: usize = parts[3].parse().map_err(|_| err(ln, "bad row count".into()))?;
        let cols: usize = parts[4].parse().map_err(|_| err(ln, "bad column count".into()))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, row) = next("weight row")?;
            data.extend(parse_values(ln, row, cols)?);
        }
        let (ln, bias_line) = next("bias row")?;
        let biases = parse_values(ln, bias_line, cols)?;
        if let Some(prev) = layers.last() {
            let prev: &DenseLayer = prev;
            if prev.weights.cols() != rows {
                return Err(err(ln, "layer shapes do not compose".into()));
            }
        }
        layers.push(DenseLayer {
            weights: Matrix::from_vec(rows, cols, data),
            biases: Matrix::row_vector(biases),
            activation,
        });
    }
    let (ln, norm_line) = next("norm header")?;
    let final_norm = match norm_line {
        "norm none" => None,
        other => {
            let n: usize = other
                .strip_prefix("norm ")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(ln, "expected `norm <n>` or `norm none`".into()))?;
            let (ln, g) = next("norm gain")?;
            let gain = parse_values(ln, g, n)?;
            let (ln, b) = next("norm bias")?;
            let bias = parse_values(ln, b, n)?;
            Some(LayerNorm {
                gain: Matrix::row_vector(gain),
                bias: Matrix::row_vector(bias),
            })
        }
    };
    if layers.is_empty() {
        return Err(err(2, "checkpoint has no layers".into()));
    }
    Ok(DenseNet { layers, final_norm })
}
