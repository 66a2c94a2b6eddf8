//! Minimal SVG line plots of aggregate curves.
//!
//! Curves are drawn inside a group whose transform maps data coordinates to
//! the canvas, so every point in the file is a literal `(step, value)` pair
//! from the aggregate CSV.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use super::suite::{read_aggregate, AggregateRow, MeanStd};
use crate::error::{Result, TedError};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

type Column = fn(&AggregateRow) -> Option<MeanStd>;

/// Metrics that get a plot, with their file stems.
pub const PLOTTED: [(&str, Column); 3] = [
    ("eval_return", |r| r.eval_return),
    ("ted_loss", |r| r.ted_loss),
    ("disentanglement", |r| r.disentanglement),
];

/// Renders one curve; `None` when the metric has no values.
pub fn render_svg(title: &str, points: &[(u64, MeanStd)], switch_step: u64) -> Option<String> {
    if points.is_empty() {
        return None;
    }
    let x0 = points.iter().map(|p| p.0).min()?.min(switch_step) as f64;
    let x1 = points.iter().map(|p| p.0).max()?.max(switch_step) as f64;
    let mut y0 = points.iter().map(|p| p.1.mean - p.1.std).fold(f64::INFINITY, f64::min);
    let mut y1 = points
        .iter()
        .map(|p| p.1.mean + p.1.std)
        .fold(f64::NEG_INFINITY, f64::max);
    if y1 - y0 < 1e-12 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let x_span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let pw = WIDTH - 2.0 * MARGIN;
    let ph = HEIGHT - 2.0 * MARGIN;
    let sx = pw / x_span;
    let sy = ph / (y1 - y0);
    let tx = MARGIN - x0 * sx;
    let ty = MARGIN + ph + y0 * sy;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#,
        WIDTH / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    )
    .unwrap();
    for (label, x, y, anchor) in [
        (format!("{x0}"), MARGIN, HEIGHT - MARGIN + 18.0, "start"),
        (format!("{x1}"), WIDTH - MARGIN, HEIGHT - MARGIN + 18.0, "end"),
        (format!("{y0:.3}"), MARGIN - 6.0, HEIGHT - MARGIN, "end"),
        (format!("{y1:.3}"), MARGIN - 6.0, MARGIN + 10.0, "end"),
    ] {
        writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{label}</text>"#
        )
        .unwrap();
    }
    writeln!(s, r#"<g transform="matrix({sx} 0 0 {} {tx} {ty})">"#, -sy).unwrap();

    let mut band = String::new();
    for (x, m) in points {
        write!(band, "{},{} ", x, m.mean + m.std).unwrap();
    }
    for (x, m) in points.iter().rev() {
        write!(band, "{},{} ", x, m.mean - m.std).unwrap();
    }
    writeln!(
        s,
        r##"<polygon class="band" points="{}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>"##,
        band.trim_end()
    )
    .unwrap();
    let mut line = String::new();
    for (x, m) in points {
        write!(line, "{},{} ", x, m.mean).unwrap();
    }
    writeln!(
        s,
        r##"<polyline class="mean" points="{}" fill="none" stroke="#1f77b4" stroke-width="2" vector-effect="non-scaling-stroke"/>"##,
        line.trim_end()
    )
    .unwrap();
    writeln!(
        s,
        r##"<line class="switch" x1="{switch_step}" y1="{y0}" x2="{switch_step}" y2="{y1}" stroke="#d62728" stroke-dasharray="6 4" vector-effect="non-scaling-stroke"/>"##
    )
    .unwrap();
    writeln!(s, "</g>\n</svg>").unwrap();
    Some(s)
}

/// Writes one SVG per plotted metric that has data into `out_dir`.
pub fn emit_plots(aggregate_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_aggregate(File::open(aggregate_csv)?, aggregate_csv)?;
    if rows.is_empty() {
        return Err(TedError::Parse {
            path: aggregate_csv.to_path_buf(),
            line: 2,
            message: "aggregate has no data rows".into(),
        });
    }
    let switch_step = rows[0].switch_step;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (stem, get) in PLOTTED {
        let points: Vec<(u64, MeanStd)> = rows.iter().filter_map(|r| get(r).map(|m| (r.step, m))).collect();
        if let Some(svg) = render_svg(stem, &points, switch_step) {
            let path = out_dir.join(format!("{stem}.svg"));
            fs::write(&path, svg)?;
            written.push(path);
        }
    }
    Ok(written)
}
