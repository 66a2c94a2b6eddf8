//! Multi-seed suites, aggregation, summaries and ablation sweeps.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{ConfigMap, ExperimentConfig};
use super::log::{fmt_opt, parse_opt, LogRow};
use super::run::{mean_std, run_to_writer};
use crate::error::{Result, TedError};
use crate::nncore::checkpoint;

pub const AGGREGATE_COLUMNS: [&str; 12] = [
    "step",
    "phase",
    "seeds",
    "eval_return_mean",
    "eval_return_std",
    "td_loss_mean",
    "td_loss_std",
    "ted_loss_mean",
    "ted_loss_std",
    "disentanglement_mean",
    "disentanglement_std",
    "switch_step",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub step: u64,
    pub phase: String,
    pub seeds: usize,
    pub eval_return: Option<MeanStd>,
    pub td_loss: Option<MeanStd>,
    pub ted_loss: Option<MeanStd>,
    pub disentanglement: Option<MeanStd>,
    pub switch_step: u64,
}

fn reduce(values: Vec<f64>) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let (mean, std) = mean_std(&values);
    Some(MeanStd { mean, std })
}

/// Per-step mean and population standard deviation across runs; error rows
/// are ignored.
pub fn aggregate(runs: &[Vec<LogRow>], switch_step: u64) -> Vec<AggregateRow> {
    let mut by_step: BTreeMap<u64, Vec<&LogRow>> = BTreeMap::new();
    for run in runs {
        for row in run.iter().filter(|r| !r.is_error()) {
            by_step.entry(row.step).or_default().push(row);
        }
    }
    by_step
        .into_iter()
        .map(|(step, rows)| {
            let phase = if rows.iter().all(|r| r.phase == rows[0].phase) {
                rows[0].phase.clone()
            } else {
                "mixed".to_string()
            };
            let collect = |f: fn(&LogRow) -> Option<f64>| reduce(rows.iter().filter_map(|r| f(r)).collect());
            AggregateRow {
                step,
                phase,
                seeds: rows.len(),
                eval_return: collect(|r| r.eval_return_mean),
                td_loss: collect(|r| r.td_loss),
                ted_loss: collect(|r| r.ted_loss),
                disentanglement: collect(|r| r.disentanglement),
                switch_step,
            }
        })
        .collect()
}

pub fn write_aggregate(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(AGGREGATE_COLUMNS)?;
    for r in rows {
        let split = |m: Option<MeanStd>| [fmt_opt(m.map(|v| v.mean)), fmt_opt(m.map(|v| v.std))];
        let mut rec = vec![r.step.to_string(), r.phase.clone(), r.seeds.to_string()];
        rec.extend(split(r.eval_return));
        rec.extend(split(r.td_loss));
        rec.extend(split(r.ted_loss));
        rec.extend(split(r.disentanglement));
        rec.push(r.switch_step.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_aggregate<R: Read>(input: R, path: &Path) -> Result<Vec<AggregateRow>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().ne(AGGREGATE_COLUMNS.iter().copied()) {
        return Err(TedError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "unexpected aggregate header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| TedError::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if rec.len() != AGGREGATE_COLUMNS.len() {
            return Err(TedError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} fields, found {}", AGGREGATE_COLUMNS.len(), rec.len()),
            });
        }
        let int = |idx: usize| -> Result<u64> {
            rec[idx].parse().map_err(|_| TedError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("bad integer in column {}", AGGREGATE_COLUMNS[idx]),
            })
        };
        let pair = |idx: usize| -> Result<Option<MeanStd>> {
            let mean = parse_opt(&rec[idx], path, line, AGGREGATE_COLUMNS[idx])?;
            let std = parse_opt(&rec[idx + 1], path, line, AGGREGATE_COLUMNS[idx + 1])?;
            Ok(mean.map(|mean| MeanStd {
                mean,
                std: std.unwrap_or(0.0),
            }))
        };
        rows.push(AggregateRow {
            step: int(0)?,
            phase: rec[1].to_string(),
            seeds: int(2)? as usize,
            eval_return: pair(3)?,
            td_loss: pair(5)?,
            ted_loss: pair(7)?,
            disentanglement: pair(9)?,
            switch_step: int(11)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    /// Evaluation return at the switch step.
    pub final_train_return: Option<f64>,
    /// Pre-switch return minus the lowest post-switch return.
    pub dip_depth: Option<f64>,
    pub recovery_step: Option<u64>,
    /// Trapezoidal area under the return curve from the switch step on.
    pub auc_post: Option<f64>,
    pub disentanglement_switch: Option<f64>,
    pub disentanglement_final: Option<f64>,
}

/// Returns within 5% of the pre-switch level count as recovered. For negative
/// returns that means at least `pre − 0.05·|pre|`.
pub fn recovery_threshold(pre: f64) -> f64 {
    pre - 0.05 * pre.abs()
}

/// First post-switch step whose return reaches the recovery threshold; the
/// switch step itself if the first post-switch evaluation already does.
pub fn recovery_step(points: &[(u64, f64)], switch_step: u64) -> Option<u64> {
    let pre = points.iter().find(|p| p.0 == switch_step)?.1;
    let threshold = recovery_threshold(pre);
    let mut post = points.iter().filter(|p| p.0 > switch_step);
    let first = post.next()?;
    if first.1 >= threshold {
        return Some(switch_step);
    }
    post.find(|p| p.1 >= threshold).map(|p| p.0)
}

pub fn trapezoid(points: &[(u64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as f64 * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

pub fn summarize(rows: &[LogRow], switch_step: u64) -> RunSummary {
    let seed = rows.first().map_or(0, |r| r.seed);
    let returns: Vec<(u64, f64)> = rows
        .iter()
        .filter(|r| !r.is_error())
        .filter_map(|r| r.eval_return_mean.map(|v| (r.step, v)))
        .collect();
    let pre = returns.iter().find(|p| p.0 == switch_step).map(|p| p.1);
    let post: Vec<(u64, f64)> = returns.iter().copied().filter(|p| p.0 >= switch_step).collect();
    let dip_depth = pre.and_then(|pre| {
        post.iter()
            .filter(|p| p.0 > switch_step)
            .map(|p| p.1)
            .reduce(f64::min)
            .map(|low| pre - low)
    });
    let scores: Vec<(u64, f64)> = rows
        .iter()
        .filter_map(|r| r.disentanglement.map(|d| (r.step, d)))
        .collect();
    RunSummary {
        seed,
        final_train_return: pre,
        dip_depth,
        recovery_step: recovery_step(&returns, switch_step),
        auc_post: (post.len() >= 2).then(|| trapezoid(&post)),
        disentanglement_switch: scores.iter().find(|p| p.0 == switch_step).map(|p| p.1),
        disentanglement_final: scores.last().map(|p| p.1),
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub runs: Vec<Vec<LogRow>>,
    pub summaries: Vec<RunSummary>,
    pub failed: Vec<(u64, String)>,
    pub aggregate: Vec<AggregateRow>,
    pub out_dir: PathBuf,
}

impl SuiteResult {
    pub fn mean_auc(&self) -> Option<f64> {
        let v: Vec<f64> = self.summaries.iter().filter_map(|s| s.auc_post).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Median recovery step with never-recovered runs ranked last.
    pub fn median_recovery(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .summaries
            .iter()
            .map(|s| s.recovery_step.map_or(f64::INFINITY, |x| x as f64))
            .collect();
        median(&mut v)
    }

    pub fn final_scores(&self) -> Vec<f64> {
        self.summaries.iter().filter_map(|s| s.disentanglement_final).collect()
    }
}

fn write_summary(path: &Path, summaries: &[RunSummary], failed: &[(u64, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record([
        "seed",
        "status",
        "final_train_return",
        "dip_depth",
        "recovery_step",
        "auc_post",
        "disentanglement_switch",
        "disentanglement_final",
    ])?;
    for s in summaries {
        w.write_record([
            s.seed.to_string(),
            "ok".to_string(),
            fmt_opt(s.final_train_return),
            fmt_opt(s.dip_depth),
            s.recovery_step.map(|x| x.to_string()).unwrap_or_default(),
            fmt_opt(s.auc_post),
            fmt_opt(s.disentanglement_switch),
            fmt_opt(s.disentanglement_final),
        ])?;
    }
    for (seed, msg) in failed {
        let mut rec = vec![seed.to_string(), format!("failed: {msg}")];
        rec.extend(std::iter::repeat_n(String::new(), 6));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one seed into `out_dir`, returning its rows.
pub fn run_seed(config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<Vec<LogRow>> {
    fs::create_dir_all(out_dir)?;
    let file = BufWriter::new(File::create(out_dir.join(format!("run_seed{seed}.csv")))?);
    let outcome = run_to_writer(config, seed, file, &mut |_, _| {})?;
    checkpoint::save(
        &outcome.switch_encoder,
        &out_dir.join(format!("encoder_seed{seed}_switch.txt")),
    )?;
    checkpoint::save(
        &outcome.agent.encoder,
        &out_dir.join(format!("encoder_seed{seed}_final.txt")),
    )?;
    Ok(outcome.rows)
}

/// Runs every seed, then writes `aggregate.csv`, `summary.csv` and the
/// effective `config.txt` to `out_dir`. Failed seeds are listed in the
/// summary and left out of the aggregate.
pub fn run_suite(config: &ExperimentConfig, seeds: &[u64], out_dir: &Path) -> Result<SuiteResult> {
    if seeds.is_empty() {
        return Err(TedError::config("run.seeds", "at least one seed is required"));
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.txt"), config.map.to_text())?;
    let results: Vec<(u64, Result<Vec<LogRow>>)> = seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(config, seed, out_dir)))
        .collect();
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(rows) => runs.push(rows),
            Err(e) => failed.push((seed, e.to_string())),
        }
    }
    let s = config.run.switch_step;
    let summaries: Vec<RunSummary> = runs.iter().map(|r| summarize(r, s)).collect();
    let aggregate = aggregate(&runs, s);
    write_aggregate(&aggregate, &out_dir.join("aggregate.csv"))?;
    write_summary(&out_dir.join("summary.csv"), &summaries, &failed)?;
    Ok(SuiteResult {
        runs,
        summaries,
        failed,
        aggregate,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Variant name and the overrides that define it relative to full TED.
pub fn ablation_variants(alphas: &[f64]) -> Vec<(String, Vec<(String, String)>)> {
    let mut out = vec![
        ("full".to_string(), vec![]),
        (
            "x_prime".to_string(),
            vec![("ted.samples".to_string(), "x_prime".to_string())],
        ),
        (
            "x_dprime".to_string(),
            vec![("ted.samples".to_string(), "x_dprime".to_string())],
        ),
        (
            "linear".to_string(),
            vec![("ted.classifier".to_string(), "linear".to_string())],
        ),
    ];
    for a in alphas {
        out.push((format!("alpha_{a}"), vec![("ted.alpha".to_string(), a.to_string())]));
    }
    out
}

/// Full TED on top of `base`: enabled, both negative kinds, TED classifier.
pub fn full_ted_map(base: &ConfigMap) -> Result<ConfigMap> {
    base.clone().with(&[
        ("ted.enabled", "true"),
        ("ted.samples", "both"),
        ("ted.classifier", "ted"),
    ])
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub name: String,
    pub map: ConfigMap,
    pub suite: SuiteResult,
}

/// Runs every ablation variant with the same seeds and writes
/// `ablation_summary.csv` ranking them by mean post-switch AUC and median
/// final disentanglement.
pub fn run_ablations(base: &ExperimentConfig, seeds: &[u64], out_dir: &Path) -> Result<Vec<VariantResult>> {
    let full = full_ted_map(&base.map)?;
    let mut results = Vec::new();
    for (name, overrides) in ablation_variants(&base.alphas) {
        let mut map = full.clone();
        for (k, v) in &overrides {
            map.set(k, v.as_str())?;
        }
        let config = ExperimentConfig::from_map(map.clone())?;
        let suite = run_suite(&config, seeds, &out_dir.join(&name))?;
        results.push(VariantResult { name, map, suite });
    }
    write_ablation_summary(&results, &full, &out_dir.join("ablation_summary.csv"))?;
    Ok(results)
}

fn ranks(values: &[Option<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let va = values[a].unwrap_or(f64::NEG_INFINITY);
        let vb = values[b].unwrap_or(f64::NEG_INFINITY);
        vb.total_cmp(&va)
    });
    let mut out = vec![0; values.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        out[i] = rank + 1;
    }
    out
}

fn write_ablation_summary(results: &[VariantResult], full: &ConfigMap, path: &Path) -> Result<()> {
    let aucs: Vec<Option<f64>> = results.iter().map(|r| r.suite.mean_auc()).collect();
    let scores: Vec<Option<f64>> = results.iter().map(|r| median(&mut r.suite.final_scores())).collect();
    let auc_rank = ranks(&aucs);
    let score_rank = ranks(&scores);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record([
        "variant",
        "changed_keys",
        "seeds",
        "auc_post_mean",
        "recovery_step_median",
        "disentanglement_final_median",
        "rank_auc",
        "rank_disentanglement",
    ])?;
    for (i, r) in results.iter().enumerate() {
        w.write_record([
            r.name.clone(),
            full.diff(&r.map).join(";"),
            r.suite.runs.len().to_string(),
            fmt_opt(aucs[i]),
            fmt_opt(r.suite.median_recovery().filter(|x| x.is_finite())),
            fmt_opt(scores[i]),
            auc_rank[i].to_string(),
            score_rank[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
