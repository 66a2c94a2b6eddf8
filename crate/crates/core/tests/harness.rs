use std::fs;

use ted_core::harness::suite::{median, write_aggregate};
use ted_core::harness::{
    ablation_variants, aggregate, build_agent, emit_plots, read_aggregate, recovery_step, render_svg, run_to_writer,
    summarize, ConfigMap, ExperimentConfig, LogRow, MeanStd,
};
use ted_core::nncore::DenseNet;

fn tiny_map() -> ConfigMap {
    ConfigMap::default()
        .with(&[
            ("mixer.obs_dim", "8"),
            ("mixer.frame_stack", "2"),
            ("encoder.hidden", "16"),
            ("agent.q_hidden", "16"),
            ("env.horizon", "20"),
            ("agent.initial_steps", "50"),
            ("agent.batch_size", "16"),
            ("agent.epsilon_decay", "100"),
            ("run.total_steps", "200"),
            ("run.switch_step", "100"),
            ("run.eval_period", "25"),
            ("run.eval_episodes", "2"),
            ("metric.samples", "100"),
            ("metric.pairs", "4"),
            ("metric.iterations", "100"),
        ])
        .unwrap()
}

fn tiny(extra: &[(&str, &str)]) -> ExperimentConfig {
    ExperimentConfig::from_map(tiny_map().with(extra).unwrap()).unwrap()
}

fn log_bytes(config: &ExperimentConfig, seed: u64) -> Vec<u8> {
    let mut out = Vec::new();
    run_to_writer(config, seed, &mut out, &mut |_, _| {}).unwrap();
    out
}

#[test]
fn same_config_and_seed_reproduce_the_log_byte_for_byte() {
    let config = tiny(&[]);
    let a = log_bytes(&config, 3);
    let b = log_bytes(&config, 3);
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, log_bytes(&config, 4));
}

#[test]
fn zero_alpha_reproduces_the_disabled_run() {
    let off = run_to_writer(&tiny(&[("ted.enabled", "false")]), 1, Vec::new(), &mut |_, _| {}).unwrap();
    let zero = run_to_writer(&tiny(&[("ted.alpha", "0")]), 1, Vec::new(), &mut |_, _| {}).unwrap();
    assert_eq!(off.agent.encoder, zero.agent.encoder);
    assert_eq!(off.agent.q, zero.agent.q);
    assert_eq!(off.rows.len(), zero.rows.len());
    for (a, b) in off.rows.iter().zip(&zero.rows) {
        assert_eq!(a.eval_return_mean, b.eval_return_mean);
        assert_eq!(a.td_loss, b.td_loss);
        assert_eq!(a.disentanglement, b.disentanglement);
    }
}

#[test]
fn phase_flips_at_the_first_reset_after_the_switch() {
    // horizon 20 with S = 110: the first reset at or after S happens at 120
    let config = tiny(&[("run.switch_step", "110"), ("run.eval_period", "10")]);
    let out = run_to_writer(&config, 0, Vec::new(), &mut |_, _| {}).unwrap();
    for row in &out.rows {
        let want = if row.step <= 120 { "train" } else { "test" };
        assert_eq!(row.phase, want, "step {}", row.step);
    }
    assert!(out.rows.iter().any(|r| r.step == 110 && r.disentanglement.is_some()));
}

#[test]
fn sample_variants_diverge_only_after_the_first_ted_update() {
    let both = tiny(&[]);
    let x_prime = tiny(&[("ted.samples", "x_prime")]);
    assert_eq!(build_agent(&both, 5).encoder, build_agent(&x_prime, 5).encoder);

    let first_update = |config: &ExperimentConfig| {
        let mut first: Option<(u64, DenseNet)> = None;
        let out = run_to_writer(config, 5, Vec::new(), &mut |step, agent| {
            if first.is_none() {
                first = Some((step, agent.encoder.clone()));
            }
        })
        .unwrap();
        (first.unwrap(), out.rows)
    };
    let ((step_a, enc_a), rows_a) = first_update(&both);
    let ((step_b, enc_b), rows_b) = first_update(&x_prime);
    assert_eq!(step_a, 50);
    assert_eq!(step_b, 50);
    assert_ne!(enc_a, enc_b);
    for (a, b) in rows_a.iter().zip(&rows_b).filter(|(a, _)| a.step < step_a) {
        assert_eq!(a, b);
    }
}

fn toy_row(seed: u64, step: u64, ret: f64, td: f64) -> LogRow {
    LogRow {
        seed,
        step,
        phase: if step <= 100 { "train" } else { "test" }.into(),
        eval_return_mean: Some(ret),
        eval_return_std: Some(0.0),
        td_loss: Some(td),
        ted_loss: None,
        disentanglement: None,
        zero_shot_return_mean: None,
        zero_shot_column: false,
    }
}

#[test]
fn aggregate_matches_hand_recomputation() {
    let returns = [[1.0, 4.0, 2.5], [3.0, -2.0, 0.5], [8.0, 8.0, 8.0]];
    let runs: Vec<Vec<LogRow>> = (0..3)
        .map(|s| {
            vec![
                toy_row(s as u64, 0, returns[0][s], 0.1 * s as f64),
                toy_row(s as u64, 100, returns[1][s], 1.0),
                toy_row(s as u64, 200, returns[2][s], 2.0),
            ]
        })
        .collect();
    let agg = aggregate(&runs, 100);
    // step 0: mean 2.5, population variance ((1.5² + 1.5² + 0²) / 3) = 1.5
    // step 100: mean 0.5, variance ((2.5² + 2.5² + 0²) / 3) = 25 / 6
    let want = [(2.5, 1.5f64.sqrt()), (0.5, (25.0f64 / 6.0).sqrt()), (8.0, 0.0)];
    assert_eq!(agg.len(), 3);
    for (row, (mean, std)) in agg.iter().zip(want) {
        let r = row.eval_return.unwrap();
        assert!((r.mean - mean).abs() < 1e-12 && (r.std - std).abs() < 1e-12, "{row:?}");
        assert_eq!(row.seeds, 3);
    }
    let td = agg[0].td_loss.unwrap();
    assert!((td.mean - 0.1).abs() < 1e-12);
    assert!((td.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("aggregate.csv");
    write_aggregate(&agg, &path).unwrap();
    let back = read_aggregate(fs::File::open(&path).unwrap(), &path).unwrap();
    assert_eq!(back, agg);
}

#[test]
fn single_seed_aggregate_has_zero_spread() {
    let run = vec![toy_row(0, 0, 1.5, 0.3), toy_row(0, 100, -2.0, 0.2)];
    for row in aggregate(std::slice::from_ref(&run), 100) {
        let src = run.iter().find(|r| r.step == row.step).unwrap();
        assert_eq!(row.eval_return.unwrap().mean, src.eval_return_mean.unwrap());
        assert_eq!(row.eval_return.unwrap().std, 0.0);
    }
}

#[test]
fn recovery_of_a_run_without_a_dip_is_the_switch_step() {
    let points = [(0, -5.0), (100, -3.0), (150, -2.9), (200, -2.0)];
    assert_eq!(recovery_step(&points, 100), Some(100));
    let dipped = [(100, -3.0), (150, -9.0), (200, -3.1), (250, -2.5)];
    // threshold −3.15 reached at 200
    assert_eq!(recovery_step(&dipped, 100), Some(200));
    let rows: Vec<LogRow> = dipped.iter().map(|&(s, r)| toy_row(0, s, r, 0.0)).collect();
    let summary = summarize(&rows, 100);
    assert_eq!(summary.dip_depth, Some(6.0));
    assert!((summary.auc_post.unwrap() - 25.0 * (-12.0 - 12.1 - 5.6)).abs() < 1e-9);
    assert_eq!(median(&mut [3.0, 1.0, 2.0, 10.0]), Some(2.5));
}

fn parse_points(svg: &str, class: &str) -> Vec<(f64, f64)> {
    let tag = format!(r#"class="{class}" points=""#);
    let start = svg.find(&tag).unwrap() + tag.len();
    let end = start + svg[start..].find('"').unwrap();
    svg[start..end]
        .split_whitespace()
        .map(|p| {
            let (x, y) = p.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect()
}

#[test]
fn plot_band_edges_are_mean_plus_minus_std() {
    let points: Vec<(u64, MeanStd)> = [(0, 1.0, 0.5), (50, 2.0, 0.25), (100, 1.5, 1.0), (150, 3.0, 0.0)]
        .iter()
        .map(|&(s, mean, std)| (s, MeanStd { mean, std }))
        .collect();
    let svg = render_svg("eval_return", &points, 100).unwrap();
    let band = parse_points(&svg, "band");
    let line = parse_points(&svg, "mean");
    assert_eq!(band.len(), 2 * points.len());
    assert_eq!(line.len(), points.len());
    for (i, (step, m)) in points.iter().enumerate() {
        assert_eq!(line[i], (*step as f64, m.mean));
        assert_eq!(band[i], (*step as f64, m.mean + m.std));
        assert_eq!(band[band.len() - 1 - i], (*step as f64, m.mean - m.std));
    }
}

#[test]
fn empty_aggregate_writes_no_plot() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("aggregate.csv");
    write_aggregate(&[], &csv).unwrap();
    let out = dir.path().join("plots");
    assert!(emit_plots(&csv, &out).is_err());
    assert!(!out.exists());
}

#[test]
fn ablation_variants_change_only_their_keys() {
    let alphas = [0.1, 1.0, 10.0];
    let variants = ablation_variants(&alphas);
    assert_eq!(variants.len(), 4 + alphas.len());
    let base = ConfigMap::default();
    for (name, overrides) in &variants {
        let mut map = base.clone();
        for (k, v) in overrides {
            map.set(k, v.as_str()).unwrap();
        }
        ExperimentConfig::from_map(map.clone()).unwrap();
        let mut changed = map.diff(&base);
        changed.sort();
        let mut want: Vec<String> = overrides
            .iter()
            .filter(|(k, v)| base.get(k) != Some(v.as_str()))
            .map(|(k, _)| k.clone())
            .collect();
        want.sort();
        assert_eq!(changed, want, "variant {name}");
    }
}
