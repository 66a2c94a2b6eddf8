use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ted_core::dismetric::{
    disentanglement_score, evaluate_samples, generate_samples, probe_objective, train_probe, z_diff, MetricConfig,
    MetricSample, PairGenerator, Probe,
};
use ted_core::nncore::{LinearReadout, Matrix};
use ted_core::synthgen::{Interval, MixerSpec};

const K: usize = 4;
const FRAMES: usize = 2;

fn generator() -> PairGenerator {
    PairGenerator::new(
        vec![Interval::new(0.0, 1.0); K],
        vec![0.0, 0.0, 0.05, 0.05],
        MixerSpec::identity(K, FRAMES),
    )
    .unwrap()
}

fn identity() -> LinearReadout {
    LinearReadout::identity_on_last_frame(K, FRAMES)
}

#[test]
fn identity_encoder_scores_near_one() {
    let report = disentanglement_score(
        &identity(),
        &generator(),
        &MetricConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert!(report.accuracy >= 0.95, "{}", report.accuracy);
}

#[test]
fn shuffled_labels_score_near_chance() {
    let config = MetricConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = generate_samples(&identity(), &generator(), &config, &mut rng).unwrap();
    let report = evaluate_samples(&samples, K, &config, Some(&mut rng)).unwrap();
    assert!((report.accuracy - 1.0 / K as f64).abs() <= 0.1, "{}", report.accuracy);
}

#[test]
fn same_seed_same_report() {
    let config = MetricConfig {
        total_samples: 400,
        ..MetricConfig::default()
    };
    let run = || disentanglement_score(&identity(), &generator(), &config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn score_ignores_latent_permutation() {
    let config = MetricConfig::default();
    let mut permuted = identity();
    let order = [2, 0, 3, 1];
    permuted.map = Matrix::zeros(K, K);
    for (row, &col) in order.iter().enumerate() {
        permuted.map.row_mut(row)[col] = 1.0;
    }
    let a = disentanglement_score(&identity(), &generator(), &config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = disentanglement_score(&permuted, &generator(), &config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(
        (a.accuracy - b.accuracy).abs() <= 0.01,
        "{} vs {}",
        a.accuracy,
        b.accuracy
    );
}

#[test]
fn non_fixed_factors_always_differ() {
    let g = generator();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..1000 {
        let k = i % K;
        let p = g.fixed_factor_pair(k, &mut rng);
        for (fa, fb) in p.factors_a.iter().zip(&p.factors_b) {
            assert_eq!(fa[k], fb[k]);
        }
        // later frames may both sit clamped at a bound; the first frame is a
        // pair of independent continuous draws
        let (a, b) = (&p.factors_a[0], &p.factors_b[0]);
        for j in (0..K).filter(|&j| j != k) {
            assert_ne!(a[j], b[j], "pair {i} factor {j}");
        }
    }
}

#[test]
fn fixed_coordinate_is_exactly_zero_for_a_disentangled_code() {
    let g = generator();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..K {
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..8)
            .map(|_| {
                let p = g.fixed_factor_pair(k, &mut rng);
                (p.obs_a, p.obs_b)
            })
            .collect();
        let d = z_diff(&identity(), &pairs).unwrap();
        for (j, v) in d.iter().enumerate() {
            if j == k {
                assert_eq!(*v, 0.0);
            } else {
                assert!(*v > 0.0);
            }
        }
    }
}

#[test]
fn single_raw_pair_z_diff() {
    let enc = LinearReadout::identity_on_last_frame(2, 1);
    let d = z_diff(&enc, &[(vec![0.2, 0.5], vec![0.2, 0.9])]).unwrap();
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 0.4).abs() < 1e-15);
}

/// Three overlapping Gaussian blobs in two dimensions.
fn toy_set(n_per_class: usize, rng: &mut ChaCha8Rng) -> Vec<MetricSample> {
    let centers = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let mut out = Vec::new();
    for _ in 0..n_per_class {
        for (c, center) in centers.iter().enumerate() {
            let z_diff = center
                .iter()
                .map(|m| m + 0.45 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            out.push(MetricSample {
                z_diff,
                fixed_factor: c,
            });
        }
    }
    out
}

/// Exhaustive search over a 6-dimensional grid (class 0 pinned to zero,
/// which loses nothing for softmax), then a finer grid around the winner.
fn grid_search_fit(samples: &[MetricSample], l1: f64) -> Probe {
    let build = |p: &[f64; 6]| Probe {
        weights: Matrix::from_vec(2, 3, vec![0.0, p[0], p[1], 0.0, p[2], p[3]]),
        bias: vec![0.0, p[4], p[5]],
    };
    let mut best = [0.0; 6];
    let mut best_obj = probe_objective(&build(&best), samples, l1);
    for (half_width, step) in [(4.0, 1.0), (1.0, 0.25), (0.25, 0.0625)] {
        let center = best;
        let n = (2.0 * half_width / step) as usize + 1;
        let mut idx = [0usize; 6];
        loop {
            let mut p = [0.0; 6];
            for d in 0..6 {
                p[d] = center[d] - half_width + idx[d] as f64 * step;
            }
            let obj = probe_objective(&build(&p), samples, l1);
            if obj < best_obj {
                best_obj = obj;
                best = p;
            }
            let mut d = 0;
            while d < 6 {
                idx[d] += 1;
                if idx[d] < n {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == 6 {
                break;
            }
        }
    }
    build(&best)
}

#[test]
fn probe_matches_grid_search_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let train = toy_set(50, &mut rng);
    let test = toy_set(300, &mut rng);
    let config = MetricConfig::default();
    let probe = train_probe(&train, 3, &config).unwrap();
    let reference = grid_search_fit(&train, config.l1);
    let (ours, _, _) = probe.accuracy(&test);
    let (theirs, _, _) = reference.accuracy(&test);
    assert!((ours - theirs).abs() <= 0.02, "probe {ours} vs grid {theirs}");
    assert!(probe_objective(&probe, &train, config.l1) <= probe_objective(&reference, &train, config.l1) + 1e-3);
}

#[test]
fn uninformative_features_give_the_majority_prior() {
    // 30 / 20 / 10 samples of classes 0 / 1 / 2
    let samples: Vec<MetricSample> = (0..60)
        .map(|i| MetricSample {
            z_diff: vec![1.0, 2.0],
            fixed_factor: usize::from(i >= 30) + usize::from(i >= 50),
        })
        .collect();
    let prior = 0.5;
    let probe = train_probe(&samples, 3, &MetricConfig::default()).unwrap();
    let (acc, _, _) = probe.accuracy(&samples);
    assert!((acc - prior).abs() < 1e-12, "{acc} vs {prior}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn duplicating_pairs_doubles_z_diff(seed in any::<u64>(), b in 1usize..6) {
        let g = generator();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(0..K);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
            .map(|_| {
                let p = g.fixed_factor_pair(k, &mut rng);
                (p.obs_a, p.obs_b)
            })
            .collect();
        let doubled: Vec<_> = pairs.iter().chain(&pairs).cloned().collect();
        let single = z_diff(&identity(), &pairs).unwrap();
        let double = z_diff(&identity(), &doubled).unwrap();
        for (s, d) in single.iter().zip(&double) {
            prop_assert!(*s >= 0.0);
            prop_assert!((2.0 * s - d).abs() <= 1e-12 * d.max(1.0));
        }
    }
}
