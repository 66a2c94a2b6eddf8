use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ted_core::synthgen::{mix, sample_episode_factors, stack_frames, FactorSpec, Interval, MixMode, MixerSpec, Phase};

fn spec(ne: usize, nd: usize) -> FactorSpec {
    FactorSpec::new(
        vec![Interval::new(0.0, 1.0); ne],
        vec![Interval::new(2.0, 3.0); ne],
        vec![0.0; nd],
        vec![Interval::new(-1.0, 1.0); nd],
    )
    .unwrap()
}

/// Damped Gauss-Newton inversion of `x = h(M s)` written against the
/// textbook definition of the mixer, not against `mix` internals.
fn invert(x: &[f64], m: &DMatrix<f64>, gain: f64) -> DVector<f64> {
    let k = m.ncols();
    let target = DVector::from_column_slice(x);
    let mut s = DVector::zeros(k);
    let mut lambda = 1e-3;
    let residual = |s: &DVector<f64>| {
        let u = m * s;
        u.map(|v| v + gain * v.tanh()) - &target
    };
    let mut r = residual(&s);
    for _ in 0..200 {
        let u = m * &s;
        let d = u.map(|v| 1.0 + gain * (1.0 - v.tanh().powi(2)));
        let j = DMatrix::from_fn(m.nrows(), k, |i, c| d[i] * m[(i, c)]);
        let a = j.transpose() * &j + DMatrix::identity(k, k) * lambda;
        let step = a.lu().solve(&(j.transpose() * &r)).unwrap();
        let cand = &s - step;
        let rc = residual(&cand);
        if rc.norm() < r.norm() {
            s = cand;
            r = rc;
            lambda = (lambda * 0.3).max(1e-12);
        } else {
            lambda *= 10.0;
        }
        if r.norm() < 1e-14 {
            break;
        }
    }
    s
}

#[test]
fn nonlinear_mix_is_numerically_invertible() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mixer = MixerSpec::random(4, 16, MixMode::Nonlinear, 1.0, 1, &mut rng).unwrap();
    let m = DMatrix::from_row_slice(16, 4, mixer.mixing.as_slice());
    for _ in 0..50 {
        let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = mix(&s, &mixer).unwrap();
        let s_hat = invert(&x, &m, mixer.gain);
        let err = s
            .iter()
            .zip(s_hat.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "inversion error {err}");
    }
}

#[test]
fn uniform_draws_average_to_the_midpoint() {
    let spec = spec(3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sums = [0.0; 3];
    for _ in 0..1000 {
        let f = sample_episode_factors(&spec, Phase::Train, &mut rng);
        for (s, v) in sums.iter_mut().zip(&f.episodic) {
            *s += v;
        }
    }
    for s in sums {
        assert!((s / 1000.0 - 0.5).abs() <= 0.05);
    }
}

proptest! {
    #[test]
    fn episodic_draws_respect_phase_ranges(seed in any::<u64>(), ne in 1usize..5, nd in 1usize..4) {
        let spec = spec(ne, nd);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for phase in [Phase::Train, Phase::Test] {
            let f = sample_episode_factors(&spec, phase, &mut rng);
            for (v, r) in f.episodic.iter().zip(spec.episodic_ranges(phase)) {
                prop_assert!(r.contains(*v));
            }
            prop_assert_eq!(&f.dynamic, &vec![0.0; nd]);
        }
    }

    #[test]
    fn linear_mix_is_linear(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mixer = MixerSpec::random(3, 5, MixMode::Linear, 1.0, 1, &mut rng).unwrap();
        let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let comb: Vec<f64> = s.iter().zip(&t).map(|(x, y)| a * x + y).collect();
        let lhs = mix(&comb, &mixer).unwrap();
        let (ms, mt) = (mix(&s, &mixer).unwrap(), mix(&t, &mixer).unwrap());
        for i in 0..5 {
            prop_assert!((lhs[i] - (a * ms[i] + mt[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn stacks_have_fixed_length_and_end_with_the_newest_frame(len in 1usize..8, stack in 1usize..5) {
        let history: Vec<Vec<f64>> = (0..len).map(|i| vec![i as f64, -(i as f64)]).collect();
        let s = stack_frames(&history, stack);
        prop_assert_eq!(s.len(), 2 * stack);
        prop_assert_eq!(&s[2 * stack - 2..], history.last().unwrap().as_slice());
    }
}
