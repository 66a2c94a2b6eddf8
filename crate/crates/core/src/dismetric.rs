//! Fixed-factor disentanglement score: pairs of frame stacks that share one
//! factor, summed absolute latent differences, and an L1-regularized
//! multinomial logistic probe that predicts the shared factor.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Result, TedError};
use crate::nncore::{Encoder, Matrix};
use crate::synthgen::{mix, stack_frames, FactorSpec, Interval, MixerSpec, Phase};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    /// Pairs summed into one sample.
    pub pairs_per_sample: usize,
    pub total_samples: usize,
    pub train_fraction: f64,
    pub l1: f64,
    pub iterations: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            pairs_per_sample: 32,
            total_samples: 2000,
            train_fraction: 0.8,
            l1: 1e-3,
            iterations: 1000,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_sample == 0 {
            return Err(TedError::config("metric.pairs_per_sample", "must be at least 1"));
        }
        let train = self.total_samples as f64 * self.train_fraction;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) || train.fract() != 0.0 {
            return Err(TedError::config(
                "metric.train_fraction",
                "must lie in (0, 1) and split the samples into whole numbers",
            ));
        }
        if self.l1 < 0.0 {
            return Err(TedError::config("metric.l1", "must be non-negative"));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        (self.total_samples as f64 * self.train_fraction).round() as usize
    }
}

/// Factor ranges and per-frame walk sizes used to synthesize metric pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGenerator {
    pub ranges: Vec<Interval>,
    /// Largest per-frame move of each factor in the short trajectory behind a
    /// frame stack; zero freezes a factor.
    pub walk_steps: Vec<f64>,
    pub mixer: MixerSpec,
}

impl PairGenerator {
    pub fn new(ranges: Vec<Interval>, walk_steps: Vec<f64>, mixer: MixerSpec) -> Result<Self> {
        if ranges.len() != mixer.num_factors() || walk_steps.len() != ranges.len() {
            return Err(TedError::shape("pair generator", mixer.num_factors(), ranges.len()));
        }
        Ok(PairGenerator {
            ranges,
            walk_steps,
            mixer,
        })
    }

    /// Episodic factors over the phase's range, dynamic factors over their
    /// bounds, dynamic walks of `step_size` per frame.
    pub fn from_spec(spec: &FactorSpec, mixer: &MixerSpec, phase: Phase, step_size: f64) -> Result<Self> {
        let walk = (0..spec.num_factors())
            .map(|i| if i < spec.num_episodic() { 0.0 } else { step_size })
            .collect();
        PairGenerator::new(spec.full_ranges(phase), walk, mixer.clone())
    }

    pub fn num_factors(&self) -> usize {
        self.ranges.len()
    }

    /// One factor trajectory of `frame_stack` frames, oldest first.
    fn trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        let frames = self.mixer.frame_stack;
        let mut current: Vec<f64> = self.ranges.iter().map(|r| r.sample(rng)).collect();
        let mut out = Vec::with_capacity(frames);
        out.push(current.clone());
        for _ in 1..frames {
            for (i, x) in current.iter_mut().enumerate() {
                if self.walk_steps[i] > 0.0 {
                    let d = rng.random_range(-1i32..=1) as f64 * self.walk_steps[i];
                    *x = self.ranges[i].clamp(*x + d);
                }
            }
            out.push(current.clone());
        }
        out
    }

    fn render(&self, trajectory: &[Vec<f64>]) -> Vec<f64> {
        let frames: Vec<Vec<f64>> = trajectory
            .iter()
            .map(|f| mix(f, &self.mixer).expect("factor count checked at construction"))
            .collect();
        stack_frames(&frames, self.mixer.frame_stack)
    }

    /// Two frame stacks whose factor `k` follows the same trajectory while all
    /// other factors are drawn independently.
    pub fn fixed_factor_pair<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> FixedFactorPair {
        assert!(k < self.num_factors(), "fixed factor index out of range");
        let a = self.trajectory(rng);
        let mut b = self.trajectory(rng);
        for (fa, fb) in a.iter().zip(&mut b) {
            fb[k] = fa[k];
        }
        FixedFactorPair {
            obs_a: self.render(&a),
            obs_b: self.render(&b),
            factors_a: a,
            factors_b: b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedFactorPair {
    pub factors_a: Vec<Vec<f64>>,
    pub factors_b: Vec<Vec<f64>>,
    pub obs_a: Vec<f64>,
    pub obs_b: Vec<f64>,
}

/// Pair generation straight from environment factor ranges.
pub fn gen_fixed_factor_pair<R: Rng + ?Sized>(
    spec: &FactorSpec,
    mixer: &MixerSpec,
    phase: Phase,
    step_size: f64,
    k: usize,
    rng: &mut R,
) -> Result<FixedFactorPair> {
    Ok(PairGenerator::from_spec(spec, mixer, phase, step_size)?.fixed_factor_pair(k, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSample {
    pub z_diff: Vec<f64>,
    pub fixed_factor: usize,
}

/// `Σ_b |z(a_b) − z(b_b)|` over the pairs.
pub fn z_diff<E: Encoder + ?Sized>(encoder: &E, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
    let n = encoder.latent_dim();
    if pairs.is_empty() {
        return Ok(vec![0.0; n]);
    }
    let a = Matrix::from_rows(&pairs.iter().map(|p| p.0.as_slice()).collect::<Vec<_>>());
    let b = Matrix::from_rows(&pairs.iter().map(|p| p.1.as_slice()).collect::<Vec<_>>());
    let za = encoder.encode_batch(&a)?;
    let zb = encoder.encode_batch(&b)?;
    let mut out = vec![0.0; n];
    for i in 0..pairs.len() {
        for (o, (x, y)) in out.iter_mut().zip(za.row(i).iter().zip(zb.row(i))) {
            *o += (x - y).abs();
        }
    }
    Ok(out)
}

/// `total_samples` samples with fixed-factor labels balanced over the
/// factors, each built from its own RNG stream.
pub fn generate_samples<E: Encoder + Sync + ?Sized, R: Rng + ?Sized>(
    encoder: &E,
    generator: &PairGenerator,
    config: &MetricConfig,
    rng: &mut R,
) -> Result<Vec<MetricSample>> {
    let k = generator.num_factors();
    let seeds: Vec<u64> = (0..config.total_samples).map(|_| rng.random()).collect();
    let mut samples = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let mut srng = ChaCha8Rng::seed_from_u64(seed);
            let fixed = i % k;
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..config.pairs_per_sample)
                .map(|_| {
                    let p = generator.fixed_factor_pair(fixed, &mut srng);
                    (p.obs_a, p.obs_b)
                })
                .collect();
            Ok(MetricSample {
                z_diff: z_diff(encoder, &pairs)?,
                fixed_factor: fixed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    samples.shuffle(rng);
    Ok(samples)
}

/// Multinomial logistic regression: `softmax(x·W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    /// features × classes
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Probe {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (f, &xf) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.weights.row(f)) {
                *o += xf * w;
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::agent::argmax(&self.logits(x))
    }

    /// Overall and per-class accuracy with class counts.
    pub fn accuracy(&self, samples: &[MetricSample]) -> (f64, Vec<f64>, Vec<usize>) {
        let c = self.num_classes();
        let mut hits = vec![0usize; c];
        let mut counts = vec![0usize; c];
        for s in samples {
            counts[s.fixed_factor] += 1;
            if self.predict(&s.z_diff) == s.fixed_factor {
                hits[s.fixed_factor] += 1;
            }
        }
        let total: usize = hits.iter().sum();
        let per_class = hits
            .iter()
            .zip(&counts)
            .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
            .collect();
        (total as f64 / samples.len().max(1) as f64, per_class, counts)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Mean cross-entropy plus `l1·‖W‖₁`.
pub fn probe_objective(probe: &Probe, samples: &[MetricSample], l1: f64) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let mut p = probe.logits(&s.z_diff);
        softmax_in_place(&mut p);
        total -= p[s.fixed_factor].max(1e-300).ln();
    }
    let penalty: f64 = probe.weights.as_slice().iter().map(|w| w.abs()).sum();
    total / samples.len() as f64 + l1 * penalty
}

/// Fits the probe by accelerated proximal gradient with step `1/L`,
/// `L = ½·mean(‖x‖² + 1)`, soft-thresholding the weights (not the bias).
pub fn train_probe(samples: &[MetricSample], num_classes: usize, config: &MetricConfig) -> Result<Probe> {
    let mut seen = vec![false; num_classes];
    for s in samples {
        if s.fixed_factor >= num_classes {
            return Err(TedError::DegenerateSplit { class: s.fixed_factor });
        }
        seen[s.fixed_factor] = true;
    }
    if let Some(class) = seen.iter().position(|&s| !s) {
        return Err(TedError::DegenerateSplit { class });
    }
    let nf = samples[0].z_diff.len();
    let m = samples.len() as f64;
    let lipschitz = 0.5
        * samples
            .iter()
            .map(|s| s.z_diff.iter().map(|x| x * x).sum::<f64>() + 1.0)
            .sum::<f64>()
        / m;
    let step = 1.0 / lipschitz;
    let thresh = step * config.l1;

    let mut w = vec![0.0; nf * num_classes];
    let mut b = vec![0.0; num_classes];
    let (mut yw, mut yb) = (w.clone(), b.clone());
    let mut t = 1.0f64;
    let mut gw = vec![0.0; nf * num_classes];
    let mut gb = vec![0.0; num_classes];
    let mut p = vec![0.0; num_classes];
    for _ in 0..config.iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for s in samples {
            p.copy_from_slice(&yb);
            for (f, &x) in s.z_diff.iter().enumerate() {
                for (pc, &wc) in p.iter_mut().zip(&yw[f * num_classes..(f + 1) * num_classes]) {
                    *pc += x * wc;
                }
            }
            softmax_in_place(&mut p);
            p[s.fixed_factor] -= 1.0;
            for (f, &x) in s.z_diff.iter().enumerate() {
                for (g, &pc) in gw[f * num_classes..(f + 1) * num_classes].iter_mut().zip(&p) {
                    *g += x * pc;
                }
            }
            for (g, &pc) in gb.iter_mut().zip(&p) {
                *g += pc;
            }
        }
        let prev_w = w.clone();
        let prev_b = b.clone();
        for i in 0..w.len() {
            let v = yw[i] - step * gw[i] / m;
            w[i] = v.signum() * (v.abs() - thresh).max(0.0);
        }
        for c in 0..num_classes {
            b[c] = yb[c] - step * gb[c] / m;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        for i in 0..w.len() {
            yw[i] = w[i] + mom * (w[i] - prev_w[i]);
        }
        for c in 0..num_classes {
            yb[c] = b[c] + mom * (b[c] - prev_b[c]);
        }
        t = t_next;
    }
    if !w.iter().chain(&b).all(|x| x.is_finite()) {
        return Err(TedError::NonFinite("probe weights"));
    }
    Ok(Probe {
        weights: Matrix::from_vec(nf, num_classes, w),
        bias: b,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Held-out accuracy.
    pub accuracy: f64,
    pub per_factor: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub train_accuracy: f64,
    pub probe: Probe,
}

/// Optionally permutes the labels across all samples, splits them (already
/// shuffled) by the train fraction, fits the probe and scores the held-out
/// part.
pub fn evaluate_samples<R: Rng + ?Sized>(
    samples: &[MetricSample],
    num_factors: usize,
    config: &MetricConfig,
    shuffle_labels: Option<&mut R>,
) -> Result<MetricReport> {
    config.validate()?;
    let mut samples = samples.to_vec();
    if let Some(rng) = shuffle_labels {
        let mut labels: Vec<usize> = samples.iter().map(|s| s.fixed_factor).collect();
        labels.shuffle(rng);
        for (s, l) in samples.iter_mut().zip(labels) {
            s.fixed_factor = l;
        }
    }
    let n_train = config.train_count().min(samples.len());
    let (train, test) = samples.split_at(n_train);
    let probe = train_probe(train, num_factors, config)?;
    let (train_accuracy, _, _) = probe.accuracy(train);
    let (accuracy, per_factor, class_counts) = probe.accuracy(test);
    Ok(MetricReport {
        accuracy,
        per_factor,
        class_counts,
        train_accuracy,
        probe,
    })
}

pub fn disentanglement_score<E: Encoder + Sync + ?Sized, R: Rng + ?Sized>(
    encoder: &E,
    generator: &PairGenerator,
    config: &MetricConfig,
    rng: &mut R,
) -> Result<MetricReport> {
    if generator.num_factors() < 2 {
        return Err(TedError::InvalidSpec("the score needs at least two factors".into()));
    }
    config.validate()?;
    let samples = generate_samples(encoder, generator, config, rng)?;
    evaluate_samples::<R>(&samples, generator.num_factors(), config, None)
}

/// Uniformly random `n × n` orthogonal matrix.
pub fn random_rotation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let data: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let qr = DMatrix::from_row_slice(n, n, &data).qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // sign fix makes the distribution Haar
            out[(i, j)] = q[(i, j)] * r[(j, j)].signum();
        }
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Greedy one-to-one matching of factors to latent coordinates by absolute
/// Pearson correlation. Returns the mean matched |r| and, per factor, the
/// chosen coordinate with its |r|.
pub fn correlation_matching(factors: &[Vec<f64>], latents: &[Vec<f64>]) -> (f64, Vec<(usize, f64)>) {
    let k = factors[0].len();
    let n = latents[0].len();
    let column = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
    let mut table = Vec::with_capacity(k * n);
    for f in 0..k {
        let fc = column(factors, f);
        for z in 0..n {
            table.push((pearson(&fc, &column(latents, z)).abs(), f, z));
        }
    }
    table.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched = vec![None; k];
    let mut used = vec![false; n];
    for (r, f, z) in table {
        if matched[f].is_none() && !used[z] {
            matched[f] = Some((z, r));
            used[z] = true;
        }
    }
    let pairs: Vec<(usize, f64)> = matched.into_iter().map(|m| m.unwrap_or((usize::MAX, 0.0))).collect();
    let mean = pairs.iter().map(|p| p.1).sum::<f64>() / k as f64;
    (mean, pairs)
}
