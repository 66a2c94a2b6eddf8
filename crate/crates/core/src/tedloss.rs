//! The TED classifier, its weighted cross-entropy loss and the standalone
//! update step that trains an encoder with it.

use rand::Rng;

use crate::error::{Result, TedError};
use crate::nncore::{weighted_bce_term, Adam, AdamConfig, DenseNet, GradTape, Matrix, ParamSlot, Var};
use crate::replay::{encode_plan, plan_samples, NegativeKinds, PairSample, ReplayBuffer, SamplePlan, TaggedBatch};

/// Tape group used for encoder parameters.
pub const ENCODER_GROUP: u16 = 0;
/// Tape group used for classifier parameters.
pub const CLASSIFIER_GROUP: u16 = 1;

/// `y = Σᵢ |k1ⁱ z1ⁱ + k2ⁱ z2ⁱ + bⁱ| − (k̄ⁱ z1ⁱ + b̄ⁱ)² + c`, stored as 1×n rows
/// (`c` is 1×1).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub k1: Matrix,
    pub k2: Matrix,
    pub b: Matrix,
    pub kbar: Matrix,
    pub bbar: Matrix,
    pub c: Matrix,
}

impl ClassifierParams {
    /// `k1 = k2 = 1`, everything else zero.
    pub fn new(n: usize) -> Self {
        ClassifierParams {
            k1: Matrix::filled(1, n, 1.0),
            k2: Matrix::filled(1, n, 1.0),
            b: Matrix::zeros(1, n),
            kbar: Matrix::zeros(1, n),
            bbar: Matrix::zeros(1, n),
            c: Matrix::zeros(1, 1),
        }
    }

    pub fn from_vectors(k1: &[f64], k2: &[f64], b: &[f64], kbar: &[f64], bbar: &[f64], c: f64) -> Result<Self> {
        let n = k1.len();
        for (name, v) in [("k2", k2), ("b", b), ("kbar", kbar), ("bbar", bbar)] {
            if v.len() != n {
                return Err(TedError::shape(name, n, v.len()));
            }
        }
        Ok(ClassifierParams {
            k1: Matrix::row_vector(k1.to_vec()),
            k2: Matrix::row_vector(k2.to_vec()),
            b: Matrix::row_vector(b.to_vec()),
            kbar: Matrix::row_vector(kbar.to_vec()),
            bbar: Matrix::row_vector(bbar.to_vec()),
            c: Matrix::scalar(c),
        })
    }

    pub fn dim(&self) -> usize {
        self.k1.cols()
    }
}

/// `y = w · [z1, z2] + bias`, with `w` split into two n×1 columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifierParams {
    pub w1: Matrix,
    pub w2: Matrix,
    pub bias: Matrix,
}

impl LinearClassifierParams {
    pub fn new(n: usize) -> Self {
        LinearClassifierParams {
            w1: Matrix::zeros(n, 1),
            w2: Matrix::zeros(n, 1),
            bias: Matrix::zeros(1, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    /// Weights as one vector over `[z1, z2]`.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = self.w1.as_slice().to_vec();
        w.extend_from_slice(self.w2.as_slice());
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    Ted,
    Linear,
}

impl ClassifierKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ted" => Some(ClassifierKind::Ted),
            "linear" => Some(ClassifierKind::Linear),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Ted => "ted",
            ClassifierKind::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Ted(ClassifierParams),
    Linear(LinearClassifierParams),
}

impl Classifier {
    pub fn new(kind: ClassifierKind, n: usize) -> Self {
        match kind {
            ClassifierKind::Ted => Classifier::Ted(ClassifierParams::new(n)),
            ClassifierKind::Linear => Classifier::Linear(LinearClassifierParams::new(n)),
        }
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Ted(_) => ClassifierKind::Ted,
            Classifier::Linear(_) => ClassifierKind::Linear,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Classifier::Ted(p) => p.dim(),
            Classifier::Linear(p) => p.dim(),
        }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            Classifier::Ted(p) => vec![&p.k1, &p.k2, &p.b, &p.kbar, &p.bbar, &p.c],
            Classifier::Linear(p) => vec![&p.w1, &p.w2, &p.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Classifier::Ted(p) => vec![&mut p.k1, &mut p.k2, &mut p.b, &mut p.kbar, &mut p.bbar, &mut p.c],
            Classifier::Linear(p) => vec![&mut p.w1, &mut p.w2, &mut p.bias],
        }
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|m| m.shape()).collect()
    }

    pub fn score(&self, z1: &[f64], z2: &[f64]) -> Result<f64> {
        let n = self.dim();
        if z1.len() != n || z2.len() != n {
            return Err(TedError::shape("classifier input", n, z1.len().max(z2.len())));
        }
        Ok(match self {
            Classifier::Ted(p) => classifier_score(z1, z2, p),
            Classifier::Linear(p) => linear_classifier_score(z1, z2, &p.weights(), p.bias.as_slice()[0]),
        })
    }

    /// Logits for row-aligned latents `z1` (trainable) and `z2` (constant),
    /// registering parameters under `group`.
    pub fn forward_tape(&self, tape: &mut GradTape, z1: Var, z2: Var, group: u16) -> Var {
        let slot = |i: u16| ParamSlot::new(group, i);
        match self {
            Classifier::Ted(p) => {
                let k1 = tape.param(&p.k1, slot(0));
                let k2 = tape.param(&p.k2, slot(1));
                let b = tape.param(&p.b, slot(2));
                let kbar = tape.param(&p.kbar, slot(3));
                let bbar = tape.param(&p.bbar, slot(4));
                let c = tape.param(&p.c, slot(5));
                let a1 = tape.mul_row(z1, k1);
                let a2 = tape.mul_row(z2, k2);
                let a = tape.add(a1, a2);
                let a = tape.add_row(a, b);
                let a = tape.abs(a);
                let pair_term = tape.sum_cols(a);
                let m = tape.mul_row(z1, kbar);
                let m = tape.add_row(m, bbar);
                let m = tape.square(m);
                let marginal = tape.sum_cols(m);
                let y = tape.sub(pair_term, marginal);
                tape.add_scalar(y, c)
            }
            Classifier::Linear(p) => {
                let w1 = tape.param(&p.w1, slot(0));
                let w2 = tape.param(&p.w2, slot(1));
                let bias = tape.param(&p.bias, slot(2));
                let y1 = tape.matmul(z1, w1);
                let y2 = tape.matmul(z2, w2);
                let y = tape.add(y1, y2);
                tape.add_scalar(y, bias)
            }
        }
    }
}

pub fn classifier_score(z1: &[f64], z2: &[f64], p: &ClassifierParams) -> f64 {
    let (k1, k2, b, kbar, bbar) = (
        p.k1.as_slice(),
        p.k2.as_slice(),
        p.b.as_slice(),
        p.kbar.as_slice(),
        p.bbar.as_slice(),
    );
    let mut y = 0.0;
    for i in 0..z1.len() {
        let m = kbar[i] * z1[i] + bbar[i];
        y += (k1[i] * z1[i] + k2[i] * z2[i] + b[i]).abs() - m * m;
    }
    y + p.c.as_slice()[0]
}

pub fn linear_classifier_score(z1: &[f64], z2: &[f64], weights: &[f64], bias: f64) -> f64 {
    let y: f64 = z1.iter().chain(z2).zip(weights).map(|(z, w)| z * w).sum();
    y + bias
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TedConfig {
    pub alpha: f64,
    pub positive_weight: f64,
    pub classifier: ClassifierKind,
    pub samples: NegativeKinds,
}

impl Default for TedConfig {
    fn default() -> Self {
        TedConfig {
            alpha: 1.0,
            positive_weight: 2.0,
            classifier: ClassifierKind::Ted,
            samples: NegativeKinds::BOTH,
        }
    }
}

impl TedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TedError::config("ted.alpha", "must be finite and non-negative"));
        }
        if !(self.positive_weight > 0.0 && self.positive_weight.is_finite()) {
            return Err(TedError::config("ted.positive_weight", "must be finite and positive"));
        }
        if !self.samples.different_episode && !self.samples.same_episode {
            return Err(TedError::config(
                "ted.samples",
                "at least one negative kind is required",
            ));
        }
        Ok(())
    }
}

/// Mean weighted cross-entropy over already-encoded samples.
pub fn ted_loss(samples: &[PairSample], classifier: &Classifier, config: &TedConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(TedError::InvalidSpec("TED loss needs at least one sample".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let y = classifier.score(&s.first, &s.second)?;
        if !y.is_finite() {
            return Err(TedError::NonFinite("classifier score"));
        }
        total += weighted_bce_term(y, s.label, config.alpha, config.positive_weight);
    }
    Ok(total / samples.len() as f64)
}

/// Records the TED loss for `plan` on `tape`. `z_batch` holds the online
/// encodings of the batch's `o_t` (N×n); `z_second` the target encodings of
/// the plan's second elements, entered as a constant.
pub fn ted_loss_tape(
    tape: &mut GradTape,
    z_batch: Var,
    plan: &SamplePlan,
    z_second: Matrix,
    classifier: &Classifier,
    config: &TedConfig,
) -> Var {
    let n = tape.value(z_batch).rows();
    let groups = plan.pairs.len() / n;
    debug_assert!(plan.pairs.iter().enumerate().all(|(k, p)| p.anchor == k % n));
    let z1 = tape.vstack(&vec![z_batch; groups]);
    let z2 = tape.constant(z_second);
    let y = classifier.forward_tape(tape, z1, z2, CLASSIFIER_GROUP);
    tape.weighted_bce(y, &plan.labels(), config.alpha, config.positive_weight)
}

/// Encoder, EMA target encoder and classifier trained by the TED loss alone.
#[derive(Debug, Clone)]
pub struct TedModel {
    pub encoder: DenseNet,
    pub target: DenseNet,
    pub classifier: Classifier,
    pub config: TedConfig,
    pub tau: f64,
    encoder_opt: Adam,
    classifier_opt: Adam,
}

impl TedModel {
    pub fn new(encoder: DenseNet, config: TedConfig, tau: f64, adam: AdamConfig) -> Self {
        let classifier = Classifier::new(config.classifier, encoder.output_dim());
        let encoder_opt = Adam::new(adam, &encoder.param_shapes());
        let classifier_opt = Adam::new(adam, &classifier.param_shapes());
        TedModel {
            target: encoder.clone(),
            encoder,
            classifier,
            config,
            tau,
            encoder_opt,
            classifier_opt,
        }
    }

    pub fn encoder_optimizer(&self) -> &Adam {
        &self.encoder_opt
    }

    pub fn classifier_optimizer(&self) -> &Adam {
        &self.classifier_opt
    }

    /// Loss of `plan` at the current parameters without recording a tape.
    pub fn plan_loss(&self, plan: &SamplePlan, batch: &TaggedBatch) -> Result<f64> {
        let samples = encode_plan(plan, batch, &self.encoder, &self.target)?;
        ted_loss(&samples, &self.classifier, &self.config)
    }

    /// One TED update on `batch`; returns the loss before the update.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &TaggedBatch, buffer: &ReplayBuffer, rng: &mut R) -> Result<f64> {
        let plan = plan_samples(batch, buffer, self.config.samples, rng)?;
        self.update_with_plan(batch, &plan)
    }

    pub fn update_with_plan(&mut self, batch: &TaggedBatch, plan: &SamplePlan) -> Result<f64> {
        let mut tape = GradTape::new();
        let obs = tape.constant(batch.observations());
        let z = self.encoder.forward_tape(&mut tape, obs, ENCODER_GROUP)?;
        let z_second = self.target.forward_batch(&plan.second_observations())?;
        let loss = ted_loss_tape(&mut tape, z, plan, z_second, &self.classifier, &self.config);
        let grads = tape.backward(loss)?;
        let enc_grads = grads.group(ENCODER_GROUP, &self.encoder.param_shapes());
        let cls_grads = grads.group(CLASSIFIER_GROUP, &self.classifier.param_shapes());
        self.encoder_opt.step(self.encoder.params_mut(), &enc_grads);
        self.classifier_opt.step(self.classifier.params_mut(), &cls_grads);
        self.target.ema_update(&self.encoder, self.tau);
        Ok(tape.scalar(loss))
    }
}

/// Samples a batch from `buffer` and applies one TED update to `model`.
pub fn ted_update_step<R: Rng + ?Sized>(
    model: &mut TedModel,
    buffer: &ReplayBuffer,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64> {
    let batch = buffer.sample_batch(batch_size, rng)?;
    model.update(&batch, buffer, rng)
}
