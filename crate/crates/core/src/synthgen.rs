//! Ground-truth factor model and the invertible observation map.
//!
//! A state is a vector of `K` scalar factors split into *episodic* factors
//! (drawn once per episode, e.g. a colour) and *dynamic* factors (moved by the
//! agent, e.g. a position). Observations are produced by a fixed mixing matrix
//! followed, in nonlinear mode, by the elementwise map `x + gain·tanh(x)`,
//! which is strictly increasing for any positive gain.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TedError};
use crate::nncore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    /// Uniform draw; a degenerate interval returns `lo` exactly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        (self.lo + (self.hi - self.lo) * u).min(self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Train,
    Test,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSpec {
    episodic_train: Vec<Interval>,
    episodic_test: Vec<Interval>,
    dynamic_init: Vec<f64>,
    dynamic_bounds: Vec<Interval>,
}

impl FactorSpec {
    pub fn new(
        episodic_train: Vec<Interval>,
        episodic_test: Vec<Interval>,
        dynamic_init: Vec<f64>,
        dynamic_bounds: Vec<Interval>,
    ) -> Result<Self> {
        let bad = |m: String| Err(TedError::InvalidSpec(m));
        if episodic_train.is_empty() {
            return bad("at least one episodic factor is required".into());
        }
        if dynamic_bounds.is_empty() {
            return bad("at least one dynamic factor is required".into());
        }
        if episodic_test.len() != episodic_train.len() {
            return bad("train and test range counts differ".into());
        }
        if dynamic_init.len() != dynamic_bounds.len() {
            return bad("dynamic init and bounds counts differ".into());
        }
        for (i, (tr, te)) in episodic_train.iter().zip(&episodic_test).enumerate() {
            if tr.lo > tr.hi || te.lo > te.hi {
                return bad(format!("episodic factor {i} has an inverted range"));
            }
            if tr.overlaps(te) {
                return bad(format!("episodic factor {i}: train and test ranges overlap"));
            }
        }
        for (i, (x, b)) in dynamic_init.iter().zip(&dynamic_bounds).enumerate() {
            if b.lo > b.hi {
                return bad(format!("dynamic factor {i} has inverted bounds"));
            }
            if !b.contains(*x) {
                return bad(format!("dynamic factor {i}: init {x} outside bounds"));
            }
        }
        Ok(FactorSpec {
            episodic_train,
            episodic_test,
            dynamic_init,
            dynamic_bounds,
        })
    }

    pub fn num_episodic(&self) -> usize {
        self.episodic_train.len()
    }

    pub fn num_dynamic(&self) -> usize {
        self.dynamic_bounds.len()
    }

    pub fn num_factors(&self) -> usize {
        self.num_episodic() + self.num_dynamic()
    }

    pub fn episodic_range(&self, phase: Phase, i: usize) -> Interval {
        match phase {
            Phase::Train => self.episodic_train[i],
            Phase::Test => self.episodic_test[i],
        }
    }

    pub fn episodic_ranges(&self, phase: Phase) -> &[Interval] {
        match phase {
            Phase::Train => &self.episodic_train,
            Phase::Test => &self.episodic_test,
        }
    }

    pub fn dynamic_init(&self) -> &[f64] {
        &self.dynamic_init
    }

    pub fn dynamic_bounds(&self) -> &[Interval] {
        &self.dynamic_bounds
    }

    /// Per-factor sampling ranges for the given phase: episodic ranges of
    /// that phase followed by the full dynamic bounds.
    pub fn full_ranges(&self, phase: Phase) -> Vec<Interval> {
        let mut out = self.episodic_ranges(phase).to_vec();
        out.extend_from_slice(&self.dynamic_bounds);
        out
    }
}

/// The ground-truth factors of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorState {
    pub episodic: Vec<f64>,
    pub dynamic: Vec<f64>,
}

impl FactorState {
    /// Episodic factors first, then dynamic ones.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.episodic.clone();
        v.extend_from_slice(&self.dynamic);
        v
    }
}

/// Episodic factors uniform in the phase's ranges; dynamic factors at their
/// initial values.
pub fn sample_episode_factors<R: Rng + ?Sized>(spec: &FactorSpec, phase: Phase, rng: &mut R) -> FactorState {
    FactorState {
        episodic: spec.episodic_ranges(phase).iter().map(|r| r.sample(rng)).collect(),
        dynamic: spec.dynamic_init.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    Linear,
    Nonlinear,
}

pub const MAX_CONDITION_NUMBER: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MixerSpec {
    pub mode: MixMode,
    /// obs_dim × K
    pub mixing: Matrix,
    pub gain: f64,
    pub frame_stack: usize,
}

impl MixerSpec {
    pub fn new(mode: MixMode, mixing: Matrix, gain: f64, frame_stack: usize) -> Result<Self> {
        if mixing.rows() < mixing.cols() {
            return Err(TedError::InvalidSpec(format!(
                "obs_dim {} must be at least the factor count {}",
                mixing.rows(),
                mixing.cols()
            )));
        }
        if !(gain > 0.0) {
            return Err(TedError::InvalidSpec("nonlinearity gain must be positive".into()));
        }
        if frame_stack == 0 {
            return Err(TedError::InvalidSpec("frame_stack must be at least 1".into()));
        }
        let cond = condition_number(&mixing);
        if !(cond <= MAX_CONDITION_NUMBER) {
            return Err(TedError::InvalidSpec(format!(
                "mixing matrix condition number {cond:.3} exceeds {MAX_CONDITION_NUMBER}"
            )));
        }
        Ok(MixerSpec {
            mode,
            mixing,
            gain,
            frame_stack,
        })
    }

    /// Gaussian mixing matrix scaled by `1/√K`, redrawn until its condition
    /// number is at most [`MAX_CONDITION_NUMBER`].
    pub fn random<R: Rng + ?Sized>(
        num_factors: usize,
        obs_dim: usize,
        mode: MixMode,
        gain: f64,
        frame_stack: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if obs_dim < num_factors {
            return Err(TedError::InvalidSpec(format!(
                "obs_dim {obs_dim} must be at least the factor count {num_factors}"
            )));
        }
        let scale = 1.0 / (num_factors as f64).sqrt();
        loop {
            let data: Vec<f64> = (0..obs_dim * num_factors)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect();
            let m = Matrix::from_vec(obs_dim, num_factors, data);
            if condition_number(&m) <= MAX_CONDITION_NUMBER {
                return MixerSpec::new(mode, m, gain, frame_stack);
            }
        }
    }

    pub fn identity(num_factors: usize, frame_stack: usize) -> Self {
        MixerSpec::new(MixMode::Linear, Matrix::identity(num_factors), 1.0, frame_stack)
            .expect("identity mixer is valid")
    }

    pub fn obs_dim(&self) -> usize {
        self.mixing.rows()
    }

    pub fn num_factors(&self) -> usize {
        self.mixing.cols()
    }

    /// Length of a stacked observation vector.
    pub fn observation_len(&self) -> usize {
        self.obs_dim() * self.frame_stack
    }
}

/// Ratio of largest to smallest singular value (∞ if rank deficient).
pub fn condition_number(m: &Matrix) -> f64 {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let sv = dm.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// One frame: `M·s`, followed by `x + gain·tanh(x)` in nonlinear mode.
pub fn mix(factors: &[f64], spec: &MixerSpec) -> Result<Vec<f64>> {
    if factors.len() != spec.num_factors() {
        return Err(TedError::shape("mix", spec.num_factors(), factors.len()));
    }
    let mut out = Vec::with_capacity(spec.obs_dim());
    for r in 0..spec.obs_dim() {
        let x = crate::nncore::dot(spec.mixing.row(r), factors);
        out.push(match spec.mode {
            MixMode::Linear => x,
            MixMode::Nonlinear => x + spec.gain * x.tanh(),
        });
    }
    Ok(out)
}

pub fn mix_state(state: &FactorState, spec: &MixerSpec) -> Result<Vec<f64>> {
    mix(&state.to_vec(), spec)
}

/// The last `frame_stack` frames concatenated oldest first; when fewer exist
/// the earliest frame is repeated at the front.
pub fn stack_frames<F: AsRef<[f64]>>(history: &[F], frame_stack: usize) -> Vec<f64> {
    assert!(!history.is_empty(), "stack_frames needs at least one frame");
    let frame_len = history[0].as_ref().len();
    let mut out = Vec::with_capacity(frame_len * frame_stack);
    let missing = frame_stack.saturating_sub(history.len());
    for _ in 0..missing {
        out.extend_from_slice(history[0].as_ref());
    }
    let start = history.len().saturating_sub(frame_stack);
    for f in &history[start..] {
        out.extend_from_slice(f.as_ref());
    }
    out
}

/// A stacked observation tagged with its episode and timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub data: Vec<f64>,
    pub episode_id: u64,
    pub timestep: usize,
}
