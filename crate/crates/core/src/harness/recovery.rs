//! Factor-recovery study: train an encoder with the TED loss alone on
//! random-policy data and measure how well its coordinates track the true
//! factors.

use rand::Rng;

use super::config::ExperimentConfig;
use super::run::{stream_rng, Stream};
use crate::dismetric::correlation_matching;
use crate::envsim::{Env, EnvSpec};
use crate::error::{Result, TedError};
use crate::nncore::{DenseNet, Encoder, Matrix};
use crate::replay::{ReplayBuffer, TaggedTransition};
use crate::synthgen::Phase;
use crate::tedloss::{ted_update_step, TedConfig, TedModel};

#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    /// Environment, encoder shape, TED, optimizer and EMA settings.
    pub experiment: ExperimentConfig,
    /// Random-policy transitions collected before training.
    pub collect_steps: usize,
    pub updates: usize,
    pub batch_size: usize,
    /// Held-out random-policy observations used for the correlations.
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub seed: u64,
    /// Mean over factors of the matched absolute correlation.
    pub mean_abs_correlation: f64,
    /// Per factor: matched latent coordinate and its absolute correlation.
    pub matches: Vec<(usize, f64)>,
    /// Matched correlation of the untrained encoder, for reference.
    pub initial_mean_abs_correlation: f64,
    pub final_loss: f64,
}

fn random_policy_transitions<R: Rng>(
    env: &mut Env,
    steps: usize,
    rng: &mut R,
    mut visit: impl FnMut(TaggedTransition, &Env),
) -> Result<()> {
    let num_actions = env.spec().num_actions();
    let mut obs = env.reset(Phase::Train, rng)?;
    for _ in 0..steps {
        let a = rng.random_range(0..num_actions);
        let r = env.step(a)?;
        let t = TaggedTransition::new(obs, a, r.reward, r.observation.clone(), r.done)?;
        visit(t, env);
        obs = if r.done {
            env.reset(Phase::Train, rng)?
        } else {
            r.observation
        };
    }
    Ok(())
}

/// Buffer filled with `steps` uniformly random actions on train-phase
/// episodes; its capacity equals `steps`.
pub fn random_policy_buffer<R: Rng>(spec: &EnvSpec, steps: usize, rng: &mut R) -> Result<ReplayBuffer> {
    let mut env = Env::new(spec.clone());
    let mut buffer = ReplayBuffer::new(steps.max(1));
    random_policy_transitions(&mut env, steps, rng, |t, _| buffer.push(t))?;
    Ok(buffer)
}

/// Held-out observations with the factors of their most recent frame.
pub fn factor_samples(config: &ExperimentConfig, count: usize, seed: u64) -> Result<(Matrix, Vec<Vec<f64>>)> {
    let mut env = Env::new(config.env.clone());
    let mut rng = stream_rng(seed, Stream::Eval, u64::MAX);
    let mut observations = Vec::with_capacity(count);
    let mut factors = Vec::with_capacity(count);
    random_policy_transitions(&mut env, count, &mut rng, |t, env| {
        factors.push(env.factors().expect("episode in progress").to_vec());
        observations.push(t.next_obs.data);
    })?;
    Ok((Matrix::from_rows(&observations), factors))
}

pub fn matched_correlation<E: Encoder + ?Sized>(
    encoder: &E,
    observations: &Matrix,
    factors: &[Vec<f64>],
) -> Result<(f64, Vec<(usize, f64)>)> {
    let z = encoder.encode_batch(observations)?;
    let latents: Vec<Vec<f64>> = (0..z.rows()).map(|i| z.row(i).to_vec()).collect();
    Ok(correlation_matching(factors, &latents))
}

pub fn run_factor_recovery(config: &RecoveryConfig, seed: u64) -> Result<RecoveryReport> {
    let exp = &config.experiment;
    let ted: TedConfig = exp
        .ted
        .ok_or_else(|| TedError::config("ted.enabled", "factor recovery needs TED enabled"))?;
    let buffer = random_policy_buffer(&exp.env, config.collect_steps, &mut stream_rng(seed, Stream::Env, 0))?;

    let mut init_rng = stream_rng(seed, Stream::Init, 0);
    let encoder = DenseNet::encoder_with_norm(
        exp.env.observation_len(),
        &exp.encoder_hidden,
        exp.latent_dim,
        exp.layer_norm,
        &mut init_rng,
    );
    let (obs, factors) = factor_samples(exp, config.eval_samples, seed)?;
    let (initial, _) = matched_correlation(&encoder, &obs, &factors)?;

    let mut model = TedModel::new(encoder, ted, exp.agent.tau, exp.agent.adam);
    let mut rng = stream_rng(seed, Stream::Ted, 0);
    let mut final_loss = f64::NAN;
    for _ in 0..config.updates {
        final_loss = ted_update_step(&mut model, &buffer, config.batch_size, &mut rng)?;
        if !final_loss.is_finite() {
            return Err(TedError::NonFinite("TED loss"));
        }
    }
    let (mean, matches) = matched_correlation(&model.encoder, &obs, &factors)?;
    Ok(RecoveryReport {
        seed,
        mean_abs_correlation: mean,
        matches,
        initial_mean_abs_correlation: initial,
        final_loss,
    })
}
