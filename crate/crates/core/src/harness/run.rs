//! One seeded train → switch → continue run.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::log::{write_header, write_row, LogRow};
use crate::agent::Agent;
use crate::dismetric::{disentanglement_score, MetricReport, PairGenerator};
use crate::envsim::Env;
use crate::error::{Result, TedError};
use crate::nncore::{checkpoint, DenseNet};
use crate::replay::{ReplayBuffer, TaggedTransition};
use crate::synthgen::Phase;

/// Independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Env = 2,
    Action = 3,
    Replay = 4,
    Ted = 5,
    Eval = 6,
    Metric = 7,
    ZeroShot = 8,
}

/// Generator for `stream` of run `seed`; `index` separates repeated uses such
/// as the evaluation at each logged step.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)));
    rng.set_stream(stream as u64);
    rng
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<LogRow>,
    pub agent: Agent,
    /// Encoder snapshot at the switch step.
    pub switch_encoder: DenseNet,
}

pub fn build_agent(config: &ExperimentConfig, seed: u64) -> Agent {
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let encoder = DenseNet::encoder_with_norm(
        config.env.observation_len(),
        &config.encoder_hidden,
        config.latent_dim,
        config.layer_norm,
        &mut rng,
    );
    Agent::new(
        config.agent.clone(),
        encoder,
        config.env.num_actions(),
        config.ted,
        &mut rng,
    )
}

/// Mean and population standard deviation of greedy returns.
pub fn evaluate(
    agent: &Agent,
    config: &ExperimentConfig,
    phase: Phase,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut env = Env::new(config.env.clone());
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(phase, rng)?;
        let mut total = 0.0;
        loop {
            let a = agent.act(&obs.data, 0.0, rng)?;
            let r = env.step(a)?;
            total += r.reward;
            obs = r.observation;
            if r.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Full metric report for `encoder` on the factor ranges of `phase`.
pub fn metric_report(
    encoder: &DenseNet,
    config: &ExperimentConfig,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<MetricReport> {
    let generator = PairGenerator::from_spec(
        &config.env.factor_spec,
        &config.env.mixer_spec,
        phase,
        config.env.step_size,
    )?;
    disentanglement_score(encoder, &generator, &config.metric, rng)
}

pub fn score_encoder(encoder: &DenseNet, config: &ExperimentConfig, phase: Phase, rng: &mut ChaCha8Rng) -> Result<f64> {
    Ok(metric_report(encoder, config, phase, rng)?.accuracy)
}

#[derive(Default)]
struct LossAccumulator {
    td: f64,
    ted: f64,
    updates: usize,
    ted_updates: usize,
}

impl LossAccumulator {
    fn take(&mut self) -> (Option<f64>, Option<f64>) {
        let td = (self.updates > 0).then(|| self.td / self.updates as f64);
        let ted = (self.ted_updates > 0).then(|| self.ted / self.ted_updates as f64);
        *self = LossAccumulator::default();
        (td, ted)
    }
}

/// Runs one seed, writing log rows to `out` as they are produced and calling
/// `observer` after every parameter update.
pub fn run_to_writer<W: Write>(
    config: &ExperimentConfig,
    seed: u64,
    out: W,
    observer: &mut dyn FnMut(u64, &Agent),
) -> Result<RunOutcome> {
    let mut writer = csv::Writer::from_writer(out);
    write_header(&mut writer, config.run.zero_shot_probe)?;
    let mut rows = Vec::new();
    let mut step = 0u64;
    let mut phase = Phase::Train;
    let result = run_loop(config, seed, &mut writer, &mut rows, &mut step, &mut phase, observer);
    match result {
        Ok((agent, switch_encoder)) => {
            writer.flush()?;
            Ok(RunOutcome {
                rows,
                agent,
                switch_encoder,
            })
        }
        Err(e) => {
            let row = LogRow::error(seed, step, config.run.zero_shot_probe);
            write_row(&mut writer, &row)?;
            writer.flush()?;
            Err(e)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_loop<W: Write>(
    config: &ExperimentConfig,
    seed: u64,
    writer: &mut csv::Writer<W>,
    rows: &mut Vec<LogRow>,
    step: &mut u64,
    phase: &mut Phase,
    observer: &mut dyn FnMut(u64, &Agent),
) -> Result<(Agent, DenseNet)> {
    let run = &config.run;
    let mut agent = build_agent(config, seed);
    let mut env = Env::new(config.env.clone());
    let mut env_rng = stream_rng(seed, Stream::Env, 0);
    let mut act_rng = stream_rng(seed, Stream::Action, 0);
    let mut replay_rng = stream_rng(seed, Stream::Replay, 0);
    let mut ted_rng = stream_rng(seed, Stream::Ted, 0);
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let mut losses = LossAccumulator::default();
    let mut switch_encoder = agent.encoder.clone();

    let mut emit =
        |agent: &Agent, step: u64, phase: Phase, losses: &mut LossAccumulator, rows: &mut Vec<LogRow>| -> Result<()> {
            let (eval_mean, eval_std) = evaluate(
                agent,
                config,
                phase,
                run.eval_episodes,
                &mut stream_rng(seed, Stream::Eval, step),
            )?;
            let zero_shot = if run.zero_shot_probe {
                match phase {
                    Phase::Train => Some(
                        evaluate(
                            agent,
                            config,
                            Phase::Test,
                            run.eval_episodes,
                            &mut stream_rng(seed, Stream::ZeroShot, step),
                        )?
                        .0,
                    ),
                    Phase::Test => None,
                }
            } else {
                None
            };
            let scored = step == run.switch_step
                || step == run.total_steps
                || (run.metric_period > 0 && step.is_multiple_of(run.metric_period));
            let disentanglement = if scored {
                Some(score_encoder(
                    &agent.encoder,
                    config,
                    phase,
                    &mut stream_rng(seed, Stream::Metric, step),
                )?)
            } else {
                None
            };
            let (td, ted) = losses.take();
            let row = LogRow {
                seed,
                step,
                phase: phase.as_str().to_string(),
                eval_return_mean: Some(eval_mean),
                eval_return_std: Some(eval_std),
                td_loss: td,
                ted_loss: ted,
                disentanglement,
                zero_shot_return_mean: run.zero_shot_probe.then_some(zero_shot).flatten(),
                zero_shot_column: run.zero_shot_probe,
            };
            write_row(writer, &row)?;
            writer.flush()?;
            rows.push(row);
            Ok(())
        };

    let mut obs = env.reset(*phase, &mut env_rng)?;
    emit(&agent, 0, *phase, &mut losses, rows)?;
    while *step < run.total_steps {
        let epsilon = config.agent.epsilon(*step);
        let action = agent.act(&obs.data, epsilon, &mut act_rng)?;
        let result = env.step(action)?;
        *step += 1;
        let next = result.observation.clone();
        buffer.push(TaggedTransition::new(obs, action, result.reward, next, result.done)?);
        obs = result.observation;

        if *step >= config.agent.initial_steps {
            for _ in 0..config.agent.updates_per_step {
                let batch = match buffer.sample_batch(config.agent.batch_size, &mut replay_rng) {
                    Ok(b) => b,
                    Err(TedError::InsufficientDiversity(_)) => break,
                    Err(e) => return Err(e),
                };
                let stats = agent.joint_update(&batch, &buffer, &mut ted_rng)?;
                if !stats.td.is_finite() || stats.ted.is_some_and(|t| !t.is_finite()) {
                    return Err(TedError::NonFinite("training loss"));
                }
                losses.td += stats.td;
                losses.updates += 1;
                if let Some(t) = stats.ted {
                    losses.ted += t;
                    losses.ted_updates += 1;
                }
                observer(*step, &agent);
            }
        }

        if *step == run.switch_step {
            switch_encoder = agent.encoder.clone();
        }
        if (*step).is_multiple_of(run.eval_period)
            || *step == run.switch_step
            || *step == run.total_steps
            || (run.metric_period > 0 && (*step).is_multiple_of(run.metric_period))
        {
            emit(&agent, *step, *phase, &mut losses, rows)?;
        }
        if result.done && *step < run.total_steps {
            *phase = if *step >= run.switch_step {
                Phase::Test
            } else {
                Phase::Train
            };
            obs = env.reset(*phase, &mut env_rng)?;
        }
    }
    Ok((agent, switch_encoder))
}

/// Runs one seed into `out_dir/run_seed{seed}.csv` and saves encoder
/// checkpoints at the switch step and at the end.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("run_seed{seed}.csv"));
    let file = BufWriter::new(File::create(&path)?);
    let outcome = run_to_writer(config, seed, file, &mut |_, _| {})?;
    checkpoint::save(
        &outcome.switch_encoder,
        &out_dir.join(format!("encoder_seed{seed}_switch.txt")),
    )?;
    checkpoint::save(
        &outcome.agent.encoder,
        &out_dir.join(format!("encoder_seed{seed}_final.txt")),
    )?;
    Ok(path)
}
