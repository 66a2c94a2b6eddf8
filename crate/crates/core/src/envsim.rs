//! Episodic reaching task whose observations come from the factor mixer.
//!
//! The agent moves the dynamic factors with discrete unit steps; episodic
//! factors are redrawn at every reset. With [`GoalSource::Fixed`] the
//! episodic factors are pure distractors; with [`GoalSource::EpisodicFactor`]
//! they set the goal and so change the optimal policy.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Result, TedError};
use crate::synthgen::{
    mix_state, sample_episode_factors, stack_frames, FactorSpec, FactorState, MixerSpec, Observation, Phase,
};

#[derive(Debug, Clone, PartialEq)]
pub enum GoalSource {
    /// Goal position in dynamic-factor space.
    Fixed(Vec<f64>),
    /// Goal coordinate `j` is episodic factor `indices[j]`.
    EpisodicFactor(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub factor_spec: FactorSpec,
    pub mixer_spec: MixerSpec,
    pub horizon: usize,
    pub step_size: f64,
    pub goal_source: GoalSource,
    /// Displacement vectors over the dynamic factors, one per action.
    pub actions: Vec<Vec<f64>>,
}

impl EnvSpec {
    pub fn new(
        factor_spec: FactorSpec,
        mixer_spec: MixerSpec,
        horizon: usize,
        step_size: f64,
        goal_source: GoalSource,
    ) -> Result<Self> {
        let actions = default_actions(factor_spec.num_dynamic());
        EnvSpec::with_actions(factor_spec, mixer_spec, horizon, step_size, goal_source, actions)
    }

    pub fn with_actions(
        factor_spec: FactorSpec,
        mixer_spec: MixerSpec,
        horizon: usize,
        step_size: f64,
        goal_source: GoalSource,
        actions: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let bad = |m: String| Err(TedError::InvalidSpec(m));
        if horizon < 2 {
            return bad(format!("horizon must be at least 2, got {horizon}"));
        }
        if !(step_size > 0.0) {
            return bad(format!("step_size must be positive, got {step_size}"));
        }
        if mixer_spec.num_factors() != factor_spec.num_factors() {
            return bad(format!(
                "mixer expects {} factors, factor spec has {}",
                mixer_spec.num_factors(),
                factor_spec.num_factors()
            ));
        }
        let nd = factor_spec.num_dynamic();
        match &goal_source {
            GoalSource::Fixed(g) if g.len() != nd => {
                return bad(format!("fixed goal has {} coordinates, expected {nd}", g.len()))
            }
            GoalSource::EpisodicFactor(idx) => {
                if idx.len() != nd {
                    return bad(format!("goal needs {nd} episodic factors, got {}", idx.len()));
                }
                if let Some(i) = idx.iter().find(|&&i| i >= factor_spec.num_episodic()) {
                    return bad(format!("goal factor {i} is not an episodic factor"));
                }
            }
            _ => {}
        }
        if actions.is_empty() || actions.iter().any(|a| a.len() != nd) {
            return bad("every action must displace all dynamic factors".into());
        }
        Ok(EnvSpec {
            factor_spec,
            mixer_spec,
            horizon,
            step_size,
            goal_source,
            actions,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn observation_len(&self) -> usize {
        self.mixer_spec.observation_len()
    }

    pub fn goal_for(&self, factors: &FactorState) -> Vec<f64> {
        match &self.goal_source {
            GoalSource::Fixed(g) => g.clone(),
            GoalSource::EpisodicFactor(idx) => idx.iter().map(|&i| factors.episodic[i]).collect(),
        }
    }
}

/// No-op first, then `+e_i, -e_i` for each dynamic dimension.
pub fn default_actions(num_dynamic: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; num_dynamic]];
    for i in 0..num_dynamic {
        for s in [1.0, -1.0] {
            let mut a = vec![0.0; num_dynamic];
            a[i] = s;
            out.push(a);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
struct Episode {
    id: u64,
    phase: Phase,
    factors: FactorState,
    goal: Vec<f64>,
    frames: VecDeque<Vec<f64>>,
    timestep: usize,
    done: bool,
}

/// One environment instance. Episode ids increase strictly per instance.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    next_episode_id: u64,
    episode: Option<Episode>,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Self {
        Env::with_first_episode_id(spec, 0)
    }

    pub fn with_first_episode_id(spec: EnvSpec, first: u64) -> Self {
        Env {
            spec,
            next_episode_id: first,
            episode: None,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, phase: Phase, rng: &mut R) -> Result<Observation> {
        let factors = sample_episode_factors(&self.spec.factor_spec, phase, rng);
        let frame = mix_state(&factors, &self.spec.mixer_spec)?;
        let goal = self.spec.goal_for(&factors);
        let id = self.next_episode_id;
        self.next_episode_id += 1;
        let mut frames = VecDeque::with_capacity(self.spec.mixer_spec.frame_stack);
        frames.push_back(frame);
        self.episode = Some(Episode {
            id,
            phase,
            factors,
            goal,
            frames,
            timestep: 0,
            done: false,
        });
        Ok(self.observation())
    }

    fn observation(&self) -> Observation {
        let ep = self.episode.as_ref().expect("episode in progress");
        let frames: Vec<&[f64]> = ep.frames.iter().map(|f| f.as_slice()).collect();
        Observation {
            data: stack_frames(&frames, self.spec.mixer_spec.frame_stack),
            episode_id: ep.id,
            timestep: ep.timestep,
        }
    }

    /// Reward is the negative distance to the goal of the state the action is
    /// taken in; the dynamic factors then move by `step_size × displacement`,
    /// clipped to their bounds.
    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        let num_actions = self.spec.num_actions();
        let horizon = self.spec.horizon;
        let step_size = self.spec.step_size;
        let ep = self.episode.as_mut().ok_or(TedError::NoEpisode)?;
        if ep.done {
            return Err(TedError::EpisodeFinished);
        }
        if action >= num_actions {
            return Err(TedError::InvalidAction { action, num_actions });
        }
        let reward = -distance(&ep.factors.dynamic, &ep.goal);
        let disp = &self.spec.actions[action];
        let bounds = self.spec.factor_spec.dynamic_bounds();
        for ((x, d), b) in ep.factors.dynamic.iter_mut().zip(disp).zip(bounds) {
            *x = b.clamp(*x + step_size * d);
        }
        ep.timestep += 1;
        ep.done = ep.timestep >= horizon;
        let frame = mix_state(&ep.factors, &self.spec.mixer_spec)?;
        if ep.frames.len() == self.spec.mixer_spec.frame_stack {
            ep.frames.pop_front();
        }
        ep.frames.push_back(frame);
        let done = ep.done;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done,
        })
    }

    pub fn factors(&self) -> Option<&FactorState> {
        self.episode.as_ref().map(|e| &e.factors)
    }

    pub fn goal(&self) -> Option<&[f64]> {
        self.episode.as_ref().map(|e| e.goal.as_slice())
    }

    pub fn phase(&self) -> Option<Phase> {
        self.episode.as_ref().map(|e| e.phase)
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().is_none_or(|e| e.done)
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
