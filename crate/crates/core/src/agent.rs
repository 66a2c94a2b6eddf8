//! Value-based surrogate agent sharing its encoder with the TED loss.

use rand::Rng;

use crate::error::{Result, TedError};
use crate::nncore::{Adam, AdamConfig, DenseNet, GradTape, Gradients, Matrix, Var};
use crate::replay::{plan_samples, ReplayBuffer, SamplePlan, TaggedBatch};
use crate::tedloss::{ted_loss_tape, Classifier, TedConfig, CLASSIFIER_GROUP, ENCODER_GROUP};

/// Tape group used for Q-head parameters.
pub const Q_GROUP: u16 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which epsilon decays linearly after the initial
    /// random phase.
    pub epsilon_decay_steps: u64,
    pub target_sync_period: u64,
    pub updates_per_step: usize,
    pub initial_steps: u64,
    pub batch_size: usize,
    pub q_hidden: Vec<usize>,
    /// Target encoder EMA rate.
    pub tau: f64,
    pub adam: AdamConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
            target_sync_period: 200,
            updates_per_step: 1,
            initial_steps: 1000,
            batch_size: 128,
            q_hidden: vec![64],
            tau: 0.01,
            adam: AdamConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(TedError::config("agent.gamma", "must lie in [0, 1)"));
        }
        for (key, v) in [
            ("agent.epsilon_start", self.epsilon_start),
            ("agent.epsilon_end", self.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TedError::config(key, "must lie in [0, 1]"));
            }
        }
        if self.epsilon_end > self.epsilon_start {
            return Err(TedError::config("agent.epsilon_end", "schedule must be nonincreasing"));
        }
        if self.target_sync_period == 0 {
            return Err(TedError::config("agent.target_sync_period", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(TedError::config("agent.batch_size", "must be positive"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(TedError::config("agent.tau", "must lie in (0, 1]"));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(TedError::config("agent.learning_rate", "must be positive"));
        }
        Ok(())
    }

    /// Exploration rate at environment step `step`.
    pub fn epsilon(&self, step: u64) -> f64 {
        if step < self.initial_steps {
            return 1.0;
        }
        let since = (step - self.initial_steps) as f64;
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_end;
        }
        let frac = since / self.epsilon_decay_steps as f64;
        if frac >= 1.0 {
            return self.epsilon_end;
        }
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// Losses of one update; `ted` is `None` when TED is disabled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub td: f64,
    pub ted: Option<f64>,
}

/// Per-group gradients of the combined loss.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGradients {
    pub encoder: Vec<Matrix>,
    pub q: Vec<Matrix>,
    pub classifier: Vec<Matrix>,
    pub stats: UpdateStats,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub encoder: DenseNet,
    pub target_encoder: DenseNet,
    pub q: DenseNet,
    pub target_q: DenseNet,
    pub ted: Option<(TedConfig, Classifier)>,
    encoder_opt: Adam,
    q_opt: Adam,
    classifier_opt: Option<Adam>,
    updates: u64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        config: AgentConfig,
        encoder: DenseNet,
        num_actions: usize,
        ted: Option<TedConfig>,
        rng: &mut R,
    ) -> Self {
        let q = DenseNet::mlp(encoder.output_dim(), &config.q_hidden, num_actions, rng);
        let ted = ted.map(|cfg| (cfg, Classifier::new(cfg.classifier, encoder.output_dim())));
        let classifier_opt = ted.as_ref().map(|(_, c)| Adam::new(config.adam, &c.param_shapes()));
        Agent {
            encoder_opt: Adam::new(config.adam, &encoder.param_shapes()),
            q_opt: Adam::new(config.adam, &q.param_shapes()),
            classifier_opt,
            target_encoder: encoder.clone(),
            target_q: q.clone(),
            encoder,
            q,
            ted,
            config,
            updates: 0,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.q.output_dim()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn q_values(&self, observation: &[f64]) -> Result<Vec<f64>> {
        self.q.forward(&self.encoder.forward(observation)?)
    }

    /// Epsilon-greedy action. Exactly one uniform draw decides exploration,
    /// a second picks the random action when exploring.
    pub fn act<R: Rng + ?Sized>(&self, observation: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
        let u: f64 = rng.random();
        if u < epsilon {
            return Ok(rng.random_range(0..self.num_actions()));
        }
        Ok(argmax(&self.q_values(observation)?))
    }

    /// `r + γ(1 − done) max_a Q′(f_θ′(o_{t+1}), a)` for every transition.
    pub fn td_targets(&self, batch: &TaggedBatch) -> Result<Vec<f64>> {
        let z_next = self.target_encoder.forward_batch(&batch.next_observations())?;
        let q_next = self.target_q.forward_batch(&z_next)?;
        Ok(batch
            .transitions
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let best = q_next.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let bootstrap = if t.done { 0.0 } else { self.config.gamma * best };
                t.reward + bootstrap
            })
            .collect())
    }

    fn record(
        &self,
        tape: &mut GradTape,
        batch: &TaggedBatch,
        targets: &[f64],
        plan: Option<&SamplePlan>,
    ) -> Result<(Var, Option<Var>, Var)> {
        let obs = tape.constant(batch.observations());
        let z = self.encoder.forward_tape(tape, obs, ENCODER_GROUP)?;
        let qv = self.q.forward_tape(tape, z, Q_GROUP)?;
        let actions: Vec<usize> = batch.transitions.iter().map(|t| t.action).collect();
        let qa = tape.gather(qv, &actions);
        let td = tape.mse_to_target(qa, targets);
        let ted = match (&self.ted, plan) {
            (Some((cfg, classifier)), Some(plan)) => {
                let z_second = self.target_encoder.forward_batch(&plan.second_observations())?;
                Some(ted_loss_tape(tape, z, plan, z_second, classifier, cfg))
            }
            _ => None,
        };
        let total = match ted {
            Some(t) => tape.add(td, t),
            None => td,
        };
        Ok((td, ted, total))
    }

    /// Draws the TED sample plan for `batch`, or `None` when TED is disabled.
    pub fn plan<R: Rng + ?Sized>(
        &self,
        batch: &TaggedBatch,
        buffer: &ReplayBuffer,
        rng: &mut R,
    ) -> Result<Option<SamplePlan>> {
        match &self.ted {
            Some((cfg, _)) => Ok(Some(plan_samples(batch, buffer, cfg.samples, rng)?)),
            None => Ok(None),
        }
    }

    /// Combined loss `L_TD + L_TED` at the current parameters, evaluated
    /// through the tape.
    pub fn joint_loss(&self, batch: &TaggedBatch, targets: &[f64], plan: Option<&SamplePlan>) -> Result<f64> {
        let mut tape = GradTape::new();
        let (_, _, total) = self.record(&mut tape, batch, targets, plan)?;
        Ok(tape.scalar(total))
    }

    pub fn joint_gradients(
        &self,
        batch: &TaggedBatch,
        targets: &[f64],
        plan: Option<&SamplePlan>,
    ) -> Result<JointGradients> {
        let mut tape = GradTape::new();
        let (td, ted, total) = self.record(&mut tape, batch, targets, plan)?;
        let grads: Gradients = tape.backward(total)?;
        let classifier = match &self.ted {
            Some((_, c)) => grads.group(CLASSIFIER_GROUP, &c.param_shapes()),
            None => Vec::new(),
        };
        Ok(JointGradients {
            encoder: grads.group(ENCODER_GROUP, &self.encoder.param_shapes()),
            q: grads.group(Q_GROUP, &self.q.param_shapes()),
            classifier,
            stats: UpdateStats {
                td: tape.scalar(td),
                ted: ted.map(|t| tape.scalar(t)),
            },
        })
    }

    fn apply(&mut self, g: JointGradients) -> UpdateStats {
        self.encoder_opt.step(self.encoder.params_mut(), &g.encoder);
        self.q_opt.step(self.q.params_mut(), &g.q);
        if let (Some((_, classifier)), Some(opt)) = (&mut self.ted, &mut self.classifier_opt) {
            opt.step(classifier.params_mut(), &g.classifier);
        }
        self.target_encoder.ema_update(&self.encoder, self.config.tau);
        self.updates += 1;
        if self.updates.is_multiple_of(self.config.target_sync_period) {
            self.target_q = self.q.clone();
        }
        g.stats
    }

    /// One TD-only update of the encoder and Q head.
    pub fn td_update(&mut self, batch: &TaggedBatch) -> Result<f64> {
        let targets = self.td_targets(batch)?;
        let g = self.joint_gradients(batch, &targets, None)?;
        Ok(self.apply(g).td)
    }

    /// One combined TD + TED update; TED sampling uses `ted_rng` only.
    pub fn joint_update<R: Rng + ?Sized>(
        &mut self,
        batch: &TaggedBatch,
        buffer: &ReplayBuffer,
        ted_rng: &mut R,
    ) -> Result<UpdateStats> {
        let plan = self.plan(batch, buffer, ted_rng)?;
        let targets = self.td_targets(batch)?;
        let g = self.joint_gradients(batch, &targets, plan.as_ref())?;
        Ok(self.apply(g))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
