//! Flat `section.key = value` configuration.
//!
//! Every key has a default; files and `--set` overrides replace values by
//! key. Unknown keys and malformed values are reported with their key path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::AgentConfig;
use crate::dismetric::MetricConfig;
use crate::envsim::{EnvSpec, GoalSource};
use crate::error::{Result, TedError};
use crate::nncore::AdamConfig;
use crate::replay::NegativeKinds;
use crate::synthgen::{FactorSpec, Interval, MixMode, MixerSpec};
use crate::tedloss::{ClassifierKind, TedConfig};

const DEFAULTS: &[(&str, &str)] = &[
    ("env.num_episodic", "2"),
    ("env.num_dynamic", "2"),
    ("env.episodic_train", "-0.9,0.0"),
    ("env.episodic_test", "0.3,0.9"),
    ("env.dynamic_bounds", "-1.0,1.0"),
    ("env.dynamic_init", "0.0"),
    ("env.horizon", "50"),
    ("env.step_size", "0.1"),
    ("env.goal", "fixed"),
    ("env.goal_fixed", "0.5"),
    ("mixer.mode", "nonlinear"),
    ("mixer.obs_dim", "0"),
    ("mixer.gain", "1.0"),
    ("mixer.frame_stack", "3"),
    ("mixer.seed", "7"),
    ("encoder.hidden", "128,128"),
    ("encoder.latent", "0"),
    ("encoder.layer_norm", "true"),
    ("agent.gamma", "0.99"),
    ("agent.epsilon_start", "1.0"),
    ("agent.epsilon_end", "0.05"),
    ("agent.epsilon_decay", "10000"),
    ("agent.target_sync", "200"),
    ("agent.updates_per_step", "1"),
    ("agent.initial_steps", "1000"),
    ("agent.batch_size", "128"),
    ("agent.q_hidden", "64"),
    ("agent.tau", "0.01"),
    ("agent.learning_rate", "0.001"),
    ("replay.capacity", "100000"),
    ("ted.enabled", "true"),
    ("ted.alpha", "1.0"),
    ("ted.positive_weight", "2.0"),
    ("ted.classifier", "ted"),
    ("ted.samples", "both"),
    ("run.total_steps", "20000"),
    ("run.switch_step", "10000"),
    ("run.eval_period", "1000"),
    ("run.eval_episodes", "10"),
    ("run.metric_period", "0"),
    ("run.seeds", "0..5"),
    ("metric.samples", "2000"),
    ("metric.pairs", "32"),
    ("metric.train_fraction", "0.8"),
    ("metric.l1", "0.001"),
    ("metric.iterations", "1000"),
    ("eval.zero_shot_probe", "false"),
    ("ablate.alphas", "0.1,1,10"),
];

/// Ordered key-value view of a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        ConfigMap {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl ConfigMap {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        DEFAULTS.iter().map(|(k, _)| *k)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.into();
                Ok(())
            }
            None => Err(TedError::config(key, "unknown key")),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| TedError::config(assignment, "expected key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn with(mut self, pairs: &[(&str, &str)]) -> Result<Self> {
        for (k, v) in pairs {
            self.set(k, *v)?;
        }
        Ok(self)
    }

    /// Reads `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut map = ConfigMap::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TedError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            map.set(k.trim(), v.trim())?;
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        ConfigMap::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Keys whose values differ between the two maps.
    pub fn diff(&self, other: &ConfigMap) -> Vec<String> {
        self.values
            .iter()
            .filter(|(k, v)| other.values.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect()
    }

    fn raw(&self, key: &str) -> &str {
        self.get(key).expect("every key has a default")
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.raw(key)
            .parse()
            .map_err(|_| TedError::config(key, format!("cannot parse `{}`", self.raw(key))))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse_value(key)?;
        if !v.is_finite() {
            return Err(TedError::config(key, "must be finite"));
        }
        Ok(v)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(TedError::config(key, format!("expected a boolean, got `{other}`"))),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.raw(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| TedError::config(key, format!("bad number `{}`", s.trim())))
            })
            .collect()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| TedError::config(key, format!("bad count `{}`", s.trim())))
            })
            .collect()
    }

    fn interval(&self, key: &str) -> Result<Interval> {
        let v = self.f64_list(key)?;
        if v.len() != 2 || v[0] > v[1] {
            return Err(TedError::config(key, "expected `lo,hi` with lo <= hi"));
        }
        Ok(Interval::new(v[0], v[1]))
    }

    /// `a..b` (half open) or a comma list.
    pub fn seeds(&self, key: &str) -> Result<Vec<u64>> {
        parse_seeds(self.raw(key)).map_err(|m| TedError::config(key, m))
    }
}

pub fn parse_seeds(text: &str) -> std::result::Result<Vec<u64>, String> {
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad seed range `{text}`"))?;
        let b: u64 = b.trim().parse().map_err(|_| format!("bad seed range `{text}`"))?;
        if a >= b {
            return Err(format!("empty seed range `{text}`"));
        }
        return Ok((a..b).collect());
    }
    let seeds = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| format!("bad seed `{s}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err("no seeds".into());
    }
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub total_steps: u64,
    pub switch_step: u64,
    pub eval_period: u64,
    pub eval_episodes: usize,
    /// Zero disables periodic scoring; the switch row is always scored.
    pub metric_period: u64,
    pub seeds: Vec<u64>,
    pub zero_shot_probe: bool,
}

/// Fully validated experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub map: ConfigMap,
    pub env: EnvSpec,
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    /// Layer normalization before the final tanh.
    pub layer_norm: bool,
    pub agent: AgentConfig,
    pub replay_capacity: usize,
    pub ted: Option<TedConfig>,
    pub run: RunConfig,
    pub metric: MetricConfig,
    pub alphas: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_map(map: ConfigMap) -> Result<Self> {
        let ne: usize = map.parse_value("env.num_episodic")?;
        let nd: usize = map.parse_value("env.num_dynamic")?;
        if ne == 0 {
            return Err(TedError::config("env.num_episodic", "must be at least 1"));
        }
        if nd == 0 {
            return Err(TedError::config("env.num_dynamic", "must be at least 1"));
        }
        let k = ne + nd;
        let train = map.interval("env.episodic_train")?;
        let test = map.interval("env.episodic_test")?;
        if train.overlaps(&test) {
            return Err(TedError::config("env.episodic_test", "overlaps env.episodic_train"));
        }
        let bounds = map.interval("env.dynamic_bounds")?;
        let init = map.f64("env.dynamic_init")?;
        if !bounds.contains(init) {
            return Err(TedError::config("env.dynamic_init", "outside env.dynamic_bounds"));
        }
        let factor_spec = FactorSpec::new(vec![train; ne], vec![test; ne], vec![init; nd], vec![bounds; nd])
            .map_err(|e| TedError::config("env", e.to_string()))?;

        let mode = match map.raw("mixer.mode") {
            "linear" => MixMode::Linear,
            "nonlinear" => MixMode::Nonlinear,
            other => return Err(TedError::config("mixer.mode", format!("unknown mode `{other}`"))),
        };
        let obs_dim = match map.parse_value::<usize>("mixer.obs_dim")? {
            0 => 4 * k,
            d if d < k => return Err(TedError::config("mixer.obs_dim", "must be at least the factor count")),
            d => d,
        };
        let frame_stack: usize = map.parse_value("mixer.frame_stack")?;
        if frame_stack == 0 {
            return Err(TedError::config("mixer.frame_stack", "must be at least 1"));
        }
        let gain = map.f64("mixer.gain")?;
        if gain <= 0.0 {
            return Err(TedError::config("mixer.gain", "must be positive"));
        }
        let mut mixer_rng = ChaCha8Rng::seed_from_u64(map.parse_value("mixer.seed")?);
        let mixer = MixerSpec::random(k, obs_dim, mode, gain, frame_stack, &mut mixer_rng)
            .map_err(|e| TedError::config("mixer", e.to_string()))?;

        let goal = match map.raw("env.goal") {
            "fixed" => {
                let g = map.f64_list("env.goal_fixed")?;
                let g = match g.len() {
                    1 => vec![g[0]; nd],
                    n if n == nd => g,
                    _ => return Err(TedError::config("env.goal_fixed", format!("expected 1 or {nd} values"))),
                };
                GoalSource::Fixed(g)
            }
            "episodic_factor" => {
                if ne < nd {
                    return Err(TedError::config(
                        "env.goal",
                        "episodic_factor needs at least as many episodic as dynamic factors",
                    ));
                }
                GoalSource::EpisodicFactor((0..nd).collect())
            }
            other => return Err(TedError::config("env.goal", format!("unknown goal source `{other}`"))),
        };
        let horizon: usize = map.parse_value("env.horizon")?;
        let step_size = map.f64("env.step_size")?;
        let env = EnvSpec::new(factor_spec, mixer, horizon, step_size, goal)
            .map_err(|e| TedError::config("env", e.to_string()))?;

        let encoder_hidden = map.usize_list("encoder.hidden")?;
        if encoder_hidden.contains(&0) {
            return Err(TedError::config("encoder.hidden", "widths must be positive"));
        }
        let latent_dim = match map.parse_value::<usize>("encoder.latent")? {
            0 => k + 2,
            n => n,
        };
        let layer_norm = map.bool("encoder.layer_norm")?;

        let agent = AgentConfig {
            gamma: map.f64("agent.gamma")?,
            epsilon_start: map.f64("agent.epsilon_start")?,
            epsilon_end: map.f64("agent.epsilon_end")?,
            epsilon_decay_steps: map.parse_value("agent.epsilon_decay")?,
            target_sync_period: map.parse_value("agent.target_sync")?,
            updates_per_step: map.parse_value("agent.updates_per_step")?,
            initial_steps: map.parse_value("agent.initial_steps")?,
            batch_size: map.parse_value("agent.batch_size")?,
            q_hidden: map.usize_list("agent.q_hidden")?,
            tau: map.f64("agent.tau")?,
            adam: AdamConfig {
                learning_rate: map.f64("agent.learning_rate")?,
                ..AdamConfig::default()
            },
        };
        agent.validate()?;

        let ted = if map.bool("ted.enabled")? {
            let samples = match map.raw("ted.samples") {
                "both" => NegativeKinds::BOTH,
                "x_prime" => NegativeKinds::DIFFERENT_ONLY,
                "x_dprime" => NegativeKinds::SAME_ONLY,
                other => return Err(TedError::config("ted.samples", format!("unknown sample set `{other}`"))),
            };
            let classifier = ClassifierKind::parse(map.raw("ted.classifier"))
                .ok_or_else(|| TedError::config("ted.classifier", "expected `ted` or `linear`"))?;
            let cfg = TedConfig {
                alpha: map.f64("ted.alpha")?,
                positive_weight: map.f64("ted.positive_weight")?,
                classifier,
                samples,
            };
            cfg.validate()?;
            Some(cfg)
        } else {
            None
        };

        let run = RunConfig {
            total_steps: map.parse_value("run.total_steps")?,
            switch_step: map.parse_value("run.switch_step")?,
            eval_period: map.parse_value("run.eval_period")?,
            eval_episodes: map.parse_value("run.eval_episodes")?,
            metric_period: map.parse_value("run.metric_period")?,
            seeds: map.seeds("run.seeds")?,
            zero_shot_probe: map.bool("eval.zero_shot_probe")?,
        };
        if !(run.switch_step > 0 && run.switch_step < run.total_steps) {
            return Err(TedError::config(
                "run.switch_step",
                "must satisfy 0 < S < run.total_steps",
            ));
        }
        if run.eval_episodes == 0 {
            return Err(TedError::config("run.eval_episodes", "must be at least 1"));
        }
        if run.eval_period == 0 {
            return Err(TedError::config("run.eval_period", "must be positive"));
        }
        let replay_capacity: usize = map.parse_value("replay.capacity")?;
        if replay_capacity < agent.batch_size {
            return Err(TedError::config("replay.capacity", "must hold at least one batch"));
        }

        let metric = MetricConfig {
            pairs_per_sample: map.parse_value("metric.pairs")?,
            total_samples: map.parse_value("metric.samples")?,
            train_fraction: map.f64("metric.train_fraction")?,
            l1: map.f64("metric.l1")?,
            iterations: map.parse_value("metric.iterations")?,
        };
        metric.validate()?;
        let alphas = map.f64_list("ablate.alphas")?;
        if alphas.iter().any(|a| *a < 0.0) {
            return Err(TedError::config("ablate.alphas", "values must be non-negative"));
        }

        Ok(ExperimentConfig {
            map,
            env,
            encoder_hidden,
            latent_dim,
            layer_norm,
            agent,
            replay_capacity,
            ted,
            run,
            metric,
            alphas,
        })
    }

    pub fn defaults() -> Self {
        ExperimentConfig::from_map(ConfigMap::default()).expect("defaults are valid")
    }

    pub fn num_factors(&self) -> usize {
        self.env.factor_spec.num_factors()
    }
}

/// Loads a config file (or the defaults) and applies `key=value` overrides.
pub fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut map = match path {
        Some(p) => ConfigMap::load(p)?,
        None => ConfigMap::default(),
    };
    for o in overrides {
        map.apply_override(o)?;
    }
    ExperimentConfig::from_map(map)
}
