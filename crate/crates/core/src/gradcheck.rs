//! Finite-difference check of the joint TD + TED gradients.
//!
//! Analytic gradients come from the tape. Numerical ones come from central
//! differences of an independent evaluation path: plain batched forward
//! passes for the TD loss, and `encode_plan` + `ted_loss` for the TED loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, AgentConfig};
use crate::error::Result;
use crate::harness::config::ConfigMap;
use crate::harness::{random_policy_buffer, ExperimentConfig};
use crate::nncore::{DenseNet, Matrix};
use crate::replay::{encode_plan, plan_samples, SamplePlan, TaggedBatch};
use crate::tedloss::{ted_loss, Classifier, ClassifierKind, TedConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    /// Random parameter points per classifier kind.
    pub points: usize,
    pub perturbation: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            points: 20,
            perturbation: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub point: usize,
    pub classifier: ClassifierKind,
    pub group: &'static str,
    pub tensor: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub points: usize,
    pub entries_checked: usize,
    /// Largest relative error per parameter group.
    pub max_rel_error: Vec<(&'static str, f64)>,
    pub worst: Option<GradMismatch>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn overall_max(&self) -> f64 {
        self.max_rel_error.iter().map(|g| g.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.overall_max() <= self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps entries whose true
/// gradient is essentially zero from dividing roundoff by roundoff.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

const GROUPS: [&str; 3] = ["encoder", "q_head", "classifier"];
const BATCH: usize = 4;

fn small_config() -> Result<ExperimentConfig> {
    let map = ConfigMap::default().with(&[
        ("mixer.obs_dim", "6"),
        ("mixer.frame_stack", "2"),
        ("encoder.hidden", "5"),
        ("encoder.latent", "3"),
        ("agent.q_hidden", "4"),
        ("env.horizon", "8"),
    ])?;
    ExperimentConfig::from_map(map)
}

fn jitter<R: Rng + ?Sized>(m: &mut Matrix, lo: f64, hi: f64, rng: &mut R) {
    for v in m.as_mut_slice() {
        *v = rng.random_range(lo..hi);
    }
}

/// Moves biases and layer-norm affine terms away from their tidy initial
/// values so every code path is exercised.
fn randomize_net<R: Rng + ?Sized>(net: &mut DenseNet, rng: &mut R) {
    for layer in &mut net.layers {
        jitter(&mut layer.biases, -0.5, 0.5, rng);
    }
    if let Some(norm) = &mut net.final_norm {
        jitter(&mut norm.gain, 0.5, 1.5, rng);
        jitter(&mut norm.bias, -0.3, 0.3, rng);
    }
}

fn random_classifier<R: Rng + ?Sized>(kind: ClassifierKind, n: usize, rng: &mut R) -> Classifier {
    let mut c = Classifier::new(kind, n);
    for p in c.params_mut() {
        jitter(p, -1.0, 1.0, rng);
    }
    c
}

/// TD + TED loss through the plain (non-tape) forward path.
fn plain_loss(agent: &Agent, batch: &TaggedBatch, targets: &[f64], plan: &SamplePlan) -> Result<f64> {
    let z = agent.encoder.forward_batch(&batch.observations())?;
    let q = agent.q.forward_batch(&z)?;
    let td = batch
        .transitions
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (t, y))| (q.row(i)[t.action] - y).powi(2))
        .sum::<f64>()
        / targets.len() as f64;
    let (cfg, classifier) = agent.ted.as_ref().expect("gradcheck agents have TED enabled");
    let samples = encode_plan(plan, batch, &agent.encoder, &agent.target_encoder)?;
    Ok(td + ted_loss(&samples, classifier, cfg)?)
}

fn param_mut(agent: &mut Agent, group: usize, tensor: usize) -> &mut Matrix {
    match group {
        0 => agent.encoder.params_mut().swap_remove(tensor),
        1 => agent.q.params_mut().swap_remove(tensor),
        _ => agent
            .ted
            .as_mut()
            .expect("TED enabled")
            .1
            .params_mut()
            .swap_remove(tensor),
    }
}

fn check_point(
    agent: &mut Agent,
    batch: &TaggedBatch,
    plan: &SamplePlan,
    point: usize,
    cfg: &GradcheckConfig,
    report: &mut GradcheckReport,
) -> Result<()> {
    let kind = agent.ted.as_ref().expect("TED enabled").1.kind();
    let targets = agent.td_targets(batch)?;
    let g = agent.joint_gradients(batch, &targets, Some(plan))?;
    let analytic = [g.encoder, g.q, g.classifier];
    let h = cfg.perturbation;
    for (group, tensors) in analytic.iter().enumerate() {
        for (tensor, grad) in tensors.iter().enumerate() {
            for entry in 0..grad.len() {
                let original = param_mut(agent, group, tensor).as_slice()[entry];
                param_mut(agent, group, tensor).as_mut_slice()[entry] = original + h;
                let up = plain_loss(agent, batch, &targets, plan)?;
                param_mut(agent, group, tensor).as_mut_slice()[entry] = original - h;
                let down = plain_loss(agent, batch, &targets, plan)?;
                param_mut(agent, group, tensor).as_mut_slice()[entry] = original;

                let numeric = (up - down) / (2.0 * h);
                let a = grad.as_slice()[entry];
                let rel = relative_error(a, numeric);
                report.entries_checked += 1;
                let slot = &mut report.max_rel_error[group].1;
                *slot = slot.max(rel);
                if report.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                    report.worst = Some(GradMismatch {
                        point,
                        classifier: kind,
                        group: GROUPS[group],
                        tensor,
                        entry,
                        analytic: a,
                        numeric,
                        rel_error: rel,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Checks every parameter of the encoder, the Q head and the classifier at
/// `config.points` random points, once with each classifier kind.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let exp = small_config()?;
    let mut report = GradcheckReport {
        points: config.points,
        entries_checked: 0,
        max_rel_error: GROUPS.iter().map(|g| (*g, 0.0)).collect(),
        worst: None,
        tolerance: config.tolerance,
    };
    for point in 0..config.points {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(point as u64));
        let buffer = random_policy_buffer(&exp.env, 64, &mut rng)?;
        let batch = buffer.sample_batch(BATCH, &mut rng)?;
        let ted = TedConfig {
            alpha: rng.random_range(0.5..2.0),
            ..TedConfig::default()
        };
        let plan = plan_samples(&batch, &buffer, ted.samples, &mut rng)?;
        let agent_config = AgentConfig {
            q_hidden: exp.agent.q_hidden.clone(),
            ..AgentConfig::default()
        };
        let mut encoder = DenseNet::encoder(exp.env.observation_len(), &exp.encoder_hidden, exp.latent_dim, &mut rng);
        randomize_net(&mut encoder, &mut rng);
        let mut agent = Agent::new(agent_config, encoder, exp.env.num_actions(), Some(ted), &mut rng);
        randomize_net(&mut agent.q, &mut rng);
        randomize_net(&mut agent.target_encoder, &mut rng);
        randomize_net(&mut agent.target_q, &mut rng);

        for kind in [ClassifierKind::Ted, ClassifierKind::Linear] {
            let classifier = random_classifier(kind, exp.latent_dim, &mut rng);
            agent.ted = Some((
                TedConfig {
                    classifier: kind,
                    ..ted
                },
                classifier,
            ));
            check_point(&mut agent, &batch, &plan, point, config, &mut report)?;
        }
    }
    Ok(report)
}
