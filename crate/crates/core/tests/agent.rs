use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ted_core::agent::{Agent, AgentConfig};
use ted_core::harness::{random_policy_buffer, ConfigMap, ExperimentConfig};
use ted_core::nncore::{DenseNet, Matrix};
use ted_core::replay::{plan_samples, NegativeKinds, TaggedBatch, TaggedTransition};
use ted_core::synthgen::Observation;
use ted_core::tedloss::TedConfig;

fn small_agent(num_actions: usize, ted: Option<TedConfig>, seed: u64) -> Agent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = DenseNet::encoder(3, &[6], 4, &mut rng);
    Agent::new(AgentConfig::default(), enc, num_actions, ted, &mut rng)
}

#[test]
fn random_actions_are_uniform() {
    let agent = small_agent(4, None, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs = [0.2, -0.4, 0.9];
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[agent.act(&obs, 1.0, &mut rng).unwrap()] += 1;
    }
    let expected = draws as f64 / 4.0;
    for c in counts {
        assert!((c as f64 - expected).abs() <= 0.03 * expected, "{counts:?}");
    }
}

#[test]
fn greedy_ties_go_to_lowest_index() {
    let mut agent = small_agent(3, None, 2);
    let last = agent.q.layers.len() - 1;
    let rows = agent.q.layers[last].weights.rows();
    agent.q.layers[last].weights = Matrix::zeros(rows, 3);
    agent.q.layers[last].biases = Matrix::row_vector(vec![0.1, 0.9, 0.9]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(agent.act(&[0.0, 0.0, 0.0], 0.0, &mut rng).unwrap(), 1);
}

#[test]
fn acting_is_deterministic_and_leaves_parameters_alone() {
    let agent = small_agent(5, None, 3);
    let before = agent.clone();
    let obs = [0.5, 0.1, -0.3];
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..200)
            .map(|_| agent.act(&obs, 0.3, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(7), run(7));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        agent.act(&obs, 0.0, &mut rng).unwrap();
    }
    assert_eq!(agent.encoder, before.encoder);
    assert_eq!(agent.q, before.q);
    assert_eq!(agent.target_encoder, before.target_encoder);
}

// Two-state deterministic chain. From A: stay (r 0) or move to B (r 1).
// From B: stay (r 0.5) or move back to A (r 0).
const NEXT: [[usize; 2]; 2] = [[0, 1], [1, 0]];
const REWARD: [[f64; 2]; 2] = [[0.0, 1.0], [0.5, 0.0]];

fn optimal_q(gamma: f64) -> [[f64; 2]; 2] {
    let mut q = [[0.0f64; 2]; 2];
    for _ in 0..2000 {
        let v = [q[0][0].max(q[0][1]), q[1][0].max(q[1][1])];
        for s in 0..2 {
            for a in 0..2 {
                q[s][a] = REWARD[s][a] + gamma * v[NEXT[s][a]];
            }
        }
    }
    q
}

fn one_hot(state: usize, timestep: usize) -> Observation {
    let mut data = vec![0.0; 2];
    data[state] = 1.0;
    Observation {
        data,
        episode_id: 0,
        timestep,
    }
}

#[test]
fn chain_q_values_match_dynamic_programming() {
    let gamma = 0.5;
    let transitions = (0..2)
        .flat_map(|s| (0..2).map(move |a| (s, a)))
        .map(|(s, a)| TaggedTransition::new(one_hot(s, 0), a, REWARD[s][a], one_hot(NEXT[s][a], 1), false).unwrap())
        .collect();
    let batch = TaggedBatch { transitions };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = DenseNet::encoder(2, &[16], 8, &mut rng);
    let config = AgentConfig {
        gamma,
        target_sync_period: 100,
        q_hidden: vec![16],
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(config, enc, 2, None, &mut rng);
    for _ in 0..5000 {
        agent.td_update(&batch).unwrap();
    }
    let want = optimal_q(gamma);
    for s in 0..2 {
        let got = agent.q_values(&one_hot(s, 0).data).unwrap();
        for a in 0..2 {
            assert!(
                (got[a] - want[s][a]).abs() <= 0.05,
                "Q({s},{a}) = {} vs {}",
                got[a],
                want[s][a]
            );
        }
    }
}

fn small_env() -> ExperimentConfig {
    let map = ConfigMap::default()
        .with(&[
            ("mixer.obs_dim", "6"),
            ("encoder.hidden", "8"),
            ("encoder.latent", "3"),
            ("env.horizon", "10"),
        ])
        .unwrap();
    ExperimentConfig::from_map(map).unwrap()
}

#[test]
fn combined_encoder_gradient_is_sum_of_separate_gradients() {
    let exp = small_env();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let buffer = random_policy_buffer(&exp.env, 200, &mut rng).unwrap();
    let batch = buffer.sample_batch(6, &mut rng).unwrap();
    let plan = plan_samples(&batch, &buffer, NegativeKinds::BOTH, &mut rng).unwrap();
    let enc = DenseNet::encoder(exp.env.observation_len(), &exp.encoder_hidden, exp.latent_dim, &mut rng);
    let mut agent = Agent::new(
        AgentConfig::default(),
        enc,
        exp.env.num_actions(),
        Some(TedConfig::default()),
        &mut rng,
    );
    let targets = agent.td_targets(&batch).unwrap();
    let combined = agent.joint_gradients(&batch, &targets, Some(&plan)).unwrap().encoder;

    let h = 1e-5;
    let mut checked = 0;
    for tensor in 0..combined.len() {
        for entry in 0..combined[tensor].len() {
            let separate = |delta: f64, agent: &mut Agent| {
                agent.encoder.params_mut()[tensor].as_mut_slice()[entry] += delta;
                let td = agent.joint_loss(&batch, &targets, None).unwrap();
                let total = agent.joint_loss(&batch, &targets, Some(&plan)).unwrap();
                agent.encoder.params_mut()[tensor].as_mut_slice()[entry] -= delta;
                (td, total - td)
            };
            let (td_up, ted_up) = separate(h, &mut agent);
            let (td_down, ted_down) = separate(-h, &mut agent);
            let sum = (td_up - td_down) / (2.0 * h) + (ted_up - ted_down) / (2.0 * h);
            let a = combined[tensor].as_slice()[entry];
            let rel = (a - sum).abs() / a.abs().max(sum.abs()).max(1e-3);
            assert!(rel <= 1e-4, "tensor {tensor} entry {entry}: {a} vs {sum}");
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn target_encoder_moves_only_by_averaging() {
    let exp = small_env();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let buffer = random_policy_buffer(&exp.env, 200, &mut rng).unwrap();
    let enc = DenseNet::encoder(exp.env.observation_len(), &exp.encoder_hidden, exp.latent_dim, &mut rng);
    let mut agent = Agent::new(
        AgentConfig::default(),
        enc,
        exp.env.num_actions(),
        Some(TedConfig::default()),
        &mut rng,
    );
    for _ in 0..5 {
        let batch = buffer.sample_batch(8, &mut rng).unwrap();
        let mut expected = agent.target_encoder.clone();
        let stats = agent.joint_update(&batch, &buffer, &mut rng).unwrap();
        assert!(stats.td.is_finite() && stats.ted.unwrap().is_finite());
        expected.ema_update(&agent.encoder, agent.config.tau);
        assert_eq!(agent.target_encoder, expected);
    }
}

#[test]
fn zero_alpha_matches_td_only_bit_for_bit() {
    let exp = small_env();
    let buffer = random_policy_buffer(&exp.env, 300, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let make = |ted| {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = DenseNet::encoder(exp.env.observation_len(), &exp.encoder_hidden, exp.latent_dim, &mut rng);
        Agent::new(AgentConfig::default(), enc, exp.env.num_actions(), ted, &mut rng)
    };
    let mut with = make(Some(TedConfig {
        alpha: 0.0,
        ..TedConfig::default()
    }));
    let mut without = make(None);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(9);
    let mut ted_rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..30 {
        let batch = buffer.sample_batch(8, &mut batch_rng).unwrap();
        with.joint_update(&batch, &buffer, &mut ted_rng).unwrap();
        without.joint_update(&batch, &buffer, &mut ted_rng).unwrap();
    }
    assert_eq!(with.encoder, without.encoder);
    assert_eq!(with.q, without.q);
}
