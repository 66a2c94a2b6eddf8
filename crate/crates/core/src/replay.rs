//! Episode-tagged replay storage and construction of the three TED pair
//! kinds: temporal (`X`), different-episode (`X′`) and same-episode
//! non-consecutive (`X″`).

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index;
use rand::Rng;

use crate::error::{Result, TedError};
use crate::nncore::{Encoder, Matrix};
use crate::synthgen::Observation;

/// Episodes with fewer resident transitions than this are never batch anchors.
pub const MIN_EPISODE_TRANSITIONS: usize = 3;

/// Resampling attempts before a single-episode batch is reported as an error.
pub const DIVERSITY_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedTransition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub episode_id: u64,
    pub timestep: usize,
}

impl TaggedTransition {
    pub fn new(obs: Observation, action: usize, reward: f64, next_obs: Observation, done: bool) -> Result<Self> {
        if next_obs.episode_id != obs.episode_id || next_obs.timestep != obs.timestep + 1 {
            return Err(TedError::InvalidSpec(format!(
                "transition ({}, {}) -> ({}, {}) is not consecutive",
                obs.episode_id, obs.timestep, next_obs.episode_id, next_obs.timestep
            )));
        }
        Ok(TaggedTransition {
            episode_id: obs.episode_id,
            timestep: obs.timestep,
            obs,
            action,
            reward,
            next_obs,
            done,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedBatch {
    pub transitions: Vec<TaggedTransition>,
}

impl TaggedBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn distinct_episodes(&self) -> usize {
        let mut ids: Vec<u64> = self.transitions.iter().map(|t| t.episode_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn observations(&self) -> Matrix {
        Matrix::from_rows(
            &self
                .transitions
                .iter()
                .map(|t| t.obs.data.as_slice())
                .collect::<Vec<_>>(),
        )
    }

    pub fn next_observations(&self) -> Matrix {
        Matrix::from_rows(
            &self
                .transitions
                .iter()
                .map(|t| t.next_obs.data.as_slice())
                .collect::<Vec<_>>(),
        )
    }
}

/// FIFO transition store with a per-episode index.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    slots: VecDeque<TaggedTransition>,
    /// Sequence number of `slots[0]`.
    front_seq: u64,
    /// Resident sequence numbers per episode, oldest first.
    episodes: BTreeMap<u64, VecDeque<u64>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            slots: VecDeque::with_capacity(capacity.min(1 << 16)),
            front_seq: 0,
            episodes: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn push(&mut self, t: TaggedTransition) {
        if self.slots.len() == self.capacity {
            let old = self.slots.pop_front().expect("non-empty at capacity");
            if let Some(list) = self.episodes.get_mut(&old.episode_id) {
                list.pop_front();
                if list.is_empty() {
                    self.episodes.remove(&old.episode_id);
                }
            }
            self.front_seq += 1;
        }
        let seq = self.front_seq + self.slots.len() as u64;
        self.episodes.entry(t.episode_id).or_default().push_back(seq);
        self.slots.push_back(t);
    }

    fn get_seq(&self, seq: u64) -> &TaggedTransition {
        &self.slots[(seq - self.front_seq) as usize]
    }

    pub fn get(&self, i: usize) -> Option<&TaggedTransition> {
        self.slots.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaggedTransition> {
        self.slots.iter()
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Resident timesteps of one episode, oldest first.
    pub fn episode_timesteps(&self, episode: u64) -> Vec<usize> {
        self.episodes
            .get(&episode)
            .map(|l| l.iter().map(|&s| self.get_seq(s).timestep).collect())
            .unwrap_or_default()
    }

    pub fn episode_len(&self, episode: u64) -> usize {
        self.episodes.get(&episode).map_or(0, VecDeque::len)
    }

    /// Buffer positions of transitions whose episode can anchor TED samples.
    pub fn eligible_positions(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, t)| self.episode_len(t.episode_id) >= MIN_EPISODE_TRANSITIONS)
            .map(|(i, _)| i)
            .collect()
    }

    /// `n` eligible transitions uniformly without replacement, redrawn until
    /// at least two episodes are present.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<TaggedBatch> {
        let eligible = self.eligible_positions();
        if eligible.len() < n {
            return Err(TedError::InsufficientDiversity(format!(
                "{} eligible transitions, batch needs {n}",
                eligible.len()
            )));
        }
        for _ in 0..=DIVERSITY_RETRIES {
            let picks = index::sample(rng, eligible.len(), n);
            let batch = TaggedBatch {
                transitions: picks.iter().map(|p| self.slots[eligible[p]].clone()).collect(),
            };
            if batch.distinct_episodes() >= 2 {
                return Ok(batch);
            }
        }
        Err(TedError::InsufficientDiversity(format!(
            "no batch with two episodes after {DIVERSITY_RETRIES} retries"
        )))
    }

    /// A resident observation of `episode` whose timestep is outside
    /// `{t, t+1}`, uniformly among the candidates.
    pub fn sample_same_episode<R: Rng + ?Sized>(&self, episode: u64, t: usize, rng: &mut R) -> Result<&Observation> {
        let list = self
            .episodes
            .get(&episode)
            .ok_or(TedError::InsufficientEpisodeLength { episode, resident: 0 })?;
        let valid = |s: u64| {
            let ts = self.get_seq(s).timestep;
            ts != t && ts != t + 1
        };
        if list.len() < MIN_EPISODE_TRANSITIONS || !list.iter().any(|&s| valid(s)) {
            return Err(TedError::InsufficientEpisodeLength {
                episode,
                resident: list.len(),
            });
        }
        loop {
            let s = list[rng.random_range(0..list.len())];
            if valid(s) {
                return Ok(&self.get_seq(s).obs);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairKind {
    /// Consecutive steps of one episode.
    Temporal,
    /// Anchor paired with a different episode's next observation.
    DifferentEpisode,
    /// Anchor paired with a non-adjacent step of its own episode.
    SameEpisode,
}

impl PairKind {
    pub fn label(self) -> f64 {
        match self {
            PairKind::Temporal => 1.0,
            _ => 0.0,
        }
    }
}

/// Which negative kinds to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NegativeKinds {
    pub different_episode: bool,
    pub same_episode: bool,
}

impl NegativeKinds {
    pub const BOTH: NegativeKinds = NegativeKinds {
        different_episode: true,
        same_episode: true,
    };
    pub const DIFFERENT_ONLY: NegativeKinds = NegativeKinds {
        different_episode: true,
        same_episode: false,
    };
    pub const SAME_ONLY: NegativeKinds = NegativeKinds {
        different_episode: false,
        same_episode: true,
    };

    pub fn kinds(self) -> Vec<PairKind> {
        let mut k = vec![PairKind::Temporal];
        if self.different_episode {
            k.push(PairKind::DifferentEpisode);
        }
        if self.same_episode {
            k.push(PairKind::SameEpisode);
        }
        k
    }
}

/// Where the second element of one pair comes from. First elements are
/// always the anchor's `o_t` under the online encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPair {
    pub anchor: usize,
    pub kind: PairKind,
    /// Observation encoded with the target encoder.
    pub second: Observation,
    /// For `X′`: the batch index whose next observation was drawn.
    pub partner: Option<usize>,
}

/// Index-level sample construction shared by the gradient path and
/// [`build_samples`]. Pairs are grouped by kind: all `X`, then `X′`, then `X″`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub pairs: Vec<PlannedPair>,
}

impl SamplePlan {
    pub fn labels(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.kind.label()).collect()
    }

    pub fn anchors(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.anchor).collect()
    }

    pub fn second_observations(&self) -> Matrix {
        Matrix::from_rows(&self.pairs.iter().map(|p| p.second.data.as_slice()).collect::<Vec<_>>())
    }

    pub fn count(&self, kind: PairKind) -> usize {
        self.pairs.iter().filter(|p| p.kind == kind).count()
    }
}

pub fn plan_samples<R: Rng + ?Sized>(
    batch: &TaggedBatch,
    buffer: &ReplayBuffer,
    kinds: NegativeKinds,
    rng: &mut R,
) -> Result<SamplePlan> {
    let n = batch.len();
    if n == 0 || batch.distinct_episodes() < 2 {
        return Err(TedError::InsufficientDiversity(
            "TED samples need transitions from at least two episodes".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(3 * n);
    for (i, t) in batch.transitions.iter().enumerate() {
        pairs.push(PlannedPair {
            anchor: i,
            kind: PairKind::Temporal,
            second: t.next_obs.clone(),
            partner: None,
        });
    }
    if kinds.different_episode {
        let mut candidates = Vec::with_capacity(n);
        for (i, t) in batch.transitions.iter().enumerate() {
            candidates.clear();
            candidates.extend((0..n).filter(|&j| batch.transitions[j].episode_id != t.episode_id));
            let j = candidates[rng.random_range(0..candidates.len())];
            pairs.push(PlannedPair {
                anchor: i,
                kind: PairKind::DifferentEpisode,
                second: batch.transitions[j].next_obs.clone(),
                partner: Some(j),
            });
        }
    }
    if kinds.same_episode {
        for (i, t) in batch.transitions.iter().enumerate() {
            let o = buffer.sample_same_episode(t.episode_id, t.timestep, rng)?;
            pairs.push(PlannedPair {
                anchor: i,
                kind: PairKind::SameEpisode,
                second: o.clone(),
                partner: None,
            });
        }
    }
    Ok(SamplePlan { pairs })
}

/// Post-hoc check of a plan against its batch. Returns one message per
/// violated rule; empty when the plan is well formed.
pub fn plan_violations(batch: &TaggedBatch, plan: &SamplePlan, kinds: NegativeKinds) -> Vec<String> {
    let n = batch.len();
    let mut out = Vec::new();
    for kind in [PairKind::Temporal, PairKind::DifferentEpisode, PairKind::SameEpisode] {
        let expected = if kinds.kinds().contains(&kind) { n } else { 0 };
        if plan.count(kind) != expected {
            out.push(format!("{kind:?}: {} pairs, expected {expected}", plan.count(kind)));
        }
    }
    for (k, p) in plan.pairs.iter().enumerate() {
        let Some(t) = batch.transitions.get(p.anchor) else {
            out.push(format!("pair {k}: anchor {} out of range", p.anchor));
            continue;
        };
        if p.anchor != k % n.max(1) {
            out.push(format!("pair {k}: anchor {} out of order", p.anchor));
        }
        let (e, ts) = (p.second.episode_id, p.second.timestep);
        let ok = match p.kind {
            PairKind::Temporal => e == t.episode_id && ts == t.timestep + 1,
            PairKind::DifferentEpisode => e != t.episode_id,
            PairKind::SameEpisode => e == t.episode_id && ts != t.timestep && ts != t.timestep + 1,
        };
        if !ok {
            out.push(format!(
                "pair {k} ({:?}): anchor ({}, {}) paired with ({e}, {ts})",
                p.kind, t.episode_id, t.timestep
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub label: f64,
    pub kind: PairKind,
}

/// Encodes a plan: first elements with `online`, second elements with
/// `target`.
pub fn encode_plan<E: Encoder + ?Sized, T: Encoder + ?Sized>(
    plan: &SamplePlan,
    batch: &TaggedBatch,
    online: &E,
    target: &T,
) -> Result<Vec<PairSample>> {
    let z_first = online.encode_batch(&batch.observations())?;
    let z_second = target.encode_batch(&plan.second_observations())?;
    Ok(plan
        .pairs
        .iter()
        .enumerate()
        .map(|(k, p)| PairSample {
            first: z_first.row(p.anchor).to_vec(),
            second: z_second.row(k).to_vec(),
            label: p.kind.label(),
            kind: p.kind,
        })
        .collect())
}

pub fn build_samples<E: Encoder + ?Sized, T: Encoder + ?Sized, R: Rng + ?Sized>(
    batch: &TaggedBatch,
    buffer: &ReplayBuffer,
    online: &E,
    target: &T,
    kinds: NegativeKinds,
    rng: &mut R,
) -> Result<Vec<PairSample>> {
    let plan = plan_samples(batch, buffer, kinds, rng)?;
    encode_plan(&plan, batch, online, target)
}
