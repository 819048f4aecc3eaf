//! Agent behaviors layered on gossip: task pooling and claiming, pairwise
//! load averaging, and the intent registry used for zone coverage.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{next_version, AgentId, Priority, Round, Version};
use crate::temporal::{decay_weight, AgedValue};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoordinationError {
    #[error("cannot resolve claims for different tasks ({0:?} vs {1:?})")]
    TaskMismatch(String, String),
    #[error("task {0:?} was already announced by this agent")]
    DuplicateTask(String),
    #[error("averaging inputs must be finite, got {0} and {1}")]
    NonFinite(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskState {
    Available,
    Claimed,
    Done,
}

/// A task advertisement as it travels through gossip.
///
/// `epoch` counts re-announcements after a claimant died; a newer epoch
/// supersedes everything from older ones.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskAd {
    pub task_id: String,
    pub descriptor: BTreeSet<String>,
    pub priority: Priority,
    pub origin: AgentId,
    pub announced: Version,
    pub epoch: u32,
    pub state: TaskState,
    pub claimant: Option<AgentId>,
    pub claim_version: Version,
}

impl TaskAd {
    pub fn available(
        task_id: impl Into<String>,
        descriptor: BTreeSet<String>,
        priority: Priority,
        origin: AgentId,
        announced: Version,
    ) -> Self {
        TaskAd {
            task_id: task_id.into(),
            descriptor,
            priority,
            origin,
            announced,
            epoch: 0,
            state: TaskState::Available,
            claimant: None,
            claim_version: announced,
        }
    }

    /// The same task offered again at the next epoch. Every re-announcer
    /// produces an identical ad, so concurrent re-announcements merge.
    pub fn reannounced(&self) -> Self {
        TaskAd {
            epoch: self.epoch + 1,
            state: TaskState::Available,
            claimant: None,
            claim_version: self.announced,
            ..self.clone()
        }
    }

    pub fn done(&self) -> Self {
        TaskAd {
            state: TaskState::Done,
            ..self.clone()
        }
    }

    fn precedence(&self, other: &TaskAd) -> Ordering {
        let claim = |ad: &TaskAd| (ad.claim_version.lamport, ad.claimant);
        self.epoch
            .cmp(&other.epoch)
            .then(self.state.cmp(&other.state))
            .then_with(|| match self.state {
                TaskState::Available => Ordering::Equal,
                // Earlier claims win, so the comparison is reversed.
                _ => claim(other).cmp(&claim(self)),
            })
            .then_with(|| self.cmp(other))
    }
}

/// Join of two views of the same task: newer epoch, then
/// `done > claimed > available`, then the earliest `(lamport, claimant)`.
pub fn resolve_claims(a: &TaskAd, b: &TaskAd) -> Result<TaskAd, CoordinationError> {
    if a.task_id != b.task_id {
        return Err(CoordinationError::TaskMismatch(
            a.task_id.clone(),
            b.task_id.clone(),
        ));
    }
    Ok(if b.precedence(a) == Ordering::Greater {
        b.clone()
    } else {
        a.clone()
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub capabilities: BTreeSet<String>,
    pub load: f64,
    pub zone: Option<u32>,
}

impl AgentProfile {
    pub fn new(capabilities: impl IntoIterator<Item = impl Into<String>>, load: f64) -> Self {
        AgentProfile {
            capabilities: capabilities.into_iter().map(Into::into).collect(),
            load: load.clamp(0.0, 1.0),
            zone: None,
        }
    }
}

/// Claim `ad` if the agent has every required capability and spare
/// capacity. `clock` is the agent's Lamport clock.
pub fn evaluate_claim(
    agent: &AgentProfile,
    agent_id: AgentId,
    clock: Version,
    ad: &TaskAd,
    load_threshold: f64,
) -> Option<TaskAd> {
    if ad.state != TaskState::Available
        || !ad.descriptor.is_subset(&agent.capabilities)
        || agent.load >= load_threshold
    {
        return None;
    }
    let clock = Version {
        author: agent_id,
        ..clock
    };
    Some(TaskAd {
        state: TaskState::Claimed,
        claimant: Some(agent_id),
        claim_version: next_version(clock, ad.claim_version),
        ..ad.clone()
    })
}

/// Tasks known to one agent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBoard {
    pub tasks: BTreeMap<String, TaskAd>,
}

impl TaskBoard {
    pub fn get(&self, id: &str) -> Option<&TaskAd> {
        self.tasks.get(id)
    }

    /// Returns whether the local view changed.
    pub fn merge(&mut self, ad: &TaskAd) -> bool {
        match self.tasks.get(&ad.task_id) {
            Some(cur) => {
                let joined = resolve_claims(cur, ad).expect("same task id");
                if &joined == cur {
                    false
                } else {
                    self.tasks.insert(ad.task_id.clone(), joined);
                    true
                }
            }
            None => {
                self.tasks.insert(ad.task_id.clone(), ad.clone());
                true
            }
        }
    }

    pub fn merge_board(&mut self, other: &TaskBoard) -> Vec<String> {
        other
            .tasks
            .values()
            .filter(|ad| self.merge(ad))
            .map(|ad| ad.task_id.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskAd> {
        self.tasks.values()
    }
}

/// Replace both values by their mean; the pair sum is preserved up to the
/// rounding of one addition.
pub fn averaging_step(x_i: f64, x_j: f64) -> Result<(f64, f64), CoordinationError> {
    if !x_i.is_finite() || !x_j.is_finite() {
        return Err(CoordinationError::NonFinite(x_i, x_j));
    }
    let m = (x_i + x_j) / 2.0;
    Ok((m, m))
}

/// Variance of `values` divided by `baseline` (0 when the baseline is 0).
pub fn normalized_variance(values: &[f64], baseline: f64) -> f64 {
    if baseline <= 0.0 {
        return 0.0;
    }
    variance(values) / baseline
}

pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Latest load snapshot per peer, discounted by age.
#[derive(Clone, Debug, Default)]
pub struct LoadBeliefs {
    snapshots: BTreeMap<AgentId, AgedValue<f64>>,
}

impl LoadBeliefs {
    /// Keep the newer snapshot per peer. Returns whether it was newer.
    pub fn observe(&mut self, peer: AgentId, load: f64, born: Round, ttl: u64, decay: f64) -> bool {
        match self.snapshots.get(&peer) {
            Some(cur) if cur.born_round >= born => false,
            _ => {
                self.snapshots.insert(peer, AgedValue::new(load, born, ttl, decay));
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Decay-weighted mean of the snapshots still inside their TTL.
    pub fn estimate(&self, now: Round) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for s in self.snapshots.values() {
            let age = now.saturating_sub(s.born_round);
            let w = decay_weight(age, s.ttl_rounds, s.decay_rate);
            num += w * s.value;
            den += w;
        }
        (den > 0.0).then(|| num / den)
    }

    pub fn unweighted_mean(&self) -> Option<f64> {
        if self.snapshots.is_empty() {
            return None;
        }
        Some(self.snapshots.values().map(|s| s.value).sum::<f64>() / self.snapshots.len() as f64)
    }
}

pub type ZoneId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentRecord {
    pub agent: AgentId,
    pub activity: String,
    pub zone: ZoneId,
    pub version: Version,
    pub round: Round,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IntentRegistry {
    current: BTreeMap<AgentId, IntentRecord>,
    last_mentioned: BTreeMap<ZoneId, Round>,
}

impl IntentRegistry {
    /// LWW per agent; every intent seen also refreshes its zone's mention
    /// round. Returns whether the agent's current intent changed.
    pub fn update_intent(&mut self, intent: IntentRecord) -> bool {
        let e = self.last_mentioned.entry(intent.zone).or_insert(intent.round);
        *e = (*e).max(intent.round);
        match self.current.get(&intent.agent) {
            Some(cur) if cur.version >= intent.version => false,
            _ => {
                self.current.insert(intent.agent, intent);
                true
            }
        }
    }

    pub fn current(&self, agent: AgentId) -> Option<&IntentRecord> {
        self.current.get(&agent)
    }

    pub fn last_mentioned(&self, zone: ZoneId) -> Option<Round> {
        self.last_mentioned.get(&zone).copied()
    }
}

pub fn update_intent(mut registry: IntentRegistry, intent: IntentRecord) -> IntentRegistry {
    registry.update_intent(intent);
    registry
}

/// Pick a zone nobody has mentioned within the last `silence_rounds`,
/// uniformly at random; if every zone is fresh, the least recently
/// mentioned one (lowest id on ties). The caller's own current zone is only
/// chosen when nothing else qualifies.
pub fn pick_uncovered_zone<R: Rng + ?Sized>(
    registry: &IntentRegistry,
    zones: &[ZoneId],
    self_id: AgentId,
    rng: &mut R,
    now: Round,
    silence_rounds: u64,
) -> Option<ZoneId> {
    let own = registry.current(self_id).map(|i| i.zone);
    let silent = |z: &ZoneId| {
        registry
            .last_mentioned(*z)
            .is_none_or(|r| r + silence_rounds <= now)
    };
    let mut candidates: Vec<ZoneId> = zones
        .iter()
        .copied()
        .filter(|z| silent(z) && Some(*z) != own)
        .collect();
    if candidates.is_empty() {
        candidates = zones.iter().copied().filter(silent).collect();
    }
    if !candidates.is_empty() {
        return Some(candidates[rng.random_range(0..candidates.len())]);
    }
    zones
        .iter()
        .copied()
        .filter(|z| Some(*z) != own || zones.len() == 1)
        .min_by_key(|z| (registry.last_mentioned(*z).unwrap_or(0), *z))
}
