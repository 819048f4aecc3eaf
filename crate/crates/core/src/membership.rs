//! SWIM-style membership: probe planning, suspicion with timeouts,
//! incarnation-based refutation and the merge rule used when membership
//! records arrive by gossip.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexSet;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{AgentId, Round};

/// Liveness state. The derived order is the precedence used at equal
/// incarnation: `Dead > Suspect > Alive`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemberStatus {
    Alive,
    Suspect,
    Dead,
}

impl fmt::Display for MemberStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemberStatus::Alive => "alive",
            MemberStatus::Suspect => "suspect",
            MemberStatus::Dead => "dead",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemberRecord {
    pub id: AgentId,
    pub status: MemberStatus,
    pub incarnation: u64,
    pub last_update_round: Round,
}

impl MemberRecord {
    pub fn alive(id: AgentId, incarnation: u64, round: Round) -> Self {
        MemberRecord {
            id,
            status: MemberStatus::Alive,
            incarnation,
            last_update_round: round,
        }
    }

    fn rank(&self) -> (u64, MemberStatus, Round) {
        (self.incarnation, self.status, self.last_update_round)
    }

    /// True if `self` carries information `other` lacks.
    pub fn supersedes(&self, other: &MemberRecord) -> bool {
        (self.incarnation, self.status) > (other.incarnation, other.status)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MembershipError {
    #[error("cannot merge records of different members ({0} vs {1})")]
    IdMismatch(AgentId, AgentId),
}

/// Higher incarnation wins, then `Dead > Suspect > Alive`.
///
/// The round stamp is the final tie-break so the merge stays a max over a
/// total order (commutative, associative, idempotent).
pub fn merge_member(
    local: &MemberRecord,
    remote: &MemberRecord,
) -> Result<MemberRecord, MembershipError> {
    if local.id != remote.id {
        return Err(MembershipError::IdMismatch(local.id, remote.id));
    }
    Ok(if remote.rank() > local.rank() {
        *remote
    } else {
        *local
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProbePlan {
    pub target: Option<AgentId>,
    pub proxies: Vec<AgentId>,
}

impl ProbePlan {
    pub fn is_noop(&self) -> bool {
        self.target.is_none()
    }
}

/// A status transition observed by a view, as written to the run trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberChange {
    pub peer: AgentId,
    pub old_status: MemberStatus,
    pub new_status: MemberStatus,
    pub incarnation: u64,
}

/// One node's view of the group.
#[derive(Clone, Debug)]
pub struct MembershipView {
    self_id: AgentId,
    records: BTreeMap<AgentId, MemberRecord>,
    /// Non-self members that are alive or suspect (probe candidates).
    probe_pool: IndexSet<AgentId>,
    /// Non-self members believed alive (gossip targets).
    alive_pool: IndexSet<AgentId>,
    /// Round at which this node started suspecting each member.
    suspicion_started: BTreeMap<AgentId, Round>,
    refute_pending: bool,
}

impl MembershipView {
    pub fn new(self_id: AgentId) -> Self {
        let mut records = BTreeMap::new();
        records.insert(self_id, MemberRecord::alive(self_id, 0, 0));
        MembershipView {
            self_id,
            records,
            probe_pool: IndexSet::new(),
            alive_pool: IndexSet::new(),
            suspicion_started: BTreeMap::new(),
            refute_pending: false,
        }
    }

    /// View in which every listed member is alive at incarnation 0.
    pub fn with_members(self_id: AgentId, members: impl IntoIterator<Item = AgentId>) -> Self {
        let mut view = Self::new(self_id);
        for id in members {
            if id != self_id {
                view.insert(MemberRecord::alive(id, 0, 0));
            }
        }
        view
    }

    pub fn self_id(&self) -> AgentId {
        self.self_id
    }

    pub fn get(&self, id: AgentId) -> Option<&MemberRecord> {
        self.records.get(&id)
    }

    pub fn status(&self, id: AgentId) -> Option<MemberStatus> {
        self.records.get(&id).map(|r| r.status)
    }

    pub fn records(&self) -> impl Iterator<Item = &MemberRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn alive_peers(&self) -> &IndexSet<AgentId> {
        &self.alive_pool
    }

    pub fn self_record(&self) -> &MemberRecord {
        &self.records[&self.self_id]
    }

    pub fn incarnation(&self) -> u64 {
        self.self_record().incarnation
    }

    pub fn refute_pending(&self) -> bool {
        self.refute_pending
    }

    /// Lowest id this node believes alive, itself included.
    pub fn lowest_alive(&self) -> AgentId {
        self.records
            .values()
            .find(|r| r.id == self.self_id || r.status == MemberStatus::Alive)
            .map(|r| r.id)
            .unwrap_or(self.self_id)
    }

    fn insert(&mut self, rec: MemberRecord) {
        if rec.id != self.self_id {
            match rec.status {
                MemberStatus::Alive => {
                    self.probe_pool.insert(rec.id);
                    self.alive_pool.insert(rec.id);
                }
                MemberStatus::Suspect => {
                    self.probe_pool.insert(rec.id);
                    self.alive_pool.swap_remove(&rec.id);
                }
                MemberStatus::Dead => {
                    self.probe_pool.swap_remove(&rec.id);
                    self.alive_pool.swap_remove(&rec.id);
                }
            }
            if rec.status == MemberStatus::Suspect {
                self.suspicion_started
                    .entry(rec.id)
                    .or_insert(rec.last_update_round);
            } else {
                self.suspicion_started.remove(&rec.id);
            }
        }
        self.records.insert(rec.id, rec);
    }

    /// Pick a probe target uniformly among alive and suspect peers, plus up
    /// to `proxy_count` distinct alive helpers for indirect probing.
    pub fn probe_round<R: Rng + ?Sized>(&self, rng: &mut R, proxy_count: usize) -> ProbePlan {
        if self.probe_pool.is_empty() {
            return ProbePlan::default();
        }
        let target = self.probe_pool[rng.random_range(0..self.probe_pool.len())];
        let mut proxies = Vec::new();
        let available = self.alive_pool.len() - usize::from(self.alive_pool.contains(&target));
        let want = proxy_count.min(available);
        while proxies.len() < want {
            let p = self.alive_pool[rng.random_range(0..self.alive_pool.len())];
            if p != target && !proxies.contains(&p) {
                proxies.push(p);
            }
        }
        ProbePlan {
            target: Some(target),
            proxies,
        }
    }

    /// Alive -> suspect at the same incarnation. Returns the record to
    /// disseminate, or `None` if the member is unknown or not alive.
    pub fn mark_suspect(&mut self, id: AgentId, round: Round) -> Option<MemberRecord> {
        if id == self.self_id {
            return None;
        }
        let rec = *self.records.get(&id)?;
        if rec.status != MemberStatus::Alive {
            return None;
        }
        let suspect = MemberRecord {
            status: MemberStatus::Suspect,
            last_update_round: round,
            ..rec
        };
        self.insert(suspect);
        self.suspicion_started.insert(id, round);
        Some(suspect)
    }

    /// Promote suspects whose timer has run out to dead.
    pub fn expire_suspicions(&mut self, round: Round, suspicion_timeout: u64) -> Vec<MemberRecord> {
        let due: Vec<AgentId> = self
            .suspicion_started
            .iter()
            .filter(|(_, &start)| round.saturating_sub(start) >= suspicion_timeout)
            .map(|(&id, _)| id)
            .collect();
        let mut dead = Vec::with_capacity(due.len());
        for id in due {
            let rec = self.records[&id];
            if rec.status != MemberStatus::Suspect {
                self.suspicion_started.remove(&id);
                continue;
            }
            let d = MemberRecord {
                status: MemberStatus::Dead,
                last_update_round: round,
                ..rec
            };
            self.insert(d);
            dead.push(d);
        }
        dead
    }

    /// Merge a gossiped record. Returns the transition if the local status
    /// or incarnation changed.
    pub fn apply(&mut self, remote: MemberRecord, round: Round) -> Option<MemberChange> {
        if remote.id == self.self_id {
            let me = *self.self_record();
            if remote.status != MemberStatus::Alive && remote.incarnation >= me.incarnation {
                self.refute_pending = true;
                if me.status == MemberStatus::Alive || remote.incarnation > me.incarnation {
                    // The self record never goes dead locally.
                    let s = MemberRecord {
                        id: me.id,
                        status: MemberStatus::Suspect,
                        incarnation: remote.incarnation,
                        last_update_round: round,
                    };
                    self.records.insert(me.id, s);
                    return Some(MemberChange {
                        peer: me.id,
                        old_status: me.status,
                        new_status: MemberStatus::Suspect,
                        incarnation: s.incarnation,
                    });
                }
            }
            return None;
        }
        let stamped = MemberRecord {
            last_update_round: round,
            ..remote
        };
        match self.records.get(&remote.id).copied() {
            None => {
                self.insert(stamped);
                Some(MemberChange {
                    peer: remote.id,
                    old_status: MemberStatus::Alive,
                    new_status: remote.status,
                    incarnation: remote.incarnation,
                })
                .filter(|c| c.new_status != MemberStatus::Alive)
            }
            Some(local) if remote.supersedes(&local) => {
                self.insert(stamped);
                Some(MemberChange {
                    peer: remote.id,
                    old_status: local.status,
                    new_status: remote.status,
                    incarnation: remote.incarnation,
                })
            }
            Some(_) => None,
        }
    }

    /// Bump our own incarnation in answer to a suspicion. No-op unless a
    /// suspicion about us has been seen.
    pub fn refute(&mut self, round: Round) -> Option<MemberRecord> {
        if !self.refute_pending {
            return None;
        }
        self.refute_pending = false;
        Some(self.bump_incarnation(round))
    }

    /// Rejoin after downtime: alive at a fresh incarnation.
    pub fn bump_incarnation(&mut self, round: Round) -> MemberRecord {
        let me = *self.self_record();
        let rec = MemberRecord::alive(me.id, me.incarnation + 1, round);
        self.records.insert(me.id, rec);
        rec
    }
}
