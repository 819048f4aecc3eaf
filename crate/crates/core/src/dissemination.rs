//! The epidemic engine: peer sampling, the hot rumor buffer, push rounds,
//! admission control and push-pull anti-entropy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexSet;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{AgentId, Priority, Round, Rumor, RumorId};
use crate::node::Agent;

/// Forwarding probability for a buffered rumor.
///
/// Critical rumors go out every round; normal ones decay as `1/k` and
/// routine ones as `1/(2k)` where `k` is the number of rounds the rumor has
/// been buffered.
pub fn forward_probability(priority: Priority, rounds_seen: u32) -> f64 {
    let k = f64::from(rounds_seen.max(1));
    match priority {
        Priority::Critical => 1.0,
        Priority::Normal => 1.0 / k,
        Priority::Routine => 1.0 / (2.0 * k),
    }
}

/// Sample up to `fanout` distinct peers uniformly without replacement from
/// `pool`, skipping `self_id` and everything in `exclude`.
pub fn select_peers<R: Rng + ?Sized>(
    pool: &IndexSet<AgentId>,
    self_id: AgentId,
    fanout: usize,
    rng: &mut R,
    exclude: &BTreeSet<AgentId>,
) -> Vec<AgentId> {
    if fanout == 0 || pool.is_empty() {
        return Vec::new();
    }
    let blocked = usize::from(pool.contains(&self_id) && !exclude.contains(&self_id))
        + exclude.iter().filter(|e| pool.contains(*e)).count();
    let eligible = pool.len() - blocked;
    let want = fanout.min(eligible);
    if want == 0 {
        return Vec::new();
    }
    let is_blocked = |p: &AgentId| *p == self_id || exclude.contains(p);
    if eligible * 4 >= pool.len() {
        // Rejection sampling keeps this O(fanout) on large pools.
        let mut picked = Vec::with_capacity(want);
        while picked.len() < want {
            let p = pool[rng.random_range(0..pool.len())];
            if !is_blocked(&p) && !picked.contains(&p) {
                picked.push(p);
            }
        }
        picked
    } else {
        let candidates: Vec<AgentId> = pool.iter().copied().filter(|p| !is_blocked(p)).collect();
        rand::seq::index::sample(rng, candidates.len(), want)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct HotEntry {
    pub rumor: Rumor,
    pub rounds_seen: u32,
    /// Peers known to hold the rumor already (senders and past targets).
    pub known_holders: BTreeSet<AgentId>,
}

/// Rumors currently being mongered, keyed by id.
#[derive(Clone, Debug)]
pub struct HotBuffer {
    entries: BTreeMap<RumorId, HotEntry>,
    capacity: usize,
}

impl HotBuffer {
    pub fn new(capacity: usize) -> Self {
        HotBuffer {
            entries: BTreeMap::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &RumorId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &RumorId) -> Option<&HotEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &HotEntry> {
        self.entries.values()
    }

    /// Buffer a rumor. Returns the id evicted to make room, if any.
    ///
    /// Eviction picks the entry with the most rounds seen, then the oldest
    /// `created_round`.
    pub fn insert(&mut self, rumor: Rumor, from: Option<AgentId>) -> Option<RumorId> {
        if let Some(e) = self.entries.get_mut(&rumor.rumor_id) {
            e.known_holders.extend(from);
            return None;
        }
        let mut evicted = None;
        if self.entries.len() >= self.capacity {
            let victim = self
                .entries
                .iter()
                .max_by(|(ia, a), (ib, b)| {
                    a.rounds_seen
                        .cmp(&b.rounds_seen)
                        .then(b.rumor.created_round.cmp(&a.rumor.created_round))
                        .then(ib.cmp(ia))
                })
                .map(|(id, _)| *id)
                .expect("buffer at capacity is non-empty");
            self.entries.remove(&victim);
            evicted = Some(victim);
        }
        let id = rumor.rumor_id;
        self.entries.insert(
            id,
            HotEntry {
                rumor,
                rounds_seen: 1,
                known_holders: from.into_iter().collect(),
            },
        );
        evicted
    }

    pub fn note_holder(&mut self, id: &RumorId, holder: AgentId) {
        if let Some(e) = self.entries.get_mut(id) {
            e.known_holders.insert(holder);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outgoing {
    pub to: AgentId,
    pub rumor: Rumor,
}

/// One push round over the hot buffer.
///
/// Each entry is forwarded with [`forward_probability`] to fresh peers with
/// its hop budget decremented. An entry stays hot while
/// `rounds_seen <= ttl_hops`; rumors that arrived with no hops left are
/// never forwarded.
pub fn gossip_round<R: Rng + ?Sized>(
    buffer: &mut HotBuffer,
    pool: &IndexSet<AgentId>,
    self_id: AgentId,
    fanout: usize,
    rng: &mut R,
) -> Vec<Outgoing> {
    let mut out = Vec::new();
    let mut retired = Vec::new();
    for (id, entry) in buffer.entries.iter_mut() {
        if entry.rumor.ttl_hops > 0 {
            let p = forward_probability(entry.rumor.priority, entry.rounds_seen);
            if p >= 1.0 || rng.random::<f64>() < p {
                let targets = select_peers(pool, self_id, fanout, rng, &entry.known_holders);
                for to in targets {
                    let mut copy = entry.rumor.clone();
                    copy.ttl_hops -= 1;
                    entry.known_holders.insert(to);
                    out.push(Outgoing { to, rumor: copy });
                }
            }
        }
        entry.rounds_seen += 1;
        if entry.rounds_seen > entry.rumor.ttl_hops {
            retired.push(*id);
        }
    }
    for id in retired {
        buffer.entries.remove(&id);
    }
    out
}

/// Per-round cap on newly admitted rumors. Critical rumors are exempt.
#[derive(Clone, Debug)]
pub struct RateLimiter {
    max_new_per_round: Option<u32>,
    admitted_this_round: u32,
    round: Round,
}

impl RateLimiter {
    pub fn new(max_new_per_round: Option<u32>) -> Self {
        RateLimiter {
            max_new_per_round,
            admitted_this_round: 0,
            round: 0,
        }
    }

    pub fn unlimited() -> Self {
        Self::new(None)
    }

    pub fn admitted_this_round(&self) -> u32 {
        self.admitted_this_round
    }

    pub fn admit(&mut self, rumor: &Rumor, round: Round) -> bool {
        if round != self.round {
            self.round = round;
            self.admitted_this_round = 0;
        }
        if rumor.priority == Priority::Critical {
            return true;
        }
        match self.max_new_per_round {
            None => true,
            Some(max) if self.admitted_this_round < max => {
                self.admitted_this_round += 1;
                true
            }
            Some(_) => false,
        }
    }
}

/// Outcome flags of handling one received rumor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Effects(u16);

impl Effects {
    pub const ADOPTED: Effects = Effects(1);
    pub const BUFFERED: Effects = Effects(1 << 1);
    pub const DUPLICATE_DROPPED: Effects = Effects(1 << 2);
    pub const TTL_DROPPED: Effects = Effects(1 << 3);
    pub const RATE_DROPPED: Effects = Effects(1 << 4);
    pub const TRUST_HELD: Effects = Effects(1 << 5);
    pub const STALE_DROPPED: Effects = Effects(1 << 6);
    pub const EXPIRED: Effects = Effects(1 << 7);
    pub const FILTERED: Effects = Effects(1 << 8);
    pub const REJECTED: Effects = Effects(1 << 9);

    const NAMES: [(Effects, &'static str); 10] = [
        (Effects::ADOPTED, "adopted"),
        (Effects::BUFFERED, "buffered"),
        (Effects::DUPLICATE_DROPPED, "duplicate_dropped"),
        (Effects::TTL_DROPPED, "ttl_dropped"),
        (Effects::RATE_DROPPED, "rate_dropped"),
        (Effects::TRUST_HELD, "trust_held"),
        (Effects::STALE_DROPPED, "stale_dropped"),
        (Effects::EXPIRED, "expired"),
        (Effects::FILTERED, "filtered"),
        (Effects::REJECTED, "rejected"),
    ];

    pub const fn empty() -> Self {
        Effects(0)
    }

    pub fn contains(self, other: Effects) -> bool {
        self.0 & other.0 == other.0 && other.0 != 0
    }

    pub fn insert(&mut self, other: Effects) {
        self.0 |= other.0;
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl std::ops::BitOr for Effects {
    type Output = Effects;
    fn bitor(self, rhs: Effects) -> Effects {
        Effects(self.0 | rhs.0)
    }
}

impl fmt::Display for Effects {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (flag, name) in Self::NAMES {
            if self.contains(flag) {
                if !first {
                    f.write_str("+")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        if first {
            f.write_str("none")?;
        }
        Ok(())
    }
}

/// Keys moved in each direction by one anti-entropy exchange.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub pulled_by_a: Vec<String>,
    pub pulled_by_b: Vec<String>,
}

impl SyncReport {
    pub fn is_empty(&self) -> bool {
        self.pulled_by_a.is_empty() && self.pulled_by_b.is_empty()
    }
}

/// Push-pull reconciliation: digests are compared and each side takes the
/// records it lacks or holds at a lower version. CRDT state (counters,
/// sets, task boards) is merged in full both ways.
pub fn anti_entropy_exchange(a: &mut Agent, b: &mut Agent, round: Round) -> SyncReport {
    let diff = crate::model::digest_diff(&a.store().digest(), &b.store().digest());
    let for_a: Vec<_> = diff
        .need_from_remote
        .iter()
        .filter_map(|k| b.store().record(k).cloned())
        .collect();
    let for_b: Vec<_> = diff
        .send_to_remote
        .iter()
        .filter_map(|k| a.store().record(k).cloned())
        .collect();
    let snapshot_a = a.crdt_snapshot();
    let snapshot_b = b.crdt_snapshot();
    let a_id = a.id();
    let b_id = b.id();
    let mut report = SyncReport::default();
    for rec in for_a {
        if a.accept_synced_record(rec.clone(), b_id, round) {
            report.pulled_by_a.push(rec.key);
        }
    }
    for rec in for_b {
        if b.accept_synced_record(rec.clone(), a_id, round) {
            report.pulled_by_b.push(rec.key);
        }
    }
    report.pulled_by_a.extend(a.merge_crdt_snapshot(snapshot_b, round));
    report.pulled_by_b.extend(b.merge_crdt_snapshot(snapshot_a, round));
    report
}
