//! Replicated per-node state: last-writer-wins records with tombstones,
//! grow-only counters and observed-remove sets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{canonical_json, AgentId, Digest, Payload, Round, Version};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("cannot merge records for different keys ({0:?} vs {1:?})")]
    KeyMismatch(String, String),
    #[error("counter increment must be non-negative, got {0}")]
    NegativeIncrement(i64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LwwRecord {
    pub key: String,
    pub value: Payload,
    pub version: Version,
    pub tombstone: bool,
    pub expiry_round: Option<Round>,
}

impl LwwRecord {
    pub fn live(key: impl Into<String>, value: impl Into<Payload>, version: Version) -> Self {
        LwwRecord {
            key: key.into(),
            value: value.into(),
            version,
            tombstone: false,
            expiry_round: None,
        }
    }

    pub fn tombstone(key: impl Into<String>, version: Version, expiry_round: Round) -> Self {
        LwwRecord {
            key: key.into(),
            value: Payload::default(),
            version,
            tombstone: true,
            expiry_round: Some(expiry_round),
        }
    }

    // Versions never tie between distinct writes; the remaining fields only
    // keep the merge a total-order max if they ever did.
    fn rank(&self) -> (Version, bool, &Payload, Option<Round>) {
        (self.version, self.tombstone, &self.value, self.expiry_round)
    }
}

/// The record with the greater version wins outright.
pub fn lww_merge(a: &LwwRecord, b: &LwwRecord) -> Result<LwwRecord, StoreError> {
    if a.key != b.key {
        return Err(StoreError::KeyMismatch(a.key.clone(), b.key.clone()));
    }
    Ok(if b.rank() > a.rank() { b.clone() } else { a.clone() })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GCounter {
    pub counts: BTreeMap<AgentId, u64>,
}

impl GCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn increment(&mut self, agent: AgentId, amount: i64) -> Result<(), StoreError> {
        if amount < 0 {
            return Err(StoreError::NegativeIncrement(amount));
        }
        *self.counts.entry(agent).or_insert(0) += amount as u64;
        Ok(())
    }

    pub fn value(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Element-wise max. Returns whether `self` changed.
    pub fn merge_from(&mut self, other: &GCounter) -> bool {
        let mut changed = false;
        for (&agent, &n) in &other.counts {
            let e = self.counts.entry(agent).or_insert(0);
            if n > *e {
                *e = n;
                changed = true;
            }
        }
        changed
    }
}

pub fn gcounter_increment(c: &GCounter, agent: AgentId, amount: i64) -> Result<GCounter, StoreError> {
    let mut out = c.clone();
    out.increment(agent, amount)?;
    Ok(out)
}

pub fn gcounter_merge(a: &GCounter, b: &GCounter) -> GCounter {
    let mut out = a.clone();
    out.merge_from(b);
    out
}

pub fn gcounter_value(c: &GCounter) -> u64 {
    c.value()
}

/// Unique add-tag: the adding agent and its private sequence number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub agent: AgentId,
    pub seq: u64,
}

/// Add-wins observed-remove set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ORSet {
    pub adds: BTreeMap<String, BTreeSet<Tag>>,
    pub removes: BTreeSet<Tag>,
}

impl ORSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, elem: impl Into<String>, tag: Tag) {
        self.adds.entry(elem.into()).or_default().insert(tag);
    }

    /// Removes only the add-tags this replica has observed.
    pub fn remove(&mut self, elem: &str) {
        if let Some(tags) = self.adds.get(elem) {
            self.removes.extend(tags.iter().copied());
        }
    }

    pub fn contains(&self, elem: &str) -> bool {
        self.adds
            .get(elem)
            .is_some_and(|tags| tags.iter().any(|t| !self.removes.contains(t)))
    }

    pub fn elements(&self) -> Vec<&str> {
        self.adds
            .keys()
            .filter(|e| self.contains(e))
            .map(String::as_str)
            .collect()
    }

    pub fn merge_from(&mut self, other: &ORSet) -> bool {
        let mut changed = false;
        for (elem, tags) in &other.adds {
            let mine = self.adds.entry(elem.clone()).or_default();
            for t in tags {
                changed |= mine.insert(*t);
            }
        }
        for t in &other.removes {
            changed |= self.removes.insert(*t);
        }
        changed
    }
}

pub fn orset_merge(a: &ORSet, b: &ORSet) -> ORSet {
    let mut out = a.clone();
    out.merge_from(b);
    out
}

/// One node's replicated state.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Store {
    pub records: BTreeMap<String, LwwRecord>,
    pub counters: BTreeMap<String, GCounter>,
    pub sets: BTreeMap<String, ORSet>,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, key: &str) -> Option<&LwwRecord> {
        self.records.get(key)
    }

    /// Live value for `key`; tombstoned keys read as absent.
    pub fn get(&self, key: &str) -> Option<&Payload> {
        self.records
            .get(key)
            .filter(|r| !r.tombstone)
            .map(|r| &r.value)
    }

    pub fn version(&self, key: &str) -> Option<Version> {
        self.records.get(key).map(|r| r.version)
    }

    /// LWW-merge a record in. Returns whether the stored record changed.
    pub fn apply(&mut self, rec: LwwRecord) -> bool {
        match self.records.get(&rec.key) {
            Some(cur) => {
                let merged = lww_merge(cur, &rec).expect("same key");
                if &merged == cur {
                    false
                } else {
                    self.records.insert(rec.key.clone(), merged);
                    true
                }
            }
            None => {
                self.records.insert(rec.key.clone(), rec);
                true
            }
        }
    }

    /// Write a tombstone for `key` one version past whatever is stored.
    /// Unknown keys still get a tombstone.
    pub fn delete(&mut self, key: &str, clock: Version, round: Round, grace: u64) -> LwwRecord {
        let observed = self.version(key).unwrap_or_default();
        let version = crate::model::next_version(clock, observed);
        let tomb = LwwRecord::tombstone(key, version, round + grace);
        self.apply(tomb.clone());
        tomb
    }

    pub fn counter(&self, name: &str) -> Option<&GCounter> {
        self.counters.get(name)
    }

    pub fn merge_counter(&mut self, name: &str, c: &GCounter) -> bool {
        match self.counters.get_mut(name) {
            Some(mine) => mine.merge_from(c),
            None => {
                self.counters.insert(name.to_string(), c.clone());
                true
            }
        }
    }

    pub fn set(&self, name: &str) -> Option<&ORSet> {
        self.sets.get(name)
    }

    pub fn merge_set(&mut self, name: &str, s: &ORSet) -> bool {
        match self.sets.get_mut(name) {
            Some(mine) => mine.merge_from(s),
            None => {
                self.sets.insert(name.to_string(), s.clone());
                true
            }
        }
    }

    pub fn digest(&self) -> Digest {
        self.records
            .iter()
            .map(|(k, r)| (k.clone(), r.version))
            .collect()
    }

    /// Drop every record whose expiry round has been reached. Tombstones
    /// carry their grace period in `expiry_round`.
    pub fn expire_sweep(&mut self, now: Round) -> Vec<String> {
        let expired: Vec<String> = self
            .records
            .iter()
            .filter(|(_, r)| r.expiry_round.is_some_and(|e| e <= now))
            .map(|(k, _)| k.clone())
            .collect();
        for k in &expired {
            self.records.remove(k);
        }
        expired
    }

    pub fn to_canonical_json(&self) -> String {
        canonical_json(self)
    }
}
