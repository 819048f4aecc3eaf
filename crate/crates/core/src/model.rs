//! Identifiers, logical versions, the rumor envelope and state digests.
//!
//! Everything here is a plain value type. Protocol layers build on these
//! without sharing any mutable state.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Simulation round index.
pub type Round = u64;

/// Dense agent identifier in `[0, N)`.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl AgentId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for AgentId {
    fn from(v: u32) -> Self {
        AgentId(v)
    }
}

/// Lamport timestamp with the writing agent as tie-break.
///
/// The derived ordering is lexicographic on `(lamport, author)`, which makes
/// it a strict total order: two versions compare equal only when both fields
/// match.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Version {
    pub lamport: u64,
    pub author: AgentId,
}

impl Version {
    pub const fn new(lamport: u64, author: u32) -> Self {
        Version {
            lamport,
            author: AgentId(author),
        }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.lamport, self.author)
    }
}

pub fn compare_versions(a: Version, b: Version) -> Ordering {
    a.cmp(&b)
}

/// Lamport receive/send rule: one past the larger clock, stamped with the
/// local author.
pub fn next_version(clock: Version, observed: Version) -> Version {
    Version {
        lamport: clock.lamport.max(observed.lamport) + 1,
        author: clock.author,
    }
}

/// `(origin, per-origin sequence number)`.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct RumorId {
    pub origin: AgentId,
    pub seq: u64,
}

impl RumorId {
    pub const fn new(origin: u32, seq: u64) -> Self {
        RumorId {
            origin: AgentId(origin),
            seq,
        }
    }
}

impl fmt::Display for RumorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.origin, self.seq)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    Critical,
    Normal,
    Routine,
}

impl Default for Priority {
    fn default() -> Self {
        Priority::Normal
    }
}

/// Opaque payload bytes, hex encoded in JSON.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Payload(pub Vec<u8>);

impl Payload {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<&str> for Payload {
    fn from(s: &str) -> Self {
        Payload(s.as_bytes().to_vec())
    }
}

impl From<Vec<u8>> for Payload {
    fn from(v: Vec<u8>) -> Self {
        Payload(v)
    }
}

impl Serialize for Payload {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Payload {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map(Payload).map_err(serde::de::Error::custom)
    }
}

/// The gossip envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rumor {
    pub rumor_id: RumorId,
    pub topic: String,
    pub payload: Payload,
    pub version: Version,
    pub priority: Priority,
    pub ttl_hops: u32,
    pub created_round: Round,
    /// Stand-in for a signature check; tampered copies carry `false`.
    pub authentic: bool,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MalformedRumor {
    #[error("rumor {0} has an empty topic")]
    EmptyTopic(RumorId),
    #[error("rumor {0} has confidence {1} outside [0, 1]")]
    Confidence(RumorId, f64),
}

impl Rumor {
    pub fn new(
        rumor_id: RumorId,
        topic: impl Into<String>,
        payload: impl Into<Payload>,
        version: Version,
        priority: Priority,
        ttl_hops: u32,
        created_round: Round,
    ) -> Self {
        Rumor {
            rumor_id,
            topic: topic.into(),
            payload: payload.into(),
            version,
            priority,
            ttl_hops,
            created_round,
            authentic: true,
            confidence: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), MalformedRumor> {
        if self.topic.is_empty() {
            return Err(MalformedRumor::EmptyTopic(self.rumor_id));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(MalformedRumor::Confidence(self.rumor_id, self.confidence));
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        canonical_json(self)
    }
}

/// Per-key version summary exchanged during anti-entropy.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Digest {
    pub entries: BTreeMap<String, Version>,
}

impl Digest {
    pub fn to_canonical_json(&self) -> String {
        canonical_json(self)
    }
}

impl FromIterator<(String, Version)> for Digest {
    fn from_iter<I: IntoIterator<Item = (String, Version)>>(iter: I) -> Self {
        Digest {
            entries: iter.into_iter().collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DigestDiff {
    pub need_from_remote: BTreeSet<String>,
    pub send_to_remote: BTreeSet<String>,
}

impl DigestDiff {
    pub fn is_empty(&self) -> bool {
        self.need_from_remote.is_empty() && self.send_to_remote.is_empty()
    }
}

pub fn digest_diff(local: &Digest, remote: &Digest) -> DigestDiff {
    let mut diff = DigestDiff::default();
    for (key, rv) in &remote.entries {
        match local.entries.get(key) {
            Some(lv) if lv >= rv => {}
            _ => {
                diff.need_from_remote.insert(key.clone());
            }
        }
    }
    for (key, lv) in &local.entries {
        match remote.entries.get(key) {
            Some(rv) if rv >= lv => {}
            _ => {
                diff.send_to_remote.insert(key.clone());
            }
        }
    }
    diff
}

/// JSON with object keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json::Map is a BTreeMap without the preserve_order feature.
    let v = serde_json::to_value(value).expect("value types always serialize");
    serde_json::to_string(&v).expect("json values always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(l: u64, a: u32) -> Version {
        Version::new(l, a)
    }

    #[test]
    fn version_order_examples() {
        assert_eq!(compare_versions(v(5, 1), v(7, 0)), Ordering::Less);
        assert_eq!(compare_versions(v(5, 1), v(5, 1)), Ordering::Equal);
        assert_eq!(compare_versions(v(5, 2), v(5, 1)), Ordering::Greater);
    }

    #[test]
    fn next_version_examples() {
        assert_eq!(next_version(v(3, 2), v(7, 5)), v(8, 2));
        assert_eq!(next_version(v(3, 2), v(1, 0)), v(4, 2));
        assert_eq!(next_version(v(0, 0), v(0, 0)), v(1, 0));
    }

    fn digest(entries: &[(&str, Version)]) -> Digest {
        entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn keys(ks: &[&str]) -> BTreeSet<String> {
        ks.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn digest_diff_examples() {
        let d = digest_diff(&digest(&[("k", v(3, 0))]), &digest(&[("k", v(5, 1))]));
        assert_eq!(d.need_from_remote, keys(&["k"]));
        assert!(d.send_to_remote.is_empty());

        let same = digest(&[("a", v(1, 1)), ("b", v(2, 0))]);
        assert!(digest_diff(&same, &same).is_empty());

        let d = digest_diff(&digest(&[("a", v(2, 0))]), &digest(&[("b", v(1, 1))]));
        assert_eq!(d.need_from_remote, keys(&["b"]));
        assert_eq!(d.send_to_remote, keys(&["a"]));
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let r = Rumor::new(RumorId::new(1, 0), "x", "X", v(1, 1), Priority::Normal, 2, 0);
        let json = r.to_canonical_json();
        let authentic = json.find("\"authentic\"").unwrap();
        let version = json.find("\"version\"").unwrap();
        assert!(authentic < version);
        assert!(json.contains("\"payload\":\"58\""));
        let back: Rumor = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn malformed_rumors_are_rejected() {
        let mut r = Rumor::new(RumorId::new(1, 0), "", "X", v(1, 1), Priority::Normal, 2, 0);
        assert!(matches!(r.validate(), Err(MalformedRumor::EmptyTopic(_))));
        r.topic = "t".into();
        r.confidence = 1.5;
        assert!(matches!(r.validate(), Err(MalformedRumor::Confidence(..))));
    }

    fn arb_version() -> impl Strategy<Value = Version> {
        (0u64..6, 0u32..4).prop_map(|(l, a)| v(l, a))
    }

    fn arb_digest() -> impl Strategy<Value = Digest> {
        prop::collection::btree_map("[a-e]", arb_version(), 0..5).prop_map(|entries| Digest { entries })
    }

    proptest! {
        #[test]
        fn version_order_is_total(a in arb_version(), b in arb_version(), c in arb_version()) {
            let ab = compare_versions(a, b);
            prop_assert_eq!(ab, compare_versions(b, a).reverse());
            prop_assert_eq!(ab == Ordering::Equal, a.lamport == b.lamport && a.author == b.author);
            if ab != Ordering::Greater && compare_versions(b, c) != Ordering::Greater {
                prop_assert_ne!(compare_versions(a, c), Ordering::Greater);
            }
        }

        #[test]
        fn next_version_dominates(l1 in 0u64..100, l2 in 0u64..100, a in 0u32..8, b in 0u32..8) {
            let clock = v(l1, a);
            let obs = v(l2, b);
            let n = next_version(clock, obs);
            prop_assert_eq!(compare_versions(n, clock), Ordering::Greater);
            prop_assert_eq!(compare_versions(n, obs), Ordering::Greater);
            prop_assert_eq!(n.author, clock.author);
        }

        #[test]
        fn digest_diff_is_antisymmetric(a in arb_digest(), b in arb_digest()) {
            let ab = digest_diff(&a, &b);
            let ba = digest_diff(&b, &a);
            prop_assert_eq!(ab.need_from_remote, ba.send_to_remote);
            prop_assert_eq!(ab.send_to_remote, ba.need_from_remote);
        }
    }
}
