//! Veracity gating: distinct-source confirmations, per-peer trust scores
//! and the authenticity hook.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{AgentId, Payload, Priority, Round, Rumor};

/// What a confirmation is counted against: the claim's topic and content.
///
/// Independent origins of the same fact produce different rumor ids but
/// the same claim key, so they corroborate each other.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClaimKey {
    pub topic: String,
    pub payload: Payload,
}

impl ClaimKey {
    pub fn of(rumor: &Rumor) -> Self {
        ClaimKey {
            topic: rumor.topic.clone(),
            payload: rumor.payload.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Confirmations {
    pub sources: BTreeSet<AgentId>,
    pub first_seen_round: Round,
}

#[derive(Clone, Debug)]
pub struct ConfirmationTracker<K: Ord> {
    self_id: AgentId,
    entries: BTreeMap<K, Confirmations>,
}

impl<K: Ord + Clone> ConfirmationTracker<K> {
    pub fn new(self_id: AgentId) -> Self {
        ConfirmationTracker {
            self_id,
            entries: BTreeMap::new(),
        }
    }

    /// Count `source` as having vouched for `key`. Returns the number of
    /// distinct sources afterwards. Our own id never counts.
    pub fn record_confirmation(&mut self, key: &K, source: AgentId, round: Round) -> usize {
        if source == self.self_id {
            return self.count(key);
        }
        let e = self.entries.entry(key.clone()).or_insert_with(|| Confirmations {
            sources: BTreeSet::new(),
            first_seen_round: round,
        });
        e.sources.insert(source);
        e.sources.len()
    }

    pub fn count(&self, key: &K) -> usize {
        self.entries.get(key).map_or(0, |e| e.sources.len())
    }

    pub fn get(&self, key: &K) -> Option<&Confirmations> {
        self.entries.get(key)
    }

    pub fn sources(&self, key: &K) -> impl Iterator<Item = AgentId> + '_ {
        self.entries
            .get(key)
            .into_iter()
            .flat_map(|e| e.sources.iter().copied())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Corroborated,
    Contradicted,
}

/// Local trust scores in `[0, 1]`, updated by an exponentially weighted
/// moving average of outcomes.
#[derive(Clone, Debug)]
pub struct TrustLedger {
    scores: BTreeMap<AgentId, f64>,
    default_score: f64,
    learning_rate: f64,
}

impl TrustLedger {
    pub fn new(default_score: f64, learning_rate: f64) -> Self {
        TrustLedger {
            scores: BTreeMap::new(),
            default_score: default_score.clamp(0.0, 1.0),
            learning_rate: learning_rate.clamp(0.0, 1.0),
        }
    }

    pub fn score(&self, peer: AgentId) -> f64 {
        self.scores.get(&peer).copied().unwrap_or(self.default_score)
    }

    pub fn update_trust(&mut self, peer: AgentId, outcome: Outcome) -> f64 {
        let target = match outcome {
            Outcome::Corroborated => 1.0,
            Outcome::Contradicted => 0.0,
        };
        let a = self.learning_rate;
        let s = ((1.0 - a) * self.score(peer) + a * target).clamp(0.0, 1.0);
        self.scores.insert(peer, s);
        s
    }

    pub fn scores(&self) -> &BTreeMap<AgentId, f64> {
        &self.scores
    }
}

impl Default for TrustLedger {
    fn default() -> Self {
        TrustLedger::new(0.5, 0.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub credible: bool,
    pub source_count: usize,
    pub weighted_sum: f64,
}

/// Score at or above which a single source may vouch for a critical rumor.
pub const CRITICAL_BYPASS_SCORE: f64 = 0.9;

/// Credible once `k` distinct sources agree or their summed trust reaches
/// `theta`. A critical rumor vouched for by any source scoring at least
/// [`CRITICAL_BYPASS_SCORE`] passes on that source alone.
pub fn is_credible<K: Ord + Clone>(
    tracker: &ConfirmationTracker<K>,
    ledger: &TrustLedger,
    key: &K,
    k: usize,
    theta: f64,
    priority: Priority,
) -> GateDecision {
    let source_count = tracker.count(key);
    let weighted_sum: f64 = tracker.sources(key).map(|s| ledger.score(s)).sum();
    let bypass = priority == Priority::Critical
        && tracker
            .sources(key)
            .any(|s| ledger.score(s) >= CRITICAL_BYPASS_SCORE);
    GateDecision {
        credible: source_count >= k.max(1) || weighted_sum >= theta || bypass,
        source_count,
        weighted_sum,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject,
}

pub fn authenticity_gate(msg: &Rumor) -> Verdict {
    if msg.authentic {
        Verdict::Accept
    } else {
        Verdict::Reject
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RumorId, Version};
    use proptest::prelude::*;

    const X: &str = "X";

    #[test]
    fn confirmations_are_distinct_and_exclude_self() {
        let mut t = ConfirmationTracker::new(AgentId(1));
        let key = X.to_string();
        assert_eq!(t.record_confirmation(&key, AgentId(2), 0), 1);
        assert_eq!(t.record_confirmation(&key, AgentId(2), 1), 1);
        assert_eq!(t.record_confirmation(&key, AgentId(3), 1), 2);
        assert_eq!(t.record_confirmation(&key, AgentId(1), 1), 2);
        assert_eq!(t.get(&key).unwrap().first_seen_round, 0);
    }

    #[test]
    fn credibility_examples() {
        let ledger = TrustLedger::new(0.5, 0.1);
        let key = X.to_string();
        let mut t = ConfirmationTracker::new(AgentId(1));
        t.record_confirmation(&key, AgentId(2), 0);
        assert!(!is_credible(&t, &ledger, &key, 2, 1.5, Priority::Normal).credible);
        t.record_confirmation(&key, AgentId(3), 0);
        assert!(is_credible(&t, &ledger, &key, 2, 1.5, Priority::Normal).credible);

        let mut scored = TrustLedger::new(0.5, 0.1);
        scored.scores.insert(AgentId(2), 0.9);
        scored.scores.insert(AgentId(3), 0.8);
        let d = is_credible(&t, &scored, &key, 3, 1.5, Priority::Normal);
        assert!(d.credible);
        assert!((d.weighted_sum - 1.7).abs() < 1e-12);
    }

    #[test]
    fn trusted_source_bypasses_for_critical() {
        let mut ledger = TrustLedger::new(0.5, 0.1);
        ledger.scores.insert(AgentId(2), 0.95);
        let key = X.to_string();
        let mut t = ConfirmationTracker::new(AgentId(1));
        t.record_confirmation(&key, AgentId(2), 0);
        assert!(is_credible(&t, &ledger, &key, 2, 5.0, Priority::Critical).credible);
        assert!(!is_credible(&t, &ledger, &key, 2, 5.0, Priority::Normal).credible);
    }

    #[test]
    fn trust_update_examples() {
        let mut l = TrustLedger::new(0.5, 0.1);
        assert!((l.update_trust(AgentId(1), Outcome::Corroborated) - 0.55).abs() < 1e-12);
        assert!((l.update_trust(AgentId(2), Outcome::Contradicted) - 0.45).abs() < 1e-12);
        let mut s = 0.0;
        for _ in 0..50 {
            s = l.update_trust(AgentId(3), Outcome::Contradicted);
        }
        let closed_form = 0.9f64.powi(50) * 0.5;
        assert!((s - closed_form).abs() < 1e-12);
        assert!(s < 0.01);
    }

    #[test]
    fn authenticity_examples() {
        let mut r = Rumor::new(RumorId::new(0, 0), "t", "p", Version::new(1, 0), Priority::Normal, 3, 0);
        assert_eq!(authenticity_gate(&r), Verdict::Accept);
        r.authentic = false;
        assert_eq!(authenticity_gate(&r), Verdict::Reject);
    }

    proptest! {
        #[test]
        fn scores_stay_in_unit_interval(
            start in 0.0f64..=1.0,
            alpha in 0.0f64..=1.0,
            outcomes in prop::collection::vec(any::<bool>(), 0..200),
        ) {
            let mut l = TrustLedger::new(start, alpha);
            for o in outcomes {
                let s = l.update_trust(AgentId(1), if o { Outcome::Corroborated } else { Outcome::Contradicted });
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }
    }
}
