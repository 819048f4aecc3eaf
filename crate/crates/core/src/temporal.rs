//! Age-of-information bookkeeping, expiry sweeps and decay weights.

use serde::{Deserialize, Serialize};

use crate::model::Round;
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemporalError {
    #[error("round {now} precedes birth round {born}")]
    BeforeBirth { born: Round, now: Round },
}

/// `ttl_rounds == u64::MAX` means the value never expires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgedValue<T> {
    pub value: T,
    pub born_round: Round,
    pub ttl_rounds: u64,
    pub decay_rate: f64,
}

impl<T> AgedValue<T> {
    pub fn new(value: T, born_round: Round, ttl_rounds: u64, decay_rate: f64) -> Self {
        AgedValue {
            value,
            born_round,
            ttl_rounds,
            decay_rate,
        }
    }

    pub fn weight_at(&self, now: Round) -> Result<f64, TemporalError> {
        Ok(decay_weight(age_of(self, now)?, self.ttl_rounds, self.decay_rate))
    }
}

pub fn age_of<T>(v: &AgedValue<T>, now: Round) -> Result<u64, TemporalError> {
    now.checked_sub(v.born_round).ok_or(TemporalError::BeforeBirth {
        born: v.born_round,
        now,
    })
}

/// `exp(-decay_rate * age)` before the TTL, zero from the TTL on.
pub fn decay_weight(age: u64, ttl: u64, decay_rate: f64) -> f64 {
    if age >= ttl {
        0.0
    } else {
        (-decay_rate.max(0.0) * age as f64).exp().clamp(0.0, 1.0)
    }
}

pub fn expire_sweep(store: &mut Store, now: Round) -> Vec<String> {
    store.expire_sweep(now)
}

/// Adoption latencies (`adoption round - creation round`) with nearest-rank
/// percentiles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Staleness {
    #[serde(skip)]
    pub samples: Vec<u64>,
    pub p50: u64,
    pub p95: u64,
    pub max: u64,
}

impl Staleness {
    pub fn from_samples(mut samples: Vec<u64>) -> Self {
        samples.sort_unstable();
        let pct = |p: f64| -> u64 {
            if samples.is_empty() {
                return 0;
            }
            let rank = ((p * samples.len() as f64).ceil() as usize).clamp(1, samples.len());
            samples[rank - 1]
        };
        Staleness {
            p50: pct(0.50),
            p95: pct(0.95),
            max: samples.last().copied().unwrap_or(0),
            samples,
        }
    }
}

pub fn staleness_histogram(trace: &crate::sim::trace::Trace) -> Staleness {
    use crate::sim::trace::TraceEvent;
    let created: std::collections::HashMap<_, _> = trace
        .tracked()
        .filter(|o| !o.adversarial)
        .map(|o| (o.rumor_id, o.round))
        .collect();
    let samples = trace
        .events()
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Hold(h) => created.get(&h.rumor_id).map(|c| h.round - c),
            _ => None,
        })
        .collect();
    Staleness::from_samples(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Version;
    use crate::store::LwwRecord;
    use proptest::prelude::*;

    #[test]
    fn age_examples() {
        let v = AgedValue::new(1.0, 5, 10, 0.0);
        assert_eq!(age_of(&v, 5), Ok(0));
        assert_eq!(age_of(&v, 12), Ok(7));
        assert_eq!(age_of(&v, 4), Err(TemporalError::BeforeBirth { born: 5, now: 4 }));
    }

    #[test]
    fn decay_examples() {
        assert_eq!(decay_weight(0, 10, 0.3), 1.0);
        assert_eq!(decay_weight(10, 10, 0.0), 0.0);
        assert_eq!(decay_weight(11, 10, 0.0), 0.0);
        assert!((decay_weight(10, 100, 0.1) - (-1.0f64).exp()).abs() < 1e-9);
        assert!((decay_weight(10, 100, 0.1) - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn sweep_examples() {
        let mut s = Store::new();
        assert!(expire_sweep(&mut s, 3).is_empty());
        let mut r = LwwRecord::live("k", "v", Version::new(1, 0));
        r.expiry_round = Some(8); // born 0 with ttl 8
        s.apply(r);
        assert!(expire_sweep(&mut s, 7).is_empty());
        assert_eq!(expire_sweep(&mut s, 8), vec!["k".to_string()]);
        assert!(expire_sweep(&mut s, 8).is_empty());
    }

    #[test]
    fn percentiles_nearest_rank() {
        let s = Staleness::from_samples(vec![2, 0, 1, 1]);
        assert_eq!((s.p50, s.p95, s.max), (1, 2, 2));
        assert_eq!(Staleness::from_samples(vec![]).max, 0);
    }

    proptest! {
        #[test]
        fn decay_is_monotone_and_bounded(age in 0u64..200, ttl in 0u64..200, lambda in 0.0f64..2.0) {
            let w = decay_weight(age, ttl, lambda);
            prop_assert!((0.0..=1.0).contains(&w));
            prop_assert!(decay_weight(age + 1, ttl, lambda) <= w);
            if age >= ttl {
                prop_assert_eq!(w, 0.0);
            }
        }

        #[test]
        fn decay_is_continuous_in_lambda(age in 0u64..50, lambda in 0.0f64..2.0) {
            let a = decay_weight(age, 100, lambda);
            let b = decay_weight(age, 100, lambda + 1e-9);
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
