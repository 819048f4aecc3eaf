//! Generators and law checks shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use gossipmesh::coordination::{resolve_claims, TaskAd, TaskState};
use gossipmesh::membership::{merge_member, MemberRecord, MemberStatus};
use gossipmesh::model::{AgentId, Payload, Priority, Version};
use gossipmesh::store::{gcounter_merge, lww_merge, orset_merge, GCounter, LwwRecord, ORSet, Tag};

// Small domains so that ties and collisions are common.

pub fn version() -> impl Strategy<Value = Version> + Clone {
    (0u64..4, 0u32..3).prop_map(|(l, a)| Version::new(l, a))
}

pub fn lww() -> impl Strategy<Value = LwwRecord> + Clone {
    (version(), prop::sample::select(vec!["", "a", "b"]), any::<bool>(), prop::option::of(0u64..3)).prop_map(
        |(version, v, tombstone, expiry_round)| LwwRecord {
            key: "k".into(),
            value: Payload::from(v),
            version,
            tombstone,
            expiry_round,
        },
    )
}

pub fn gcounter() -> impl Strategy<Value = GCounter> + Clone {
    prop::collection::btree_map((0u32..4).prop_map(AgentId), 0u64..5, 0..4).prop_map(|counts| GCounter { counts })
}

fn tag() -> impl Strategy<Value = Tag> + Clone {
    ((0u32..3).prop_map(AgentId), 0u64..3).prop_map(|(agent, seq)| Tag { agent, seq })
}

pub fn orset() -> impl Strategy<Value = ORSet> + Clone {
    (
        prop::collection::btree_map(
            prop::sample::select(vec!["x".to_string(), "y".to_string()]),
            prop::collection::btree_set(tag(), 0..3),
            0..3,
        ),
        prop::collection::btree_set(tag(), 0..3),
    )
        .prop_map(|(adds, removes)| ORSet { adds, removes })
}

pub fn member() -> impl Strategy<Value = MemberRecord> + Clone {
    (
        prop::sample::select(vec![MemberStatus::Alive, MemberStatus::Suspect, MemberStatus::Dead]),
        0u64..3,
        0u64..3,
    )
        .prop_map(|(status, incarnation, last_update_round)| MemberRecord {
            id: AgentId(7),
            status,
            incarnation,
            last_update_round,
        })
}

pub fn task_ad() -> impl Strategy<Value = TaskAd> + Clone {
    (
        0u32..3,
        prop::sample::select(vec![TaskState::Available, TaskState::Claimed, TaskState::Done]),
        prop::option::of((0u32..3).prop_map(AgentId)),
        version(),
        prop::sample::select(vec![Priority::Critical, Priority::Normal]),
    )
        .prop_map(|(epoch, state, claimant, claim_version, priority)| TaskAd {
            task_id: "t".into(),
            descriptor: BTreeSet::new(),
            priority,
            origin: AgentId(0),
            announced: Version::new(1, 0),
            epoch,
            state,
            claimant,
            claim_version,
        })
}

/// Commutativity, associativity and idempotence of `merge` over `cases`
/// random triples.
pub fn semilattice<T, S, F>(name: &str, strategy: S, merge: F, cases: u32) -> Result<(), String>
where
    T: Clone + PartialEq + std::fmt::Debug,
    S: Strategy<Value = T> + Clone,
    F: Fn(&T, &T) -> T,
{
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(strategy.clone(), strategy.clone(), strategy), |(a, b, c)| {
            let ab = merge(&a, &b);
            prop_assert_eq!(&ab, &merge(&b, &a), "commutativity");
            prop_assert_eq!(merge(&ab, &c), merge(&a, &merge(&b, &c)), "associativity");
            prop_assert_eq!(&merge(&a, &a), &a, "idempotence");
            Ok::<(), TestCaseError>(())
        })
        .map_err(|e| format!("{name}: {e}"))
}

pub fn all_merge_laws(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("lww_merge", semilattice("lww_merge", lww(), |a, b| lww_merge(a, b).unwrap(), cases)),
        ("gcounter_merge", semilattice("gcounter_merge", gcounter(), gcounter_merge, cases)),
        ("orset_merge", semilattice("orset_merge", orset(), orset_merge, cases)),
        ("merge_member", semilattice("merge_member", member(), |a, b| merge_member(a, b).unwrap(), cases)),
        ("resolve_claims", semilattice("resolve_claims", task_ad(), |a, b| resolve_claims(a, b).unwrap(), cases)),
    ]
}

/// One step of a replicated-set history.
#[derive(Clone, Copy, Debug)]
pub enum SetOp {
    Add(usize, u8),
    Remove(usize, u8),
    /// Ship the state of the first replica into the second.
    Sync(usize, usize),
}

/// Reference semantics from causal histories: an element is present when
/// some add of it is visible and no visible remove had observed that add.
#[derive(Clone, Default)]
struct OracleReplica {
    adds: BTreeSet<usize>,
    removes: BTreeSet<usize>,
}

struct Oracle {
    add_elem: Vec<u8>,
    observed: Vec<BTreeSet<usize>>,
    replicas: Vec<OracleReplica>,
}

impl Oracle {
    fn new(n: usize) -> Self {
        Oracle {
            add_elem: Vec::new(),
            observed: Vec::new(),
            replicas: vec![OracleReplica::default(); n],
        }
    }

    fn apply(&mut self, op: SetOp) {
        match op {
            SetOp::Add(r, e) => {
                self.add_elem.push(e);
                self.replicas[r].adds.insert(self.add_elem.len() - 1);
            }
            SetOp::Remove(r, e) => {
                let seen: BTreeSet<usize> =
                    self.replicas[r].adds.iter().copied().filter(|&a| self.add_elem[a] == e).collect();
                self.observed.push(seen);
                self.replicas[r].removes.insert(self.observed.len() - 1);
            }
            SetOp::Sync(from, to) => {
                let src = self.replicas[from].clone();
                self.replicas[to].adds.extend(src.adds);
                self.replicas[to].removes.extend(src.removes);
            }
        }
    }

    fn elements(&self, r: usize) -> BTreeSet<u8> {
        let rep = &self.replicas[r];
        rep.adds
            .iter()
            .filter(|a| !rep.removes.iter().any(|x| self.observed[*x].contains(a)))
            .map(|&a| self.add_elem[a])
            .collect()
    }
}

fn elem_name(e: u8) -> String {
    format!("e{e}")
}

/// Run `ops` against both the real OR-set and the oracle; compare every
/// replica after every step.
pub fn orset_matches_oracle(ops: &[SetOp], replicas: usize) -> Result<(), String> {
    let mut real = vec![ORSet::new(); replicas];
    let mut seqs = vec![0u64; replicas];
    let mut oracle = Oracle::new(replicas);
    for (step, &op) in ops.iter().enumerate() {
        match op {
            SetOp::Add(r, e) => {
                seqs[r] += 1;
                real[r].add(elem_name(e), Tag { agent: AgentId(r as u32), seq: seqs[r] });
            }
            SetOp::Remove(r, e) => real[r].remove(&elem_name(e)),
            SetOp::Sync(from, to) => {
                let merged = orset_merge(&real[to], &real[from]);
                real[to] = merged;
            }
        }
        oracle.apply(op);
        for r in 0..replicas {
            let got: BTreeSet<u8> =
                real[r].elements().iter().map(|s| s[1..].parse::<u8>().unwrap()).collect();
            let want = oracle.elements(r);
            if got != want {
                return Err(format!("after step {step} of {ops:?}: replica {r} has {got:?}, oracle {want:?}"));
            }
        }
    }
    // Full exchange converges every replica to the same set.
    let all = real.iter().fold(ORSet::new(), |acc, s| orset_merge(&acc, s));
    let mut full = Oracle::new(1);
    full.add_elem = oracle.add_elem.clone();
    full.observed = oracle.observed.clone();
    for rep in &oracle.replicas {
        full.replicas[0].adds.extend(rep.adds.iter().copied());
        full.replicas[0].removes.extend(rep.removes.iter().copied());
    }
    let got: BTreeSet<u8> = all.elements().iter().map(|s| s[1..].parse::<u8>().unwrap()).collect();
    if got != full.elements(0) {
        return Err(format!("{ops:?}: merged state {got:?} differs from oracle {:?}", full.elements(0)));
    }
    Ok(())
}

/// Every operation sequence of length `0..=max_len` over the given
/// alphabet, checked against the oracle. Returns the number of histories.
pub fn exhaustive_orset(replicas: usize, elems: u8, max_len: usize) -> Result<u64, String> {
    let mut alphabet = Vec::new();
    for r in 0..replicas {
        for e in 0..elems {
            alphabet.push(SetOp::Add(r, e));
            alphabet.push(SetOp::Remove(r, e));
        }
        for to in 0..replicas {
            if to != r {
                alphabet.push(SetOp::Sync(r, to));
            }
        }
    }
    let mut count = 0u64;
    let mut ops = Vec::with_capacity(max_len);
    fn rec(alphabet: &[SetOp], ops: &mut Vec<SetOp>, max_len: usize, replicas: usize, count: &mut u64) -> Result<(), String> {
        if ops.len() == max_len {
            *count += 1;
            return orset_matches_oracle(ops, replicas);
        }
        for &op in alphabet {
            ops.push(op);
            rec(alphabet, ops, max_len, replicas, count)?;
            ops.pop();
        }
        Ok(())
    }
    // Prefixes of longer histories are checked step by step, so only full
    // length sequences need enumerating.
    rec(&alphabet, &mut ops, max_len, replicas, &mut count)?;
    Ok(count)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn count_by<K: Ord, I: IntoIterator<Item = K>>(it: I) -> BTreeMap<K, usize> {
    let mut m = BTreeMap::new();
    for k in it {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}
