mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use gossipmesh::membership::MemberStatus;
use gossipmesh::model::{AgentId, Priority, RumorId};
use gossipmesh::sim::config::{
    ChurnAction, ChurnEvent, ConfigError, Latency, RandomStore, RumorSpec, StoreOp, StoreOpSpec, Workload,
};
use gossipmesh::sim::engine::{direct_broadcast_baseline, run, run_with, TraceMode};
use gossipmesh::sim::metrics::{compute_metrics, MetricsError};
use gossipmesh::sim::trace::{MsgKind, Trace, TraceEvent, FATE_DEAD, FATE_LOST, FATE_PARTITIONED};
use gossipmesh::sim::{Mode, ScenarioConfig};

fn rumor(round: u64, origin: u32, topic: &str) -> RumorSpec {
    RumorSpec {
        round,
        origins: vec![origin],
        topic: topic.into(),
        payload: "p".into(),
        priority: Priority::Critical,
        ttl: None,
    }
}

prop_compose! {
    fn small_config()(
        n in 1usize..24,
        fanout in 0usize..4,
        rounds in 1u64..24,
        loss in prop::sample::select(vec![0.0, 0.1, 0.3]),
        latency in prop::sample::select(vec![Latency::Constant(1), Latency::Constant(2), Latency::Uniform(1, 3)]),
        seed in any::<u64>(),
        membership in any::<bool>(),
        ae in prop::sample::select(vec![0u64, 2, 5]),
        priority in prop::sample::select(vec![Priority::Critical, Priority::Normal, Priority::Routine]),
        churn in prop::collection::vec((0u64..20, 0u8..4, 0u32..24), 0..4),
        rumors in prop::collection::vec((0u64..10, 0u32..24), 1..4),
        stores in any::<bool>(),
    ) -> ScenarioConfig {
        let n32 = n as u32;
        let mut cfg = ScenarioConfig::single_rumor(n, rounds, seed);
        cfg.fanout = fanout;
        cfg.loss_p = loss;
        cfg.latency = latency;
        cfg.membership = membership;
        cfg.anti_entropy_period = ae;
        cfg.workload = Workload {
            rumors: rumors
                .iter()
                .enumerate()
                .map(|(i, &(r, o))| RumorSpec { priority, ..rumor(r % rounds, o % n32, &format!("r{i}")) })
                .collect(),
            random_store: stores.then_some(RandomStore { until_round: rounds.min(5), ops_per_round: 2, keys: 3, counters: 1 }),
            ..Workload::default()
        };
        cfg.churn = churn
            .iter()
            .map(|&(round, kind, t)| ChurnEvent {
                round: round % rounds,
                action: match kind {
                    0 => ChurnAction::Kill { targets: vec![t % n32] },
                    1 => ChurnAction::Revive { targets: vec![t % n32] },
                    2 => ChurnAction::Partition { targets: vec![t % n32] },
                    _ => ChurnAction::Heal,
                },
            })
            .collect();
        cfg
    }
}

/// Replays churn records to know who was live and which side of a cut
/// each agent was on when a delivery happened.
struct Reach {
    live: Vec<bool>,
    cut: Option<BTreeSet<AgentId>>,
}

impl Reach {
    fn new(n: usize) -> Self {
        Reach { live: vec![true; n], cut: None }
    }

    fn apply(&mut self, action: &str, targets: &[AgentId]) {
        match action {
            "kill" | "kill_claimant" => targets.iter().for_each(|t| self.live[t.index()] = false),
            "revive" => targets.iter().for_each(|t| self.live[t.index()] = true),
            "partition" => self.cut = Some(targets.iter().copied().collect()),
            "heal" => self.cut = None,
            other => panic!("unknown churn action {other}"),
        }
    }

    fn connected(&self, a: AgentId, b: AgentId) -> bool {
        self.cut.as_ref().is_none_or(|c| c.contains(&a) == c.contains(&b))
    }
}

fn check_trace(cfg: &ScenarioConfig, trace: &Trace) -> Result<(), TestCaseError> {
    let header = trace.header().unwrap();
    let ttl_max = header.ttl_hops;
    let mut reach = Reach::new(cfg.n_agents);
    let mut origin_ttl: BTreeMap<RumorId, (AgentId, u32, u64)> = BTreeMap::new();
    let mut received_ttl: BTreeMap<(AgentId, RumorId), u32> = BTreeMap::new();
    let mut sent_by_round: BTreeMap<u64, u64> = BTreeMap::new();
    let mut other_by_round: BTreeMap<u64, u64> = BTreeMap::new();
    let mut declared: BTreeMap<u64, u64> = BTreeMap::new();
    let (lo, hi) = match cfg.latency {
        Latency::Constant(d) => (d, d),
        Latency::Uniform(a, b) => (a, b),
    };
    for ev in trace.events() {
        match ev {
            TraceEvent::Churn(c) => reach.apply(&c.action, &c.targets),
            TraceEvent::Origin(o) => {
                origin_ttl.insert(o.rumor_id, (o.node, o.ttl, o.round));
            }
            TraceEvent::Msg(m) => {
                *sent_by_round.entry(m.sent).or_default() += 1;
                prop_assert!(m.ttl < ttl_max.max(1), "ttl {} beyond budget {}", m.ttl, ttl_max);
                if m.effect == FATE_LOST {
                    prop_assert_eq!(m.round, m.sent);
                    continue;
                }
                // Causality: only after latency, and nothing to the dead or
                // across a cut.
                prop_assert!(m.round >= m.sent + lo && m.round <= m.sent + hi, "{:?}", m);
                let up = reach.live[m.to.index()];
                let connected = reach.connected(m.from, m.to);
                match m.effect.as_str() {
                    FATE_DEAD => prop_assert!(!up),
                    FATE_PARTITIONED => prop_assert!(up && !connected),
                    _ => {
                        prop_assert!(up && connected, "delivered to unreachable {:?}", m);
                        let e = received_ttl.entry((m.to, m.rumor_id)).or_insert(0);
                        *e = (*e).max(m.ttl);
                    }
                }
                if m.kind == MsgKind::Gossip {
                    // Hop budget: strictly below what the sender had.
                    let (origin, ttl0, _) = origin_ttl[&m.rumor_id];
                    let had = if m.from == origin {
                        ttl0
                    } else {
                        *received_ttl.get(&(m.from, m.rumor_id)).ok_or_else(|| {
                            TestCaseError::fail(format!("{:?} forwarded a rumor it never received", m.from))
                        })?
                    };
                    prop_assert!(m.ttl < had, "forwarded with ttl {} after receiving {}", m.ttl, had);
                }
            }
            TraceEvent::Hold(h) => {
                // A newer write to the same key can make a holder in the
                // creation round itself, never earlier.
                let &(_, _, created) = origin_ttl.get(&h.rumor_id).unwrap();
                prop_assert!(h.round >= created, "{:?} held before creation", h);
            }
            TraceEvent::Probe(p) => *other_by_round.entry(p.round).or_default() += u64::from(p.messages),
            TraceEvent::Ae(a) => *other_by_round.entry(a.round).or_default() += 1 + u64::from(a.ok),
            TraceEvent::Avg(a) => *other_by_round.entry(a.round).or_default() += 1 + u64::from(!a.lost),
            TraceEvent::RoundEnd(r) => {
                declared.insert(r.round, r.sent);
            }
            _ => {}
        }
    }
    // Conservation: every send shows up exactly once as a delivery or a
    // drop, except messages still in flight when the run ended.
    for (&r, &sent) in &declared {
        if r + hi < cfg.rounds {
            let seen = sent_by_round.get(&r).copied().unwrap_or(0) + other_by_round.get(&r).copied().unwrap_or(0);
            prop_assert_eq!(seen, sent, "round {}", r);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

    #[test]
    fn runs_are_deterministic_and_recomputable(cfg in small_config()) {
        let a = run(&cfg).unwrap();
        let b = run_with(&cfg, TraceMode::HashOnly).unwrap();
        prop_assert_eq!(&a.metrics.trace_hash, &b.metrics.trace_hash);
        prop_assert_eq!(&a.metrics, &b.metrics);
        let trace = a.trace.unwrap();
        prop_assert_eq!(trace.hash(), a.metrics.trace_hash.clone());
        prop_assert_eq!(compute_metrics(&trace).unwrap(), a.metrics);
    }

    #[test]
    fn traces_respect_causality_conservation_and_ttl(cfg in small_config()) {
        let out = run(&cfg).unwrap();
        check_trace(&cfg, out.trace.as_ref().unwrap())?;
    }

    #[test]
    fn coverage_never_shrinks_without_churn(mut cfg in small_config()) {
        cfg.churn.clear();
        let out = run_with(&cfg, TraceMode::HashOnly).unwrap();
        for r in &out.metrics.rumors {
            prop_assert!(r.coverage.windows(2).all(|w| w[0] <= w[1]), "{:?}", r.coverage);
            prop_assert!(r.coverage.iter().all(|c| (0.0..=1.0).contains(c)));
        }
        // Trace-derived coverage agrees with agent state.
        for r in out.metrics.rumors.iter().filter(|r| !r.adversarial) {
            prop_assert_eq!(&out.live.coverage[&r.rumor_id], &r.coverage);
        }
    }
}

#[test]
fn singleton_is_covered_immediately_and_silent() {
    let out = run(&ScenarioConfig::single_rumor(1, 5, 3)).unwrap();
    assert_eq!(out.metrics.rounds_to_full, Some(0));
    assert_eq!(out.metrics.coverage, 1.0);
    assert_eq!(out.metrics.messages_total, 0);
}

#[test]
fn empty_workload_counts_nothing() {
    let mut cfg = ScenarioConfig::single_rumor(10, 10, 1);
    cfg.workload = Workload::default();
    let m = run(&cfg).unwrap().metrics;
    assert_eq!((m.messages_total, m.deliveries, m.duplicates, m.lost), (0, 0, 0, 0));
    assert_eq!(m.redundancy_ratio, 0.0);
    assert!(m.rumors.is_empty());
}

#[test]
fn square4_schedule() {
    let b = gossipmesh::harness::ScenarioBundle::bundled("square4").unwrap();
    let out = run(&b.config).unwrap();
    let sends: Vec<(u64, u64, u32, u32)> = out
        .trace
        .unwrap()
        .events()
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Msg(m) => Some((m.sent, m.round, m.from.0, m.to.0)),
            _ => None,
        })
        .collect();
    // Two pushes from agent 0, then one from each of its peers.
    assert_eq!(sends.len(), 4);
    assert_eq!(sends.iter().filter(|s| s.0 == 0 && s.2 == 0).count(), 2);
    assert_eq!(sends.iter().filter(|s| s.0 == 1).count(), 2);
    assert_eq!(out.metrics.duplicates, 1);
}

#[test]
fn broadcast_loads_only_the_origin() {
    let mut cfg = ScenarioConfig::single_rumor(100, 4, 9);
    cfg.mode = Mode::Broadcast;
    let m = run(&cfg).unwrap().metrics;
    assert_eq!(m.max_node_load, 99);
    assert_eq!(m.max_load_node, Some(AgentId(0)));
    assert_eq!(m.messages_total, 99);
    assert_eq!(m.rounds_to_full, Some(1));
}

#[test]
fn gossip_spreads_the_load() {
    for seed in 0..20 {
        let cfg = ScenarioConfig::single_rumor(1000, 30, seed);
        let g = run_with(&cfg, TraceMode::HashOnly).unwrap().metrics;
        let b = direct_broadcast_baseline(&cfg).unwrap();
        assert_eq!(b.max_node_load, 999);
        // A node pushes a rumor for at most ttl_hops rounds.
        let bound = (cfg.fanout as u64) * u64::from(cfg.params().ttl_hops);
        assert!(g.max_node_load <= bound, "seed {seed}: {} > {bound}", g.max_node_load);
        assert!(g.max_node_load * 10 < b.max_node_load);
    }
}

#[test]
fn broadcast_under_loss_matches_binomial() {
    let covs: Vec<f64> = (0..100)
        .map(|s| {
            let mut cfg = ScenarioConfig::single_rumor(1000, 3, s);
            cfg.loss_p = 0.2;
            cfg.mode = Mode::Broadcast;
            run_with(&cfg, TraceMode::HashOnly).unwrap().metrics.coverage
        })
        .collect();
    let mean = covs.iter().sum::<f64>() / covs.len() as f64;
    assert!((mean - 0.8).abs() <= 0.05, "{mean}");
    // Standard error of the mean for 100 seeds of Binomial(999, 0.8).
    let se = (999.0 * 0.16f64).sqrt() / 1000.0 / 10.0;
    assert!((mean - (1.0 + 999.0 * 0.8) / 1000.0).abs() < 4.0 * se);
}

#[test]
fn partition_blocks_until_heal() {
    let n = 40;
    let right: Vec<u32> = (20..40).collect();
    let mut cfg = ScenarioConfig::single_rumor(n, 60, 4);
    cfg.anti_entropy_period = 3;
    cfg.churn = vec![
        ChurnEvent { round: 0, action: ChurnAction::Partition { targets: right.clone() } },
        ChurnEvent { round: 30, action: ChurnAction::Heal },
    ];
    let out = run(&cfg).unwrap();
    let trace = out.trace.unwrap();
    let holds: Vec<(u64, u32)> = trace
        .events()
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Hold(h) => Some((h.round, h.node.0)),
            _ => None,
        })
        .collect();
    assert!(holds.iter().all(|&(r, node)| node < 20 || r >= 30), "right side reached before heal");
    assert_eq!(holds.iter().filter(|h| h.1 < 20).count(), 20);
    assert_eq!(holds.len(), 40, "right side never caught up after heal");
    assert_eq!(out.metrics.coverage, 1.0);
}

#[test]
fn revived_agent_reintegrates() {
    let mut cfg = ScenarioConfig::single_rumor(24, 80, 2);
    cfg.membership = true;
    cfg.anti_entropy_period = 4;
    cfg.protocol.value_ttl = None;
    cfg.workload = Workload {
        store_ops: vec![
            StoreOpSpec { round: 0, agent: 1, op: StoreOp::Write { key: "a".into(), value: "1".into() } },
            StoreOpSpec { round: 12, agent: 2, op: StoreOp::Write { key: "b".into(), value: "2".into() } },
            StoreOpSpec { round: 14, agent: 3, op: StoreOp::Increment { counter: "c".into(), amount: 4 } },
        ],
        ..Workload::default()
    };
    cfg.churn = vec![
        ChurnEvent { round: 5, action: ChurnAction::Kill { targets: vec![7] } },
        ChurnEvent { round: 30, action: ChurnAction::Revive { targets: vec![7] } },
    ];
    let out = run(&cfg).unwrap();
    let world = &out.world;
    for a in world.live_agents() {
        let rec = a.view().unwrap().get(AgentId(7)).copied().unwrap();
        assert_eq!(rec.status, MemberStatus::Alive, "agent {} sees {:?}", a.id().0, rec);
        assert!(rec.incarnation >= 1);
    }
    let stores: BTreeSet<String> = world.live_agents().map(|a| a.store().to_canonical_json()).collect();
    assert_eq!(stores.len(), 1);
    assert_eq!(world.agents[7].store().get("b").map(|p| p.as_bytes().to_vec()), Some(b"2".to_vec()));
    // Everyone had declared it dead before it came back.
    assert!(out.metrics.detection[0].all_dead.is_some());
}

#[test]
fn invalid_configs_fail_before_running() {
    let mut cfg = ScenarioConfig::single_rumor(4, 2, 0);
    cfg.loss_p = 1.5;
    match run(&cfg) {
        Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "loss_p"),
        other => panic!("{:?}", other.err()),
    }
    let mut cfg = ScenarioConfig::single_rumor(4, 2, 0);
    cfg.churn = vec![ChurnEvent { round: 0, action: ChurnAction::Kill { targets: vec![4] } }];
    let err = run(&cfg).err().unwrap();
    assert!(err.to_string().contains("churn[0]"), "{err}");
}

#[test]
fn stored_traces_recompute_and_truncation_is_detected() {
    let b = gossipmesh::harness::ScenarioBundle::bundled("churn_recovery").unwrap();
    let out = run(&b.config).unwrap();
    let trace = out.trace.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    trace.write_jsonl(std::fs::File::create(&path).unwrap()).unwrap();
    let back = Trace::read_jsonl(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(compute_metrics(&back).unwrap(), out.metrics);
    let mut events = back.into_events();
    events.pop();
    assert_eq!(compute_metrics(&Trace::new(events)), Err(MetricsError::Truncated));
}
