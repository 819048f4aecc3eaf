//! Metrics derived from a trace. The engine feeds events through the same
//! builder while it runs, so recomputing from a stored trace must agree.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::coordination::{normalized_variance, variance};
use crate::membership::MemberStatus;
use crate::model::{AgentId, Round, RumorId};
use crate::node::TaskAction;
use crate::sim::config::Mode;
use crate::sim::trace::{Trace, TraceEvent, TraceHasher};
use crate::temporal::Staleness;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("trace is truncated: no end record")]
    Truncated,
    #[error("trace does not start with a run header")]
    MissingHeader,
    #[error("trace event references agent {0} outside the population")]
    UnknownAgent(AgentId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RumorMetrics {
    pub rumor_id: RumorId,
    pub topic: String,
    pub origin: AgentId,
    pub created_round: Round,
    pub adversarial: bool,
    /// Fraction of live agents holding the rumor at the end of each round,
    /// starting with the creation round.
    pub coverage: Vec<f64>,
    pub final_coverage: f64,
    /// Rounds after creation at which every live agent held it.
    pub rounds_to_full: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub peer: AgentId,
    pub killed_round: Round,
    /// Rounds until some live agent first suspected (or declared dead) the
    /// killed agent.
    pub first_suspect: Option<u64>,
    /// Rounds until every live agent considered it dead.
    pub all_dead: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClaimMetrics {
    pub tasks: usize,
    /// Tasks that saw at least one claim.
    pub claimed: usize,
    /// Tasks whose final state is done everywhere.
    pub done: usize,
    /// Tasks on which every live agent agrees at the end of the run.
    pub agreed: usize,
    pub reannounced: usize,
    /// Median rounds from announcement to first claim.
    pub time_to_claim_p50: Option<u64>,
    /// Sum over rounds of tasks that two or more agents were working on.
    pub duplicate_claim_rounds: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ZoneMetrics {
    pub visited: usize,
    pub all_visited_round: Option<Round>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AveragingMetrics {
    pub initial_mean: f64,
    pub exchanges: u64,
    /// Largest |sum - initial sum| seen after any exchange.
    pub max_sum_drift: f64,
    /// Largest |x - initial mean| at the end of the run.
    pub final_max_deviation: f64,
    /// Largest round-over-round increase of the normalized variance.
    pub max_variance_increase: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n_agents: usize,
    pub rounds: Round,
    pub mode: Mode,
    pub messages_total: u64,
    pub messages_by_kind: BTreeMap<String, u64>,
    pub max_node_load: u64,
    pub max_load_node: Option<AgentId>,
    pub deliveries: u64,
    pub duplicates: u64,
    pub lost: u64,
    pub undeliverable: u64,
    pub redundancy_ratio: f64,
    pub rumors: Vec<RumorMetrics>,
    /// Lowest final coverage over honest tracked rumors (1 if none).
    pub coverage: f64,
    /// Slowest honest tracked rumor; `None` if some never reached everyone.
    pub rounds_to_full: Option<u64>,
    pub staleness: Staleness,
    /// Normalized variance of the averaged values at the end of each
    /// averaging round.
    pub consensus_entropy: Vec<f64>,
    pub averaging: Option<AveragingMetrics>,
    pub detection: Vec<DetectionMetrics>,
    pub claims: Option<ClaimMetrics>,
    pub zones: Option<ZoneMetrics>,
    /// Honest agents that came to hold an adversary's fabricated rumor.
    pub false_adoptions: u64,
    pub distinct_stores: usize,
    pub trace_hash: String,
}

impl RunMetrics {
    /// Named scalar view used by scenario expectations and sweeps.
    pub fn scalar(&self, name: &str) -> Option<f64> {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Some(match name {
            "rounds_to_full" => self.rounds_to_full? as f64,
            "coverage" => self.coverage,
            "messages_total" => self.messages_total as f64,
            "max_node_load" => self.max_node_load as f64,
            "redundancy_ratio" => self.redundancy_ratio,
            "deliveries" => self.deliveries as f64,
            "lost" => self.lost as f64,
            "staleness_p50" => self.staleness.p50 as f64,
            "staleness_p95" => self.staleness.p95 as f64,
            "staleness_max" => self.staleness.max as f64,
            "false_adoptions" => self.false_adoptions as f64,
            "distinct_stores" => self.distinct_stores as f64,
            "consensus_entropy" => *self.consensus_entropy.last()?,
            "max_deviation" => self.averaging.as_ref()?.final_max_deviation,
            "sum_drift" => self.averaging.as_ref()?.max_sum_drift,
            "variance_increase" => self.averaging.as_ref()?.max_variance_increase,
            "detection_first_suspect" => mean(
                &self
                    .detection
                    .iter()
                    .map(|d| d.first_suspect.map(|x| x as f64))
                    .collect::<Option<Vec<_>>>()?,
            )?,
            "detection_all_dead" => self
                .detection
                .iter()
                .map(|d| d.all_dead.map(|x| x as f64))
                .collect::<Option<Vec<_>>>()?
                .into_iter()
                .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))?,
            "tasks" => self.claims.as_ref()?.tasks as f64,
            "tasks_claimed" => self.claims.as_ref()?.claimed as f64,
            "tasks_done" => self.claims.as_ref()?.done as f64,
            "tasks_agreed" => self.claims.as_ref()?.agreed as f64,
            "tasks_reannounced" => self.claims.as_ref()?.reannounced as f64,
            "duplicate_claim_rounds" => self.claims.as_ref()?.duplicate_claim_rounds as f64,
            "time_to_claim_p50" => self.claims.as_ref()?.time_to_claim_p50? as f64,
            "zones_visited" => self.zones.as_ref()?.visited as f64,
            "zones_all_visited_round" => self.zones.as_ref()?.all_visited_round? as f64,
            "rounds" => self.rounds as f64,
            _ => return None,
        })
    }

    pub const SCALARS: [&'static str; 28] = [
        "rounds_to_full",
        "coverage",
        "messages_total",
        "max_node_load",
        "redundancy_ratio",
        "deliveries",
        "lost",
        "staleness_p50",
        "staleness_p95",
        "staleness_max",
        "false_adoptions",
        "distinct_stores",
        "consensus_entropy",
        "max_deviation",
        "sum_drift",
        "variance_increase",
        "detection_first_suspect",
        "detection_all_dead",
        "tasks",
        "tasks_claimed",
        "tasks_done",
        "tasks_agreed",
        "tasks_reannounced",
        "duplicate_claim_rounds",
        "time_to_claim_p50",
        "zones_visited",
        "zones_all_visited_round",
        "rounds",
    ];

    /// Whether `name` is a metric some run could report.
    pub fn is_known_scalar(name: &str) -> bool {
        Self::SCALARS.contains(&name)
    }
}

struct Tracked {
    metrics: RumorMetrics,
    holders: Vec<bool>,
    held_live: usize,
}

struct Detection {
    metrics: DetectionMetrics,
    dead_at: Vec<bool>,
    open: bool,
}

struct Averaging {
    values: Vec<f64>,
    initial_sum: f64,
    var0: f64,
    metrics: AveragingMetrics,
    last_nv: Option<f64>,
    touched: bool,
}

#[derive(Default)]
struct Claims {
    announced: BTreeMap<String, Round>,
    first_claim: BTreeMap<String, Round>,
    reannounced: BTreeSet<String>,
    working: BTreeMap<String, BTreeSet<AgentId>>,
    duplicate_rounds: u64,
}

/// Folds trace events into [`RunMetrics`].
pub struct MetricsBuilder {
    hasher: TraceHasher,
    n: usize,
    m: RunMetrics,
    header_seen: bool,
    ended: bool,
    live: Vec<bool>,
    live_count: usize,
    adversaries: BTreeSet<AgentId>,
    load: Vec<u64>,
    tracked: Vec<Tracked>,
    tracked_index: HashMap<RumorId, usize>,
    false_holds: BTreeSet<(AgentId, RumorId)>,
    staleness: Vec<u64>,
    detections: Vec<Detection>,
    averaging: Option<Averaging>,
    claims: Option<Claims>,
    zones_seen: BTreeSet<u32>,
    zones_total: Option<u32>,
    error: Option<MetricsError>,
}

impl Default for MetricsBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl MetricsBuilder {
    pub fn new() -> Self {
        MetricsBuilder {
            hasher: TraceHasher::default(),
            n: 0,
            m: RunMetrics::default(),
            header_seen: false,
            ended: false,
            live: Vec::new(),
            live_count: 0,
            adversaries: BTreeSet::new(),
            load: Vec::new(),
            tracked: Vec::new(),
            tracked_index: HashMap::new(),
            false_holds: BTreeSet::new(),
            staleness: Vec::new(),
            detections: Vec::new(),
            averaging: None,
            claims: None,
            zones_seen: BTreeSet::new(),
            zones_total: None,
            error: None,
        }
    }

    fn charge(&mut self, node: AgentId, kind: &str, count: u64) {
        if count == 0 {
            return;
        }
        match self.load.get_mut(node.index()) {
            Some(l) => *l += count,
            None => {
                self.error.get_or_insert(MetricsError::UnknownAgent(node));
                return;
            }
        }
        self.m.messages_total += count;
        *self.m.messages_by_kind.entry(kind.to_string()).or_default() += count;
    }

    fn check(&mut self, node: AgentId) -> bool {
        if node.index() < self.n {
            true
        } else {
            self.error.get_or_insert(MetricsError::UnknownAgent(node));
            false
        }
    }

    pub fn push(&mut self, ev: &TraceEvent) {
        self.hasher.update(ev);
        if !self.header_seen && !matches!(ev, TraceEvent::Run(_)) {
            self.error.get_or_insert(MetricsError::MissingHeader);
            return;
        }
        match ev {
            TraceEvent::Run(h) => {
                self.header_seen = true;
                self.n = h.n_agents;
                self.m.n_agents = h.n_agents;
                self.m.mode = h.mode;
                self.live = vec![true; h.n_agents];
                self.live_count = h.n_agents;
                self.load = vec![0; h.n_agents];
                self.adversaries = h.adversaries.iter().copied().collect();
                self.zones_total = h.zones;
            }
            TraceEvent::Origin(o) => {
                if !self.check(o.node) {
                    return;
                }
                if let Some(c) = self.claims.as_mut().filter(|_| o.tracked) {
                    if let Some(id) = o.topic.strip_prefix("task/") {
                        c.announced.entry(id.to_string()).or_insert(o.round);
                    }
                } else if o.tracked && o.topic.starts_with("task/") {
                    let mut c = Claims::default();
                    c.announced.insert(o.topic["task/".len()..].to_string(), o.round);
                    self.claims = Some(c);
                }
                if o.tracked {
                    self.tracked_index.insert(o.rumor_id, self.tracked.len());
                    self.tracked.push(Tracked {
                        metrics: RumorMetrics {
                            rumor_id: o.rumor_id,
                            topic: o.topic.clone(),
                            origin: o.node,
                            created_round: o.round,
                            adversarial: o.adversarial,
                            coverage: Vec::new(),
                            final_coverage: 0.0,
                            rounds_to_full: None,
                        },
                        holders: vec![false; self.n],
                        held_live: 0,
                    });
                }
            }
            TraceEvent::Msg(msg) => {
                if !self.check(msg.from) || !self.check(msg.to) {
                    return;
                }
                let kind = match msg.kind {
                    crate::sim::trace::MsgKind::Gossip => "gossip",
                    crate::sim::trace::MsgKind::Broadcast => "broadcast",
                };
                self.charge(msg.from, kind, 1);
                if msg.delivered() {
                    self.m.deliveries += 1;
                    if msg.duplicate() {
                        self.m.duplicates += 1;
                    }
                } else if msg.effect == crate::sim::trace::FATE_LOST {
                    self.m.lost += 1;
                } else {
                    self.m.undeliverable += 1;
                }
            }
            TraceEvent::Hold(h) => {
                if !self.check(h.node) {
                    return;
                }
                let Some(&i) = self.tracked_index.get(&h.rumor_id) else {
                    return;
                };
                let t = &mut self.tracked[i];
                if t.holders[h.node.index()] {
                    return;
                }
                t.holders[h.node.index()] = true;
                if self.live[h.node.index()] {
                    t.held_live += 1;
                }
                if t.metrics.adversarial {
                    if !self.adversaries.contains(&h.node) {
                        self.false_holds.insert((h.node, h.rumor_id));
                    }
                } else {
                    self.staleness.push(h.round - t.metrics.created_round);
                }
            }
            TraceEvent::Member(me) => {
                for d in self.detections.iter_mut().filter(|d| d.open && d.metrics.peer == me.peer) {
                    if me.node == me.peer {
                        continue;
                    }
                    let latency = me.round - d.metrics.killed_round;
                    if me.new_status >= MemberStatus::Suspect && d.metrics.first_suspect.is_none() {
                        d.metrics.first_suspect = Some(latency);
                    }
                    if let Some(x) = d.dead_at.get_mut(me.node.index()) {
                        *x = me.new_status == MemberStatus::Dead;
                    }
                }
            }
            TraceEvent::Gate(_) => {}
            TraceEvent::Task(t) => {
                let c = self.claims.get_or_insert_with(Claims::default);
                match t.action {
                    TaskAction::Claim => {
                        c.first_claim.entry(t.task_id.clone()).or_insert(t.round);
                        c.working.entry(t.task_id.clone()).or_default().insert(t.node);
                    }
                    TaskAction::Abandon | TaskAction::Done => {
                        if let Some(w) = c.working.get_mut(&t.task_id) {
                            w.remove(&t.node);
                        }
                    }
                    TaskAction::Reannounce => {
                        c.reannounced.insert(t.task_id.clone());
                    }
                }
            }
            TraceEvent::Probe(p) => {
                self.charge(p.node, "probe", u64::from(p.messages));
            }
            TraceEvent::Ae(a) => {
                self.charge(a.a, "anti_entropy", 1);
                if a.ok {
                    self.charge(a.b, "anti_entropy", 1);
                }
            }
            TraceEvent::Churn(c) => self.churn(c.round, &c.action, &c.targets),
            TraceEvent::AvgInit(init) => {
                let sum: f64 = init.values.iter().sum();
                let mean = if init.values.is_empty() { 0.0 } else { sum / init.values.len() as f64 };
                self.averaging = Some(Averaging {
                    initial_sum: sum,
                    var0: variance(&init.values),
                    values: init.values.clone(),
                    metrics: AveragingMetrics {
                        initial_mean: mean,
                        ..AveragingMetrics::default()
                    },
                    last_nv: None,
                    touched: false,
                });
            }
            TraceEvent::Avg(e) => {
                self.charge(e.a, "averaging", 1);
                if !e.lost {
                    self.charge(e.b, "averaging", 1);
                }
                if let Some(av) = self.averaging.as_mut() {
                    av.touched = true;
                    if !e.lost {
                        av.metrics.exchanges += 1;
                        av.values[e.a.index()] = e.value_a;
                        av.values[e.b.index()] = e.value_b;
                        let sum: f64 = av.values.iter().sum();
                        av.metrics.max_sum_drift = av.metrics.max_sum_drift.max((sum - av.initial_sum).abs());
                    }
                }
            }
            TraceEvent::Visit(v) => {
                if self.zones_seen.insert(v.zone) {
                    if let Some(total) = self.zones_total {
                        let z = self.m.zones.get_or_insert_with(ZoneMetrics::default);
                        if self.zones_seen.len() == total as usize {
                            z.all_visited_round = Some(v.round);
                        }
                    }
                }
                self.m.zones.get_or_insert_with(ZoneMetrics::default).visited = self.zones_seen.len();
            }
            TraceEvent::RoundEnd(r) => self.round_end(r.round),
            TraceEvent::End(e) => {
                self.ended = true;
                self.m.rounds = e.rounds;
                self.m.distinct_stores = e.distinct_stores;
                if !e.tasks.is_empty() {
                    let c = self.claims.get_or_insert_with(Claims::default);
                    let mut cm = ClaimMetrics {
                        tasks: e.tasks.len(),
                        claimed: e.tasks.keys().filter(|k| c.first_claim.contains_key(*k)).count(),
                        done: e
                            .tasks
                            .values()
                            .filter(|t| t.agreed && t.state == Some(crate::coordination::TaskState::Done))
                            .count(),
                        agreed: e.tasks.values().filter(|t| t.agreed).count(),
                        reannounced: c.reannounced.len(),
                        time_to_claim_p50: None,
                        duplicate_claim_rounds: c.duplicate_rounds,
                    };
                    let delays: Vec<u64> = c
                        .first_claim
                        .iter()
                        .filter_map(|(id, r)| c.announced.get(id).map(|a| r - a))
                        .collect();
                    if !delays.is_empty() {
                        cm.time_to_claim_p50 = Some(Staleness::from_samples(delays).p50);
                    }
                    self.m.claims = Some(cm);
                }
            }
        }
    }

    fn churn(&mut self, round: Round, action: &str, targets: &[AgentId]) {
        for &t in targets {
            if !self.check(t) {
                return;
            }
            let i = t.index();
            match action {
                "kill" | "kill_claimant" if self.live[i] => {
                    self.live[i] = false;
                    self.live_count -= 1;
                    for tr in &mut self.tracked {
                        if tr.holders[i] {
                            tr.held_live -= 1;
                        }
                    }
                    if let Some(c) = self.claims.as_mut() {
                        for w in c.working.values_mut() {
                            w.remove(&t);
                        }
                    }
                    self.detections.push(Detection {
                        metrics: DetectionMetrics {
                            peer: t,
                            killed_round: round,
                            first_suspect: None,
                            all_dead: None,
                        },
                        dead_at: vec![false; self.n],
                        open: true,
                    });
                }
                "revive" if !self.live[i] => {
                    self.live[i] = true;
                    self.live_count += 1;
                    for tr in &mut self.tracked {
                        if tr.holders[i] {
                            tr.held_live += 1;
                        }
                    }
                    for d in self.detections.iter_mut().filter(|d| d.metrics.peer == t) {
                        d.open = false;
                    }
                }
                _ => {}
            }
        }
    }

    fn round_end(&mut self, round: Round) {
        let live_count = self.live_count;
        for t in &mut self.tracked {
            if t.metrics.created_round > round {
                continue;
            }
            let cov = if live_count == 0 {
                0.0
            } else {
                t.held_live as f64 / live_count as f64
            };
            t.metrics.coverage.push(cov);
            if live_count > 0 && t.held_live == live_count && t.metrics.rounds_to_full.is_none() {
                t.metrics.rounds_to_full = Some(round - t.metrics.created_round);
            }
        }
        for d in self.detections.iter_mut().filter(|d| d.open && d.metrics.all_dead.is_none()) {
            let peer = d.metrics.peer.index();
            let all = (0..self.n)
                .filter(|&i| i != peer && self.live[i])
                .all(|i| d.dead_at[i]);
            if all {
                d.metrics.all_dead = Some(round - d.metrics.killed_round);
            }
        }
        if let Some(c) = self.claims.as_mut() {
            c.duplicate_rounds += c.working.values().filter(|w| w.len() >= 2).count() as u64;
        }
        if let Some(av) = self.averaging.as_mut().filter(|a| a.touched) {
            av.touched = false;
            let nv = normalized_variance(&av.values, av.var0);
            if let Some(prev) = av.last_nv {
                av.metrics.max_variance_increase = av.metrics.max_variance_increase.max(nv - prev);
            }
            av.last_nv = Some(nv);
            self.m.consensus_entropy.push(nv);
        }
    }

    pub fn finish(mut self) -> Result<RunMetrics, MetricsError> {
        if let Some(e) = self.error {
            return Err(e);
        }
        if !self.header_seen {
            return Err(MetricsError::MissingHeader);
        }
        if !self.ended {
            return Err(MetricsError::Truncated);
        }
        let m = &mut self.m;
        if let Some((node, &load)) = self.load.iter().enumerate().max_by_key(|&(i, l)| (*l, std::cmp::Reverse(i))) {
            if load > 0 {
                m.max_node_load = load;
                m.max_load_node = Some(AgentId(node as u32));
            }
        }
        m.redundancy_ratio = if m.deliveries == 0 {
            0.0
        } else {
            m.duplicates as f64 / m.deliveries as f64
        };
        m.coverage = 1.0;
        m.rounds_to_full = Some(0);
        for t in &mut self.tracked {
            t.metrics.final_coverage = t.metrics.coverage.last().copied().unwrap_or(0.0);
            if !t.metrics.adversarial {
                m.coverage = m.coverage.min(t.metrics.final_coverage);
                m.rounds_to_full = match (m.rounds_to_full, t.metrics.rounds_to_full) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    _ => None,
                };
            }
        }
        m.rumors = self.tracked.into_iter().map(|t| t.metrics).collect();
        m.staleness = Staleness::from_samples(self.staleness);
        m.false_adoptions = self.false_holds.len() as u64;
        m.detection = self.detections.into_iter().map(|d| d.metrics).collect();
        if let Some(mut av) = self.averaging {
            let mean = av.metrics.initial_mean;
            av.metrics.final_max_deviation = av.values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
            m.averaging = Some(av.metrics);
        }
        if let Some(total) = self.zones_total {
            let z = m.zones.get_or_insert_with(ZoneMetrics::default);
            z.visited = self.zones_seen.len();
            if z.visited < total as usize {
                z.all_visited_round = None;
            }
        }
        m.trace_hash = self.hasher.finish();
        Ok(self.m)
    }
}

/// Recompute metrics from a stored trace.
pub fn compute_metrics(trace: &Trace) -> Result<RunMetrics, MetricsError> {
    let mut b = MetricsBuilder::new();
    for e in trace.events() {
        b.push(e);
    }
    b.finish()
}

