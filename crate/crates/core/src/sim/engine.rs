//! The round loop.
//!
//! Each round runs, in order: churn and workload injections, delivery of
//! messages due this round, per-agent housekeeping and coordination,
//! membership probes, gossip sends, anti-entropy, averaging exchanges and a
//! round-end snapshot. Delivery happens before sending so that a message
//! sent in round `r` with latency 1 is handled in round `r + 1`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use indexmap::IndexSet;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::coordination::{averaging_step, AgentProfile, ZoneId};
use crate::dissemination::anti_entropy_exchange;
use crate::model::{AgentId, Payload, Priority, Round, Rumor, RumorId, Version};
use crate::node::{state_key, Agent, AgentEvent, Behavior, ProtocolParams};
use crate::rng::{derive_rng, SimRng, Stream, NETWORK_NODE};
use crate::sim::config::{
    ChurnAction, ConfigError, InitialValues, Latency, Mode, ScenarioConfig, StoreOp,
};
use crate::sim::metrics::{MetricsBuilder, RunMetrics};
use crate::sim::trace::*;

/// Whether to keep every trace event in memory or only hash them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    Keep,
    HashOnly,
}

/// Coverage measured by looking at agent state directly, independent of
/// the trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LiveStats {
    pub coverage: BTreeMap<RumorId, Vec<f64>>,
    pub sent_per_round: Vec<u64>,
}

/// Final agent states and connectivity.
pub struct World {
    pub agents: Vec<Agent>,
    pub live: Vec<bool>,
    live_pool: IndexSet<AgentId>,
    cut_off: Vec<bool>,
    partitioned: bool,
    adjacency: Option<Vec<IndexSet<AgentId>>>,
}

impl World {
    pub fn reachable(&self, a: AgentId, b: AgentId) -> bool {
        !self.partitioned || self.cut_off[a.index()] == self.cut_off[b.index()]
    }

    pub fn live_agents(&self) -> impl Iterator<Item = &Agent> {
        self.agents.iter().filter(|a| self.live[a.id().index()])
    }
}

pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: Option<Trace>,
    pub world: World,
    pub live: LiveStats,
}

struct Envelope {
    sent: Round,
    from: AgentId,
    to: AgentId,
    seq: u64,
    kind: MsgKind,
    rumor: Rumor,
}

struct Sink {
    builder: MetricsBuilder,
    events: Option<Vec<TraceEvent>>,
}

impl Sink {
    fn emit(&mut self, ev: TraceEvent) {
        self.builder.push(&ev);
        if let Some(v) = self.events.as_mut() {
            v.push(ev);
        }
    }
}

struct TrackedRumor {
    topic: String,
    version: Version,
    created: Round,
    held: Vec<bool>,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    world: World,
    sink: Sink,
    inflight: BTreeMap<Round, Vec<Envelope>>,
    seq: u64,
    sent: u64,
    net: SimRng,
    membership: bool,
    tracked: Vec<(RumorId, TrackedRumor)>,
    by_key: HashMap<String, Vec<usize>>,
    live_stats: LiveStats,
    zones: Vec<ZoneId>,
    next_move: BTreeMap<AgentId, Round>,
    averaging_started: bool,
}

/// Run a scenario, keeping the full trace.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, ConfigError> {
    run_with(cfg, TraceMode::Keep)
}

pub fn run_with(cfg: &ScenarioConfig, mode: TraceMode) -> Result<RunOutput, ConfigError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg, mode);
    for r in 0..cfg.rounds {
        sim.round(r);
    }
    Ok(sim.finish())
}

/// The same scenario with every rumor sent straight from its origin to all
/// other agents, once, with no relaying or repair.
pub fn direct_broadcast_baseline(cfg: &ScenarioConfig) -> Result<RunMetrics, ConfigError> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Broadcast;
    Ok(run_with(&cfg, TraceMode::HashOnly)?.metrics)
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig, mode: TraceMode) -> Self {
        let n = cfg.n_agents;
        let params: ProtocolParams = cfg.params();
        let membership = cfg.membership && cfg.mode == Mode::Gossip;
        let ids: Vec<AgentId> = (0..n as u32).map(AgentId).collect();
        let mut behaviors = vec![Behavior::Honest; n];
        for adv in &cfg.adversaries {
            for &a in &adv.agents {
                behaviors[a as usize] = adv.behavior;
            }
        }
        let mut profiles = vec![AgentProfile::default(); n];
        if let Some(t) = &cfg.workload.tasks {
            for p in &t.profiles {
                let targets: Vec<usize> = if p.agents.is_empty() {
                    (0..n).collect()
                } else {
                    p.agents.iter().map(|&a| a as usize).collect()
                };
                for i in targets {
                    profiles[i] = AgentProfile::new(p.capabilities.iter().cloned(), p.load);
                }
            }
        }
        let agents: Vec<Agent> = ids
            .iter()
            .map(|&id| {
                let mut a = Agent::new(id, params.clone())
                    .with_behavior(behaviors[id.index()])
                    .with_profile(profiles[id.index()].clone());
                if membership {
                    a = a.with_membership(ids.iter().copied());
                }
                a
            })
            .collect();
        let adjacency = cfg.topology.as_ref().map(|adj| {
            adj.iter()
                .enumerate()
                .map(|(i, row)| row.iter().filter(|&&j| j as usize != i).map(|&j| AgentId(j)).collect())
                .collect()
        });
        let world = World {
            agents,
            live: vec![true; n],
            live_pool: ids.iter().copied().collect(),
            cut_off: vec![false; n],
            partitioned: false,
            adjacency,
        };
        let zones: Vec<ZoneId> = cfg.workload.zones.as_ref().map_or(Vec::new(), |z| (0..z.zones).collect());
        let mut sim = Sim {
            cfg,
            world,
            sink: Sink {
                builder: MetricsBuilder::new(),
                events: (mode == TraceMode::Keep).then(Vec::new),
            },
            inflight: BTreeMap::new(),
            seq: 0,
            sent: 0,
            net: derive_rng(cfg.seed, NETWORK_NODE, 0, Stream::Network),
            membership,
            tracked: Vec::new(),
            by_key: HashMap::new(),
            live_stats: LiveStats::default(),
            next_move: cfg
                .workload
                .zones
                .as_ref()
                .map_or(BTreeMap::new(), |z| z.drones.iter().map(|&d| (AgentId(d), 0)).collect()),
            zones,
            averaging_started: false,
        };
        let adversaries: BTreeSet<AgentId> =
            cfg.adversaries.iter().flat_map(|a| a.agents.iter().map(|&x| AgentId(x))).collect();
        sim.sink.emit(TraceEvent::Run(RunHeader {
            n_agents: n,
            rounds: cfg.rounds,
            seed: cfg.seed,
            mode: cfg.mode,
            fanout: cfg.fanout,
            loss_p: cfg.loss_p,
            ttl_hops: params.ttl_hops,
            adversaries: adversaries.into_iter().collect(),
            zones: cfg.workload.zones.as_ref().map(|z| z.zones),
        }));
        sim
    }

    fn round(&mut self, r: Round) {
        self.sent = 0;
        self.net = derive_rng(self.cfg.seed, NETWORK_NODE, r, Stream::Network);
        self.churn(r);
        self.workload(r);
        self.deliver(r);
        self.housekeeping(r);
        if self.membership {
            self.probes(r);
        }
        if self.cfg.mode == Mode::Gossip {
            self.gossip(r);
            let period = self.cfg.anti_entropy_period;
            if period > 0 && r > 0 && r % period == 0 {
                self.anti_entropy(r);
            }
        }
        self.averaging(r);
        self.round_end(r);
    }

    // ---- plumbing ----

    fn drain(&mut self, node: AgentId, r: Round) {
        for ev in self.world.agents[node.index()].take_events() {
            let out = match ev {
                AgentEvent::HighWater { key, version } => {
                    if let Some(idxs) = self.by_key.get(&key) {
                        for &i in idxs {
                            let (id, t) = &mut self.tracked[i];
                            if !t.held[node.index()] && t.version <= version {
                                t.held[node.index()] = true;
                                let rumor_id = *id;
                                self.sink.emit(TraceEvent::Hold(HoldEvent {
                                    round: r,
                                    node,
                                    rumor_id,
                                }));
                            }
                        }
                    }
                    continue;
                }
                AgentEvent::Member(c) => TraceEvent::Member(MemberEvent {
                    round: r,
                    node,
                    peer: c.peer,
                    old_status: c.old_status,
                    new_status: c.new_status,
                    incarnation: c.incarnation,
                }),
                AgentEvent::Gate { rumor_id, decision } => TraceEvent::Gate(GateEvent {
                    round: r,
                    node,
                    rumor_id,
                    credible: decision.credible,
                    source_count: decision.source_count,
                    weighted_sum: decision.weighted_sum,
                }),
                AgentEvent::Task { task_id, epoch, action } => TraceEvent::Task(TaskEvent {
                    round: r,
                    node,
                    task_id,
                    epoch,
                    action,
                }),
                AgentEvent::Originated { .. } => continue,
            };
            self.sink.emit(out);
        }
    }

    /// Record a rumor an agent just created and, in broadcast mode, send it
    /// to everyone.
    fn originated(&mut self, node: AgentId, rumor: Rumor, tracked: bool, adversarial: bool, r: Round) {
        if tracked {
            let idx = self.tracked.len();
            self.by_key.entry(state_key(&rumor.topic).to_string()).or_default().push(idx);
            self.tracked.push((
                rumor.rumor_id,
                TrackedRumor {
                    topic: rumor.topic.clone(),
                    version: rumor.version,
                    created: r,
                    held: vec![false; self.cfg.n_agents],
                },
            ));
        }
        self.sink.emit(TraceEvent::Origin(OriginEvent {
            round: r,
            node,
            rumor_id: rumor.rumor_id,
            topic: rumor.topic.clone(),
            version: rumor.version,
            priority: rumor.priority,
            ttl: rumor.ttl_hops,
            tracked,
            adversarial,
        }));
        self.drain(node, r);
        if tracked {
            self.held_already(self.tracked.len() - 1, r);
        }
        if self.cfg.mode == Mode::Broadcast {
            for to in 0..self.cfg.n_agents as u32 {
                if to != node.0 {
                    let mut copy = rumor.clone();
                    copy.ttl_hops = 0;
                    self.send(r, node, AgentId(to), copy, MsgKind::Broadcast);
                }
            }
        }
    }

    /// Agents that already carry a newer version of the key hold a freshly
    /// tracked rumor without ever receiving it.
    fn held_already(&mut self, idx: usize, r: Round) {
        let (rumor_id, t) = &mut self.tracked[idx];
        let key = state_key(&t.topic);
        for a in &self.world.agents {
            let i = a.id().index();
            if !t.held[i] && a.high_water(key).is_some_and(|hw| hw >= t.version) {
                t.held[i] = true;
                self.sink.emit(TraceEvent::Hold(HoldEvent {
                    round: r,
                    node: a.id(),
                    rumor_id: *rumor_id,
                }));
            }
        }
    }

    fn lost(&mut self) -> bool {
        self.cfg.loss_p > 0.0 && self.net.random::<f64>() < self.cfg.loss_p
    }

    fn send(&mut self, r: Round, from: AgentId, to: AgentId, rumor: Rumor, kind: MsgKind) {
        self.sent += 1;
        if self.lost() {
            self.sink.emit(TraceEvent::Msg(MsgEvent {
                sent: r,
                round: r,
                from,
                to,
                kind,
                rumor_id: rumor.rumor_id,
                topic: rumor.topic,
                ttl: rumor.ttl_hops,
                effect: FATE_LOST.into(),
            }));
            return;
        }
        let delay = match self.cfg.latency {
            Latency::Constant(d) => d,
            Latency::Uniform(lo, hi) => self.net.random_range(lo..=hi),
        };
        self.seq += 1;
        self.inflight.entry(r + delay).or_default().push(Envelope {
            sent: r,
            from,
            to,
            seq: self.seq,
            kind,
            rumor,
        });
    }

    fn set_live(&mut self, id: AgentId, up: bool) {
        self.world.live[id.index()] = up;
        if up {
            self.world.live_pool.insert(id);
        } else {
            self.world.live_pool.swap_remove(&id);
        }
    }

    // ---- phases ----

    fn churn(&mut self, r: Round) {
        let events: Vec<&ChurnAction> = self.cfg.churn.iter().filter(|c| c.round == r).map(|c| &c.action).collect();
        for action in events {
            let (name, targets): (&str, Vec<AgentId>) = match action {
                ChurnAction::Kill { targets } => ("kill", targets.iter().map(|&t| AgentId(t)).collect()),
                ChurnAction::Revive { targets } => ("revive", targets.iter().map(|&t| AgentId(t)).collect()),
                ChurnAction::Partition { targets } => ("partition", targets.iter().map(|&t| AgentId(t)).collect()),
                ChurnAction::Heal => ("heal", Vec::new()),
                ChurnAction::KillClaimant { task } => {
                    let claimant = self
                        .world
                        .live_agents()
                        .find(|a| {
                            a.is_working_on(task)
                                && a.board().get(task).and_then(|ad| ad.claimant) == Some(a.id())
                        })
                        .map(|a| a.id());
                    ("kill_claimant", claimant.into_iter().collect())
                }
            };
            self.sink.emit(TraceEvent::Churn(ChurnRecord {
                round: r,
                action: name.into(),
                targets: targets.clone(),
            }));
            match action {
                ChurnAction::Kill { .. } | ChurnAction::KillClaimant { .. } => {
                    for t in targets {
                        self.set_live(t, false);
                    }
                }
                ChurnAction::Revive { .. } => {
                    for t in targets {
                        if self.world.live[t.index()] {
                            continue;
                        }
                        self.set_live(t, true);
                        if let Some(rumor) = self.world.agents[t.index()].revive(r) {
                            self.originated(t, rumor, false, false, r);
                        }
                        self.drain(t, r);
                    }
                }
                ChurnAction::Partition { .. } => {
                    self.world.cut_off.iter_mut().for_each(|c| *c = false);
                    for t in targets {
                        self.world.cut_off[t.index()] = true;
                    }
                    self.world.partitioned = true;
                }
                ChurnAction::Heal => {
                    self.world.partitioned = false;
                    self.world.cut_off.iter_mut().for_each(|c| *c = false);
                }
            }
        }
    }

    fn workload(&mut self, r: Round) {
        let cfg = self.cfg;
        let w = &cfg.workload;
        for spec in w.rumors.iter().filter(|s| s.round == r) {
            for &o in &spec.origins {
                let id = AgentId(o);
                if !self.world.live[id.index()] {
                    continue;
                }
                let agent = &mut self.world.agents[id.index()];
                let ttl = spec.ttl.unwrap_or(agent.params().ttl_hops);
                let rumor = agent.originate_with_ttl(spec.topic.as_str(), spec.payload.as_str(), spec.priority, ttl, r);
                self.originated(id, rumor, true, false, r);
            }
        }
        for op in w.store_ops.iter().filter(|o| o.round == r) {
            self.store_op(AgentId(op.agent), &op.op, r);
        }
        if let Some(rs) = w.random_store.as_ref().filter(|rs| r < rs.until_round) {
            let mut rng = derive_rng(cfg.seed, NETWORK_NODE, r, Stream::Workload);
            for i in 0..rs.ops_per_round {
                let live: Vec<AgentId> = self.world.live_pool.iter().copied().collect();
                if live.is_empty() {
                    break;
                }
                let mut sorted = live;
                sorted.sort_unstable();
                let agent = sorted[rng.random_range(0..sorted.len())];
                let op = match rng.random_range(0..10) {
                    0..=4 => StoreOp::Write {
                        key: format!("k{}", rng.random_range(0..rs.keys)),
                        value: format!("v{r}.{}.{i}", agent.0),
                    },
                    5 | 6 => StoreOp::Delete {
                        key: format!("k{}", rng.random_range(0..rs.keys)),
                    },
                    _ => StoreOp::Increment {
                        counter: format!("c{}", rng.random_range(0..rs.counters)),
                        amount: rng.random_range(1..=5),
                    },
                };
                self.store_op(agent, &op, r);
            }
        }
        if let Some(t) = &w.tasks {
            let mut specs: Vec<(String, AgentId, BTreeSet<String>, Priority)> = t
                .tasks
                .iter()
                .filter(|s| s.round == r)
                .map(|s| (s.id.clone(), AgentId(s.origin), s.descriptor.clone(), s.priority))
                .collect();
            if let Some(g) = t.generate.as_ref().filter(|g| g.round == r) {
                for i in 0..g.count {
                    let origin = AgentId(i % cfg.n_agents as u32);
                    specs.push((format!("t{i}"), origin, g.descriptor.clone(), Priority::Normal));
                }
            }
            for (id, origin, descriptor, priority) in specs {
                if !self.world.live[origin.index()] {
                    continue;
                }
                if let Ok(rumor) = self.world.agents[origin.index()].announce_task(&id, descriptor, priority, r) {
                    self.originated(origin, rumor, true, false, r);
                }
            }
        }
        if let Some(every) = w.load_every.filter(|e| r % e == 0) {
            let _ = every;
            let live: Vec<AgentId> = (0..cfg.n_agents as u32).map(AgentId).filter(|a| self.world.live[a.index()]).collect();
            for id in live {
                let rumor = self.world.agents[id.index()].publish_load(r);
                self.originated(id, rumor, false, false, r);
            }
        }
        for adv in &cfg.adversaries {
            let active = r >= adv.start_round && adv.end_round.is_none_or(|e| r < e);
            if !active {
                continue;
            }
            for &a in &adv.agents {
                let id = AgentId(a);
                if !self.world.live[id.index()] {
                    continue;
                }
                for k in 0..adv.rate {
                    match adv.behavior {
                        Behavior::Fabricate => {
                            let rumor = self.world.agents[id.index()].originate(
                                adv.topic.as_str(),
                                adv.payload.as_str(),
                                Priority::Normal,
                                r,
                            );
                            self.originated(id, rumor, true, true, r);
                        }
                        Behavior::Flood => {
                            let rumor = self.world.agents[id.index()].originate(
                                format!("flood/{a}/{r}/{k}"),
                                Payload::from("junk"),
                                Priority::Routine,
                                r,
                            );
                            self.originated(id, rumor, false, true, r);
                        }
                        Behavior::Honest | Behavior::Tamper => {}
                    }
                }
            }
        }
    }

    fn store_op(&mut self, id: AgentId, op: &StoreOp, r: Round) {
        if !self.world.live[id.index()] {
            return;
        }
        let agent = &mut self.world.agents[id.index()];
        let (rumor, tracked) = match op {
            StoreOp::Write { key, value } => (agent.write(key, value.as_str(), r), true),
            StoreOp::Delete { key } => (agent.delete(key, r), true),
            StoreOp::Increment { counter, amount } => match agent.increment(counter, *amount, r) {
                Ok(rumor) => (rumor, false),
                Err(_) => return,
            },
            StoreOp::SetAdd { set, elem } => (agent.set_add(set, elem, r), false),
            StoreOp::SetRemove { set, elem } => (agent.set_remove(set, elem, r), false),
        };
        self.originated(id, rumor, tracked, false, r);
    }

    fn deliver(&mut self, r: Round) {
        let Some(mut batch) = self.inflight.remove(&r) else {
            return;
        };
        batch.sort_unstable_by_key(|e| (e.from, e.seq));
        for env in batch {
            let to = env.to;
            let effect = if !self.world.live[to.index()] {
                FATE_DEAD.to_string()
            } else if !self.world.reachable(env.from, to) {
                FATE_PARTITIONED.to_string()
            } else {
                let rumor = env.rumor.clone();
                self.world.agents[to.index()].handle_gossip(rumor, env.from, r).to_string()
            };
            self.sink.emit(TraceEvent::Msg(MsgEvent {
                sent: env.sent,
                round: r,
                from: env.from,
                to,
                kind: env.kind,
                rumor_id: env.rumor.rumor_id,
                topic: env.rumor.topic,
                ttl: env.rumor.ttl_hops,
                effect,
            }));
            self.drain(to, r);
        }
    }

    fn housekeeping(&mut self, r: Round) {
        let has_tasks = self.cfg.workload.tasks.is_some();
        for i in 0..self.cfg.n_agents {
            if !self.world.live[i] {
                continue;
            }
            let id = AgentId(i as u32);
            let out = self.world.agents[i].tick(r);
            self.drain(id, r);
            for rumor in out {
                self.originated(id, rumor, false, false, r);
            }
            if has_tasks {
                let out = self.world.agents[i].coordination_tick(r);
                self.drain(id, r);
                for rumor in out {
                    self.originated(id, rumor, false, false, r);
                }
            }
        }
        if let Some(z) = &self.cfg.workload.zones {
            let due: Vec<AgentId> = self
                .next_move
                .iter()
                .filter(|(d, &at)| at <= r && self.world.live[d.index()])
                .map(|(&d, _)| d)
                .collect();
            for d in due {
                let mut rng = derive_rng(self.cfg.seed, u64::from(d.0), r, Stream::Coordination);
                let zones = self.zones.clone();
                if let Some((zone, rumor)) = self.world.agents[d.index()].choose_zone(&zones, z.silence_rounds, r, &mut rng) {
                    self.sink.emit(TraceEvent::Visit(VisitEvent { round: r, node: d, zone }));
                    self.originated(d, rumor, false, false, r);
                }
                self.next_move.insert(d, r + z.dwell_rounds);
            }
        }
    }

    fn probes(&mut self, r: Round) {
        for i in 0..self.cfg.n_agents {
            if !self.world.live[i] {
                continue;
            }
            let id = AgentId(i as u32);
            let mut rng = derive_rng(self.cfg.seed, i as u64, r, Stream::Probe);
            let plan = self.world.agents[i].probe_plan(&mut rng);
            let Some(target) = plan.target else {
                continue;
            };
            let loss = self.cfg.loss_p;
            let lost = |rng: &mut SimRng| loss > 0.0 && rng.random::<f64>() < loss;
            let world = &self.world;
            let up = |a: AgentId, b: AgentId| world.live[b.index()] && world.reachable(a, b);
            // Direct ping and ack.
            let mut messages = 1;
            let mut acked = false;
            if up(id, target) && !lost(&mut rng) {
                messages += 1;
                acked = !lost(&mut rng);
            }
            if !acked {
                for &p in &plan.proxies {
                    messages += 1;
                    if !(up(id, p) && !lost(&mut rng)) {
                        continue;
                    }
                    messages += 1;
                    if !(up(p, target) && !lost(&mut rng)) {
                        continue;
                    }
                    messages += 2;
                    if !lost(&mut rng) && !lost(&mut rng) {
                        acked = true;
                        break;
                    }
                }
            }
            self.sent += u64::from(messages);
            self.sink.emit(TraceEvent::Probe(ProbeEvent {
                round: r,
                node: id,
                target,
                acked,
                messages,
            }));
            if !acked {
                let out = self.world.agents[i].probe_failed(target, r);
                self.drain(id, r);
                if let Some(rumor) = out {
                    self.originated(id, rumor, false, false, r);
                }
            }
        }
    }

    fn gossip(&mut self, r: Round) {
        for i in 0..self.cfg.n_agents {
            if !self.world.live[i] || self.world.agents[i].buffer().is_empty() {
                continue;
            }
            let id = AgentId(i as u32);
            let mut rng = derive_rng(self.cfg.seed, i as u64, r, Stream::Gossip);
            let world = &mut self.world;
            let pool = match &world.adjacency {
                Some(adj) => Some(&adj[i]),
                None if self.membership => None,
                None => Some(&world.live_pool),
            };
            let out = world.agents[i].gossip_round(pool, &mut rng);
            for o in out {
                self.send(r, id, o.to, o.rumor, MsgKind::Gossip);
            }
        }
    }

    fn anti_entropy(&mut self, r: Round) {
        for i in 0..self.cfg.n_agents {
            if !self.world.live[i] {
                continue;
            }
            let id = AgentId(i as u32);
            let mut rng = derive_rng(self.cfg.seed, i as u64, r, Stream::AntiEntropy);
            let peer = {
                let pool: &IndexSet<AgentId> = match &self.world.adjacency {
                    Some(adj) => &adj[i],
                    None if self.membership => self.world.agents[i].alive_peers().expect("membership enabled"),
                    None => &self.world.live_pool,
                };
                let candidates = pool.len() - usize::from(pool.contains(&id));
                if candidates == 0 {
                    continue;
                }
                loop {
                    let p = pool[rng.random_range(0..pool.len())];
                    if p != id {
                        break p;
                    }
                }
            };
            self.sent += 1;
            let lost = self.cfg.loss_p > 0.0 && rng.random::<f64>() < self.cfg.loss_p;
            let ok = !lost && self.world.live[peer.index()] && self.world.reachable(id, peer);
            let (mut pulled_a, mut pulled_b) = (0, 0);
            if ok {
                self.sent += 1;
                let (a, b) = two_mut(&mut self.world.agents, i, peer.index());
                let report = anti_entropy_exchange(a, b, r);
                pulled_a = report.pulled_by_a.len();
                pulled_b = report.pulled_by_b.len();
            }
            self.sink.emit(TraceEvent::Ae(AeEvent {
                round: r,
                a: id,
                b: peer,
                ok,
                pulled_a,
                pulled_b,
            }));
            if ok {
                self.drain(id, r);
                self.drain(peer, r);
            }
        }
    }

    fn averaging(&mut self, r: Round) {
        let Some(avg) = &self.cfg.workload.averaging else {
            return;
        };
        if r < avg.start_round || r >= avg.start_round + avg.steps {
            return;
        }
        if !self.averaging_started {
            self.averaging_started = true;
            let values: Vec<f64> = match &avg.init {
                InitialValues::Values(v) => v.clone(),
                InitialValues::Uniform(lo, hi) => {
                    let mut rng = derive_rng(self.cfg.seed, NETWORK_NODE, r, Stream::Workload);
                    (0..self.cfg.n_agents)
                        .map(|_| if hi > lo { rng.random_range(*lo..*hi) } else { *lo })
                        .collect()
                }
            };
            for (a, v) in self.world.agents.iter_mut().zip(&values) {
                a.set_avg_value(Some(*v));
            }
            self.sink.emit(TraceEvent::AvgInit(AvgInit { round: r, values }));
        }
        let mut rng = derive_rng(self.cfg.seed, NETWORK_NODE, r, Stream::Averaging);
        let mut order: Vec<AgentId> = (0..self.cfg.n_agents as u32)
            .map(AgentId)
            .filter(|a| self.world.live[a.index()])
            .collect();
        order.shuffle(&mut rng);
        for pair in order.chunks_exact(2) {
            let (a, b) = (pair[0], pair[1]);
            let xa = self.world.agents[a.index()].avg_value().unwrap_or(0.0);
            let xb = self.world.agents[b.index()].avg_value().unwrap_or(0.0);
            self.sent += 1;
            let lost = !self.world.reachable(a, b)
                || (self.cfg.loss_p > 0.0 && rng.random::<f64>() < self.cfg.loss_p);
            let (va, vb) = if lost {
                (xa, xb)
            } else {
                self.sent += 1;
                averaging_step(xa, xb).expect("averaged values stay finite")
            };
            self.world.agents[a.index()].set_avg_value(Some(va));
            self.world.agents[b.index()].set_avg_value(Some(vb));
            self.sink.emit(TraceEvent::Avg(AvgEvent {
                round: r,
                a,
                b,
                lost,
                value_a: va,
                value_b: vb,
            }));
        }
    }

    fn round_end(&mut self, r: Round) {
        let live = self.world.live_pool.len();
        for (id, t) in &self.tracked {
            if t.created > r {
                continue;
            }
            let holders = self
                .world
                .live_agents()
                .filter(|a| a.holds(&t.topic, t.version))
                .count();
            let cov = if live == 0 { 0.0 } else { holders as f64 / live as f64 };
            self.live_stats.coverage.entry(*id).or_default().push(cov);
        }
        self.live_stats.sent_per_round.push(self.sent);
        self.sink.emit(TraceEvent::RoundEnd(RoundEnd {
            round: r,
            sent: self.sent,
            live,
        }));
    }

    fn finish(mut self) -> RunOutput {
        let live_agents: Vec<&Agent> = self.world.live_agents().collect();
        let stores: BTreeSet<String> = live_agents.iter().map(|a| a.store().to_canonical_json()).collect();
        let mut tasks = BTreeMap::new();
        for id in self.cfg.task_ids() {
            let views: Vec<_> = live_agents.iter().map(|a| a.board().get(&id)).collect();
            let known_by = views.iter().filter(|v| v.is_some()).count();
            let first = views.first().copied().flatten();
            let agreed = !views.is_empty()
                && views.iter().all(|v| {
                    v.is_some_and(|ad| {
                        first.is_some_and(|f| ad.state == f.state && ad.claimant == f.claimant && ad.epoch == f.epoch)
                    })
                });
            tasks.insert(
                id,
                TaskFinal {
                    agreed,
                    state: first.map(|f| f.state),
                    claimant: first.and_then(|f| f.claimant),
                    epoch: first.map_or(0, |f| f.epoch),
                    known_by,
                },
            );
        }
        let end = EndRecord {
            rounds: self.cfg.rounds,
            live: live_agents.len(),
            distinct_stores: stores.len(),
            tasks,
        };
        self.sink.emit(TraceEvent::End(end));
        let Sink { builder, events } = self.sink;
        let metrics = builder.finish().expect("engine traces are complete");
        RunOutput {
            metrics,
            trace: events.map(Trace::new),
            world: self.world,
            live: self.live_stats,
        }
    }
}

fn two_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = v.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}
