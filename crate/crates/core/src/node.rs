//! A single agent: the protocol layers wired together behind one event
//! handler. Each agent owns all of its state; cross-agent effects only
//! travel through rumors and anti-entropy.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use indexmap::IndexSet;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coordination::{
    evaluate_claim, pick_uncovered_zone, AgentProfile, CoordinationError, IntentRecord,
    IntentRegistry, LoadBeliefs, TaskAd, TaskBoard, TaskState, ZoneId,
};
use crate::dissemination::{gossip_round, Effects, HotBuffer, Outgoing, RateLimiter};
use crate::membership::{MemberChange, MemberRecord, MembershipView, ProbePlan};
use crate::model::{next_version, AgentId, Payload, Priority, Round, Rumor, RumorId, Version};
use crate::store::{GCounter, LwwRecord, ORSet, Store, StoreError, Tag};
use crate::trust::{
    authenticity_gate, is_credible, ClaimKey, ConfirmationTracker, GateDecision, Outcome,
    TrustLedger, Verdict,
};

/// Protocol knobs shared by every agent in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub fanout: usize,
    pub ttl_hops: u32,
    pub rate_limit: Option<u32>,
    pub hot_capacity: usize,
    pub k_confirmations: usize,
    pub theta: f64,
    pub trust_default: f64,
    pub trust_alpha: f64,
    pub suspicion_timeout: u64,
    pub proxy_count: usize,
    pub tombstone_grace: u64,
    pub value_ttl: Option<u64>,
    pub decay_rate: f64,
    pub load_threshold: f64,
    pub task_load: f64,
    pub work_rounds: u64,
}

/// `ceil(log2 n)`, with 0 for `n <= 1`.
pub fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

pub fn default_ttl_hops(n: usize) -> u32 {
    ceil_log2(n) + 4
}

pub fn default_tombstone_grace(n: usize, anti_entropy_period: u64) -> u64 {
    4 * (u64::from(ceil_log2(n)) + anti_entropy_period)
}

impl ProtocolParams {
    pub fn for_population(n: usize) -> Self {
        ProtocolParams {
            fanout: 3,
            ttl_hops: default_ttl_hops(n),
            rate_limit: None,
            hot_capacity: 4096,
            k_confirmations: 1,
            theta: 1.5,
            trust_default: 0.5,
            trust_alpha: 0.1,
            suspicion_timeout: 3,
            proxy_count: 3,
            tombstone_grace: default_tombstone_grace(n, 10),
            value_ttl: Some(64),
            decay_rate: 0.0,
            load_threshold: 0.8,
            task_load: 0.25,
            work_rounds: 5,
        }
    }
}

/// How an agent behaves on the wire. Anything but `Honest` is an
/// adversary used by scenarios.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    #[default]
    Honest,
    Fabricate,
    Tamper,
    Flood,
}

impl Behavior {
    pub fn is_adversarial(self) -> bool {
        self != Behavior::Honest
    }
}

/// What a rumor topic addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopicKind<'a> {
    Member(&'a str),
    Task(&'a str),
    Intent(&'a str),
    Load(&'a str),
    Counter(&'a str),
    Set(&'a str),
    Delete(&'a str),
    Value(&'a str),
}

impl<'a> TopicKind<'a> {
    pub fn classify(topic: &'a str) -> Self {
        let prefixes: [(&str, fn(&'a str) -> TopicKind<'a>); 7] = [
            ("member/", TopicKind::Member),
            ("task/", TopicKind::Task),
            ("intent/", TopicKind::Intent),
            ("load/", TopicKind::Load),
            ("ctr/", TopicKind::Counter),
            ("set/", TopicKind::Set),
            ("del/", TopicKind::Delete),
        ];
        for (p, make) in prefixes {
            if let Some(rest) = topic.strip_prefix(p) {
                return make(rest);
            }
        }
        TopicKind::Value(topic)
    }
}

/// The key a topic's version high-water mark is tracked under. Deletes and
/// writes of the same store key share one mark.
pub fn state_key(topic: &str) -> &str {
    match TopicKind::classify(topic) {
        TopicKind::Delete(k) => k,
        _ => topic,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskAction {
    Claim,
    Abandon,
    Done,
    Reannounce,
}

impl fmt::Display for TaskAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskAction::Claim => "claim",
            TaskAction::Abandon => "abandon",
            TaskAction::Done => "done",
            TaskAction::Reannounce => "reannounce",
        })
    }
}

/// Side effects reported to the simulator for tracing.
#[derive(Clone, Debug, PartialEq)]
pub enum AgentEvent {
    HighWater { key: String, version: Version },
    Member(MemberChange),
    Gate { rumor_id: RumorId, decision: GateDecision },
    Task { task_id: String, epoch: u32, action: TaskAction },
    Originated { rumor_id: RumorId, topic: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSnapshot {
    pub agent: AgentId,
    pub load: f64,
}

#[derive(Clone, Debug)]
struct HeldRumor {
    rumor: Rumor,
    from: AgentId,
    since: Round,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Work {
    epoch: u32,
    finish_round: Round,
}

/// Full CRDT state handed over during anti-entropy.
#[derive(Clone, Debug, Default)]
pub struct CrdtSnapshot {
    pub counters: BTreeMap<String, GCounter>,
    pub sets: BTreeMap<String, ORSet>,
    pub board: TaskBoard,
}

pub type RumorFilter = Box<dyn Fn(&Rumor) -> bool + Send + Sync>;

pub struct Agent {
    id: AgentId,
    params: ProtocolParams,
    behavior: Behavior,
    clock: Version,
    next_seq: u64,
    next_tag: u64,
    buffer: HotBuffer,
    limiter: RateLimiter,
    seen: HashSet<RumorId>,
    held: BTreeMap<ClaimKey, Vec<HeldRumor>>,
    confirmations: ConfirmationTracker<ClaimKey>,
    credible_claims: HashSet<ClaimKey>,
    trust: TrustLedger,
    store: Store,
    high_water: BTreeMap<String, Version>,
    value_sources: BTreeMap<String, BTreeSet<AgentId>>,
    view: Option<MembershipView>,
    own_suspicions: BTreeSet<AgentId>,
    board: TaskBoard,
    announced: BTreeSet<String>,
    work: BTreeMap<String, Work>,
    profile: AgentProfile,
    intents: IntentRegistry,
    beliefs: LoadBeliefs,
    avg_value: Option<f64>,
    filter: Option<RumorFilter>,
    events: Vec<AgentEvent>,
}

impl fmt::Debug for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Agent")
            .field("id", &self.id)
            .field("clock", &self.clock)
            .field("buffered", &self.buffer.len())
            .field("records", &self.store.records.len())
            .finish_non_exhaustive()
    }
}

impl Agent {
    pub fn new(id: AgentId, params: ProtocolParams) -> Self {
        Agent {
            id,
            behavior: Behavior::Honest,
            clock: Version {
                lamport: 0,
                author: id,
            },
            next_seq: 0,
            next_tag: 0,
            buffer: HotBuffer::new(params.hot_capacity),
            limiter: RateLimiter::new(params.rate_limit),
            seen: HashSet::new(),
            held: BTreeMap::new(),
            confirmations: ConfirmationTracker::new(id),
            credible_claims: HashSet::new(),
            trust: TrustLedger::new(params.trust_default, params.trust_alpha),
            store: Store::new(),
            high_water: BTreeMap::new(),
            value_sources: BTreeMap::new(),
            view: None,
            own_suspicions: BTreeSet::new(),
            board: TaskBoard::default(),
            announced: BTreeSet::new(),
            work: BTreeMap::new(),
            profile: AgentProfile::default(),
            intents: IntentRegistry::default(),
            beliefs: LoadBeliefs::default(),
            avg_value: None,
            filter: None,
            events: Vec::new(),
            params,
        }
    }

    /// Enable SWIM membership with every listed agent initially alive.
    pub fn with_membership(mut self, members: impl IntoIterator<Item = AgentId>) -> Self {
        self.view = Some(MembershipView::with_members(self.id, members));
        self
    }

    pub fn with_behavior(mut self, behavior: Behavior) -> Self {
        self.behavior = behavior;
        self
    }

    pub fn with_profile(mut self, profile: AgentProfile) -> Self {
        self.profile = profile;
        self
    }

    /// Install a content filter; rumors it rejects are dropped on receipt.
    pub fn with_filter(mut self, filter: RumorFilter) -> Self {
        self.filter = Some(filter);
        self
    }

    pub fn id(&self) -> AgentId {
        self.id
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn clock(&self) -> Version {
        self.clock
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn view(&self) -> Option<&MembershipView> {
        self.view.as_ref()
    }

    pub fn board(&self) -> &TaskBoard {
        &self.board
    }

    pub fn profile(&self) -> &AgentProfile {
        &self.profile
    }

    pub fn intents(&self) -> &IntentRegistry {
        &self.intents
    }

    pub fn beliefs(&self) -> &LoadBeliefs {
        &self.beliefs
    }

    pub fn trust(&self) -> &TrustLedger {
        &self.trust
    }

    pub fn buffer(&self) -> &HotBuffer {
        &self.buffer
    }

    pub fn avg_value(&self) -> Option<f64> {
        self.avg_value
    }

    pub fn set_avg_value(&mut self, v: Option<f64>) {
        self.avg_value = v;
    }

    pub fn confirmations(&self, rumor: &Rumor) -> usize {
        self.confirmations.count(&ClaimKey::of(rumor))
    }

    pub fn is_working_on(&self, task_id: &str) -> bool {
        self.work.contains_key(task_id)
    }

    pub fn working_on(&self) -> impl Iterator<Item = &str> {
        self.work.keys().map(String::as_str)
    }

    pub fn take_events(&mut self) -> Vec<AgentEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn high_water(&self, key: &str) -> Option<Version> {
        self.high_water.get(key).copied()
    }

    /// Whether this agent has adopted `topic` at `version` or newer.
    pub fn holds(&self, topic: &str, version: Version) -> bool {
        self.high_water(state_key(topic)).is_some_and(|hw| hw >= version)
    }

    fn bump_high_water(&mut self, key: &str, version: Version) {
        let raised = match self.high_water.get_mut(key) {
            Some(hw) if *hw >= version => false,
            Some(hw) => {
                *hw = version;
                true
            }
            None => {
                self.high_water.insert(key.to_string(), version);
                true
            }
        };
        if raised {
            self.events.push(AgentEvent::HighWater {
                key: key.to_string(),
                version,
            });
        }
    }

    fn observe_clock(&mut self, v: Version) {
        if v.lamport > self.clock.lamport {
            self.clock.lamport = v.lamport;
        }
    }

    /// Create, adopt and buffer a rumor originating here.
    pub fn originate(
        &mut self,
        topic: impl Into<String>,
        payload: impl Into<Payload>,
        priority: Priority,
        round: Round,
    ) -> Rumor {
        let ttl = self.params.ttl_hops;
        self.originate_with_ttl(topic, payload, priority, ttl, round)
    }

    /// Like [`Agent::originate`] with an explicit hop budget.
    pub fn originate_with_ttl(
        &mut self,
        topic: impl Into<String>,
        payload: impl Into<Payload>,
        priority: Priority,
        ttl_hops: u32,
        round: Round,
    ) -> Rumor {
        let topic = topic.into();
        let observed = self.high_water(state_key(&topic)).unwrap_or_default();
        let version = next_version(self.clock, observed);
        self.clock = version;
        let rumor = Rumor::new(
            RumorId {
                origin: self.id,
                seq: self.next_seq,
            },
            topic,
            payload,
            version,
            priority,
            ttl_hops,
            round,
        );
        self.next_seq += 1;
        self.seen.insert(rumor.rumor_id);
        self.events.push(AgentEvent::Originated {
            rumor_id: rumor.rumor_id,
            topic: rumor.topic.clone(),
        });
        let key = ClaimKey::of(&rumor);
        self.credible_claims.insert(key);
        self.apply_rumor(&rumor, None, round)
            .expect("locally built rumors are well formed");
        if rumor.ttl_hops > 0 {
            self.buffer.insert(rumor.clone(), None);
        }
        rumor
    }

    pub fn write(&mut self, key: &str, value: impl Into<Payload>, round: Round) -> Rumor {
        self.originate(key, value, Priority::Normal, round)
    }

    /// Tombstone `key`; legal even if the key was never seen.
    pub fn delete(&mut self, key: &str, round: Round) -> Rumor {
        self.originate(format!("del/{key}"), Payload::default(), Priority::Normal, round)
    }

    pub fn increment(&mut self, counter: &str, amount: i64, round: Round) -> Result<Rumor, StoreError> {
        let mut c = self.store.counter(counter).cloned().unwrap_or_default();
        c.increment(self.id, amount)?;
        self.store.merge_counter(counter, &c);
        Ok(self.originate(format!("ctr/{counter}"), to_payload(&c), Priority::Normal, round))
    }

    pub fn set_add(&mut self, set: &str, elem: &str, round: Round) -> Rumor {
        let mut s = self.store.set(set).cloned().unwrap_or_default();
        s.add(elem, Tag {
            agent: self.id,
            seq: self.next_tag,
        });
        self.next_tag += 1;
        self.store.merge_set(set, &s);
        self.originate(format!("set/{set}"), to_payload(&s), Priority::Normal, round)
    }

    pub fn set_remove(&mut self, set: &str, elem: &str, round: Round) -> Rumor {
        let mut s = self.store.set(set).cloned().unwrap_or_default();
        s.remove(elem);
        self.store.merge_set(set, &s);
        self.originate(format!("set/{set}"), to_payload(&s), Priority::Normal, round)
    }

    pub fn announce_task(
        &mut self,
        task_id: &str,
        descriptor: BTreeSet<String>,
        priority: Priority,
        round: Round,
    ) -> Result<Rumor, CoordinationError> {
        if !self.announced.insert(task_id.to_string()) {
            return Err(CoordinationError::DuplicateTask(task_id.to_string()));
        }
        let announced = next_version(self.clock, self.clock);
        let ad = TaskAd::available(task_id, descriptor, priority, self.id, announced);
        Ok(self.originate(format!("task/{task_id}"), to_payload(&ad), Priority::Normal, round))
    }

    pub fn publish_load(&mut self, round: Round) -> Rumor {
        let snap = LoadSnapshot {
            agent: self.id,
            load: self.profile.load,
        };
        self.originate(format!("load/{}", self.id), to_payload(&snap), Priority::Routine, round)
    }

    /// Choose the next zone to work and announce the intent.
    pub fn choose_zone<R: Rng + ?Sized>(
        &mut self,
        zones: &[ZoneId],
        silence_rounds: u64,
        round: Round,
        rng: &mut R,
    ) -> Option<(ZoneId, Rumor)> {
        let zone = pick_uncovered_zone(&self.intents, zones, self.id, rng, round, silence_rounds)?;
        let intent = IntentRecord {
            agent: self.id,
            activity: "search".into(),
            zone,
            version: next_version(self.clock, self.clock),
            round,
        };
        self.profile.zone = Some(zone);
        let rumor = self.originate(
            format!("intent/{}", self.id),
            to_payload(&intent),
            Priority::Normal,
            round,
        );
        Some((zone, rumor))
    }

    /// Apply a credible rumor to local state. `Ok(true)` if anything changed.
    fn apply_rumor(
        &mut self,
        rumor: &Rumor,
        from: Option<AgentId>,
        round: Round,
    ) -> Result<bool, serde_json::Error> {
        self.observe_clock(rumor.version);
        let changed = match TopicKind::classify(&rumor.topic) {
            TopicKind::Value(key) => {
                let expiry = self.params.value_ttl.map(|t| rumor.created_round + t);
                let rec = LwwRecord {
                    expiry_round: expiry,
                    ..LwwRecord::live(key, rumor.payload.clone(), rumor.version)
                };
                self.apply_record(rec, from)
            }
            TopicKind::Delete(key) => {
                let rec = LwwRecord::tombstone(
                    key,
                    rumor.version,
                    rumor.created_round + self.params.tombstone_grace,
                );
                self.apply_record(rec, from)
            }
            TopicKind::Counter(name) => {
                let c: GCounter = serde_json::from_slice(rumor.payload.as_bytes())?;
                self.store.merge_counter(name, &c)
            }
            TopicKind::Set(name) => {
                let s: ORSet = serde_json::from_slice(rumor.payload.as_bytes())?;
                self.store.merge_set(name, &s)
            }
            TopicKind::Task(_) => {
                let ad: TaskAd = serde_json::from_slice(rumor.payload.as_bytes())?;
                self.board.merge(&ad)
            }
            TopicKind::Intent(_) => {
                let intent: IntentRecord = serde_json::from_slice(rumor.payload.as_bytes())?;
                self.intents.update_intent(intent)
            }
            TopicKind::Load(_) => {
                let snap: LoadSnapshot = serde_json::from_slice(rumor.payload.as_bytes())?;
                let ttl = self.params.value_ttl.unwrap_or(u64::MAX);
                self.beliefs
                    .observe(snap.agent, snap.load, rumor.created_round, ttl, self.params.decay_rate)
            }
            TopicKind::Member(_) => {
                let rec: MemberRecord = serde_json::from_slice(rumor.payload.as_bytes())?;
                match self.view.as_mut().and_then(|v| v.apply(rec, round)) {
                    Some(change) => {
                        self.events.push(AgentEvent::Member(change));
                        true
                    }
                    None => false,
                }
            }
        };
        self.bump_high_water(state_key(&rumor.topic), rumor.version);
        Ok(changed)
    }

    /// LWW apply with contradiction bookkeeping. Versions at or below the
    /// high-water mark are stale, even if the record was since purged.
    fn apply_record(&mut self, rec: LwwRecord, from: Option<AgentId>) -> bool {
        if self.high_water(&rec.key).is_some_and(|hw| hw >= rec.version) {
            return false;
        }
        let same_value = self
            .store
            .record(&rec.key)
            .is_some_and(|cur| cur.value == rec.value && cur.tombstone == rec.tombstone);
        let sources = self.value_sources.entry(rec.key.clone()).or_default();
        if same_value {
            sources.extend(from);
        } else {
            let losers = std::mem::replace(sources, from.into_iter().collect());
            for peer in losers {
                self.trust.update_trust(peer, Outcome::Contradicted);
            }
        }
        self.store.apply(rec)
    }

    fn confirm(&mut self, key: &ClaimKey, source: AgentId, round: Round) {
        let before = self.confirmations.count(key);
        let after = self.confirmations.record_confirmation(key, source, round);
        if after > before && self.credible_claims.contains(key) {
            self.trust.update_trust(source, Outcome::Corroborated);
        }
    }

    fn gate(&mut self, key: &ClaimKey, priority: Priority) -> GateDecision {
        let d = is_credible(
            &self.confirmations,
            &self.trust,
            key,
            self.params.k_confirmations,
            self.params.theta,
            priority,
        );
        if d.credible && self.credible_claims.insert(key.clone()) {
            let sources: Vec<AgentId> = self.confirmations.sources(key).collect();
            for s in sources {
                self.trust.update_trust(s, Outcome::Corroborated);
            }
        }
        d
    }

    fn adopt(&mut self, rumor: Rumor, from: AgentId, round: Round) -> Effects {
        match self.apply_rumor(&rumor, Some(from), round) {
            Err(_) => Effects::REJECTED,
            Ok(false) => Effects::STALE_DROPPED,
            Ok(true) if rumor.ttl_hops == 0 => Effects::ADOPTED | Effects::TTL_DROPPED,
            Ok(true) => {
                self.buffer.insert(rumor, Some(from));
                Effects::ADOPTED | Effects::BUFFERED
            }
        }
    }

    fn is_expired(&self, rumor: &Rumor, round: Round) -> bool {
        let life = match TopicKind::classify(&rumor.topic) {
            TopicKind::Value(_) => self.params.value_ttl,
            TopicKind::Delete(_) => Some(self.params.tombstone_grace),
            _ => None,
        };
        life.is_some_and(|t| rumor.created_round + t <= round)
    }

    /// Receive one rumor from `from`.
    pub fn handle_gossip(&mut self, rumor: Rumor, from: AgentId, round: Round) -> Effects {
        if rumor.validate().is_err() {
            return Effects::REJECTED;
        }
        if authenticity_gate(&rumor) == Verdict::Reject {
            return Effects::TRUST_HELD;
        }
        if self.filter.as_ref().is_some_and(|f| !f(&rumor)) {
            return Effects::FILTERED;
        }
        let key = ClaimKey::of(&rumor);
        if self.seen.contains(&rumor.rumor_id) {
            self.buffer.note_holder(&rumor.rumor_id, from);
            self.confirm(&key, from, round);
            return Effects::DUPLICATE_DROPPED | self.release_held(&key, rumor.priority, round);
        }
        if self.is_expired(&rumor, round) {
            return Effects::EXPIRED;
        }
        if !self.limiter.admit(&rumor, round) {
            return Effects::RATE_DROPPED;
        }
        self.seen.insert(rumor.rumor_id);
        self.confirm(&key, from, round);
        self.confirm(&key, rumor.rumor_id.origin, round);
        let decision = self.gate(&key, rumor.priority);
        if self.params.k_confirmations > 1 || !decision.credible {
            self.events.push(AgentEvent::Gate {
                rumor_id: rumor.rumor_id,
                decision,
            });
        }
        if !decision.credible {
            self.held.entry(key).or_default().push(HeldRumor {
                rumor,
                from,
                since: round,
            });
            return Effects::TRUST_HELD;
        }
        self.adopt(rumor, from, round)
    }

    fn release_held(&mut self, key: &ClaimKey, priority: Priority, round: Round) -> Effects {
        if !self.held.contains_key(key) {
            return Effects::empty();
        }
        let decision = self.gate(key, priority);
        if !decision.credible {
            return Effects::empty();
        }
        let mut fx = Effects::empty();
        for h in self.held.remove(key).unwrap_or_default() {
            self.events.push(AgentEvent::Gate {
                rumor_id: h.rumor.rumor_id,
                decision,
            });
            let adopted = self.adopt(h.rumor, h.from, round);
            if adopted.contains(Effects::ADOPTED) {
                fx.insert(adopted);
            }
        }
        fx
    }

    /// Accept a record offered by `peer` during anti-entropy, subject to
    /// the same credibility gate as gossip.
    pub fn accept_synced_record(&mut self, rec: LwwRecord, peer: AgentId, round: Round) -> bool {
        if self.high_water(&rec.key).is_some_and(|hw| hw >= rec.version)
            || rec.expiry_round.is_some_and(|e| e <= round)
        {
            return false;
        }
        let topic = if rec.tombstone {
            format!("del/{}", rec.key)
        } else {
            rec.key.clone()
        };
        let claim = ClaimKey {
            topic,
            payload: rec.value.clone(),
        };
        self.confirm(&claim, peer, round);
        self.confirm(&claim, rec.version.author, round);
        if !self.gate(&claim, Priority::Normal).credible {
            return false;
        }
        self.observe_clock(rec.version);
        let key = rec.key.clone();
        let version = rec.version;
        let changed = self.apply_record(rec, Some(peer));
        if changed {
            self.bump_high_water(&key, version);
        }
        changed
    }

    pub fn crdt_snapshot(&self) -> CrdtSnapshot {
        CrdtSnapshot {
            counters: self.store.counters.clone(),
            sets: self.store.sets.clone(),
            board: self.board.clone(),
        }
    }

    /// Merge a peer's CRDT state; returns the keys that changed here.
    pub fn merge_crdt_snapshot(&mut self, snap: CrdtSnapshot, _round: Round) -> Vec<String> {
        let mut changed = Vec::new();
        for (name, c) in &snap.counters {
            if self.store.merge_counter(name, c) {
                changed.push(format!("ctr/{name}"));
            }
        }
        for (name, s) in &snap.sets {
            if self.store.merge_set(name, s) {
                changed.push(format!("set/{name}"));
            }
        }
        for id in self.board.merge_board(&snap.board) {
            changed.push(format!("task/{id}"));
        }
        changed
    }

    /// One push round. Tampering adversaries corrupt every copy they send.
    /// Targets come from `pool`, or from the membership view when `None`.
    pub fn gossip_round<R: Rng + ?Sized>(&mut self, pool: Option<&IndexSet<AgentId>>, rng: &mut R) -> Vec<Outgoing> {
        let empty = IndexSet::new();
        let pool = pool.unwrap_or_else(|| self.view.as_ref().map_or(&empty, |v| v.alive_peers()));
        let mut out = gossip_round(&mut self.buffer, pool, self.id, self.params.fanout, rng);
        if self.behavior == Behavior::Tamper {
            for o in &mut out {
                o.rumor.authentic = false;
                o.rumor.payload = Payload::from("tampered");
            }
        }
        out
    }

    /// Gossip targets when membership is enabled.
    pub fn alive_peers(&self) -> Option<&IndexSet<AgentId>> {
        self.view.as_ref().map(|v| v.alive_peers())
    }

    pub fn probe_plan<R: Rng + ?Sized>(&self, rng: &mut R) -> ProbePlan {
        match &self.view {
            Some(v) => v.probe_round(rng, self.params.proxy_count),
            None => ProbePlan::default(),
        }
    }

    /// Direct and indirect probes of `target` both failed.
    pub fn probe_failed(&mut self, target: AgentId, round: Round) -> Option<Rumor> {
        let view = self.view.as_mut()?;
        let old = view.status(target)?;
        let rec = view.mark_suspect(target, round)?;
        self.own_suspicions.insert(target);
        self.events.push(AgentEvent::Member(MemberChange {
            peer: target,
            old_status: old,
            new_status: rec.status,
            incarnation: rec.incarnation,
        }));
        Some(self.originate(format!("member/{target}"), to_payload(&rec), Priority::Critical, round))
    }

    /// Start-of-round housekeeping: expiry sweep, held-rumor expiry,
    /// suspicion timeouts and refutation.
    pub fn tick(&mut self, round: Round) -> Vec<Rumor> {
        self.store.expire_sweep(round);
        let hold_for = u64::from(self.params.ttl_hops);
        let mut dropped = Vec::new();
        self.held.retain(|_, hs| {
            hs.retain(|h| {
                let keep = h.since + hold_for > round;
                if !keep {
                    dropped.push(h.rumor.rumor_id);
                }
                keep
            });
            !hs.is_empty()
        });
        // A later copy of an expired hold may be adopted afresh.
        for id in dropped {
            self.seen.remove(&id);
        }
        let mut out = Vec::new();
        let Some(view) = self.view.as_mut() else {
            return out;
        };
        let dead = view.expire_suspicions(round, self.params.suspicion_timeout);
        let refuted = view.refute(round);
        for rec in dead {
            self.events.push(AgentEvent::Member(MemberChange {
                peer: rec.id,
                old_status: crate::membership::MemberStatus::Suspect,
                new_status: rec.status,
                incarnation: rec.incarnation,
            }));
            // Only the prober that raised a suspicion announces the death;
            // everyone else reaches the same verdict on their own timer.
            if self.own_suspicions.remove(&rec.id) {
                out.push(self.originate(format!("member/{}", rec.id), to_payload(&rec), Priority::Critical, round));
            }
        }
        if let Some(rec) = refuted {
            out.push(self.announce_self(rec, round));
        }
        out
    }

    fn announce_self(&mut self, rec: MemberRecord, round: Round) -> Rumor {
        self.events.push(AgentEvent::Member(MemberChange {
            peer: self.id,
            old_status: crate::membership::MemberStatus::Suspect,
            new_status: rec.status,
            incarnation: rec.incarnation,
        }));
        self.originate(format!("member/{}", self.id), to_payload(&rec), Priority::Critical, round)
    }

    /// Back from downtime: rejoin at a fresh incarnation and drop any work
    /// that was in progress.
    pub fn revive(&mut self, round: Round) -> Option<Rumor> {
        for _ in std::mem::take(&mut self.work) {
            self.profile.load = (self.profile.load - self.params.task_load).max(0.0);
        }
        let rec = self.view.as_mut()?.bump_incarnation(round);
        Some(self.announce_self(rec, round))
    }

    fn change_load(&mut self, delta: f64) {
        self.profile.load = (self.profile.load + delta).clamp(0.0, 1.0);
    }

    /// Task lifecycle for one round: finish or abandon work, claim what we
    /// can, and re-announce tasks whose claimant we believe dead.
    pub fn coordination_tick(&mut self, round: Round) -> Vec<Rumor> {
        let mut out = Vec::new();
        let work: Vec<(String, Work)> = self.work.iter().map(|(k, w)| (k.clone(), *w)).collect();
        for (task_id, w) in work {
            let Some(ad) = self.board.get(&task_id).cloned() else {
                continue;
            };
            let mine = ad.epoch == w.epoch && ad.claimant == Some(self.id);
            if !mine || ad.state == TaskState::Available {
                self.work.remove(&task_id);
                self.change_load(-self.params.task_load);
                self.events.push(AgentEvent::Task {
                    task_id,
                    epoch: w.epoch,
                    action: TaskAction::Abandon,
                });
            } else if ad.state == TaskState::Done || round >= w.finish_round {
                self.work.remove(&task_id);
                self.change_load(-self.params.task_load);
                if ad.state == TaskState::Claimed {
                    let done = ad.done();
                    self.board.merge(&done);
                    self.events.push(AgentEvent::Task {
                        task_id: task_id.clone(),
                        epoch: done.epoch,
                        action: TaskAction::Done,
                    });
                    out.push(self.originate(format!("task/{task_id}"), to_payload(&done), Priority::Normal, round));
                }
            }
        }

        let open: Vec<TaskAd> = self
            .board
            .iter()
            .filter(|ad| ad.state == TaskState::Available && !self.work.contains_key(&ad.task_id))
            .cloned()
            .collect();
        for ad in open {
            let Some(claim) =
                evaluate_claim(&self.profile, self.id, self.clock, &ad, self.params.load_threshold)
            else {
                continue;
            };
            self.work.insert(
                ad.task_id.clone(),
                Work {
                    epoch: claim.epoch,
                    finish_round: round + self.params.work_rounds,
                },
            );
            self.change_load(self.params.task_load);
            self.events.push(AgentEvent::Task {
                task_id: ad.task_id.clone(),
                epoch: claim.epoch,
                action: TaskAction::Claim,
            });
            out.push(self.originate(format!("task/{}", ad.task_id), to_payload(&claim), Priority::Normal, round));
        }

        let Some(view) = self.view.as_ref() else {
            return out;
        };
        let dead = |id: AgentId| view.status(id) == Some(crate::membership::MemberStatus::Dead);
        let lowest = view.lowest_alive();
        let stranded: Vec<TaskAd> = self
            .board
            .iter()
            .filter(|ad| ad.state == TaskState::Claimed && ad.claimant.is_some_and(dead))
            .filter(|ad| ad.origin == self.id || (dead(ad.origin) && lowest == self.id))
            .cloned()
            .collect();
        for ad in stranded {
            let re = ad.reannounced();
            self.board.merge(&re);
            self.events.push(AgentEvent::Task {
                task_id: re.task_id.clone(),
                epoch: re.epoch,
                action: TaskAction::Reannounce,
            });
            out.push(self.originate(format!("task/{}", re.task_id), to_payload(&re), Priority::Normal, round));
        }
        out
    }
}

pub fn to_payload<T: Serialize>(value: &T) -> Payload {
    Payload(serde_json::to_vec(value).expect("protocol values always serialize"))
}
