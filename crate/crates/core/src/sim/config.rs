//! Scenario files: everything a run needs, validated before the first round.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{Priority, Round};
use crate::node::{default_tombstone_grace, default_ttl_hops, Behavior, ProtocolParams};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn from_json(e: &serde_json::Error) -> Self {
        ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

/// Whether rumors spread epidemically or are sent straight from the origin
/// to every peer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Gossip,
    Broadcast,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gossip" => Ok(Mode::Gossip),
            "broadcast" => Ok(Mode::Broadcast),
            other => Err(format!("unknown mode {other:?} (expected gossip or broadcast)")),
        }
    }
}

/// Delivery delay in whole rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Latency {
    Constant(u64),
    Uniform(u64, u64),
}

impl Default for Latency {
    fn default() -> Self {
        Latency::Constant(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ChurnAction {
    Kill { targets: Vec<u32> },
    Revive { targets: Vec<u32> },
    /// Cut `targets` off from everyone else.
    Partition { targets: Vec<u32> },
    Heal,
    /// Kill whichever agent is currently working on `task`.
    KillClaimant { task: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub round: Round,
    #[serde(flatten)]
    pub action: ChurnAction,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    pub agents: Vec<u32>,
    pub behavior: Behavior,
    /// Rumors originated per active round (fabricate and flood).
    #[serde(default = "one")]
    pub rate: u32,
    #[serde(default)]
    pub start_round: Round,
    #[serde(default)]
    pub end_round: Option<Round>,
    #[serde(default = "default_false_topic")]
    pub topic: String,
    #[serde(default = "default_false_payload")]
    pub payload: String,
}

fn default_false_topic() -> String {
    "claim/fabricated".into()
}

fn default_false_payload() -> String {
    "false".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RumorSpec {
    pub round: Round,
    /// Every listed agent originates its own copy of the claim.
    pub origins: Vec<u32>,
    pub topic: String,
    #[serde(default)]
    pub payload: String,
    #[serde(default)]
    pub priority: Priority,
    #[serde(default)]
    pub ttl: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StoreOp {
    Write { key: String, value: String },
    Delete { key: String },
    Increment { counter: String, amount: i64 },
    SetAdd { set: String, elem: String },
    SetRemove { set: String, elem: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreOpSpec {
    pub round: Round,
    pub agent: u32,
    #[serde(flatten)]
    pub op: StoreOp,
}

/// Random writes, deletes and increments drawn from the workload stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomStore {
    /// Operations happen in rounds `[0, until_round)`.
    pub until_round: Round,
    pub ops_per_round: u32,
    pub keys: u32,
    #[serde(default = "one")]
    pub counters: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub round: Round,
    pub id: String,
    pub origin: u32,
    #[serde(default)]
    pub descriptor: BTreeSet<String>,
    #[serde(default)]
    pub priority: Priority,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    /// Agents this profile applies to; empty means all agents.
    #[serde(default)]
    pub agents: Vec<u32>,
    pub capabilities: BTreeSet<String>,
    #[serde(default)]
    pub load: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWorkload {
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    /// Shorthand: `count` tasks `t0..` announced at `round`, origins spread
    /// round-robin over the agents.
    #[serde(default)]
    pub generate: Option<GenerateTasks>,
    #[serde(default)]
    pub profiles: Vec<ProfileSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateTasks {
    pub count: u32,
    pub round: Round,
    #[serde(default)]
    pub descriptor: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialValues {
    Uniform(f64, f64),
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragingWorkload {
    pub init: InitialValues,
    #[serde(default)]
    pub start_round: Round,
    /// Matching steps: each pairs up the live agents at random.
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneWorkload {
    pub zones: u32,
    pub drones: Vec<u32>,
    /// A zone with no intent newer than this many rounds counts as uncovered.
    pub silence_rounds: u64,
    /// Rounds a drone spends in a zone before moving on.
    pub dwell_rounds: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    #[serde(default)]
    pub rumors: Vec<RumorSpec>,
    #[serde(default)]
    pub store_ops: Vec<StoreOpSpec>,
    #[serde(default)]
    pub random_store: Option<RandomStore>,
    #[serde(default)]
    pub tasks: Option<TaskWorkload>,
    #[serde(default)]
    pub averaging: Option<AveragingWorkload>,
    #[serde(default)]
    pub zones: Option<ZoneWorkload>,
    /// Every agent publishes its load every this many rounds.
    #[serde(default)]
    pub load_every: Option<u64>,
}

fn default_value_ttl() -> Option<u64> {
    Some(64)
}

/// Protocol knobs; unset fields take population-dependent defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolKnobs {
    #[serde(default)]
    pub ttl_hops: Option<u32>,
    #[serde(default)]
    pub rate_limit: Option<u32>,
    #[serde(default)]
    pub hot_capacity: Option<usize>,
    #[serde(default)]
    pub k_confirmations: Option<usize>,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub trust_default: Option<f64>,
    #[serde(default)]
    pub trust_alpha: Option<f64>,
    #[serde(default)]
    pub suspicion_timeout: Option<u64>,
    #[serde(default)]
    pub proxy_count: Option<usize>,
    #[serde(default)]
    pub tombstone_grace: Option<u64>,
    /// `null` disables value expiry.
    #[serde(default = "default_value_ttl")]
    pub value_ttl: Option<u64>,
    #[serde(default)]
    pub decay_rate: Option<f64>,
    #[serde(default)]
    pub load_threshold: Option<f64>,
    #[serde(default)]
    pub task_load: Option<f64>,
    #[serde(default)]
    pub work_rounds: Option<u64>,
}

impl Default for ProtocolKnobs {
    fn default() -> Self {
        ProtocolKnobs {
            ttl_hops: None,
            rate_limit: None,
            hot_capacity: None,
            k_confirmations: None,
            theta: None,
            trust_default: None,
            trust_alpha: None,
            suspicion_timeout: None,
            proxy_count: None,
            tombstone_grace: None,
            value_ttl: default_value_ttl(),
            decay_rate: None,
            load_threshold: None,
            task_load: None,
            work_rounds: None,
        }
    }
}

fn default_fanout() -> usize {
    3
}

fn default_true() -> bool {
    true
}

fn default_ae_period() -> u64 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_agents: usize,
    #[serde(default = "default_fanout")]
    pub fanout: usize,
    pub rounds: Round,
    #[serde(default)]
    pub loss_p: f64,
    #[serde(default)]
    pub latency: Latency,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub churn: Vec<ChurnEvent>,
    #[serde(default)]
    pub adversaries: Vec<AdversaryConfig>,
    #[serde(default)]
    pub workload: Workload,
    /// Optional adjacency lists; without them any agent may reach any other.
    #[serde(default)]
    pub topology: Option<Vec<Vec<u32>>>,
    /// SWIM probing and membership-driven peer selection. When off, peers
    /// are drawn from the set of agents that are actually up.
    #[serde(default = "default_true")]
    pub membership: bool,
    /// Rounds between anti-entropy exchanges; 0 disables them.
    #[serde(default = "default_ae_period")]
    pub anti_entropy_period: u64,
    #[serde(default)]
    pub protocol: ProtocolKnobs,
}

impl ScenarioConfig {
    /// A lossless, churn-free run with one critical rumor from agent 0.
    pub fn single_rumor(n_agents: usize, rounds: Round, seed: u64) -> Self {
        ScenarioConfig {
            n_agents,
            fanout: 3,
            rounds,
            loss_p: 0.0,
            latency: Latency::default(),
            seed,
            mode: Mode::Gossip,
            churn: Vec::new(),
            adversaries: Vec::new(),
            workload: Workload {
                rumors: vec![RumorSpec {
                    round: 0,
                    origins: vec![0],
                    topic: "x".into(),
                    payload: "X".into(),
                    priority: Priority::Critical,
                    ttl: None,
                }],
                ..Workload::default()
            },
            topology: None,
            membership: false,
            anti_entropy_period: 0,
            protocol: ProtocolKnobs::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ConfigError::from_json(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn params(&self) -> ProtocolParams {
        let n = self.n_agents;
        let p = &self.protocol;
        let base = ProtocolParams::for_population(n);
        ProtocolParams {
            fanout: self.fanout,
            ttl_hops: p.ttl_hops.unwrap_or_else(|| default_ttl_hops(n)),
            rate_limit: p.rate_limit,
            hot_capacity: p.hot_capacity.unwrap_or(base.hot_capacity),
            k_confirmations: p.k_confirmations.unwrap_or(base.k_confirmations),
            theta: p.theta.unwrap_or(base.theta),
            trust_default: p.trust_default.unwrap_or(base.trust_default),
            trust_alpha: p.trust_alpha.unwrap_or(base.trust_alpha),
            suspicion_timeout: p.suspicion_timeout.unwrap_or(base.suspicion_timeout),
            proxy_count: p.proxy_count.unwrap_or(base.proxy_count),
            tombstone_grace: p
                .tombstone_grace
                .unwrap_or_else(|| default_tombstone_grace(n, self.anti_entropy_period)),
            value_ttl: p.value_ttl,
            decay_rate: p.decay_rate.unwrap_or(base.decay_rate),
            load_threshold: p.load_threshold.unwrap_or(base.load_threshold),
            task_load: p.task_load.unwrap_or(base.task_load),
            work_rounds: p.work_rounds.unwrap_or(base.work_rounds),
        }
    }

    /// Check every field before anything runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.n_agents;
        if n == 0 {
            return Err(ConfigError::invalid("n_agents", "must be at least 1"));
        }
        if n > u32::MAX as usize {
            return Err(ConfigError::invalid("n_agents", "too large"));
        }
        if !(0.0..=1.0).contains(&self.loss_p) {
            return Err(ConfigError::invalid(
                "loss_p",
                format!("{} is not a probability in [0, 1]", self.loss_p),
            ));
        }
        match self.latency {
            Latency::Constant(0) => return Err(ConfigError::invalid("latency", "must be at least 1 round")),
            Latency::Uniform(lo, hi) if lo == 0 || hi < lo => {
                return Err(ConfigError::invalid("latency", format!("bad uniform range [{lo}, {hi}]")))
            }
            _ => {}
        }
        let agent = |field: String, id: u32| -> Result<(), ConfigError> {
            if (id as usize) < n {
                Ok(())
            } else {
                Err(ConfigError::invalid(field, format!("agent {id} is not below n_agents={n}")))
            }
        };
        for (i, c) in self.churn.iter().enumerate() {
            let field = format!("churn[{i}].targets");
            match &c.action {
                ChurnAction::Kill { targets } | ChurnAction::Revive { targets } | ChurnAction::Partition { targets } => {
                    for &t in targets {
                        agent(field.clone(), t)?;
                    }
                }
                ChurnAction::Heal => {}
                ChurnAction::KillClaimant { task } => {
                    if !self.task_ids().contains(task) {
                        return Err(ConfigError::invalid(
                            format!("churn[{i}].task"),
                            format!("no task {task:?} in the workload"),
                        ));
                    }
                }
            }
            if c.round >= self.rounds {
                return Err(ConfigError::invalid(format!("churn[{i}].round"), "beyond the run horizon"));
            }
        }
        for (i, a) in self.adversaries.iter().enumerate() {
            for &t in &a.agents {
                agent(format!("adversaries[{i}].agents"), t)?;
            }
        }
        let w = &self.workload;
        for (i, r) in w.rumors.iter().enumerate() {
            if r.origins.is_empty() {
                return Err(ConfigError::invalid(format!("workload.rumors[{i}].origins"), "empty"));
            }
            for &o in &r.origins {
                agent(format!("workload.rumors[{i}].origins"), o)?;
            }
            if r.topic.is_empty() {
                return Err(ConfigError::invalid(format!("workload.rumors[{i}].topic"), "empty"));
            }
            if r.round >= self.rounds {
                return Err(ConfigError::invalid(format!("workload.rumors[{i}].round"), "beyond the run horizon"));
            }
        }
        for (i, op) in w.store_ops.iter().enumerate() {
            agent(format!("workload.store_ops[{i}].agent"), op.agent)?;
            if let StoreOp::Increment { amount, .. } = op.op {
                if amount < 0 {
                    return Err(ConfigError::invalid(
                        format!("workload.store_ops[{i}].amount"),
                        "counters only grow",
                    ));
                }
            }
        }
        if let Some(rs) = &w.random_store {
            if rs.keys == 0 || rs.counters == 0 {
                return Err(ConfigError::invalid("workload.random_store", "needs at least one key and counter"));
            }
        }
        if let Some(t) = &w.tasks {
            let mut seen = BTreeSet::new();
            for (i, spec) in t.tasks.iter().enumerate() {
                agent(format!("workload.tasks.tasks[{i}].origin"), spec.origin)?;
                if !seen.insert(spec.id.clone()) {
                    return Err(ConfigError::invalid(
                        format!("workload.tasks.tasks[{i}].id"),
                        format!("duplicate task id {:?}", spec.id),
                    ));
                }
            }
            for (i, p) in t.profiles.iter().enumerate() {
                for &a in &p.agents {
                    agent(format!("workload.tasks.profiles[{i}].agents"), a)?;
                }
                if !(0.0..=1.0).contains(&p.load) {
                    return Err(ConfigError::invalid(format!("workload.tasks.profiles[{i}].load"), "must be in [0, 1]"));
                }
            }
        }
        if let Some(a) = &w.averaging {
            match &a.init {
                InitialValues::Uniform(lo, hi) if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                    return Err(ConfigError::invalid("workload.averaging.init", "bad uniform range"));
                }
                InitialValues::Values(v) if v.len() != n || v.iter().any(|x| !x.is_finite()) => {
                    return Err(ConfigError::invalid(
                        "workload.averaging.init",
                        format!("need {n} finite values"),
                    ));
                }
                _ => {}
            }
        }
        if let Some(z) = &w.zones {
            if z.zones == 0 {
                return Err(ConfigError::invalid("workload.zones.zones", "must be at least 1"));
            }
            if z.dwell_rounds == 0 {
                return Err(ConfigError::invalid("workload.zones.dwell_rounds", "must be at least 1"));
            }
            for &d in &z.drones {
                agent("workload.zones.drones".into(), d)?;
            }
        }
        if w.load_every == Some(0) {
            return Err(ConfigError::invalid("workload.load_every", "must be at least 1"));
        }
        if let Some(adj) = &self.topology {
            if adj.len() != n {
                return Err(ConfigError::invalid("topology", format!("{} rows for {n} agents", adj.len())));
            }
            for (i, row) in adj.iter().enumerate() {
                for &j in row {
                    agent(format!("topology[{i}]"), j)?;
                }
            }
        }
        let p = &self.protocol;
        if p.k_confirmations == Some(0) {
            return Err(ConfigError::invalid("protocol.k_confirmations", "must be at least 1"));
        }
        for (field, v) in [
            ("protocol.theta", p.theta),
            ("protocol.decay_rate", p.decay_rate),
        ] {
            if v.is_some_and(|x| !(x.is_finite() && x >= 0.0)) {
                return Err(ConfigError::invalid(field, "must be finite and non-negative"));
            }
        }
        for (field, v) in [
            ("protocol.trust_default", p.trust_default),
            ("protocol.trust_alpha", p.trust_alpha),
            ("protocol.load_threshold", p.load_threshold),
            ("protocol.task_load", p.task_load),
        ] {
            if v.is_some_and(|x| !(0.0..=1.0).contains(&x)) {
                return Err(ConfigError::invalid(field, "must be in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Ids of all tasks the workload will announce.
    pub fn task_ids(&self) -> BTreeSet<String> {
        let Some(t) = &self.workload.tasks else {
            return BTreeSet::new();
        };
        let mut ids: BTreeSet<String> = t.tasks.iter().map(|s| s.id.clone()).collect();
        if let Some(g) = &t.generate {
            ids.extend((0..g.count).map(|i| format!("t{i}")));
        }
        ids
    }

    /// Set one knob from its textual value, as used by sweeps. Nested
    /// knobs use dotted names such as `protocol.k_confirmations`.
    pub fn set_knob(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| ConfigError::invalid(key, "no such knob"))?;
        }
        *slot = parsed;
        let cfg: ScenarioConfig =
            serde_json::from_value(doc).map_err(|e| ConfigError::invalid(key, e.to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }
}
