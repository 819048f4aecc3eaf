//! Run traces: one JSON record per line, hashed with SHA-256.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::coordination::TaskState;
use crate::membership::MemberStatus;
use crate::model::{AgentId, Priority, Round, RumorId, Version};
use crate::node::TaskAction;
use crate::sim::config::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub n_agents: usize,
    pub rounds: Round,
    pub seed: u64,
    pub mode: Mode,
    pub fanout: usize,
    pub loss_p: f64,
    pub ttl_hops: u32,
    pub adversaries: Vec<AgentId>,
    pub zones: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginEvent {
    pub round: Round,
    pub node: AgentId,
    pub rumor_id: RumorId,
    pub topic: String,
    pub version: Version,
    pub priority: Priority,
    pub ttl: u32,
    /// Coverage is measured for tracked rumors.
    pub tracked: bool,
    pub adversarial: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MsgKind {
    Gossip,
    Broadcast,
}

/// Final word on one message: either what the receiver did with it or why
/// it never arrived.
pub const FATE_LOST: &str = "lost";
pub const FATE_DEAD: &str = "dead";
pub const FATE_PARTITIONED: &str = "partitioned";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsgEvent {
    pub sent: Round,
    pub round: Round,
    pub from: AgentId,
    pub to: AgentId,
    pub kind: MsgKind,
    pub rumor_id: RumorId,
    pub topic: String,
    pub ttl: u32,
    pub effect: String,
}

impl MsgEvent {
    pub fn delivered(&self) -> bool {
        !matches!(self.effect.as_str(), FATE_LOST | FATE_DEAD | FATE_PARTITIONED)
    }

    pub fn duplicate(&self) -> bool {
        self.effect.split('+').any(|e| e == "duplicate_dropped")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldEvent {
    pub round: Round,
    pub node: AgentId,
    pub rumor_id: RumorId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberEvent {
    pub round: Round,
    pub node: AgentId,
    pub peer: AgentId,
    pub old_status: MemberStatus,
    pub new_status: MemberStatus,
    pub incarnation: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateEvent {
    pub round: Round,
    pub node: AgentId,
    pub rumor_id: RumorId,
    pub credible: bool,
    pub source_count: usize,
    pub weighted_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub round: Round,
    pub node: AgentId,
    pub task_id: String,
    pub epoch: u32,
    pub action: TaskAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEvent {
    pub round: Round,
    pub node: AgentId,
    pub target: AgentId,
    pub acked: bool,
    pub messages: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeEvent {
    pub round: Round,
    pub a: AgentId,
    pub b: AgentId,
    /// False when the exchange was lost or could not reach `b`.
    pub ok: bool,
    pub pulled_a: usize,
    pub pulled_b: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChurnRecord {
    pub round: Round,
    pub action: String,
    pub targets: Vec<AgentId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvgInit {
    pub round: Round,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvgEvent {
    pub round: Round,
    pub a: AgentId,
    pub b: AgentId,
    pub lost: bool,
    /// Value both ends hold afterwards (unchanged inputs when lost).
    pub value_a: f64,
    pub value_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitEvent {
    pub round: Round,
    pub node: AgentId,
    pub zone: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundEnd {
    pub round: Round,
    pub sent: u64,
    pub live: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFinal {
    /// Every live agent has the same view of the task.
    pub agreed: bool,
    pub state: Option<TaskState>,
    pub claimant: Option<AgentId>,
    pub epoch: u32,
    /// Live agents that know the task at all.
    pub known_by: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndRecord {
    pub rounds: Round,
    pub live: usize,
    /// Number of distinct store serializations among live agents.
    pub distinct_stores: usize,
    pub tasks: BTreeMap<String, TaskFinal>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum TraceEvent {
    Run(RunHeader),
    Origin(OriginEvent),
    Msg(MsgEvent),
    Hold(HoldEvent),
    Member(MemberEvent),
    Gate(GateEvent),
    Task(TaskEvent),
    Probe(ProbeEvent),
    Ae(AeEvent),
    Churn(ChurnRecord),
    AvgInit(AvgInit),
    Avg(AvgEvent),
    Visit(VisitEvent),
    RoundEnd(RoundEnd),
    End(EndRecord),
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

/// Incremental SHA-256 over the line-delimited JSON form.
#[derive(Clone, Default)]
pub struct TraceHasher {
    hasher: Sha256,
    buf: Vec<u8>,
}

impl TraceHasher {
    /// Hash one event and return its serialized line (with newline).
    pub fn update(&mut self, ev: &TraceEvent) -> &[u8] {
        self.buf.clear();
        serde_json::to_writer(&mut self.buf, ev).expect("trace events serialize");
        self.buf.push(b'\n');
        self.hasher.update(&self.buf);
        &self.buf
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(events: Vec<TraceEvent>) -> Self {
        Trace { events }
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }

    pub fn header(&self) -> Option<&RunHeader> {
        self.events.iter().find_map(|e| match e {
            TraceEvent::Run(h) => Some(h),
            _ => None,
        })
    }

    pub fn end(&self) -> Option<&EndRecord> {
        match self.events.last() {
            Some(TraceEvent::End(e)) => Some(e),
            _ => None,
        }
    }

    /// Origination records of rumors whose coverage is measured.
    pub fn tracked(&self) -> impl Iterator<Item = &OriginEvent> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Origin(o) if o.tracked => Some(o),
            _ => None,
        })
    }

    pub fn hash(&self) -> String {
        let mut h = TraceHasher::default();
        for e in &self.events {
            h.update(e);
        }
        h.finish()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut h = TraceHasher::default();
        for e in &self.events {
            w.write_all(h.update(e))?;
        }
        w.flush()
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ev = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            events.push(ev);
        }
        Ok(Trace { events })
    }
}
