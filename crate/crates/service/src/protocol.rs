//! Wire messages: JSON text frames `{type, session_id, seq, payload}`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use workbench_core::eval::EpisodeStats;
use workbench_core::record::RecordMode;
use workbench_core::region::{ActionRP, DoneReason, Event, Position, RegionGrid, RobotObservation};
use workbench_core::shared::HumanActionToken;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    Hello,
    Create,
    State,
    Action,
    StepResult,
    Finalize,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    #[serde(rename = "type")]
    pub kind: MessageType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default)]
    pub seq: u64,
    #[serde(default)]
    pub payload: Value,
}

impl Message {
    pub fn new(kind: MessageType, session_id: Option<String>, seq: u64, payload: impl Serialize) -> Self {
        Self {
            kind,
            session_id,
            seq,
            payload: serde_json::to_value(payload).expect("payload serializes"),
        }
    }

    pub fn error(session_id: Option<String>, seq: u64, body: ErrorBody) -> Self {
        Self::new(MessageType::Error, session_id, seq, body)
    }
}

/// Payload of `create`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub mode: Option<RecordMode>,
    /// Explicit region; takes precedence over `seed`.
    #[serde(default)]
    pub region: Option<RegionGrid>,
    /// Seed for sampling the region and for arbitration.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Id of a configured policy; required in shared and autonomous mode.
    #[serde(default)]
    pub policy: Option<String>,
}

/// Payload of `action`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPayload {
    pub token: HumanActionToken,
}

/// Full session state; sent after `create` and on `state` requests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub mode: RecordMode,
    /// Number of steps taken; the `seq` the next action must carry.
    pub step: usize,
    pub step_limit: usize,
    pub grid: RegionGrid,
    pub position: Position,
    pub payload: u32,
    pub observation: RobotObservation,
    pub subgoals: Vec<usize>,
    pub obstacles: Vec<usize>,
    pub done: bool,
    pub done_reason: DoneReason,
    pub stats: EpisodeStats,
}

/// Result of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub t: usize,
    pub a_h: HumanActionToken,
    pub a_a: Option<ActionRP>,
    pub executed: Option<ActionRP>,
    pub followed: bool,
    /// The token was injected because no input arrived in time.
    pub injected: bool,
    pub reward: f64,
    pub blended: Option<f64>,
    pub events: Vec<Event>,
    pub state: StateView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub done_reason: Option<DoneReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_seq: Option<u64>,
}
