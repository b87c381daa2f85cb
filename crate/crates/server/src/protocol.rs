//! Wire format. Every frame is one JSON object
//! `{"t": <type>, "v": 1, "sid": <session id>, ...fields}`; `sid` is absent
//! before a session is known. Field layouts are listed in `docs/protocol.md`.

use std::collections::BTreeMap;
use std::fmt;

use feedlab_core::engagement::EngagementRecord;
use feedlab_core::profiling::{ClusterAssignment, ClusterLabel, GraphSnapshot, TagExplanation};
use feedlab_core::recommender::Recommendation;
use feedlab_core::{ActionEvent, ActionType, DataCategory, ImageId, RecommenderParams, UserId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::session::SessionConfig;

pub const PROTOCOL_VERSION: u64 = 1;
/// Larger inbound frames are rejected before parsing.
pub const MAX_MESSAGE_BYTES: usize = 64 * 1024;
/// Upper bound for `next.n`.
pub const MAX_BATCH: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Teacher,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotView {
    Engagement,
    SocialNetwork,
    TagClouds,
    TopicAffinity,
    ImageCoengagement,
    Table,
    Clustering,
}

impl SnapshotView {
    pub const ALL: [SnapshotView; 7] = [
        SnapshotView::Engagement,
        SnapshotView::SocialNetwork,
        SnapshotView::TagClouds,
        SnapshotView::TopicAffinity,
        SnapshotView::ImageCoengagement,
        SnapshotView::Table,
        SnapshotView::Clustering,
    ];
}

fn one() -> usize {
    1
}

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Opens a new session; answered with `created`.
    Create {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<SessionConfig>,
    },
    Join {
        code: String,
        role: Role,
        name: String,
        /// Required for the teacher role.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key: Option<String>,
    },
    Pair {
        target: UserId,
    },
    Unpair,
    Event {
        /// Echoed in the ack.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u64>,
        /// Must equal the sender's own id when present.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        user: Option<UserId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image: Option<ImageId>,
        action: ActionType,
        /// Client clock in ms since session start; the server clock is used
        /// when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ts: Option<u64>,
    },
    Next {
        #[serde(default = "one")]
        n: usize,
    },
    SetParams {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        user: Option<UserId>,
        params: RecommenderParams,
    },
    TeacherSnapshot {
        view: SnapshotView,
    },
    Export {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key: Option<String>,
    },
    End {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key: Option<String>,
    },
}

const CLIENT_TYPES: [&str; 10] = [
    "create",
    "join",
    "pair",
    "unpair",
    "event",
    "next",
    "set_params",
    "teacher_snapshot",
    "export",
    "end",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedItem {
    pub image: ImageId,
    pub media: String,
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagCloud {
    pub user: UserId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterLabel>,
    /// Heaviest first.
    pub tags: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub user: UserId,
    pub total_engagement: u32,
    pub events: usize,
    pub affinity: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "view", content = "data", rename_all = "snake_case")]
pub enum Snapshot {
    Engagement(BTreeMap<UserId, Vec<EngagementRecord>>),
    SocialNetwork(GraphSnapshot),
    TagClouds(Vec<TagCloud>),
    TopicAffinity(GraphSnapshot),
    ImageCoengagement(GraphSnapshot),
    /// Sorted by total engagement, highest first.
    Table(Vec<TableRow>),
    /// `None` until two students have non-empty profiles.
    Clustering(Option<ClusterAssignment>),
}

impl Snapshot {
    pub fn view(&self) -> SnapshotView {
        match self {
            Snapshot::Engagement(_) => SnapshotView::Engagement,
            Snapshot::SocialNetwork(_) => SnapshotView::SocialNetwork,
            Snapshot::TagClouds(_) => SnapshotView::TagClouds,
            Snapshot::TopicAffinity(_) => SnapshotView::TopicAffinity,
            Snapshot::ImageCoengagement(_) => SnapshotView::ImageCoengagement,
            Snapshot::Table(_) => SnapshotView::Table,
            Snapshot::Clustering(_) => SnapshotView::Clustering,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    TooLarge,
    BadJson,
    BadVersion,
    UnknownType,
    BadMessage,
    NoSuchSession,
    BadCode,
    NotJoined,
    AlreadyJoined,
    Forbidden,
    BadKey,
    TeacherTaken,
    UnknownUser,
    Impersonation,
    InvalidEvent,
    InvalidParams,
    NotPaired,
    Internal,
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum ServerMessage {
    Created {
        join_code: String,
        teacher_key: String,
    },
    Welcome {
        user: UserId,
        role: Role,
        /// Set when the roster is above the recommended size.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
        skip_threshold_ms: u64,
        params: RecommenderParams,
        catalog_hash: String,
        catalog_size: usize,
    },
    Paired {
        target: UserId,
    },
    Unpaired {
        target: UserId,
    },
    Ack {
        event_id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u64>,
        /// Engagement score of the (user, image) pair after the event.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        score: Option<u32>,
    },
    Feed {
        items: Vec<FeedItem>,
    },
    Params {
        user: UserId,
        params: RecommenderParams,
    },
    LiveLog {
        user: UserId,
        event: ActionEvent,
        category: DataCategory,
        description: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        score: Option<u32>,
    },
    Profile {
        user: UserId,
        affinity: BTreeMap<String, f64>,
        explanation: Vec<TagExplanation>,
    },
    Recs {
        user: UserId,
        items: Vec<Recommendation>,
    },
    Heatmap {
        user: UserId,
        probabilities: BTreeMap<ImageId, f64>,
    },
    TeacherSnapshot {
        snapshot: Snapshot,
    },
    ExportAck {
        data: String,
        events: usize,
    },
    SessionEnded,
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            message: message.into(),
        }
    }

    /// The `t` tag.
    pub fn kind(&self) -> &'static str {
        match self {
            ServerMessage::Created { .. } => "created",
            ServerMessage::Welcome { .. } => "welcome",
            ServerMessage::Paired { .. } => "paired",
            ServerMessage::Unpaired { .. } => "unpaired",
            ServerMessage::Ack { .. } => "ack",
            ServerMessage::Feed { .. } => "feed",
            ServerMessage::Params { .. } => "params",
            ServerMessage::LiveLog { .. } => "live_log",
            ServerMessage::Profile { .. } => "profile",
            ServerMessage::Recs { .. } => "recs",
            ServerMessage::Heatmap { .. } => "heatmap",
            ServerMessage::TeacherSnapshot { .. } => "teacher_snapshot",
            ServerMessage::ExportAck { .. } => "export_ack",
            ServerMessage::SessionEnded => "session_ended",
            ServerMessage::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub message: String,
}

impl ProtocolError {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

impl std::error::Error for ProtocolError {}

impl From<ProtocolError> for ServerMessage {
    fn from(e: ProtocolError) -> Self {
        ServerMessage::Error {
            code: e.code,
            message: e.message,
        }
    }
}

/// A decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope<M> {
    pub sid: Option<String>,
    pub msg: M,
}

fn split(text: &str) -> Result<(Option<String>, Map<String, Value>), ProtocolError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| ProtocolError::new(ErrorCode::BadJson, e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(ProtocolError::new(ErrorCode::BadJson, "expected a JSON object"));
    };
    match obj.remove("v") {
        Some(Value::Number(n)) if n.as_u64() == Some(PROTOCOL_VERSION) => {}
        Some(v) => {
            return Err(ProtocolError::new(
                ErrorCode::BadVersion,
                format!("unsupported version {v}"),
            ))
        }
        None => return Err(ProtocolError::new(ErrorCode::BadVersion, "missing field v")),
    }
    let sid = match obj.remove("sid") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(ProtocolError::new(ErrorCode::BadMessage, "sid must be a string")),
    };
    match obj.get("t") {
        Some(Value::String(_)) => {}
        Some(_) => return Err(ProtocolError::new(ErrorCode::BadMessage, "t must be a string")),
        None => return Err(ProtocolError::new(ErrorCode::BadMessage, "missing field t")),
    }
    Ok((sid, obj))
}

fn body<M: DeserializeOwned>(obj: Map<String, Value>) -> Result<M, ProtocolError> {
    serde_json::from_value(Value::Object(obj))
        .map_err(|e| ProtocolError::new(ErrorCode::BadMessage, e.to_string()))
}

/// Validates and decodes one inbound frame. Never panics.
pub fn decode_client(text: &str) -> Result<Envelope<ClientMessage>, ProtocolError> {
    if text.len() > MAX_MESSAGE_BYTES {
        return Err(ProtocolError::new(
            ErrorCode::TooLarge,
            format!("message of {} bytes exceeds {MAX_MESSAGE_BYTES}", text.len()),
        ));
    }
    let (sid, obj) = split(text)?;
    let t = obj["t"].as_str().unwrap_or_default();
    if !CLIENT_TYPES.contains(&t) {
        return Err(ProtocolError::new(
            ErrorCode::UnknownType,
            format!("unknown message type {t:?}"),
        ));
    }
    Ok(Envelope { sid, msg: body(obj)? })
}

/// Server frames have no size cap; exports and snapshots grow with the class.
pub fn decode_server(text: &str) -> Result<Envelope<ServerMessage>, ProtocolError> {
    let (sid, obj) = split(text)?;
    Ok(Envelope { sid, msg: body(obj)? })
}

/// Serializes a message with the version and session fields filled in.
pub fn encode<M: Serialize>(sid: Option<&str>, msg: &M) -> String {
    let mut value = serde_json::to_value(msg).expect("protocol messages serialize");
    if let Value::Object(obj) = &mut value {
        obj.insert("v".into(), PROTOCOL_VERSION.into());
        if let Some(sid) = sid {
            obj.insert("sid".into(), sid.into());
        }
    }
    value.to_string()
}
