//! Wire messages. Every message, in either direction, is one JSON text
//! frame with exactly the fields `type`, `session`, `frame`, `payload`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use ttc_core::detectors::{Detection, PromptId};
use ttc_core::metrics::EdsReport;
use ttc_core::scenesim::{GridBox, Truth};

pub const PROTOCOL_VERSION: u32 = 1;

pub type SessionId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    Frame,
    Click,
    Ack,
    Control,
    Buffer,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    #[serde(rename = "type")]
    pub kind: MessageType,
    pub session: SessionId,
    #[serde(default)]
    pub frame: Option<usize>,
    #[serde(default)]
    pub payload: Value,
}

impl Message {
    pub fn new(kind: MessageType, session: SessionId, frame: Option<usize>, payload: impl Serialize) -> Self {
        Self {
            kind,
            session,
            frame,
            payload: serde_json::to_value(payload).expect("payloads serialize"),
        }
    }

    pub fn error(session: SessionId, frame: Option<usize>, code: &str, message: impl Into<String>) -> Self {
        Self::new(
            MessageType::Error,
            session,
            frame,
            ErrorPayload {
                code: code.into(),
                message: message.into(),
            },
        )
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }

    pub fn payload_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T, serde_json::Error> {
        T::deserialize(&self.payload)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Control {
    Pause,
    Resume,
    Step,
    SetSpeed { fps: f64 },
    ToggleTruthReveal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickPayload {
    /// Grid coordinates, cells.
    pub x: f64,
    pub y: f64,
}

/// What a client may send.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    Click { frame: usize, point: [f64; 2] },
    Control(Control),
    BufferRequest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolError(pub String);

impl std::fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parses a client text frame. Unknown fields are ignored, unknown types
/// and server-only types are rejected.
pub fn parse_client(text: &str) -> Result<(SessionId, ClientMessage), ProtocolError> {
    let m: Message = serde_json::from_str(text).map_err(|e| ProtocolError(e.to_string()))?;
    let bad = |e: serde_json::Error| ProtocolError(format!("bad {:?} payload: {e}", m.kind));
    let msg = match m.kind {
        MessageType::Click => {
            let frame = m.frame.ok_or_else(|| ProtocolError("click needs a frame index".into()))?;
            let p: ClickPayload = m.payload_as().map_err(bad)?;
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(ProtocolError("click coordinates must be finite".into()));
            }
            ClientMessage::Click {
                frame,
                point: [p.x, p.y],
            }
        }
        MessageType::Control => ClientMessage::Control(m.payload_as().map_err(bad)?),
        MessageType::Buffer => ClientMessage::BufferRequest,
        other => return Err(ProtocolError(format!("{other:?} is a server message"))),
    };
    Ok((m.session, msg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "of", rename_all = "snake_case")]
pub enum AckPayload {
    Click {
        prompt_id: PromptId,
        /// The click could not be decoded and a fixed window was cropped.
        fallback: bool,
    },
    Control {
        command: Control,
        playback: Playback,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Playback {
    /// Next frame to be processed.
    pub next_frame: usize,
    pub total_frames: usize,
    pub paused: bool,
    pub fps: f64,
    pub reveal_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionView {
    #[serde(flatten)]
    pub detection: Detection,
    pub grid_box: GridBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferSummary {
    pub size: usize,
    pub capacity: usize,
    pub ids: Vec<PromptId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub detections: Vec<DetectionView>,
    /// Present only while truth reveal is on.
    pub truths: Option<Vec<Truth>>,
    pub buffer: BufferSummary,
    /// Evaluation over every frame processed so far.
    pub metrics: EdsReport,
    pub playback: Playback,
}
