//! Live sessions over the correction loop: a hub of session actors, plain
//! HTTP endpoints for setup and replay, and a WebSocket per session for
//! frames, clicks, and playback control.

pub mod protocol;
pub mod server;
pub mod session;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use ttc_core::detectors::MissPolicy;
use ttc_core::engine::{EngineConfig, EngineError};
use ttc_core::feedback::{FeedbackConfig, FeedbackError};
use ttc_core::oa::OaParams;
use ttc_core::promptbuffer::BufferConfig;
use ttc_core::scenesim::ScenarioConfig;

pub use protocol::{Message, MessageType, SessionId, PROTOCOL_VERSION};
pub use server::{router, serve};
pub use session::{SessionHandle, SessionInfo, SessionSpec};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("unknown checkpoint {0:?}")]
    UnknownCheckpoint(String),
    #[error("session has shut down")]
    Closed,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl ServiceError {
    /// Stable code carried by `error` messages.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownSession(_) => "unknown_session",
            Self::UnknownScenario(_) => "unknown_scenario",
            Self::UnknownCheckpoint(_) => "unknown_checkpoint",
            Self::Closed => "closed",
            Self::Protocol(_) => "protocol",
            Self::Engine(e) => match e {
                EngineError::StaleClick { .. } => "stale_click",
                EngineError::Finished => "finished",
                EngineError::NoAdapter => "no_adapter",
                EngineError::Feedback(FeedbackError::ClickOutsideGrid(..)) => "click_outside_grid",
                _ => "engine",
            },
        }
    }
}

/// A scenario clients can start sessions on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub name: String,
    pub config: ScenarioConfig,
    pub policy: MissPolicy,
}

/// Body of a create-session request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub scenario: String,
    /// Replaces the scenario's seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub policy: Option<MissPolicy>,
    /// Named checkpoint; the hub default when absent.
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Also run the simulated click feedback.
    #[serde(default)]
    pub simulated_feedback: bool,
    #[serde(default)]
    pub buffer: Option<BufferConfig>,
    #[serde(default)]
    pub fps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub session: SessionId,
}

pub const DEFAULT_CHECKPOINT: &str = "default";
pub const DEFAULT_FPS: f64 = 2.0;

pub struct Hub {
    scenarios: Vec<ScenarioEntry>,
    checkpoints: BTreeMap<String, Arc<OaParams>>,
    sessions: Mutex<BTreeMap<SessionId, SessionHandle>>,
    next_id: AtomicU64,
}

impl Hub {
    pub fn new(scenarios: Vec<ScenarioEntry>, checkpoints: BTreeMap<String, Arc<OaParams>>) -> Self {
        Self {
            scenarios,
            checkpoints,
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn scenarios(&self) -> &[ScenarioEntry] {
        &self.scenarios
    }

    /// Resolves a request into the episode it will run.
    pub fn session_spec(&self, req: &CreateSession) -> Result<SessionSpec, ServiceError> {
        let entry = self
            .scenarios
            .iter()
            .find(|s| s.name == req.scenario)
            .ok_or_else(|| ServiceError::UnknownScenario(req.scenario.clone()))?;
        let params = match &req.checkpoint {
            Some(name) => Some(
                self.checkpoints
                    .get(name)
                    .cloned()
                    .ok_or_else(|| ServiceError::UnknownCheckpoint(name.clone()))?,
            ),
            None => self.checkpoints.get(DEFAULT_CHECKPOINT).cloned(),
        };
        let mut scenario = entry.config.clone();
        if let Some(seed) = req.seed {
            scenario.seed = seed;
        }
        let seed = scenario.seed;
        Ok(SessionSpec {
            scenario,
            policy: req.policy.clone().unwrap_or_else(|| entry.policy.clone()),
            engine: EngineConfig {
                feedback: req.simulated_feedback.then(FeedbackConfig::default),
                buffer: req.buffer.clone().unwrap_or_default(),
                seed,
                ..EngineConfig::default()
            },
            params,
            fps: req.fps.unwrap_or(DEFAULT_FPS),
        })
    }

    pub fn create(&self, req: &CreateSession) -> Result<SessionId, ServiceError> {
        self.start(self.session_spec(req)?)
    }

    /// Starts a session from an explicit spec.
    pub fn start(&self, spec: SessionSpec) -> Result<SessionId, ServiceError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let handle = SessionHandle::spawn(id, spec)?;
        self.sessions.lock().expect("session table").insert(id, handle);
        Ok(id)
    }

    pub fn get(&self, id: SessionId) -> Result<SessionHandle, ServiceError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(&id)
            .cloned()
            .ok_or(ServiceError::UnknownSession(id))
    }

    /// Drops the hub's handle; the actor stops once no client holds one.
    pub fn remove(&self, id: SessionId) -> Result<(), ServiceError> {
        self.sessions
            .lock()
            .expect("session table")
            .remove(&id)
            .map(|_| ())
            .ok_or(ServiceError::UnknownSession(id))
    }

    pub async fn list(&self) -> Vec<SessionInfo> {
        let handles: Vec<SessionHandle> = self.sessions.lock().expect("session table").values().cloned().collect();
        let mut out = Vec::with_capacity(handles.len());
        for h in handles {
            if let Ok(info) = h.info().await {
                out.push(info);
            }
        }
        out
    }
}
