//! One actor task per session. Clicks, controls, and playback ticks all go
//! through the actor's queue, so they apply in arrival order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::time::Instant;
use ttc_core::detectors::MissPolicy;
use ttc_core::engine::{EngineConfig, EpisodeLog, Episode};
use ttc_core::feedback::FeedbackEvent;
use ttc_core::metrics::{evaluate_subset, Subset};
use ttc_core::oa::OaParams;
use ttc_core::promptbuffer::BufferDump;
use ttc_core::scenesim::{generate_scenario, grid_box_of, ScenarioConfig};

use crate::protocol::{
    BufferSummary, Control, DetectionView, FramePayload, Message, MessageType, Playback, SessionId,
};
use crate::ServiceError;

pub const MAX_FPS: f64 = 60.0;
const EVENT_BACKLOG: usize = 256;

#[derive(Clone)]
pub struct SessionSpec {
    pub scenario: ScenarioConfig,
    pub policy: MissPolicy,
    pub engine: EngineConfig,
    pub params: Option<Arc<OaParams>>,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SessionInfo {
    pub id: SessionId,
    pub scenario: String,
    pub seed: u64,
    pub adapter: Option<String>,
    pub playback: Playback,
    pub clients: usize,
}

enum Command {
    Click {
        frame: usize,
        point: [f64; 2],
        reply: oneshot::Sender<Result<FeedbackEvent, ServiceError>>,
    },
    Control {
        control: Control,
        reply: oneshot::Sender<Result<Playback, ServiceError>>,
    },
    Buffer(oneshot::Sender<BufferDump>),
    Log(oneshot::Sender<EpisodeLog>),
    Snapshot(oneshot::Sender<(Playback, Option<Message>)>),
}

/// Cheap, cloneable access to a running session.
#[derive(Clone)]
pub struct SessionHandle {
    id: SessionId,
    scenario: String,
    seed: u64,
    adapter: Option<String>,
    tx: mpsc::UnboundedSender<Command>,
    events: broadcast::Sender<Message>,
    clients: Arc<AtomicUsize>,
}

/// Counts a connected client for as long as it lives.
pub struct ClientGuard(Arc<AtomicUsize>);

impl Drop for ClientGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn check_fps(fps: f64) -> Result<f64, ServiceError> {
    if fps.is_finite() && fps > 0.0 && fps <= MAX_FPS {
        Ok(fps)
    } else {
        Err(ServiceError::Protocol(format!("fps must be in (0, {MAX_FPS}], got {fps}")))
    }
}

impl SessionHandle {
    /// Builds the episode and starts the actor; must run inside a tokio runtime.
    pub fn spawn(id: SessionId, spec: SessionSpec) -> Result<Self, ServiceError> {
        let fps = check_fps(spec.fps)?;
        let scenario = generate_scenario(&spec.scenario).map_err(ttc_core::engine::EngineError::from)?;
        let adapter = spec.params.as_ref().map(|p| p.fingerprint());
        let episode = Episode::new(scenario, spec.policy, spec.params, spec.engine)?;
        let (tx, rx) = mpsc::unbounded_channel();
        let (events, _) = broadcast::channel(EVENT_BACKLOG);
        let actor = Actor {
            id,
            episode,
            paused: true,
            fps,
            reveal: false,
            latest: None,
            events: events.clone(),
        };
        tokio::spawn(actor.run(rx));
        Ok(Self {
            id,
            scenario: spec.scenario.name.clone(),
            seed: spec.scenario.seed,
            adapter,
            tx,
            events,
            clients: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn id(&self) -> SessionId {
        self.id
    }

    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Result<T, ServiceError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(make(reply)).map_err(|_| ServiceError::Closed)?;
        rx.await.map_err(|_| ServiceError::Closed)
    }

    /// Human click on `frame`, in grid coordinates.
    pub async fn click(&self, frame: usize, point: [f64; 2]) -> Result<FeedbackEvent, ServiceError> {
        self.ask(|reply| Command::Click { frame, point, reply }).await?
    }

    pub async fn control(&self, control: Control) -> Result<Playback, ServiceError> {
        self.ask(|reply| Command::Control { control, reply }).await?
    }

    pub async fn buffer(&self) -> Result<BufferDump, ServiceError> {
        self.ask(Command::Buffer).await
    }

    pub async fn log(&self) -> Result<EpisodeLog, ServiceError> {
        self.ask(Command::Log).await
    }

    pub async fn playback(&self) -> Result<Playback, ServiceError> {
        Ok(self.ask(Command::Snapshot).await?.0)
    }

    /// The most recent frame message, if any frame has been processed.
    pub async fn latest_frame(&self) -> Result<Option<Message>, ServiceError> {
        Ok(self.ask(Command::Snapshot).await?.1)
    }

    pub async fn info(&self) -> Result<SessionInfo, ServiceError> {
        Ok(SessionInfo {
            id: self.id,
            scenario: self.scenario.clone(),
            seed: self.seed,
            adapter: self.adapter.clone(),
            playback: self.playback().await?,
            clients: self.clients.load(Ordering::SeqCst),
        })
    }

    /// Frame and buffer messages sent after each state change.
    pub fn subscribe(&self) -> broadcast::Receiver<Message> {
        self.events.subscribe()
    }

    pub fn connect(&self) -> ClientGuard {
        self.clients.fetch_add(1, Ordering::SeqCst);
        ClientGuard(self.clients.clone())
    }
}

struct Actor {
    id: SessionId,
    episode: Episode,
    paused: bool,
    fps: f64,
    reveal: bool,
    latest: Option<Message>,
    events: broadcast::Sender<Message>,
}

impl Actor {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Command>) {
        let mut next = Instant::now();
        loop {
            let playing = !self.paused && !self.episode.is_finished();
            tokio::select! {
                cmd = rx.recv() => match cmd {
                    Some(cmd) => {
                        let was_paused = self.paused;
                        self.handle(cmd);
                        if was_paused && !self.paused {
                            next = Instant::now();
                        }
                    }
                    None => break,
                },
                _ = tokio::time::sleep_until(next), if playing => {
                    if self.advance().is_err() {
                        self.paused = true;
                    }
                    next += self.period();
                    let now = Instant::now();
                    if next < now {
                        next = now;
                    }
                }
            }
        }
    }

    fn period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.fps)
    }

    fn playback(&self) -> Playback {
        Playback {
            next_frame: self.episode.frames_done(),
            total_frames: self.episode.scenario().frame_count(),
            paused: self.paused,
            fps: self.fps,
            reveal_truth: self.reveal,
        }
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Click { frame, point, reply } => {
                let r = self.episode.human_click(frame, point).map_err(ServiceError::from);
                if r.is_ok() {
                    self.publish(self.buffer_message());
                }
                let _ = reply.send(r);
            }
            Command::Control { control, reply } => {
                let _ = reply.send(self.control(control));
            }
            Command::Buffer(reply) => {
                let _ = reply.send(self.episode.buffer_dump());
            }
            Command::Log(reply) => {
                let _ = reply.send(self.episode.log().clone());
            }
            Command::Snapshot(reply) => {
                let _ = reply.send((self.playback(), self.latest.clone()));
            }
        }
    }

    fn control(&mut self, control: Control) -> Result<Playback, ServiceError> {
        match control {
            Control::Pause => self.paused = true,
            Control::Resume => self.paused = false,
            Control::Step => self.advance()?,
            Control::SetSpeed { fps } => self.fps = check_fps(fps)?,
            Control::ToggleTruthReveal => {
                self.reveal = !self.reveal;
                if self.latest.is_some() {
                    let m = self.frame_message();
                    self.latest = Some(m.clone());
                    self.publish(m);
                }
            }
        }
        Ok(self.playback())
    }

    fn advance(&mut self) -> Result<(), ServiceError> {
        self.episode.step()?;
        if self.episode.is_finished() {
            self.paused = true;
        }
        let m = self.frame_message();
        self.latest = Some(m.clone());
        self.publish(m);
        Ok(())
    }

    fn publish(&self, m: Message) {
        // no subscribers is fine
        let _ = self.events.send(m);
    }

    fn buffer_message(&self) -> Message {
        let frame = self.episode.frames_done().checked_sub(1);
        Message::new(MessageType::Buffer, self.id, frame, self.episode.buffer_dump())
    }

    fn frame_message(&self) -> Message {
        let frame = self.episode.current_frame().expect("a frame was processed");
        let log = self.episode.log();
        let last = log.frames.last().expect("a frame was processed");
        let buffer = self.episode.buffer();
        let payload = FramePayload {
            detections: last
                .merged
                .iter()
                .map(|d| DetectionView {
                    detection: d.clone(),
                    grid_box: grid_box_of(&d.box3d, &frame.ego, &frame.grid),
                })
                .collect(),
            truths: self.reveal.then(|| frame.truths.clone()),
            buffer: BufferSummary {
                size: buffer.len(),
                capacity: buffer.config().capacity,
                ids: buffer.ids(),
            },
            metrics: evaluate_subset(&Subset::All, &log.records(), &log.detections()),
            playback: self.playback(),
        };
        Message::new(MessageType::Frame, self.id, Some(frame.index), payload)
    }
}
