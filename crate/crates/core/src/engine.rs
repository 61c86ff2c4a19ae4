//! The per-frame correction loop and the episode runner.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{Detection, Detector, MissPolicy, PromptId, Provenance, SyntheticDetector};
use crate::feedback::{
    click_to_visual_prompt, find_missed, should_collect, simulate_click, ClickOrigin, FeedbackConfig, FeedbackError,
    FeedbackEvent,
};
use crate::geometry::{nms, Box3D};
use crate::metrics::FrameRecord;
use crate::oa::{OaError, OaParams, PromptOrigin, VisualPrompt};
use crate::promptbuffer::{BufferConfig, BufferDump, BufferError, EntrySource, Eviction, PromptBuffer};
use crate::rng::{derive_seed, tag};
use crate::scenesim::{render_frame, Frame, Scenario, ScenarioConfig, SceneError};

pub const MERGE_CONFIDENCE: f64 = 0.3;
pub const MERGE_IOU: f64 = 0.5;
pub const EPISODE_LOG_VERSION: u32 = 1;
/// Clicks may target the current frame or this many frames before it.
pub const CLICK_STALENESS: usize = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("adapter grid {adapter:?} does not match scenario grid {scenario:?}")]
    ConfigMismatch { adapter: String, scenario: String },
    #[error("feedback needs adapter parameters")]
    NoAdapter,
    #[error("episode already finished")]
    Finished,
    #[error("frame {requested} is not clickable; current frame is {current:?}")]
    StaleClick { requested: usize, current: Option<usize> },
    #[error("episode log version {0} is not supported")]
    LogVersion(u32),
    #[error(transparent)]
    Oa(#[from] OaError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    /// Results are recorded and the dequeue rules run every frame.
    #[default]
    Live,
    /// Contents never change after loading.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// `None` switches simulated feedback off.
    pub feedback: Option<FeedbackConfig>,
    pub buffer: BufferConfig,
    pub buffer_mode: BufferMode,
    pub merge_confidence: f64,
    pub merge_iou: f64,
    /// Seeds click simulation.
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            feedback: Some(FeedbackConfig::default()),
            buffer: BufferConfig::default(),
            buffer_mode: BufferMode::Live,
            merge_confidence: MERGE_CONFIDENCE,
            merge_iou: MERGE_IOU,
            seed: 0,
        }
    }
}

impl EngineConfig {
    /// The no-correction control arm.
    pub fn baseline(seed: u64) -> Self {
        Self {
            feedback: None,
            seed,
            ..Self::default()
        }
    }
}

/// Result of one pass of the loop over a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub merged: Vec<Detection>,
    pub base_count: usize,
    pub prompt_count: usize,
    /// Best surviving confidence and box per buffered prompt.
    pub prompt_best: BTreeMap<PromptId, (f64, Option<Box3D>)>,
    pub evictions: Vec<Eviction>,
}

/// Base detect, prompt detect, threshold, NMS, then buffer bookkeeping.
pub fn run_step(
    frame: &Frame,
    detector: &dyn Detector,
    params: Option<&OaParams>,
    buffer: &mut PromptBuffer,
    cfg: &EngineConfig,
) -> Result<StepOutput> {
    let base = detector.detect(frame);
    let base_count = base.len();
    let mut all = base;
    let mut prompt_count = 0;
    if let (Some(p), false) = (params, buffer.is_empty()) {
        let enc = p.encode_frame(frame)?;
        let outs = p.detect_visual(&buffer.prompts(), frame, &enc)?;
        prompt_count = outs.len();
        all.extend(outs.iter().map(|o| o.detection()));
    }
    let kept: Vec<Detection> = all.into_iter().filter(|d| d.confidence >= cfg.merge_confidence).collect();
    let merged = nms(&kept, cfg.merge_iou);

    let mut prompt_best: BTreeMap<PromptId, (f64, Option<Box3D>)> = BTreeMap::new();
    for d in &merged {
        if let Provenance::Prompt(id) = d.provenance {
            let e = prompt_best.entry(id).or_insert((0.0, None));
            if e.1.is_none() || d.confidence > e.0 {
                *e = (d.confidence, Some(d.box3d));
            }
        }
    }
    let mut evictions = Vec::new();
    if cfg.buffer_mode == BufferMode::Live {
        buffer.record_results(&prompt_best)?;
        evictions = buffer.dequeue_sweep();
    }
    Ok(StepOutput {
        merged,
        base_count,
        prompt_count,
        prompt_best,
        evictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub index: usize,
    pub merged: Vec<Detection>,
    pub base_count: usize,
    pub prompt_count: usize,
    /// Best surviving confidence per buffered prompt this frame.
    pub prompt_confidences: BTreeMap<PromptId, f64>,
    pub evictions: Vec<Eviction>,
    /// Buffer size once the frame's feedback is in.
    pub buffer_size: usize,
    pub truth: FrameRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub version: u32,
    pub scenario: ScenarioConfig,
    pub policy: MissPolicy,
    pub engine: EngineConfig,
    /// Hash of the adapter checkpoint used, if any.
    pub adapter: Option<String>,
    pub frames: Vec<FrameLog>,
    pub feedback: Vec<FeedbackEvent>,
}

impl EpisodeLog {
    pub fn buffer_trace(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.buffer_size).collect()
    }

    pub fn records(&self) -> Vec<FrameRecord> {
        self.frames.iter().map(|f| f.truth.clone()).collect()
    }

    pub fn detections(&self) -> Vec<Vec<Detection>> {
        self.frames.iter().map(|f| f.merged.clone()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let log: Self = serde_json::from_str(s)?;
        if log.version != EPISODE_LOG_VERSION {
            return Err(EngineError::LogVersion(log.version));
        }
        Ok(log)
    }
}

/// A stateful episode: the offline runner and live sessions both drive it
/// one frame at a time.
pub struct Episode {
    scenario: Scenario,
    detector: SyntheticDetector,
    params: Option<Arc<OaParams>>,
    cfg: EngineConfig,
    buffer: PromptBuffer,
    next_prompt: PromptId,
    /// Prompt issued for each entity by simulated feedback.
    issued: BTreeMap<u32, PromptId>,
    /// Most recent frames, newest last, kept for clicks.
    recent: VecDeque<Frame>,
    log: EpisodeLog,
}

impl Episode {
    pub fn new(scenario: Scenario, policy: MissPolicy, params: Option<Arc<OaParams>>, cfg: EngineConfig) -> Result<Self> {
        if let Some(p) = &params {
            if p.config.grid != scenario.config.grid {
                return Err(EngineError::ConfigMismatch {
                    adapter: format!("{:?}", p.config.grid),
                    scenario: format!("{:?}", scenario.config.grid),
                });
            }
        } else if cfg.feedback.is_some() {
            return Err(EngineError::NoAdapter);
        }
        if let Some(f) = &cfg.feedback {
            f.validate()?;
        }
        let buffer = PromptBuffer::new(cfg.buffer.clone())?;
        let log = EpisodeLog {
            version: EPISODE_LOG_VERSION,
            scenario: scenario.config.clone(),
            policy: policy.clone(),
            engine: cfg.clone(),
            adapter: params.as_ref().map(|p| p.fingerprint()),
            frames: Vec::with_capacity(scenario.frame_count()),
            feedback: Vec::new(),
        };
        Ok(Self {
            scenario,
            detector: SyntheticDetector::new(policy),
            params,
            cfg,
            buffer,
            next_prompt: 1,
            issued: BTreeMap::new(),
            recent: VecDeque::with_capacity(CLICK_STALENESS + 1),
            log,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn buffer(&self) -> &PromptBuffer {
        &self.buffer
    }

    pub fn buffer_dump(&self) -> BufferDump {
        self.buffer.dump()
    }

    pub fn log(&self) -> &EpisodeLog {
        &self.log
    }

    pub fn current_frame(&self) -> Option<&Frame> {
        self.recent.back()
    }

    pub fn frames_done(&self) -> usize {
        self.log.frames.len()
    }

    pub fn is_finished(&self) -> bool {
        self.frames_done() >= self.scenario.frame_count()
    }

    fn take_id(&mut self) -> PromptId {
        let id = self.next_prompt;
        self.next_prompt += 1;
        id
    }

    /// Adds a prompt from outside the feedback loop; it acts from the next frame.
    pub fn preload(&mut self, descriptor: Vec<f64>, origin: PromptOrigin) -> PromptId {
        let id = self.take_id();
        self.buffer
            .enqueue(VisualPrompt::new(id, descriptor, origin), self.frames_done(), EntrySource::Preloaded);
        id
    }

    /// Processes the next frame, including simulated feedback when due.
    pub fn step(&mut self) -> Result<&FrameLog> {
        if self.is_finished() {
            return Err(EngineError::Finished);
        }
        let index = self.frames_done();
        let frame = render_frame(&self.scenario, index)?;
        let out = run_step(&frame, &self.detector, self.params.as_deref(), &mut self.buffer, &self.cfg)?;
        let mut evictions = out.evictions;

        if let (Some(fb), Some(params)) = (self.cfg.feedback.clone(), self.params.clone()) {
            if should_collect(index, fb.interval) {
                let missed: Vec<_> = find_missed(frame.truths.iter(), &out.merged, fb.miss_distance)
                    .into_iter()
                    .filter(|t| self.issued.get(&t.entity_id).is_none_or(|id| !self.buffer.contains(*id)))
                    .cloned()
                    .collect();
                let click_seed = derive_seed(self.cfg.seed, &[tag("feedback")]);
                for t in missed {
                    let click = match simulate_click(&t, &frame, fb.perturb_ratio, click_seed) {
                        Ok(c) => c,
                        Err(FeedbackError::TruthOutsideGrid(_)) => continue,
                        Err(e) => return Err(e.into()),
                    };
                    let id = self.take_id();
                    let origin = PromptOrigin::Frame {
                        scenario: self.scenario.config.name.clone(),
                        frame: index,
                    };
                    let r = click_to_visual_prompt(click, &frame, &params, id, origin)?;
                    if let Some(ev) = self.buffer.enqueue(r.prompt, index, EntrySource::Feedback) {
                        evictions.push(ev);
                    }
                    self.issued.insert(t.entity_id, id);
                    self.log.feedback.push(FeedbackEvent {
                        frame: index,
                        click,
                        resolved_box2d: r.box2d,
                        prompt_id: id,
                        origin: ClickOrigin::Simulated,
                        entity_id: Some(t.entity_id),
                        low_quality: r.fallback,
                    });
                }
            }
        }

        self.log.frames.push(FrameLog {
            index,
            prompt_confidences: out.prompt_best.iter().map(|(k, v)| (*k, v.0)).collect(),
            merged: out.merged,
            base_count: out.base_count,
            prompt_count: out.prompt_count,
            evictions,
            buffer_size: self.buffer.len(),
            truth: FrameRecord::from_frame(&frame),
        });
        if self.recent.len() > CLICK_STALENESS {
            self.recent.pop_front();
        }
        self.recent.push_back(frame);
        Ok(self.log.frames.last().expect("just pushed"))
    }

    /// A click on a recently processed frame; the prompt acts from the next
    /// frame processed.
    pub fn human_click(&mut self, frame_index: usize, click: [f64; 2]) -> Result<FeedbackEvent> {
        let params = self.params.clone().ok_or(EngineError::NoAdapter)?;
        let frame = self.recent.iter().find(|f| f.index == frame_index).ok_or(EngineError::StaleClick {
            requested: frame_index,
            current: self.recent.back().map(|f| f.index),
        })?;
        let index = frame.index;
        let id = self.next_prompt;
        let origin = PromptOrigin::Frame {
            scenario: self.scenario.config.name.clone(),
            frame: index,
        };
        let r = click_to_visual_prompt(click, frame, &params, id, origin)?;
        self.next_prompt += 1;
        let ev = self.buffer.enqueue(r.prompt, index, EntrySource::Feedback);
        let event = FeedbackEvent {
            frame: index,
            click,
            resolved_box2d: r.box2d,
            prompt_id: id,
            origin: ClickOrigin::Human,
            entity_id: None,
            low_quality: r.fallback,
        };
        self.log.feedback.push(event.clone());
        if let (Some(ev), Some(last)) = (ev, self.log.frames.last_mut()) {
            last.evictions.push(ev);
        }
        if let Some(last) = self.log.frames.last_mut() {
            last.buffer_size = self.buffer.len();
        }
        Ok(event)
    }

    pub fn run_to_end(mut self) -> Result<EpisodeLog> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.log)
    }

    pub fn into_log(self) -> EpisodeLog {
        self.log
    }
}

/// Runs every frame of `scenario` in order.
pub fn run_episode(
    scenario: &Scenario,
    policy: &MissPolicy,
    params: Option<Arc<OaParams>>,
    cfg: &EngineConfig,
) -> Result<EpisodeLog> {
    Episode::new(scenario.clone(), policy.clone(), params, cfg.clone())?.run_to_end()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSegment {
    pub start: usize,
    pub end: usize,
    pub boxes: Vec<(usize, Box3D)>,
}

impl TrackSegment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Surviving detections of each prompt, split into runs of consecutive frames.
pub fn track_assignments(log: &EpisodeLog) -> BTreeMap<PromptId, Vec<TrackSegment>> {
    let mut out: BTreeMap<PromptId, Vec<TrackSegment>> = BTreeMap::new();
    for f in &log.frames {
        let mut best: BTreeMap<PromptId, &Detection> = BTreeMap::new();
        for d in &f.merged {
            if let Provenance::Prompt(id) = d.provenance {
                let e = best.entry(id).or_insert(d);
                if d.confidence > e.confidence {
                    *e = d;
                }
            }
        }
        for (id, d) in best {
            let segs = out.entry(id).or_default();
            match segs.last_mut() {
                Some(s) if s.end + 1 == f.index => {
                    s.end = f.index;
                    s.boxes.push((f.index, d.box3d));
                }
                _ => segs.push(TrackSegment {
                    start: f.index,
                    end: f.index,
                    boxes: vec![(f.index, d.box3d)],
                }),
            }
        }
    }
    out
}
