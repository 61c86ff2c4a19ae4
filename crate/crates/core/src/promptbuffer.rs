//! Bounded store of visual prompts for missed objects.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::PromptId;
use crate::geometry::{bev_iou, Box3D};
use crate::oa::VisualPrompt;

#[derive(Debug, Error, PartialEq)]
pub enum BufferError {
    #[error("prompt {0} is not in the buffer")]
    UnknownPrompt(PromptId),
    #[error("invalid buffer config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BufferConfig {
    pub capacity: usize,
    pub conf_floor: f64,
    /// Consecutive low frames before a prompt is dropped.
    pub k: usize,
    pub iou_dup: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            capacity: 32,
            conf_floor: 0.3,
            k: 5,
            iou_dup: 0.7,
        }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<(), BufferError> {
        if self.capacity == 0 {
            return Err(BufferError::Config("capacity must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(BufferError::Config("k must be at least 1".into()));
        }
        for (name, v) in [("conf_floor", self.conf_floor), ("iou_dup", self.iou_dup)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(BufferError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    Feedback,
    Preloaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub prompt: VisualPrompt,
    pub enqueued_at: usize,
    /// Last `k` per-frame best confidences, oldest first.
    pub confidence_history: VecDeque<f64>,
    /// Prediction at the most recent recorded frame, if any.
    pub last_prediction: Option<Box3D>,
    pub source: EntrySource,
}

impl BufferEntry {
    /// Mean of the history; an entry with no history yet counts as 0.
    pub fn mean_confidence(&self) -> f64 {
        if self.confidence_history.is_empty() {
            0.0
        } else {
            self.confidence_history.iter().sum::<f64>() / self.confidence_history.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionReason {
    Capacity,
    LowConfidence,
    Redundant { kept: PromptId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eviction {
    pub id: PromptId,
    pub reason: EvictionReason,
}

/// Entries are kept in enqueue order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBuffer {
    config: BufferConfig,
    entries: Vec<BufferEntry>,
}

impl PromptBuffer {
    pub fn new(config: BufferConfig) -> Result<Self, BufferError> {
        config.validate()?;
        Ok(Self {
            config,
            entries: Vec::new(),
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn get(&self, id: PromptId) -> Option<&BufferEntry> {
        self.entries.iter().find(|e| e.prompt.id == id)
    }

    pub fn contains(&self, id: PromptId) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> Vec<PromptId> {
        self.entries.iter().map(|e| e.prompt.id).collect()
    }

    /// Prompts in enqueue order, as handed to the adapter.
    pub fn prompts(&self) -> Vec<VisualPrompt> {
        self.entries.iter().map(|e| e.prompt.clone()).collect()
    }

    /// Adds a prompt. A known id only has its descriptor refreshed. At
    /// capacity the lowest-mean entry goes first (oldest on ties).
    pub fn enqueue(&mut self, prompt: VisualPrompt, frame_index: usize, source: EntrySource) -> Option<Eviction> {
        if let Some(e) = self.entries.iter_mut().find(|e| e.prompt.id == prompt.id) {
            e.prompt = prompt;
            return None;
        }
        let mut evicted = None;
        if self.entries.len() >= self.config.capacity {
            let mut worst = 0;
            for (i, e) in self.entries.iter().enumerate() {
                if e.mean_confidence() < self.entries[worst].mean_confidence() {
                    worst = i;
                }
            }
            let e = self.entries.remove(worst);
            evicted = Some(Eviction {
                id: e.prompt.id,
                reason: EvictionReason::Capacity,
            });
        }
        self.entries.push(BufferEntry {
            prompt,
            enqueued_at: frame_index,
            confidence_history: VecDeque::with_capacity(self.config.k),
            last_prediction: None,
            source,
        });
        evicted
    }

    pub fn remove(&mut self, id: PromptId) -> Option<BufferEntry> {
        let i = self.entries.iter().position(|e| e.prompt.id == id)?;
        Some(self.entries.remove(i))
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends this frame's best confidence to every entry (0 when absent).
    pub fn record_results(&mut self, best: &BTreeMap<PromptId, (f64, Option<Box3D>)>) -> Result<(), BufferError> {
        if let Some(id) = best.keys().find(|id| !self.contains(**id)) {
            return Err(BufferError::UnknownPrompt(*id));
        }
        let k = self.config.k;
        for e in &mut self.entries {
            let (conf, pred) = best.get(&e.prompt.id).copied().unwrap_or((0.0, None));
            if e.confidence_history.len() == k {
                e.confidence_history.pop_front();
            }
            e.confidence_history.push_back(conf.clamp(0.0, 1.0));
            e.last_prediction = pred;
        }
        Ok(())
    }

    /// Low-confidence sweep, then the redundancy sweep in enqueue order.
    pub fn dequeue_sweep(&mut self) -> Vec<Eviction> {
        let cfg = &self.config;
        let mut out = Vec::new();
        self.entries.retain(|e| {
            let low = e.confidence_history.len() == cfg.k && e.confidence_history.iter().all(|c| *c < cfg.conf_floor);
            if low {
                out.push(Eviction {
                    id: e.prompt.id,
                    reason: EvictionReason::LowConfidence,
                });
            }
            !low
        });
        let mut i = 0;
        while i < self.entries.len() {
            if let Some(a) = self.entries[i].last_prediction {
                let mut j = i + 1;
                while j < self.entries.len() {
                    let dup = self.entries[j]
                        .last_prediction
                        .is_some_and(|b| bev_iou(&a, &b).unwrap_or(0.0) >= cfg.iou_dup);
                    if dup {
                        let gone = self.entries.remove(j);
                        out.push(Eviction {
                            id: gone.prompt.id,
                            reason: EvictionReason::Redundant {
                                kept: self.entries[i].prompt.id,
                            },
                        });
                    } else {
                        j += 1;
                    }
                }
            }
            i += 1;
        }
        out
    }

    pub fn dump(&self) -> BufferDump {
        BufferDump {
            config: self.config.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| EntryDump {
                    id: e.prompt.id,
                    origin: e.prompt.origin.clone(),
                    enqueued_at: e.enqueued_at,
                    confidence_history: e.confidence_history.iter().copied().collect(),
                    mean_confidence: e.mean_confidence(),
                    last_prediction: e.last_prediction,
                    source: e.source,
                })
                .collect(),
        }
    }
}

/// Descriptor-free view of the buffer for panels and traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferDump {
    pub config: BufferConfig,
    pub entries: Vec<EntryDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryDump {
    pub id: PromptId,
    pub origin: crate::oa::PromptOrigin,
    pub enqueued_at: usize,
    pub confidence_history: Vec<f64>,
    pub mean_confidence: f64,
    pub last_prediction: Option<Box3D>,
    pub source: EntrySource,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oa::PromptOrigin;

    fn prompt(id: PromptId, x: f64) -> VisualPrompt {
        VisualPrompt::new(id, vec![x, 1.0, 0.0], PromptOrigin::External)
    }

    fn buffer(capacity: usize, k: usize) -> PromptBuffer {
        PromptBuffer::new(BufferConfig {
            capacity,
            k,
            ..BufferConfig::default()
        })
        .unwrap()
    }

    fn boxed(x: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap()
    }

    fn record(b: &mut PromptBuffer, vals: &[(PromptId, f64)]) {
        let m = vals.iter().map(|&(id, c)| (id, (c, None))).collect();
        b.record_results(&m).unwrap();
    }

    #[test]
    fn enqueue_basics() {
        let mut b = buffer(32, 5);
        assert!(b.enqueue(prompt(1, 0.0), 0, EntrySource::Feedback).is_none());
        assert_eq!(b.len(), 1);
        b.enqueue(prompt(1, 3.0), 4, EntrySource::Feedback);
        assert_eq!(b.len(), 1);
        assert_eq!(b.get(1).unwrap().prompt, prompt(1, 3.0));
        assert_eq!(b.get(1).unwrap().enqueued_at, 0);
    }

    #[test]
    fn capacity_evicts_lowest_mean() {
        let mut b = buffer(3, 5);
        for id in 1..=3 {
            b.enqueue(prompt(id, id as f64), 0, EntrySource::Feedback);
        }
        record(&mut b, &[(1, 0.9), (2, 0.2), (3, 0.6)]);
        let ev = b.enqueue(prompt(4, 0.5), 1, EntrySource::Feedback).unwrap();
        assert_eq!(ev, Eviction { id: 2, reason: EvictionReason::Capacity });
        assert_eq!(b.ids(), vec![1, 3, 4]);
    }

    #[test]
    fn history_rolls_and_absent_is_zero() {
        let mut b = buffer(4, 3);
        b.enqueue(prompt(1, 0.0), 0, EntrySource::Feedback);
        b.enqueue(prompt(2, 1.0), 0, EntrySource::Feedback);
        let mut m = BTreeMap::new();
        m.insert(1, (0.8, Some(boxed(0.0))));
        b.record_results(&m).unwrap();
        assert_eq!(b.get(1).unwrap().confidence_history, [0.8]);
        assert_eq!(b.get(2).unwrap().confidence_history, [0.0]);
        assert!(b.get(1).unwrap().last_prediction.is_some());
        for c in [0.1, 0.2, 0.3] {
            record(&mut b, &[(1, c)]);
        }
        assert_eq!(b.get(1).unwrap().confidence_history, [0.1, 0.2, 0.3]);
        assert!(b.get(1).unwrap().last_prediction.is_none());
        let bad = BTreeMap::from([(9, (0.5, None))]);
        assert_eq!(b.record_results(&bad), Err(BufferError::UnknownPrompt(9)));
    }

    #[test]
    fn low_confidence_rule() {
        let mut b = buffer(4, 3);
        b.enqueue(prompt(1, 0.0), 0, EntrySource::Feedback);
        b.enqueue(prompt(2, 1.0), 0, EntrySource::Feedback);
        for (a, c) in [(0.1, 0.1), (0.1, 0.5), (0.1, 0.1)] {
            record(&mut b, &[(1, a), (2, c)]);
            if b.get(1).unwrap().confidence_history.len() < 3 {
                assert!(b.dequeue_sweep().is_empty());
            }
        }
        let ev = b.dequeue_sweep();
        assert_eq!(ev, vec![Eviction { id: 1, reason: EvictionReason::LowConfidence }]);
        assert_eq!(b.ids(), vec![2]);
    }

    #[test]
    fn redundancy_evicts_later_entry() {
        let mut b = buffer(4, 3);
        for id in 1..=3 {
            b.enqueue(prompt(id, id as f64), 0, EntrySource::Feedback);
        }
        // 4 x 2 boxes shifted 0.2 m along x: IoU 3.8/4.2 = 0.905
        let m = BTreeMap::from([
            (1, (0.8, Some(boxed(0.2)))),
            (2, (0.9, Some(boxed(10.0)))),
            (3, (0.7, Some(boxed(0.0)))),
        ]);
        b.record_results(&m).unwrap();
        let ev = b.dequeue_sweep();
        assert_eq!(ev, vec![Eviction { id: 3, reason: EvictionReason::Redundant { kept: 1 } }]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            BufferConfig { capacity: 0, ..Default::default() },
            BufferConfig { k: 0, ..Default::default() },
            BufferConfig { conf_floor: 1.5, ..Default::default() },
        ] {
            assert!(PromptBuffer::new(c).is_err());
        }
    }
}
