//! Synthetic base detector with scriptable, seeded miss patterns.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Box3D, Scored};
use crate::rng::{rng_for, tag, uniform_for};
use crate::scenesim::Frame;

pub type PromptId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "prompt", rename_all = "snake_case")]
pub enum Provenance {
    Base,
    Prompt(PromptId),
    /// Decoded from a point, box, or object query.
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub box3d: Box3D,
    pub confidence: f64,
    pub provenance: Provenance,
}

impl Scored for Detection {
    fn bev_box(&self) -> &Box3D {
        &self.box3d
    }
    fn score(&self) -> f64 {
        self.confidence
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MissMode {
    /// Detects every visible entity.
    None,
    /// Entities at or beyond `range_m` are missed with probability `miss_rate`.
    DistantMiss { range_m: f64, miss_rate: f64 },
    /// Listed tags are missed with probability `miss_rate`.
    ClassMiss { tags: BTreeSet<String>, miss_rate: f64 },
    /// Listed tags are never detected.
    UnseenClass { tags: BTreeSet<String> },
    /// Everything is missed with probability `miss_rate` on frames whose
    /// style shift reaches `style_threshold`.
    DomainShift { style_threshold: f64, miss_rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxNoise {
    pub center_sigma: f64,
    pub size_sigma: f64,
    pub yaw_sigma: f64,
}

impl Default for BoxNoise {
    fn default() -> Self {
        Self {
            center_sigma: 0.15,
            size_sigma: 0.03,
            yaw_sigma: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissPolicy {
    #[serde(flatten)]
    pub mode: MissMode,
    pub seed: u64,
    /// Miss probability applied on top of the mode, everywhere.
    #[serde(default)]
    pub base_miss: f64,
    /// Miss decisions are held for blocks of this many frames.
    #[serde(default = "default_block")]
    pub block_frames: usize,
    #[serde(default)]
    pub noise: BoxNoise,
}

fn default_block() -> usize {
    5
}

impl MissPolicy {
    pub fn new(mode: MissMode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            base_miss: 0.0,
            block_frames: default_block(),
            noise: BoxNoise::default(),
        }
    }

    pub fn perfect(seed: u64) -> Self {
        Self::new(MissMode::None, seed)
    }

    fn miss_probability(&self, tag_name: &str, distance: f64, shift: f64) -> f64 {
        let p = match &self.mode {
            MissMode::None => 0.0,
            MissMode::DistantMiss { range_m, miss_rate } => {
                if distance >= *range_m {
                    *miss_rate
                } else {
                    0.0
                }
            }
            MissMode::ClassMiss { tags, miss_rate } => {
                if tags.contains(tag_name) {
                    *miss_rate
                } else {
                    0.0
                }
            }
            MissMode::UnseenClass { tags } => {
                if tags.contains(tag_name) {
                    1.0
                } else {
                    0.0
                }
            }
            MissMode::DomainShift {
                style_threshold,
                miss_rate,
            } => {
                if shift >= *style_threshold {
                    *miss_rate
                } else {
                    0.0
                }
            }
        };
        1.0 - (1.0 - p.clamp(0.0, 1.0)) * (1.0 - self.base_miss.clamp(0.0, 1.0))
    }
}

pub trait Detector {
    fn detect(&self, frame: &Frame) -> Vec<Detection>;
}

/// Emits noisy copies of the visible truth boxes, minus the policy's misses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDetector {
    pub policy: MissPolicy,
}

impl SyntheticDetector {
    pub fn new(policy: MissPolicy) -> Self {
        Self { policy }
    }

    /// Whether the policy misses `entity` at `frame_index`.
    pub fn misses(&self, entity: u32, tag_name: &str, distance: f64, frame_index: usize, shift: f64) -> bool {
        let p = self.policy.miss_probability(tag_name, distance, shift);
        if p <= 0.0 {
            return false;
        }
        let block = (frame_index / self.policy.block_frames.max(1)) as u64;
        uniform_for(self.policy.seed, &[tag("miss"), entity as u64, block]) < p
    }
}

impl Detector for SyntheticDetector {
    fn detect(&self, frame: &Frame) -> Vec<Detection> {
        let shift = frame.style.shift;
        let n = &self.policy.noise;
        frame
            .visible_truths()
            .filter(|t| !self.misses(t.entity_id, &t.tag, t.distance, frame.index, shift))
            .map(|t| {
                let mut rng = rng_for(self.policy.seed, &[tag("det"), t.entity_id as u64, frame.index as u64]);
                let mut gauss = |s: f64| -> f64 {
                    if s > 0.0 {
                        Normal::new(0.0, s).expect("positive sigma").sample(&mut rng)
                    } else {
                        0.0
                    }
                };
                let b = t.box3d;
                let center = [b.center[0] + gauss(n.center_sigma), b.center[1] + gauss(n.center_sigma), b.center[2]];
                let size = b.size.map(|s| s * gauss(n.size_sigma).exp());
                let yaw = b.yaw + gauss(n.yaw_sigma);
                let confidence = rng.random_range(0.5..0.95);
                Detection {
                    box3d: Box3D::new(center, size, yaw).expect("perturbed box stays valid"),
                    confidence,
                    provenance: Provenance::Base,
                }
            })
            .collect()
    }
}
