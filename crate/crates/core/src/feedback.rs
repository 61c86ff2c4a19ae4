//! Simulated and live click feedback, and click-to-prompt resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{Detection, PromptId};
use crate::geometry::{center_distance, project_to_grid, Box2D};
use crate::oa::{OaError, OaParams, PromptOrigin, VisualPrompt};
use crate::rng::{rng_for, tag};
use crate::scenesim::{crop_descriptor, Frame, Truth};

/// Side of the fallback crop window, in cells.
pub const FALLBACK_WINDOW: f64 = 5.0;
/// Decoded clicks below this confidence fall back to the fixed window.
pub const RESOLVE_FLOOR: f64 = 0.3;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("click ({0:.2}, {1:.2}) is outside the grid")]
    ClickOutsideGrid(f64, f64),
    #[error("entity {0} does not project into the grid")]
    TruthOutsideGrid(u32),
    #[error("invalid feedback config: {0}")]
    Config(String),
    #[error(transparent)]
    Oa(#[from] OaError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    /// Frames skipped between collections; 0 collects every frame.
    pub interval: usize,
    pub perturb_ratio: f64,
    pub miss_distance: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            interval: 0,
            perturb_ratio: 0.0,
            miss_distance: 2.0,
        }
    }
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<(), FeedbackError> {
        if !(0.0..=0.4).contains(&self.perturb_ratio) {
            return Err(FeedbackError::Config(format!(
                "perturb_ratio {} outside [0, 0.4]",
                self.perturb_ratio
            )));
        }
        if !(self.miss_distance > 0.0) {
            return Err(FeedbackError::Config("miss_distance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickOrigin {
    Simulated,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub frame: usize,
    pub click: [f64; 2],
    pub resolved_box2d: Box2D,
    pub prompt_id: PromptId,
    pub origin: ClickOrigin,
    /// Missed truth the click was aimed at; unknown for human clicks.
    pub entity_id: Option<u32>,
    /// Set when decoding failed and the fixed window was cropped instead.
    pub low_quality: bool,
}

/// Whether feedback is collected on `frame_index`.
pub fn should_collect(frame_index: usize, interval: usize) -> bool {
    interval == 0 || frame_index % (interval + 1) == 0
}

/// Visible truths with no detection within `miss_distance` (inclusive).
pub fn find_missed<'a>(truths: impl IntoIterator<Item = &'a Truth>, dets: &[Detection], miss_distance: f64) -> Vec<&'a Truth> {
    truths
        .into_iter()
        .filter(|t| t.visible)
        .filter(|t| !dets.iter().any(|d| center_distance(&d.box3d, &t.box3d) <= miss_distance))
        .collect()
}

/// Projected centre of `truth` plus a seeded offset of at most
/// `perturb_ratio` times the box extent per axis, kept inside the box.
pub fn simulate_click(truth: &Truth, frame: &Frame, perturb_ratio: f64, seed: u64) -> Result<[f64; 2], FeedbackError> {
    let b = truth.box2d;
    if !frame.grid.contains(b.center) {
        return Err(FeedbackError::TruthOutsideGrid(truth.entity_id));
    }
    let mut rng = rng_for(seed, &[tag("click"), frame.index as u64, truth.entity_id as u64]);
    let (lo, hi) = (b.min(), b.max());
    let mut click = b.center;
    for k in 0..2 {
        let r = perturb_ratio * b.extent[k];
        if r > 0.0 {
            click[k] += rng.random_range(-r..=r);
        }
        click[k] = click[k].clamp(lo[k], hi[k]);
    }
    Ok(click)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedClick {
    pub prompt: VisualPrompt,
    pub box2d: Box2D,
    pub fallback: bool,
}

fn fallback_window(frame: &Frame, click: [f64; 2]) -> Box2D {
    let cell = frame.grid.cell_at(click).expect("click checked inside grid");
    Box2D {
        center: frame.grid.cell_center(cell),
        extent: [FALLBACK_WINDOW, FALLBACK_WINDOW],
    }
}

/// Decodes the click as a point query and crops the frame under the
/// decoded footprint, or under a 5×5 window when decoding is not confident.
pub fn click_to_visual_prompt(
    click: [f64; 2],
    frame: &Frame,
    params: &OaParams,
    id: PromptId,
    origin: PromptOrigin,
) -> Result<ResolvedClick, FeedbackError> {
    if !frame.grid.contains(click) {
        return Err(FeedbackError::ClickOutsideGrid(click[0], click[1]));
    }
    let out = params.decode_point(frame, click)?;
    let decoded = (out.confidence >= RESOLVE_FLOOR)
        .then(|| project_to_grid(&out.box3d, &frame.ego, &frame.grid))
        .flatten()
        .map(|b| if frame.mirrored { b.mirrored(&frame.grid) } else { b });
    let crop = |b: &Box2D| crop_descriptor(frame, &b.expanded_to(1.0)).ok();
    let (box2d, descriptor, fallback) = match decoded.and_then(|b| crop(&b).map(|d| (b, d))) {
        Some((b, d)) => (b, d, false),
        None => {
            let b = fallback_window(frame, click);
            let d = crop(&b).expect("window around an in-grid cell is never empty");
            (b, d, true)
        }
    };
    Ok(ResolvedClick {
        prompt: VisualPrompt::new(id, descriptor, origin),
        box2d,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::Provenance;
    use crate::geometry::Box3D;
    use crate::oa::OaConfig;
    use crate::scenesim::{generate_scenario, render_frame, ScenarioConfig};

    fn frame() -> Frame {
        let s = generate_scenario(&ScenarioConfig {
            seed: 5,
            entity_count: 10,
            ..Default::default()
        })
        .unwrap();
        render_frame(&s, 3).unwrap()
    }

    fn det_at(x: f64, y: f64) -> Detection {
        Detection {
            box3d: Box3D::new([x, y, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap(),
            confidence: 0.9,
            provenance: Provenance::Base,
        }
    }

    #[test]
    fn collection_schedule() {
        assert!((0..20).all(|i| should_collect(i, 0)));
        let hits: Vec<usize> = (0..=6).filter(|&i| should_collect(i, 2)).collect();
        assert_eq!(hits, vec![0, 3, 6]);
        assert_eq!((0..70).filter(|&i| should_collect(i, 6)).count(), 10);
    }

    #[test]
    fn miss_boundary_is_inclusive() {
        let f = frame();
        let t = f.visible_truths().next().unwrap();
        let c = t.box3d.center;
        let near = [det_at(c[0] + 1.99, c[1])];
        let far = [det_at(c[0] + 2.01, c[1])];
        let one = std::slice::from_ref(t);
        assert!(find_missed(one, &near, 2.0).is_empty());
        assert_eq!(find_missed(one, &far, 2.0).len(), 1);
        let visible: Vec<&Truth> = f.visible_truths().take(5).collect();
        assert_eq!(find_missed(visible.iter().copied(), &[], 2.0).len(), visible.len());
    }

    #[test]
    fn clicks_stay_in_the_box() {
        let f = frame();
        for t in f.visible_truths() {
            assert_eq!(simulate_click(t, &f, 0.0, 1).unwrap(), t.box2d.center);
            for seed in 0..20 {
                let c = simulate_click(t, &f, 0.4, seed).unwrap();
                assert_eq!(c, simulate_click(t, &f, 0.4, seed).unwrap());
                assert!(t.box2d.contains(c));
                for k in 0..2 {
                    assert!((c[k] - t.box2d.center[k]).abs() <= 0.4 * t.box2d.extent[k] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn background_click_falls_back_to_window() {
        let f = frame();
        let p = OaParams::init(OaConfig::default(), 2).unwrap();
        let bg = (0..f.grid.cells()).find(|&c| f.owner[c].is_none()).unwrap();
        let click = f.grid.cell_center(bg);
        // an untrained decoder sits at its low prior confidence
        let r = click_to_visual_prompt(click, &f, &p, 7, PromptOrigin::External).unwrap();
        assert!(r.fallback);
        assert_eq!(r.box2d.extent, [FALLBACK_WINDOW; 2]);
        assert_eq!(r.prompt.id, 7);
        let again = click_to_visual_prompt(click, &f, &p, 7, PromptOrigin::External).unwrap();
        assert_eq!(r, again);
        assert!(click_to_visual_prompt([-1.0, 3.0], &f, &p, 7, PromptOrigin::External).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(FeedbackConfig::default().validate().is_ok());
        let bad = FeedbackConfig {
            perturb_ratio: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
