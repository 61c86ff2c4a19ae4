use std::path::Path;
use std::sync::Arc;

use ttc_core::detectors::{Detection, MissMode, MissPolicy, Provenance};
use ttc_core::engine::{run_episode, EngineConfig, MERGE_IOU};
use ttc_core::geometry::{bev_iou, nms, Box3D};
use ttc_core::harness::{load_params, train, TrainSpec, CHECKPOINT_FILE};
use ttc_core::oa::OaParams;
use ttc_core::scenesim::{generate_scenario, ScenarioConfig};

// Shared with the service tests through the target tmp dir.
fn trained() -> Arc<OaParams> {
    let mut spec = TrainSpec::default();
    spec.train.steps = 600;
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("service-checkpoint-600");
    if let Ok(p) = load_params(&dir.join(CHECKPOINT_FILE)) {
        return p;
    }
    Arc::new(train(&spec, &dir, |_| {}).unwrap().0)
}

fn det(x: f64, confidence: f64, provenance: Provenance) -> Detection {
    Detection {
        box3d: Box3D::new([x, 0.0, 0.5], [1.0, 1.0, 1.0], 0.0).unwrap(),
        confidence,
        provenance,
    }
}

#[test]
fn dropped_base_detections_lose_to_stronger_overlaps_in_prompt_frames() {
    let params = trained();
    let mut dropped = 0;
    for seed in 0..3u64 {
        let s = generate_scenario(&ScenarioConfig {
            seed,
            frames: 20,
            entity_count: 14,
            ..ScenarioConfig::default()
        })
        .unwrap();
        let policy = MissPolicy::new(
            MissMode::DistantMiss {
                range_m: 25.0,
                miss_rate: 0.8,
            },
            seed,
        );
        let base = run_episode(&s, &policy, None, &EngineConfig::baseline(seed)).unwrap();
        let ttc_cfg = EngineConfig {
            seed,
            ..EngineConfig::default()
        };
        let ttc = run_episode(&s, &policy, Some(params.clone()), &ttc_cfg).unwrap();
        for (b, t) in base.frames.iter().zip(&ttc.frames) {
            let has_prompt = t.merged.iter().any(|d| d.provenance != Provenance::Base);
            for d in b.merged.iter().filter(|d| !t.merged.contains(d)) {
                dropped += 1;
                assert!(has_prompt, "frame {} lost a base detection without any prompt detection", t.index);
                assert!(
                    t.merged
                        .iter()
                        .any(|k| k.confidence > d.confidence && bev_iou(&k.box3d, &d.box3d).unwrap() >= MERGE_IOU),
                    "frame {}: dropped base detection has no stronger overlapping survivor",
                    t.index
                );
            }
        }
    }
    assert!(dropped > 0, "prompts never displaced a base detection");
}

// A prompt detection can free a base detection that then suppresses
// another base detection, so a base detection may disappear without a
// prompt detection overlapping it.
#[test]
fn suppression_chains_can_drop_base_detections_indirectly() {
    let j = det(0.0, 0.9, Provenance::Base);
    let k = det(0.3, 0.8, Provenance::Base);
    let b = det(0.6, 0.7, Provenance::Base);
    let p = det(-0.3, 0.95, Provenance::Prompt(1));
    let without = nms(&[j.clone(), k.clone(), b.clone()], MERGE_IOU);
    assert_eq!(without, vec![j.clone(), b.clone()]);
    let with = nms(&[j, k.clone(), b.clone(), p.clone()], MERGE_IOU);
    assert_eq!(with, vec![p.clone(), k]);
    assert!(bev_iou(&p.box3d, &b.box3d).unwrap() < MERGE_IOU);
}
