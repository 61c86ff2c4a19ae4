mod common;

use std::f64::consts::PI;

use common::{dist, random_scene, ref_eds, ref_match};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttc_core::detectors::Detection;
use ttc_core::geometry::Box3D;
use ttc_core::metrics::{ap_from_ranking, eds, evaluate_frames, match_frame, tp_errors, EvalFrame, THRESHOLDS};

// AP values from a numpy transcription of the nuScenes routine
// (np.interp over 101 recall points, bins above 0.1 recall, 0.1 precision floor).
#[test]
fn ap_matches_numpy_values() {
    let cases: [(&[u8], usize, f64); 4] = [
        (&[1, 0, 1, 1, 0, 0, 1, 0, 1, 0], 6, 0.46903390162649417),
        (&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0], 8, 0.5777777777777778),
        (&[0, 0, 0, 1, 1, 1, 1, 1, 1, 1], 7, 0.47444708994709),
        (&[1, 0, 0, 0, 0, 0, 0, 0, 0, 0], 1, 0.9888888888888892),
    ];
    for (seq, n, want) in cases {
        let tp: Vec<bool> = seq.iter().map(|v| *v == 1).collect();
        assert!((ap_from_ranking(&tp, n) - want).abs() < 1e-12, "{seq:?}");
    }
    // five hits then misses over eight truths: precision 1 up to recall 0.625,
    // i.e. 52 of the 90 kept bins at 0.9 above the floor
    assert!((ap_from_ranking(&[true, true, true, true, true, false], 8) - 52.0 / 90.0).abs() < 1e-12);
}

#[test]
fn eds_reference_value() {
    let want = (3.0 * 0.5 + 0.8 * ((1.0 - 0.4) + (1.0 - 0.3) + (1.0 - 0.6))) / 6.0;
    assert!((eds(0.5, 0.8, 0.4, 0.3, 0.6).unwrap() - want).abs() < 1e-12);
    assert!((want - 0.476667).abs() < 1e-6);
}

#[test]
fn pipeline_agrees_with_reference_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let scene = random_scene(&mut rng);
        for f in &scene {
            for th in THRESHOLDS {
                let m = match_frame(&f.truths, &f.dets, &[th]);
                assert_eq!(m.per_threshold[0].pairs, ref_match(&f.truths, &f.dets, th));
            }
        }
        let r = evaluate_frames(&scene);
        let (map, recall, e) = ref_eds(&scene);
        assert!((r.map - map).abs() <= 1e-9, "{} vs {}", r.map, map);
        assert!((r.recall - recall).abs() <= 1e-9);
        assert!((r.eds - e).abs() <= 1e-9, "{} vs {}", r.eds, e);
    }
}

#[test]
fn tp_errors_match_per_pair_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pairs: Vec<(Box3D, Box3D)> = (0..50)
        .map(|_| {
            let mk = |rng: &mut ChaCha8Rng| {
                Box3D::new(
                    [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 1.0],
                    [rng.random_range(0.5..5.0), rng.random_range(0.5..3.0), rng.random_range(1.0..3.0)],
                    rng.random_range(-PI..PI),
                )
                .unwrap()
            };
            (mk(&mut rng), mk(&mut rng))
        })
        .collect();
    let refs: Vec<(&Box3D, &Box3D)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    let (ate, ase, aoe) = tp_errors(&refs);
    let f = EvalFrame::default();
    let _ = f;
    let mut s = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        s.0 += dist(a, b);
        let inter: f64 = (0..3).map(|k| a.size[k].min(b.size[k])).product();
        let va: f64 = a.size.iter().product();
        let vb: f64 = b.size.iter().product();
        s.1 += 1.0 - inter / (va + vb - inter);
        let d = (a.yaw - b.yaw).abs();
        s.2 += if d > PI { 2.0 * PI - d } else { d };
    }
    let n = pairs.len() as f64;
    assert!((ate - s.0 / n).abs() < 1e-12);
    assert!((ase - s.1 / n).abs() < 1e-12);
    assert!((aoe - s.2 / n).abs() < 1e-12);
}

proptest! {
    #[test]
    fn eds_is_monotone_and_bounded(
        map in 0.0f64..=1.0, recall in 0.0f64..=1.0,
        ate in 0.0f64..3.0, ase in 0.0f64..3.0, aoe in 0.0f64..4.0, bump in 0.0f64..1.0,
    ) {
        let e = eds(map, recall, ate, ase, aoe).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!(eds((map + bump).min(1.0), recall, ate, ase, aoe).unwrap() >= e);
        prop_assert!(eds(map, (recall + bump).min(1.0), ate, ase, aoe).unwrap() >= e);
        prop_assert!(eds(map, recall, ate + bump, ase, aoe).unwrap() <= e);
        prop_assert!(eds(map, recall, ate, ase + bump, aoe).unwrap() <= e);
        prop_assert!(eds(map, recall, ate, ase, aoe + bump).unwrap() <= e);
    }

    #[test]
    fn metrics_depend_only_on_confidence_rank(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng);
        let squashed: Vec<EvalFrame> = scene
            .iter()
            .map(|f| EvalFrame {
                truths: f.truths.clone(),
                dets: f.dets.iter().map(|d| Detection { confidence: d.confidence * d.confidence * 0.5, ..d.clone() }).collect(),
            })
            .collect();
        let a = evaluate_frames(&scene);
        let b = evaluate_frames(&squashed);
        prop_assert_eq!(a.map, b.map);
        prop_assert_eq!(a.recall, b.recall);
        prop_assert_eq!(a.eds, b.eds);
    }

    #[test]
    fn dropping_a_true_positive_never_helps(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng);
        let before = evaluate_frames(&scene);
        for (fi, f) in scene.iter().enumerate() {
            let m = match_frame(&f.truths, &f.dets, &[2.0]);
            if let Some(&(d, _)) = m.per_threshold[0].pairs.first() {
                let mut cut = scene.clone();
                cut[fi].dets.remove(d);
                let after = evaluate_frames(&cut);
                prop_assert!(after.recall <= before.recall + 1e-12);
                break;
            }
        }
    }
}
