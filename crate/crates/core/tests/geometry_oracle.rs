mod common;

use common::{random_box, raster_iou, reference_nms};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttc_core::detectors::{Detection, Provenance};
use ttc_core::geometry::{bev_iou, center_distance, nms, Box3D};

#[test]
fn iou_matches_rasterization_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut overlapping = 0;
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let exact = bev_iou(&a, &b).unwrap();
        let oracle = raster_iou(&a, &b, 4000);
        assert!((exact - oracle).abs() <= 1e-3, "{a:?} {b:?}: {exact} vs {oracle}");
        overlapping += (exact > 0.0) as usize;
    }
    assert!(overlapping > 400);
}

#[test]
fn offset_squares_give_one_third() {
    let a = Box3D::new([0.0, 0.0, 0.5], [2.0, 2.0, 1.0], 0.0).unwrap();
    let b = Box3D::new([1.0, 0.0, 0.5], [2.0, 2.0, 1.0], 0.0).unwrap();
    assert!((bev_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((raster_iou(&a, &b, 2000) - 1.0 / 3.0).abs() < 1e-3);
}

fn det_strategy() -> impl Strategy<Value = Detection> {
    (-4.0f64..4.0, -4.0f64..4.0, 1.0f64..5.0, 1.0f64..3.0, -3.1f64..3.1, prop::sample::select(vec![0.3, 0.5, 0.5, 0.7, 0.9]))
        .prop_map(|(x, y, l, w, yaw, c)| Detection {
            box3d: Box3D::new([x, y, 0.5], [l, w, 1.0], yaw).unwrap(),
            confidence: c,
            provenance: Provenance::Base,
        })
}

fn square(x: f64, y: f64, c: f64) -> Detection {
    Detection {
        box3d: Box3D::new([x, y, 0.5], [2.0, 2.0, 1.0], 0.0).unwrap(),
        confidence: c,
        provenance: Provenance::Base,
    }
}

// Greedy NMS is not monotone in the threshold: at 0.5 the second box
// survives and takes out two boxes that 0.4 would have kept.
#[test]
fn looser_threshold_can_keep_fewer() {
    let dets = [square(0.0, 0.0, 0.9), square(0.76, 0.0, 0.8), square(0.76, 0.6, 0.7), square(0.76, -0.6, 0.6)];
    assert_eq!(ids(&nms(&dets, 0.4), &dets), vec![0, 2, 3]);
    assert_eq!(ids(&nms(&dets, 0.5), &dets), vec![0, 1]);
}

fn ids(v: &[Detection], all: &[Detection]) -> Vec<usize> {
    v.iter().map(|d| all.iter().position(|a| a == d).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn nms_agrees_with_reference(dets in prop::collection::vec(det_strategy(), 0..9), thr in 0.1f64..0.9) {
        let got = nms(&dets, thr);
        prop_assert_eq!(&got, &reference_nms(&dets, thr));
        for (i, a) in got.iter().enumerate() {
            for b in &got[i + 1..] {
                prop_assert!(bev_iou(&a.box3d, &b.box3d).unwrap() < thr);
                prop_assert!(a.confidence >= b.confidence);
            }
        }
        prop_assert!(ids(&got, &dets).windows(2).all(|w| w[0] != w[1]));
        if let Some(top) = dets.iter().map(|d| d.confidence).reduce(f64::max) {
            prop_assert_eq!(got[0].confidence, top);
        }
        prop_assert_eq!(nms(&dets, 1.0 + 1e-9).len(), dets.len());
    }

    #[test]
    fn iou_symmetry_and_rotation(
        a in det_strategy(), b in det_strategy(), theta in -3.1f64..3.1
    ) {
        let (a, b) = (a.box3d, b.box3d);
        let ab = bev_iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - bev_iou(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((bev_iou(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let rot = |x: &Box3D| {
            let (s, c) = theta.sin_cos();
            let p = [c * x.center[0] - s * x.center[1], s * x.center[0] + c * x.center[1], x.center[2]];
            Box3D::new(p, x.size, x.yaw + theta).unwrap()
        };
        prop_assert!((bev_iou(&rot(&a), &rot(&b)).unwrap() - ab).abs() < 1e-9);
    }

    #[test]
    fn center_distance_is_a_metric(a in det_strategy(), b in det_strategy(), c in det_strategy()) {
        let (a, b, c) = (a.box3d, b.box3d, c.box3d);
        prop_assert_eq!(center_distance(&a, &b), center_distance(&b, &a));
        prop_assert!(center_distance(&a, &c) <= center_distance(&a, &b) + center_distance(&b, &c) + 1e-12);
    }
}
