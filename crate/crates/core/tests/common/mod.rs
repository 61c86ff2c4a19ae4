//! Independent reference implementations shared by the oracle tests and
//! the acceptance suite.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use ttc_core::detectors::{Detection, Provenance};
use ttc_core::geometry::{bev_iou, Box3D};
use ttc_core::metrics::{EvalFrame, THRESHOLDS};

pub fn corners(b: &Box3D) -> Vec<[f64; 2]> {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.size[0] / 2.0, b.size[1] / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .iter()
        .map(|&(x, y)| [b.center[0] + c * x - s * y, b.center[1] + s * x + c * y])
        .collect()
}

/// x-interval of a convex polygon on the horizontal line at `y`.
pub fn span(poly: &[[f64; 2]], y: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        if (a[1] - y) * (b[1] - y) <= 0.0 && a[1] != b[1] {
            let x = a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Scanline rasterization: exact along x, midpoint rows along y.
pub fn raster_iou(a: &Box3D, b: &Box3D, rows: usize) -> f64 {
    let (pa, pb) = (corners(a), corners(b));
    let ys = pa.iter().chain(&pb).map(|p| p[1]);
    let y0 = ys.clone().fold(f64::INFINITY, f64::min);
    let y1 = ys.fold(f64::NEG_INFINITY, f64::max);
    let h = (y1 - y0) / rows as f64;
    let (mut inter, mut area_a, mut area_b) = (0.0, 0.0, 0.0);
    for r in 0..rows {
        let y = y0 + (r as f64 + 0.5) * h;
        let sa = span(&pa, y);
        let sb = span(&pb, y);
        if let Some((l, r)) = sa {
            area_a += (r - l) * h;
        }
        if let Some((l, r)) = sb {
            area_b += (r - l) * h;
        }
        if let (Some((la, ra)), Some((lb, rb))) = (sa, sb) {
            inter += (ra.min(rb) - la.max(lb)).max(0.0) * h;
        }
    }
    inter / (area_a + area_b - inter)
}

pub fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.5],
        [rng.random_range(0.5..6.0), rng.random_range(0.5..3.0), 1.5],
        rng.random_range(-3.2..3.2),
    )
    .unwrap()
}

/// Straight restatement of greedy NMS: take the best remaining, drop its
/// overlaps, repeat.
pub fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut left: Vec<usize> = (0..dets.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if dets[left[k]].confidence > dets[left[best]].confidence {
                best = k;
            }
        }
        let i = left.remove(best);
        out.push(dets[i].clone());
        left.retain(|&j| bev_iou(&dets[i].box3d, &dets[j].box3d).unwrap() < thr);
    }
    out
}

pub fn dist(a: &Box3D, b: &Box3D) -> f64 {
    ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt()
}

/// For each threshold: per frame, the set of matched det indices and the
/// matched (det, truth) pairs.
pub fn ref_match(truths: &[Box3D], dets: &[Detection], th: f64) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    // insertion sort by confidence descending, stable
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && dets[idx[j]].confidence > dets[idx[j - 1]].confidence {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut used = vec![false; truths.len()];
    let mut out = vec![];
    for d in idx {
        let mut pick = usize::MAX;
        let mut pick_d = f64::INFINITY;
        for t in 0..truths.len() {
            let x = dist(&dets[d].box3d, &truths[t]);
            if !used[t] && x <= th && x < pick_d {
                pick = t;
                pick_d = x;
            }
        }
        if pick != usize::MAX {
            used[pick] = true;
            out.push((d, pick));
        }
    }
    out
}

pub fn ref_ap(frames: &[EvalFrame], th: f64) -> f64 {
    let npos: usize = frames.iter().map(|f| f.truths.len()).sum();
    let mut scored: Vec<(f64, usize, usize, bool)> = vec![];
    for (fi, f) in frames.iter().enumerate() {
        let m = ref_match(&f.truths, &f.dets, th);
        for (di, d) in f.dets.iter().enumerate() {
            scored.push((d.confidence, fi, di, m.iter().any(|p| p.0 == di)));
        }
    }
    if npos == 0 || scored.is_empty() {
        return 0.0;
    }
    // stable by (frame, index) within equal confidence
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut curve = vec![];
    for s in &scored {
        if s.3 {
            tp += 1.0
        } else {
            fp += 1.0
        }
        curve.push((tp / npos as f64, tp / (tp + fp)));
    }
    let mut total = 0.0;
    for i in 11..=100 {
        let r = i as f64 / 100.0;
        let p = if r < curve[0].0 {
            curve[0].1
        } else if r > curve[curve.len() - 1].0 {
            0.0
        } else {
            let mut k = 0;
            while k + 1 < curve.len() && curve[k + 1].0 <= r {
                k += 1;
            }
            if curve[k].0 == r || k + 1 == curve.len() {
                curve[k].1
            } else {
                let (r0, p0) = curve[k];
                let (r1, p1) = curve[k + 1];
                p0 + (p1 - p0) * (r - r0) / (r1 - r0)
            }
        };
        total += if p > 0.1 { p - 0.1 } else { 0.0 };
    }
    (total / 90.0 / 0.9).min(1.0)
}

pub fn ref_eds(frames: &[EvalFrame]) -> (f64, f64, f64) {
    let map = THRESHOLDS.iter().map(|t| ref_ap(frames, *t)).sum::<f64>() / 4.0;
    let npos: usize = frames.iter().map(|f| f.truths.len()).sum();
    let mut n = 0usize;
    let (mut ate, mut ase, mut aoe) = (0.0, 0.0, 0.0);
    for f in frames {
        for (d, t) in ref_match(&f.truths, &f.dets, 2.0) {
            let a = &f.dets[d].box3d;
            let b = &f.truths[t];
            n += 1;
            ate += dist(a, b);
            let inter = a.size[0].min(b.size[0]) * a.size[1].min(b.size[1]) * a.size[2].min(b.size[2]);
            let va = a.size[0] * a.size[1] * a.size[2];
            let vb = b.size[0] * b.size[1] * b.size[2];
            ase += 1.0 - inter / (va + vb - inter);
            let mut dy = (a.yaw - b.yaw).rem_euclid(2.0 * PI);
            if dy > PI {
                dy = 2.0 * PI - dy;
            }
            aoe += dy;
        }
    }
    let (ate, ase, aoe) = if n == 0 { (1.0, 1.0, 1.0) } else { (ate / n as f64, ase / n as f64, aoe / n as f64) };
    let recall = if npos == 0 { 0.0 } else { n as f64 / npos as f64 };
    let c = |e: f64| 1.0 - if e > 1.0 { 1.0 } else { e };
    (map, recall, (3.0 * map + recall * (c(ate) + c(ase) + c(aoe))) / 6.0)
}

pub fn random_scene(rng: &mut ChaCha8Rng) -> Vec<EvalFrame> {
    let frames = rng.random_range(1..=3);
    (0..frames)
        .map(|_| {
            let nt = rng.random_range(0..=10);
            let truths: Vec<Box3D> = (0..nt)
                .map(|_| {
                    let s = [rng.random_range(0.5..5.0), rng.random_range(0.5..2.5), rng.random_range(1.0..3.0)];
                    Box3D::new([rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), 1.0], s, rng.random_range(-PI..PI)).unwrap()
                })
                .collect();
            let nd = rng.random_range(0..=10);
            let dets = (0..nd)
                .map(|_| {
                    let base = if !truths.is_empty() && rng.random_bool(0.7) {
                        truths[rng.random_range(0..truths.len())]
                    } else {
                        Box3D::new([rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), 1.0], [4.0, 2.0, 1.5], 0.0).unwrap()
                    };
                    let c = [base.center[0] + rng.random_range(-3.0..3.0), base.center[1] + rng.random_range(-3.0..3.0), base.center[2]];
                    let s = base.size.map(|v| v * rng.random_range(0.8..1.25));
                    Detection {
                        box3d: Box3D::new(c, s, base.yaw + rng.random_range(-1.0..1.0)).unwrap(),
                        // coarse confidences so ties occur
                        confidence: (rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0,
                        provenance: Provenance::Base,
                    }
                })
                .collect();
            EvalFrame { dets, truths }
        })
        .collect()
}


/// Up to `max` detections scattered over a small area so that many overlap.
pub fn random_dets(rng: &mut ChaCha8Rng, max: usize) -> Vec<Detection> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| Detection {
            box3d: Box3D::new(
                [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), 0.5],
                [rng.random_range(1.0..5.0), rng.random_range(1.0..3.0), 1.0],
                rng.random_range(-3.1..3.1),
            )
            .unwrap(),
            confidence: (rng.random_range(0.3..1.0f64) * 10.0).round() / 10.0,
            provenance: Provenance::Base,
        })
        .collect()
}
