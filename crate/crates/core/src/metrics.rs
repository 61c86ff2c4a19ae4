//! Class-agnostic detection metrics: centre-distance matching, nuScenes-style
//! AP, true-positive errors and the EDS aggregate.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{Detection, Provenance};
use crate::geometry::{center_distance, normalize_angle, Box3D, Pose};

pub const THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Matching distance for recall and the TP errors.
pub const TP_THRESHOLD: f64 = 2.0;
pub const RECALL_POINTS: usize = 101;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("{name} = {value} must be a non-negative error")]
    NegativeError { name: &'static str, value: f64 },
}

/// `(1/6) [3 mAP + recall * sum(1 - min(1, err))]` over ATE, ASE, AOE.
pub fn eds(map: f64, recall: f64, mate: f64, mase: f64, maoe: f64) -> Result<f64, MetricsError> {
    for (name, value) in [("mAP", map), ("recall", recall)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::OutOfRange { name, value });
        }
    }
    for (name, value) in [("mATE", mate), ("mASE", mase), ("mAOE", maoe)] {
        if !(value >= 0.0) {
            return Err(MetricsError::NegativeError { name, value });
        }
    }
    let tp: f64 = [mate, mase, maoe].iter().map(|e| 1.0 - e.min(1.0)).sum();
    Ok((3.0 * map + recall * tp) / 6.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMatch {
    pub threshold: f64,
    /// `(det, truth)` index pairs in match order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_truths: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub per_threshold: Vec<ThresholdMatch>,
}

impl MatchSet {
    pub fn at(&self, threshold: f64) -> Option<&ThresholdMatch> {
        self.per_threshold.iter().find(|m| m.threshold == threshold)
    }
}

/// Detection indices by descending confidence; ties keep input order.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy matching: detections in confidence order each take the nearest
/// unmatched truth within the threshold (lowest index on distance ties).
pub fn match_frame(truths: &[Box3D], dets: &[Detection], thresholds: &[f64]) -> MatchSet {
    let order = ranked(dets);
    let per_threshold = thresholds
        .iter()
        .map(|&th| {
            let mut taken = vec![false; truths.len()];
            let mut pairs = Vec::new();
            let mut unmatched_dets = Vec::new();
            for &d in &order {
                let mut best: Option<(usize, f64)> = None;
                for (t, tb) in truths.iter().enumerate() {
                    if taken[t] {
                        continue;
                    }
                    let dist = center_distance(&dets[d].box3d, tb);
                    if dist <= th && best.is_none_or(|(_, bd)| dist < bd) {
                        best = Some((t, dist));
                    }
                }
                match best {
                    Some((t, _)) => {
                        taken[t] = true;
                        pairs.push((d, t));
                    }
                    None => unmatched_dets.push(d),
                }
            }
            unmatched_dets.sort_unstable();
            ThresholdMatch {
                threshold: th,
                pairs,
                unmatched_dets,
                unmatched_truths: (0..truths.len()).filter(|t| !taken[*t]).collect(),
            }
        })
        .collect();
    MatchSet { per_threshold }
}

/// One frame of detections against its evaluated truths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalFrame {
    pub dets: Vec<Detection>,
    pub truths: Vec<Box3D>,
}

/// Linear interpolation of `(xs, ys)` at `x`, like `numpy.interp` with
/// `right = 0`. `xs` must be non-decreasing.
fn interp(x: f64, xs: &[f64], ys: &[f64]) -> f64 {
    if xs.is_empty() || x > xs[xs.len() - 1] {
        return 0.0;
    }
    if x < xs[0] {
        return ys[0];
    }
    // last index with xs[i] <= x
    let i = xs.partition_point(|v| *v <= x) - 1;
    if i + 1 >= xs.len() || xs[i] == x {
        return ys[i];
    }
    let (x0, x1) = (xs[i], xs[i + 1]);
    ys[i] + (x - x0) * (ys[i + 1] - ys[i]) / (x1 - x0)
}

/// AP from a confidence-ranked TP/FP sequence and the number of truths:
/// precision sampled at 101 recall points, the lowest bins clipped, and
/// the result renormalised above the precision floor.
pub fn ap_from_ranking(tp: &[bool], n_truths: usize) -> f64 {
    if n_truths == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0.0, 0.0);
    for &t in tp {
        if t {
            ctp += 1.0;
        } else {
            cfp += 1.0;
        }
        prec.push(ctp / (ctp + cfp));
        rec.push(ctp / n_truths as f64);
    }
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let sampled: Vec<f64> = (first..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            (interp(r, &rec, &prec) - MIN_PRECISION).max(0.0)
        })
        .collect();
    let mean = sampled.iter().sum::<f64>() / sampled.len() as f64;
    (mean / (1.0 - MIN_PRECISION)).min(1.0)
}

/// Mean TP errors over matched pairs: centre distance, 1 - IoU of the
/// size-aligned boxes, and the absolute yaw difference in [0, pi]. With no
/// pairs every error is 1.
pub fn tp_errors(pairs: &[(&Box3D, &Box3D)]) -> (f64, f64, f64) {
    if pairs.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let n = pairs.len() as f64;
    let mut acc = (0.0, 0.0, 0.0);
    for (d, t) in pairs {
        acc.0 += center_distance(d, t);
        acc.1 += 1.0 - aligned_iou(&d.size, &t.size);
        acc.2 += yaw_difference(d.yaw, t.yaw);
    }
    (acc.0 / n, acc.1 / n, acc.2 / n)
}

pub fn aligned_iou(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|k| a[k].min(b[k])).product();
    let union = a.iter().product::<f64>() + b.iter().product::<f64>() - inter;
    inter / union
}

pub fn yaw_difference(a: f64, b: f64) -> f64 {
    let d = normalize_angle(a - b).abs();
    d.min(PI)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdsReport {
    pub map: f64,
    pub recall: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub eds: f64,
    /// AP at each of `THRESHOLDS`.
    pub aps: Vec<f64>,
    pub truths: usize,
    pub dets: usize,
}

/// Evaluates a frame collection with matching done frame by frame and the
/// PR curve built over all detections ranked by confidence.
pub fn evaluate_frames(frames: &[EvalFrame]) -> EdsReport {
    let n_truths: usize = frames.iter().map(|f| f.truths.len()).sum();
    let n_dets: usize = frames.iter().map(|f| f.dets.len()).sum();
    let matches: Vec<MatchSet> = frames.iter().map(|f| match_frame(&f.truths, &f.dets, &THRESHOLDS)).collect();

    // global ranking: confidence descending, then frame, then index
    let mut global: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| (0..f.dets.len()).map(move |d| (fi, d)))
        .collect();
    global.sort_by(|a, b| frames[b.0].dets[b.1].confidence.total_cmp(&frames[a.0].dets[a.1].confidence));

    let aps: Vec<f64> = (0..THRESHOLDS.len())
        .map(|ti| {
            let matched: Vec<BTreeSet<usize>> = matches
                .iter()
                .map(|m| m.per_threshold[ti].pairs.iter().map(|p| p.0).collect())
                .collect();
            let tp: Vec<bool> = global.iter().map(|&(fi, d)| matched[fi].contains(&d)).collect();
            ap_from_ranking(&tp, n_truths)
        })
        .collect();
    let map = aps.iter().sum::<f64>() / aps.len() as f64;

    let ti = THRESHOLDS.iter().position(|t| *t == TP_THRESHOLD).expect("tp threshold listed");
    let pairs: Vec<(&Box3D, &Box3D)> = frames
        .iter()
        .zip(&matches)
        .flat_map(|(f, m)| m.per_threshold[ti].pairs.iter().map(|&(d, t)| (&f.dets[d].box3d, &f.truths[t])))
        .collect();
    let recall = if n_truths == 0 { 0.0 } else { pairs.len() as f64 / n_truths as f64 };
    let (mate, mase, maoe) = tp_errors(&pairs);
    let eds = eds(map, recall, mate, mase, maoe).expect("ratios in range by construction");
    EdsReport {
        map,
        recall,
        mate,
        mase,
        maoe,
        eds,
        aps,
        truths: n_truths,
        dets: n_dets,
    }
}

/// Ground truth of one frame as the evaluator sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub entity_id: u32,
    pub tag: String,
    pub box3d: Box3D,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub ego: Pose,
    pub style_shifted: bool,
    /// Visible truths only.
    pub truths: Vec<TruthRecord>,
}

impl FrameRecord {
    pub fn from_frame(frame: &crate::scenesim::Frame) -> Self {
        Self {
            index: frame.index,
            ego: frame.ego,
            style_shifted: frame.style.is_shifted(),
            truths: frame
                .visible_truths()
                .map(|t| TruthRecord {
                    entity_id: t.entity_id,
                    tag: t.tag.clone(),
                    box3d: t.box3d,
                    distance: t.distance,
                })
                .collect(),
        }
    }
}

/// Slices of the evaluation. Tag and entity subsets give each detection the
/// subset of its nearest truth within the widest threshold; detections near
/// no truth are left out of those subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Subset {
    All,
    /// Truths and detections at least `min_range_m` from the ego.
    Distant { min_range_m: f64 },
    Tags { tags: BTreeSet<String> },
    Entities { ids: BTreeSet<u32> },
    /// Frames inside the style-shift window.
    StyleShifted,
}

impl Subset {
    pub fn name(&self) -> String {
        match self {
            Subset::All => "all".into(),
            Subset::Distant { min_range_m } => format!("distant_{min_range_m}m"),
            Subset::Tags { tags } => format!("tags_{}", tags.iter().cloned().collect::<Vec<_>>().join("+")),
            Subset::Entities { .. } => "entities".into(),
            Subset::StyleShifted => "style_shifted".into(),
        }
    }

    pub(crate) fn truth_in(&self, t: &TruthRecord) -> bool {
        match self {
            Subset::All | Subset::StyleShifted => true,
            Subset::Distant { min_range_m } => t.distance >= *min_range_m,
            Subset::Tags { tags } => tags.contains(&t.tag),
            Subset::Entities { ids } => ids.contains(&t.entity_id),
        }
    }

    fn det_in(&self, d: &Detection, frame: &FrameRecord) -> bool {
        match self {
            Subset::All | Subset::StyleShifted => true,
            Subset::Distant { min_range_m } => {
                let c = d.box3d.ground_center();
                let e = frame.ego.position;
                (c[0] - e[0]).hypot(c[1] - e[1]) >= *min_range_m
            }
            Subset::Tags { .. } | Subset::Entities { .. } => {
                let widest = THRESHOLDS[THRESHOLDS.len() - 1];
                let mut best: Option<(&TruthRecord, f64)> = None;
                for t in &frame.truths {
                    let dist = center_distance(&d.box3d, &t.box3d);
                    if dist <= widest && best.is_none_or(|(_, bd)| dist < bd) {
                        best = Some((t, dist));
                    }
                }
                best.is_some_and(|(t, _)| self.truth_in(t))
            }
        }
    }

    /// Restricts a run to this subset.
    pub fn select(&self, records: &[FrameRecord], dets: &[Vec<Detection>]) -> Vec<EvalFrame> {
        records
            .iter()
            .zip(dets)
            .filter(|(r, _)| !matches!(self, Subset::StyleShifted) || r.style_shifted)
            .map(|(r, ds)| EvalFrame {
                truths: r.truths.iter().filter(|t| self.truth_in(t)).map(|t| t.box3d).collect(),
                dets: ds.iter().filter(|d| self.det_in(d, r)).cloned().collect(),
            })
            .collect()
    }
}

pub fn evaluate_subset(subset: &Subset, records: &[FrameRecord], dets: &[Vec<Detection>]) -> EdsReport {
    evaluate_frames(&subset.select(records, dets))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallCount {
    pub hits: usize,
    pub total: usize,
}

impl RecallCount {
    pub fn add(&mut self, other: RecallCount) {
        self.hits += other.hits;
        self.total += other.total;
    }

    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

/// Per-frame recall of subset truths over the frames after each entity's
/// first miss. A truth counts as found when any detection lies within
/// `miss_distance`; with feedback on every frame the first miss is the
/// frame the entity was clicked.
pub fn recall_after_first_miss(
    subset: &Subset,
    records: &[FrameRecord],
    dets: &[Vec<Detection>],
    miss_distance: f64,
) -> RecallCount {
    let mut first_miss: BTreeMap<u32, usize> = BTreeMap::new();
    let mut out = RecallCount::default();
    for (k, (r, ds)) in records.iter().zip(dets).enumerate() {
        for t in r.truths.iter().filter(|t| subset.truth_in(t)) {
            let found = ds.iter().any(|d| center_distance(&d.box3d, &t.box3d) <= miss_distance);
            match first_miss.get(&t.entity_id) {
                Some(&m) if m < k => {
                    out.total += 1;
                    out.hits += found as usize;
                }
                Some(_) => {}
                None => {
                    if !found {
                        first_miss.insert(t.entity_id, k);
                    }
                }
            }
        }
    }
    out
}

/// Per-target recall from frame offset 1 on, counting only detections that
/// carry the target's own prompt within `TP_THRESHOLD`. `targets` maps an
/// entity to the prompt preloaded for it at frame 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OffsetCurve {
    /// Index k holds offset k; offset 0 is always empty.
    pub hits: Vec<usize>,
    pub visible: Vec<usize>,
}

impl OffsetCurve {
    pub fn add_episode(&mut self, records: &[FrameRecord], dets: &[Vec<Detection>], targets: &[(u32, u64)]) {
        let n = records.len();
        if self.hits.len() < n {
            self.hits.resize(n, 0);
            self.visible.resize(n, 0);
        }
        for (k, (r, ds)) in records.iter().zip(dets).enumerate().skip(1) {
            for &(entity, prompt) in targets {
                let Some(t) = r.truths.iter().find(|t| t.entity_id == entity) else {
                    continue;
                };
                self.visible[k] += 1;
                let hit = ds
                    .iter()
                    .any(|d| d.provenance == Provenance::Prompt(prompt) && center_distance(&d.box3d, &t.box3d) <= TP_THRESHOLD);
                if hit {
                    self.hits[k] += 1;
                }
            }
        }
    }

    pub fn recall(&self, offset: usize) -> Option<f64> {
        let v = *self.visible.get(offset)?;
        (offset > 0 && v > 0).then(|| self.hits[offset] as f64 / v as f64)
    }

    pub fn points(&self) -> Vec<(usize, f64)> {
        (1..self.hits.len()).filter_map(|k| self.recall(k).map(|r| (k, r))).collect()
    }
}

/// One row of a flat results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    pub subset: String,
    pub map: f64,
    pub recall: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub eds: f64,
    pub ap_0_5: f64,
    pub ap_1_0: f64,
    pub ap_2_0: f64,
    pub ap_4_0: f64,
    pub truths: usize,
    pub dets: usize,
}

impl ReportRow {
    pub fn new(arm: &str, subset: &str, r: &EdsReport) -> Self {
        Self {
            arm: arm.into(),
            subset: subset.into(),
            map: r.map,
            recall: r.recall,
            mate: r.mate,
            mase: r.mase,
            maoe: r.maoe,
            eds: r.eds,
            ap_0_5: r.aps[0],
            ap_1_0: r.aps[1],
            ap_2_0: r.aps[2],
            ap_4_0: r.aps[3],
            truths: r.truths,
            dets: r.dets,
        }
    }
}

pub fn write_csv<W: std::io::Write>(rows: &[ReportRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64) -> Box3D {
        Box3D::new([x, y, 0.8], [4.0, 2.0, 1.6], 0.3).unwrap()
    }

    fn d(x: f64, y: f64, c: f64) -> Detection {
        Detection {
            box3d: b(x, y),
            confidence: c,
            provenance: Provenance::Base,
        }
    }

    #[test]
    fn eds_examples() {
        let v = eds(0.5, 0.8, 0.4, 0.3, 0.6).unwrap();
        assert!((v - (1.5 + 0.8 * 1.7) / 6.0).abs() < 1e-12);
        assert_eq!(eds(1.0, 1.0, 0.0, 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(eds(0.0, 0.0, 0.3, 2.0, 0.1).unwrap(), 0.0);
        assert!(eds(1.2, 0.5, 0.0, 0.0, 0.0).is_err());
        assert!(eds(0.5, 0.5, -0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn threshold_bracketing() {
        let m = match_frame(&[b(0.0, 0.0)], &[d(0.3, 0.0, 0.9)], &THRESHOLDS);
        assert!(m.per_threshold.iter().all(|t| t.pairs == [(0, 0)]));
        let m = match_frame(&[b(0.0, 0.0)], &[d(3.0, 0.0, 0.9)], &THRESHOLDS);
        let matched: Vec<f64> = m.per_threshold.iter().filter(|t| !t.pairs.is_empty()).map(|t| t.threshold).collect();
        assert_eq!(matched, vec![4.0]);
    }

    #[test]
    fn confident_detection_claims_first() {
        let truths = [b(0.0, 0.0), b(1.5, 0.0)];
        // the lower-confidence det is nearer truth 0 but comes second
        let dets = [d(1.0, 0.0, 0.4), d(0.7, 0.0, 0.9)];
        let m = match_frame(&truths, &dets, &[2.0]);
        assert_eq!(m.per_threshold[0].pairs, vec![(1, 0), (0, 1)]);
    }

    #[test]
    fn perfect_and_empty() {
        let f = EvalFrame {
            truths: vec![b(0.0, 0.0), b(10.0, 0.0)],
            dets: vec![d(0.0, 0.0, 0.9), d(10.0, 0.0, 0.8)],
        };
        let r = evaluate_frames(&[f.clone()]);
        assert!((r.map - 1.0).abs() < 1e-12);
        assert_eq!(r.recall, 1.0);
        assert!((r.eds - 1.0).abs() < 1e-12);
        let r = evaluate_frames(&[EvalFrame { dets: vec![], ..f }]);
        assert_eq!(r.map, 0.0);
        assert_eq!(r.eds, 0.0);
        assert_eq!((r.mate, r.mase, r.maoe), (1.0, 1.0, 1.0));
    }

    #[test]
    fn yaw_error_clamps() {
        let t = b(0.0, 0.0);
        let mut q = t;
        q.yaw = normalize_angle(t.yaw + PI);
        let (_, _, aoe) = tp_errors(&[(&q, &t)]);
        assert!((aoe - PI).abs() < 1e-12);
        assert_eq!(eds(1.0, 1.0, 0.0, 0.0, aoe).unwrap(), (3.0 + 2.0) / 6.0);
    }

    #[test]
    fn interp_matches_numpy_conventions() {
        let xs = [0.2, 0.5, 0.5, 0.9];
        let ys = [1.0, 0.8, 0.6, 0.4];
        assert_eq!(interp(0.0, &xs, &ys), 1.0);
        assert!((interp(0.35, &xs, &ys) - 0.9).abs() < 1e-12);
        assert_eq!(interp(0.5, &xs, &ys), 0.6);
        assert_eq!(interp(0.95, &xs, &ys), 0.0);
        assert_eq!(interp(0.9, &xs, &ys), 0.4);
    }

    fn record(index: usize, truths: &[(u32, f64)]) -> FrameRecord {
        FrameRecord {
            index,
            ego: Pose::new([0.0, 0.0], 0.0),
            style_shifted: false,
            truths: truths
                .iter()
                .map(|&(id, x)| TruthRecord {
                    entity_id: id,
                    tag: "car".into(),
                    box3d: b(x, 0.0),
                    distance: x.abs(),
                })
                .collect(),
        }
    }

    #[test]
    fn recall_counts_frames_after_the_first_miss() {
        let records: Vec<FrameRecord> = (0..5).map(|k| record(k, &[(1, 10.0), (2, 40.0)])).collect();
        // entity 1 is found on frame 0, missed on 1, then found on 3 and 4;
        // entity 2 is never missed
        let dets = vec![
            vec![d(10.0, 0.0, 0.9), d(40.0, 0.0, 0.9)],
            vec![d(40.0, 0.0, 0.9)],
            vec![d(40.0, 0.0, 0.9)],
            vec![d(11.9, 0.0, 0.9), d(40.0, 0.0, 0.9)],
            vec![d(10.0, 0.0, 0.9), d(40.0, 0.0, 0.9)],
        ];
        let all = recall_after_first_miss(&Subset::All, &records, &dets, 2.0);
        assert_eq!(all, RecallCount { hits: 2, total: 3 });
        let far = recall_after_first_miss(&Subset::Distant { min_range_m: 30.0 }, &records, &dets, 2.0);
        assert_eq!(far.rate(), None);
    }
}
