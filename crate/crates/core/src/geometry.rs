//! Ground-plane geometry shared by the simulator, the adapter, and the metrics:
//! 3D boxes, ego poses, the BEV feature grid, rotated footprint IoU, and NMS.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Footprints below this area (m²) are treated as degenerate.
const MIN_FOOTPRINT_AREA: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box footprint (area {0:e} m²)")]
    DegenerateBox(f64),
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if r >= PI {
        r -= 2.0 * PI;
    }
    r
}

/// Oriented 3D box. `center` is (x, y, z) in meters, `size` is (length, width, height).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self, GeometryError> {
        if !size.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(GeometryError::InvalidBox(format!("size {size:?}")));
        }
        if !center.iter().all(|c| c.is_finite()) || !yaw.is_finite() {
            return Err(GeometryError::InvalidBox("non-finite pose".into()));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn ground_center(&self) -> [f64; 2] {
        [self.center[0], self.center[1]]
    }

    pub fn footprint_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    /// Footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.size[0] / 2.0;
        let hw = self.size[1] / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| {
            [
                self.center[0] + c * lx - s * ly,
                self.center[1] + s * lx + c * ly,
            ]
        })
    }

    /// Whether a ground-plane point lies inside the footprint.
    pub fn contains_ground_point(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.size[0] / 2.0 && ly.abs() <= self.size[1] / 2.0
    }
}

/// Axis-aligned box in grid units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub center: [f64; 2],
    pub extent: [f64; 2],
}

impl Box2D {
    pub fn from_bounds(min: [f64; 2], max: [f64; 2]) -> Self {
        Self {
            center: [(min[0] + max[0]) / 2.0, (min[1] + max[1]) / 2.0],
            extent: [max[0] - min[0], max[1] - min[1]],
        }
    }

    pub fn min(&self) -> [f64; 2] {
        [
            self.center[0] - self.extent[0] / 2.0,
            self.center[1] - self.extent[1] / 2.0,
        ]
    }

    pub fn max(&self) -> [f64; 2] {
        [
            self.center[0] + self.extent[0] / 2.0,
            self.center[1] + self.extent[1] / 2.0,
        ]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let lo = self.min();
        let hi = self.max();
        p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1]
    }

    /// Same centre, each extent raised to at least `min`.
    pub fn expanded_to(&self, min: f64) -> Self {
        Self {
            center: self.center,
            extent: self.extent.map(|e| e.max(min)),
        }
    }

    /// Mirror across the vertical grid axis (`u -> width - u`).
    pub fn mirrored(&self, grid: &GridSpec) -> Self {
        Self {
            center: [grid.width as f64 - self.center[0], self.center[1]],
            extent: self.extent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 2],
    pub heading: f64,
}

impl Pose {
    pub fn new(position: [f64; 2], heading: f64) -> Self {
        Self {
            position,
            heading: normalize_angle(heading),
        }
    }

    /// World point to ego frame (x forward, y left).
    pub fn to_ego(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.position[0];
        let dy = p[1] - self.position[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [
            self.position[0] + c * p[0] - s * p[1],
            self.position[1] + s * p[0] + c * p[1],
        ]
    }
}

/// The ego-centred BEV grid standing in for the image plane.
///
/// Grid column `u` runs along ego x (forward), row `v` along ego y (left);
/// cell `(row, col)` spans `[col, col+1) x [row, row+1)` in grid units and the
/// ego sits at the grid centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    /// Side length covered by the grid, meters.
    pub extent_m: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            extent_m: 100.0,
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.extent_m / self.width as f64
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0 && self.height > 0 && self.extent_m > 0.0
    }

    /// Ego-frame metric point to grid units.
    pub fn ego_to_grid(&self, p: [f64; 2]) -> [f64; 2] {
        let cs = self.extent_m / self.width as f64;
        let cs_v = self.extent_m / self.height as f64;
        [
            (p[0] + self.extent_m / 2.0) / cs,
            (p[1] + self.extent_m / 2.0) / cs_v,
        ]
    }

    pub fn grid_to_ego(&self, g: [f64; 2]) -> [f64; 2] {
        let cs = self.extent_m / self.width as f64;
        let cs_v = self.extent_m / self.height as f64;
        [
            g[0] * cs - self.extent_m / 2.0,
            g[1] * cs_v - self.extent_m / 2.0,
        ]
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Centre of a flat cell index in grid units.
    pub fn cell_center(&self, idx: usize) -> [f64; 2] {
        let row = idx / self.width;
        let col = idx % self.width;
        [col as f64 + 0.5, row as f64 + 0.5]
    }

    /// Flat index of the cell containing a grid point, if inside.
    pub fn cell_at(&self, g: [f64; 2]) -> Option<usize> {
        if !(g[0] >= 0.0 && g[1] >= 0.0) {
            return None;
        }
        let col = g[0].floor() as usize;
        let row = g[1].floor() as usize;
        (col < self.width && row < self.height).then(|| self.cell_index(row, col))
    }

    pub fn contains(&self, g: [f64; 2]) -> bool {
        g[0] >= 0.0 && g[1] >= 0.0 && g[0] <= self.width as f64 && g[1] <= self.height as f64
    }

    /// Flat index of the column-mirrored cell.
    pub fn mirror_cell(&self, idx: usize) -> usize {
        let row = idx / self.width;
        let col = idx % self.width;
        self.cell_index(row, self.width - 1 - col)
    }
}

/// Ground-plane distance between box centres; height is ignored.
pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of `subject` by the convex CCW polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let sc = side(cur);
            let sp = side(prev);
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection-over-union of the rotated ground footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64, GeometryError> {
    let area_a = a.footprint_area();
    let area_b = b.footprint_area();
    for area in [area_a, area_b] {
        if !(area > MIN_FOOTPRINT_AREA) {
            return Err(GeometryError::DegenerateBox(area));
        }
    }
    // cheap reject on circumscribed circles
    let ra = a.size[0].hypot(a.size[1]) / 2.0;
    let rb = b.size[0].hypot(b.size[1]) / 2.0;
    if center_distance(a, b) > ra + rb {
        return Ok(0.0);
    }
    let inter = polygon_area(&clip_convex(&a.footprint(), &b.footprint()));
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Anything NMS can rank and compare.
pub trait Scored {
    fn bev_box(&self) -> &Box3D;
    fn score(&self) -> f64;
}

/// Greedy rotated-BEV NMS. A candidate is suppressed when its IoU with an
/// already kept box reaches `iou_threshold`. Output is in descending score
/// order; equal scores keep input order.
pub fn nms<T: Scored + Clone>(dets: &[T], iou_threshold: f64) -> Vec<T> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score().total_cmp(&dets[i].score()));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            bev_iou(dets[k].bev_box(), dets[i].bev_box()).unwrap_or(0.0) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Ego-relative axis-aligned bounding box of the footprint in grid units,
/// clamped to the grid. `None` when the footprint is entirely outside.
pub fn project_to_grid(b: &Box3D, ego: &Pose, grid: &GridSpec) -> Option<Box2D> {
    if !grid.is_valid() {
        return None;
    }
    let corners = b.footprint().map(|p| grid.ego_to_grid(ego.to_ego(p)));
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in corners {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let bounds = [grid.width as f64, grid.height as f64];
    for k in 0..2 {
        lo[k] = lo[k].max(0.0);
        hi[k] = hi[k].min(bounds[k]);
        if hi[k] <= lo[k] {
            return None;
        }
    }
    Some(Box2D::from_bounds(lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, l: f64, w: f64, yaw: f64) -> Box3D {
        Box3D::new([x, y, 0.5], [l, w, 1.0], yaw).unwrap()
    }

    #[derive(Clone, Debug)]
    struct D(Box3D, f64);
    impl Scored for D {
        fn bev_box(&self) -> &Box3D {
            &self.0
        }
        fn score(&self) -> f64 {
            self.1
        }
    }

    #[test]
    fn center_distance_examples() {
        assert_eq!(center_distance(&bx(0.0, 0.0, 1.0, 1.0, 0.0), &bx(3.0, 4.0, 1.0, 1.0, 0.0)), 5.0);
        let a = bx(1.0, 2.0, 1.0, 1.0, 0.3);
        assert_eq!(center_distance(&a, &a), 0.0);
        let d = center_distance(&bx(0.0, 0.0, 1.0, 1.0, 0.0), &bx(1.99, 0.0, 1.0, 1.0, 0.0));
        assert!((d - 1.99).abs() < 1e-12 && d <= 2.0);
    }

    #[test]
    fn iou_basic_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        assert!((bev_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bev_iou(&a, &bx(10.0, 0.0, 2.0, 2.0, 0.0)).unwrap(), 0.0);
        let b = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((bev_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // touching edges
        assert!(bev_iou(&a, &bx(2.0, 0.0, 2.0, 2.0, 0.0)).unwrap() < 1e-12);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let tiny = Box3D { center: [0.0; 3], size: [1e-6, 1e-6, 1.0], yaw: 0.0 };
        assert!(matches!(bev_iou(&a, &tiny), Err(GeometryError::DegenerateBox(_))));
        assert!(Box3D::new([0.0; 3], [0.0, 1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn angle_normalization_is_half_open() {
        assert_eq!(normalize_angle(PI), -PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(-PI), -PI);
        for k in -20..20 {
            let a = normalize_angle(k as f64 * 0.77);
            assert!((-PI..PI).contains(&a));
        }
    }

    #[test]
    fn nms_examples() {
        // two 2x2 boxes offset by 0.5 m: IoU = 1.5/2.5 = 0.6
        let a = D(bx(0.0, 0.0, 2.0, 2.0, 0.0), 0.9);
        let b = D(bx(0.5, 0.0, 2.0, 2.0, 0.0), 0.8);
        assert!((bev_iou(&a.0, &b.0).unwrap() - 0.6).abs() < 1e-12);
        let out = nms(&[b.clone(), a.clone()], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1, 0.9);

        let c = D(bx(20.0, 0.0, 2.0, 2.0, 0.0), 0.7);
        assert_eq!(nms(&[a.clone(), c.clone()], 0.5).len(), 2);
    }

    #[test]
    fn nms_ties_keep_input_order() {
        let a = D(bx(0.0, 0.0, 2.0, 2.0, 0.0), 0.5);
        let b = D(bx(0.1, 0.0, 2.0, 2.0, 0.0), 0.5);
        let out = nms(&[a.clone(), b.clone()], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, a.0);
        let out = nms(&[b.clone(), a], 0.5);
        assert_eq!(out[0].0, b.0);
    }

    #[test]
    fn projection_cases() {
        let grid = GridSpec::default();
        let ego = Pose::new([10.0, -5.0], 0.4);
        let at_ego = Box3D::new([10.0, -5.0, 0.8], [4.0, 2.0, 1.6], 1.1).unwrap();
        let p = project_to_grid(&at_ego, &ego, &grid).unwrap();
        assert!((p.center[0] - 32.0).abs() < 1e-9 && (p.center[1] - 32.0).abs() < 1e-9);

        let behind = ego.to_world([-200.0, 0.0]);
        let far = Box3D::new([behind[0], behind[1], 0.5], [4.0, 2.0, 1.0], 0.0).unwrap();
        assert!(project_to_grid(&far, &ego, &grid).is_none());
    }

    #[test]
    fn projection_clamps_at_edge() {
        // Hand-projected: axis-aligned 4 x 2 box centred 49 m ahead on an
        // identity ego spans x in [47, 51] m, y in [-1, 1] m. Grid cell size is
        // 1.5625 m, so u in [97/1.5625, 101/1.5625] = [62.08, 64.64] clamps to
        // [62.08, 64] and v in [49/1.5625, 51/1.5625] = [31.36, 32.64].
        let grid = GridSpec::default();
        let ego = Pose::new([0.0, 0.0], 0.0);
        let b = Box3D::new([49.0, 0.0, 0.5], [4.0, 2.0, 1.0], 0.0).unwrap();
        let p = project_to_grid(&b, &ego, &grid).unwrap();
        let (lo, hi) = (p.min(), p.max());
        assert!((lo[0] - 62.08).abs() < 1e-9);
        assert!((hi[0] - 64.0).abs() < 1e-9);
        assert!((lo[1] - 31.36).abs() < 1e-9);
        assert!((hi[1] - 32.64).abs() < 1e-9);
        assert!(p.extent[0] < 4.0 / grid.cell_size());
    }

    #[test]
    fn pose_round_trip() {
        let ego = Pose::new([3.0, 4.0], -2.0);
        let p = [7.5, -1.25];
        let back = ego.to_world(ego.to_ego(p));
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn grid_cells() {
        let g = GridSpec::default();
        assert_eq!(g.cell_at([0.5, 0.5]), Some(0));
        assert_eq!(g.cell_at([63.9, 1.2]), Some(64 + 63));
        assert_eq!(g.cell_at([64.0, 1.0]), None);
        assert_eq!(g.mirror_cell(g.cell_index(3, 0)), g.cell_index(3, 63));
        assert_eq!(g.cell_center(g.cell_index(2, 5)), [5.5, 2.5]);
    }
}
