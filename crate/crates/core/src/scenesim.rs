//! Seeded streaming driving scenes rendered into a BEV feature grid.
//!
//! Each frame carries, per grid cell, an appearance descriptor (the
//! view/style-transformed canonical descriptor of the entity owning the cell,
//! or low-norm noise on background) and a latent box-encoding channel. The
//! grid is what the adapter sees in place of backbone image features.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, project_to_grid, Box2D, Box3D, GridSpec, Pose};
use crate::rng::{derive_seed, rng_for, tag};

pub const DESCRIPTOR_DIM: usize = 32;
/// (du, dv, ln l, ln w, ln h, sin yaw, cos yaw, occupancy)
pub const LATENT_DIM: usize = 8;
pub const SCENARIO_DUMP_VERSION: u32 = 1;
/// Maximum pairwise cosine between canonical descriptors of distinct identities.
pub const MAX_IDENTITY_COSINE: f64 = 0.5;

pub const VEHICLE_TAGS: [&str; 3] = ["car", "truck", "bus"];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("infeasible scenario config: {0}")]
    Infeasible(String),
    #[error("frame index {index} out of range ({frames} frames)")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("crop box covers no grid cells")]
    EmptyCrop,
    #[error("scenario dump version {0} is not supported")]
    DumpVersion(u32),
    #[error("config parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Nominal (length, width, height) in meters for a tag.
pub fn tag_size(tag: &str) -> [f64; 3] {
    match tag {
        "car" => [4.5, 1.9, 1.6],
        "truck" => [8.0, 2.6, 3.2],
        "bus" => [11.0, 2.9, 3.4],
        "pedestrian" => [0.8, 0.8, 1.8],
        "cone" => [0.6, 0.6, 0.9],
        "barrier" => [2.5, 0.6, 1.0],
        _ => [2.0, 2.0, 1.5],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagWeight {
    pub tag: String,
    pub weight: f64,
}

fn default_tags() -> Vec<TagWeight> {
    [
        ("car", 0.45),
        ("truck", 0.15),
        ("bus", 0.05),
        ("pedestrian", 0.15),
        ("cone", 0.1),
        ("barrier", 0.1),
    ]
    .into_iter()
    .map(|(t, w)| TagWeight { tag: t.into(), weight: w })
    .collect()
}

/// A hand-placed entity. Positions are world meters; the ego starts at the
/// origin facing +x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEntity {
    pub tag: String,
    pub position: [f64; 2],
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub size: Option<[f64; 3]>,
    #[serde(default)]
    pub spawn: usize,
    #[serde(default)]
    pub despawn: Option<usize>,
    /// Share the canonical descriptor of an earlier scripted entity.
    #[serde(default)]
    pub twin_of: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpawnScript {
    /// Random parked and moving traffic around a straight ego route.
    Random,
    /// Static ego; entities appear one per frame, stay, then leave one by one.
    ThreePhase {
        tag: String,
        count: usize,
        hold_frames: usize,
        exit_every: usize,
    },
    Scripted { entities: Vec<ScriptedEntity> },
}

/// Frames inside the window render with a shifted style regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftWindow {
    pub start_frame: usize,
    pub end_frame: usize,
    pub eps_style: f64,
    pub gain_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_entities")]
    pub entity_count: usize,
    #[serde(default = "default_ego_speed")]
    pub ego_speed: f64,
    #[serde(default = "default_max_speed")]
    pub max_speed: f64,
    #[serde(default = "default_eps")]
    pub eps_style: f64,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_tags")]
    pub tags: Vec<TagWeight>,
    #[serde(default)]
    pub twin_pairs: usize,
    #[serde(default = "default_twin_tag")]
    pub twin_tag: String,
    #[serde(default = "default_script")]
    pub script: SpawnScript,
    #[serde(default)]
    pub domain_shift: Option<DomainShiftWindow>,
    #[serde(default = "default_bg")]
    pub background_norm: f64,
    #[serde(default = "default_latent_noise")]
    pub latent_noise: f64,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_frames() -> usize {
    40
}
fn default_dt() -> f64 {
    0.5
}
fn default_entities() -> usize {
    12
}
fn default_ego_speed() -> f64 {
    3.0
}
fn default_max_speed() -> f64 {
    8.0
}
fn default_eps() -> f64 {
    0.2
}
fn default_twin_tag() -> String {
    "cone".into()
}
fn default_script() -> SpawnScript {
    SpawnScript::Random
}
fn default_bg() -> f64 {
    0.15
}
fn default_latent_noise() -> f64 {
    0.05
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: default_name(),
            seed: 0,
            frames: default_frames(),
            dt: default_dt(),
            entity_count: default_entities(),
            ego_speed: default_ego_speed(),
            max_speed: default_max_speed(),
            eps_style: default_eps(),
            grid: GridSpec::default(),
            tags: default_tags(),
            twin_pairs: 0,
            twin_tag: default_twin_tag(),
            script: SpawnScript::Random,
            domain_shift: None,
            background_norm: default_bg(),
            latent_noise: default_latent_noise(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, SceneError> {
        toml::from_str(s).map_err(|e| SceneError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// Built-in three-phase scenario used for buffer-dynamics traces.
    pub fn three_phase(seed: u64) -> Self {
        Self {
            name: "three-phase".into(),
            seed,
            frames: 60,
            ego_speed: 0.0,
            entity_count: 8,
            eps_style: 0.1,
            script: SpawnScript::ThreePhase {
                tag: "truck".into(),
                count: 8,
                hold_frames: 16,
                exit_every: 2,
            },
            ..Self::default()
        }
    }

    fn grid_capacity(&self) -> usize {
        self.grid.cells() / 16
    }
}

/// Parameters of the view/style transform applied to canonical descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub rotation_seed: u64,
    pub noise_seed: u64,
    pub eps_style: f64,
    pub gains: Vec<f64>,
    /// 0 for the nominal regime, 1 inside a domain-shift window.
    pub shift: f64,
}

impl StyleParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation_seed: 0,
            noise_seed: 0,
            eps_style: 0.0,
            gains: vec![1.0; dim],
            shift: 0.0,
        }
    }

    /// Per-entity variant so different entities draw independent perturbations.
    pub fn for_entity(&self, entity_id: u32) -> Self {
        Self {
            rotation_seed: derive_seed(self.rotation_seed, &[entity_id as u64]),
            noise_seed: derive_seed(self.noise_seed, &[entity_id as u64]),
            ..self.clone()
        }
    }

    pub fn is_shifted(&self) -> bool {
        self.shift > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: u32,
    pub class_tag: String,
    /// Per-frame box; `None` while not spawned.
    pub trajectory: Vec<Option<Box3D>>,
    pub canonical_descriptor: Vec<f64>,
    pub twin_of: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub ego: Vec<Pose>,
    pub entities: Vec<Entity>,
    pub styles: Vec<StyleParams>,
}

#[derive(Serialize, Deserialize)]
struct ScenarioDump {
    version: u32,
    scenario: Scenario,
}

impl Scenario {
    pub fn frame_count(&self) -> usize {
        self.ego.len()
    }

    pub fn entity(&self, id: u32) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    /// Versioned JSON dump; float values round-trip exactly.
    pub fn export(&self) -> String {
        serde_json::to_string(&ScenarioDump {
            version: SCENARIO_DUMP_VERSION,
            scenario: self.clone(),
        })
        .expect("scenario serializes")
    }

    pub fn import(s: &str) -> Result<Self, SceneError> {
        let dump: ScenarioDump = serde_json::from_str(s)?;
        if dump.version != SCENARIO_DUMP_VERSION {
            return Err(SceneError::DumpVersion(dump.version));
        }
        Ok(dump.scenario)
    }
}

pub fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut v) > 1e-6 {
            return v;
        }
    }
}

/// Unit vector orthogonal to unit `x`, drawn from `rng`.
fn orthogonal_unit<R: Rng>(rng: &mut R, x: &[f64]) -> Vec<f64> {
    loop {
        let mut g: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
        let d: f64 = g.iter().zip(x).map(|(a, b)| a * b).sum();
        g.iter_mut().zip(x).for_each(|(a, b)| *a -= d * b);
        if normalize(&mut g) > 1e-6 {
            return g;
        }
    }
}

/// Norm-preserving, bounded perturbation of a unit descriptor.
///
/// A seeded rotation whose angle grows with `view_angle`, a seeded noise
/// rotation, and channel gains; the result is pulled back along the great
/// circle so that `cos(input, output) >= 1 - eps_style` always holds.
pub fn view_transform(descriptor: &[f64], style: &StyleParams, view_angle: f64) -> Vec<f64> {
    if style.eps_style <= 0.0 {
        return descriptor.to_vec();
    }
    let mut x = descriptor.to_vec();
    normalize(&mut x);
    let theta_max = (1.0 - style.eps_style.min(2.0)).acos();
    let mut rot_rng = rng_for(style.rotation_seed, &[tag("view-rotation")]);
    let mut noise_rng = rng_for(style.noise_seed, &[tag("view-noise")]);

    let alpha = 0.5 * theta_max * (1.0 - view_angle.cos()) / 2.0;
    let u = orthogonal_unit(&mut rot_rng, &x);
    let (sa, ca) = alpha.sin_cos();
    let rotated: Vec<f64> = x.iter().zip(&u).map(|(a, b)| ca * a + sa * b).collect();

    let beta = 0.5 * theta_max * noise_rng.random_range(0.3..1.0);
    let n = orthogonal_unit(&mut noise_rng, &rotated);
    let (sb, cb) = beta.sin_cos();
    let mut y: Vec<f64> = rotated
        .iter()
        .zip(&n)
        .zip(style.gains.iter().chain(std::iter::repeat(&1.0)))
        .map(|((a, b), g)| g * (cb * a + sb * b))
        .collect();
    normalize(&mut y);

    let c = y.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
    let phi = c.acos();
    // keep a hair inside the bound so rounding cannot cross it
    let limit = theta_max * (1.0 - 1e-9);
    if phi > limit {
        // slerp from x toward y, stopping at the bound
        let mut perp: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - c * b).collect();
        normalize(&mut perp);
        let (sl, cl) = limit.sin_cos();
        y = x.iter().zip(&perp).map(|(a, b)| cl * a + sl * b).collect();
        normalize(&mut y);
    }
    y
}

// ---------------------------------------------------------------------------
// Scenario generation

struct Draft {
    tag: String,
    size: [f64; 3],
    start: [f64; 2],
    velocity: [f64; 2],
    yaw: f64,
    spawn: usize,
    despawn: Option<usize>,
    twin_of: Option<usize>,
}

fn pick_tag<R: Rng>(rng: &mut R, tags: &[TagWeight]) -> String {
    let total: f64 = tags.iter().map(|t| t.weight.max(0.0)).sum();
    let mut r = rng.random_range(0.0..total.max(1e-12));
    for t in tags {
        r -= t.weight.max(0.0);
        if r <= 0.0 {
            return t.tag.clone();
        }
    }
    tags.last().map(|t| t.tag.clone()).unwrap_or_else(|| "car".into())
}

fn jitter_size<R: Rng>(rng: &mut R, tag: &str) -> [f64; 3] {
    tag_size(tag).map(|s| s * rng.random_range(0.9..1.1))
}

fn random_drafts<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Vec<Draft>, SceneError> {
    let travel = cfg.ego_speed * cfg.dt * cfg.frames as f64;
    let mut drafts: Vec<Draft> = Vec::with_capacity(cfg.entity_count);
    let n_twins = cfg.twin_pairs.min(cfg.entity_count / 2);
    for i in 0..cfg.entity_count {
        let twin_of = (i >= cfg.entity_count - n_twins)
            .then(|| i - (cfg.entity_count - n_twins) + (cfg.entity_count - 2 * n_twins));
        let is_twin_group = i >= cfg.entity_count - 2 * n_twins;
        let tag = if is_twin_group {
            cfg.twin_tag.clone()
        } else {
            pick_tag(rng, &cfg.tags)
        };
        let size = jitter_size(rng, &tag);
        let mut placed = None;
        for _ in 0..200 {
            let moving = !matches!(tag.as_str(), "cone" | "barrier") && rng.random_bool(0.35);
            let (start, velocity, yaw) = if moving {
                let dir: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let speed = rng.random_range(0.0..cfg.max_speed.max(0.0) + 1e-9).min(cfg.max_speed);
                let lane = rng.random_range(-12.0..12.0);
                let x = rng.random_range(-40.0..40.0 + travel * 0.5);
                let yaw = if dir > 0.0 { 0.0 } else { PI } + rng.random_range(-0.05..0.05);
                ([x, lane], [dir * speed, 0.0], yaw)
            } else {
                let x = rng.random_range(-42.0..42.0 + travel);
                let y = rng.random_range(-42.0..42.0);
                let yaw = if tag == "cone" || tag == "pedestrian" {
                    rng.random_range(-PI..PI)
                } else {
                    (if rng.random_bool(0.5) { 0.0 } else { PI }) + rng.random_range(-0.3..0.3)
                };
                ([x, y], [0.0, 0.0], yaw)
            };
            let radius = size[0].hypot(size[1]) / 2.0;
            let clear = drafts.iter().all(|d| {
                let r = d.size[0].hypot(d.size[1]) / 2.0;
                (d.start[0] - start[0]).hypot(d.start[1] - start[1]) > radius + r + 0.5
            });
            if clear {
                placed = Some((start, velocity, yaw));
                break;
            }
        }
        let (start, velocity, yaw) = placed.ok_or_else(|| {
            SceneError::Infeasible(format!("could not place entity {i} without overlap"))
        })?;
        drafts.push(Draft {
            tag,
            size,
            start,
            velocity,
            yaw,
            spawn: 0,
            despawn: None,
            twin_of,
        });
    }
    Ok(drafts)
}

fn three_phase_drafts<R: Rng>(
    tag: &str,
    count: usize,
    hold: usize,
    exit_every: usize,
    rng: &mut R,
) -> Vec<Draft> {
    (0..count)
        .map(|i| {
            // a ring of well-separated positions around the static ego
            let angle = 2.0 * PI * i as f64 / count as f64 + rng.random_range(-0.1..0.1);
            let radius = rng.random_range(14.0..24.0);
            Draft {
                tag: tag.into(),
                size: jitter_size(rng, tag),
                start: [radius * angle.cos(), radius * angle.sin()],
                velocity: [0.0, 0.0],
                yaw: angle + PI / 2.0,
                spawn: i,
                despawn: Some(count + hold + i * exit_every.max(1)),
                twin_of: None,
            }
        })
        .collect()
}

fn canonical_descriptors<R: Rng>(
    drafts: &[Draft],
    dim: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, SceneError> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(drafts.len());
    for (i, d) in drafts.iter().enumerate() {
        if let Some(t) = d.twin_of {
            if t >= i {
                return Err(SceneError::Infeasible(format!("entity {i} twins a later entity {t}")));
            }
            out.push(out[t].clone());
            continue;
        }
        let mut found = None;
        for _ in 0..10_000 {
            let v = random_unit(rng, dim);
            if out.iter().all(|o| cosine(o, &v) <= MAX_IDENTITY_COSINE) {
                found = Some(v);
                break;
            }
        }
        out.push(found.ok_or_else(|| {
            SceneError::Infeasible("cannot separate canonical descriptors".into())
        })?);
    }
    Ok(out)
}

/// Deterministic scenario from a config; identical configs give bit-identical scenarios.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario, SceneError> {
    if cfg.frames == 0 || !cfg.grid.is_valid() || !(cfg.dt > 0.0) {
        return Err(SceneError::Infeasible("frames, grid, and dt must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.eps_style) {
        return Err(SceneError::Infeasible(format!("eps_style {} not in [0, 1]", cfg.eps_style)));
    }
    let mut rng = rng_for(cfg.seed, &[tag("scenario")]);
    let drafts = match &cfg.script {
        SpawnScript::Random => {
            if cfg.entity_count > cfg.grid_capacity() {
                return Err(SceneError::Infeasible(format!(
                    "{} entities exceed grid capacity {}",
                    cfg.entity_count,
                    cfg.grid_capacity()
                )));
            }
            random_drafts(cfg, &mut rng)?
        }
        SpawnScript::ThreePhase {
            tag: t,
            count,
            hold_frames,
            exit_every,
        } => {
            if *count > cfg.grid_capacity() {
                return Err(SceneError::Infeasible("too many entities".into()));
            }
            three_phase_drafts(t, *count, *hold_frames, *exit_every, &mut rng)
        }
        SpawnScript::Scripted { entities } => {
            if entities.len() > cfg.grid_capacity() {
                return Err(SceneError::Infeasible("too many entities".into()));
            }
            let mut out = Vec::with_capacity(entities.len());
            for e in entities {
                let speed = e.velocity[0].hypot(e.velocity[1]);
                if speed > cfg.max_speed + 1e-12 {
                    return Err(SceneError::Infeasible(format!(
                        "scripted speed {speed} exceeds max_speed {}",
                        cfg.max_speed
                    )));
                }
                let size = e.size.unwrap_or_else(|| tag_size(&e.tag));
                if size.iter().any(|s| !(*s > 0.0)) {
                    return Err(SceneError::Infeasible(format!("bad size {size:?}")));
                }
                out.push(Draft {
                    tag: e.tag.clone(),
                    size,
                    start: e.position,
                    velocity: e.velocity,
                    yaw: e.yaw,
                    spawn: e.spawn,
                    despawn: e.despawn,
                    twin_of: e.twin_of,
                });
            }
            out
        }
    };

    let descriptors = canonical_descriptors(&drafts, DESCRIPTOR_DIM, &mut rng)?;

    let ego: Vec<Pose> = (0..cfg.frames)
        .map(|t| Pose::new([cfg.ego_speed * cfg.dt * t as f64, 0.0], 0.0))
        .collect();

    let entities = drafts
        .iter()
        .zip(descriptors)
        .enumerate()
        .map(|(i, (d, desc))| {
            let trajectory = (0..cfg.frames)
                .map(|t| {
                    let alive = t >= d.spawn && d.despawn.is_none_or(|end| t < end);
                    alive.then(|| {
                        let k = (t - d.spawn) as f64 * cfg.dt;
                        Box3D::new(
                            [d.start[0] + d.velocity[0] * k, d.start[1] + d.velocity[1] * k, d.size[2] / 2.0],
                            d.size,
                            d.yaw,
                        )
                        .expect("validated size")
                    })
                })
                .collect();
            Entity {
                id: i as u32,
                class_tag: d.tag.clone(),
                trajectory,
                canonical_descriptor: desc,
                twin_of: d.twin_of.map(|t| t as u32),
            }
        })
        .collect();

    let base_rot = derive_seed(cfg.seed, &[tag("style-rotation")]);
    let shifted_rot = derive_seed(cfg.seed, &[tag("style-rotation-shifted")]);
    let mut gain_rng = rng_for(cfg.seed, &[tag("style-gains")]);
    let shifted_gains: Vec<f64> = match &cfg.domain_shift {
        Some(w) => (0..DESCRIPTOR_DIM)
            .map(|_| 1.0 + w.gain_spread * gain_rng.random_range(-1.0..1.0))
            .collect(),
        None => vec![1.0; DESCRIPTOR_DIM],
    };
    let styles = (0..cfg.frames)
        .map(|t| {
            let noise_seed = derive_seed(cfg.seed, &[tag("style-noise"), t as u64]);
            match &cfg.domain_shift {
                Some(w) if t >= w.start_frame && t < w.end_frame => StyleParams {
                    rotation_seed: shifted_rot,
                    noise_seed,
                    eps_style: w.eps_style,
                    gains: shifted_gains.clone(),
                    shift: 1.0,
                },
                _ => StyleParams {
                    rotation_seed: base_rot,
                    noise_seed,
                    eps_style: cfg.eps_style,
                    gains: vec![1.0; DESCRIPTOR_DIM],
                    shift: 0.0,
                },
            }
        })
        .collect();

    Ok(Scenario {
        config: cfg.clone(),
        ego,
        entities,
        styles,
    })
}

// ---------------------------------------------------------------------------
// Rendering

/// Box parameters in ego-relative grid terms, the regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBox {
    /// Centre in grid units.
    pub center: [f64; 2],
    pub log_size: [f64; 3],
    /// Yaw relative to ego heading.
    pub yaw: f64,
}

impl GridBox {
    pub fn mirrored(&self, grid: &GridSpec) -> Self {
        Self {
            center: [grid.width as f64 - self.center[0], self.center[1]],
            log_size: self.log_size,
            yaw: normalize_angle(PI - self.yaw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub entity_id: u32,
    pub tag: String,
    pub box3d: Box3D,
    pub box2d: Box2D,
    pub grid_box: GridBox,
    pub visible: bool,
    /// Ground-plane distance from ego, meters.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub ego: Pose,
    pub truths: Vec<Truth>,
    pub grid: GridSpec,
    /// cells x DESCRIPTOR_DIM, row-major over (row, col) cells.
    pub appearance: Array2<f64>,
    /// cells x LATENT_DIM.
    pub latent: Array2<f64>,
    pub owner: Vec<Option<u32>>,
    pub style: StyleParams,
    pub mirrored: bool,
}

impl Frame {
    pub fn truth(&self, entity_id: u32) -> Option<&Truth> {
        self.truths.iter().find(|t| t.entity_id == entity_id)
    }

    pub fn visible_truths(&self) -> impl Iterator<Item = &Truth> {
        self.truths.iter().filter(|t| t.visible)
    }

    pub fn cells_of(&self, entity_id: u32) -> Vec<usize> {
        self.owner
            .iter()
            .enumerate()
            .filter_map(|(i, o)| (*o == Some(entity_id)).then_some(i))
            .collect()
    }

    /// Column-mirrored copy (`u -> W - u`), with latent offsets and yaw
    /// channels mirrored to match. World boxes are left untouched.
    pub fn mirrored(&self) -> Frame {
        let g = self.grid;
        let mut appearance = Array2::zeros(self.appearance.dim());
        let mut latent = Array2::zeros(self.latent.dim());
        let mut owner = vec![None; self.owner.len()];
        for idx in 0..g.cells() {
            let m = g.mirror_cell(idx);
            appearance.row_mut(m).assign(&self.appearance.row(idx));
            let mut l = self.latent.row(idx).to_owned();
            l[0] = -l[0];
            l[6] = -l[6];
            latent.row_mut(m).assign(&l);
            owner[m] = self.owner[idx];
        }
        let truths = self
            .truths
            .iter()
            .map(|t| Truth {
                box2d: t.box2d.mirrored(&g),
                grid_box: t.grid_box.mirrored(&g),
                ..t.clone()
            })
            .collect();
        Frame {
            index: self.index,
            ego: self.ego,
            truths,
            grid: g,
            appearance,
            latent,
            owner,
            style: self.style.clone(),
            mirrored: !self.mirrored,
        }
    }
}

/// Cells whose centres fall inside a box's footprint, in ego-relative terms.
fn footprint_cells(b: &Box3D, ego: &Pose, grid: &GridSpec, aabb: &Box2D) -> Vec<usize> {
    let lo = aabb.min();
    let hi = aabb.max();
    let c0 = lo[0].floor().max(0.0) as usize;
    let r0 = lo[1].floor().max(0.0) as usize;
    let c1 = (hi[0].ceil() as usize).min(grid.width);
    let r1 = (hi[1].ceil() as usize).min(grid.height);
    let mut cells = Vec::new();
    for row in r0..r1 {
        for col in c0..c1 {
            let centre = [col as f64 + 0.5, row as f64 + 0.5];
            let world = ego.to_world(grid.grid_to_ego(centre));
            if b.contains_ground_point(world) {
                cells.push(grid.cell_index(row, col));
            }
        }
    }
    if cells.is_empty() {
        let c = grid.ego_to_grid(ego.to_ego(b.ground_center()));
        if let Some(idx) = grid.cell_at(c) {
            cells.push(idx);
        }
    }
    cells
}

pub fn grid_box_of(b: &Box3D, ego: &Pose, grid: &GridSpec) -> GridBox {
    GridBox {
        center: grid.ego_to_grid(ego.to_ego(b.ground_center())),
        log_size: b.size.map(f64::ln),
        yaw: normalize_angle(b.yaw - ego.heading),
    }
}

pub fn render_frame(scenario: &Scenario, index: usize) -> Result<Frame, SceneError> {
    let frames = scenario.frame_count();
    if index >= frames {
        return Err(SceneError::FrameOutOfRange { index, frames });
    }
    let cfg = &scenario.config;
    let grid = cfg.grid;
    let ego = scenario.ego[index];
    let style = scenario.styles[index].clone();
    let cells = grid.cells();

    let mut bg_rng = rng_for(cfg.seed, &[tag("background"), index as u64]);
    let sigma = cfg.background_norm / (DESCRIPTOR_DIM as f64).sqrt();
    let mut appearance = Array2::<f64>::zeros((cells, DESCRIPTOR_DIM));
    for v in appearance.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut bg_rng);
        *v = sigma * z;
    }
    let mut latent = Array2::<f64>::zeros((cells, LATENT_DIM));
    let mut owner: Vec<Option<u32>> = vec![None; cells];

    // nearest first so nearer entities claim contested cells
    let mut present: Vec<(f64, &Entity, Box3D, Box2D)> = scenario
        .entities
        .iter()
        .filter_map(|e| {
            let b = e.trajectory[index]?;
            let aabb = project_to_grid(&b, &ego, &grid)?;
            let d = (b.center[0] - ego.position[0]).hypot(b.center[1] - ego.position[1]);
            Some((d, e, b, aabb))
        })
        .collect();
    present.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));

    let mut truths = Vec::with_capacity(present.len());
    for (distance, e, b, aabb) in present {
        let gb = grid_box_of(&b, &ego, &grid);
        let claimed: Vec<usize> = footprint_cells(&b, &ego, &grid, &aabb)
            .into_iter()
            .filter(|&c| owner[c].is_none())
            .collect();
        if !claimed.is_empty() {
            let rel = b.center;
            let bearing = (rel[1] - ego.position[1]).atan2(rel[0] - ego.position[0]);
            let view_angle = normalize_angle(b.yaw - bearing);
            let desc = view_transform(&e.canonical_descriptor, &style.for_entity(e.id), view_angle);
            let (sy, cy) = gb.yaw.sin_cos();
            for &c in &claimed {
                owner[c] = Some(e.id);
                appearance.row_mut(c).iter_mut().zip(&desc).for_each(|(a, d)| *a = *d);
                let centre = grid.cell_center(c);
                let vals = [
                    gb.center[0] - centre[0],
                    gb.center[1] - centre[1],
                    gb.log_size[0],
                    gb.log_size[1],
                    gb.log_size[2],
                    sy,
                    cy,
                    1.0,
                ];
                latent.row_mut(c).iter_mut().zip(vals).for_each(|(l, v)| *l = v);
            }
        }
        truths.push(Truth {
            entity_id: e.id,
            tag: e.class_tag.clone(),
            box3d: b,
            box2d: aabb,
            grid_box: gb,
            visible: !claimed.is_empty(),
            distance,
        });
    }
    truths.sort_by_key(|t| t.entity_id);

    let mut lat_rng = rng_for(cfg.seed, &[tag("latent-noise"), index as u64]);
    for v in latent.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut lat_rng);
        *v += cfg.latent_noise * z;
    }

    Ok(Frame {
        index,
        ego,
        truths,
        grid,
        appearance,
        latent,
        owner,
        style,
        mirrored: false,
    })
}

/// Cells whose centres lie inside a grid box.
pub fn cells_in_box(grid: &GridSpec, b: &Box2D) -> Vec<usize> {
    let lo = b.min();
    let hi = b.max();
    let c0 = (lo[0] - 0.5).ceil().max(0.0) as usize;
    let r0 = (lo[1] - 0.5).ceil().max(0.0) as usize;
    let mut out = Vec::new();
    let mut row = r0;
    while row < grid.height && row as f64 + 0.5 <= hi[1] {
        let mut col = c0;
        while col < grid.width && col as f64 + 0.5 <= hi[0] {
            out.push(grid.cell_index(row, col));
            col += 1;
        }
        row += 1;
    }
    out
}

/// Mean appearance over the cells covered by `b`, renormalised.
pub fn crop_descriptor(frame: &Frame, b: &Box2D) -> Result<Vec<f64>, SceneError> {
    let cells = cells_in_box(&frame.grid, b);
    if cells.is_empty() {
        return Err(SceneError::EmptyCrop);
    }
    let mut acc = vec![0.0; frame.appearance.ncols()];
    for c in &cells {
        acc.iter_mut()
            .zip(frame.appearance.row(*c))
            .for_each(|(a, v)| *a += v);
    }
    if normalize(&mut acc) == 0.0 {
        return Err(SceneError::EmptyCrop);
    }
    Ok(acc)
}

/// Entities whose canonical descriptors coincide with `entity_id`'s.
pub fn twin_group(scenario: &Scenario, entity_id: u32) -> BTreeSet<u32> {
    let root = |id: u32| scenario.entity(id).and_then(|e| e.twin_of).unwrap_or(id);
    let r = root(entity_id);
    scenario
        .entities
        .iter()
        .filter(|e| root(e.id) == r)
        .map(|e| e.id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_entity(eps: f64) -> Scenario {
        generate_scenario(&ScenarioConfig {
            eps_style: eps,
            frames: 2,
            ego_speed: 0.0,
            script: SpawnScript::Scripted {
                entities: vec![ScriptedEntity {
                    tag: "car".into(),
                    position: [10.0, 5.0],
                    velocity: [0.0, 0.0],
                    yaw: 0.3,
                    size: None,
                    spawn: 0,
                    despawn: None,
                    twin_of: None,
                }],
            },
            ..ScenarioConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = ScenarioConfig { seed: 7, ..Default::default() };
        let a = generate_scenario(&cfg).unwrap().export();
        let b = generate_scenario(&cfg).unwrap().export();
        assert_eq!(a, b);
        let other = generate_scenario(&ScenarioConfig { seed: 8, ..cfg }).unwrap().export();
        assert_ne!(a, other);
    }

    #[test]
    fn export_import_round_trip() {
        let s = generate_scenario(&ScenarioConfig { seed: 3, ..Default::default() }).unwrap();
        let back = Scenario::import(&s.export()).unwrap();
        assert_eq!(back, s);
        let bad = s.export().replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(Scenario::import(&bad), Err(SceneError::DumpVersion(9))));
    }

    #[test]
    fn zero_entities_give_empty_truths() {
        let s = generate_scenario(&ScenarioConfig { entity_count: 0, ..Default::default() }).unwrap();
        for t in 0..s.frame_count() {
            assert!(render_frame(&s, t).unwrap().truths.is_empty());
        }
    }

    #[test]
    fn infeasible_counts_are_rejected() {
        let cfg = ScenarioConfig { entity_count: 10_000, ..Default::default() };
        assert!(matches!(generate_scenario(&cfg), Err(SceneError::Infeasible(_))));
    }

    #[test]
    fn view_transform_identity_and_norm() {
        let mut rng = rng_for(1, &[]);
        let x = random_unit(&mut rng, DESCRIPTOR_DIM);
        let id = StyleParams::identity(DESCRIPTOR_DIM);
        assert_eq!(view_transform(&x, &id, 0.0), x);
        let style = StyleParams { eps_style: 0.3, rotation_seed: 4, noise_seed: 9, ..id };
        for k in 0..50 {
            let y = view_transform(&x, &style.for_entity(k), k as f64 * 0.3);
            let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_entity_owns_its_footprint() {
        let s = one_entity(0.0);
        let f = render_frame(&s, 0).unwrap();
        let cells = f.cells_of(0);
        assert!(!cells.is_empty());
        for (i, row) in f.appearance.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if cells.contains(&i) {
                assert!((n - 1.0).abs() < 1e-9);
            } else {
                assert!(n < 0.5, "background cell {i} has norm {n}");
            }
        }
        assert_eq!(render_frame(&s, 0).unwrap(), f);
    }

    #[test]
    fn noiseless_crop_recovers_canonical() {
        let s = one_entity(0.0);
        let f = render_frame(&s, 0).unwrap();
        let cells = f.cells_of(0);
        // the tight box around exactly the owned cells
        let lo = cells.iter().map(|&c| f.grid.cell_center(c)).fold([f64::MAX; 2], |a, c| {
            [a[0].min(c[0] - 0.5), a[1].min(c[1] - 0.5)]
        });
        let hi = cells.iter().map(|&c| f.grid.cell_center(c)).fold([f64::MIN; 2], |a, c| {
            [a[0].max(c[0] + 0.5), a[1].max(c[1] + 0.5)]
        });
        let b = Box2D::from_bounds(lo, hi);
        let inside = cells_in_box(&f.grid, &b);
        // AABB of a rotated box may include a few background cells; crop only owned ones here
        let owned_only = inside.iter().all(|c| cells.contains(c));
        let d = crop_descriptor(&f, &b).unwrap();
        let c = cosine(&d, &s.entities[0].canonical_descriptor);
        if owned_only {
            assert!((c - 1.0).abs() < 1e-9);
        } else {
            assert!(c > 0.97, "cosine {c}");
        }
    }

    #[test]
    fn crop_of_nothing_is_an_error() {
        let s = one_entity(0.0);
        let f = render_frame(&s, 0).unwrap();
        let b = Box2D { center: [10.2, 10.2], extent: [0.1, 0.1] };
        assert!(matches!(crop_descriptor(&f, &b), Err(SceneError::EmptyCrop)));
    }

    #[test]
    fn out_of_range_frame() {
        let s = one_entity(0.0);
        assert!(matches!(render_frame(&s, 5), Err(SceneError::FrameOutOfRange { .. })));
    }

    #[test]
    fn mirroring_twice_is_identity() {
        let s = generate_scenario(&ScenarioConfig { seed: 2, ..Default::default() }).unwrap();
        let f = render_frame(&s, 3).unwrap();
        let m = f.mirrored().mirrored();
        assert_eq!(m.appearance, f.appearance);
        assert_eq!(m.latent, f.latent);
        assert_eq!(m.owner, f.owner);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ScenarioConfig::three_phase(5);
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        let minimal = ScenarioConfig::from_toml_str("seed = 4\nentity_count = 3\n").unwrap();
        assert_eq!(minimal.entity_count, 3);
        assert_eq!(minimal.grid, GridSpec::default());
    }
}
