//! Training loop and held-out evaluation for the adapter.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_loss, BoxTarget, FrameSample, LossBundle, OaError, OaGrads, OaParams, PointTarget, Result, VisualPrompt, VisualTarget};
use crate::geometry::Box2D;
use crate::nnkit::{optimizer_step, AdamWConfig, OptimizerState};
use crate::rng::{derive_seed, rng_for, tag};
use crate::scenesim::{crop_descriptor, generate_scenario, render_frame, twin_group, Frame, Scenario, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossAblation {
    /// No alignment supervision: only the decoder terms train.
    #[serde(rename = "none")]
    None,
    /// Focal + dice on the similarity map, no localisation term.
    #[serde(rename = "sim")]
    Sim,
    #[serde(rename = "sim+loc")]
    SimLoc,
}

impl std::str::FromStr for LossAblation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "sim" => Ok(Self::Sim),
            "sim+loc" => Ok(Self::SimLoc),
            other => Err(format!("unknown loss ablation {other:?} (none, sim, sim+loc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    /// Number of distinct training scenarios.
    pub scenes: usize,
    pub template: ScenarioConfig,
    /// Each training scenario draws its style strength from this range.
    pub eps_range: [f64; 2],
    pub twin_probability: f64,
    pub frames_per_step: usize,
    pub prompts_per_frame: usize,
    /// Point queries clicked on visible entities.
    pub points_per_frame: usize,
    /// Point queries dropped on background cells.
    pub background_points_per_frame: usize,
    pub boxes_per_frame: usize,
    /// Prompts are cropped from a frame up to this many frames away.
    pub prompt_offset: usize,
    pub flip_probability: f64,
    pub click_perturb: f64,
    pub optimizer: AdamWConfig,
    pub ablation: LossAblation,
    #[serde(default)]
    pub exclude_prompt_tags: BTreeSet<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            steps: 1200,
            scenes: 200,
            template: ScenarioConfig {
                entity_count: 14,
                frames: 30,
                ..ScenarioConfig::default()
            },
            eps_range: [0.05, 0.3],
            twin_probability: 0.3,
            frames_per_step: 4,
            prompts_per_frame: 4,
            points_per_frame: 2,
            background_points_per_frame: 4,
            boxes_per_frame: 1,
            prompt_offset: 5,
            flip_probability: 0.5,
            click_perturb: 0.4,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            ablation: LossAblation::SimLoc,
            exclude_prompt_tags: BTreeSet::new(),
        }
    }
}

impl TrainConfig {
    /// Seed of the k-th training scenario; evaluation seeds must avoid these.
    pub fn scene_seed(&self, k: usize) -> u64 {
        derive_seed(self.seed, &[tag("train-scene"), k as u64])
    }

    pub fn scene_config(&self, k: usize) -> ScenarioConfig {
        let mut r = rng_for(self.seed, &[tag("train-scene-cfg"), k as u64]);
        let eps = if self.eps_range[1] > self.eps_range[0] {
            r.random_range(self.eps_range[0]..self.eps_range[1])
        } else {
            self.eps_range[0]
        };
        let twins = if r.random_bool(self.twin_probability.clamp(0.0, 1.0)) { 2 } else { 0 };
        ScenarioConfig {
            name: format!("train-{k}"),
            seed: self.scene_seed(k),
            eps_style: eps,
            twin_pairs: twins,
            ..self.template.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub focal: f64,
    pub dice: f64,
    pub loc: f64,
    pub decode: f64,
    pub conf: f64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub curve: Vec<CurvePoint>,
}

/// Lazily generated training scenarios.
struct SceneCache<'a> {
    cfg: &'a TrainConfig,
    scenes: HashMap<usize, Scenario>,
}

impl SceneCache<'_> {
    fn get(&mut self, k: usize) -> Result<&Scenario> {
        if !self.scenes.contains_key(&k) {
            let s = generate_scenario(&self.cfg.scene_config(k))?;
            self.scenes.insert(k, s);
        }
        Ok(&self.scenes[&k])
    }
}

fn click_in(rng: &mut ChaCha8Rng, b: &Box2D, r: f64) -> [f64; 2] {
    let lo = b.min();
    let hi = b.max();
    let mut p = [0.0; 2];
    for k in 0..2 {
        let d = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        p[k] = (b.center[k] + d * b.extent[k]).clamp(lo[k], hi[k]);
    }
    p
}

fn draw_sample(rng: &mut ChaCha8Rng, cfg: &TrainConfig, cache: &mut SceneCache) -> Result<FrameSample> {
    for _ in 0..50 {
        let k = rng.random_range(0..cfg.scenes);
        let scenario = cache.get(k)?.clone();
        let frames = scenario.frame_count();
        let t = rng.random_range(0..frames);
        let frame = render_frame(&scenario, t)?;
        let candidates: Vec<u32> = frame
            .visible_truths()
            .filter(|tr| !cfg.exclude_prompt_tags.contains(&tr.tag))
            .map(|tr| tr.entity_id)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let off = cfg.prompt_offset as i64;
        let t2 = (t as i64 + rng.random_range(-off..=off)).clamp(0, frames as i64 - 1) as usize;
        let other = if t2 == t { None } else { Some(render_frame(&scenario, t2)?) };

        let mut visual = Vec::with_capacity(cfg.prompts_per_frame);
        for _ in 0..cfg.prompts_per_frame {
            let e = candidates[rng.random_range(0..candidates.len())];
            let src: &Frame = match &other {
                Some(f) if f.truth(e).is_some_and(|tr| tr.visible) => f,
                _ => &frame,
            };
            let b = src.truth(e).expect("visible in source").box2d.expanded_to(1.0);
            let descriptor = crop_descriptor(src, &b)?;
            let mut group = vec![e];
            group.extend(twin_group(&scenario, e).into_iter().filter(|&g| g != e));
            visual.push(VisualTarget { descriptor, group });
        }

        let frame = if rng.random_bool(cfg.flip_probability.clamp(0.0, 1.0)) {
            frame.mirrored()
        } else {
            frame
        };
        let all_visible: Vec<u32> = frame.visible_truths().map(|t| t.entity_id).collect();
        let background: Vec<usize> = frame
            .owner
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.is_none().then_some(i))
            .collect();
        let n_bg = if background.is_empty() { 0 } else { cfg.background_points_per_frame };
        let mut points = Vec::with_capacity(cfg.points_per_frame + n_bg);
        for i in 0..cfg.points_per_frame + n_bg {
            let point = if i < cfg.points_per_frame {
                let e = all_visible[rng.random_range(0..all_visible.len())];
                click_in(rng, &frame.truth(e).expect("visible").box2d, cfg.click_perturb)
            } else {
                let c = frame.grid.cell_center(background[rng.random_range(0..background.len())]);
                [c[0] + rng.random_range(-0.45..0.45), c[1] + rng.random_range(-0.45..0.45)]
            };
            points.push(PointTarget { point });
        }
        let mut boxes = Vec::with_capacity(cfg.boxes_per_frame);
        for _ in 0..cfg.boxes_per_frame {
            let e = all_visible[rng.random_range(0..all_visible.len())];
            let b = frame.truth(e).expect("visible").box2d;
            let jit = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..s);
            let center = [
                b.center[0] + jit(rng, 0.1) * b.extent[0],
                b.center[1] + jit(rng, 0.1) * b.extent[1],
            ];
            let extent = [b.extent[0] * (1.0 + jit(rng, 0.1)), b.extent[1] * (1.0 + jit(rng, 0.1))];
            let grid = frame.grid;
            let center = [
                center[0].clamp(0.0, grid.width as f64),
                center[1].clamp(0.0, grid.height as f64),
            ];
            boxes.push(BoxTarget {
                b: Box2D { center, extent },
                entity: Some(e),
            });
        }
        return Ok(FrameSample {
            frame,
            visual,
            points,
            boxes,
        });
    }
    Err(OaError::EmptyTrainingSet)
}

fn ablated(params: &mut OaParams, ablation: LossAblation) {
    let w = &mut params.config.loss_weights;
    match ablation {
        LossAblation::None => {
            w.focal = 0.0;
            w.dice = 0.0;
            w.loc = 0.0;
        }
        LossAblation::Sim => w.loc = 0.0,
        LossAblation::SimLoc => {}
    }
}

/// Trains `init` in place of a fresh copy and returns it with its curve.
/// `progress` sees every curve point as it is produced.
pub fn train_oa(
    init: &OaParams,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&CurvePoint),
) -> Result<(OaParams, TrainReport)> {
    if cfg.scenes == 0 || cfg.frames_per_step == 0 {
        return Err(OaError::EmptyTrainingSet);
    }
    let mut params = init.clone();
    ablated(&mut params, cfg.ablation);
    let mut states: Vec<OptimizerState> = params.networks().iter().map(|n| OptimizerState::for_network(n)).collect();
    let mut rng = rng_for(cfg.seed, &[tag("train-sampler")]);
    let mut cache = SceneCache {
        cfg,
        scenes: HashMap::new(),
    };
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = OaGrads::zeros_for(&params);
        let mut bundle = LossBundle::default();
        for _ in 0..cfg.frames_per_step {
            let sample = draw_sample(&mut rng, cfg, &mut cache)?;
            let (b, g, _) = sample_loss(&params, &sample, None, true)?;
            grads.accumulate(&g.expect("gradient requested"));
            bundle.add(&b);
        }
        let k = 1.0 / cfg.frames_per_step as f64;
        grads.scale(k);
        let pos = step as f64 / cfg.steps as f64;
        for ((net, tape), state) in params.networks_mut().into_iter().zip(&grads.tapes).zip(&mut states) {
            optimizer_step(net, tape, state, &cfg.optimizer, pos)?;
        }
        let hits = bundle.hits as f64 / bundle.prompts.max(1) as f64;
        bundle.scale(k);
        let point = CurvePoint {
            step,
            lr: crate::nnkit::cosine_lr(cfg.optimizer.lr, pos),
            total: bundle.total,
            focal: bundle.focal,
            dice: bundle.dice,
            loc: bundle.loc,
            decode: bundle.decode,
            conf: bundle.conf,
            hit_rate: hits,
        };
        progress(&point);
        curve.push(point);
    }
    // evaluation uses the nominal weights regardless of the ablation
    params.config.loss_weights = init.config.loss_weights;
    Ok((
        params,
        TrainReport {
            config: cfg.clone(),
            curve,
        },
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignEval {
    pub prompts: usize,
    /// First candidate inside the target's (or a twin's) footprint.
    pub hit_rate: f64,
    /// Some candidate inside the target's footprint.
    pub any_hit_rate: f64,
    /// Mean decoded centre error (grid cells) for first candidates that hit.
    pub center_error: f64,
    /// Fraction of hits decoded with confidence at or above 0.3.
    pub confident_rate: f64,
    /// Fraction of background point queries decoded below 0.3.
    pub background_reject_rate: f64,
}

/// Held-out alignment quality: every visible entity of `frames_per_scene`
/// sampled frames is prompted with a crop from up to `prompt_offset` frames away.
pub fn evaluate_alignment(
    params: &OaParams,
    scenarios: &[Scenario],
    frames_per_scene: usize,
    prompt_offset: usize,
    seed: u64,
) -> Result<AlignEval> {
    let mut rng = rng_for(seed, &[tag("align-eval")]);
    let mut ev = AlignEval::default();
    let (mut hits, mut any, mut conf, mut err_sum) = (0usize, 0usize, 0usize, 0.0);
    let (mut bg_total, mut bg_reject) = (0usize, 0usize);
    for s in scenarios {
        let frames = s.frame_count();
        for _ in 0..frames_per_scene {
            let t = rng.random_range(0..frames);
            let frame = render_frame(s, t)?;
            let off = prompt_offset as i64;
            let t2 = (t as i64 + rng.random_range(-off..=off)).clamp(0, frames as i64 - 1) as usize;
            let src = render_frame(s, t2)?;
            let mut prompts = Vec::new();
            let mut targets = Vec::new();
            for tr in frame.visible_truths() {
                let Some(st) = src.truth(tr.entity_id).filter(|x| x.visible) else { continue };
                let d = crop_descriptor(&src, &st.box2d.expanded_to(1.0))?;
                prompts.push(VisualPrompt::new(prompts.len() as u64, d, super::PromptOrigin::External));
                targets.push(tr.entity_id);
            }
            if prompts.is_empty() {
                continue;
            }
            let enc = params.encode_frame(&frame)?;
            let outs = params.detect_visual(&prompts, &frame, &enc)?;
            let n = params.config.n_candidates;
            for (m, &e) in targets.iter().enumerate() {
                let group = twin_group(s, e);
                let inside = |p: [f64; 2]| {
                    group
                        .iter()
                        .filter_map(|g| frame.truth(*g))
                        .any(|tr| tr.box2d.contains(p))
                };
                let mine = &outs[m * n..(m + 1) * n];
                ev.prompts += 1;
                if inside(mine[0].position) {
                    hits += 1;
                    if mine[0].confidence >= 0.3 {
                        conf += 1;
                    }
                    let c = mine[0].grid_box.center;
                    let best = group
                        .iter()
                        .filter_map(|g| frame.truth(*g))
                        .map(|tr| (tr.grid_box.center[0] - c[0]).hypot(tr.grid_box.center[1] - c[1]))
                        .fold(f64::INFINITY, f64::min);
                    err_sum += best;
                }
                if mine.iter().any(|o| inside(o.position)) {
                    any += 1;
                }
            }
            for (i, o) in frame.owner.iter().enumerate().step_by(97) {
                if o.is_none() {
                    let out = params.decode_point(&frame, frame.grid.cell_center(i))?;
                    bg_total += 1;
                    if out.confidence < 0.3 {
                        bg_reject += 1;
                    }
                }
            }
        }
    }
    let p = ev.prompts.max(1) as f64;
    ev.hit_rate = hits as f64 / p;
    ev.any_hit_rate = any as f64 / p;
    ev.confident_rate = conf as f64 / hits.max(1) as f64;
    ev.center_error = err_sum / hits.max(1) as f64;
    ev.background_reject_rate = bg_reject as f64 / bg_total.max(1) as f64;
    Ok(ev)
}
