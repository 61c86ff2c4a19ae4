//! The Online Adapter: turns object/box/point/visual prompts into decoder
//! queries, aligns visual prompts to a frame with one-to-N localization, and
//! decodes prompt-conditioned 3D boxes.

mod checkpoint;
mod loss;
pub mod train;

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{Detection, PromptId, Provenance};
use crate::geometry::{normalize_angle, Box2D, Box3D, GridSpec};
use crate::nnkit::{sigmoid, Activation, FocalParams, Network, NnError};
use crate::rng::{rng_for, tag};
use crate::scenesim::{normalize, Frame, GridBox, DESCRIPTOR_DIM, LATENT_DIM};

pub use checkpoint::{load_checkpoint, save_checkpoint, OaManifest, MANIFEST_VERSION};
pub use train::{evaluate_alignment, train_oa, AlignEval, CurvePoint, LossAblation, TrainConfig, TrainReport};
pub use loss::{alignment_loss, loc_loss, sample_loss, AlignLoss, FrameSample, Frozen, LocLoss, LossBundle, OaGrads, PointTarget, VisualTarget, BoxTarget};

/// Output width of both alignment projections.
pub const ALIGN_DIM: usize = 64;
pub const ALIGN_HIDDEN: usize = 128;
/// Small constant inside the cosine normaliser.
pub const COS_DELTA: f64 = 1e-12;
/// Decoder outputs: du, dv, ln l, ln w, ln h, sin yaw, cos yaw, confidence logit.
pub const DECODE_DIM: usize = 8;
/// Initial confidence of every decoded query.
pub const CONF_PRIOR: f64 = 0.1;
/// Kernel width, in cells, of the spatial pooling used by non-visual queries.
pub const POOL_SIGMA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum OaError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("point ({0}, {1}) lies outside the grid")]
    OutsideGrid(f64, f64),
    #[error("no prompts given")]
    NoPrompts,
    #[error("prompt {0} has no target in this frame")]
    MissingTarget(usize),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Scene(#[from] crate::scenesim::SceneError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OaError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub focal: f64,
    pub dice: f64,
    pub loc: f64,
    pub decode: f64,
    pub conf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 1.0,
            dice: 1.0,
            loc: 2.0,
            decode: 2.0,
            conf: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OaConfig {
    pub n_candidates: usize,
    pub bands: usize,
    pub max_frequency: f64,
    pub descriptor_dim: usize,
    pub grid: GridSpec,
    /// Similarity is squashed as `sigmoid(sim_scale * (S - 0.5))`.
    pub sim_scale: f64,
    /// Chebyshev radius (cells) suppressed around each picked peak.
    pub peak_radius: usize,
    /// Softmax temperature for similarity-weighted latent pooling.
    pub pool_scale: f64,
    pub loss_weights: LossWeights,
    pub focal: FocalParams,
    pub smooth_l1_beta: f64,
    pub object_queries: usize,
}

impl Default for OaConfig {
    fn default() -> Self {
        Self {
            n_candidates: 4,
            bands: 8,
            max_frequency: 64.0,
            descriptor_dim: DESCRIPTOR_DIM,
            grid: GridSpec::default(),
            sim_scale: 20.0,
            peak_radius: 2,
            pool_scale: 10.0,
            loss_weights: LossWeights::default(),
            focal: FocalParams::default(),
            smooth_l1_beta: 1.0,
            object_queries: 16,
        }
    }
}

impl OaConfig {
    pub fn query_dim(&self) -> usize {
        4 * self.bands
    }

    pub fn frequencies(&self) -> Vec<f64> {
        band_frequencies(self.bands, self.max_frequency)
    }

    fn locator_input_dim(&self) -> usize {
        LATENT_DIM + self.descriptor_dim + 1
    }

    fn decoder_input_dim(&self) -> usize {
        self.query_dim() + LATENT_DIM + 1
    }
}

/// `bands` frequencies log-spaced from 1 to `max` cycles per grid.
pub fn band_frequencies(bands: usize, max: f64) -> Vec<f64> {
    if bands <= 1 {
        return vec![1.0; bands];
    }
    (0..bands)
        .map(|b| max.powf(b as f64 / (bands - 1) as f64))
        .collect()
}

/// Fourier features of normalised coordinates, laid out per coordinate then
/// per band as `[sin, cos]` pairs.
pub fn fourier_pe(coords: &[f64], freqs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * coords.len() * freqs.len());
    for &c in coords {
        for &f in freqs {
            let (s, co) = (2.0 * PI * f * c).sin_cos();
            out.push(s);
            out.push(co);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PromptOrigin {
    Frame { scenario: String, frame: usize },
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPrompt {
    pub id: PromptId,
    pub descriptor: Vec<f64>,
    pub origin: PromptOrigin,
}

impl VisualPrompt {
    /// Normalises the descriptor to unit length.
    pub fn new(id: PromptId, descriptor: Vec<f64>, origin: PromptOrigin) -> Self {
        let mut descriptor = descriptor;
        normalize(&mut descriptor);
        Self {
            id,
            descriptor,
            origin,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub object_prompts: Vec<usize>,
    pub box_prompts: Vec<Box2D>,
    pub point_prompts: Vec<[f64; 2]>,
    pub visual_prompts: Vec<VisualPrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectQuery {
    pub embedding: Vec<f64>,
    pub anchor: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuerySource {
    Object(usize),
    Box(usize),
    Point(usize),
    Visual { prompt: PromptId, candidate: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub embedding: Vec<f64>,
    pub position: [f64; 2],
    /// Pooled latent box encoding around `position`.
    pub pooled: Vec<f64>,
    pub sim_feature: f64,
    pub source: QuerySource,
}

impl Query {
    fn decoder_input(&self) -> impl Iterator<Item = f64> + '_ {
        self.embedding
            .iter()
            .chain(&self.pooled)
            .copied()
            .chain(std::iter::once(self.sim_feature))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub source: QuerySource,
    pub position: [f64; 2],
    pub grid_box: GridBox,
    pub box3d: Box3D,
    pub confidence: f64,
}

impl QueryOutput {
    pub fn provenance(&self) -> Provenance {
        match self.source {
            QuerySource::Visual { prompt, .. } => Provenance::Prompt(prompt),
            _ => Provenance::Query,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            box3d: self.box3d,
            confidence: self.confidence,
            provenance: self.provenance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignResult {
    /// M x cells cosine similarity.
    pub similarity: Array2<f64>,
    /// Peak cell behind each candidate.
    pub peaks: Vec<Vec<usize>>,
    /// M x N candidate positions in grid units.
    pub positions: Vec<Vec<[f64; 2]>>,
    /// M x N pooled latent features at the candidates.
    pub pooled_features: Vec<Vec<Vec<f64>>>,
    /// M x N similarity features at the candidates.
    pub sim_features: Vec<Vec<f64>>,
    /// M x query_dim prompt embeddings (Z_v).
    pub prompt_embeddings: Array2<f64>,
}

/// Normalised image-branch projection of a frame, reusable across prompts.
#[derive(Debug, Clone)]
pub struct FrameEncoding {
    pub image: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OaParams {
    pub config: OaConfig,
    pub prompt_encoder: Network,
    pub proj_prompt: Network,
    pub proj_image: Network,
    pub locator: Network,
    pub point_lift: Network,
    pub shape_lift: Network,
    pub decoder: Network,
    pub object_queries: Vec<ObjectQuery>,
}

pub const NET_NAMES: [&str; 7] = [
    "prompt_encoder",
    "proj_prompt",
    "proj_image",
    "locator",
    "point_lift",
    "shape_lift",
    "decoder",
];

/// Rows normalised as `x / sqrt(|x|^2 + delta)`; returns the norms too.
pub(crate) fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = (row.dot(&row) + COS_DELTA).sqrt();
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (out, norms)
}

/// Backward of `normalize_rows`: `dx = (dy - y (y . dy)) / n`.
pub(crate) fn normalize_rows_backward(y: &Array2<f64>, norms: &[f64], dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let yr = y.row(i);
        let proj = yr.dot(&dy.row(i));
        let n = norms[i];
        row.iter_mut().zip(yr).for_each(|(d, &yv)| *d = (*d - yv * proj) / n);
    }
    dx
}

/// Top-`n` peaks of a similarity row, each suppressing a Chebyshev
/// neighbourhood. Ties resolve to the lowest index. If suppression leaves
/// too few cells the remaining slots take the best unpicked cells.
pub fn pick_peaks(sim: &[f64], grid: &GridSpec, n: usize, radius: usize) -> Vec<usize> {
    let mut blocked = vec![false; sim.len()];
    let mut picked: Vec<usize> = Vec::with_capacity(n);
    let best_unblocked = |blocked: &[bool]| -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &s) in sim.iter().enumerate() {
            if !blocked[i] && best.is_none_or(|b| s > sim[b]) {
                best = Some(i);
            }
        }
        best
    };
    while picked.len() < n {
        let Some(i) = best_unblocked(&blocked) else { break };
        picked.push(i);
        let (row, col) = ((i / grid.width) as isize, (i % grid.width) as isize);
        let r = radius as isize;
        for dr in -r..=r {
            for dc in -r..=r {
                let (rr, cc) = (row + dr, col + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < grid.height && (cc as usize) < grid.width {
                    blocked[grid.cell_index(rr as usize, cc as usize)] = true;
                }
            }
        }
    }
    if picked.len() < n {
        let mut rest: Vec<usize> = (0..sim.len()).filter(|i| !picked.contains(i)).collect();
        rest.sort_by(|&a, &b| sim[b].total_cmp(&sim[a]).then(a.cmp(&b)));
        picked.extend(rest.into_iter().take(n - picked.len()));
    }
    picked
}

/// The 3x3 cell neighbourhood of the cell containing `p`, clipped to the grid.
pub(crate) fn neighborhood(grid: &GridSpec, p: [f64; 2]) -> Vec<usize> {
    let col = (p[0].floor().max(0.0) as usize).min(grid.width - 1) as isize;
    let row = (p[1].floor().max(0.0) as usize).min(grid.height - 1) as isize;
    let mut out = Vec::with_capacity(9);
    for dr in -1..=1 {
        for dc in -1..=1 {
            let (r, c) = (row + dr, col + dc);
            if r >= 0 && c >= 0 && (r as usize) < grid.height && (c as usize) < grid.width {
                out.push(grid.cell_index(r as usize, c as usize));
            }
        }
    }
    out
}

/// Cell containing `p`, clamped into the grid.
pub(crate) fn clamped_cell(grid: &GridSpec, p: [f64; 2]) -> usize {
    let col = (p[0].floor().max(0.0) as usize).min(grid.width - 1);
    let row = (p[1].floor().max(0.0) as usize).min(grid.height - 1);
    grid.cell_index(row, col)
}

/// Latent pooled over `cells` with `weights`, offsets re-expressed relative to `pos`.
pub(crate) fn pool_latent(frame: &Frame, cells: &[usize], weights: &[f64], pos: [f64; 2]) -> Vec<f64> {
    let mut pooled = vec![0.0; LATENT_DIM];
    for (&c, &w) in cells.iter().zip(weights) {
        let centre = frame.grid.cell_center(c);
        let l = frame.latent.row(c);
        for k in 0..LATENT_DIM {
            let mut v = l[k];
            if k < 2 {
                v += centre[k] - pos[k];
            }
            pooled[k] += w * v;
        }
    }
    pooled
}

/// Gaussian weights on the distance from `pos` to each cell centre.
pub(crate) fn distance_weights(grid: &GridSpec, cells: &[usize], pos: [f64; 2]) -> Vec<f64> {
    let k = 1.0 / (2.0 * POOL_SIGMA * POOL_SIGMA);
    let logits: Vec<f64> = cells
        .iter()
        .map(|&c| {
            let m = grid.cell_center(c);
            -((m[0] - pos[0]).powi(2) + (m[1] - pos[1]).powi(2))
        })
        .collect();
    softmax_weights(&logits, k)
}

pub(crate) fn softmax_weights(values: &[f64], scale: f64) -> Vec<f64> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|v| (scale * (v - m)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Locator input for a cell, and its column-mirrored counterpart.
pub(crate) fn locator_inputs(frame: &Frame, cell: usize, s: f64) -> (Vec<f64>, Vec<f64>) {
    let mut x: Vec<f64> = frame.latent.row(cell).to_vec();
    x.extend(frame.appearance.row(cell).iter().map(|a| s * a));
    x.push(s);
    let mut m = x.clone();
    m[0] = -m[0];
    m[6] = -m[6];
    (x, m)
}

/// Flip-equivariant offset from the raw locator outputs on an input and
/// its mirror: the u component is antisymmetrised, v symmetrised.
pub(crate) fn combine_offsets(g: &[f64], gm: &[f64]) -> [f64; 2] {
    [(g[0] - gm[0]) / 2.0, (g[1] + gm[1]) / 2.0]
}

impl OaParams {
    pub fn init(config: OaConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[tag("oa-init")]);
        let q = config.query_dim();
        let d = config.descriptor_dim;
        let relu = Activation::Relu;
        let id = Activation::Identity;
        let prompt_encoder = Network::init(&[d, 64, q], &[relu, id], &mut rng)?;
        let proj_prompt = Network::init(&[q, ALIGN_HIDDEN, ALIGN_DIM], &[relu, id], &mut rng)?;
        let proj_image = Network::init(&[d, ALIGN_HIDDEN, ALIGN_DIM], &[relu, id], &mut rng)?;
        let mut locator = Network::init(&[config.locator_input_dim(), 32, 2], &[relu, id], &mut rng)?;
        // untrained locator proposes the peak cell centre itself
        locator.weights_mut(1).fill(0.0);
        locator.biases_mut(1).fill(0.0);
        let point_lift = Network::init(&[q, q], &[id], &mut rng)?;
        let shape_lift = Network::init(&[q, q], &[id], &mut rng)?;
        let mut decoder = Network::init(
            &[config.decoder_input_dim(), 64, 64, DECODE_DIM],
            &[relu, relu, id],
            &mut rng,
        )?;
        decoder.biases_mut(2)[7] = (CONF_PRIOR / (1.0 - CONF_PRIOR)).ln();
        let side = (config.object_queries as f64).sqrt().ceil().max(1.0) as usize;
        let object_queries = (0..config.object_queries)
            .map(|i| ObjectQuery {
                embedding: (0..q).map(|_| rng.random_range(-0.5..0.5)).collect(),
                anchor: [
                    ((i % side) as f64 + 0.5) * config.grid.width as f64 / side as f64,
                    ((i / side) as f64 + 0.5) * config.grid.height as f64 / side as f64,
                ],
            })
            .collect();
        Ok(Self {
            config,
            prompt_encoder,
            proj_prompt,
            proj_image,
            locator,
            point_lift,
            shape_lift,
            decoder,
            object_queries,
        })
    }

    pub fn networks(&self) -> [&Network; 7] {
        [
            &self.prompt_encoder,
            &self.proj_prompt,
            &self.proj_image,
            &self.locator,
            &self.point_lift,
            &self.shape_lift,
            &self.decoder,
        ]
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 7] {
        [
            &mut self.prompt_encoder,
            &mut self.proj_prompt,
            &mut self.proj_image,
            &mut self.locator,
            &mut self.point_lift,
            &mut self.shape_lift,
            &mut self.decoder,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.networks().iter().map(|n| n.param_count()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.networks().iter().flat_map(|n| n.params().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        for net in self.networks_mut() {
            let n = net.param_count();
            net.params_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Named parameter blocks over `flat_params`.
    pub fn param_blocks(&self) -> Vec<crate::nnkit::ParamBlock> {
        let mut out = Vec::new();
        let mut off = 0;
        for (name, net) in NET_NAMES.iter().zip(self.networks()) {
            for b in net.blocks() {
                out.push(crate::nnkit::ParamBlock {
                    name: format!("{name}/{}", b.name),
                    start: off + b.start,
                    len: b.len,
                });
            }
            off += net.param_count();
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.networks().iter().all(|n| n.is_finite())
    }

    fn check_frame(&self, frame: &Frame) -> Result<()> {
        if frame.appearance.ncols() != self.config.descriptor_dim {
            return Err(OaError::Dimension {
                expected: self.config.descriptor_dim,
                got: frame.appearance.ncols(),
            });
        }
        if frame.grid != self.config.grid {
            return Err(OaError::Dimension {
                expected: self.config.grid.cells(),
                got: frame.grid.cells(),
            });
        }
        Ok(())
    }

    pub fn encode_frame(&self, frame: &Frame) -> Result<FrameEncoding> {
        self.check_frame(frame)?;
        let cache = self.proj_image.forward_batch(frame.appearance.view())?;
        let (image, _) = normalize_rows(cache.output());
        Ok(FrameEncoding { image })
    }

    /// Z_v and the normalised prompt-branch projection for unit descriptors.
    pub fn encode_prompts(&self, descriptors: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let zv = self.prompt_encoder.forward_batch(descriptors)?.output().clone();
        let proj = self.proj_prompt.forward_batch(zv.view())?;
        let (p_hat, _) = normalize_rows(proj.output());
        Ok((zv, p_hat))
    }

    pub fn point_embedding(&self, p: [f64; 2]) -> Result<Vec<f64>> {
        let g = &self.config.grid;
        if !g.contains(p) || !p.iter().all(|v| v.is_finite()) {
            return Err(OaError::OutsideGrid(p[0], p[1]));
        }
        let pe = fourier_pe(
            &[p[0] / g.width as f64, p[1] / g.height as f64],
            &self.config.frequencies(),
        );
        Ok(self.point_lift.forward(&pe)?)
    }

    pub fn box_embedding(&self, b: &Box2D) -> Result<Vec<f64>> {
        let g = &self.config.grid;
        let mut e = self.point_embedding(b.center)?;
        let pe = fourier_pe(
            &[b.extent[0] / g.width as f64, b.extent[1] / g.height as f64],
            &self.config.frequencies(),
        );
        e.iter_mut()
            .zip(self.shape_lift.forward(&pe)?)
            .for_each(|(a, s)| *a += s);
        Ok(e)
    }

    /// Positional addend of a visual query at `pos`.
    pub fn position_encoding(&self, pos: [f64; 2]) -> Vec<f64> {
        let g = &self.config.grid;
        fourier_pe(
            &[pos[0] / g.width as f64, pos[1] / g.height as f64],
            &self.config.frequencies(),
        )
    }

    /// Candidate position for a peak cell.
    pub(crate) fn locate(&self, frame: &Frame, cell: usize, s: f64) -> Result<[f64; 2]> {
        let (x, m) = locator_inputs(frame, cell, s);
        let g = self.locator.forward(&x)?;
        let gm = self.locator.forward(&m)?;
        let off = combine_offsets(&g, &gm);
        let c = frame.grid.cell_center(cell);
        Ok([c[0] + off[0], c[1] + off[1]])
    }

    pub fn align(&self, prompts: &[VisualPrompt], frame: &Frame, enc: &FrameEncoding) -> Result<AlignResult> {
        if prompts.is_empty() {
            return Err(OaError::NoPrompts);
        }
        self.check_frame(frame)?;
        let d = self.config.descriptor_dim;
        let mut desc = Array2::<f64>::zeros((prompts.len(), d));
        for (i, p) in prompts.iter().enumerate() {
            if p.descriptor.len() != d {
                return Err(OaError::Dimension {
                    expected: d,
                    got: p.descriptor.len(),
                });
            }
            desc.row_mut(i).iter_mut().zip(&p.descriptor).for_each(|(a, b)| *a = *b);
        }
        let (zv, p_hat) = self.encode_prompts(desc.view())?;
        let similarity = p_hat.dot(&enc.image.t());
        let n = self.config.n_candidates;
        let grid = self.config.grid;
        let mut peaks = Vec::with_capacity(prompts.len());
        let mut positions = Vec::with_capacity(prompts.len());
        let mut pooled_features = Vec::with_capacity(prompts.len());
        let mut sim_features = Vec::with_capacity(prompts.len());
        for row in similarity.axis_iter(Axis(0)) {
            let s = row.as_slice().expect("standard layout");
            let pk = pick_peaks(s, &grid, n, self.config.peak_radius);
            let mut pos_row = Vec::with_capacity(n);
            let mut pool_row = Vec::with_capacity(n);
            let mut sim_row = Vec::with_capacity(n);
            for &cell in &pk {
                let pos = self.locate(frame, cell, s[cell])?;
                let cells = neighborhood(&grid, pos);
                let vals: Vec<f64> = cells.iter().map(|&c| s[c]).collect();
                let w = softmax_weights(&vals, self.config.pool_scale);
                pool_row.push(pool_latent(frame, &cells, &w, pos));
                sim_row.push(w.iter().zip(&vals).map(|(a, b)| a * b).sum());
                pos_row.push(pos);
            }
            peaks.push(pk);
            positions.push(pos_row);
            pooled_features.push(pool_row);
            sim_features.push(sim_row);
        }
        Ok(AlignResult {
            similarity,
            peaks,
            positions,
            pooled_features,
            sim_features,
            prompt_embeddings: zv,
        })
    }

    fn spatial_query(&self, frame: &Frame, embedding: Vec<f64>, pos: [f64; 2], sim: f64, source: QuerySource) -> Query {
        let cells = neighborhood(&frame.grid, pos);
        let w = distance_weights(&frame.grid, &cells, pos);
        Query {
            embedding,
            position: pos,
            pooled: pool_latent(frame, &cells, &w, pos),
            sim_feature: sim,
            source,
        }
    }

    /// Queries in order: object, box, point, then N per visual prompt.
    pub fn build_queries(&self, set: &PromptSet, frame: &Frame, enc: Option<&FrameEncoding>) -> Result<Vec<Query>> {
        self.check_frame(frame)?;
        let mut out = Vec::new();
        for &i in &set.object_prompts {
            let oq = self.object_queries.get(i).ok_or(OaError::Dimension {
                expected: self.object_queries.len(),
                got: i,
            })?;
            out.push(self.spatial_query(frame, oq.embedding.clone(), oq.anchor, 0.0, QuerySource::Object(i)));
        }
        for (i, b) in set.box_prompts.iter().enumerate() {
            let e = self.box_embedding(b)?;
            out.push(self.spatial_query(frame, e, b.center, 1.0, QuerySource::Box(i)));
        }
        for (i, &p) in set.point_prompts.iter().enumerate() {
            let e = self.point_embedding(p)?;
            out.push(self.spatial_query(frame, e, p, 1.0, QuerySource::Point(i)));
        }
        if !set.visual_prompts.is_empty() {
            let owned;
            let enc = match enc {
                Some(e) => e,
                None => {
                    owned = self.encode_frame(frame)?;
                    &owned
                }
            };
            let a = self.align(&set.visual_prompts, frame, enc)?;
            for (m, p) in set.visual_prompts.iter().enumerate() {
                let zv = a.prompt_embeddings.row(m);
                for (k, &pos) in a.positions[m].iter().enumerate() {
                    let pe = self.position_encoding(pos);
                    out.push(Query {
                        embedding: pe.iter().zip(zv).map(|(x, z)| x + z).collect(),
                        position: pos,
                        pooled: a.pooled_features[m][k].clone(),
                        sim_feature: a.sim_features[m][k],
                        source: QuerySource::Visual {
                            prompt: p.id,
                            candidate: k,
                        },
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn decode_queries(&self, queries: &[Query], frame: &Frame) -> Result<Vec<QueryOutput>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let width = self.config.decoder_input_dim();
        let mut x = Array2::<f64>::zeros((queries.len(), width));
        for (i, q) in queries.iter().enumerate() {
            if q.embedding.len() + q.pooled.len() + 1 != width {
                return Err(OaError::Dimension {
                    expected: width,
                    got: q.embedding.len() + q.pooled.len() + 1,
                });
            }
            x.row_mut(i).iter_mut().zip(q.decoder_input()).for_each(|(a, b)| *a = b);
        }
        let cache = self.decoder.forward_batch(x.view())?;
        let out = cache.output();
        Ok(queries
            .iter()
            .zip(out.rows())
            .map(|(q, o)| decode_output(frame, q, o.as_slice().expect("row")))
            .collect())
    }

    /// Align, build, and decode visual prompts only.
    pub fn detect_visual(&self, prompts: &[VisualPrompt], frame: &Frame, enc: &FrameEncoding) -> Result<Vec<QueryOutput>> {
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let set = PromptSet {
            visual_prompts: prompts.to_vec(),
            ..Default::default()
        };
        let q = self.build_queries(&set, frame, Some(enc))?;
        self.decode_queries(&q, frame)
    }

    pub fn decode_point(&self, frame: &Frame, p: [f64; 2]) -> Result<QueryOutput> {
        let set = PromptSet {
            point_prompts: vec![p],
            ..Default::default()
        };
        let q = self.build_queries(&set, frame, None)?;
        Ok(self.decode_queries(&q, frame)?.remove(0))
    }
}

/// Bounds on decoded log-sizes, keeping boxes finite and non-degenerate.
const LOG_SIZE_RANGE: (f64, f64) = (-3.0, 4.0);

pub(crate) fn decode_output(frame: &Frame, q: &Query, o: &[f64]) -> QueryOutput {
    let yaw = if o[5] == 0.0 && o[6] == 0.0 { 0.0 } else { o[5].atan2(o[6]) };
    let mut gb = GridBox {
        center: [q.position[0] + o[0], q.position[1] + o[1]],
        log_size: [o[2], o[3], o[4]].map(|v| v.clamp(LOG_SIZE_RANGE.0, LOG_SIZE_RANGE.1)),
        yaw: normalize_angle(yaw),
    };
    let out_gb = gb;
    if frame.mirrored {
        gb = gb.mirrored(&frame.grid);
    }
    let centre = frame.ego.to_world(frame.grid.grid_to_ego(gb.center));
    let size = gb.log_size.map(f64::exp);
    let box3d = Box3D::new([centre[0], centre[1], size[2] / 2.0], size, gb.yaw + frame.ego.heading)
        .unwrap_or(Box3D {
            center: [0.0, 0.0, 0.5],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
        });
    QueryOutput {
        source: q.source,
        position: q.position,
        grid_box: out_gb,
        box3d,
        confidence: sigmoid(o[7]),
    }
}

/// Cosine similarity of a descriptor against every cell, without projections.
pub fn raw_similarity(descriptor: &[f64], frame: &Frame) -> Vec<f64> {
    frame
        .appearance
        .rows()
        .into_iter()
        .map(|r| crate::scenesim::cosine(descriptor, r.as_slice().expect("row")))
        .collect()
}
