//! Training losses of the adapter and their full reverse pass.

use ndarray::Array2;

use super::{
    clamped_cell, combine_offsets, distance_weights, fourier_pe, locator_inputs, neighborhood, normalize_rows,
    normalize_rows_backward, pick_peaks, pool_latent, softmax_weights, OaConfig, OaError, OaParams,
    Result, NET_NAMES,
};
use crate::geometry::Box2D;
use crate::nnkit::{dice_loss, focal_loss, sigmoid, smooth_l1, GradientTape};
use crate::scenesim::{cells_in_box, Frame, GridBox, LATENT_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct LocLoss {
    pub loss: f64,
    pub per_candidate: Vec<f64>,
    pub selected: usize,
    /// Zero for every candidate except `selected`.
    pub grads: Vec<[f64; 2]>,
}

/// Min-over-candidates smooth-L1 between positions and the nearest target
/// centre. Only the winning candidate receives gradient.
pub fn loc_loss(positions: &[[f64; 2]], centers: &[[f64; 2]], beta: f64) -> Result<LocLoss> {
    if centers.is_empty() {
        return Err(OaError::MissingTarget(0));
    }
    if positions.is_empty() {
        return Err(OaError::NoPrompts);
    }
    let mut per_candidate = Vec::with_capacity(positions.len());
    let mut grads_each = Vec::with_capacity(positions.len());
    for p in positions {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for c in centers {
            let (l, g) = smooth_l1(p, c, beta)?;
            if best.as_ref().is_none_or(|(bl, _)| l < *bl) {
                best = Some((l, g));
            }
        }
        let (l, g) = best.expect("non-empty centres");
        per_candidate.push(l);
        grads_each.push([g[0], g[1]]);
    }
    let mut selected = 0;
    for (i, &l) in per_candidate.iter().enumerate() {
        if l < per_candidate[selected] {
            selected = i;
        }
    }
    let mut grads = vec![[0.0; 2]; positions.len()];
    grads[selected] = grads_each[selected];
    Ok(LocLoss {
        loss: per_candidate[selected],
        per_candidate,
        selected,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignLoss {
    pub focal: f64,
    pub dice: f64,
    pub loc: LocLoss,
    /// Gradient of the weighted `focal + dice` w.r.t. the similarity row.
    pub d_sim: Vec<f64>,
    /// Gradient of the weighted localisation term w.r.t. each position.
    pub d_positions: Vec<[f64; 2]>,
}

impl AlignLoss {
    pub fn weighted(&self, cfg: &OaConfig) -> f64 {
        let w = cfg.loss_weights;
        w.focal * self.focal + w.dice * self.dice + w.loc * self.loc.loss
    }
}

/// Focal + dice on the squashed similarity row against a binary mask, plus
/// min-over-N localisation.
pub fn alignment_loss(
    sim: &[f64],
    mask: &[f64],
    positions: &[[f64; 2]],
    centers: &[[f64; 2]],
    cfg: &OaConfig,
) -> Result<AlignLoss> {
    let k = cfg.sim_scale;
    let probs: Vec<f64> = sim.iter().map(|s| sigmoid(k * (s - 0.5))).collect();
    let (focal, gf) = focal_loss(&probs, mask, cfg.focal.gamma, cfg.focal.alpha)?;
    let (dice, gd) = dice_loss(&probs, mask)?;
    let w = cfg.loss_weights;
    let d_sim = probs
        .iter()
        .zip(gf.iter().zip(&gd))
        .map(|(p, (a, b))| (w.focal * a + w.dice * b) * p * (1.0 - p) * k)
        .collect();
    let loc = loc_loss(positions, centers, cfg.smooth_l1_beta)?;
    let d_positions = loc.grads.iter().map(|g| [w.loc * g[0], w.loc * g[1]]).collect();
    Ok(AlignLoss {
        focal,
        dice,
        loc,
        d_sim,
        d_positions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualTarget {
    pub descriptor: Vec<f64>,
    /// The prompted entity first, then entities sharing its appearance.
    pub group: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointTarget {
    pub point: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxTarget {
    pub b: Box2D,
    pub entity: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub frame: Frame,
    pub visual: Vec<VisualTarget>,
    pub points: Vec<PointTarget>,
    pub boxes: Vec<BoxTarget>,
}

/// Quantities treated as constants by the reverse pass (peak picks, decode
/// positions, pooling weights). Supplying them back makes the loss a smooth
/// function of the parameters, which is what finite differences need.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub peaks: Vec<Vec<usize>>,
    pub positions: Vec<Vec<[f64; 2]>>,
    pub pools: Vec<Vec<(Vec<usize>, Vec<f64>, f64)>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBundle {
    pub focal: f64,
    pub dice: f64,
    pub loc: f64,
    pub decode: f64,
    pub conf: f64,
    pub total: f64,
    /// Visual prompts whose first candidate fell inside the target box.
    pub hits: usize,
    pub prompts: usize,
}

impl LossBundle {
    pub fn add(&mut self, o: &LossBundle) {
        self.focal += o.focal;
        self.dice += o.dice;
        self.loc += o.loc;
        self.decode += o.decode;
        self.conf += o.conf;
        self.total += o.total;
        self.hits += o.hits;
        self.prompts += o.prompts;
    }

    pub fn scale(&mut self, k: f64) {
        self.focal *= k;
        self.dice *= k;
        self.loc *= k;
        self.decode *= k;
        self.conf *= k;
        self.total *= k;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OaGrads {
    /// One tape per network, in `NET_NAMES` order.
    pub tapes: Vec<GradientTape>,
}

impl OaGrads {
    pub fn zeros_for(p: &OaParams) -> Self {
        Self {
            tapes: p.networks().iter().map(|n| GradientTape::zeros_for(n)).collect(),
        }
    }

    pub fn accumulate(&mut self, o: &OaGrads) {
        self.tapes.iter_mut().zip(&o.tapes).for_each(|(a, b)| a.accumulate(b));
    }

    pub fn scale(&mut self, k: f64) {
        self.tapes.iter_mut().for_each(|t| t.scale(k));
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tapes.iter().flat_map(|t| t.grads.iter().copied()).collect()
    }

    pub fn tape(&self, name: &str) -> &GradientTape {
        let i = NET_NAMES.iter().position(|n| *n == name).expect("known network");
        &self.tapes[i]
    }
}

struct DecodeRow {
    input: Vec<f64>,
    /// 7-vector box target when the query sits on a target entity.
    target: Option<[f64; 7]>,
    route: Route,
}

enum Route {
    Visual(usize),
    Point(usize),
    Box(usize),
}

fn box_target(gb: &GridBox, pos: [f64; 2]) -> [f64; 7] {
    [
        gb.center[0] - pos[0],
        gb.center[1] - pos[1],
        gb.log_size[0],
        gb.log_size[1],
        gb.log_size[2],
        gb.yaw.sin(),
        gb.yaw.cos(),
    ]
}

fn owner_target(frame: &Frame, pos: [f64; 2], allowed: Option<&[u32]>) -> Option<[f64; 7]> {
    let owner = frame.owner[clamped_cell(&frame.grid, pos)]?;
    if let Some(a) = allowed {
        if !a.contains(&owner) {
            return None;
        }
    }
    frame.truth(owner).map(|t| box_target(&t.grid_box, pos))
}

/// Full training loss of one frame sample and, optionally, its gradient.
///
/// Returns the frozen context actually used so a caller can re-evaluate the
/// same function at perturbed parameters.
pub fn sample_loss(
    params: &OaParams,
    sample: &FrameSample,
    frozen: Option<&Frozen>,
    want_grad: bool,
) -> Result<(LossBundle, Option<OaGrads>, Frozen)> {
    let cfg = &params.config;
    let w = cfg.loss_weights;
    let frame = &sample.frame;
    let grid = frame.grid;
    let q = cfg.query_dim();
    let m_count = sample.visual.len();
    let freqs = cfg.frequencies();
    let norm_pos = |p: [f64; 2]| [p[0] / grid.width as f64, p[1] / grid.height as f64];

    let mut bundle = LossBundle::default();
    let mut grads = want_grad.then(|| OaGrads::zeros_for(params));
    let mut rows: Vec<DecodeRow> = Vec::new();
    let mut new_frozen = Frozen {
        peaks: Vec::new(),
        positions: Vec::new(),
        pools: Vec::new(),
    };

    // alignment branch
    let mut align_state = None;
    if m_count > 0 {
        let img_cache = params.proj_image.forward_batch(frame.appearance.view())?;
        let (i_hat, i_norm) = normalize_rows(img_cache.output());
        let mut desc = Array2::<f64>::zeros((m_count, cfg.descriptor_dim));
        for (i, v) in sample.visual.iter().enumerate() {
            if v.descriptor.len() != cfg.descriptor_dim {
                return Err(OaError::Dimension {
                    expected: cfg.descriptor_dim,
                    got: v.descriptor.len(),
                });
            }
            desc.row_mut(i).iter_mut().zip(&v.descriptor).for_each(|(a, b)| *a = *b);
        }
        let zv_cache = params.prompt_encoder.forward_batch(desc.view())?;
        let zv = zv_cache.output().clone();
        let pp_cache = params.proj_prompt.forward_batch(zv.view())?;
        let (p_hat, p_norm) = normalize_rows(pp_cache.output());
        let sim = p_hat.dot(&i_hat.t());
        let mut d_sim = Array2::<f64>::zeros(sim.dim());
        let inv_m = 1.0 / m_count as f64;
        let n = cfg.n_candidates;
        let mut loc_tape = grads.as_ref().map(|_| GradientTape::zeros_for(&params.locator));

        for (m, target) in sample.visual.iter().enumerate() {
            let truths: Vec<_> = target.group.iter().filter_map(|id| frame.truth(*id)).collect();
            if truths.is_empty() || frame.truth(target.group[0]).is_none() {
                return Err(OaError::MissingTarget(m));
            }
            let row = sim.row(m);
            let s = row.as_slice().expect("standard layout");
            let mut mask = vec![0.0; grid.cells()];
            for t in &truths {
                for c in cells_in_box(&grid, &t.box2d) {
                    mask[c] = 1.0;
                }
            }
            let centers: Vec<[f64; 2]> = truths.iter().map(|t| t.grid_box.center).collect();

            let peaks = match frozen {
                Some(f) => f.peaks[m].clone(),
                None => pick_peaks(s, &grid, n, cfg.peak_radius),
            };
            let mut loc_in = Array2::<f64>::zeros((2 * peaks.len(), cfg.locator_input_dim()));
            for (k, &cell) in peaks.iter().enumerate() {
                let (x, mx) = locator_inputs(frame, cell, s[cell]);
                loc_in.row_mut(k).iter_mut().zip(x).for_each(|(a, b)| *a = b);
                loc_in.row_mut(peaks.len() + k).iter_mut().zip(mx).for_each(|(a, b)| *a = b);
            }
            let loc_cache = params.locator.forward_batch(loc_in.view())?;
            let lo = loc_cache.output();
            let positions: Vec<[f64; 2]> = peaks
                .iter()
                .enumerate()
                .map(|(k, &cell)| {
                    let off = combine_offsets(
                        lo.row(k).as_slice().expect("row"),
                        lo.row(peaks.len() + k).as_slice().expect("row"),
                    );
                    let c = grid.cell_center(cell);
                    [c[0] + off[0], c[1] + off[1]]
                })
                .collect();

            let al = alignment_loss(s, &mask, &positions, &centers, cfg)?;
            bundle.focal += al.focal * inv_m;
            bundle.dice += al.dice * inv_m;
            bundle.loc += al.loc.loss * inv_m;
            if truths[0].box2d.contains(positions[0]) {
                bundle.hits += 1;
            }
            bundle.prompts += 1;

            if let Some(tape) = loc_tape.as_mut() {
                d_sim.row_mut(m).iter_mut().zip(&al.d_sim).for_each(|(a, b)| *a = b * inv_m);
                let mut up = Array2::<f64>::zeros(lo.dim());
                for (k, g) in al.d_positions.iter().enumerate() {
                    up[[k, 0]] = g[0] * 0.5 * inv_m;
                    up[[k, 1]] = g[1] * 0.5 * inv_m;
                    up[[peaks.len() + k, 0]] = -g[0] * 0.5 * inv_m;
                    up[[peaks.len() + k, 1]] = g[1] * 0.5 * inv_m;
                }
                let (t, dx) = params.locator.backward_batch(&loc_cache, up.view())?;
                tape.accumulate(&t);
                // locator inputs carry S at each peak
                let l = LATENT_DIM;
                for (k, &cell) in peaks.iter().enumerate() {
                    let app = frame.appearance.row(cell);
                    for r in [k, peaks.len() + k] {
                        let g = dx.row(r);
                        let ds: f64 = app.iter().enumerate().map(|(j, a)| g[l + j] * a).sum::<f64>() + g[l + app.len()];
                        d_sim[[m, cell]] += ds;
                    }
                }
            }

            // decode inputs; positions and pooling are constants here
            let dec_positions = match frozen {
                Some(f) => f.positions[m].clone(),
                None => positions.clone(),
            };
            let mut pools = Vec::with_capacity(dec_positions.len());
            for (k, &pos) in dec_positions.iter().enumerate() {
                let (cells, wts, simf) = match frozen {
                    Some(f) => f.pools[m][k].clone(),
                    None => {
                        let cells = neighborhood(&grid, pos);
                        let vals: Vec<f64> = cells.iter().map(|&c| s[c]).collect();
                        let wts = softmax_weights(&vals, cfg.pool_scale);
                        let simf = wts.iter().zip(&vals).map(|(a, b)| a * b).sum();
                        (cells, wts, simf)
                    }
                };
                let pe = fourier_pe(&norm_pos(pos), &freqs);
                let mut input: Vec<f64> = pe.iter().zip(zv.row(m)).map(|(a, b)| a + b).collect();
                input.extend(pool_latent(frame, &cells, &wts, pos));
                input.push(simf);
                rows.push(DecodeRow {
                    input,
                    target: owner_target(frame, pos, Some(&target.group)),
                    route: Route::Visual(m),
                });
                pools.push((cells, wts, simf));
            }
            new_frozen.peaks.push(peaks);
            new_frozen.positions.push(dec_positions);
            new_frozen.pools.push(pools);
        }
        if let (Some(g), Some(t)) = (grads.as_mut(), loc_tape) {
            g.tapes[3] = t;
        }
        align_state = Some((img_cache, i_hat, i_norm, zv_cache, pp_cache, p_hat, p_norm, d_sim));
    }

    // point and box queries
    let spatial = |pos: [f64; 2]| {
        let cells = neighborhood(&grid, pos);
        let w = distance_weights(&grid, &cells, pos);
        pool_latent(frame, &cells, &w, pos)
    };
    let mut point_pe = Array2::<f64>::zeros((sample.points.len() + sample.boxes.len(), q));
    for (i, p) in sample.points.iter().enumerate() {
        if !grid.contains(p.point) {
            return Err(OaError::OutsideGrid(p.point[0], p.point[1]));
        }
        let pe = fourier_pe(&norm_pos(p.point), &freqs);
        point_pe.row_mut(i).iter_mut().zip(pe).for_each(|(a, b)| *a = b);
    }
    let mut shape_pe = Array2::<f64>::zeros((sample.boxes.len(), q));
    for (j, b) in sample.boxes.iter().enumerate() {
        if !grid.contains(b.b.center) {
            return Err(OaError::OutsideGrid(b.b.center[0], b.b.center[1]));
        }
        let pe = fourier_pe(&norm_pos(b.b.center), &freqs);
        point_pe.row_mut(sample.points.len() + j).iter_mut().zip(pe).for_each(|(a, b)| *a = b);
        let se = fourier_pe(&norm_pos(b.b.extent), &freqs);
        shape_pe.row_mut(j).iter_mut().zip(se).for_each(|(a, b)| *a = b);
    }
    let lift_cache = params.point_lift.forward_batch(point_pe.view())?;
    let shape_cache = params.shape_lift.forward_batch(shape_pe.view())?;
    for (i, p) in sample.points.iter().enumerate() {
        let mut input = lift_cache.output().row(i).to_vec();
        input.extend(spatial(p.point));
        input.push(1.0);
        rows.push(DecodeRow {
            input,
            target: owner_target(frame, p.point, None),
            route: Route::Point(i),
        });
    }
    for (j, b) in sample.boxes.iter().enumerate() {
        let mut input: Vec<f64> = lift_cache
            .output()
            .row(sample.points.len() + j)
            .iter()
            .zip(shape_cache.output().row(j))
            .map(|(a, b)| a + b)
            .collect();
        input.extend(spatial(b.b.center));
        input.push(1.0);
        let target = b
            .entity
            .and_then(|e| frame.truth(e))
            .map(|t| box_target(&t.grid_box, b.b.center));
        rows.push(DecodeRow {
            input,
            target,
            route: Route::Box(j),
        });
    }

    // decoder
    let mut d_zv_decode = Array2::<f64>::zeros((m_count, q));
    let mut d_lift = Array2::<f64>::zeros(point_pe.dim());
    let mut d_shape = Array2::<f64>::zeros(shape_pe.dim());
    if !rows.is_empty() {
        let width = cfg.decoder_input_dim();
        let mut x = Array2::<f64>::zeros((rows.len(), width));
        for (i, r) in rows.iter().enumerate() {
            debug_assert_eq!(r.input.len(), width);
            x.row_mut(i).iter_mut().zip(&r.input).for_each(|(a, b)| *a = *b);
        }
        let dec_cache = params.decoder.forward_batch(x.view())?;
        let out = dec_cache.output();
        let n_pos = rows.iter().filter(|r| r.target.is_some()).count();
        let mut up = Array2::<f64>::zeros(out.dim());
        for (i, r) in rows.iter().enumerate() {
            if let Some(t) = r.target {
                let pred: Vec<f64> = out.row(i).iter().take(7).copied().collect();
                let (l, g) = smooth_l1(&pred, &t, cfg.smooth_l1_beta)?;
                bundle.decode += l / n_pos as f64;
                for k in 0..7 {
                    up[[i, k]] = w.decode * g[k] / n_pos as f64;
                }
            }
        }
        let probs: Vec<f64> = (0..rows.len()).map(|i| sigmoid(out[[i, 7]])).collect();
        let labels: Vec<f64> = rows.iter().map(|r| f64::from(u8::from(r.target.is_some()))).collect();
        let (cl, cg) = focal_loss(&probs, &labels, cfg.focal.gamma, cfg.focal.alpha)?;
        bundle.conf = cl;
        for i in 0..rows.len() {
            up[[i, 7]] = w.conf * cg[i] * probs[i] * (1.0 - probs[i]);
        }
        if let Some(g) = grads.as_mut() {
            let (t, dx) = params.decoder.backward_batch(&dec_cache, up.view())?;
            g.tapes[6] = t;
            for (i, r) in rows.iter().enumerate() {
                let d_emb = dx.row(i);
                let d_emb = d_emb.iter().take(q);
                match r.route {
                    Route::Visual(m) => d_zv_decode.row_mut(m).iter_mut().zip(d_emb).for_each(|(a, b)| *a += b),
                    Route::Point(p) => d_lift.row_mut(p).iter_mut().zip(d_emb).for_each(|(a, b)| *a += b),
                    Route::Box(b) => {
                        let row = sample.points.len() + b;
                        d_lift.row_mut(row).iter_mut().zip(d_emb.clone()).for_each(|(a, v)| *a += v);
                        d_shape.row_mut(b).iter_mut().zip(d_emb).for_each(|(a, v)| *a += v);
                    }
                }
            }
        }
    }

    if let Some(g) = grads.as_mut() {
        if point_pe.nrows() > 0 {
            g.tapes[4] = params.point_lift.backward_batch(&lift_cache, d_lift.view())?.0;
        }
        if shape_pe.nrows() > 0 {
            g.tapes[5] = params.shape_lift.backward_batch(&shape_cache, d_shape.view())?.0;
        }
        if let Some((img_cache, i_hat, i_norm, zv_cache, pp_cache, p_hat, p_norm, d_sim)) = &align_state {
            let d_p_hat = d_sim.dot(i_hat);
            let d_i_hat = d_sim.t().dot(p_hat);
            let d_p = normalize_rows_backward(p_hat, p_norm, &d_p_hat);
            let (pp_tape, d_zv_align) = params.proj_prompt.backward_batch(pp_cache, d_p.view())?;
            g.tapes[1] = pp_tape;
            let d_zv = d_zv_align + &d_zv_decode;
            g.tapes[0] = params.prompt_encoder.backward_batch(zv_cache, d_zv.view())?.0;
            let d_i = normalize_rows_backward(i_hat, i_norm, &d_i_hat);
            g.tapes[2] = params.proj_image.backward_batch(img_cache, d_i.view())?.0;
        }
    }

    bundle.total = w.focal * bundle.focal
        + w.dice * bundle.dice
        + w.loc * bundle.loc
        + w.decode * bundle.decode
        + w.conf * bundle.conf;
    Ok((bundle, grads, new_frozen))
}
