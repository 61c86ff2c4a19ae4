//! A small differentiable-network kit: dense layers with exact reverse-mode
//! gradients, the focal / dice / smooth-L1 losses, AdamW with a cosine
//! schedule, finite-difference gradient checking, and a bit-exact binary
//! checkpoint format.
//!
//! Parameters of a [`Network`] live in one flat `Vec<f64>`; layer `l` stores
//! its `in x out` row-major weight matrix followed by its `out` biases, and a
//! layer computes `act(x W + b)` on row vectors.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("backward called before forward")]
    NotForwarded,
    #[error("non-finite gradient in {block}")]
    NonFiniteGradient { block: String },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn param_count(&self) -> usize {
        self.input * self.output + self.output
    }
}

/// Named contiguous range of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl Network {
    /// Zero-initialised network with layer widths `dims` (`dims.len() - 1` layers).
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(NnError::Invalid(format!(
                "{} widths for {} activations",
                dims.len(),
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(NnError::Invalid("zero-width layer".into()));
        }
        let layers: Vec<LayerShape> = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| LayerShape {
                input: w[0],
                output: w[1],
                activation,
            })
            .collect();
        Self::from_layers(layers, None)
    }

    /// He-uniform weights, zero biases.
    pub fn init<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, activations)?;
        for l in 0..net.layers.len() {
            let shape = net.layers[l];
            let bound = (6.0 / shape.input as f64).sqrt()
                * if shape.activation == Activation::Relu { 1.0 } else { 0.5 };
            let off = net.offsets[l];
            for w in &mut net.params[off..off + shape.input * shape.output] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<LayerShape>, params: Option<Vec<f64>>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].output != w[1].input {
                return Err(NnError::Invalid(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].output, w[1].input
                )));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        let params = match params {
            Some(p) if p.len() == total => p,
            Some(p) => return Err(NnError::LengthMismatch(p.len(), total)),
            None => vec![0.0; total],
        };
        Ok(Self {
            layers,
            offsets,
            params,
        })
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let s = self.layers[layer];
        let off = self.offsets[layer];
        ArrayView2::from_shape((s.input, s.output), &self.params[off..off + s.input * s.output])
            .expect("layer layout")
    }

    pub fn biases(&self, layer: usize) -> ArrayView1<'_, f64> {
        let s = self.layers[layer];
        let off = self.offsets[layer] + s.input * s.output;
        ArrayView1::from(&self.params[off..off + s.output])
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.layers[layer];
        let off = self.offsets[layer];
        &mut self.params[off..off + s.input * s.output]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.layers[layer];
        let off = self.offsets[layer] + s.input * s.output;
        &mut self.params[off..off + s.output]
    }

    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (l, s) in self.layers.iter().enumerate() {
            let off = self.offsets[l];
            out.push(ParamBlock {
                name: format!("layer {l} weights"),
                start: off,
                len: s.input * s.output,
            });
            out.push(ParamBlock {
                name: format!("layer {l} biases"),
                start: off + s.input * s.output,
                len: s.output,
            });
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Single-vector inference without caching.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.forward_batch(x)?.output().row(0).to_vec())
    }

    /// Batched forward pass over the rows of `x`, caching what backward needs.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::Dimension {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (l, s) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&self.weights(l));
            z += &self.biases(l);
            if s.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        Ok(ForwardCache { acts })
    }

    /// Reverse pass. Returns parameter gradients summed over the batch rows
    /// and the gradient with respect to the input rows.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(GradientTape, Array2<f64>)> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(NnError::Dimension {
                expected: out.ncols(),
                got: upstream.ncols(),
            });
        }
        let mut tape = GradientTape::zeros_for(self);
        let mut delta = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let s = self.layers[l];
            if s.activation == Activation::Relu {
                // the cached post-activation is zero exactly where the unit is off
                ndarray::Zip::from(&mut delta)
                    .and(&cache.acts[l + 1])
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let input = &cache.acts[l];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            let off = self.offsets[l];
            let nw = s.input * s.output;
            for (dst, src) in tape.grads[off..off + nw].iter_mut().zip(gw.iter()) {
                *dst = *src;
            }
            for (dst, src) in tape.grads[off + nw..off + nw + s.output].iter_mut().zip(gb.iter()) {
                *dst = *src;
            }
            delta = delta.dot(&self.weights(l).t());
        }
        Ok((tape, delta))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_network(&mut out, self).expect("in-memory write");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_network(&mut &bytes[..])
    }
}

/// Layer inputs and the final output of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("non-empty")
    }
}

/// Stateful single-sample forward/backward wrapper.
pub struct Recorder<'a> {
    net: &'a Network,
    cache: Option<ForwardCache>,
}

impl<'a> Recorder<'a> {
    pub fn new(net: &'a Network) -> Self {
        Self { net, cache: None }
    }

    pub fn forward(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let cache = self.net.forward_batch(x)?;
        let out = cache.output().row(0).to_vec();
        self.cache = Some(cache);
        Ok(out)
    }

    /// Gradients of `output . upstream`; returns the tape and the input gradient.
    pub fn backward(&self, upstream: &[f64]) -> Result<(GradientTape, Vec<f64>)> {
        let cache = self.cache.as_ref().ok_or(NnError::NotForwarded)?;
        let u = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row vector");
        let (tape, dx) = self.net.backward_batch(cache, u)?;
        Ok((tape, dx.row(0).to_vec()))
    }
}

/// Gradient buffers laid out exactly like a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub grads: Vec<f64>,
}

impl GradientTape {
    pub fn zeros_for(net: &Network) -> Self {
        Self {
            grads: vec![0.0; net.param_count()],
        }
    }

    pub fn accumulate(&mut self, other: &GradientTape) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.grads.iter_mut().for_each(|g| *g *= k);
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }
}

// ---------------------------------------------------------------------------
// Losses. Every loss returns (value, gradient w.r.t. its prediction).

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Mean sigmoid-free focal loss on probabilities. Predictions are clamped to
/// `[1e-7, 1 - 1e-7]`; the gradient is zero where the clamp is active.
pub fn focal_loss(pred: &[f64], label: &[f64], gamma: f64, alpha: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != label.len() {
        return Err(NnError::LengthMismatch(pred.len(), label.len()));
    }
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (&p0, &y)) in pred.iter().zip(label).enumerate() {
        let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p0);
        let p = p0.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        // focal term on the probability of the true class
        let (pt, sign, a) = if y > 0.5 { (p, 1.0, alpha) } else { (1.0 - p, -1.0, 1.0 - alpha) };
        let one_m = 1.0 - pt;
        let mod_f = if gamma == 0.0 { 1.0 } else { one_m.powf(gamma) };
        loss += -a * mod_f * pt.ln();
        if !clamped {
            let dmod = if gamma == 0.0 { 0.0 } else { gamma * one_m.powf(gamma - 1.0) };
            // d/dpt [-a (1-pt)^g ln pt] = a g (1-pt)^(g-1) ln pt - a (1-pt)^g / pt
            let d_pt = a * dmod * pt.ln() - a * mod_f / pt;
            grad[i] = sign * d_pt / n;
        }
    }
    Ok((loss / n, grad))
}

/// `1 - 2 sum(p y) / (sum p + sum y + eps)`.
pub fn dice_loss(pred: &[f64], label: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != label.len() {
        return Err(NnError::LengthMismatch(pred.len(), label.len()));
    }
    let inter: f64 = pred.iter().zip(label).map(|(p, y)| p * y).sum();
    let denom: f64 = pred.iter().sum::<f64>() + label.iter().sum::<f64>() + DICE_EPS;
    let loss = 1.0 - 2.0 * inter / denom;
    let grad = label
        .iter()
        .map(|&y| -2.0 * (y * denom - inter) / (denom * denom))
        .collect();
    Ok((loss, grad))
}

/// Mean Huber-style smooth L1.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(NnError::LengthMismatch(pred.len(), target.len()));
    }
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        if d.abs() < beta {
            loss += 0.5 * d * d / beta;
            grad.push(d / beta / n);
        } else {
            loss += d.abs() - 0.5 * beta;
            grad.push(d.signum() / n);
        }
    }
    Ok((loss / n, grad))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Cosine-annealed learning rate at schedule position `pos` in `[0, 1]`.
pub fn cosine_lr(base: f64, pos: f64) -> f64 {
    let pos = pos.clamp(0.0, 1.0);
    if pos >= 1.0 {
        return 0.0;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * pos).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn for_network(net: &Network) -> Self {
        Self::new(net.param_count())
    }
}

/// One AdamW step over a flat parameter vector. On a non-finite gradient
/// nothing is modified and the offending index is returned.
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    schedule_position: f64,
) -> std::result::Result<(), usize> {
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(bad);
    }
    assert_eq!(params.len(), grads.len(), "gradient length");
    state.step += 1;
    let lr = cosine_lr(cfg.lr, schedule_position);
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        if lr == 0.0 {
            continue;
        }
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

pub fn optimizer_step(
    net: &mut Network,
    tape: &GradientTape,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    schedule_position: f64,
) -> Result<()> {
    if tape.grads.len() != net.param_count() || state.m.len() != net.param_count() {
        return Err(NnError::LengthMismatch(tape.grads.len(), net.param_count()));
    }
    let blocks = net.blocks();
    adamw_update(&mut net.params, &tape.grads, state, cfg, schedule_position).map_err(|i| {
        let block = blocks
            .iter()
            .find(|b| i >= b.start && i < b.start + b.len)
            .map(|b| b.name.clone())
            .unwrap_or_else(|| format!("parameter {i}"));
        NnError::NonFiniteGradient { block }
    })
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| b.max_rel_error >= self.tolerance)
            .map(|b| b.name.as_str())
            .collect()
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.blocks.extend(other.blocks);
        self
    }
}

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares an analytic gradient against central differences of `f` around
/// `params`. `f` returns the loss and, when asked via its flag, the analytic
/// gradient (the flag is false for the perturbed evaluations).
pub fn grad_check_params<F>(
    params: &[f64],
    blocks: &[ParamBlock],
    mut f: F,
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64], bool) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params, true);
    let mut work = params.to_vec();
    let mut reports = Vec::with_capacity(blocks.len());
    let mut worst: f64 = 0.0;
    for b in blocks {
        let mut rel_max: f64 = 0.0;
        let mut abs_max: f64 = 0.0;
        for i in b.start..b.start + b.len {
            let orig = work[i];
            work[i] = orig + step;
            let (lp, _) = f(&work, false);
            work[i] = orig - step;
            let (lm, _) = f(&work, false);
            work[i] = orig;
            let numeric = (lp - lm) / (2.0 * step);
            rel_max = rel_max.max(relative_error(analytic[i], numeric));
            abs_max = abs_max.max((analytic[i] - numeric).abs());
        }
        worst = worst.max(rel_max);
        reports.push(BlockReport {
            name: b.name.clone(),
            max_rel_error: rel_max,
            max_abs_error: abs_max,
        });
    }
    GradCheckReport {
        tolerance,
        max_rel_error: worst,
        blocks: reports,
    }
}

/// Checks a network composed with a loss on its output. `loss_fn` maps the
/// network output to (loss, d loss / d output). Covers every parameter block
/// plus the input gradient (reported as block `"input"`).
pub fn grad_check<L>(net: &Network, loss_fn: L, input: &[f64], tolerance: f64) -> GradCheckReport
where
    L: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n_params = net.param_count();
    let mut blocks = net.blocks();
    blocks.push(ParamBlock {
        name: "input".into(),
        start: n_params,
        len: input.len(),
    });
    let mut joint = net.params().to_vec();
    joint.extend_from_slice(input);
    let mut scratch = net.clone();
    grad_check_params(
        &joint,
        &blocks,
        |theta, want_grad| {
            scratch.params_mut().copy_from_slice(&theta[..n_params]);
            let x = &theta[n_params..];
            let mut rec = Recorder::new(&scratch);
            let out = rec.forward(x).expect("input width");
            let (loss, up) = loss_fn(&out);
            if !want_grad {
                return (loss, Vec::new());
            }
            let (tape, dx) = rec.backward(&up).expect("forwarded");
            let mut g = tape.grads;
            g.extend(dx);
            (loss, g)
        },
        FD_STEP,
        tolerance,
    )
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian binary, bit-exact.

const NET_MAGIC: &[u8; 8] = b"TTCNET\0\x01";

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let n = u64::from_le_bytes(b) as usize;
    if n > (1 << 28) {
        return Err(NnError::Checkpoint(format!("implausible array length {n}")));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_bits(u64::from_le_bytes(b)));
    }
    Ok(out)
}

pub fn write_network<W: Write>(w: &mut W, net: &Network) -> std::io::Result<()> {
    w.write_all(NET_MAGIC)?;
    write_u32(w, net.layers.len() as u32)?;
    for l in &net.layers {
        write_u32(w, l.input as u32)?;
        write_u32(w, l.output as u32)?;
        w.write_all(&[match l.activation {
            Activation::Identity => 0u8,
            Activation::Relu => 1u8,
        }])?;
    }
    write_f64s(w, &net.params)
}

pub fn read_network<R: Read>(r: &mut R) -> Result<Network> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != NET_MAGIC {
        return Err(NnError::Checkpoint("bad network magic or version".into()));
    }
    let n = read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let input = read_u32(r)? as usize;
        let output = read_u32(r)? as usize;
        let mut act = [0u8; 1];
        r.read_exact(&mut act)?;
        let activation = match act[0] {
            0 => Activation::Identity,
            1 => Activation::Relu,
            other => return Err(NnError::Checkpoint(format!("unknown activation tag {other}"))),
        };
        layers.push(LayerShape {
            input,
            output,
            activation,
        });
    }
    let params = read_f64s(r)?;
    Network::from_layers(layers, Some(params))
}
