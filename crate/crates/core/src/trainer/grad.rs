//! Forward rendering of a training batch with analytic gradients of the
//! weighted loss w.r.t. every field parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batch::TrainingBatch;
use super::loss::{gc_term, GC_EPS};
use crate::error::{Error, Result};
use crate::field::mlp::{MlpTrace, FEATURE_DIM};
use crate::field::{sigmoid, softplus, ColorMode, GridScalar, Stencil, VoxelField};
use crate::geometry::{ray_aabb_intersect, Aabb};
use crate::render::{sample_along_ray, Rgb, DEPTH_EPS, TERMINATION_T};

/// Rays per work unit. Fixed so that results do not depend on the worker count.
pub const CHUNK_RAYS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub color: f64,
    pub depth: f64,
    pub gc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            color: 1.0,
            depth: 0.1,
            gc: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub gc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarchOptions {
    /// Sample spacing as a fraction of the voxel size.
    pub step_fraction: f64,
    pub jitter: bool,
    pub early_termination: bool,
    pub background: Rgb,
    /// Box over which the object probability integrates density; the whole
    /// field when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_bounds: Option<Aabb>,
}

impl Default for MarchOptions {
    fn default() -> Self {
        Self {
            step_fraction: 0.5,
            jitter: true,
            early_termination: true,
            background: [0.0; 3],
            object_bounds: None,
        }
    }
}

/// Dense gradient buffers laid out like the field parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldGradient {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl FieldGradient {
    pub fn zeros<S: GridScalar>(field: &VoxelField<S>) -> Self {
        Self {
            density: vec![0.0; field.density.len()],
            color: vec![0.0; field.color.len()],
            mlp: vec![0.0; field.mlp.as_ref().map_or(0, |m| m.param_count())],
        }
    }

    pub fn clear(&mut self) {
        self.density.iter_mut().for_each(|g| *g = 0.0);
        self.color.iter_mut().for_each(|g| *g = 0.0);
        self.mlp.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.density.iter().chain(&self.color).chain(&self.mlp).all(|g| g.is_finite())
    }
}

/// Forward render of one ray (used for evaluation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayOutput {
    pub color: Rgb,
    pub depth: f64,
    pub opacity: f64,
    pub object_prob: f64,
}

struct Sample {
    stencil: Stencil,
    t: f64,
    delta: f64,
    pre: f64,
    tau: f64,
    trans: f64,
    color: Rgb,
    in_object: bool,
}

#[derive(Default)]
struct ChunkOut {
    sums: [f64; 3],
    stencils: Vec<(usize, [f64; 3])>,
    g_density: Vec<f64>,
    g_color: Vec<f64>,
    mlp: Vec<f64>,
    outputs: Vec<RayOutput>,
}

struct Scales {
    color: f64,
    depth: f64,
    gc: f64,
}

fn march<S: GridScalar>(
    field: &VoxelField<S>,
    ray: &crate::geometry::Ray,
    opts: &MarchOptions,
    rng: Option<&mut ChaCha8Rng>,
    samples: &mut Vec<Sample>,
    traces: &mut Vec<MlpTrace>,
) -> RayOutput {
    samples.clear();
    let Some((ta, tb)) = ray_aabb_intersect(ray, field.bounds()) else {
        return RayOutput {
            color: opts.background,
            depth: 0.0,
            opacity: 0.0,
            object_prob: 0.0,
        };
    };
    let step = field.voxel_size() * opts.step_fraction;
    let n = ((tb - ta) / step).ceil().max(1.0) as usize;
    let positions = sample_along_ray(&ray.with_bounds(ta, tb), n, rng);
    let mlp_mode = field.color_mode() == ColorMode::FeatureMlp;
    let object_span = match &opts.object_bounds {
        Some(b) => ray_aabb_intersect(ray, b),
        None => Some((f64::NEG_INFINITY, f64::INFINITY)),
    };
    let mut object_tau = 0.0;
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth_num = 0.0;
    for (t, delta) in positions {
        let x = ray.at(t);
        let Some(stencil) = field.stencil(&x) else { continue };
        let pre = field.interp_density(&stencil) + field.density_bias;
        let sigma = softplus(pre);
        let tau = sigma * delta;
        let trace = if mlp_mode {
            if traces.len() <= samples.len() {
                traces.push(MlpTrace::default());
            }
            Some(&mut traces[samples.len()])
        } else {
            None
        };
        let c = field.color_at(&stencil, &x, &ray.direction, trace);
        let w = trans * -(-tau).exp_m1();
        for k in 0..3 {
            color[k] += w * c[k];
        }
        depth_num += w * t;
        let in_object = object_span.is_some_and(|(a, b)| t >= a && t <= b);
        if in_object {
            object_tau += tau;
        }
        samples.push(Sample {
            stencil,
            t,
            delta,
            pre,
            tau,
            trans,
            color: c,
            in_object,
        });
        trans *= (-tau).exp();
        if opts.early_termination && trans < TERMINATION_T {
            break;
        }
    }
    let opacity = 1.0 - trans;
    for k in 0..3 {
        color[k] += trans * opts.background[k];
    }
    RayOutput {
        color,
        depth: depth_num / opacity.max(DEPTH_EPS),
        opacity,
        object_prob: if opts.object_bounds.is_some() { -(-object_tau).exp_m1() } else { opacity },
    }
}

#[allow(clippy::too_many_arguments)]
fn backward<S: GridScalar>(
    field: &VoxelField<S>,
    samples: &[Sample],
    traces: &[MlpTrace],
    out: &RayOutput,
    g_color: Rgb,
    g_depth: f64,
    g_prob: f64,
    bounded: bool,
    bg: Rgb,
    chunk: &mut ChunkOut,
) {
    let n = samples.len();
    if n == 0 {
        return;
    }
    let last = &samples[n - 1];
    let t_final = last.trans * (-last.tau).exp();
    let object_trans = if bounded {
        (-samples.iter().filter(|s| s.in_object).map(|s| s.tau).sum::<f64>()).exp()
    } else {
        t_final
    };
    let a = out.opacity;
    let normalized = a >= DEPTH_EPS;
    let denom = a.max(DEPTH_EPS);
    let mut suffix_c = [t_final * bg[0], t_final * bg[1], t_final * bg[2]];
    let mut suffix_t = 0.0;
    let ch = field.channels();
    let mlp_mode = field.color_mode() == ColorMode::FeatureMlp;
    let base = chunk.g_color.len();
    chunk.g_color.resize(base + n * ch, 0.0);
    let first = chunk.stencils.len();
    chunk.stencils.resize(first + n, (0, [0.0; 3]));
    chunk.g_density.resize(first + n, 0.0);
    let mut d_input = Vec::new();
    for k in (0..n).rev() {
        let s = &samples[k];
        let alpha = -(-s.tau).exp_m1();
        let w = s.trans * alpha;
        let t_next = s.trans * (-s.tau).exp();
        let mut d_tau = 0.0;
        for c in 0..3 {
            d_tau += g_color[c] * (t_next * s.color[c] - suffix_c[c]);
        }
        let d_num = t_next * s.t - suffix_t;
        d_tau += g_depth
            * if normalized {
                (d_num - out.depth * t_final) / denom
            } else {
                d_num / denom
            };
        if s.in_object {
            d_tau += g_prob * object_trans;
        }
        for c in 0..3 {
            suffix_c[c] += w * s.color[c];
        }
        suffix_t += w * s.t;

        chunk.stencils[first + k] = (s.stencil.base, s.stencil.frac);
        chunk.g_density[first + k] = d_tau * s.delta * sigmoid(s.pre);
        let d_logits: Rgb = std::array::from_fn(|c| w * g_color[c] * s.color[c] * (1.0 - s.color[c]));
        let slot = &mut chunk.g_color[base + k * ch..base + (k + 1) * ch];
        if mlp_mode {
            if d_logits.iter().all(|g| *g == 0.0) {
                continue;
            }
            let mlp = field.mlp.as_ref().expect("feature mode field carries an MLP");
            mlp.backward(&traces[k], &d_logits, &mut chunk.mlp, &mut d_input);
            slot.copy_from_slice(&d_input[..FEATURE_DIM]);
        } else {
            slot.copy_from_slice(&d_logits);
        }
    }
}

fn run_chunk<S: GridScalar>(
    field: &VoxelField<S>,
    batch: &TrainingBatch,
    range: std::ops::Range<usize>,
    weights: &LossWeights,
    scales: &Scales,
    opts: &MarchOptions,
    mut rng: Option<ChaCha8Rng>,
    want_grad: bool,
) -> ChunkOut {
    let mut chunk = ChunkOut::default();
    if want_grad {
        chunk.mlp = vec![0.0; field.mlp.as_ref().map_or(0, |m| m.param_count())];
    }
    let mut samples = Vec::new();
    let mut traces = Vec::new();
    for i in range {
        let ray = &batch.rays[i];
        let out = march(field, ray, opts, rng.as_mut(), &mut samples, &mut traces);
        let target = batch.target_color[i];
        let mut g_color = [0.0; 3];
        if batch.has_color(i) {
            for c in 0..3 {
                let diff = out.color[c] - target[c];
                chunk.sums[0] += diff * diff;
                g_color[c] = weights.color * scales.color * 2.0 * diff;
            }
        }
        let mut g_depth = 0.0;
        if batch.depth_valid[i] {
            let diff = out.depth - batch.target_depth[i];
            chunk.sums[1] += diff.abs();
            g_depth = weights.depth * scales.depth * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
        }
        let mut g_prob = 0.0;
        if let Some(labels) = &batch.mask_label {
            let (term, d) = gc_term(out.object_prob, labels[i]);
            chunk.sums[2] += term;
            g_prob = weights.gc * scales.gc * d;
        }
        if want_grad {
            backward(
                field,
                &samples,
                &traces,
                &out,
                g_color,
                g_depth,
                g_prob,
                opts.object_bounds.is_some(),
                opts.background,
                &mut chunk,
            );
        } else {
            chunk.outputs.push(out);
        }
    }
    chunk
}

fn scales(batch: &TrainingBatch) -> Scales {
    let n = batch.len() as f64;
    let valid = batch.depth_valid.iter().filter(|v| **v).count();
    let colored = batch.color_count();
    Scales {
        color: if colored > 0 { 1.0 / colored as f64 } else { 0.0 },
        depth: if valid > 0 { 1.0 / valid as f64 } else { 0.0 },
        gc: 1.0 / n,
    }
}

fn chunk_rng(opts: &MarchOptions, seed: u64, stream: u64, chunk: usize) -> Option<ChaCha8Rng> {
    opts.jitter.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((stream << 24) | chunk as u64);
        rng
    })
}

fn breakdown(sums: [f64; 3], batch: &TrainingBatch, weights: &LossWeights) -> LossBreakdown {
    let s = scales(batch);
    let color = sums[0] * s.color;
    let depth = sums[1] * s.depth;
    let gc = if batch.mask_label.is_some() { sums[2] * s.gc } else { 0.0 };
    LossBreakdown {
        total: weights.color * color + weights.depth * depth + weights.gc * gc,
        color,
        depth,
        gc,
    }
}

/// Loss of the batch and its gradient, accumulated into `grad` (which is
/// cleared first). `stream` selects the jitter stream (e.g. the iteration).
pub fn loss_and_gradient<S: GridScalar>(
    field: &VoxelField<S>,
    batch: &TrainingBatch,
    weights: &LossWeights,
    opts: &MarchOptions,
    seed: u64,
    stream: u64,
    grad: &mut FieldGradient,
) -> Result<LossBreakdown> {
    batch.validate()?;
    if batch.is_empty() {
        return Err(Error::NoValidRays);
    }
    let sc = scales(batch);
    let chunks: Vec<ChunkOut> = (0..batch.len().div_ceil(CHUNK_RAYS))
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK_RAYS..((c + 1) * CHUNK_RAYS).min(batch.len());
            run_chunk(field, batch, range, weights, &sc, opts, chunk_rng(opts, seed, stream, c), true)
        })
        .collect();
    grad.clear();
    let offsets = *field.corner_offsets();
    let ch = field.channels();
    let mut sums = [0.0; 3];
    for chunk in &chunks {
        for k in 0..3 {
            sums[k] += chunk.sums[k];
        }
        for (s, (&(base, frac), &gd)) in chunk.stencils.iter().zip(&chunk.g_density).enumerate() {
            let gcol = &chunk.g_color[s * ch..(s + 1) * ch];
            if gd == 0.0 && gcol.iter().all(|g| *g == 0.0) {
                continue;
            }
            let st = stencil_weights(frac);
            for c in 0..8 {
                let node = base + offsets[c];
                let w = st[c];
                grad.density[node] += w * gd;
                let dst = &mut grad.color[node * ch..(node + 1) * ch];
                for (d, g) in dst.iter_mut().zip(gcol) {
                    *d += w * g;
                }
            }
        }
        for (d, g) in grad.mlp.iter_mut().zip(&chunk.mlp) {
            *d += g;
        }
    }
    Ok(breakdown(sums, batch, weights))
}

fn stencil_weights([fx, fy, fz]: [f64; 3]) -> [f64; 8] {
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    [
        gx * gy * gz,
        gx * gy * fz,
        gx * fy * gz,
        gx * fy * fz,
        fx * gy * gz,
        fx * gy * fz,
        fx * fy * gz,
        fx * fy * fz,
    ]
}

/// Loss of the batch without gradients.
pub fn evaluate_loss<S: GridScalar>(
    field: &VoxelField<S>,
    batch: &TrainingBatch,
    weights: &LossWeights,
    opts: &MarchOptions,
    seed: u64,
    stream: u64,
) -> Result<LossBreakdown> {
    let (loss, _) = evaluate(field, batch, weights, opts, seed, stream)?;
    Ok(loss)
}

/// Loss and per-ray forward outputs.
pub fn evaluate<S: GridScalar>(
    field: &VoxelField<S>,
    batch: &TrainingBatch,
    weights: &LossWeights,
    opts: &MarchOptions,
    seed: u64,
    stream: u64,
) -> Result<(LossBreakdown, Vec<RayOutput>)> {
    batch.validate()?;
    if batch.is_empty() {
        return Err(Error::NoValidRays);
    }
    let sc = scales(batch);
    let chunks: Vec<ChunkOut> = (0..batch.len().div_ceil(CHUNK_RAYS))
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK_RAYS..((c + 1) * CHUNK_RAYS).min(batch.len());
            run_chunk(field, batch, range, weights, &sc, opts, chunk_rng(opts, seed, stream, c), false)
        })
        .collect();
    let mut sums = [0.0; 3];
    let mut outputs = Vec::with_capacity(batch.len());
    for chunk in chunks {
        for k in 0..3 {
            sums[k] += chunk.sums[k];
        }
        outputs.extend(chunk.outputs);
    }
    Ok((breakdown(sums, batch, weights), outputs))
}

/// Fingerprint of every branch the loss takes on a batch: the sign of each
/// hidden ReLU input, the sign of each depth residual and whether each
/// object probability is clamped. Two parameter settings with the same
/// fingerprint lie in the same smooth piece of the loss.
pub fn branch_signature<S: GridScalar>(field: &VoxelField<S>, batch: &TrainingBatch, opts: &MarchOptions) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    let mut samples = Vec::new();
    let mut traces: Vec<MlpTrace> = Vec::new();
    for (i, ray) in batch.rays.iter().enumerate() {
        let out = march(field, ray, opts, None, &mut samples, &mut traces);
        if batch.depth_valid[i] {
            (out.depth - batch.target_depth[i]).partial_cmp(&0.0).hash(&mut h);
        }
        (out.opacity.clamp(GC_EPS, 1.0 - GC_EPS) == out.opacity).hash(&mut h);
        if field.color_mode() == ColorMode::FeatureMlp {
            for t in &traces[..samples.len()] {
                for layer in &t.acts[1..t.acts.len() - 1] {
                    for v in layer {
                        (*v > 0.0).hash(&mut h);
                    }
                }
            }
        }
    }
    h.finish()
}
