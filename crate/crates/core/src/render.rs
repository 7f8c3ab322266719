//! Quadrature volume rendering of color, depth and opacity along rays,
//! for single fields and for composed scenes.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ray_aabb_intersect, transform_ray, Aabb, CameraModel, Ray, RigidPlacement, TransformDirection, Vec3};

pub type Rgb = [f64; 3];

/// Opacity below which rendered depth is reported invalid.
pub const DEPTH_EPS: f64 = 1e-4;
/// Transmittance below which early termination stops marching.
pub const TERMINATION_T: f64 = 1e-4;

/// Anything that can be queried for density and color in its own frame.
pub trait RadianceField: Sync {
    fn bounds(&self) -> Aabb;
    /// Extinction (per meter) and color at `x` seen along unit direction `d`.
    fn sample(&self, x: &Vec3, d: &Vec3) -> (f64, Rgb);
    /// Natural sampling step, if the field has one (its voxel size).
    fn step_hint(&self) -> Option<f64> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Background,
    Object(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub t: f64,
    pub sigma: f64,
    pub color: Rgb,
    pub delta: f64,
    pub source: Source,
}

impl SamplePoint {
    pub fn alpha(&self) -> f64 {
        -(-self.sigma * self.delta).exp_m1()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderResult {
    pub color: Rgb,
    /// Opacity-normalized expected termination distance.
    pub depth: f64,
    /// False when opacity is below [`DEPTH_EPS`].
    pub depth_valid: bool,
    pub opacity: f64,
    /// `1 - exp(-sum sigma delta)` over object samples (composed renders only).
    pub object_prob: Option<f64>,
}

impl RenderResult {
    pub fn empty(background: Rgb) -> Self {
        Self {
            color: background,
            depth: 0.0,
            depth_valid: false,
            opacity: 0.0,
            object_prob: None,
        }
    }
}

/// How many quadrature samples each field receives.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Fixed count spread over the field's clipped segment.
    Count(usize),
    /// Step length as a fraction of the field's voxel size (or of 1 m when
    /// the field has no natural step).
    VoxelFraction(f64),
}

impl Sampling {
    fn count_for(&self, field: &dyn RadianceField, length: f64) -> usize {
        match *self {
            Sampling::Count(n) => n.max(1),
            Sampling::VoxelFraction(r) => {
                let step = field.step_hint().unwrap_or(1.0) * r;
                ((length / step).ceil() as usize).max(1)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub sampling: Sampling,
    pub background: Rgb,
    pub early_termination: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            sampling: Sampling::VoxelFraction(0.5),
            background: [0.0; 3],
            early_termination: true,
        }
    }
}

/// Stratified sample positions `(t, delta)` over `[t_near, t_far]`. Without
/// jitter each sample sits at its stratum midpoint.
pub fn sample_along_ray<R: Rng + ?Sized>(ray: &Ray, n: usize, jitter: Option<&mut R>) -> Vec<(f64, f64)> {
    stratified(ray.t_near, ray.t_far, n, jitter)
}

fn stratified<R: Rng + ?Sized>(t0: f64, t1: f64, n: usize, mut jitter: Option<&mut R>) -> Vec<(f64, f64)> {
    let n = n.max(1);
    let delta = (t1 - t0) / n as f64;
    (0..n)
        .map(|i| {
            let u = match jitter.as_deref_mut() {
                Some(rng) => rng.gen::<f64>(),
                None => 0.5,
            };
            (t0 + (i as f64 + u) * delta, delta)
        })
        .collect()
}

/// Alpha-composites samples already sorted by `t`.
pub fn composite(samples: &[SamplePoint], background: Rgb, early_termination: bool) -> RenderResult {
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut depth_num = 0.0;
    let mut object_tau = 0.0;
    let mut any_object = false;
    for s in samples {
        let tau = s.sigma * s.delta;
        let alpha = -(-tau).exp_m1();
        let w = transmittance * alpha;
        for k in 0..3 {
            color[k] += w * s.color[k];
        }
        depth_num += w * s.t;
        if let Source::Object(_) = s.source {
            any_object = true;
            object_tau += tau;
        }
        transmittance *= (-tau).exp();
        if early_termination && transmittance < TERMINATION_T {
            break;
        }
    }
    for k in 0..3 {
        color[k] += transmittance * background[k];
    }
    let opacity = 1.0 - transmittance;
    RenderResult {
        color,
        depth: depth_num / opacity.max(DEPTH_EPS),
        depth_valid: opacity >= DEPTH_EPS,
        opacity,
        object_prob: any_object.then(|| -(-object_tau).exp_m1()),
    }
}

fn gather<F: RadianceField + ?Sized>(
    field: &F,
    ray: &Ray,
    n: usize,
    source: Source,
    out: &mut Vec<SamplePoint>,
) -> Option<(f64, f64)> {
    let (ta, tb) = ray_aabb_intersect(ray, &field.bounds())?;
    let delta = (tb - ta) / n as f64;
    out.reserve(n);
    for i in 0..n {
        let t = ta + (i as f64 + 0.5) * delta;
        let (sigma, color) = field.sample(&ray.at(t), &ray.direction);
        out.push(SamplePoint {
            t,
            sigma,
            color,
            delta,
            source,
        });
    }
    Some((ta, tb))
}

fn check_ray(ray: &Ray) -> Result<()> {
    if !(ray.t_near < ray.t_far) {
        return Err(Error::DegenerateRay {
            t_near: ray.t_near,
            t_far: ray.t_far,
        });
    }
    Ok(())
}

/// Renders a single field with `n` midpoint samples over the ray segment
/// inside the field bounds.
pub fn render<F: RadianceField + ?Sized>(field: &F, ray: &Ray, n: usize, background: Rgb) -> Result<RenderResult> {
    render_with(
        field,
        ray,
        &RenderOptions {
            sampling: Sampling::Count(n),
            background,
            early_termination: false,
        },
    )
}

pub fn render_with<F: RadianceField + ?Sized>(field: &F, ray: &Ray, opts: &RenderOptions) -> Result<RenderResult> {
    check_ray(ray)?;
    let Some((ta, tb)) = ray_aabb_intersect(ray, &field.bounds()) else {
        return Ok(RenderResult::empty(opts.background));
    };
    let n = match opts.sampling {
        Sampling::Count(n) => n.max(1),
        Sampling::VoxelFraction(r) => {
            let step = field.step_hint().unwrap_or(1.0) * r;
            ((tb - ta) / step).ceil().max(1.0) as usize
        }
    };
    let mut samples = Vec::with_capacity(n);
    gather(field, ray, n, Source::Background, &mut samples);
    let mut res = composite(&samples, opts.background, opts.early_termination);
    res.object_prob = None;
    Ok(res)
}

/// Probability that the ray terminates inside `[t_a, t_b]`:
/// `1 - exp(-sum sigma_i delta_i)` with `n` midpoint samples. Zero when
/// there is no intersection.
pub fn render_object_probability<F: RadianceField + ?Sized>(
    field: &F,
    ray: &Ray,
    bounds: Option<(f64, f64)>,
    n: usize,
) -> f64 {
    let Some((ta, tb)) = bounds else {
        return 0.0;
    };
    if !(ta < tb) {
        return 0.0;
    }
    let n = n.max(1);
    let delta = (tb - ta) / n as f64;
    let tau: f64 = (0..n)
        .map(|i| field.sample(&ray.at(ta + (i as f64 + 0.5) * delta), &ray.direction).0 * delta)
        .sum();
    -(-tau).exp_m1()
}

/// A field placed in the world by a rigid transform of its local frame.
#[derive(Clone, Copy)]
pub struct PlacedField<'a> {
    pub field: &'a dyn RadianceField,
    pub placement: RigidPlacement,
}

/// Borrowed view of a composed scene: one background plus placed objects.
#[derive(Clone)]
pub struct SceneView<'a> {
    pub background: &'a dyn RadianceField,
    pub objects: Vec<PlacedField<'a>>,
}

/// Gathers every field's samples along the world ray, merged in canonical order.
pub fn composed_samples(scene: &SceneView<'_>, ray: &Ray, sampling: Sampling) -> Vec<SamplePoint> {
    let mut samples = Vec::new();
    if let Some((ta, tb)) = ray_aabb_intersect(ray, &scene.background.bounds()) {
        let n = sampling.count_for(scene.background, tb - ta);
        gather(scene.background, ray, n, Source::Background, &mut samples);
    }
    for (i, obj) in scene.objects.iter().enumerate() {
        let local = transform_ray(ray, &obj.placement, TransformDirection::WorldToLocal);
        if let Some((ta, tb)) = ray_aabb_intersect(&local, &obj.field.bounds()) {
            let n = sampling.count_for(obj.field, tb - ta);
            gather(obj.field, &local, n, Source::Object(i), &mut samples);
        }
    }
    // The ordering key ignores the source so that permuting the object list
    // cannot change the composite.
    samples.sort_by(|a, b| {
        a.t.total_cmp(&b.t)
            .then(a.sigma.total_cmp(&b.sigma))
            .then(a.color[0].total_cmp(&b.color[0]))
            .then(a.color[1].total_cmp(&b.color[1]))
            .then(a.color[2].total_cmp(&b.color[2]))
            .then(a.delta.total_cmp(&b.delta))
    });
    samples
}

/// Jointly renders the background and all placed objects along a world ray.
pub fn render_composed(scene: &SceneView<'_>, ray: &Ray, opts: &RenderOptions) -> Result<RenderResult> {
    check_ray(ray)?;
    let samples = composed_samples(scene, ray, opts.sampling);
    Ok(composite(&samples, opts.background, opts.early_termination))
}

/// Per-pixel render output of one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: u32,
    pub height: u32,
    pub color: Vec<Rgb>,
    pub depth: Vec<f64>,
    pub depth_valid: Vec<bool>,
    pub opacity: Vec<f64>,
}

/// Renders every pixel center of `camera` with `shade`. Rows are processed
/// in parallel; the output does not depend on the worker count.
pub fn render_image<S>(camera: &CameraModel, shade: S) -> Result<RenderedImage>
where
    S: Fn(&Ray) -> Result<RenderResult> + Sync,
{
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<RenderResult>> = (0..h)
        .into_par_iter()
        .map(|py| (0..w).map(|px| shade(&camera.pixel_ray(px, py))).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut img = RenderedImage {
        width: w,
        height: h,
        color: Vec::with_capacity(camera.pixel_count()),
        depth: Vec::with_capacity(camera.pixel_count()),
        depth_valid: Vec::with_capacity(camera.pixel_count()),
        opacity: Vec::with_capacity(camera.pixel_count()),
    };
    for r in rows.into_iter().flatten() {
        img.color.push(r.color);
        img.depth.push(r.depth);
        img.depth_valid.push(r.depth_valid);
        img.opacity.push(r.opacity);
    }
    Ok(img)
}
