//! Optimization of voxel fields from posed images.

pub mod batch;
pub mod gradcheck;
pub mod grad;
pub mod loss;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::TrainingBatch;
pub use grad::{evaluate, evaluate_loss, loss_and_gradient, FieldGradient, LossBreakdown, LossWeights, MarchOptions, RayOutput};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use loss::{color_loss, depth_loss, gc_loss};

use crate::decomposition::{background_rays, object_rays, DecompositionConfig, ObjectTrack, SceneManifest};
use crate::error::{Error, Result};
use crate::field::{ColorMode, GridScalar, ObjectAsset, VoxelField};
use crate::geometry::{Aabb, Frame, Ray, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_grid: f64,
    pub lr_mlp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    /// Double every object batch with rays mirrored across `y = 0`.
    pub symmetric: bool,
    pub seed: u64,
    pub march: MarchOptions,
    /// A warning is logged when the final training PSNR falls below this.
    pub psnr_warning: f64,
    /// Rays used for the final training PSNR.
    pub eval_rays: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 40_000,
            batch_size: 4096,
            lr_grid: 0.1,
            lr_mlp: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            weights: LossWeights::default(),
            symmetric: false,
            seed: 0,
            march: MarchOptions::default(),
            psnr_warning: 20.0,
            eval_rays: 8192,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(w.color >= 0.0 && w.depth >= 0.0 && w.gc >= 0.0) {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        if !(self.lr_grid >= 0.0 && self.lr_mlp >= 0.0 && self.march.step_fraction > 0.0) {
            return Err(Error::invalid("learning rates must be >= 0 and the step fraction > 0"));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer that only touches parameters whose gradient
/// is non-zero in the current step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub step: u64,
    m: [Vec<f64>; 3],
    v: [Vec<f64>; 3],
}

const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(grad: &FieldGradient) -> Self {
        let lens = [grad.density.len(), grad.color.len(), grad.mlp.len()];
        Self {
            step: 0,
            m: lens.map(|n| vec![0.0; n]),
            v: lens.map(|n| vec![0.0; n]),
        }
    }

    pub fn apply<S: GridScalar>(&mut self, field: &mut VoxelField<S>, grad: &FieldGradient, config: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let update = |p: &mut S, g: f64, m: &mut f64, v: &mut f64, lr: f64| {
            if g == 0.0 {
                return;
            }
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let step = lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            *p = S::from_f64(p.to_f64() - step);
        };
        let [md, mc, mm] = &mut self.m;
        let [vd, vc, vm] = &mut self.v;
        for i in 0..grad.density.len() {
            update(&mut field.density[i], grad.density[i], &mut md[i], &mut vd[i], config.lr_grid);
        }
        for i in 0..grad.color.len() {
            update(&mut field.color[i], grad.color[i], &mut mc[i], &mut vc[i], config.lr_grid);
        }
        if let Some(mlp) = field.mlp.as_mut() {
            for i in 0..grad.mlp.len() {
                update(mlp.param_mut(i), grad.mlp[i], &mut mm[i], &mut vm[i], config.lr_mlp);
            }
        }
    }
}

/// Reflects a box-local ray across the symmetry plane `y = 0`.
pub fn mirror_ray(ray: &Ray) -> Result<Ray> {
    if ray.frame != Frame::Local {
        return Err(Error::FrameMismatch {
            expected: Frame::Local,
            found: ray.frame,
        });
    }
    let mut r = *ray;
    r.origin.y = -r.origin.y;
    r.direction.y = -r.direction.y;
    Ok(r)
}

/// The batch followed by its mirror image (targets carried over).
pub fn mirrored_batch(batch: &TrainingBatch) -> Result<TrainingBatch> {
    let mut out = batch.clone();
    let mut mirror = batch.clone();
    for r in &mut mirror.rays {
        *r = mirror_ray(r)?;
    }
    out.extend(&mirror);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub fn write_loss_csv(trace: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,total,color,depth,gc\n");
    for r in trace {
        let l = &r.loss;
        out.push_str(&format!("{},{},{},{},{}\n", r.iteration, l.total, l.color, l.depth, l.gc));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One optimizer update on `batch`.
pub fn gradient_step<S: GridScalar>(
    field: &mut VoxelField<S>,
    adam: &mut Adam,
    grad: &mut FieldGradient,
    batch: &TrainingBatch,
    config: &TrainConfig,
    iteration: usize,
) -> Result<LossBreakdown> {
    let loss = loss_and_gradient(field, batch, &config.weights, &config.march, config.seed, iteration as u64, grad)?;
    if !loss.total.is_finite() {
        return Err(Error::Diverged {
            iteration,
            what: "loss",
        });
    }
    if !grad.is_finite() {
        return Err(Error::Diverged {
            iteration,
            what: "gradient",
        });
    }
    adam.apply(field, grad, config);
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub field: VoxelField<S>,
    pub trace: Vec<LossRecord>,
    /// PSNR over a fixed subset of the training rays after training.
    pub train_psnr: f64,
}

/// Optimizes `field` on `rays` for `config.iterations` steps, drawing a
/// random batch of rays per step.
pub fn train_field<S: GridScalar>(
    mut field: VoxelField<S>,
    rays: &TrainingBatch,
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    rays.validate()?;
    if rays.is_empty() {
        return Err(Error::NoValidRays);
    }
    let mut grad = FieldGradient::zeros(&field);
    let mut adam = Adam::new(&grad);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.gen_range(0..rays.len())).collect();
        let mut batch = rays.select(&idx);
        if config.symmetric {
            batch = mirrored_batch(&batch)?;
        }
        let loss = gradient_step(&mut field, &mut adam, &mut grad, &batch, config, it)?;
        trace.push(LossRecord { iteration: it, loss });
    }
    let train_psnr = if config.iterations == 0 {
        f64::NAN
    } else {
        let psnr = batch_psnr(&field, rays, config)?;
        if psnr < config.psnr_warning {
            log::warn!("training PSNR {psnr:.2} dB is below {:.2} dB", config.psnr_warning);
        }
        psnr
    };
    Ok(TrainOutcome {
        field,
        trace,
        train_psnr,
    })
}

/// PSNR of the field's renders against a fixed, evenly strided subset of
/// the rays that carry a color target.
pub fn batch_psnr<S: GridScalar>(field: &VoxelField<S>, rays: &TrainingBatch, config: &TrainConfig) -> Result<f64> {
    let colored: Vec<usize> = (0..rays.len()).filter(|&i| rays.has_color(i)).collect();
    if colored.is_empty() {
        return Err(Error::NoValidRays);
    }
    let stride = colored.len().div_ceil(config.eval_rays.max(1)).max(1);
    let idx: Vec<usize> = colored.into_iter().step_by(stride).collect();
    let subset = rays.select(&idx);
    let opts = MarchOptions {
        jitter: false,
        ..config.march
    };
    let (_, out) = evaluate(field, &subset, &config.weights, &opts, config.seed, 0)?;
    let pred: Vec<_> = out.iter().map(|o| o.color).collect();
    Ok(crate::image::psnr(&pred, &subset.target_color))
}

/// Grid layout of a background field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundGrid {
    pub bounds: Aabb,
    pub voxel_size: f64,
    #[serde(default)]
    pub color_mode: ColorMode,
}

/// Grid layout of an object field around its canonical box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectGrid {
    pub voxel_size: f64,
    /// Space (m) kept around the box on every side but the bottom.
    pub margin: f64,
    /// Space (m) kept below the box; objects rest on the road there.
    pub floor_margin: f64,
    pub color_mode: ColorMode,
}

impl Default for ObjectGrid {
    fn default() -> Self {
        Self {
            voxel_size: 0.1,
            margin: 0.3,
            floor_margin: 0.0,
            color_mode: ColorMode::Direct,
        }
    }
}

/// Initial field around a box of `size`. The grid is symmetric about the
/// `x = 0` and `y = 0` planes so that mirroring maps nodes onto nodes.
pub fn object_field(size: Vec3, grid: &ObjectGrid, seed: u64) -> Result<VoxelField<f32>> {
    let v = grid.voxel_size;
    let cells = |extent: f64| (extent / v - 1e-9).ceil().max(0.0);
    let hx = cells(0.5 * size.x + grid.margin);
    let hy = cells(0.5 * size.y + grid.margin);
    let below = cells(0.5 * size.z + grid.floor_margin);
    let above = cells(0.5 * size.z + grid.margin);
    let min = Vec3::new(-hx * v, -hy * v, -below * v);
    let res = [2.0 * hx, 2.0 * hy, below + above].map(|c| c as usize + 1);
    let mut field = VoxelField::new(min, v, res, grid.color_mode)?;
    field.init_mlp(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(field)
}

pub fn background_field(grid: &BackgroundGrid, seed: u64) -> Result<VoxelField<f32>> {
    let mut field = VoxelField::covering(&grid.bounds, grid.voxel_size, grid.color_mode)?;
    field.init_mlp(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(field)
}

/// Trains the static background of a scene.
pub fn train_background(
    manifest: &SceneManifest,
    grid: &BackgroundGrid,
    decomposition: &DecompositionConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome<f32>> {
    if manifest.frames.len() < 2 {
        return Err(Error::invalid("background training needs at least 2 frames"));
    }
    let rays = background_rays(manifest, decomposition)?.batch;
    train_field(background_field(grid, config.seed)?, &rays, config)
}

/// Trains one object from its track, in the box-local frame.
pub fn train_object(
    manifest: &SceneManifest,
    track: &ObjectTrack,
    grid: &ObjectGrid,
    decomposition: &DecompositionConfig,
    config: &TrainConfig,
) -> Result<(ObjectAsset, Vec<LossRecord>, f64)> {
    if track.observations.len() < 2 {
        return Err(Error::invalid("object training needs at least 2 observed frames"));
    }
    let size = track.observations[0].bbox.size;
    let rays = object_rays(track, manifest, decomposition);
    let config = TrainConfig {
        march: MarchOptions {
            background: [0.0; 3],
            ..config.march
        },
        ..*config
    };
    let out = train_field(object_field(size, grid, config.seed)?, &rays, &config)?;
    Ok((ObjectAsset::new(out.field, size, config.symmetric)?, out.trace, out.train_psnr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_assume, proptest};

    fn local_ray(o: Vec3, d: Vec3) -> Ray {
        Ray::new(o, d, 0.0, 10.0).unwrap().in_frame(Frame::Local)
    }

    #[test]
    fn mirror_examples() {
        let r = local_ray(Vec3::new(1.0, 2.0, 0.0), Vec3::new(0.0, -1.0, 0.0));
        let m = mirror_ray(&r).unwrap();
        assert_eq!(m.origin, Vec3::new(1.0, -2.0, 0.0));
        assert_eq!(m.direction, Vec3::new(0.0, 1.0, 0.0));
        let flat = local_ray(Vec3::new(1.0, 0.0, 3.0), Vec3::new(1.0, 0.0, 1.0));
        assert_eq!(mirror_ray(&flat).unwrap(), flat);
        let world = Ray::new(Vec3::zeros(), Vec3::x(), 0.0, 1.0).unwrap();
        assert!(matches!(mirror_ray(&world), Err(Error::FrameMismatch { .. })));
    }

    proptest! {
        #[test]
        fn mirror_is_an_involution(o in prop::array::uniform3(-5.0f64..5.0), d in prop::array::uniform3(-1.0f64..1.0), t0 in 0.0f64..1.0) {
            prop_assume!(Vec3::from(d).norm() > 1e-3);
            let r = Ray::new(o.into(), d.into(), t0, t0 + 3.0).unwrap().in_frame(Frame::Local);
            let m = mirror_ray(&r).unwrap();
            prop_assert_eq!(mirror_ray(&m).unwrap(), r);
            prop_assert_eq!((m.t_near, m.t_far), (r.t_near, r.t_far));
        }

        #[test]
        fn renderer_is_mirror_equivariant(seed in 0u64..1000, o in prop::array::uniform3(-3.0f64..3.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut f = VoxelField::<f64>::new(Vec3::new(-1.0, -1.0, -1.0), 0.5, [5, 5, 5], ColorMode::Direct).unwrap();
            f.density.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..3.0));
            f.color.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
            let g = f.mirrored_y().unwrap();
            let r = local_ray(o.into(), -Vec3::from(o) + Vec3::new(0.1, 0.2, 0.05));
            let a = render(&f, &mirror_ray(&r).unwrap(), 64, [0.1; 3]).unwrap();
            let b = render(&g, &r, 64, [0.1; 3]).unwrap();
            for k in 0..3 {
                prop_assert!((a.color[k] - b.color[k]).abs() < 1e-6);
            }
        }
    }

    fn toy_batch() -> TrainingBatch {
        let mut batch = TrainingBatch::default();
        for i in 0..32 {
            let y = -0.8 + 0.05 * i as f64;
            let ray = Ray::new(Vec3::new(-3.0, y, 0.1), Vec3::x(), 0.0, 10.0).unwrap();
            let inside = y.abs() < 0.4;
            let c = if inside { [0.9, 0.2, 0.1] } else { [0.0; 3] };
            batch.push(ray, c, inside.then_some(2.6), None);
        }
        batch
    }

    fn toy_field() -> VoxelField<f32> {
        VoxelField::new(Vec3::repeat(-1.0), 0.25, [9, 9, 9], ColorMode::Direct).unwrap()
    }

    #[test]
    fn zero_iterations_return_field_unchanged() {
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let out = train_field(toy_field(), &toy_batch(), &cfg).unwrap();
        assert_eq!(out.field, toy_field());
        assert!(out.trace.is_empty());
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let cfg = TrainConfig {
            iterations: 3,
            batch_size: 16,
            weights: LossWeights {
                color: 0.0,
                depth: 0.0,
                gc: 0.0,
            },
            ..TrainConfig::default()
        };
        let out = train_field(toy_field(), &toy_batch(), &cfg).unwrap();
        assert_eq!(out.field, toy_field());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cfg = TrainConfig {
            iterations: 250,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let a = train_field(toy_field(), &toy_batch(), &cfg).unwrap();
        let b = train_field(toy_field(), &toy_batch(), &cfg).unwrap();
        assert_eq!(a.field, b.field);
        assert!(a.trace.last().unwrap().loss.total < 0.2 * a.trace[0].loss.total);
        assert!(a.train_psnr > 20.0, "{}", a.train_psnr);
    }

    #[test]
    fn divergence_reports_iteration() {
        let mut f = toy_field();
        let node = f.node_index(4, 4, 4);
        f.density[node] = f32::NAN;
        let mut batch = TrainingBatch::default();
        batch.push(Ray::new(Vec3::new(-3.0, 0.01, 0.01), Vec3::x(), 0.0, 10.0).unwrap(), [0.5; 3], None, None);
        let cfg = TrainConfig {
            iterations: 2,
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train_field(f, &batch, &cfg), Err(Error::Diverged { iteration: 0, .. })));
    }

    #[test]
    fn object_field_is_y_symmetric() {
        let f = object_field(Vec3::new(4.4, 1.8, 1.6), &ObjectGrid::default(), 0).unwrap();
        let b = f.bounds();
        assert!((b.min.y + b.max.y).abs() < 1e-12);
        assert!(b.contains(&Vec3::new(2.2, 0.9, 0.8)));
        assert!(f.mirrored_y().is_ok());
    }

    #[test]
    fn loss_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let rec = LossRecord {
            iteration: 3,
            loss: LossBreakdown {
                total: 1.5,
                color: 1.0,
                depth: 5.0,
                gc: 0.0,
            },
        };
        write_loss_csv(&[rec], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "iteration,total,color,depth,gc\n3,1.5,1,5,0\n");
    }
}
