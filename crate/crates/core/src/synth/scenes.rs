//! Ready-made test worlds.

use std::f64::consts::{PI, TAU};

use super::analytic::{AnalyticScene, CarStyle, Primitive, Shape, SynthObject};
use super::dataset::{ring_cameras, DatasetSpec, MaskNoise, ObjectPose, SynthFrame};
use crate::error::Result;
use crate::geometry::{Aabb, CameraModel, Pose, Vec3};
use crate::render::Rgb;

pub const SKY: Rgb = [0.62, 0.74, 0.88];
pub const ROAD: Rgb = [0.42, 0.42, 0.45];
pub const GROUND_SIGMA: f64 = 50.0;
pub const WALL_SIGMA: f64 = 50.0;

fn ground(bounds: &Aabb, color: Rgb) -> Primitive {
    Primitive::new(
        Shape::Slab {
            z_min: bounds.min.z,
            z_max: 0.0,
        },
        Vec3::zeros(),
        GROUND_SIGMA,
        color,
    )
}

fn wall(center: Vec3, size: [f64; 3], color: Rgb) -> Primitive {
    Primitive::new(Shape::Box { size }, center, WALL_SIGMA, color)
}

/// Street with a ground slab, two walls and one parked car (track 1).
#[derive(Clone, Debug, PartialEq)]
pub struct StreetScene {
    pub scene: AnalyticScene,
    pub car: SynthObject,
    pub car_pose: ObjectPose,
}

impl StreetScene {
    pub fn new() -> Result<Self> {
        let bounds = Aabb::new(Vec3::new(-8.0, -8.0, -0.4), Vec3::new(8.0, 8.0, 3.6))?;
        let prims = vec![
            ground(&bounds, ROAD),
            wall(Vec3::new(0.0, 7.0, 1.25), [10.0, 0.6, 2.5], [0.82, 0.7, 0.52]),
            wall(Vec3::new(-7.0, -1.0, 1.25), [0.6, 8.0, 2.5], [0.5, 0.64, 0.48]),
        ];
        Ok(Self {
            scene: AnalyticScene::new(bounds, prims, 0.0)?,
            car: SynthObject::car(1, &CarStyle::default()),
            car_pose: ObjectPose {
                track_id: 1,
                center: [1.5, -1.0, 0.8],
                yaw: 0.3,
            },
        })
    }

    /// Everything, car included, as one analytic world.
    pub fn full_scene(&self) -> Result<AnalyticScene> {
        let mut scene = self.scene.clone();
        let bbox = self.car.box_at(self.car_pose.center.into(), self.car_pose.yaw)?;
        scene.primitives.extend(self.car.placed(&bbox));
        Ok(scene)
    }

    /// Ring views around the street center; `phase` rotates the ring.
    pub fn cameras(&self, n: usize, phase: f64, size: u32) -> Result<Vec<CameraModel>> {
        ring_cameras(Vec3::new(0.0, 0.0, 0.4), 5.5, 1.6, n, phase, (size, size), 70f64.to_radians())
    }

    pub fn dataset(&self, cameras: Vec<CameraModel>) -> DatasetSpec {
        DatasetSpec {
            name: "street".into(),
            scene: self.scene.clone(),
            objects: vec![self.car.clone()],
            frames: cameras
                .into_iter()
                .enumerate()
                .map(|(i, camera)| SynthFrame {
                    camera,
                    objects: vec![self.car_pose],
                    timestamp: 0.1 * i as f64,
                })
                .collect(),
            background: SKY,
            step: 0.01,
            noise: MaskNoise::default(),
            label_tracks: true,
        }
    }
}

/// Open ground with a single wall in front of the origin, for valid-region tests.
#[derive(Clone, Debug, PartialEq)]
pub struct WallScene {
    pub scene: AnalyticScene,
    /// The wall's footprint, `[x_min, x_max, y_min, y_max]`.
    pub wall: [f64; 4],
}

impl WallScene {
    pub fn new() -> Result<Self> {
        let bounds = Aabb::new(Vec3::new(-20.0, -20.0, -1.0), Vec3::new(20.0, 20.0, 5.0))?;
        let wall_fp = [8.3, 9.7, -4.9, 4.9];
        let center = Vec3::new(0.5 * (wall_fp[0] + wall_fp[1]), 0.5 * (wall_fp[2] + wall_fp[3]), 1.5);
        let size = [wall_fp[1] - wall_fp[0], wall_fp[3] - wall_fp[2], 3.0];
        let prims = vec![ground(&bounds, ROAD), wall(center, size, [0.8, 0.72, 0.6])];
        Ok(Self {
            scene: AnalyticScene::new(bounds, prims, 0.0)?,
            wall: wall_fp,
        })
    }
}

/// Box-local bounds that hold the canonical car with room around it.
pub fn car_bounds() -> Aabb {
    Aabb::new(Vec3::new(-3.0, -1.5, -1.2), Vec3::new(3.0, 1.5, 1.2)).expect("static bounds")
}

/// Which side of the car the cameras see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CarViews {
    All,
    /// Only views from `y > 0` in the car frame.
    PositiveY,
    NegativeY,
}

/// Options of [`car_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct CarShoot {
    pub style: CarStyle,
    pub views: usize,
    pub size: u32,
    pub side: CarViews,
    pub noise: MaskNoise,
    /// Fractional shift of the camera azimuths, in view spacings.
    pub phase: f64,
    /// Park the car on a road slab instead of in front of the sky alone.
    pub ground: bool,
}

impl Default for CarShoot {
    fn default() -> Self {
        Self {
            style: CarStyle::default(),
            views: 24,
            size: 96,
            side: CarViews::All,
            noise: MaskNoise::default(),
            phase: 0.0,
            ground: true,
        }
    }
}

/// A single parked car seen from cameras around it.
pub fn car_dataset(shoot: &CarShoot) -> Result<DatasetSpec> {
    let CarShoot {
        ref style,
        views: n,
        size,
        side: views,
        noise,
        phase,
        ground: with_ground,
    } = *shoot;
    let bounds = Aabb::new(Vec3::new(-8.0, -8.0, -0.4), Vec3::new(8.0, 8.0, 4.0))?;
    let prims = if with_ground { vec![ground(&bounds, ROAD)] } else { Vec::new() };
    let scene = AnalyticScene::new(bounds, prims, 0.0)?;
    let car = SynthObject::car(1, style);
    let pose = ObjectPose {
        track_id: 1,
        center: [0.0, 0.0, 0.8],
        yaw: 0.0,
    };
    let target = Vec3::new(0.0, 0.0, 0.7);
    let hfov = 55f64.to_radians();
    let cameras: Vec<CameraModel> = match views {
        CarViews::All => ring_cameras(target, 7.0, 2.0, n, phase * TAU / n as f64, (size, size), hfov)?,
        CarViews::PositiveY | CarViews::NegativeY => {
            let sign = if views == CarViews::PositiveY { 1.0 } else { -1.0 };
            (0..n)
                .map(|i| {
                    // Azimuths strictly inside (20°, 160°) on the chosen side.
                    let a = (20.0 + 140.0 * (i as f64 + 0.5 + phase) / n as f64).to_radians();
                    let eye = target + Vec3::new(7.0 * a.cos(), sign * 7.0 * a.sin(), 2.0);
                    CameraModel::with_fov(size, size, hfov, Pose::look_at(eye, target, Vec3::z())?)
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(DatasetSpec {
        name: "car".into(),
        scene,
        objects: vec![car],
        frames: cameras
            .into_iter()
            .enumerate()
            .map(|(i, camera)| SynthFrame {
                camera,
                objects: vec![pose],
                timestamp: 0.1 * i as f64,
            })
            .collect(),
        background: SKY,
        step: 0.01,
        noise,
        label_tracks: true,
    })
}

/// Cameras looking at the car from its local frame, used to compare object
/// fields against the analytic car on black.
pub fn local_car_cameras(n: usize, size: u32, side: CarViews) -> Result<Vec<CameraModel>> {
    let (lo, hi) = match side {
        CarViews::All => (0.0, TAU),
        CarViews::PositiveY => (0.25 * PI, 0.75 * PI),
        CarViews::NegativeY => (-0.75 * PI, -0.25 * PI),
    };
    (0..n)
        .map(|i| {
            let a = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
            let eye = Vec3::new(7.0 * a.cos(), 7.0 * a.sin(), 1.2);
            CameraModel::with_fov(size, size, 55f64.to_radians(), Pose::look_at(eye, Vec3::new(0.0, 0.0, -0.1), Vec3::z())?)
        })
        .collect()
}
