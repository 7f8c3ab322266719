use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ray_aabb_intersect, Aabb, Box3D, Pose, Ray, Vec3};
use crate::render::{RadianceField, Rgb};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Yawed box with full extents `size`.
    Box { size: [f64; 3] },
    /// Horizontal layer `z_min <= z <= z_max`, unbounded in x and y.
    Slab { z_min: f64, z_max: f64 },
    /// Smooth Gaussian falloff `exp(-r^2 / (2 radius^2))`.
    Blob { radius: f64 },
}

/// Constant-density primitive (or Gaussian-weighted, for blobs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    #[serde(default)]
    pub center: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    pub sigma: f64,
    pub color: Rgb,
    /// Color of the `y < 0` half in the primitive's own frame. `None`
    /// means the primitive is mirror-symmetric about its `y = 0` plane.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_neg_y: Option<Rgb>,
    /// Owner id (object track) used for silhouette attribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<u64>,
}

impl Primitive {
    pub fn new(shape: Shape, center: Vec3, sigma: f64, color: Rgb) -> Self {
        Self {
            shape,
            center: center.into(),
            yaw: 0.0,
            sigma,
            color,
            color_neg_y: None,
            tag: None,
        }
    }

    pub fn with_yaw(mut self, yaw: f64) -> Self {
        self.yaw = yaw;
        self
    }

    pub fn with_tag(mut self, tag: u64) -> Self {
        self.tag = Some(tag);
        self
    }

    pub fn is_symmetric(&self) -> bool {
        self.color_neg_y.is_none()
    }

    pub fn is_smooth(&self) -> bool {
        matches!(self.shape, Shape::Blob { .. })
    }

    fn pose(&self) -> Pose {
        Pose::from_yaw(self.yaw, Vec3::from(self.center))
    }

    fn to_local(&self, x: &Vec3) -> Vec3 {
        let d = x - Vec3::from(self.center);
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Density weight in `[0, 1]` at world point `x`.
    pub fn weight(&self, x: &Vec3) -> f64 {
        match self.shape {
            Shape::Slab { z_min, z_max } => ((z_min..=z_max).contains(&x.z)) as u8 as f64,
            Shape::Sphere { radius } => ((x - Vec3::from(self.center)).norm_squared() <= radius * radius) as u8 as f64,
            Shape::Box { size } => {
                let l = self.to_local(x);
                ((0..3).all(|k| l[k].abs() <= 0.5 * size[k])) as u8 as f64
            }
            Shape::Blob { radius } => {
                let r2 = (x - Vec3::from(self.center)).norm_squared();
                (-0.5 * r2 / (radius * radius)).exp()
            }
        }
    }

    pub fn color_at(&self, x: &Vec3) -> Rgb {
        match self.color_neg_y {
            Some(c) if self.to_local(x).y < 0.0 => c,
            _ => self.color,
        }
    }

    /// Entry/exit parameters of a hard primitive along `ray`, or `None` for
    /// misses and smooth primitives.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        match self.shape {
            Shape::Blob { .. } => None,
            Shape::Slab { z_min, z_max } => {
                let (o, d) = (ray.origin.z, ray.direction.z);
                if d == 0.0 {
                    return (z_min..=z_max).contains(&o).then_some((f64::NEG_INFINITY, f64::INFINITY));
                }
                let (a, b) = ((z_min - o) / d, (z_max - o) / d);
                Some((a.min(b), a.max(b)))
            }
            Shape::Sphere { radius } => {
                let oc = ray.origin - Vec3::from(self.center);
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Shape::Box { size } => {
                let inv = self.pose().inverse();
                let local = Ray {
                    origin: inv.transform_point(&ray.origin),
                    direction: inv.transform_vector(&ray.direction),
                    t_near: f64::NEG_INFINITY,
                    t_far: f64::INFINITY,
                    frame: ray.frame,
                };
                let h = Vec3::from(size) * 0.5;
                ray_aabb_intersect(&local, &Aabb { min: -h, max: h })
            }
        }
    }

    pub fn transformed(&self, pose: &Pose, yaw: f64) -> Primitive {
        let mut p = self.clone();
        p.center = pose.transform_point(&Vec3::from(self.center)).into();
        p.yaw = crate::geometry::wrap_angle(self.yaw + yaw);
        p
    }

    pub fn validate(&self) -> Result<()> {
        let color_ok = |c: &Rgb| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !(self.sigma >= 0.0) || !color_ok(&self.color) || !self.color_neg_y.as_ref().map_or(true, color_ok) {
            return Err(Error::invalid("primitive density must be >= 0 and colors in [0, 1]"));
        }
        let ok = match self.shape {
            Shape::Sphere { radius } | Shape::Blob { radius } => radius > 0.0,
            Shape::Box { size } => size.iter().all(|&s| s > 0.0),
            Shape::Slab { z_min, z_max } => z_min < z_max,
        };
        if !ok {
            return Err(Error::invalid(format!("degenerate primitive shape {:?}", self.shape)));
        }
        Ok(())
    }
}

/// Closed-form scene made of primitives, clipped to `bounds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub bounds: Aabb,
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub ground_height: f64,
}

impl AnalyticScene {
    pub fn new(bounds: Aabb, primitives: Vec<Primitive>, ground_height: f64) -> Result<Self> {
        let s = Self {
            bounds,
            primitives,
            ground_height,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn has_smooth(&self) -> bool {
        self.primitives.iter().any(Primitive::is_smooth)
    }
}

/// Density and color at `x`: densities add, colors are density-weighted.
pub fn eval_analytic(scene: &AnalyticScene, x: &Vec3) -> (f64, Rgb) {
    if !scene.bounds.contains(x) {
        return (0.0, [0.0; 3]);
    }
    let mut sigma = 0.0;
    let mut acc = [0.0; 3];
    for p in &scene.primitives {
        let s = p.sigma * p.weight(x);
        if s > 0.0 {
            let c = p.color_at(x);
            sigma += s;
            for k in 0..3 {
                acc[k] += s * c[k];
            }
        }
    }
    if sigma > 0.0 {
        (sigma, acc.map(|v| v / sigma))
    } else {
        (0.0, [0.0; 3])
    }
}

impl RadianceField for AnalyticScene {
    fn bounds(&self) -> Aabb {
        self.bounds
    }

    fn sample(&self, x: &Vec3, _d: &Vec3) -> (f64, Rgb) {
        eval_analytic(self, x)
    }
}

/// Parameters of the canonical two-box test vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarStyle {
    pub body: Rgb,
    pub cabin: Rgb,
    /// Distinct colors for the `y < 0` side; `None` keeps the car symmetric.
    #[serde(default)]
    pub body_neg_y: Option<Rgb>,
    #[serde(default)]
    pub cabin_neg_y: Option<Rgb>,
    pub sigma: f64,
}

impl Default for CarStyle {
    fn default() -> Self {
        Self {
            body: [0.75, 0.3, 0.28],
            cabin: [0.3, 0.36, 0.62],
            body_neg_y: None,
            cabin_neg_y: None,
            sigma: 40.0,
        }
    }
}

/// Overall box size of the canonical vehicle.
pub const CAR_SIZE: [f64; 3] = [4.4, 1.8, 1.6];

/// Vehicle primitives in the box-local frame (origin at the box center).
pub fn car_primitives(style: &CarStyle) -> Vec<Primitive> {
    let [l, w, h] = CAR_SIZE;
    let body_h = 1.0;
    let body = Primitive {
        color_neg_y: style.body_neg_y,
        ..Primitive::new(
            Shape::Box { size: [l, w, body_h] },
            Vec3::new(0.0, 0.0, -0.5 * h + 0.5 * body_h),
            style.sigma,
            style.body,
        )
    };
    let cabin_h = h - body_h;
    let cabin = Primitive {
        color_neg_y: style.cabin_neg_y,
        ..Primitive::new(
            Shape::Box {
                size: [0.5 * l, w - 0.2, cabin_h],
            },
            Vec3::new(-0.3, 0.0, 0.5 * h - 0.5 * cabin_h),
            style.sigma,
            style.cabin,
        )
    };
    vec![body, cabin]
}

/// An object made of primitives in its own box-local frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub track_id: u64,
    pub size: [f64; 3],
    pub primitives: Vec<Primitive>,
}

impl SynthObject {
    pub fn car(track_id: u64, style: &CarStyle) -> Self {
        Self {
            track_id,
            size: CAR_SIZE,
            primitives: car_primitives(style),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.primitives.iter().all(Primitive::is_symmetric)
    }

    pub fn box_at(&self, center: Vec3, yaw: f64) -> Result<Box3D> {
        Box3D::new(center, Vec3::from(self.size), yaw)
    }

    /// Primitives moved into the world by the box pose, tagged with the track id.
    pub fn placed(&self, bbox: &Box3D) -> Vec<Primitive> {
        let pose = bbox.pose();
        self.primitives
            .iter()
            .map(|p| p.transformed(&pose, bbox.yaw).with_tag(self.track_id))
            .collect()
    }

    /// The object alone, in its local frame, inside `bounds`.
    pub fn local_scene(&self, bounds: Aabb) -> AnalyticScene {
        AnalyticScene {
            bounds,
            primitives: self.primitives.clone(),
            ground_height: -0.5 * self.size[2],
        }
    }

    /// Whether a local-frame point lies inside the object's true volume.
    pub fn contains_local(&self, x: &Vec3) -> bool {
        self.primitives.iter().any(|p| p.weight(x) > 0.0)
    }
}
