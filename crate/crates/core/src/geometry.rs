//! Cameras, rays, rigid poses and oriented boxes.
//!
//! Conventions: the world frame is right-handed with z up. Cameras look
//! down their +z axis with x to the right and y down. Object-local frames
//! have x forward, y left and z up; the symmetry plane of an object is
//! `y = 0` and yaw rotates about z.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Which coordinate frame a ray or box is expressed in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    #[default]
    World,
    Local,
}

/// Wraps an angle to `(-pi, pi]`. Angles already in range are returned untouched.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|k| !(min[k] < max[k])) {
            return Err(Error::invalid(format!(
                "empty bounds: min {:?} max {:?}",
                min.as_slice(),
                max.as_slice()
            )));
        }
        Ok(Self { min, max })
    }

    pub fn from_center_half(center: Vec3, half: Vec3) -> Result<Self> {
        Self::new(center - half, center + half)
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        let m = Vec3::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }
}

/// Rigid world-from-camera (or world-from-local) transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "pose rotation is not a proper rotation (orthogonality error {ortho:.3e}, det {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Pose from a row-major 4x4 homogeneous matrix.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!("pose bottom row must be 0 0 0 1, got {bottom:?}")));
        }
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Camera pose at `eye` looking at `target`, with world `up` pointing
    /// towards the top of the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at target coincides with eye"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at up vector is parallel to the view direction"))?;
        let down = forward.cross(&right);
        Self::new(Matrix3::from_columns(&[right, down, forward]), eye)
    }

    /// Rotation by `yaw` about z followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vec3::z_axis(), yaw).matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = <[f64; 16]>::deserialize(d)?;
        Pose::from_row_major(&m).map_err(serde::de::Error::custom)
    }
}

/// Pinhole camera with a world-from-camera pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRepr", into = "CameraRepr")]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: Pose,
}

#[derive(Serialize, Deserialize)]
struct CameraRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// Row-major world-from-camera matrix.
    pose: Pose,
}

impl TryFrom<CameraRepr> for CameraModel {
    type Error = Error;
    fn try_from(r: CameraRepr) -> Result<Self> {
        CameraModel::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height, r.pose)
    }
}

impl From<CameraModel> for CameraRepr {
    fn from(c: CameraModel) -> Self {
        CameraRepr {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            pose: c.pose,
        }
    }
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32, pose: Pose) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        })
    }

    /// Camera with the given horizontal field of view and a centered principal point.
    pub fn with_fov(width: u32, height: u32, hfov: f64, pose: Pose) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height, pose)
    }

    pub fn center(&self) -> Vec3 {
        *self.pose.translation()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Ray through the subpixel position `(u, v)`.
    pub fn generate_ray(&self, u: f64, v: f64) -> Result<Ray> {
        if !(u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64) {
            return Err(Error::PixelOutOfBounds {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        let dir_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let dir = self.pose.transform_vector(&dir_cam).normalize();
        Ok(Ray {
            origin: self.center(),
            direction: dir,
            t_near: 0.0,
            t_far: f64::INFINITY,
            frame: Frame::World,
        })
    }

    /// Ray through the center of integer pixel `(px, py)`.
    pub fn pixel_ray(&self, px: u32, py: u32) -> Ray {
        self.generate_ray(px as f64 + 0.5, py as f64 + 0.5)
            .expect("pixel centers are inside the image")
    }

    /// Projects a world point to subpixel coordinates; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<Vec2> {
        let c = self.pose.inverse().transform_point(p);
        if c.z <= 1e-9 {
            return None;
        }
        Some(Vec2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }
}

/// Ray `origin + t * direction` restricted to `[t_near, t_far]`, metric `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    pub frame: Frame,
}

impl Ray {
    /// Builds a world-frame ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        let direction = direction
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("ray direction has zero length"))?;
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(Error::DegenerateRay { t_near, t_far });
        }
        Ok(Self {
            origin,
            direction,
            t_near,
            t_far,
            frame: Frame::World,
        })
    }

    pub fn in_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn with_bounds(mut self, t_near: f64, t_far: f64) -> Self {
        self.t_near = t_near;
        self.t_far = t_far;
        self
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Entry and exit parameters of `ray` through `aabb`, clipped to the ray's
/// own `[t_near, t_far]`. `None` when the clipped interval is empty.
pub fn ray_aabb_intersect(ray: &Ray, aabb: &Aabb) -> Option<(f64, f64)> {
    let mut t0 = ray.t_near;
    let mut t1 = ray.t_far;
    for k in 0..3 {
        let o = ray.origin[k];
        let d = ray.direction[k];
        if d == 0.0 {
            if o < aabb.min[k] || o > aabb.max[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let mut ta = (aabb.min[k] - o) * inv;
        let mut tb = (aabb.max[k] - o) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

/// Oriented box with yaw-only rotation. `size` is (length, width, height)
/// along the box's local (x, y, z) axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRepr", into = "BoxRepr")]
pub struct Box3D {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
    pub frame: Frame,
}

#[derive(Serialize, Deserialize)]
struct BoxRepr {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    #[serde(default, skip_serializing_if = "is_world")]
    frame: Frame,
}

fn is_world(f: &Frame) -> bool {
    *f == Frame::World
}

impl TryFrom<BoxRepr> for Box3D {
    type Error = Error;
    fn try_from(r: BoxRepr) -> Result<Self> {
        Ok(Box3D::new(r.center.into(), r.size.into(), r.yaw)?.in_frame(r.frame))
    }
}

impl From<Box3D> for BoxRepr {
    fn from(b: Box3D) -> Self {
        BoxRepr {
            center: b.center.into(),
            size: b.size.into(),
            yaw: b.yaw,
            frame: b.frame,
        }
    }
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3, yaw: f64) -> Result<Self> {
        if !size.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("box sizes must be positive, got {:?}", size.as_slice())));
        }
        if !yaw.is_finite() || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("box center and yaw must be finite"));
        }
        Ok(Self {
            center,
            size,
            yaw: wrap_angle(yaw),
            frame: Frame::World,
        })
    }

    pub fn in_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    pub fn pose(&self) -> Pose {
        Pose::from_yaw(self.yaw, self.center)
    }

    /// Axis-aligned extent of the box in its own local frame.
    pub fn local_aabb(&self) -> Aabb {
        Aabb {
            min: -self.size * 0.5,
            max: self.size * 0.5,
        }
    }

    /// Footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [Vec2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.size.x;
        let hw = 0.5 * self.size.y;
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(x, y)| Vec2::new(self.center.x + c * x - s * y, self.center.y + s * x + c * y))
    }

    pub fn z_range(&self) -> (f64, f64) {
        let h = 0.5 * self.size.z;
        (self.center.z - h, self.center.z + h)
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let fp = self.footprint();
        let (z0, z1) = self.z_range();
        [
            Vec3::new(fp[0].x, fp[0].y, z0),
            Vec3::new(fp[1].x, fp[1].y, z0),
            Vec3::new(fp[2].x, fp[2].y, z0),
            Vec3::new(fp[3].x, fp[3].y, z0),
            Vec3::new(fp[0].x, fp[0].y, z1),
            Vec3::new(fp[1].x, fp[1].y, z1),
            Vec3::new(fp[2].x, fp[2].y, z1),
            Vec3::new(fp[3].x, fp[3].y, z1),
        ]
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let local = self.pose().inverse().transform_point(p);
        (0..3).all(|k| local[k].abs() <= 0.5 * self.size[k])
    }
}

/// Intersection over union of two yaw-rotated boxes.
///
/// Exact for yaw-only boxes: footprint polygon intersection times the
/// overlap of the vertical extents.
pub fn box3d_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let area = convex_intersection_area(&a.footprint(), &b.footprint());
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn cross2(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn polygon_area(poly: &[Vec2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        acc += cross2(poly[i], poly[(i + 1) % poly.len()]);
    }
    0.5 * acc.abs()
}

/// Sutherland-Hodgman clip of one convex CCW polygon against another.
fn convex_intersection_area(subject: &[Vec2], clip: &[Vec2]) -> f64 {
    let mut out: Vec<Vec2> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b - a;
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let sp = cross2(edge, p - a);
            let sq = cross2(edge, q - a);
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push(p + (q - p) * t);
            }
        }
    }
    polygon_area(&out)
}

/// Rigid placement of an object: box-local frame to world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidPlacement {
    pub translation: Vec3,
    pub yaw: f64,
    pub target: Box3D,
}

impl RigidPlacement {
    pub fn from_box(target: Box3D) -> Self {
        Self {
            translation: target.center,
            yaw: target.yaw,
            target,
        }
    }

    pub fn identity(size: Vec3) -> Result<Self> {
        Ok(Self::from_box(Box3D::new(Vec3::zeros(), size, 0.0)?))
    }

    pub fn world_from_local(&self) -> Pose {
        Pose::from_yaw(self.yaw, self.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformDirection {
    WorldToLocal,
    LocalToWorld,
}

/// Maps a ray between world and placement-local frames. `t` bounds are kept.
pub fn transform_ray(ray: &Ray, placement: &RigidPlacement, direction: TransformDirection) -> Ray {
    let wl = placement.world_from_local();
    let (pose, frame) = match direction {
        TransformDirection::LocalToWorld => (wl, Frame::World),
        TransformDirection::WorldToLocal => (wl.inverse(), Frame::Local),
    };
    Ray {
        origin: pose.transform_point(&ray.origin),
        direction: pose.transform_vector(&ray.direction),
        t_near: ray.t_near,
        t_far: ray.t_far,
        frame,
    }
}
