//! Explicit voxel radiance fields: a density grid plus either a direct RGB
//! grid or a feature grid decoded by a shallow MLP.

pub mod asset;
pub mod mlp;

use std::fmt::Debug;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Box3D, Frame, Vec3};
use crate::render::RadianceField;
use mlp::{ColorMlp, MlpTrace, FEATURE_DIM};

/// Storage scalar for grids and MLP weights. Assets are stored as `f32`;
/// `f64` fields are used for finite-difference gradient checks.
pub trait GridScalar: Copy + Default + Send + Sync + PartialEq + Debug + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl GridScalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl GridScalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    #[default]
    Direct,
    FeatureMlp,
}

impl ColorMode {
    pub fn channels(self) -> usize {
        match self {
            ColorMode::Direct => 3,
            ColorMode::FeatureMlp => FEATURE_DIM,
        }
    }
}

/// Initial pre-activation density stored in every node.
pub const INIT_RAW_DENSITY: f64 = -4.0;
/// Activated density of a freshly initialized field, per meter.
pub const INIT_DENSITY: f64 = 1e-3;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Trilinear stencil of a point: the base node index, the fractional
/// offsets within the cell, and the eight corner weights.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub base: usize,
    pub frac: [f64; 3],
    pub weights: [f64; 8],
}

impl Stencil {
    fn new(base: usize, frac: [f64; 3]) -> Self {
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        Self {
            base,
            frac,
            weights: [
                gx * gy * gz,
                gx * gy * fz,
                gx * fy * gz,
                gx * fy * fz,
                fx * gy * gz,
                fx * gy * fz,
                fx * fy * gz,
                fx * fy * fz,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField<S = f32> {
    bounds: Aabb,
    resolution: [usize; 3],
    voxel_size: f64,
    /// Node-major `(ix * ny + iy) * nz + iz`, pre-activation.
    pub density: Vec<S>,
    color_mode: ColorMode,
    /// `channels` values per node, same node order as `density`.
    pub color: Vec<S>,
    pub mlp: Option<ColorMlp<S>>,
    pub density_bias: f64,
    corner_offsets: [usize; 8],
}

impl<S: GridScalar> VoxelField<S> {
    /// Field with `resolution` nodes starting at `min` and spaced `voxel_size` apart.
    pub fn new(min: Vec3, voxel_size: f64, resolution: [usize; 3], color_mode: ColorMode) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::invalid(format!("grid resolution must be >= 2 per axis, got {resolution:?}")));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::invalid(format!("voxel size must be positive, got {voxel_size}")));
        }
        let nodes: usize = resolution.iter().product();
        if nodes > u32::MAX as usize {
            return Err(Error::invalid("grid too large"));
        }
        let max = min + Vec3::new(
            (resolution[0] - 1) as f64,
            (resolution[1] - 1) as f64,
            (resolution[2] - 1) as f64,
        ) * voxel_size;
        let bounds = Aabb::new(min, max)?;
        let density_bias = softplus_inv(INIT_DENSITY) - INIT_RAW_DENSITY;
        let mlp = (color_mode == ColorMode::FeatureMlp).then(ColorMlp::zeros);
        Ok(Self::from_parts(
            bounds,
            resolution,
            voxel_size,
            vec![S::from_f64(INIT_RAW_DENSITY); nodes],
            color_mode,
            vec![S::default(); nodes * color_mode.channels()],
            mlp,
            density_bias,
        ))
    }

    /// Smallest grid with the given voxel size that covers `bounds`.
    pub fn covering(bounds: &Aabb, voxel_size: f64, color_mode: ColorMode) -> Result<Self> {
        let size = bounds.size();
        let res = [0, 1, 2].map(|k| ((size[k] / voxel_size - 1e-9).ceil() as usize + 1).max(2));
        Self::new(bounds.min, voxel_size, res, color_mode)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        bounds: Aabb,
        resolution: [usize; 3],
        voxel_size: f64,
        density: Vec<S>,
        color_mode: ColorMode,
        color: Vec<S>,
        mlp: Option<ColorMlp<S>>,
        density_bias: f64,
    ) -> Self {
        let [_, ny, nz] = resolution;
        let (sx, sy) = (ny * nz, nz);
        let corner_offsets = [0, 1, sy, sy + 1, sx, sx + 1, sx + sy, sx + sy + 1];
        Self {
            bounds,
            resolution,
            voxel_size,
            density,
            color_mode,
            color,
            mlp,
            density_bias,
            corner_offsets,
        }
    }

    /// Randomizes the MLP weights (feature mode only).
    pub fn init_mlp<R: Rng>(&mut self, rng: &mut R) {
        if self.color_mode == ColorMode::FeatureMlp {
            self.mlp = Some(ColorMlp::random(rng));
        }
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn color_mode(&self) -> ColorMode {
        self.color_mode
    }

    pub fn channels(&self) -> usize {
        self.color_mode.channels()
    }

    pub fn node_count(&self) -> usize {
        self.density.len()
    }

    pub fn corner_offsets(&self) -> &[usize; 8] {
        &self.corner_offsets
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution[1] + j) * self.resolution[2] + k
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.bounds.min + Vec3::new(i as f64, j as f64, k as f64) * self.voxel_size
    }

    /// Activated density stored at a node (no interpolation).
    pub fn node_density(&self, index: usize) -> f64 {
        softplus(self.density[index].to_f64() + self.density_bias)
    }

    /// Trilinear stencil of `x`, or `None` outside the bounds.
    #[inline]
    pub fn stencil(&self, x: &Vec3) -> Option<Stencil> {
        let mut cell = [0usize; 3];
        let mut frac = [0.0; 3];
        for k in 0..3 {
            let g = (x[k] - self.bounds.min[k]) / self.voxel_size;
            let last = (self.resolution[k] - 1) as f64;
            if !(g >= 0.0 && g <= last) {
                return None;
            }
            let i = (g.floor() as usize).min(self.resolution[k] - 2);
            cell[k] = i;
            frac[k] = g - i as f64;
        }
        Some(Stencil::new(self.node_index(cell[0], cell[1], cell[2]), frac))
    }

    #[inline]
    pub fn interp_density(&self, s: &Stencil) -> f64 {
        let mut acc = 0.0;
        for c in 0..8 {
            acc += s.weights[c] * self.density[s.base + self.corner_offsets[c]].to_f64();
        }
        acc
    }

    /// Interpolated color (or feature) channels written into `out`.
    #[inline]
    pub fn interp_color(&self, s: &Stencil, out: &mut [f64]) {
        let ch = self.channels();
        out[..ch].iter_mut().for_each(|v| *v = 0.0);
        for c in 0..8 {
            let w = s.weights[c];
            let node = (s.base + self.corner_offsets[c]) * ch;
            for (k, o) in out[..ch].iter_mut().enumerate() {
                *o += w * self.color[node + k].to_f64();
            }
        }
    }

    /// Position mapped to the unit cube of the bounds (MLP encoding input).
    pub fn unit_position(&self, x: &Vec3) -> Vec3 {
        (x - self.bounds.min).component_div(&self.bounds.size())
    }

    /// Activated density at `x`; zero outside the bounds.
    pub fn query_density(&self, x: &Vec3) -> f64 {
        match self.stencil(x) {
            Some(s) => softplus(self.interp_density(&s) + self.density_bias),
            None => 0.0,
        }
    }

    /// Color at `x` seen along unit direction `d`; black outside the bounds.
    pub fn query_color(&self, x: &Vec3, d: &Vec3) -> [f64; 3] {
        match self.stencil(x) {
            Some(s) => self.color_at(&s, x, d, None),
            None => [0.0; 3],
        }
    }

    /// Color from a stencil; when `trace` is given, the MLP activations are recorded.
    pub fn color_at(&self, s: &Stencil, x: &Vec3, d: &Vec3, trace: Option<&mut MlpTrace>) -> [f64; 3] {
        let mut buf = [0.0; FEATURE_DIM];
        self.interp_color(s, &mut buf);
        match self.color_mode {
            ColorMode::Direct => [sigmoid(buf[0]), sigmoid(buf[1]), sigmoid(buf[2])],
            ColorMode::FeatureMlp => {
                let mlp = self.mlp.as_ref().expect("feature mode field carries an MLP");
                let mut input = Vec::with_capacity(mlp::MLP_INPUT_DIM);
                mlp::encode_input(&buf, &self.unit_position(x), d, &mut input);
                let logits = match trace {
                    Some(t) => {
                        mlp.forward_trace(&input, t);
                        let last = t.acts.last().expect("trace output");
                        [last[0], last[1], last[2]]
                    }
                    None => mlp.forward(&input),
                };
                logits.map(sigmoid)
            }
        }
    }

    /// Converts storage precision.
    pub fn cast<T: GridScalar>(&self) -> VoxelField<T> {
        VoxelField::from_parts(
            self.bounds,
            self.resolution,
            self.voxel_size,
            self.density.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            self.color_mode,
            self.color.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            self.mlp.as_ref().map(ColorMlp::cast),
            self.density_bias,
        )
    }

    /// Mirror image of the grids about the plane `y = 0`. Requires bounds
    /// symmetric in y so that nodes map onto nodes.
    pub fn mirrored_y(&self) -> Result<Self> {
        if (self.bounds.min.y + self.bounds.max.y).abs() > 1e-9 * self.bounds.size().y {
            return Err(Error::invalid("mirroring requires y-symmetric bounds"));
        }
        let [nx, ny, nz] = self.resolution;
        let ch = self.channels();
        let mut out = self.clone();
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let src = self.node_index(i, ny - 1 - j, k);
                    let dst = self.node_index(i, j, k);
                    out.density[dst] = self.density[src];
                    out.color[dst * ch..(dst + 1) * ch].copy_from_slice(&self.color[src * ch..(src + 1) * ch]);
                }
            }
        }
        Ok(out)
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let nodes: usize = self.resolution.iter().product();
        if self.resolution.iter().any(|&n| n < 2) {
            return Err(Error::Format(format!("resolution {:?} below 2", self.resolution)));
        }
        if self.density.len() != nodes || self.color.len() != nodes * self.channels() {
            return Err(Error::Format("grid lengths do not match resolution".into()));
        }
        for k in 0..3 {
            let expect = self.bounds.size()[k] / (self.resolution[k] - 1) as f64;
            if (expect - self.voxel_size).abs() > 1e-6 {
                return Err(Error::Format(format!(
                    "voxel size {} inconsistent with bounds along axis {k} ({expect})",
                    self.voxel_size
                )));
            }
        }
        if (self.color_mode == ColorMode::FeatureMlp) != self.mlp.is_some() {
            return Err(Error::Format("MLP presence does not match color mode".into()));
        }
        Ok(())
    }
}

impl<S: GridScalar> RadianceField for VoxelField<S> {
    fn bounds(&self) -> Aabb {
        self.bounds
    }

    fn sample(&self, x: &Vec3, d: &Vec3) -> (f64, [f64; 3]) {
        match self.stencil(x) {
            Some(s) => {
                let sigma = softplus(self.interp_density(&s) + self.density_bias);
                (sigma, self.color_at(&s, x, d, None))
            }
            None => (0.0, [0.0; 3]),
        }
    }

    fn step_hint(&self) -> Option<f64> {
        Some(self.voxel_size)
    }
}

/// A trained object expressed in its box-local frame (origin at the box center).
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAsset {
    pub field: VoxelField<f32>,
    pub canonical_box: Box3D,
    pub symmetric: bool,
}

impl ObjectAsset {
    pub fn new(field: VoxelField<f32>, size: Vec3, symmetric: bool) -> Result<Self> {
        let canonical_box = Box3D::new(Vec3::zeros(), size, 0.0)?.in_frame(Frame::Local);
        let local = canonical_box.local_aabb();
        if !field.bounds().expanded(1e-9).contains_box(&local) {
            return Err(Error::invalid("object field bounds must enclose the canonical box"));
        }
        Ok(Self {
            field,
            canonical_box,
            symmetric,
        })
    }

    pub fn size(&self) -> Vec3 {
        self.canonical_box.size
    }
}
