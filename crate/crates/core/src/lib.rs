//! Voxel radiance-field reconstruction of driving scenes, physically
//! constrained object placement, and joint rendering of augmented scenes.

pub mod composer;
pub mod decomposition;
pub mod error;
pub mod field;
pub mod geometry;
pub mod image;
pub mod render;
pub mod synth;
pub mod trainer;

pub use composer::{SceneGraph, ValidRegionMap};
pub use error::{Error, Result};
pub use field::asset::{load_asset, save_asset, Asset};
pub use field::{ColorMode, ObjectAsset, VoxelField};
pub use geometry::{
    box3d_iou, ray_aabb_intersect, transform_ray, Aabb, Box3D, CameraModel, Frame, Pose, Ray, RigidPlacement,
    TransformDirection, Vec3,
};
pub use render::{render, render_composed, RadianceField, RenderOptions, RenderResult, Rgb, Sampling, SceneView};
