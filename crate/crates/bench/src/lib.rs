//! Fixtures shared by the benchmarks.

use voxaug::composer::{occlusion_filter, pillar_stats, PillarConfig};
use voxaug::decomposition::{background_rays, DecompositionConfig};
use voxaug::geometry::Vec2;
use voxaug::synth::{bake, generate_dataset, GridConfig, StreetScene, WallScene};
use voxaug::trainer::TrainingBatch;
use voxaug::{CameraModel, Pose, ValidRegionMap, Vec3, VoxelField};

/// The street scene baked at `voxel` meters.
pub fn street_field(voxel: f64) -> VoxelField<f32> {
    let s = StreetScene::new().expect("static scene");
    let scene = s.full_scene().expect("static scene");
    bake(
        &scene,
        &GridConfig {
            bounds: scene.bounds,
            voxel_size: voxel,
        },
    )
    .expect("bake")
    .0
}

/// Training rays from a few small street views.
pub fn street_rays(views: usize, size: u32) -> TrainingBatch {
    let s = StreetScene::new().expect("static scene");
    let data = generate_dataset(&s.dataset(s.cameras(views, 0.0, size).expect("cameras"))).expect("dataset");
    background_rays(&data.manifest, &DecompositionConfig::default()).expect("rays").batch
}

pub fn street_camera(size: u32) -> CameraModel {
    let pose = Pose::look_at(Vec3::new(-5.0, -4.0, 1.6), Vec3::new(1.5, -1.0, 0.5), Vec3::z()).expect("pose");
    CameraModel::with_fov(size, size, 70f64.to_radians(), pose).expect("camera")
}

/// The wall scene's valid-region map seen from the origin.
pub fn wall_map() -> (VoxelField<f32>, ValidRegionMap) {
    let w = WallScene::new().expect("static scene");
    let field = bake(
        &w.scene,
        &GridConfig {
            bounds: w.scene.bounds,
            voxel_size: 0.25,
        },
    )
    .expect("bake")
    .0;
    let map = pillar_stats(&field, &PillarConfig::default()).expect("pillars");
    let map = occlusion_filter(map, Vec2::zeros()).expect("ego inside");
    (field, map)
}
