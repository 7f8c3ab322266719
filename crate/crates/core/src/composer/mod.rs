//! Augmented scene construction: valid placement regions, jittered
//! placements, collision rejection and scene graphs.

pub mod placement;
pub mod region;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use placement::{heading_entropy, sample_placement, JitterConfig};
pub use region::{
    classify_valid, estimate_ground, occlusion_filter, pillar_stats, pillar_stats_at, CellState, PillarConfig,
    ValidRegionMap,
};

use crate::error::{Error, Result};
use crate::field::{ObjectAsset, VoxelField};
use crate::geometry::{box3d_iou, Box3D, CameraModel, RigidPlacement, Vec3};
use crate::render::{render_composed, render_image, PlacedField, RenderOptions, RenderedImage, SceneView};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxSource {
    Original,
    Placed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    #[serde(flatten)]
    pub bbox: Box3D,
    pub source: BoxSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub asset: String,
    pub placement: RigidPlacement,
}

/// One augmented scene: a background, the objects placed into it, the
/// cameras to render and every box in the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub background: String,
    pub placements: Vec<PlacedObject>,
    pub cameras: Vec<CameraModel>,
    pub boxes: Vec<AnnotatedBox>,
    pub index: usize,
    pub jitter: JitterConfig,
}

impl SceneGraph {
    pub fn new(background: impl Into<String>, originals: &[Box3D], cameras: Vec<CameraModel>, jitter: JitterConfig) -> Self {
        Self {
            background: background.into(),
            placements: Vec::new(),
            cameras,
            boxes: originals
                .iter()
                .map(|b| AnnotatedBox {
                    bbox: *b,
                    source: BoxSource::Original,
                    asset: None,
                })
                .collect(),
            index: 0,
            jitter,
        }
    }

    pub fn annotation(&self, camera: usize) -> Result<ImageAnnotation> {
        let cam = self
            .cameras
            .get(camera)
            .ok_or_else(|| Error::invalid(format!("scene graph has no camera {camera}")))?;
        Ok(ImageAnnotation {
            scene: self.index,
            camera: *cam,
            boxes: self.boxes.clone(),
            jitter: self.jitter,
        })
    }
}

/// Annotation of one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub scene: usize,
    pub camera: CameraModel,
    pub boxes: Vec<AnnotatedBox>,
    pub jitter: JitterConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    InvalidRegion,
    Collision,
    OutOfBounds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaceOutcome {
    Accepted,
    Rejected(RejectReason),
}

/// Adds the placed box to `scene` if it lies inside the background bounds,
/// overlaps no existing box, and its center cell is valid.
pub fn try_place(scene: &mut SceneGraph, asset: &str, placement: RigidPlacement, map: &ValidRegionMap) -> PlaceOutcome {
    let b = placement.target;
    let bounds = map.bounds.expanded(1e-9);
    if !b.corners().iter().all(|c| bounds.contains(c)) {
        return PlaceOutcome::Rejected(RejectReason::OutOfBounds);
    }
    if scene.boxes.iter().any(|o| box3d_iou(&o.bbox, &b) > 0.0) {
        return PlaceOutcome::Rejected(RejectReason::Collision);
    }
    if map.state_at(b.center.x, b.center.y) != Some(CellState::Valid) {
        return PlaceOutcome::Rejected(RejectReason::InvalidRegion);
    }
    scene.boxes.push(AnnotatedBox {
        bbox: b,
        source: BoxSource::Placed,
        asset: Some(asset.to_owned()),
    });
    scene.placements.push(PlacedObject {
        asset: asset.to_owned(),
        placement,
    });
    PlaceOutcome::Accepted
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetEntry {
    pub id: String,
    pub size: Vec3,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseSampling {
    /// Start from the poses of the scene's annotated boxes.
    #[default]
    Annotations,
    /// Start anywhere in a valid cell with any heading.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposeConfig {
    pub count: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub attempts: usize,
    pub base: BaseSampling,
    pub jitter: JitterConfig,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            count: 12,
            min_objects: 1,
            max_objects: 2,
            attempts: 50,
            base: BaseSampling::Annotations,
            jitter: JitterConfig::default(),
        }
    }
}

/// Inputs shared by every scene of a batch.
#[derive(Clone, Copy, Debug)]
pub struct ComposeInputs<'a> {
    pub background: &'a str,
    pub map: &'a ValidRegionMap,
    pub pool: &'a [AssetEntry],
    pub originals: &'a [Box3D],
    pub cameras: &'a [CameraModel],
}

/// Generates `config.count` scene graphs. Scene `i` draws from its own
/// stream of the seeded generator, so the batch does not depend on the
/// order scenes are built in. Each object gets up to `attempts` tries.
pub fn generate_batch(inputs: &ComposeInputs<'_>, config: &ComposeConfig) -> Result<Vec<SceneGraph>> {
    config.jitter.validate()?;
    if inputs.pool.is_empty() {
        return Err(Error::invalid("asset pool is empty"));
    }
    if config.min_objects > config.max_objects {
        return Err(Error::invalid("min_objects exceeds max_objects"));
    }
    let valid = inputs.map.valid_cells();
    if valid.is_empty() {
        log::warn!("no valid placement cell; generating nothing");
        return Ok(Vec::new());
    }
    (0..config.count).map(|index| Ok(generate_scene(inputs, config, &valid, index))).collect()
}

fn generate_scene(inputs: &ComposeInputs<'_>, config: &ComposeConfig, valid: &[(usize, usize)], index: usize) -> SceneGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(config.jitter.seed);
    rng.set_stream(index as u64);
    let mut scene = SceneGraph::new(inputs.background, inputs.originals, inputs.cameras.to_vec(), config.jitter);
    scene.index = index;
    let map = inputs.map;
    let wanted = rng.gen_range(config.min_objects..=config.max_objects);
    for _ in 0..wanted {
        let asset = &inputs.pool[rng.gen_range(0..inputs.pool.len())];
        let placed = (0..config.attempts).any(|_| {
            let Some(base) = base_box(inputs, config.base, valid, asset.size, &mut rng) else {
                return false;
            };
            let mut placement = sample_placement(&base, &config.jitter, &mut rng);
            let z = map.ground_at(placement.translation.x, placement.translation.y) + 0.5 * asset.size.z;
            placement.translation.z = z;
            placement.target.center.z = z;
            try_place(&mut scene, &asset.id, placement, map) == PlaceOutcome::Accepted
        });
        if !placed {
            log::warn!("scene {index}: gave up placing {} after {} attempts", asset.id, config.attempts);
        }
    }
    scene
}

fn base_box(inputs: &ComposeInputs<'_>, mode: BaseSampling, valid: &[(usize, usize)], size: Vec3, rng: &mut ChaCha8Rng) -> Option<Box3D> {
    match mode {
        BaseSampling::Annotations if !inputs.originals.is_empty() => {
            let o = &inputs.originals[rng.gen_range(0..inputs.originals.len())];
            Box3D::new(o.center, size, o.yaw).ok()
        }
        _ => {
            let (i, j) = valid[rng.gen_range(0..valid.len())];
            let lo = inputs.map.cell_min(i, j);
            let [cx, cy] = inputs.map.cell_size;
            let x = lo.x + cx * rng.gen::<f64>();
            let y = lo.y + cy * rng.gen::<f64>();
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            Box3D::new(Vec3::new(x, y, 0.0), size, yaw).ok()
        }
    }
}

/// Borrowed renderable view of a scene graph.
pub fn scene_view<'a>(
    graph: &SceneGraph,
    background: &'a VoxelField<f32>,
    assets: &'a BTreeMap<String, ObjectAsset>,
) -> Result<SceneView<'a>> {
    let objects = graph
        .placements
        .iter()
        .map(|p| {
            let asset = assets
                .get(&p.asset)
                .ok_or_else(|| Error::invalid(format!("scene graph references unknown asset {}", p.asset)))?;
            Ok(PlacedField {
                field: &asset.field,
                placement: p.placement,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SceneView { background, objects })
}

pub fn render_scene(view: &SceneView<'_>, camera: &CameraModel, opts: &RenderOptions) -> Result<RenderedImage> {
    render_image(camera, |ray| render_composed(view, ray, opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb, Pose};

    fn open_map(n: usize) -> ValidRegionMap {
        let h = n as f64;
        ValidRegionMap {
            bounds: Aabb::new(Vec3::new(-h, -h, -1.0), Vec3::new(h, h, 4.0)).unwrap(),
            cell_size: [2.0, 2.0],
            dims: [n, n],
            max_density: vec![0.0; n * n],
            mean_density: vec![0.0; n * n],
            state: vec![CellState::Valid; n * n],
            ground: 0.0,
            cell_ground: vec![0.0; n * n],
            delta1: 30.0,
            delta2: 15.0,
        }
    }

    fn pool() -> Vec<AssetEntry> {
        (0..5)
            .map(|i| AssetEntry {
                id: format!("car{i}"),
                size: Vec3::new(3.5 + 0.2 * i as f64, 1.8, 1.5),
            })
            .collect()
    }

    fn camera() -> CameraModel {
        CameraModel::with_fov(8, 8, 1.0, Pose::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::new(5.0, 0.0, 0.0), Vec3::z()).unwrap()).unwrap()
    }

    fn place_at(x: f64, y: f64, yaw: f64) -> RigidPlacement {
        RigidPlacement::from_box(Box3D::new(Vec3::new(x, y, 0.75), Vec3::new(4.0, 1.8, 1.5), yaw).unwrap())
    }

    fn check_scene(scene: &SceneGraph, map: &ValidRegionMap) {
        for (a, x) in scene.boxes.iter().enumerate() {
            for y in &scene.boxes[a + 1..] {
                assert_eq!(box3d_iou(&x.bbox, &y.bbox), 0.0);
            }
        }
        for p in &scene.placements {
            let c = p.placement.target.center;
            assert_eq!(map.state_at(c.x, c.y), Some(CellState::Valid));
            assert!(p.placement.target.corners().iter().all(|q| map.bounds.expanded(1e-9).contains(q)));
        }
    }

    #[test]
    fn try_place_examples() {
        let mut map = open_map(10);
        let mut scene = SceneGraph::new("bg", &[], vec![], JitterConfig::none(0));
        assert_eq!(try_place(&mut scene, "a", place_at(1.0, 1.0, 0.3), &map), PlaceOutcome::Accepted);
        assert_eq!(scene.boxes.len(), 1);
        assert_eq!(
            try_place(&mut scene, "a", place_at(1.0, 1.0, 0.3), &map),
            PlaceOutcome::Rejected(RejectReason::Collision)
        );
        let c = map.index(8, 8);
        map.state[c] = CellState::Invalid;
        assert_eq!(
            try_place(&mut scene, "a", place_at(7.0, 7.0, 0.0), &map),
            PlaceOutcome::Rejected(RejectReason::InvalidRegion)
        );
        assert_eq!(
            try_place(&mut scene, "a", place_at(9.5, 0.0, 0.0), &map),
            PlaceOutcome::Rejected(RejectReason::OutOfBounds)
        );
        assert_eq!(scene.placements.len(), 1);
    }

    #[test]
    fn touching_boxes_do_not_collide() {
        let map = open_map(10);
        let mut scene = SceneGraph::new("bg", &[], vec![], JitterConfig::none(0));
        assert_eq!(try_place(&mut scene, "a", place_at(0.0, 0.0, 0.0), &map), PlaceOutcome::Accepted);
        assert_eq!(try_place(&mut scene, "a", place_at(4.0, 0.0, 0.0), &map), PlaceOutcome::Accepted);
        assert_eq!(
            try_place(&mut scene, "a", place_at(3.99, 0.0, 0.0), &map),
            PlaceOutcome::Rejected(RejectReason::Collision)
        );
    }

    #[test]
    fn batch_examples() {
        let map = open_map(20);
        let pool = pool();
        let cams = [camera()];
        let inputs = ComposeInputs {
            background: "bg",
            map: &map,
            pool: &pool,
            originals: &[],
            cameras: &cams,
        };
        let cfg = ComposeConfig {
            base: BaseSampling::Uniform,
            ..ComposeConfig::default()
        };
        assert!(generate_batch(&inputs, &ComposeConfig { count: 0, ..cfg }).unwrap().is_empty());
        let scenes = generate_batch(&inputs, &cfg).unwrap();
        assert_eq!(scenes.len(), 12);
        for (i, s) in scenes.iter().enumerate() {
            assert_eq!(s.index, i);
            assert!((1..=2).contains(&s.placements.len()));
            check_scene(s, &map);
            for p in &s.placements {
                assert!((p.placement.translation.z - 0.75).abs() < 1e-12);
            }
        }
        assert_eq!(scenes, generate_batch(&inputs, &cfg).unwrap());
        let other = generate_batch(&inputs, &ComposeConfig { jitter: JitterConfig { seed: 1, ..cfg.jitter }, ..cfg }).unwrap();
        assert_ne!(scenes, other);
    }

    #[test]
    fn single_valid_cell_takes_every_placement() {
        let mut map = open_map(20);
        map.state.iter_mut().for_each(|s| *s = CellState::Invalid);
        let c = map.index(12, 7);
        map.state[c] = CellState::Valid;
        let pool = pool();
        let inputs = ComposeInputs {
            background: "bg",
            map: &map,
            pool: &pool,
            originals: &[],
            cameras: &[],
        };
        let cfg = ComposeConfig {
            base: BaseSampling::Uniform,
            jitter: JitterConfig::none(5),
            ..ComposeConfig::default()
        };
        let scenes = generate_batch(&inputs, &cfg).unwrap();
        assert!(scenes.iter().map(|s| s.placements.len()).sum::<usize>() >= 12);
        for s in &scenes {
            for p in &s.placements {
                assert_eq!(map.cell_of(p.placement.translation.x, p.placement.translation.y), Some((12, 7)));
            }
        }
    }

    #[test]
    fn no_valid_cell_gives_empty_batch() {
        let mut map = open_map(4);
        map.state.iter_mut().for_each(|s| *s = CellState::Occluded);
        let pool = pool();
        let inputs = ComposeInputs {
            background: "bg",
            map: &map,
            pool: &pool,
            originals: &[],
            cameras: &[],
        };
        assert!(generate_batch(&inputs, &ComposeConfig::default()).unwrap().is_empty());
        let none = ComposeInputs { pool: &[], ..inputs };
        assert!(generate_batch(&none, &ComposeConfig::default()).is_err());
    }

    #[test]
    fn annotation_bases_follow_original_boxes() {
        let map = open_map(30);
        let pool = pool();
        let originals = [
            Box3D::new(Vec3::new(10.0, 3.0, 0.75), Vec3::new(4.0, 1.8, 1.5), 0.4).unwrap(),
            Box3D::new(Vec3::new(-12.0, -6.0, 0.75), Vec3::new(4.0, 1.8, 1.5), -1.2).unwrap(),
        ];
        let inputs = ComposeInputs {
            background: "bg",
            map: &map,
            pool: &pool,
            originals: &originals,
            cameras: &[],
        };
        let cfg = ComposeConfig {
            count: 40,
            ..ComposeConfig::default()
        };
        let scenes = generate_batch(&inputs, &cfg).unwrap();
        for s in &scenes {
            check_scene(s, &map);
            assert_eq!(s.boxes.iter().filter(|b| b.source == BoxSource::Original).count(), 2);
            for p in &s.placements {
                let t = p.placement.translation;
                let near = originals.iter().any(|o| {
                    (t.x - o.center.x).abs() <= 20.0
                        && (t.y - o.center.y).abs() <= 5.0
                        && crate::geometry::wrap_angle(p.placement.yaw - o.yaw).abs() <= cfg.jitter.t_theta + 1e-12
                });
                assert!(near);
            }
        }
        // Zero jitter from annotations always collides with the original.
        let still = generate_batch(&inputs, &ComposeConfig { jitter: JitterConfig::none(0), ..cfg }).unwrap();
        assert!(still.iter().all(|s| s.placements.is_empty()));
    }

    #[test]
    fn scene_graph_json_roundtrip() {
        let map = open_map(10);
        let mut scene = SceneGraph::new("bg", &[Box3D::new(Vec3::new(5.0, 5.0, 0.75), Vec3::repeat(1.0), 0.2).unwrap()], vec![camera()], JitterConfig::default());
        try_place(&mut scene, "car0", place_at(-3.0, 2.0, 1.1), &map);
        let text = serde_json::to_string_pretty(&scene).unwrap();
        let back: SceneGraph = serde_json::from_str(&text).unwrap();
        assert_eq!(back, scene);
        let ann = scene.annotation(0).unwrap();
        let v: serde_json::Value = serde_json::to_value(&ann).unwrap();
        assert_eq!(v["boxes"][0]["source"], "original");
        assert_eq!(v["boxes"][1]["source"], "placed");
        assert_eq!(v["boxes"][1]["asset"], "car0");
        assert!(scene.annotation(1).is_err());
    }

    #[test]
    fn heading_jitter_spreads_a_point_mass() {
        let base = Box3D::new(Vec3::zeros(), Vec3::repeat(1.0), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bin = 5f64.to_radians();
        let before = heading_entropy(&vec![base.yaw; 1000], bin);
        let jitter = JitterConfig::default();
        let after: Vec<f64> = (0..1000).map(|_| sample_placement(&base, &jitter, &mut rng).yaw).collect();
        assert!(heading_entropy(&after, bin) > before);
    }
}
