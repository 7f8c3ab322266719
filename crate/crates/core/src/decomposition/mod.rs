//! Splitting a driving sequence into a static background training set and
//! per-object training sets.

pub mod manifest;
pub mod mask;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_ray, Aabb, Box3D, CameraModel, RigidPlacement, TransformDirection, Vec2, Vec3};
use crate::trainer::TrainingBatch;
pub use manifest::{FrameData, InstanceMask, Intrinsics, SceneManifest, TrackedBox};
pub use mask::{convex_hull, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionConfig {
    /// Minimum mask/box IoU for a match.
    pub match_iou: f64,
    /// Minimum mask IoU linking unlabeled observations in consecutive frames.
    pub track_iou: f64,
    /// Minimum fraction of the projected box hull covered by the mask.
    pub fill_ratio: f64,
    /// Center displacement (m) above which a track counts as moving.
    pub moving_threshold: f64,
    /// Dilation (px) of moving masks excluded from background training.
    pub exclusion_dilation: u32,
    /// Width (px) of the background band around object masks.
    pub band_width: u32,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            match_iou: 0.3,
            track_iou: 0.5,
            fill_ratio: 0.6,
            moving_threshold: 0.5,
            exclusion_dilation: 2,
            band_width: 8,
        }
    }
}

/// Silhouette of a box as the convex hull of its projected corners, or
/// `None` when a corner is behind the camera.
pub fn project_box_hull(bbox: &Box3D, camera: &CameraModel) -> Option<Vec<Vec2>> {
    let pts: Option<Vec<Vec2>> = bbox.corners().iter().map(|c| camera.project(c)).collect();
    Some(convex_hull(&pts?))
}

pub fn box_silhouette(bbox: &Box3D, camera: &CameraModel) -> Option<Mask> {
    let hull = project_box_hull(bbox, camera)?;
    Some(Mask::from_convex_polygon(camera.width, camera.height, &hull))
}

/// Greedy best-first assignment on an IoU matrix `iou[mask][box]`: pairs
/// below `floor` are never taken; each row and column is used at most once.
pub fn greedy_assign(iou: &[Vec<f64>], floor: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(usize, usize, f64)> = iou
        .iter()
        .enumerate()
        .flat_map(|(m, row)| row.iter().enumerate().map(move |(b, &v)| (m, b, v)))
        .filter(|p| p.2 >= floor)
        .collect();
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_m = vec![false; iou.len()];
    let mut used_b = vec![false; iou.iter().map(Vec::len).max().unwrap_or(0)];
    let mut out = Vec::new();
    for (m, b, v) in pairs {
        if !used_m[m] && !used_b[b] {
            used_m[m] = true;
            used_b[b] = true;
            out.push((m, b, v));
        }
    }
    out.sort_by_key(|p| p.0);
    out
}

/// Matches instance masks to annotated boxes. Returns `(mask index, box
/// index, IoU)` triples.
pub fn match_mask_to_box(
    masks: &[InstanceMask],
    boxes: &[TrackedBox],
    camera: &CameraModel,
    floor: f64,
) -> Vec<(usize, usize, f64)> {
    let silhouettes: Vec<Option<Mask>> = boxes.iter().map(|b| box_silhouette(&b.bbox, camera)).collect();
    let iou: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| {
            silhouettes
                .iter()
                .map(|s| s.as_ref().map_or(0.0, |s| m.mask.iou(s)))
                .collect()
        })
        .collect();
    greedy_assign(&iou, floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub frame: usize,
    pub mask_index: usize,
    pub box_index: usize,
    pub mask: Mask,
    pub bbox: Box3D,
    pub camera: CameraModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTrack {
    /// Unique within one `build_tracks` result.
    pub id: usize,
    /// Annotated box track id, when the boxes carry one.
    pub source_id: Option<u64>,
    pub observations: Vec<Observation>,
    pub intact: bool,
}

impl ObjectTrack {
    /// Largest distance of any box center from the first one.
    pub fn displacement(&self) -> f64 {
        let first = self.observations[0].bbox.center;
        self.observations
            .iter()
            .map(|o| (o.bbox.center - first).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_moving(&self, config: &DecompositionConfig) -> bool {
        self.displacement() > config.moving_threshold
    }
}

/// Links matched mask/box pairs of consecutive frames into tracks. Frames
/// without a pose contribute no observations.
pub fn build_tracks(manifest: &SceneManifest, config: &DecompositionConfig) -> Vec<ObjectTrack> {
    use rayon::prelude::*;
    let per_frame: Vec<Vec<Observation>> = manifest
        .frames
        .par_iter()
        .enumerate()
        .map(|(f, fr)| {
            let Ok(camera) = fr.camera(f) else {
                log::warn!("frame {f} has no pose; skipping its masks");
                return Vec::new();
            };
            match_mask_to_box(&fr.masks, &fr.boxes, &camera, config.match_iou)
                .into_iter()
                .map(|(m, b, _)| Observation {
                    frame: f,
                    mask_index: m,
                    box_index: b,
                    mask: fr.masks[m].mask.clone(),
                    bbox: fr.boxes[b].bbox,
                    camera,
                })
                .collect()
        })
        .collect();

    let mut tracks: Vec<ObjectTrack> = Vec::new();
    // Tracks whose last observation is in the previous frame.
    let mut open: Vec<usize> = Vec::new();
    for (f, obs) in per_frame.into_iter().enumerate() {
        let fr = &manifest.frames[f];
        let mut extended = vec![false; open.len()];
        let mut next_open = Vec::new();
        let mut unlinked = Vec::new();
        for o in obs {
            let id = fr.boxes[o.box_index].track_id;
            let hit = id.and_then(|id| {
                open.iter()
                    .enumerate()
                    .find(|(k, &t)| !extended[*k] && tracks[t].source_id == Some(id))
                    .map(|(k, _)| k)
            });
            match (hit, id) {
                (Some(k), _) => {
                    extended[k] = true;
                    tracks[open[k]].observations.push(o);
                    next_open.push(open[k]);
                }
                (None, Some(_)) => unlinked.push((o, id)),
                (None, None) => unlinked.push((o, None)),
            }
        }
        // Unlabeled observations link to unlabeled open tracks by mask overlap.
        let candidates: Vec<usize> = (0..open.len())
            .filter(|&k| !extended[k] && tracks[open[k]].source_id.is_none())
            .collect();
        let iou: Vec<Vec<f64>> = unlinked
            .iter()
            .map(|(o, id)| {
                candidates
                    .iter()
                    .map(|&k| match id {
                        Some(_) => 0.0,
                        None => o.mask.iou(&tracks[open[k]].observations.last().unwrap().mask),
                    })
                    .collect()
            })
            .collect();
        let links = greedy_assign(&iou, config.track_iou);
        let mut linked = vec![None; unlinked.len()];
        for (u, c, _) in links {
            linked[u] = Some(candidates[c]);
        }
        for ((o, id), link) in unlinked.into_iter().zip(linked) {
            match link {
                Some(k) => {
                    tracks[open[k]].observations.push(o);
                    next_open.push(open[k]);
                }
                None => {
                    tracks.push(ObjectTrack {
                        id: tracks.len(),
                        source_id: id,
                        observations: vec![o],
                        intact: false,
                    });
                    next_open.push(tracks.len() - 1);
                }
            }
        }
        next_open.sort_unstable();
        open = next_open;
    }
    for t in &mut tracks {
        t.intact = select_intact(t, manifest, config);
    }
    tracks
}

/// A track is intact when every observed mask stays off the image border,
/// overlaps no other instance, and fills enough of its projected box hull.
pub fn select_intact(track: &ObjectTrack, manifest: &SceneManifest, config: &DecompositionConfig) -> bool {
    track.observations.iter().all(|o| {
        if o.mask.is_empty() || o.mask.touches_border() {
            return false;
        }
        let frame = &manifest.frames[o.frame];
        let overlaps = frame
            .masks
            .iter()
            .enumerate()
            .any(|(i, m)| i != o.mask_index && m.mask.intersection_count(&o.mask) > 0);
        if overlaps {
            return false;
        }
        match box_silhouette(&o.bbox, &o.camera) {
            Some(hull) if hull.count() > 0 => {
                o.mask.intersection_count(&hull) as f64 / hull.count() as f64 >= config.fill_ratio
            }
            _ => false,
        }
    })
}

/// Background training rays and the per-frame excluded pixel sets.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundRays {
    pub batch: TrainingBatch,
    pub excluded: Vec<Mask>,
}

/// Every pixel of every frame as a world ray, minus pixels covered by
/// (dilated) masks of moving tracks.
pub fn background_rays(manifest: &SceneManifest, config: &DecompositionConfig) -> Result<BackgroundRays> {
    let cameras: Vec<CameraModel> = manifest
        .frames
        .iter()
        .enumerate()
        .map(|(f, fr)| fr.camera(f))
        .collect::<Result<_>>()?;
    let tracks = build_tracks(manifest, config);
    let mut excluded: Vec<Mask> = manifest
        .frames
        .iter()
        .map(|fr| Mask::new(fr.intrinsics.width, fr.intrinsics.height))
        .collect();
    for t in tracks.iter().filter(|t| t.is_moving(config)) {
        for o in &t.observations {
            excluded[o.frame].union_with(&o.mask.dilate(config.exclusion_dilation));
        }
    }
    let mut batch = TrainingBatch::default();
    for (f, fr) in manifest.frames.iter().enumerate() {
        let cam = &cameras[f];
        for py in 0..cam.height {
            for px in 0..cam.width {
                if excluded[f].get(px, py) {
                    continue;
                }
                let i = (py * cam.width + px) as usize;
                let depth = fr.depth.as_ref().and_then(|d| d.meters(i));
                batch.push(cam.pixel_ray(px, py), fr.image.pixel(i), depth, None);
            }
        }
    }
    Ok(BackgroundRays { batch, excluded })
}

/// Rays of one track in the object-local frame: mask pixels are foreground
/// with their image color and depth, pixels of the surrounding band are
/// background rays that only supervise the object probability.
pub fn object_rays(track: &ObjectTrack, manifest: &SceneManifest, config: &DecompositionConfig) -> TrainingBatch {
    let mut batch = TrainingBatch::with_labels();
    for o in &track.observations {
        if o.mask.is_empty() {
            continue;
        }
        let frame = &manifest.frames[o.frame];
        let mut others = Mask::new(o.mask.width, o.mask.height);
        for (i, m) in frame.masks.iter().enumerate() {
            if i != o.mask_index {
                others.union_with(&m.mask);
            }
        }
        let crop = o.mask.dilate(config.band_width);
        let placement = RigidPlacement::from_box(o.bbox);
        let cam = &o.camera;
        for py in 0..cam.height {
            for px in 0..cam.width {
                if !crop.get(px, py) {
                    continue;
                }
                let fg = o.mask.get(px, py);
                if !fg && others.get(px, py) {
                    continue;
                }
                let i = (py * cam.width + px) as usize;
                let ray = transform_ray(&cam.pixel_ray(px, py), &placement, TransformDirection::WorldToLocal);
                if fg {
                    let depth = frame.depth.as_ref().and_then(|d| d.meters(i));
                    batch.push(ray, frame.image.pixel(i), depth, Some(true));
                } else {
                    batch.push(ray, [0.0; 3], None, Some(false));
                }
            }
        }
    }
    batch
}

/// Box around every camera center and every depth-measured surface point,
/// grown by `margin` on each side.
pub fn manifest_bounds(manifest: &SceneManifest, margin: f64) -> Result<Aabb> {
    if manifest.frames.is_empty() {
        return Err(Error::Manifest("manifest has no frames".into()));
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    let mut grow = |p: Vec3| {
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    };
    for f in 0..manifest.frames.len() {
        let cam = manifest.frames[f].camera(f)?;
        grow(cam.center());
        let Some(depth) = &manifest.frames[f].depth else {
            continue;
        };
        for py in 0..cam.height {
            for px in 0..cam.width {
                if let Some(d) = depth.meters((py * cam.width + px) as usize) {
                    grow(cam.pixel_ray(px, py).at(d));
                }
            }
        }
    }
    Aabb::new(lo, hi).map(|b| b.expanded(margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Frame, Pose, Vec3};
    use crate::image::RgbImage;
    use proptest::prelude::*;

    fn camera() -> CameraModel {
        let pose = Pose::look_at(Vec3::new(0.0, 0.0, 1.0), Vec3::new(10.0, 0.0, 1.0), Vec3::z()).unwrap();
        CameraModel::with_fov(64, 48, 1.2, pose).unwrap()
    }

    fn frame_with(boxes: Vec<TrackedBox>, masks: Vec<Mask>) -> FrameData {
        let cam = camera();
        FrameData {
            image: RgbImage::new(cam.width, cam.height),
            depth: None,
            intrinsics: Intrinsics::from(&cam),
            pose: Some(cam.pose),
            boxes,
            masks: masks
                .into_iter()
                .enumerate()
                .map(|(i, mask)| InstanceMask {
                    instance_id: i as u32 + 1,
                    mask,
                })
                .collect(),
            timestamp: 0.0,
        }
    }

    fn car_at(x: f64, y: f64, id: Option<u64>) -> TrackedBox {
        TrackedBox {
            track_id: id,
            bbox: Box3D::new(Vec3::new(x, y, 0.8), Vec3::new(4.0, 1.8, 1.6), 0.0).unwrap(),
        }
    }

    fn silhouette(b: &TrackedBox) -> Mask {
        box_silhouette(&b.bbox, &camera()).unwrap()
    }

    #[test]
    fn exact_hull_matches_with_iou_one() {
        let b = car_at(12.0, 0.0, Some(1));
        let m = frame_with(vec![b], vec![silhouette(&b)]);
        let pairs = match_mask_to_box(&m.masks, &m.boxes, &camera(), 0.3);
        assert_eq!(pairs, vec![(0, 0, 1.0)]);
    }

    #[test]
    fn disjoint_mask_is_unmatched() {
        let b = car_at(12.0, 0.0, Some(1));
        let mut mask = Mask::new(64, 48);
        mask.set(1, 1, true);
        let m = frame_with(vec![b], vec![mask]);
        assert!(match_mask_to_box(&m.masks, &m.boxes, &camera(), 0.3).is_empty());
    }

    fn brute_force(iou: &[Vec<f64>], floor: f64) -> f64 {
        fn go(iou: &[Vec<f64>], floor: f64, m: usize, used: &mut Vec<bool>) -> f64 {
            if m == iou.len() {
                return 0.0;
            }
            let mut best = go(iou, floor, m + 1, used);
            for b in 0..used.len() {
                if !used[b] && iou[m][b] >= floor {
                    used[b] = true;
                    best = best.max(iou[m][b] + go(iou, floor, m + 1, used));
                    used[b] = false;
                }
            }
            best
        }
        go(iou, floor, 0, &mut vec![false; iou[0].len()])
    }

    #[test]
    fn greedy_matches_exhaustive_optimum() {
        let iou = vec![vec![0.9, 0.2], vec![0.3, 0.8]];
        let a = greedy_assign(&iou, 0.3);
        assert_eq!(a.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        let total: f64 = a.iter().map(|p| p.2).sum();
        assert!((total - brute_force(&iou, 0.3)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn assignment_is_injective_and_above_floor(vals in prop::collection::vec(0.0f64..1.0, 12)) {
            let iou: Vec<Vec<f64>> = vals.chunks(4).map(|c| c.to_vec()).collect();
            let a = greedy_assign(&iou, 0.3);
            let mut ms: Vec<_> = a.iter().map(|p| p.0).collect();
            let mut bs: Vec<_> = a.iter().map(|p| p.1).collect();
            ms.dedup();
            bs.sort_unstable();
            bs.dedup();
            prop_assert_eq!(ms.len(), a.len());
            prop_assert_eq!(bs.len(), a.len());
            prop_assert!(a.iter().all(|p| p.2 >= 0.3));
        }
    }

    fn sequence(positions: &[Option<f64>], labeled: bool) -> SceneManifest {
        SceneManifest {
            name: "seq".into(),
            frames: positions
                .iter()
                .map(|p| match p {
                    Some(x) => {
                        let b = car_at(*x, 0.0, labeled.then_some(4));
                        frame_with(vec![b], vec![silhouette(&b)])
                    }
                    None => frame_with(vec![], vec![]),
                })
                .collect(),
        }
    }

    #[test]
    fn five_frames_one_track() {
        for labeled in [true, false] {
            let m = sequence(&[Some(12.0), Some(12.1), Some(12.2), Some(12.3), Some(12.4)], labeled);
            let tracks = build_tracks(&m, &DecompositionConfig::default());
            assert_eq!(tracks.len(), 1);
            assert_eq!(tracks[0].observations.len(), 5);
            assert!(tracks[0].intact);
        }
    }

    #[test]
    fn gap_splits_track() {
        let m = sequence(&[Some(12.0), Some(12.0), None, Some(12.0)], true);
        let tracks = build_tracks(&m, &DecompositionConfig::default());
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].source_id, tracks[1].source_id);
        assert_ne!(tracks[0].id, tracks[1].id);
    }

    #[test]
    fn crossing_objects_keep_their_ids() {
        let frames = (0..4)
            .map(|f| {
                let t = f as f64;
                let a = car_at(14.0, -3.0 + 2.0 * t, Some(1));
                let b = car_at(14.0, 3.0 - 2.0 * t, Some(2));
                frame_with(vec![a, b], vec![silhouette(&a), silhouette(&b)])
            })
            .collect();
        let m = SceneManifest {
            name: String::new(),
            frames,
        };
        let tracks = build_tracks(&m, &DecompositionConfig::default());
        for t in &tracks {
            let ids: Vec<_> = t.observations.iter().map(|o| m.frames[o.frame].boxes[o.box_index].track_id).collect();
            assert!(ids.iter().all(|i| *i == t.source_id));
        }
        let total: usize = tracks.iter().map(|t| t.observations.len()).sum();
        assert!(total <= 8);
    }

    #[test]
    fn intactness_rules() {
        let cfg = DecompositionConfig::default();
        let b = car_at(12.0, 0.0, Some(1));
        let ok = sequence(&[Some(12.0)], true);
        assert!(build_tracks(&ok, &cfg)[0].intact);

        // Shifted far left so the silhouette is clipped by the image edge.
        let edge = car_at(6.0, 4.0, Some(1));
        let m = frame_with(vec![edge], vec![silhouette(&edge)]);
        let m = SceneManifest {
            name: String::new(),
            frames: vec![m],
        };
        let t = build_tracks(&m, &cfg);
        assert!(t.iter().all(|t| !t.intact));

        let mut other = Mask::new(64, 48);
        let s = silhouette(&b);
        let (x, y) = (0..64 * 48).map(|i| (i % 64, i / 64)).find(|&(x, y)| s.get(x, y)).unwrap();
        other.set(x, y, true);
        let m = SceneManifest {
            name: String::new(),
            frames: vec![frame_with(vec![b], vec![s, other])],
        };
        assert!(!build_tracks(&m, &cfg)[0].intact);
    }

    #[test]
    fn background_rays_cover_unmasked_pixels() {
        let cfg = DecompositionConfig::default();
        let m = SceneManifest {
            name: String::new(),
            frames: vec![frame_with(vec![], vec![])],
        };
        let bg = background_rays(&m, &cfg).unwrap();
        assert_eq!(bg.batch.len(), 64 * 48);

        // A moving object that fills the whole frame removes every ray.
        let full = Mask::from_fn(64, 48, |_, _| true);
        let near = TrackedBox {
            track_id: Some(1),
            bbox: Box3D::new(Vec3::new(3.0, 0.0, 1.0), Vec3::new(2.0, 20.0, 20.0), 0.0).unwrap(),
        };
        let moved = TrackedBox {
            track_id: Some(1),
            bbox: Box3D::new(Vec3::new(4.0, 0.0, 1.0), Vec3::new(2.0, 20.0, 20.0), 0.0).unwrap(),
        };
        let m = SceneManifest {
            name: String::new(),
            frames: vec![frame_with(vec![near], vec![full.clone()]), frame_with(vec![moved], vec![full])],
        };
        let bg = background_rays(&m, &cfg).unwrap();
        assert_eq!(bg.batch.len(), 0);

        let mut no_pose = m.clone();
        no_pose.frames[1].pose = None;
        assert!(matches!(
            background_rays(&no_pose, &cfg),
            Err(crate::Error::MissingPose { frame: 1 })
        ));
    }

    #[test]
    fn object_rays_in_local_frame() {
        let b = car_at(12.0, 0.0, Some(1));
        let m = sequence(&[Some(12.0), Some(12.0)], true);
        let tracks = build_tracks(&m, &DecompositionConfig::default());
        let batch = object_rays(&tracks[0], &m, &DecompositionConfig::default());
        let labels = batch.mask_label.as_ref().unwrap();
        assert_eq!(labels.len(), batch.len());
        let fg = labels.iter().filter(|l| **l).count();
        assert_eq!(fg, 2 * silhouette(&b).count());
        let cam = camera();
        let r = &batch.rays[0];
        assert_eq!(r.frame, Frame::Local);
        // Identity rotation: local origin is the world origin minus the box center.
        assert!((r.origin - (cam.center() - b.bbox.center)).norm() < 1e-12);
        for (i, l) in labels.iter().enumerate() {
            if !l {
                assert_eq!(batch.target_color[i], [0.0; 3]);
                assert!(!batch.depth_valid[i]);
            }
        }
    }

    #[test]
    fn empty_observation_contributes_nothing() {
        let m = sequence(&[Some(12.0)], true);
        let mut t = build_tracks(&m, &DecompositionConfig::default()).remove(0);
        t.observations[0].mask = Mask::new(64, 48);
        assert!(object_rays(&t, &m, &DecompositionConfig::default()).is_empty());
    }

    #[test]
    fn bounds_cover_cameras_and_surfaces() {
        use crate::synth::{generate_dataset, StreetScene};
        let street = StreetScene::new().unwrap();
        let data = generate_dataset(&street.dataset(street.cameras(3, 0.0, 24).unwrap())).unwrap();
        let b = manifest_bounds(&data.manifest, 0.5).unwrap();
        for f in &data.manifest.frames {
            assert!(b.contains(f.pose.unwrap().translation()));
        }
        // Surfaces seen are inside the analytic scene, so the box is too.
        assert!(street.scene.bounds.expanded(0.5 + 1e-3).contains_box(&b));
        assert!(b.min.z < 0.0 && b.max.z > 1.6);
        let empty = SceneManifest { name: String::new(), frames: vec![] };
        assert!(matches!(manifest_bounds(&empty, 0.0), Err(Error::Manifest(_))));
    }
}
