use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::analytic::{AnalyticScene, SynthObject};
use super::oracle::oracle_render_detailed;
use crate::decomposition::{FrameData, InstanceMask, Intrinsics, Mask, SceneManifest, TrackedBox};
use crate::error::{Error, Result};
use crate::geometry::{Box3D, CameraModel, Pose, Vec3};
use crate::image::{DepthMap, RgbImage};
use crate::render::{RenderedImage, Rgb};

/// Opacity a pixel needs before its depth is written as valid.
pub const DEPTH_OPACITY: f64 = 0.5;
/// Accumulated weight an object needs for a pixel to join its silhouette.
pub const SILHOUETTE_WEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Dilate,
    Erode,
    /// Dilate or erode with equal probability.
    Both,
}

/// Per-frame random morphology applied to exact silhouettes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskNoise {
    /// Maximum radius (px); a corrupted mask draws a radius uniformly in `1..=amplitude`.
    pub amplitude: u32,
    pub mode: NoiseMode,
    /// Probability that a given mask in a given frame is corrupted.
    pub rate: f64,
    pub seed: u64,
}

impl Default for MaskNoise {
    fn default() -> Self {
        Self {
            amplitude: 0,
            mode: NoiseMode::Dilate,
            rate: 1.0,
            seed: 0,
        }
    }
}

impl MaskNoise {
    /// Corrupts the masks of frame `frame`, in order.
    pub fn apply(&self, frame: usize, masks: &[Mask]) -> Vec<Mask> {
        if self.amplitude == 0 {
            return masks.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(frame as u64);
        masks
            .iter()
            .map(|m| {
                let hit = rng.gen::<f64>() < self.rate;
                let r = rng.gen_range(1..=self.amplitude);
                let dilate = match self.mode {
                    NoiseMode::Dilate => true,
                    NoiseMode::Erode => false,
                    NoiseMode::Both => rng.gen_bool(0.5),
                };
                if !hit {
                    m.clone()
                } else if dilate {
                    m.dilate(r)
                } else {
                    m.erode(r)
                }
            })
            .collect()
    }
}

/// Where an object sits in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub track_id: u64,
    pub center: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthFrame {
    pub camera: CameraModel,
    #[serde(default)]
    pub objects: Vec<ObjectPose>,
    #[serde(default)]
    pub timestamp: f64,
}

fn default_step() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

/// Everything needed to synthesize a posed, annotated image sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(default)]
    pub name: String,
    /// Static part of the world.
    pub scene: AnalyticScene,
    #[serde(default)]
    pub objects: Vec<SynthObject>,
    pub frames: Vec<SynthFrame>,
    #[serde(default)]
    pub background: Rgb,
    /// Oracle quadrature step (only used by smooth primitives).
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub noise: MaskNoise,
    /// Whether boxes carry their track ids in the manifest.
    #[serde(default = "default_true")]
    pub label_tracks: bool,
}

impl DatasetSpec {
    pub fn object(&self, track_id: u64) -> Result<&SynthObject> {
        self.objects
            .iter()
            .find(|o| o.track_id == track_id)
            .ok_or_else(|| Error::invalid(format!("frame places unknown object {track_id}")))
    }

    pub fn frame_box(&self, pose: &ObjectPose) -> Result<Box3D> {
        self.object(pose.track_id)?.box_at(Vec3::from(pose.center), pose.yaw)
    }

    /// The full analytic world of frame `f`: static scene plus placed objects.
    pub fn frame_scene(&self, f: usize) -> Result<AnalyticScene> {
        let mut scene = self.scene.clone();
        for p in &self.frames[f].objects {
            let bbox = self.frame_box(p)?;
            scene.primitives.extend(self.object(p.track_id)?.placed(&bbox));
        }
        Ok(scene)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub manifest: SceneManifest,
    /// Full-precision oracle renders, one per frame.
    pub renders: Vec<RenderedImage>,
    /// Exact silhouettes as `(track id, mask)`, in the order of the frame's
    /// manifest masks.
    pub silhouettes: Vec<Vec<(u64, Mask)>>,
}

/// Renders a camera through the oracle, also returning per-object
/// silhouettes for the given track ids.
pub fn render_oracle_view(
    scene: &AnalyticScene,
    camera: &CameraModel,
    step: f64,
    background: Rgb,
    tracks: &[u64],
) -> Result<(RenderedImage, Vec<Mask>)> {
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<_>> = (0..h)
        .into_par_iter()
        .map(|py| {
            (0..w)
                .map(|px| oracle_render_detailed(scene, &camera.pixel_ray(px, py), step, background))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let n = camera.pixel_count();
    let mut img = RenderedImage {
        width: w,
        height: h,
        color: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        depth_valid: Vec::with_capacity(n),
        opacity: Vec::with_capacity(n),
    };
    let mut masks = vec![Mask::new(w, h); tracks.len()];
    for (py, row) in rows.into_iter().enumerate() {
        for (px, s) in row.into_iter().enumerate() {
            img.color.push(s.result.color);
            img.depth.push(s.result.depth);
            img.depth_valid.push(s.result.depth_valid);
            img.opacity.push(s.result.opacity);
            for (k, t) in tracks.iter().enumerate() {
                if s.weight_of(*t) >= SILHOUETTE_WEIGHT {
                    masks[k].set(px as u32, py as u32, true);
                }
            }
        }
    }
    Ok((img, masks))
}

/// Renders images, depth maps and silhouettes for every frame of `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<GeneratedDataset> {
    spec.scene.validate()?;
    let mut manifest = SceneManifest {
        name: spec.name.clone(),
        frames: Vec::with_capacity(spec.frames.len()),
    };
    let mut renders = Vec::with_capacity(spec.frames.len());
    let mut silhouettes = Vec::with_capacity(spec.frames.len());
    for (f, frame) in spec.frames.iter().enumerate() {
        let scene = spec.frame_scene(f)?;
        let cam = &frame.camera;
        let tracks: Vec<u64> = frame.objects.iter().map(|o| o.track_id).collect();
        let (img, masks) = render_oracle_view(&scene, cam, spec.step, spec.background, &tracks)?;
        let exact: Vec<(u64, Mask)> = tracks.into_iter().zip(masks).filter(|(_, m)| !m.is_empty()).collect();
        let noisy = spec.noise.apply(f, &exact.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>());
        let valid: Vec<bool> = img.opacity.iter().map(|&o| o >= DEPTH_OPACITY).collect();
        manifest.frames.push(FrameData {
            image: RgbImage::from_colors(img.width, img.height, &img.color),
            depth: Some(DepthMap::from_meters(img.width, img.height, &img.depth, &valid)),
            intrinsics: Intrinsics::from(cam),
            pose: Some(cam.pose),
            boxes: frame
                .objects
                .iter()
                .map(|p| {
                    Ok(TrackedBox {
                        track_id: spec.label_tracks.then_some(p.track_id),
                        bbox: spec.frame_box(p)?,
                    })
                })
                .collect::<Result<_>>()?,
            masks: noisy
                .into_iter()
                .enumerate()
                .map(|(i, mask)| InstanceMask {
                    instance_id: i as u32 + 1,
                    mask,
                })
                .collect(),
            timestamp: frame.timestamp,
        });
        renders.push(img);
        silhouettes.push(exact);
    }
    Ok(GeneratedDataset {
        manifest,
        renders,
        silhouettes,
    })
}

/// `n` cameras evenly spaced on a horizontal circle, all looking at `target`.
pub fn ring_cameras(
    target: Vec3,
    radius: f64,
    height: f64,
    n: usize,
    phase: f64,
    (width, h): (u32, u32),
    hfov: f64,
) -> Result<Vec<CameraModel>> {
    (0..n)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
            let eye = target + Vec3::new(radius * a.cos(), radius * a.sin(), height);
            CameraModel::with_fov(width, h, hfov, Pose::look_at(eye, target, Vec3::z())?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use crate::synth::analytic::CarStyle;

    fn spec(noise: MaskNoise) -> DatasetSpec {
        let scene = AnalyticScene::new(Aabb::new(Vec3::new(-8.0, -8.0, -1.0), Vec3::new(8.0, 8.0, 4.0)).unwrap(), vec![], 0.0)
            .unwrap();
        let cams = ring_cameras(Vec3::new(0.0, 0.0, 0.8), 9.0, 2.0, 3, 0.2, (48, 32), 0.9).unwrap();
        DatasetSpec {
            name: "car".into(),
            scene,
            objects: vec![SynthObject::car(5, &CarStyle::default())],
            frames: cams
                .into_iter()
                .map(|camera| SynthFrame {
                    camera,
                    objects: vec![ObjectPose {
                        track_id: 5,
                        center: [0.0, 0.0, 0.8],
                        yaw: 0.4,
                    }],
                    timestamp: 0.0,
                })
                .collect(),
            background: [0.5, 0.6, 0.7],
            step: 0.01,
            noise,
            label_tracks: true,
        }
    }

    #[test]
    fn zero_noise_keeps_exact_silhouettes() {
        let d = generate_dataset(&spec(MaskNoise::default())).unwrap();
        for (f, fr) in d.manifest.frames.iter().enumerate() {
            assert_eq!(fr.masks.len(), 1);
            assert_eq!(fr.masks[0].mask, d.silhouettes[f][0].1);
            assert!(fr.masks[0].mask.count() > 50);
        }
    }

    #[test]
    fn dilation_noise_stays_in_band() {
        let noise = MaskNoise {
            amplitude: 2,
            mode: NoiseMode::Dilate,
            rate: 1.0,
            seed: 3,
        };
        let d = generate_dataset(&spec(noise)).unwrap();
        for (f, fr) in d.manifest.frames.iter().enumerate() {
            let exact = &d.silhouettes[f][0].1;
            let band = exact.dilate(2);
            let diff = fr.masks[0].mask.xor(exact);
            assert_eq!(diff.intersection_count(&band), diff.count());
        }
    }

    #[test]
    fn depth_maps_quantize_oracle_depth() {
        let d = generate_dataset(&spec(MaskNoise::default())).unwrap();
        let (fr, r) = (&d.manifest.frames[0], &d.renders[0]);
        let depth = fr.depth.as_ref().unwrap();
        let mut checked = 0;
        for i in 0..r.depth.len() {
            match depth.meters(i) {
                Some(m) => {
                    assert!((m - r.depth[i]).abs() <= 5e-4 + 1e-12);
                    checked += 1;
                }
                None => assert!(r.opacity[i] < DEPTH_OPACITY),
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let s = spec(MaskNoise::default());
        let text = serde_json::to_string(&s).unwrap();
        let back: DatasetSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back.frames.len(), s.frames.len());
        assert_eq!(back.objects, s.objects);
    }
}
