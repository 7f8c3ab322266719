use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mask::Mask;
use crate::error::{Error, Result};
use crate::geometry::{Box3D, CameraModel, Pose};
use crate::image::{DepthMap, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl From<&CameraModel> for Intrinsics {
    fn from(c: &CameraModel) -> Self {
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackedBox {
    /// Annotated track id; unlabeled boxes are linked by mask overlap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<u64>,
    #[serde(flatten)]
    pub bbox: Box3D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub instance_id: u32,
    pub mask: Mask,
}

/// One posed image with its annotations, loaded into memory.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameData {
    pub image: RgbImage,
    pub depth: Option<DepthMap>,
    pub intrinsics: Intrinsics,
    /// World-from-camera.
    pub pose: Option<Pose>,
    pub boxes: Vec<TrackedBox>,
    pub masks: Vec<InstanceMask>,
    pub timestamp: f64,
}

impl FrameData {
    pub fn camera(&self, frame: usize) -> Result<CameraModel> {
        let pose = self.pose.ok_or(Error::MissingPose { frame })?;
        let i = &self.intrinsics;
        CameraModel::new(i.fx, i.fy, i.cx, i.cy, i.width, i.height, pose)
    }

    pub fn pixel_count(&self) -> usize {
        self.intrinsics.width as usize * self.intrinsics.height as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneManifest {
    pub name: String,
    pub frames: Vec<FrameData>,
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    instance_id: u32,
    rle: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<PathBuf>,
    timestamp: f64,
    intrinsics: Intrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<Pose>,
    #[serde(default)]
    boxes: Vec<TrackedBox>,
    #[serde(default)]
    masks: Vec<MaskRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    #[serde(default)]
    name: String,
    frames: Vec<FrameRecord>,
}

fn manifest_err(frame: usize, msg: impl std::fmt::Display) -> Error {
    Error::Manifest(format!("frame {frame}: {msg}"))
}

impl SceneManifest {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Manifest("manifest has no frames".into()));
        }
        for (f, fr) in self.frames.iter().enumerate() {
            let (w, h) = (fr.intrinsics.width, fr.intrinsics.height);
            if (fr.image.width, fr.image.height) != (w, h) {
                return Err(manifest_err(f, "image size differs from intrinsics"));
            }
            if let Some(d) = &fr.depth {
                if (d.width, d.height) != (w, h) {
                    return Err(manifest_err(f, "depth map size differs from intrinsics"));
                }
            }
            let mut ids = HashSet::new();
            for m in &fr.masks {
                if (m.mask.width, m.mask.height) != (w, h) {
                    return Err(manifest_err(f, "mask size differs from intrinsics"));
                }
                if !ids.insert(m.instance_id) {
                    return Err(manifest_err(f, format!("duplicate instance id {}", m.instance_id)));
                }
            }
            let mut tracks = HashSet::new();
            for id in fr.boxes.iter().filter_map(|b| b.track_id) {
                if !tracks.insert(id) {
                    return Err(manifest_err(f, format!("duplicate box track id {id}")));
                }
            }
            if !fr.timestamp.is_finite() {
                return Err(manifest_err(f, "non-finite timestamp"));
            }
        }
        Ok(())
    }

    /// Reads a manifest JSON and every image it references (paths are
    /// relative to the manifest's directory).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rec: ManifestRecord =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut frames = Vec::with_capacity(rec.frames.len());
        for (f, fr) in rec.frames.into_iter().enumerate() {
            let image = RgbImage::load(dir.join(&fr.image)).map_err(|e| manifest_err(f, e))?;
            let depth = match &fr.depth {
                Some(p) => Some(DepthMap::load(dir.join(p)).map_err(|e| manifest_err(f, e))?),
                None => None,
            };
            let (w, h) = (fr.intrinsics.width, fr.intrinsics.height);
            let masks = fr
                .masks
                .iter()
                .map(|m| {
                    Ok(InstanceMask {
                        instance_id: m.instance_id,
                        mask: Mask::from_rle(w, h, &m.rle).map_err(|e| manifest_err(f, e))?,
                    })
                })
                .collect::<Result<_>>()?;
            frames.push(FrameData {
                image,
                depth,
                intrinsics: fr.intrinsics,
                pose: fr.pose,
                boxes: fr.boxes,
                masks,
                timestamp: fr.timestamp,
            });
        }
        let m = SceneManifest {
            name: rec.name,
            frames,
        };
        m.validate()?;
        Ok(m)
    }

    /// Writes `manifest.json`, `images/NNNN.ppm` and `depth/NNNN.pgm` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        for sub in ["images", "depth"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut frames = Vec::with_capacity(self.frames.len());
        for (f, fr) in self.frames.iter().enumerate() {
            let image = PathBuf::from(format!("images/{f:04}.ppm"));
            fr.image.save(dir.join(&image))?;
            let depth = match &fr.depth {
                Some(d) => {
                    let p = PathBuf::from(format!("depth/{f:04}.pgm"));
                    d.save(dir.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            frames.push(FrameRecord {
                image,
                depth,
                timestamp: fr.timestamp,
                intrinsics: fr.intrinsics,
                pose: fr.pose,
                boxes: fr.boxes.clone(),
                masks: fr
                    .masks
                    .iter()
                    .map(|m| MaskRecord {
                        instance_id: m.instance_id,
                        rle: m.mask.to_rle(),
                    })
                    .collect(),
            });
        }
        let rec = ManifestRecord {
            name: self.name.clone(),
            frames,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&rec)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
