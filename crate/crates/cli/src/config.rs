use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxaug::composer::{ComposeConfig, PillarConfig};
use voxaug::decomposition::DecompositionConfig;
use voxaug::field::ColorMode;
use voxaug::render::{RenderOptions, Rgb, Sampling};
use voxaug::trainer::{ObjectGrid, TrainConfig};
use voxaug::Aabb;

use crate::exit::Failure;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub asset_store: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundSettings {
    pub voxel_size: f64,
    /// Cap on grid nodes along any axis; the voxel grows to respect it.
    pub max_resolution: usize,
    /// Fixed grid bounds; derived from cameras and depth when absent.
    pub bounds: Option<Aabb>,
    pub margin: f64,
    pub color_mode: ColorMode,
}

impl Default for BackgroundSettings {
    fn default() -> Self {
        Self {
            voxel_size: 0.25,
            max_resolution: 330,
            bounds: None,
            margin: 0.5,
            color_mode: ColorMode::Direct,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    /// Output size; cameras are rescaled to it when set.
    pub resolution: Option<[u32; 2]>,
    /// Sample spacing as a fraction of each field's voxel size.
    pub step_fraction: f64,
    pub background: Rgb,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            resolution: None,
            step_fraction: 0.5,
            background: [0.0; 3],
        }
    }
}

impl RenderSettings {
    pub fn options(&self) -> RenderOptions {
        RenderOptions {
            sampling: Sampling::VoxelFraction(self.step_fraction),
            background: self.background,
            early_termination: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub paths: Paths,
    pub train: TrainConfig,
    pub decomposition: DecompositionConfig,
    pub background: BackgroundSettings,
    pub object: ObjectGrid,
    pub pillar: PillarConfig,
    pub compose: ComposeConfig,
    /// BEV position the valid region is seen from.
    pub ego: Option<[f64; 2]>,
    pub render: RenderSettings,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::general(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::general(format!("{}: {e}", path.display())))
    }

    /// Propagates the global seed to every seeded stage.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.train.seed = seed;
        self.compose.jitter.seed = seed;
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn store_dir(&self) -> PathBuf {
        self.paths.asset_store.clone().unwrap_or_else(|| self.output_dir().join("assets"))
    }
}
