use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::analytic::{eval_analytic, AnalyticScene};
use crate::error::Result;
use crate::field::{logit, softplus_inv, ColorMode, VoxelField};
use crate::geometry::Aabb;

/// Densities below this are stored as this value (the activation cannot reach 0).
pub const BAKE_SIGMA_MIN: f64 = 1e-7;
/// Densities above this are clamped, with a warning.
pub const BAKE_SIGMA_MAX: f64 = 1e4;
const COLOR_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub bounds: Aabb,
    pub voxel_size: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BakeReport {
    /// Nodes whose density exceeded [`BAKE_SIGMA_MAX`].
    pub clamped: usize,
}

/// Samples the analytic scene at every grid node, inverting the density and
/// color activations so that node queries reproduce the scene.
pub fn bake(scene: &AnalyticScene, config: &GridConfig) -> Result<(VoxelField<f32>, BakeReport)> {
    let mut field = VoxelField::<f32>::covering(&config.bounds, config.voxel_size, ColorMode::Direct)?;
    let [_, ny, nz] = field.resolution();
    let bias = field.density_bias;
    let positions: Vec<_> = (0..field.node_count())
        .map(|n| field.node_position(n / (ny * nz), (n / nz) % ny, n % nz))
        .collect();
    let clamped: usize = field
        .density
        .par_iter_mut()
        .zip(field.color.par_chunks_mut(3))
        .zip(positions.par_iter())
        .map(|((d, c), x)| {
            let (sigma, rgb) = eval_analytic(scene, x);
            let over = sigma > BAKE_SIGMA_MAX;
            *d = (softplus_inv(sigma.clamp(BAKE_SIGMA_MIN, BAKE_SIGMA_MAX)) - bias) as f32;
            for k in 0..3 {
                c[k] = logit(rgb[k].clamp(COLOR_EPS, 1.0 - COLOR_EPS)) as f32;
            }
            over as usize
        })
        .sum();
    dilate_colors(&mut field, 2);
    if clamped > 0 {
        log::warn!("bake: {clamped} nodes exceed density {BAKE_SIGMA_MAX} and were clamped");
    }
    Ok((field, BakeReport { clamped }))
}

// Empty space has no color of its own. Copying the mean color of occupied
// neighbours outwards keeps interpolated colors near surfaces from fading
// towards an arbitrary empty-space value.
fn dilate_colors(field: &mut VoxelField<f32>, passes: usize) {
    let [nx, ny, nz] = field.resolution();
    let mut filled: Vec<bool> = (0..field.node_count()).map(|n| field.node_density(n) > BAKE_SIGMA_MIN * 10.0).collect();
    for _ in 0..passes {
        let (src, known) = (field.color.clone(), filled.clone());
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let n = field.node_index(i, j, k);
                    if known[n] {
                        continue;
                    }
                    let mut sum = [0.0f64; 3];
                    let mut count = 0;
                    let (i, j, k) = (i as i64, j as i64, k as i64);
                    for (di, dj, dk) in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
                        let (a, b, c) = (i + di, j + dj, k + dk);
                        if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                            continue;
                        }
                        let m = field.node_index(a as usize, b as usize, c as usize);
                        if known[m] {
                            (0..3).for_each(|q| sum[q] += f64::from(src[3 * m + q]));
                            count += 1;
                        }
                    }
                    if count > 0 {
                        (0..3).for_each(|q| field.color[3 * n + q] = (sum[q] / count as f64) as f32);
                        filled[n] = true;
                    }
                }
            }
        }
    }
}
