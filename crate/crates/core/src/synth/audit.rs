//! Comparisons of trained fields against analytic ground truth.

use super::analytic::{eval_analytic, SynthObject};
use crate::field::{GridScalar, VoxelField};
use crate::geometry::Vec3;

/// Mean activated density over the grid nodes that lie more than one voxel
/// (per axis) away from the object's true volume. The one-voxel band is left
/// out because trilinear interpolation smears any surface across it.
pub fn outside_density<S: GridScalar>(field: &VoxelField<S>, object: &SynthObject) -> f64 {
    let scene = object.local_scene(field.bounds().expanded(2.0 * field.voxel_size()));
    let v = field.voxel_size();
    let [nx, ny, nz] = field.resolution();
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let x = field.node_position(i, j, k);
                let near = (0..27).any(|m| {
                    let o = Vec3::new((m % 3) as f64 - 1.0, ((m / 3) % 3) as f64 - 1.0, (m / 9) as f64 - 1.0);
                    eval_analytic(&scene, &(x + o * v)).0 > 0.0
                });
                if !near {
                    sum += field.node_density(field.node_index(i, j, k));
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
