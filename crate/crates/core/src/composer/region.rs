//! Bird's-eye-view valid placement region derived from background density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{GridScalar, VoxelField};
use crate::geometry::{Aabb, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PillarConfig {
    /// BEV cell size (m) along x and y.
    pub cell_size: [f64; 2],
    /// Heights (m) above the ground plane whose densities enter a pillar.
    pub height_range: [f64; 2],
    /// Threshold on the pillar maximum.
    pub delta1: f64,
    /// Threshold on the pillar mean.
    pub delta2: f64,
}

impl Default for PillarConfig {
    fn default() -> Self {
        Self {
            cell_size: [2.0, 2.0],
            height_range: [0.2, 3.0],
            delta1: 30.0,
            delta2: 15.0,
        }
    }
}

impl PillarConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.cell_size.iter().all(|c| *c > 0.0 && c.is_finite()) {
            return Err(Error::invalid("pillar cell size must be > 0"));
        }
        if !(self.height_range[0] <= self.height_range[1]) {
            return Err(Error::invalid("pillar height range is empty"));
        }
        if !(self.delta1 >= self.delta2 && self.delta2 >= 0.0) {
            return Err(Error::invalid("pillar thresholds need delta1 >= delta2 >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellState {
    Valid,
    Invalid,
    Occluded,
}

/// Per-cell pillar statistics and placement state. Cell `(i, j)` covers
/// `[x0 + i*cx, x0 + (i+1)*cx) × [y0 + j*cy, y0 + (j+1)*cy)` and is stored at
/// `i * ny + j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidRegionMap {
    pub bounds: Aabb,
    pub cell_size: [f64; 2],
    pub dims: [usize; 2],
    pub max_density: Vec<f64>,
    pub mean_density: Vec<f64>,
    pub state: Vec<CellState>,
    /// Ground plane height the pillars were measured from.
    pub ground: f64,
    /// Top of the ground under each cell, for resting placed objects.
    pub cell_ground: Vec<f64>,
    pub delta1: f64,
    pub delta2: f64,
}

impl ValidRegionMap {
    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.dims[1] + j
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let u = ((x - self.bounds.min.x) / self.cell_size[0]).floor();
        let v = ((y - self.bounds.min.y) / self.cell_size[1]).floor();
        let in_range = |w: f64, n: usize| w >= 0.0 && w < n as f64;
        (in_range(u, self.dims[0]) && in_range(v, self.dims[1])).then(|| (u as usize, v as usize))
    }

    pub fn cell_min(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            self.bounds.min.x + i as f64 * self.cell_size[0],
            self.bounds.min.y + j as f64 * self.cell_size[1],
        )
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        self.cell_min(i, j) + Vec2::new(0.5 * self.cell_size[0], 0.5 * self.cell_size[1])
    }

    pub fn state_at(&self, x: f64, y: f64) -> Option<CellState> {
        self.cell_of(x, y).map(|(i, j)| self.state[self.index(i, j)])
    }

    pub fn ground_at(&self, x: f64, y: f64) -> f64 {
        self.cell_of(x, y).map_or(self.ground, |(i, j)| self.cell_ground[self.index(i, j)])
    }

    pub fn is_blocking(&self, index: usize) -> bool {
        self.max_density[index] >= self.delta1
    }

    pub fn valid_cells(&self) -> Vec<(usize, usize)> {
        let ny = self.dims[1];
        (0..self.cell_count())
            .filter(|&n| self.state[n] == CellState::Valid)
            .map(|n| (n / ny, n % ny))
            .collect()
    }

    pub fn count(&self, state: CellState) -> usize {
        self.state.iter().filter(|s| **s == state).count()
    }
}

/// Height of the top of the lowest run of consecutive z-levels whose mean
/// activated density reaches `threshold`; the grid floor when none does.
pub fn estimate_ground<S: GridScalar>(field: &VoxelField<S>, threshold: f64) -> f64 {
    let [nx, ny, nz] = field.resolution();
    let level_mean = |k: usize| {
        let mut sum = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                sum += field.node_density(field.node_index(i, j, k));
            }
        }
        sum / (nx * ny) as f64
    };
    top_of_lowest_run(nz, |k| level_mean(k) >= threshold)
        .map_or(field.bounds().min.z, |k| field.node_position(0, 0, k).z)
}

fn top_of_lowest_run(n: usize, dense: impl Fn(usize) -> bool) -> Option<usize> {
    let first = (0..n).find(|&k| dense(k))?;
    Some((first..n).take_while(|&k| dense(k)).last().unwrap_or(first))
}

/// Pillar statistics over the field's BEV footprint. Every grid node whose
/// `(x, y)` falls in a cell and whose height lies in the configured range
/// above the estimated ground contributes its activated density, zeros
/// included. Cells are classified against the thresholds.
pub fn pillar_stats<S: GridScalar>(field: &VoxelField<S>, config: &PillarConfig) -> Result<ValidRegionMap> {
    config.validate()?;
    let ground = estimate_ground(field, config.delta2);
    pillar_stats_at(field, config, ground)
}

/// [`pillar_stats`] with a known ground height.
pub fn pillar_stats_at<S: GridScalar>(field: &VoxelField<S>, config: &PillarConfig, ground: f64) -> Result<ValidRegionMap> {
    config.validate()?;
    let bounds = *field.bounds();
    let size = bounds.size();
    let dims = [0, 1].map(|a| ((size[a] / config.cell_size[a]) - 1e-9).ceil().max(1.0) as usize);
    let cells = dims[0] * dims[1];
    let mut map = ValidRegionMap {
        bounds,
        cell_size: config.cell_size,
        dims,
        max_density: vec![0.0; cells],
        mean_density: vec![0.0; cells],
        state: vec![CellState::Valid; cells],
        ground,
        cell_ground: vec![ground; cells],
        delta1: config.delta1,
        delta2: config.delta2,
    };
    let [nx, ny, nz] = field.resolution();
    let (lo, hi) = (ground + config.height_range[0] - 1e-9, ground + config.height_range[1] + 1e-9);
    let mut count = vec![0usize; cells];
    // Per cell and level: density sum and node count, for the cell ground.
    let mut level_sum = vec![0.0; cells * nz];
    let mut level_n = vec![0usize; cells * nz];
    for i in 0..nx {
        for j in 0..ny {
            let p = field.node_position(i, j, 0);
            let Some((ci, cj)) = map.cell_of(p.x, p.y).or_else(|| clamp_cell(&map, p.x, p.y)) else {
                continue;
            };
            let c = map.index(ci, cj);
            for k in 0..nz {
                let z = field.node_position(i, j, k).z;
                let sigma = field.node_density(field.node_index(i, j, k));
                level_sum[c * nz + k] += sigma;
                level_n[c * nz + k] += 1;
                if z >= lo && z <= hi {
                    map.max_density[c] = map.max_density[c].max(sigma);
                    map.mean_density[c] += sigma;
                    count[c] += 1;
                }
            }
        }
    }
    for c in 0..cells {
        if count[c] > 0 {
            map.mean_density[c] /= count[c] as f64;
        }
        let dense = |k: usize| level_n[c * nz + k] > 0 && level_sum[c * nz + k] / level_n[c * nz + k] as f64 >= config.delta2;
        if let Some(k) = top_of_lowest_run(nz, dense) {
            map.cell_ground[c] = field.node_position(0, 0, k).z;
        }
    }
    Ok(classify_valid(map, config.delta1, config.delta2))
}

// Nodes on the far boundary of the grid belong to the last cell.
fn clamp_cell(map: &ValidRegionMap, x: f64, y: f64) -> Option<(usize, usize)> {
    let eps = 1e-9;
    let b = &map.bounds;
    if x < b.min.x - eps || x > b.max.x + eps || y < b.min.y - eps || y > b.max.y + eps {
        return None;
    }
    let idx = |w: f64, lo: f64, c: f64, n: usize| (((w - lo) / c).floor().max(0.0) as usize).min(n - 1);
    Some((
        idx(x, b.min.x, map.cell_size[0], map.dims[0]),
        idx(y, b.min.y, map.cell_size[1], map.dims[1]),
    ))
}

/// Marks each cell valid iff its pillar max is below `delta1` and its mean
/// below `delta2`. Occlusion marks are discarded.
pub fn classify_valid(mut map: ValidRegionMap, delta1: f64, delta2: f64) -> ValidRegionMap {
    map.delta1 = delta1;
    map.delta2 = delta2;
    for c in 0..map.cell_count() {
        map.state[c] = if map.max_density[c] < delta1 && map.mean_density[c] < delta2 {
            CellState::Valid
        } else {
            CellState::Invalid
        };
    }
    map
}

/// Marks cells hidden from `ego` behind blocking cells (pillar max at least
/// `delta1`) as occluded. A cell is hidden when the segment from `ego` to
/// its center passes through the interior of a blocking cell other than
/// itself; cells touching `ego` never block. Blocking cells stay invalid.
pub fn occlusion_filter(mut map: ValidRegionMap, ego: Vec2) -> Result<ValidRegionMap> {
    let Some(start) = map.cell_of(ego.x, ego.y) else {
        return Err(Error::invalid(format!("ego ({}, {}) lies outside the region map", ego.x, ego.y)));
    };
    let [nx, ny] = map.dims;
    let mut hidden = vec![false; map.cell_count()];
    for i in 0..nx {
        for j in 0..ny {
            let c = map.index(i, j);
            if (i, j) == start || map.is_blocking(c) {
                continue;
            }
            hidden[c] = segment_blocked(&map, ego, start, (i, j));
        }
    }
    for (c, h) in hidden.into_iter().enumerate() {
        if h {
            map.state[c] = CellState::Occluded;
        }
    }
    Ok(map)
}

fn touches(map: &ValidRegionMap, (i, j): (usize, usize), p: Vec2) -> bool {
    let lo = map.cell_min(i, j);
    let hi = lo + Vec2::new(map.cell_size[0], map.cell_size[1]);
    p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y
}

// Grid traversal from the ego cell towards the target cell center. When the
// segment crosses a cell corner exactly it steps diagonally, since it does
// not enter the interior of either side cell.
fn segment_blocked(map: &ValidRegionMap, ego: Vec2, start: (usize, usize), target: (usize, usize)) -> bool {
    let end = map.cell_center(target.0, target.1);
    let d = end - ego;
    let (mut i, mut j) = (start.0 as i64, start.1 as i64);
    // A start on a cell boundary belongs to the cell the segment enters.
    let lo = map.cell_min(start.0, start.1);
    if d.x < 0.0 && ego.x == lo.x {
        i -= 1;
    }
    if d.y < 0.0 && ego.y == lo.y {
        j -= 1;
    }
    let step = |v: f64| if v > 0.0 { 1 } else if v < 0.0 { -1 } else { 0 };
    let (sx, sy) = (step(d.x), step(d.y));
    let t_next = |idx: i64, s: i64, axis: usize| -> f64 {
        if s == 0 {
            return f64::INFINITY;
        }
        let o = if axis == 0 { map.bounds.min.x } else { map.bounds.min.y };
        let edge = o + (idx + i64::from(s > 0)) as f64 * map.cell_size[axis];
        (edge - ego[axis]) / d[axis]
    };
    let [nx, ny] = map.dims;
    loop {
        if (i, j) == (target.0 as i64, target.1 as i64) {
            return false;
        }
        if i < 0 || j < 0 || i >= nx as i64 || j >= ny as i64 {
            return false;
        }
        let cell = (i as usize, j as usize);
        if map.is_blocking(map.index(cell.0, cell.1)) && !touches(map, cell, ego) {
            return true;
        }
        let (tx, ty) = (t_next(i, sx, 0), t_next(j, sy, 1));
        if tx.min(ty) >= 1.0 {
            return false;
        }
        if (tx - ty).abs() <= 1e-12 * tx.abs().max(ty.abs()).max(1.0) {
            i += sx;
            j += sy;
        } else if tx < ty {
            i += sx;
        } else {
            j += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{softplus_inv, ColorMode};
    use crate::geometry::Vec3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn empty_field() -> VoxelField<f64> {
        let mut f = VoxelField::<f64>::new(Vec3::new(-10.0, -10.0, -1.0), 0.5, [41, 41, 11], ColorMode::Direct).unwrap();
        f.density.iter_mut().for_each(|v| *v = -30.0);
        f
    }

    fn set_sigma(f: &mut VoxelField<f64>, i: usize, j: usize, k: usize, sigma: f64) {
        let n = f.node_index(i, j, k);
        f.density[n] = softplus_inv(sigma) - f.density_bias;
    }

    /// A map over `n × n` one-meter cells centered on the origin, with the
    /// given cells blocking.
    fn synthetic_map(n: usize, walls: &[(usize, usize)]) -> ValidRegionMap {
        let h = n as f64 / 2.0;
        let mut map = ValidRegionMap {
            bounds: Aabb::new(Vec3::new(-h, -h, 0.0), Vec3::new(h, h, 3.0)).unwrap(),
            cell_size: [1.0, 1.0],
            dims: [n, n],
            max_density: vec![0.0; n * n],
            mean_density: vec![0.0; n * n],
            state: vec![CellState::Valid; n * n],
            ground: 0.0,
            cell_ground: vec![0.0; n * n],
            delta1: 30.0,
            delta2: 15.0,
        };
        for &(i, j) in walls {
            let c = map.index(i, j);
            map.max_density[c] = 50.0;
            map.mean_density[c] = 20.0;
        }
        classify_valid(map, 30.0, 15.0)
    }

    // Exact line-of-sight oracle: does the open segment from `a` to `b` pass
    // through the open square `[lo, hi]`?
    fn crosses_interior(a: Vec2, b: Vec2, lo: Vec2, hi: Vec2) -> bool {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for k in 0..2 {
            let d = b[k] - a[k];
            if d == 0.0 {
                if !(a[k] > lo[k] && a[k] < hi[k]) {
                    return false;
                }
            } else {
                let (ta, tb) = ((lo[k] - a[k]) / d, (hi[k] - a[k]) / d);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        t1 - t0 > 1e-9
    }

    fn oracle_occluded(map: &ValidRegionMap, ego: Vec2) -> Vec<bool> {
        let [nx, ny] = map.dims;
        let size = Vec2::new(map.cell_size[0], map.cell_size[1]);
        let start = map.cell_of(ego.x, ego.y).unwrap();
        let mut out = vec![false; nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                let c = map.index(i, j);
                if (i, j) == start || map.is_blocking(c) {
                    continue;
                }
                let target = map.cell_center(i, j);
                out[c] = (0..nx * ny).any(|b| {
                    let (bi, bj) = (b / ny, b % ny);
                    let lo = map.cell_min(bi, bj);
                    let hi = lo + size;
                    let touches_ego = ego.x >= lo.x && ego.x <= hi.x && ego.y >= lo.y && ego.y <= hi.y;
                    b != c && map.is_blocking(b) && !touches_ego && crosses_interior(ego, target, lo, hi)
                });
            }
        }
        out
    }

    fn occluded_flags(map: &ValidRegionMap) -> Vec<bool> {
        map.state.iter().map(|s| *s == CellState::Occluded).collect()
    }

    #[test]
    fn all_zero_field_has_zero_stats() {
        let mut f = empty_field();
        f.density.iter_mut().for_each(|v| *v = -1e4);
        let map = pillar_stats_at(&f, &PillarConfig::default(), 0.0).unwrap();
        assert_eq!(map.dims, [10, 10]);
        assert!(map.max_density.iter().chain(&map.mean_density).all(|v| *v == 0.0));
        assert_eq!(map.count(CellState::Valid), 100);
    }

    #[test]
    fn single_dense_point_sets_cell_max() {
        let mut f = empty_field();
        set_sigma(&mut f, 5, 5, 6, 40.0);
        let map = pillar_stats_at(&f, &PillarConfig::default(), 0.0).unwrap();
        let (i, j) = map.cell_of(-7.5, -7.5).unwrap();
        let c = map.index(i, j);
        assert!((map.max_density[c] - 40.0).abs() < 1e-9);
        assert_eq!(map.state[c], CellState::Invalid);
        assert_eq!(map.count(CellState::Invalid), 1);
    }

    #[test]
    fn stats_match_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut f = empty_field();
        f.density.iter_mut().for_each(|v| *v = rng.gen_range(-6.0..5.0));
        let cfg = PillarConfig {
            cell_size: [1.5, 2.5],
            height_range: [0.3, 2.2],
            ..PillarConfig::default()
        };
        let ground = 0.25;
        let map = pillar_stats_at(&f, &cfg, ground).unwrap();
        let [nx, ny, nz] = f.resolution();
        for c in 0..map.cell_count() {
            let (ci, cj) = (c / map.dims[1], c % map.dims[1]);
            let lo = map.cell_min(ci, cj);
            let last = |a: usize, n: usize| if a + 1 == n { 1e-6 } else { 0.0 };
            let mut zs = Vec::new();
            for i in 0..nx {
                for j in 0..ny {
                    for k in 0..nz {
                        let p = f.node_position(i, j, k);
                        let in_x = p.x >= lo.x && p.x < lo.x + cfg.cell_size[0] + last(ci, map.dims[0]);
                        let in_y = p.y >= lo.y && p.y < lo.y + cfg.cell_size[1] + last(cj, map.dims[1]);
                        let in_z = p.z >= ground + 0.3 - 1e-9 && p.z <= ground + 2.2 + 1e-9;
                        if in_x && in_y && in_z {
                            zs.push(f.node_density(f.node_index(i, j, k)));
                        }
                    }
                }
            }
            let max = zs.iter().cloned().fold(0.0, f64::max);
            let mean = if zs.is_empty() { 0.0 } else { zs.iter().sum::<f64>() / zs.len() as f64 };
            assert!((map.max_density[c] - max).abs() < 1e-9, "cell {c}");
            assert!((map.mean_density[c] - mean).abs() < 1e-9, "cell {c}");
        }
    }

    #[test]
    fn ground_is_top_of_lowest_dense_slab() {
        let mut f = empty_field();
        let [nx, ny, _] = f.resolution();
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..3 {
                    set_sigma(&mut f, i, j, k, 50.0);
                }
            }
        }
        // A dense roof higher up does not count.
        for i in 0..nx {
            for j in 0..ny {
                set_sigma(&mut f, i, j, 9, 50.0);
            }
        }
        assert!((estimate_ground(&f, 15.0) - 0.0).abs() < 1e-9);
        let map = pillar_stats(&f, &PillarConfig::default()).unwrap();
        assert!((map.ground - 0.0).abs() < 1e-9);
        assert!(map.cell_ground.iter().all(|g| g.abs() < 1e-9));
        assert_eq!(estimate_ground(&empty_field(), 15.0), -1.0);
    }

    #[test]
    fn classify_examples() {
        let mut map = synthetic_map(3, &[]);
        map.max_density[..3].copy_from_slice(&[40.0, 20.0, 20.0]);
        map.mean_density[..3].copy_from_slice(&[1.0, 18.0, 10.0]);
        let map = classify_valid(map, 30.0, 15.0);
        assert_eq!(&map.state[..3], &[CellState::Invalid, CellState::Invalid, CellState::Valid]);
    }

    #[test]
    fn empty_map_has_no_occlusion() {
        let map = occlusion_filter(synthetic_map(9, &[]), Vec2::new(0.0, 0.0)).unwrap();
        assert_eq!(map.count(CellState::Occluded), 0);
    }

    #[test]
    fn single_wall_shadows_its_ray() {
        // Ego in cell (4, 4); wall straight ahead along +x at (6, 4).
        let map = occlusion_filter(synthetic_map(9, &[(6, 4)]), Vec2::new(0.0, 0.0)).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let s = map.state[map.index(i, j)];
                if (i, j) == (6, 4) {
                    assert_eq!(s, CellState::Invalid);
                } else if j == 4 && i > 6 {
                    assert_eq!(s, CellState::Occluded, "({i}, {j})");
                } else if i <= 6 || (j as i64 - 4).abs() > 1 {
                    assert_eq!(s, CellState::Valid, "({i}, {j})");
                }
            }
        }
    }

    #[test]
    fn u_shaped_wall_matches_line_of_sight_oracle() {
        let mut walls = Vec::new();
        for k in 5..15 {
            walls.push((14, k));
        }
        for i in 9..15 {
            walls.push((i, 5));
            walls.push((i, 14));
        }
        let map = synthetic_map(20, &walls);
        for ego in [Vec2::new(0.0, 0.0), Vec2::new(0.5, 0.5), Vec2::new(1.5, 0.0), Vec2::new(-3.2, 1.7)] {
            let filtered = occlusion_filter(map.clone(), ego).unwrap();
            assert_eq!(occluded_flags(&filtered), oracle_occluded(&map, ego), "ego {ego:?}");
            assert!(filtered.count(CellState::Occluded) > 10);
        }
    }

    #[test]
    fn ego_outside_map_is_an_error() {
        assert!(occlusion_filter(synthetic_map(4, &[]), Vec2::new(5.0, 0.0)).is_err());
    }

    fn arb_map() -> impl Strategy<Value = (ValidRegionMap, Vec2)> {
        (prop::collection::vec((0usize..12, 0usize..12), 0..20), -5.4f64..5.4, -5.4f64..5.4, any::<bool>()).prop_map(
            |(walls, x, y, snap)| {
                let ego = if snap { Vec2::new(x.round(), (2.0 * y).round() / 2.0) } else { Vec2::new(x, y) };
                (synthetic_map(12, &walls), ego)
            },
        )
    }

    proptest! {
        #[test]
        fn occlusion_matches_oracle((map, ego) in arb_map()) {
            let filtered = occlusion_filter(map.clone(), ego).unwrap();
            prop_assert_eq!(occluded_flags(&filtered), oracle_occluded(&map, ego));
        }

        #[test]
        fn occlusion_never_validates((map, ego) in arb_map()) {
            let filtered = occlusion_filter(map.clone(), ego).unwrap();
            for (a, b) in map.state.iter().zip(&filtered.state) {
                prop_assert!(*b != CellState::Valid || *a == CellState::Valid);
            }
        }

        #[test]
        fn raising_thresholds_never_shrinks_valid_set(
            max in prop::collection::vec(0.0f64..60.0, 16),
            mean in prop::collection::vec(0.0f64..30.0, 16),
            d1 in 0.0f64..50.0, d2 in 0.0f64..25.0, up1 in 0.0f64..10.0, up2 in 0.0f64..10.0,
        ) {
            let mut map = synthetic_map(4, &[]);
            map.max_density = max;
            map.mean_density = mean;
            let low = classify_valid(map.clone(), d1, d2);
            let high = classify_valid(map, d1 + up1, d2 + up2);
            for (a, b) in low.state.iter().zip(&high.state) {
                prop_assert!(*a != CellState::Valid || *b == CellState::Valid);
            }
        }
    }
}
