//! Voxel-partitioned farthest point simplification.
//!
//! The cloud is bucketed into cubic voxels whose edge is derived from the
//! bounding box and point count. Each voxel receives a share of the target
//! count proportional to its population and is thinned by farthest point
//! sampling. Voxels are processed in eight rounds keyed by the parity of
//! their integer coordinates, so voxels running in the same round never touch
//! (not even at a corner). A voxel's sampling is seeded with the samples
//! already committed in its 26 neighbours, which keeps the density uniform
//! across voxel boundaries.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::cloud::{centroid, Point3, PointCloud};
use crate::error::{Error, Result};

/// Integer voxel coordinate.
pub type CellKey = [i64; 3];

/// How the first sample of a voxel without committed neighbours is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeedRule {
    /// The point nearest the centroid of the voxel's points.
    #[default]
    NearestToCellCentroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimplifyParams {
    pub target_count: usize,
    pub seed_rule: SeedRule,
}

impl SimplifyParams {
    pub fn new(target_count: usize) -> Self {
        Self {
            target_count,
            seed_rule: SeedRule::default(),
        }
    }
}

/// Voxel edge length: longest bounding box edge over `floor(cbrt(n) / 2)`,
/// or the edge itself when that floor is zero.
pub fn voxel_scale(cloud: &PointCloud) -> Result<f64> {
    let longest = cloud.bounding_box().longest_edge();
    if longest <= 0.0 {
        return Err(Error::DegenerateCloud(format!(
            "{}: all points coincide",
            cloud.name()
        )));
    }
    Ok(voxel_scale_for(longest, cloud.len()))
}

pub fn voxel_scale_for(longest_edge: f64, count: usize) -> f64 {
    let divisions = ((count as f64).cbrt() / 2.0).floor();
    if divisions < 1.0 {
        longest_edge
    } else {
        longest_edge / divisions
    }
}

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub cell_size: f64,
    pub origin: Point3,
    /// Point indices per occupied voxel, ordered by voxel coordinate.
    pub cells: BTreeMap<CellKey, Vec<usize>>,
}

impl VoxelGrid {
    pub fn build(points: &[Point3], cell_size: f64) -> Self {
        assert!(cell_size > 0.0);
        let origin = points
            .iter()
            .fold(points[0], |lo, p| lo.inf(p));
        let mut cells: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            let rel = (p - origin) / cell_size;
            let key = [rel.x.floor() as i64, rel.y.floor() as i64, rel.z.floor() as i64];
            cells.entry(key).or_default().push(i);
        }
        Self {
            cell_size,
            origin,
            cells,
        }
    }

    /// Round id in `0..8` from coordinate parity. 26-adjacent voxels always
    /// differ in the parity of at least one coordinate.
    pub fn round_of(key: &CellKey) -> usize {
        (key[0].rem_euclid(2) | key[1].rem_euclid(2) << 1 | key[2].rem_euclid(2) << 2) as usize
    }

    pub fn neighbours(key: &CellKey) -> impl Iterator<Item = CellKey> + '_ {
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| {
                (-1..=1)
                    .filter(move |&dz| dx != 0 || dy != 0 || dz != 0)
                    .map(move |dz| [key[0] + dx, key[1] + dy, key[2] + dz])
            })
        })
    }
}

/// Per-voxel sample counts: `round(|P_v| k / |P|)`, then adjusted one unit
/// at a time by largest (or smallest) fractional remainder so the total is
/// exactly `k`. Never exceeds a voxel's population.
pub fn per_cell_quota(grid: &VoxelGrid, k: usize, total: usize) -> BTreeMap<CellKey, usize> {
    let pops: Vec<usize> = grid.cells.values().map(Vec::len).collect();
    let quotas = largest_remainder(&pops, k, total);
    grid.cells.keys().copied().zip(quotas).collect()
}

pub(crate) fn largest_remainder(pops: &[usize], k: usize, total: usize) -> Vec<usize> {
    assert!(k <= total && pops.iter().sum::<usize>() == total);
    let ideal: Vec<f64> = pops
        .iter()
        .map(|&n| n as f64 * k as f64 / total as f64)
        .collect();
    let mut quota: Vec<usize> = ideal
        .iter()
        .zip(pops)
        .map(|(&q, &n)| (q.round() as usize).min(n))
        .collect();
    let mut rem: Vec<f64> = ideal.iter().zip(&quota).map(|(&q, &b)| q - b as f64).collect();
    let mut sum: usize = quota.iter().sum();
    while sum != k {
        let grow = sum < k;
        let mut order: Vec<usize> = (0..pops.len())
            .filter(|&i| if grow { quota[i] < pops[i] } else { quota[i] > 0 })
            .collect();
        if grow {
            order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
        } else {
            order.sort_by(|&a, &b| rem[a].total_cmp(&rem[b]).then(a.cmp(&b)));
        }
        for i in order {
            if sum == k {
                break;
            }
            if grow {
                quota[i] += 1;
                rem[i] -= 1.0;
                sum += 1;
            } else {
                quota[i] -= 1;
                rem[i] += 1.0;
                sum -= 1;
            }
        }
    }
    quota
}

/// Greedy farthest point sampling of `quota` points from `cell_points`.
///
/// Each pick maximizes the minimum distance to everything already picked and
/// to `boundary`; ties go to the lowest index. With an empty boundary the
/// traversal is seeded by the point nearest the centroid: a quota of one
/// returns that point, larger quotas start from the point farthest from it.
/// A quota equal to the population returns every index in order.
pub fn fps_in_cell(cell_points: &[Point3], quota: usize, boundary: &[Point3]) -> Result<Vec<usize>> {
    let n = cell_points.len();
    if quota > n {
        return Err(Error::QuotaExceedsPoints {
            quota,
            available: n,
        });
    }
    if quota == 0 {
        return Ok(Vec::new());
    }
    if quota == n {
        return Ok((0..n).collect());
    }
    let mut min_d2: Vec<f64> = cell_points
        .iter()
        .map(|p| {
            boundary
                .iter()
                .map(|b| (p - b).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; n];
    let first = if boundary.is_empty() {
        let c = centroid(cell_points);
        let seed = argmin_by(cell_points.iter().map(|p| (p - c).norm_squared()));
        if quota == 1 {
            return Ok(vec![seed]);
        }
        let s = cell_points[seed];
        argmax_by(cell_points.iter().map(|p| (p - s).norm_squared()), &taken)
    } else {
        argmax_by(min_d2.iter().copied(), &taken)
    };
    let mut picked = Vec::with_capacity(quota);
    let mut next = first;
    loop {
        picked.push(next);
        taken[next] = true;
        if picked.len() == quota {
            break;
        }
        let s = cell_points[next];
        for (d, p) in min_d2.iter_mut().zip(cell_points) {
            *d = d.min((p - s).norm_squared());
        }
        next = argmax_by(min_d2.iter().copied(), &taken);
    }
    Ok(picked)
}

fn argmin_by(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn argmax_by(values: impl Iterator<Item = f64>, taken: &[bool]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if taken[i] {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.expect("at least one untaken point").0
}

/// Indices (ascending) of the `params.target_count` points kept from `cloud`.
pub fn simplify_indices(cloud: &PointCloud, params: &SimplifyParams) -> Result<Vec<usize>> {
    let k = params.target_count;
    let n = cloud.len();
    if k < 4 {
        return Err(Error::InvalidParams(format!("target count {k} < 4")));
    }
    if n < k {
        return Err(Error::TooFewPoints { needed: k, got: n });
    }
    if n == k {
        return Ok((0..n).collect());
    }
    let points = cloud.points();
    let grid = VoxelGrid::build(points, voxel_scale(cloud)?);
    let quotas = per_cell_quota(&grid, k, n);

    let mut chosen: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
    for round in 0..8 {
        let jobs: Vec<(&CellKey, &Vec<usize>, usize)> = grid
            .cells
            .iter()
            .filter(|(key, _)| VoxelGrid::round_of(key) == round)
            .map(|(key, members)| (key, members, quotas[key]))
            .filter(|&(_, _, q)| q > 0)
            .collect();
        let results = jobs
            .par_iter()
            .map(|&(key, members, quota)| {
                let boundary: Vec<Point3> = VoxelGrid::neighbours(key)
                    .filter_map(|nb| chosen.get(&nb))
                    .flatten()
                    .map(|&i| points[i])
                    .collect();
                let local: Vec<Point3> = members.iter().map(|&i| points[i]).collect();
                let picks = fps_in_cell(&local, quota, &boundary)?;
                Ok((*key, picks.into_iter().map(|j| members[j]).collect::<Vec<_>>()))
            })
            .collect::<Result<Vec<_>>>()?;
        chosen.extend(results);
    }
    let mut out: Vec<usize> = chosen.into_values().flatten().collect();
    out.sort_unstable();
    debug_assert_eq!(out.len(), k);
    Ok(out)
}

/// Returns a `params.target_count`-point subset of `cloud` with roughly
/// uniform density. Points keep their original coordinates, order and
/// normals.
pub fn simplify(cloud: &PointCloud, params: &SimplifyParams) -> Result<PointCloud> {
    let idx = simplify_indices(cloud, params)?;
    cloud.select(&idx)
}
