//! Global alignment: rotation grid search in pre-shape space followed by ICP.
//!
//! Every rotation of a regular Euler-angle lattice is applied to the source
//! pre-shape and scored by a Hausdorff-type energy against the target. The
//! best lattice rotation seeds ICP. If the refined energy still exceeds a
//! threshold, ICP is restarted from every local minimum of the energy
//! surface and the lowest-energy outcome wins, which rescues symmetric
//! shapes whose global grid minimum sits in the wrong basin.

use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::time::Instant;

use log::{debug, warn};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde_json::json;

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::icp::{icp_from, IcpParams, IcpResult};
use crate::index::{DistanceBound, SpatialIndex};
use crate::parallel::with_threads;
use crate::partial::LocalFrame;
use crate::preshape::{to_preshape_with, PreShape, ScaleDef};
use crate::simplify::{simplify, SimplifyParams};
use crate::transform::{rot_x, rot_y, rot_z, RigidTransform, Similarity};

/// Lattice of rotations `Rz(iz*step) * Ry(iy*step) * Rx(ix*step)`.
#[derive(Debug, Clone)]
pub struct RotationGrid {
    step: f64,
    per_axis: usize,
    rotations: Vec<Matrix3<f64>>,
}

impl RotationGrid {
    pub fn new(step: f64) -> Result<Self> {
        if !(step > 0.0 && step <= PI) {
            return Err(Error::InvalidParams(format!("rotation step {step} outside (0, pi]")));
        }
        let per_axis = (2.0 * PI / step - 1e-9).ceil() as usize;
        let mut rotations = Vec::with_capacity(per_axis.pow(3));
        for ix in 0..per_axis {
            let rx = rot_x(ix as f64 * step);
            for iy in 0..per_axis {
                let ryx = rot_y(iy as f64 * step) * rx;
                for iz in 0..per_axis {
                    rotations.push(rot_z(iz as f64 * step) * ryx);
                }
            }
        }
        Ok(Self {
            step,
            per_axis,
            rotations,
        })
    }

    pub fn from_degrees(deg: f64) -> Result<Self> {
        Self::new(deg.to_radians())
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    /// `(ix, iy, iz)` of a flat entry index; entries are in lexicographic
    /// order of this triple.
    pub fn entry(&self, i: usize) -> [usize; 3] {
        let n = self.per_axis;
        [i / (n * n), (i / n) % n, i % n]
    }

    pub fn index_of(&self, e: [usize; 3]) -> usize {
        let n = self.per_axis;
        (e[0] % n) * n * n + (e[1] % n) * n + e[2] % n
    }

    pub fn entries(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (0..self.len()).map(|i| self.entry(i))
    }

    pub fn rotation(&self, i: usize) -> &Matrix3<f64> {
        &self.rotations[i]
    }

    pub fn rotation_of(&self, e: [usize; 3]) -> &Matrix3<f64> {
        &self.rotations[self.index_of(e)]
    }

    pub fn rotations(&self) -> &[Matrix3<f64>] {
        &self.rotations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnergyVariant {
    /// Mean nearest-neighbour distance from the moving cloud into the fixed
    /// one.
    #[default]
    DirectedMean,
    /// Largest of those distances.
    DirectedMax,
    /// Classical Hausdorff distance.
    SymmetricMax,
}

impl EnergyVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            EnergyVariant::DirectedMean => "mean",
            EnergyVariant::DirectedMax => "max",
            EnergyVariant::SymmetricMax => "symmetric",
        }
    }
}

impl FromStr for EnergyVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "directed_mean" => Ok(Self::DirectedMean),
            "max" | "directed_max" => Ok(Self::DirectedMax),
            "symmetric" | "symmetric_max" => Ok(Self::SymmetricMax),
            other => Err(Error::InvalidParams(format!("unknown energy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    pub variant: EnergyVariant,
    /// Refined energy above which the local-minima restart runs.
    pub threshold: f64,
    /// Edge of the cubic neighbourhood (in grid steps) used to define local
    /// minima of the energy surface.
    pub kernel: usize,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            variant: EnergyVariant::DirectedMean,
            threshold: 0.001,
            kernel: 5,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::InvalidParams("energy threshold must be > 0".into()));
        }
        if self.kernel < 3 || self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidParams(format!(
                "kernel must be odd and >= 3, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// Distance energy of `moving` (already transformed) against the indexed
/// fixed point set.
pub fn energy(
    fixed: &PreShape,
    moving: &[Point3],
    fixed_index: &SpatialIndex,
    params: &EnergyParams,
) -> f64 {
    energy_points(&fixed.points, moving, fixed_index, params.variant)
}

pub(crate) fn energy_points(
    fixed: &[Point3],
    moving: &[Point3],
    fixed_index: &SpatialIndex,
    variant: EnergyVariant,
) -> f64 {
    match variant {
        EnergyVariant::DirectedMean => {
            moving.iter().map(|p| fixed_index.distance(p)).sum::<f64>() / moving.len() as f64
        }
        EnergyVariant::DirectedMax => directed_max(moving, fixed_index),
        EnergyVariant::SymmetricMax => {
            let back = SpatialIndex::new(moving);
            directed_max(moving, fixed_index).max(directed_max(fixed, &back))
        }
    }
}

fn directed_max(moving: &[Point3], fixed_index: &SpatialIndex) -> f64 {
    moving
        .iter()
        .map(|p| fixed_index.nearest(p).1)
        .fold(0.0, f64::max)
        .sqrt()
}

/// A fixed visiting order for the moving points that interleaves distant
/// parts of the cloud, so a poor candidate accumulates error early.
pub(crate) fn stride_order(n: usize) -> Vec<usize> {
    let mut stride = (((n as f64) * 0.618_033_988_75) as usize).max(1);
    while gcd(stride, n) != 1 {
        stride += 1;
    }
    (0..n).map(|i| (i * stride) % n).collect()
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Relative margin applied when a lower bound, rather than an exact
/// partial score, decides to abandon a candidate; it absorbs rounding in
/// the bound so that ties with the best score are always evaluated.
const BOUND_SLACK: f64 = 1e-9;

/// Cells along the longest edge of the grid used for distance lower
/// bounds.
const BOUND_RESOLUTION: usize = 64;

/// Reusable per-worker buffers for [`rotated_score`].
#[derive(Default)]
struct Scratch {
    turned: Vec<Point3>,
    suffix: Vec<f64>,
}

/// Score of `moving` rotated by `rotation`, visiting points in `order`:
/// the distance sum for the mean energy, the largest squared distance for
/// the max energy. Gives up with `None` once the running score, or the
/// running score plus a lower bound on the rest, exceeds `bound`.
#[allow(clippy::too_many_arguments)]
fn rotated_score(
    moving: &[Point3],
    order: &[usize],
    rotation: &Matrix3<f64>,
    fixed_index: &SpatialIndex,
    variant: EnergyVariant,
    bound: f64,
    lower: Option<&DistanceBound>,
    scratch: &mut Scratch,
) -> Option<f64> {
    let max = variant == EnergyVariant::DirectedMax;
    let loose = bound * (1.0 + BOUND_SLACK);
    let turned = &mut scratch.turned;
    turned.clear();
    turned.extend(order.iter().map(|&i| rotation * moving[i]));
    let suffix = &mut scratch.suffix;
    suffix.clear();
    suffix.resize(turned.len() + 1, 0.0);
    if let Some(lower) = lower.filter(|_| bound.is_finite()) {
        // any partial sum of the bounds is itself a lower bound
        let mut acc = 0.0;
        for (j, q) in turned.iter().enumerate() {
            let lb = lower.lower(q);
            acc = if max { f64::max(acc, lb * lb) } else { acc + lb };
            if acc > loose {
                return None;
            }
            suffix[j] = lb;
        }
        for j in (0..turned.len()).rev() {
            let lb = suffix[j];
            suffix[j] = if max { suffix[j + 1].max(lb * lb) } else { suffix[j + 1] + lb };
        }
    }
    let mut score = 0.0;
    for (j, q) in turned.iter().enumerate() {
        let (_, d2) = fixed_index.nearest(q);
        if max {
            score = f64::max(score, d2);
            if score > bound {
                return None;
            }
        } else {
            score += d2.sqrt();
            if score > bound || score + suffix[j + 1] > loose {
                return None;
            }
        }
    }
    Some(score)
}

fn score_to_energy(score: f64, n: usize, variant: EnergyVariant) -> f64 {
    match variant {
        EnergyVariant::DirectedMax => score.sqrt(),
        _ => score / n as f64,
    }
}

/// Energy of `moving` rotated by `rotation`, without materializing the
/// rotated copy for the directed variants.
fn rotated_energy(
    fixed: &[Point3],
    moving: &[Point3],
    order: &[usize],
    rotation: &Matrix3<f64>,
    fixed_index: &SpatialIndex,
    variant: EnergyVariant,
) -> f64 {
    match variant {
        EnergyVariant::SymmetricMax => {
            let turned: Vec<Point3> = moving.iter().map(|p| rotation * p).collect();
            energy_points(fixed, &turned, fixed_index, variant)
        }
        _ => {
            let mut scratch = Scratch::default();
            let score = rotated_score(moving, order, rotation, fixed_index, variant, f64::INFINITY, None, &mut scratch)
                .expect("an infinite bound never abandons");
            score_to_energy(score, moving.len(), variant)
        }
    }
}

/// Joint argmin over `(set, rotation)` pairs of a directed energy of
/// `sets[s]` rotated into the fixed points, ordered by
/// `(energy, set, rotation)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointBest {
    pub set: usize,
    pub rotation: usize,
    pub energy: f64,
    /// Candidates scored to completion.
    pub completed: usize,
}

/// Exhaustive search over every rotation of every moving set. With `prune`
/// a candidate is abandoned once its running score, completed by a
/// distance-grid lower bound for the points not yet visited, exceeds the
/// best complete score seen so far. The true minimum is never abandoned and
/// scores are accumulated in the same order either way, so the result is
/// identical. Set `first` is scored before the others to tighten the bound
/// early.
pub fn joint_argmin(
    sets: &[&[Point3]],
    first: usize,
    fixed: &[Point3],
    fixed_index: &SpatialIndex,
    grid: &RotationGrid,
    variant: EnergyVariant,
    prune: bool,
) -> JointBest {
    assert!(variant != EnergyVariant::SymmetricMax, "joint search needs a directed energy");
    assert!(first < sets.len());
    let n = sets[0].len();
    assert!(sets.iter().all(|s| s.len() == n));
    let order = stride_order(n);
    let lower = prune.then(|| DistanceBound::new(fixed, fixed_index, BOUND_RESOLUTION));
    let bound = AtomicU64::new(f64::INFINITY.to_bits());
    let score = |scratch: &mut Scratch, s: usize, r: usize| -> Option<f64> {
        let limit = if prune {
            f64::from_bits(bound.load(AtomicOrdering::Relaxed))
        } else {
            f64::INFINITY
        };
        let v = rotated_score(sets[s], &order, grid.rotation(r), fixed_index, variant, limit, lower.as_ref(), scratch)?;
        // non-negative floats order like their bit patterns
        bound.fetch_min(v.to_bits(), AtomicOrdering::Relaxed);
        Some(v)
    };
    let mut best: Option<(f64, usize, usize)> = None;
    let mut completed = 0;
    let mut run = |batch: &[(usize, usize)], best: &mut Option<(f64, usize, usize)>| {
        let scored: Vec<Option<f64>> = batch
            .par_iter()
            .map_init(Scratch::default, |scratch, &(s, r)| score(scratch, s, r))
            .collect();
        for (&(s, r), v) in batch.iter().zip(scored) {
            let Some(v) = v else { continue };
            completed += 1;
            if best.is_none_or(|b| (v, s, r) < b) {
                *best = Some((v, s, r));
            }
        }
    };
    // the first set over all rotations, then its best rotation on every
    // other set, then everything else
    let head: Vec<(usize, usize)> = (0..grid.len()).map(|r| (first, r)).collect();
    run(&head, &mut best);
    let probe_rotation = best.map_or(0, |b| b.2);
    let probe: Vec<(usize, usize)> = (0..sets.len())
        .filter(|&s| s != first)
        .map(|s| (s, probe_rotation))
        .collect();
    run(&probe, &mut best);
    let tail: Vec<(usize, usize)> = (0..sets.len())
        .filter(|&s| s != first)
        .flat_map(|s| (0..grid.len()).filter(move |&r| r != probe_rotation).map(move |r| (s, r)))
        .collect();
    run(&tail, &mut best);
    let (v, set, rotation) = best.expect("the first candidate always completes");
    JointBest {
        set,
        rotation,
        energy: score_to_energy(v, n, variant),
        completed,
    }
}

#[derive(Debug, Clone)]
pub struct GridSearch {
    /// Flat index of the lowest-energy entry (lowest index on ties).
    pub best: usize,
    /// Energy of every entry, in grid order.
    pub surface: Vec<f64>,
}

impl GridSearch {
    pub fn best_energy(&self) -> f64 {
        self.surface[self.best]
    }
}

/// Index of the smallest value, first one on ties.
pub(crate) fn ordered_argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Scores every grid rotation applied to `moving` against `fixed`.
///
/// Entries are independent and evaluated in parallel on the current worker
/// pool; the reduction is an ordered argmin, so the result does not depend
/// on the number of workers.
pub fn grid_search(
    fixed: &PreShape,
    moving: &PreShape,
    grid: &RotationGrid,
    params: &EnergyParams,
) -> GridSearch {
    let index = SpatialIndex::new(&fixed.points);
    grid_search_indexed(&fixed.points, &index, &moving.points, grid, params.variant)
}

pub(crate) fn grid_search_indexed(
    fixed: &[Point3],
    fixed_index: &SpatialIndex,
    moving: &[Point3],
    grid: &RotationGrid,
    variant: EnergyVariant,
) -> GridSearch {
    let order = stride_order(moving.len());
    let surface: Vec<f64> = grid
        .rotations()
        .par_iter()
        .map(|r| rotated_energy(fixed, moving, &order, r, fixed_index, variant))
        .collect();
    GridSearch {
        best: ordered_argmin(&surface),
        surface,
    }
}

/// Entries that are minimal within their `kernel`^3 neighbourhood on the
/// periodic grid. Values are compared as `(energy, index)`, so a flat
/// plateau yields only its lowest-index entry.
pub fn local_minima(surface: &[f64], per_axis: usize, kernel: usize) -> Vec<usize> {
    assert_eq!(surface.len(), per_axis.pow(3));
    let n = per_axis as isize;
    let r = (kernel / 2) as isize;
    let key = |i: usize| (surface[i], i);
    let less = |a: (f64, usize), b: (f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
    (0..surface.len())
        .filter(|&i| {
            let (ix, iy, iz) = ((i / (per_axis * per_axis)) as isize, ((i / per_axis) % per_axis) as isize, (i % per_axis) as isize);
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        let j = ((ix + dx).rem_euclid(n) * n * n
                            + (iy + dy).rem_euclid(n) * n
                            + (iz + dz).rem_euclid(n)) as usize;
                        if j != i && less(key(j), key(i)) {
                            return false;
                        }
                    }
                }
            }
            true
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegisterConfig {
    /// Points kept after simplification.
    pub k: usize,
    /// Rotation grid step, radians.
    pub theta: f64,
    pub energy: EnergyParams,
    pub icp: IcpParams,
    pub scale_def: ScaleDef,
    /// Worker count; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Whether the local-minima restart may run.
    pub additional_process: bool,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            k: 2000,
            theta: PI / 6.0,
            energy: EnergyParams::default(),
            icp: IcpParams::default(),
            scale_def: ScaleDef::Frobenius,
            threads: None,
            additional_process: true,
        }
    }
}

impl RegisterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 4 {
            return Err(Error::InvalidParams(format!("k = {} < 4", self.k)));
        }
        self.energy.validate()?;
        self.icp.validate()?;
        RotationGrid::new(self.theta).map(|_| ())
    }
}

/// Wall-clock milliseconds per pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub simplify_ms: f64,
    pub grid_ms: f64,
    pub icp_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    /// Best grid rotation and its lattice coordinates.
    pub o_init: Matrix3<f64>,
    pub o_init_entry: [usize; 3],
    /// Final rotation in pre-shape space (ICP composed with `o_init`).
    pub o_r: Matrix3<f64>,
    /// Final translation in pre-shape units.
    pub translation: Vector3<f64>,
    /// Grid energy at `o_init`.
    pub energy_init: f64,
    /// Energy after refining `o_init` alone.
    pub energy_icp: f64,
    /// Energy of the returned alignment.
    pub energy: f64,
    pub icp_mse: f64,
    pub icp_iterations: usize,
    /// Maps the original source cloud onto the original target cloud.
    pub similarity: Similarity,
    pub used_additional_process: bool,
    pub local_minima: usize,
    /// Replacement source centre (partial registration only).
    pub candidate_center: Option<Point3>,
    pub frame: Option<LocalFrame>,
    pub theta: f64,
    pub timings: StageTimings,
}

impl AlignmentResult {
    pub fn to_json(&self) -> serde_json::Value {
        let m = |r: &Matrix3<f64>| {
            (0..3)
                .map(|i| (0..3).map(|j| r[(i, j)]).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        let v = |p: &Vector3<f64>| [p.x, p.y, p.z];
        let [ix, iy, iz] = self.o_init_entry;
        let mut out = json!({
            "similarity": self.similarity.row_major(),
            "scale": self.similarity.scale,
            "o_init_euler": {
                "indices": [ix, iy, iz],
                "radians": [ix as f64 * self.theta, iy as f64 * self.theta, iz as f64 * self.theta],
                "order": "Rz*Ry*Rx",
            },
            "o_init": m(&self.o_init),
            "o_r": m(&self.o_r),
            "e_d_init": self.energy_init,
            "e_d_icp": self.energy_icp,
            "e_d_final": self.energy,
            "icp_mse": self.icp_mse,
            "icp_iterations": self.icp_iterations,
            "used_additional_process": self.used_additional_process,
            "local_minima": self.local_minima,
            "ms": {
                "simplify": self.timings.simplify_ms,
                "grid": self.timings.grid_ms,
                "icp": self.timings.icp_ms,
                "total": self.timings.total_ms,
            },
        });
        if let Some(c) = &self.candidate_center {
            out["c_init"] = json!(v(c));
        }
        if let Some(f) = &self.frame {
            out["frame"] = json!({
                "origin": v(&f.origin),
                "x": v(&f.x),
                "y": v(&f.y),
                "z": v(&f.z),
                "r_s": f.r_s,
            });
        }
        out
    }
}

/// Simplified copies of both clouds with a common point count.
pub(crate) fn simplify_pair(
    source: &PointCloud,
    target: &PointCloud,
    k: usize,
) -> Result<(PointCloud, PointCloud)> {
    let k_eff = k.min(source.len()).min(target.len());
    if k_eff < k {
        warn!(
            "clouds smaller than k = {k} ({} / {} points); using {k_eff} points for both",
            source.len(),
            target.len()
        );
    }
    if k_eff < 4 {
        return Err(Error::TooFewPoints {
            needed: 4,
            got: k_eff,
        });
    }
    let params = SimplifyParams::new(k_eff);
    Ok((simplify(source, &params)?, simplify(target, &params)?))
}

/// Similarity in original units for a rigid alignment `t` found between
/// pre-shapes `source` and `target`:
/// `p -> c_t + s_t * (R (p - c_s) / s_s + t)`.
pub(crate) fn similarity_from(source: &PreShape, target: &PreShape, t: &RigidTransform) -> Similarity {
    let scale = target.scale / source.scale;
    Similarity {
        rotation: t.rotation,
        scale,
        translation: target.centroid + t.translation * target.scale
            - t.rotation * source.centroid * scale,
    }
}

/// One ICP refinement and its energy.
#[derive(Debug, Clone)]
pub(crate) struct Refined {
    pub icp: IcpResult,
    pub energy: f64,
}

pub(crate) fn refine(
    moving: &[Point3],
    fixed: &[Point3],
    fixed_index: &SpatialIndex,
    rotation: &Matrix3<f64>,
    params: &IcpParams,
    variant: EnergyVariant,
) -> Result<Refined> {
    let icp = icp_from(moving, fixed, fixed_index, params, RigidTransform::from_rotation(*rotation))?;
    let moved: Vec<Point3> = moving.iter().map(|p| icp.transform.apply(p)).collect();
    let energy = energy_points(fixed, &moved, fixed_index, variant);
    Ok(Refined { icp, energy })
}

/// Restarts ICP from every local minimum of the energy surface of `moving`
/// and returns the lowest-energy refinement (lowest minimum index on ties),
/// or `None` when none beats `incumbent`.
pub(crate) fn additional_process(
    moving: &[Point3],
    fixed: &[Point3],
    fixed_index: &SpatialIndex,
    grid: &RotationGrid,
    icp: &IcpParams,
    energy: &EnergyParams,
    incumbent: f64,
) -> Result<(usize, Option<(usize, Refined)>)> {
    let surface = grid_search_indexed(fixed, fixed_index, moving, grid, energy.variant).surface;
    let minima = local_minima(&surface, grid.per_axis(), energy.kernel);
    debug!("additional process: {} local minima", minima.len());
    let refined = minima
        .par_iter()
        .map(|&m| refine(moving, fixed, fixed_index, grid.rotation(m), icp, energy.variant).map(|r| (m, r)))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(usize, Refined)> = None;
    for (m, r) in refined {
        let beats_best = best.as_ref().is_none_or(|(_, b)| r.energy < b.energy);
        if r.energy < incumbent && beats_best {
            best = Some((m, r));
        }
    }
    Ok((minima.len(), best))
}

/// Registers two complete clouds. The returned similarity maps `source`
/// onto `target`.
pub fn register(source: &PointCloud, target: &PointCloud, config: &RegisterConfig) -> Result<AlignmentResult> {
    config.validate()?;
    with_threads(config.threads, || register_inner(source, target, config))
}

fn register_inner(source: &PointCloud, target: &PointCloud, config: &RegisterConfig) -> Result<AlignmentResult> {
    let start = Instant::now();
    let (src, tgt) = simplify_pair(source, target, config.k)?;
    let src_ps = to_preshape_with(&src, config.scale_def)?;
    let tgt_ps = to_preshape_with(&tgt, config.scale_def)?;
    let simplify_ms = ms(start);

    let t = Instant::now();
    let grid = RotationGrid::new(config.theta)?;
    let index = SpatialIndex::new(&tgt_ps.points);
    let (best, energy_init) = match config.energy.variant {
        EnergyVariant::SymmetricMax => {
            let search = grid_search_indexed(&tgt_ps.points, &index, &src_ps.points, &grid, config.energy.variant);
            (search.best, search.best_energy())
        }
        variant => {
            let b = joint_argmin(&[&src_ps.points], 0, &tgt_ps.points, &index, &grid, variant, true);
            (b.rotation, b.energy)
        }
    };
    let grid_ms = ms(t);

    let t = Instant::now();
    let o_init = *grid.rotation(best);
    let plain = refine(&src_ps.points, &tgt_ps.points, &index, &o_init, &config.icp, config.energy.variant)?;
    let energy_icp = plain.energy;
    let mut chosen = plain;
    let mut used_additional_process = false;
    let mut local_minima = 0;
    if config.additional_process && energy_icp > config.energy.threshold {
        used_additional_process = true;
        let (count, better) = additional_process(
            &src_ps.points,
            &tgt_ps.points,
            &index,
            &grid,
            &config.icp,
            &config.energy,
            energy_icp,
        )?;
        local_minima = count;
        if let Some((_, r)) = better {
            chosen = r;
        }
    }
    let icp_ms = ms(t);

    let transform = chosen.icp.transform;
    Ok(AlignmentResult {
        o_init,
        o_init_entry: grid.entry(best),
        o_r: transform.rotation,
        translation: transform.translation,
        energy_init,
        energy_icp,
        energy: chosen.energy,
        icp_mse: chosen.icp.mse,
        icp_iterations: chosen.icp.iterations,
        similarity: similarity_from(&src_ps, &tgt_ps, &transform),
        used_additional_process,
        local_minima,
        candidate_center: None,
        frame: None,
        theta: grid.step(),
        timings: StageTimings {
            simplify_ms,
            grid_ms,
            icp_ms,
            total_ms: ms(start),
        },
    })
}

pub(crate) fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preshape::to_preshape;
    use crate::transform::rotation_defect;

    fn ps(points: Vec<Point3>) -> PreShape {
        to_preshape(&PointCloud::new(points, "p").unwrap()).unwrap()
    }

    fn blob(n: usize) -> Vec<Point3> {
        // deterministic, asymmetric: points on a twisted ellipsoid
        (0..n)
            .map(|i| {
                let t = i as f64 * 2.399963;
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let p = Point3::new(r * t.cos(), r * t.sin(), z);
                Point3::new(1.5 * p.x + 0.3 * p.z * p.z, p.y, 0.6 * p.z + 0.2 * p.x * p.y)
            })
            .collect()
    }

    #[test]
    fn default_grid_has_1728_proper_rotations() {
        let grid = RotationGrid::new(PI / 6.0).unwrap();
        assert_eq!(grid.per_axis(), 12);
        assert_eq!(grid.len(), 1728);
        for r in grid.rotations() {
            assert!(rotation_defect(r) < 1e-12);
        }
        assert_eq!(grid.entry(grid.index_of([3, 7, 11])), [3, 7, 11]);
        assert!((grid.rotation_of([1, 0, 0]) - rot_x(PI / 6.0)).abs().max() < 1e-15);
        assert!(RotationGrid::new(0.0).is_err());
    }

    #[test]
    fn energy_hand_values() {
        let a = vec![Point3::zeros()];
        let b = vec![Point3::new(1.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)];
        let index = SpatialIndex::new(&a);
        assert_eq!(energy_points(&a, &b, &index, EnergyVariant::DirectedMean), 2.0);
        assert_eq!(energy_points(&a, &b, &index, EnergyVariant::DirectedMax), 3.0);
        assert_eq!(energy_points(&a, &b, &index, EnergyVariant::SymmetricMax), 3.0);
    }

    #[test]
    fn energy_zero_on_identical_sets() {
        let a = ps(blob(300));
        let index = SpatialIndex::new(&a.points);
        for variant in [EnergyVariant::DirectedMean, EnergyVariant::DirectedMax, EnergyVariant::SymmetricMax] {
            let params = EnergyParams { variant, ..EnergyParams::default() };
            assert_eq!(energy(&a, &a.points, &index, &params), 0.0);
        }
    }

    #[test]
    fn symmetric_energy_is_symmetric() {
        let a = ps(blob(200));
        let b: Vec<Point3> = blob(150).iter().map(|p| p * 0.05 + Point3::new(0.01, 0.0, 0.0)).collect();
        let ia = SpatialIndex::new(&a.points);
        let ib = SpatialIndex::new(&b);
        let ab = energy_points(&a.points, &b, &ia, EnergyVariant::SymmetricMax);
        let ba = energy_points(&b, &a.points, &ib, EnergyVariant::SymmetricMax);
        assert_eq!(ab, ba);
    }

    #[test]
    fn grid_search_finds_exact_lattice_rotation() {
        let a = ps(blob(400));
        let grid = RotationGrid::new(PI / 6.0).unwrap();
        let mut b = a.clone();
        let r = rot_x(-PI / 6.0);
        b.points = a.points.iter().map(|p| r * p).collect();
        let found = grid_search(&a, &b, &grid, &EnergyParams::default());
        assert_eq!(grid.entry(found.best), [1, 0, 0]);
        assert!(found.best_energy() < 1e-12);
        assert_eq!(found.surface.len(), grid.len());

        let same = grid_search(&a, &a, &grid, &EnergyParams::default());
        assert_eq!(same.best, 0);
        assert_eq!(same.best_energy(), 0.0);
    }

    #[test]
    fn stride_order_is_a_permutation() {
        for n in [1, 2, 10, 300, 2000] {
            let mut o = stride_order(n);
            o.sort_unstable();
            assert_eq!(o, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn pruned_argmin_matches_full_surface() {
        let a = ps(blob(300));
        let grid = RotationGrid::new(PI / 4.0).unwrap();
        let index = SpatialIndex::new(&a.points);
        let b: Vec<Point3> = a.points.iter().map(|p| rot_y(1.0) * rot_x(0.4) * p).collect();
        for variant in [EnergyVariant::DirectedMean, EnergyVariant::DirectedMax] {
            let full = grid_search_indexed(&a.points, &index, &b, &grid, variant);
            let pruned = joint_argmin(&[&b], 0, &a.points, &index, &grid, variant, true);
            let exhaustive = joint_argmin(&[&b], 0, &a.points, &index, &grid, variant, false);
            assert_eq!(pruned, JointBest { completed: pruned.completed, ..exhaustive });
            assert_eq!(exhaustive.completed, grid.len());
            assert!(pruned.completed < grid.len());
            assert_eq!(pruned.rotation, full.best);
            assert_eq!(pruned.energy, full.best_energy());
        }
    }

    #[test]
    fn plateau_yields_one_minimum() {
        let surface = vec![0.5; 1728];
        assert_eq!(local_minima(&surface, 12, 5), vec![0]);
    }

    #[test]
    fn two_basins_yield_two_minima() {
        let n = 12;
        let centers = [[2usize, 3, 4], [8, 9, 10]];
        let dist = |a: usize, b: usize| {
            let d = a.abs_diff(b);
            d.min(n - d) as f64
        };
        let surface: Vec<f64> = (0..n * n * n)
            .map(|i| {
                let e = [i / (n * n), (i / n) % n, i % n];
                centers
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        (0..3).map(|a| dist(e[a], c[a]).powi(2)).sum::<f64>() + k as f64 * 0.1
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let grid = RotationGrid::new(PI / 6.0).unwrap();
        let minima = local_minima(&surface, n, 5);
        assert_eq!(minima, vec![grid.index_of([2, 3, 4]), grid.index_of([8, 9, 10])]);
        assert!(minima.contains(&ordered_argmin(&surface)));
    }

    #[test]
    fn local_minima_wrap_around() {
        let n = 12;
        let mut surface = vec![1.0; n * n * n];
        // minimum at 0 and a slightly higher value across the boundary
        surface[0] = 0.0;
        surface[11] = 0.1;
        let minima = local_minima(&surface, n, 5);
        assert_eq!(minima, vec![0]);
    }

    #[test]
    fn invalid_energy_params() {
        let bad = EnergyParams { kernel: 4, ..EnergyParams::default() };
        assert!(bad.validate().is_err());
        let bad = EnergyParams { threshold: 0.0, ..EnergyParams::default() };
        assert!(bad.validate().is_err());
        assert!(EnergyParams::default().validate().is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(6))]

            #[test]
            fn surface_ignores_point_order(seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let a = ps(blob(150));
                let grid = RotationGrid::new(PI / 3.0).unwrap();
                let b = ps(blob(120).iter().map(|p| rot_y(0.7) * p).collect());
                let mut shuffled = b.clone();
                shuffled.points.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let p = EnergyParams { variant: EnergyVariant::DirectedMax, ..EnergyParams::default() };
                let s1 = grid_search(&a, &b, &grid, &p);
                let s2 = grid_search(&a, &shuffled, &grid, &p);
                prop_assert_eq!(s1.surface, s2.surface);
                let m1 = grid_search(&a, &b, &grid, &EnergyParams::default());
                let m2 = grid_search(&a, &shuffled, &grid, &EnergyParams::default());
                for (x, y) in m1.surface.iter().zip(&m2.surface) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
