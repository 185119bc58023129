//! Registration of an incomplete scan against a complete cloud.
//!
//! Missing geometry drags the centroid of the partial scan away from where
//! the complete shape would put it. The search therefore also varies the
//! centre used to normalize the partial cloud, over a 5x5x5 lattice laid
//! out in a frame derived from the scan itself.

use std::time::Instant;

use log::debug;
use nalgebra::Matrix3;

use crate::align::{
    additional_process, joint_argmin, ms, refine, similarity_from, simplify_pair, AlignmentResult,
    EnergyParams, EnergyVariant, JointBest, RegisterConfig, RotationGrid, StageTimings,
};
use crate::cloud::{centroid, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::parallel::with_threads;
use crate::preshape::{to_preshape_with, PreShape, ScaleDef};

/// Minimum angle between `p_x - c_r` and the Y line.
const COLLINEAR_TOLERANCE_DEG: f64 = 5.0;

/// Lattice steps per axis on each side of the centre.
const HALF_STEPS: i32 = 2;

pub const CENTER_COUNT: usize = 125;

/// Index of the unshifted centre in a [`CenterSet`].
pub const ORIGIN_CENTER: usize = 62;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin: Point3,
    pub x: Point3,
    pub y: Point3,
    pub z: Point3,
    /// Half-width of the centre search box.
    pub r_s: f64,
    pub p_y: Point3,
    pub p_x: Point3,
}

impl LocalFrame {
    /// Columns are the X, Y, Z axes.
    pub fn axes(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.x, self.y, self.z])
    }

    /// Coordinates of `p` relative to the frame.
    pub fn to_local(&self, p: &Point3) -> Point3 {
        self.axes().transpose() * (p - self.origin)
    }
}

/// Frame of a cloud: Y towards the point farthest from the centroid, Z
/// normal to the plane spanned with the nearest non-collinear point.
pub fn local_frame(cloud: &PointCloud) -> Result<LocalFrame> {
    local_frame_of(cloud.points())
}

pub(crate) fn local_frame_of(points: &[Point3]) -> Result<LocalFrame> {
    let c = centroid(points);
    let mut far = 0;
    let mut far_d = -1.0;
    for (i, p) in points.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d > far_d {
            far = i;
            far_d = d;
        }
    }
    let p_y = points[far];
    if !(far_d > 0.0) {
        return Err(Error::DegenerateFrame("all points coincide".into()));
    }
    let y = (p_y - c).normalize();
    let max_cos = COLLINEAR_TOLERANCE_DEG.to_radians().cos();
    let mut near: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let v = p - c;
        let d = v.norm_squared();
        if d == 0.0 || (v.dot(&y) / d.sqrt()).abs() >= max_cos {
            continue;
        }
        if near.is_none_or(|(_, best)| d < best) {
            near = Some((i, d));
        }
    }
    let Some((near, _)) = near else {
        return Err(Error::DegenerateFrame(format!(
            "every point lies within {COLLINEAR_TOLERANCE_DEG} degrees of the Y line"
        )));
    };
    let p_x = points[near];
    let z = (p_x - c).cross(&(p_y - c)).normalize();
    let x = y.cross(&z);
    Ok(LocalFrame {
        origin: c,
        x,
        y,
        z,
        r_s: far_d.sqrt() / 4.0,
        p_y,
        p_x,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterSet {
    /// Indexed `(nx+2)*25 + (ny+2)*5 + (nz+2)` for steps `n` in `-2..=2`.
    pub centers: Vec<Point3>,
    pub steps: Vec<[i32; 3]>,
}

impl CenterSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

pub fn candidate_centers(frame: &LocalFrame) -> CenterSet {
    let unit = frame.r_s / 2.0;
    let mut centers = Vec::with_capacity(CENTER_COUNT);
    let mut steps = Vec::with_capacity(CENTER_COUNT);
    for nx in -HALF_STEPS..=HALF_STEPS {
        for ny in -HALF_STEPS..=HALF_STEPS {
            for nz in -HALF_STEPS..=HALF_STEPS {
                let offset = frame.x * (nx as f64 * unit)
                    + frame.y * (ny as f64 * unit)
                    + frame.z * (nz as f64 * unit);
                centers.push(frame.origin + offset);
                steps.push([nx, ny, nz]);
            }
        }
    }
    CenterSet { centers, steps }
}

/// Pre-shape of `cloud` normalized about `center` instead of its centroid.
pub fn recenter_preshape(cloud: &PointCloud, center: Point3, scale_def: ScaleDef) -> Result<PreShape> {
    PreShape::about_center(cloud.points(), center, scale_def, cloud.name())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    /// Abandon a candidate once its running sum exceeds the best total.
    Pruned,
    Exhaustive,
}

/// Joint `(centre, rotation)` argmin of the directed mean energy of the
/// recentred partial pre-shapes into the complete one. The unshifted centre
/// is scored first.
pub fn joint_search(
    moving: &[PreShape],
    fixed: &[Point3],
    fixed_index: &SpatialIndex,
    grid: &RotationGrid,
    mode: SearchMode,
) -> JointBest {
    let sets: Vec<&[Point3]> = moving.iter().map(|m| m.points.as_slice()).collect();
    let first = if moving.len() > ORIGIN_CENTER { ORIGIN_CENTER } else { 0 };
    joint_argmin(
        &sets,
        first,
        fixed,
        fixed_index,
        grid,
        EnergyVariant::DirectedMean,
        mode == SearchMode::Pruned,
    )
}

/// Registers a partial `source` scan onto a complete `target`.
pub fn register_partial(
    source: &PointCloud,
    target: &PointCloud,
    config: &RegisterConfig,
) -> Result<AlignmentResult> {
    register_partial_with(source, target, config, SearchMode::Pruned)
}

pub fn register_partial_with(
    source: &PointCloud,
    target: &PointCloud,
    config: &RegisterConfig,
    mode: SearchMode,
) -> Result<AlignmentResult> {
    config.validate()?;
    with_threads(config.threads, || partial_inner(source, target, config, mode))
}

fn partial_inner(
    source: &PointCloud,
    target: &PointCloud,
    config: &RegisterConfig,
    mode: SearchMode,
) -> Result<AlignmentResult> {
    let start = Instant::now();
    let (src, tgt) = simplify_pair(source, target, config.k)?;
    let frame = local_frame(&src)?;
    let centers = candidate_centers(&frame);
    let moving = centers
        .centers
        .iter()
        .map(|c| recenter_preshape(&src, *c, config.scale_def))
        .collect::<Result<Vec<_>>>()?;
    let tgt_ps = to_preshape_with(&tgt, config.scale_def)?;
    let simplify_ms = ms(start);

    let t = Instant::now();
    let grid = RotationGrid::new(config.theta)?;
    let index = SpatialIndex::new(&tgt_ps.points);
    let best = joint_search(&moving, &tgt_ps.points, &index, &grid, mode);
    debug!(
        "joint search: centre {} rotation {} ({} of {} candidates completed)",
        best.set,
        best.rotation,
        best.completed,
        moving.len() * grid.len()
    );
    let grid_ms = ms(t);

    let t = Instant::now();
    let src_ps = &moving[best.set];
    let o_init = *grid.rotation(best.rotation);
    let variant = EnergyVariant::DirectedMean;
    let plain = refine(&src_ps.points, &tgt_ps.points, &index, &o_init, &config.icp, variant)?;
    let energy_icp = plain.energy;
    let mut chosen = plain;
    let mut used_additional_process = false;
    let mut local_minima = 0;
    if config.additional_process && energy_icp > config.energy.threshold {
        used_additional_process = true;
        let energy = EnergyParams {
            variant,
            ..config.energy
        };
        let (count, better) = additional_process(
            &src_ps.points,
            &tgt_ps.points,
            &index,
            &grid,
            &config.icp,
            &energy,
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
        o_init_entry: grid.entry(best.rotation),
        o_r: transform.rotation,
        translation: transform.translation,
        energy_init: best.energy,
        energy_icp,
        energy: chosen.energy,
        icp_mse: chosen.icp.mse,
        icp_iterations: chosen.icp.iterations,
        similarity: similarity_from(src_ps, &tgt_ps, &transform),
        used_additional_process,
        local_minima,
        candidate_center: Some(centers.centers[best.set]),
        frame: Some(frame),
        theta: grid.step(),
        timings: StageTimings {
            simplify_ms,
            grid_ms,
            icp_ms,
            total_ms: ms(start),
        },
    })
}
