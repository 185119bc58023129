//! Point-to-point ICP.

use crate::cloud::{centroid, Point3};
use crate::error::{Error, Result};
use crate::index::SpatialIndex;
use crate::preshape::{kabsch_rotation, PreShape};
use crate::transform::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop once the relative drop in mean squared correspondence distance
    /// falls below this.
    pub convergence_eps: f64,
    /// Correspondences longer than this are discarded. `None` keeps all.
    pub reject_distance: Option<f64>,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            convergence_eps: 1e-7,
            reject_distance: None,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidParams("ICP needs at least one iteration".into()));
        }
        if !(self.convergence_eps > 0.0) {
            return Err(Error::InvalidParams("ICP convergence eps must be > 0".into()));
        }
        if let Some(d) = self.reject_distance {
            if !(d > 0.0) {
                return Err(Error::InvalidParams("ICP reject distance must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Accumulated transform, including the initial guess.
    pub transform: RigidTransform,
    /// Mean squared nearest-neighbour distance under `transform`.
    pub mse: f64,
    /// Number of correspondence passes.
    pub iterations: usize,
    /// MSE of every pass, non-increasing without a reject distance.
    pub history: Vec<f64>,
}

/// Least-squares rigid transform taking `from[i]` onto `to[i]`.
pub fn fit_rigid(from: &[Point3], to: &[Point3]) -> RigidTransform {
    debug_assert_eq!(from.len(), to.len());
    let cf = centroid(from);
    let ct = centroid(to);
    let h = from
        .iter()
        .zip(to)
        .fold(nalgebra::Matrix3::zeros(), |acc, (x, y)| {
            acc + (y - ct) * (x - cf).transpose()
        });
    let (rotation, _) = kabsch_rotation(&h);
    RigidTransform {
        rotation,
        translation: ct - rotation * cf,
    }
}

pub fn icp_align(
    source: &PreShape,
    target: &PreShape,
    target_index: &SpatialIndex,
    params: &IcpParams,
) -> Result<IcpResult> {
    if target_index.len() != target.len() {
        return Err(Error::SizeMismatch {
            left: target.len(),
            right: target_index.len(),
        });
    }
    icp_from(&source.points, &target.points, target_index, params, RigidTransform::identity())
}

/// ICP of `source` onto the indexed `target` starting from `init`.
pub fn icp_from(
    source: &[Point3],
    target: &[Point3],
    target_index: &SpatialIndex,
    params: &IcpParams,
    init: RigidTransform,
) -> Result<IcpResult> {
    params.validate()?;
    if source.len() < 3 || target.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "ICP needs at least 3 points per side, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let reject2 = params.reject_distance.map(|d| d * d);
    let mut current = init;
    let mut history = Vec::new();
    let mut from = Vec::with_capacity(source.len());
    let mut to = Vec::with_capacity(source.len());
    loop {
        from.clear();
        to.clear();
        let mut sum = 0.0;
        for p in source {
            let q = current.apply(p);
            let (j, d2) = target_index.nearest(&q);
            if reject2.is_some_and(|r| d2 > r) {
                continue;
            }
            sum += d2;
            from.push(q);
            to.push(target[j]);
        }
        if from.len() < 3 {
            return Err(Error::DegenerateInput(format!(
                "only {} correspondences survived rejection",
                from.len()
            )));
        }
        let mse = sum / from.len() as f64;
        let previous = history.last().copied();
        history.push(mse);
        let converged = mse == 0.0
            || previous.is_some_and(|prev: f64| (prev - mse) <= params.convergence_eps * prev);
        if converged || history.len() >= params.max_iterations {
            return Ok(IcpResult {
                transform: current,
                mse,
                iterations: history.len(),
                history,
            });
        }
        let step = fit_rigid(&from, &to);
        current = step.compose(&current);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::PointCloud;
    use crate::preshape::to_preshape;
    use crate::transform::{rot_z, rotation_angle_between, rotation_defect, EulerZyx};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random points on an ellipsoid with a bump, so no rotational symmetry.
    fn blob(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = loop {
                    let v = Point3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    if v.norm() > 0.1 && v.norm() < 1.0 {
                        break v.normalize();
                    }
                };
                let bump = 1.0 + 0.6 * (-(v - Point3::new(0.6, 0.6, 0.5)).norm_squared() * 4.0).exp();
                Point3::new(1.6 * v.x, 1.0 * v.y, 0.7 * v.z) * bump
            })
            .collect()
    }

    fn preshape_of(points: Vec<Point3>) -> PreShape {
        to_preshape(&PointCloud::new(points, "b").unwrap()).unwrap()
    }

    #[test]
    fn identical_clouds_converge_immediately() {
        let ps = preshape_of(blob(500, 1));
        let index = SpatialIndex::new(&ps.points);
        let r = icp_align(&ps, &ps, &index, &IcpParams::default()).unwrap();
        assert_eq!(r.transform, RigidTransform::identity());
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn recovers_small_rotation() {
        let target = preshape_of(blob(3000, 2));
        let rot = rot_z(10f64.to_radians());
        let mut source = target.clone();
        source.points = target.points.iter().map(|p| rot * p).collect();
        let index = SpatialIndex::new(&target.points);
        let r = icp_align(&source, &target, &index, &IcpParams::default()).unwrap();
        let err = rotation_angle_between(&r.transform.rotation, &rot.transpose());
        assert!(err.to_degrees() < 0.5, "rotation error {}", err.to_degrees());
        assert!(r.mse < 1e-8, "mse {}", r.mse);
    }

    #[test]
    fn large_rotation_gets_trapped() {
        let target = preshape_of(blob(3000, 3));
        let rot = rot_z(170f64.to_radians());
        let mut source = target.clone();
        source.points = target.points.iter().map(|p| rot * p).collect();
        let index = SpatialIndex::new(&target.points);
        let r = icp_align(&source, &target, &index, &IcpParams::default()).unwrap();
        // pre-shape points have norm ~1/sqrt(n); 1e-6 is far above the
        // residual of a correct alignment
        assert!(r.mse > 1e-6, "mse {}", r.mse);
        let err = rotation_angle_between(&r.transform.rotation, &rot.transpose());
        assert!(err.to_degrees() > 10.0);
    }

    #[test]
    fn fit_rigid_exact_on_clean_pairs() {
        let pts = blob(50, 4);
        let t = RigidTransform {
            rotation: EulerZyx { x: 0.3, y: 1.2, z: -2.0 }.matrix(),
            translation: Point3::new(0.5, -1.0, 2.0),
        };
        let moved: Vec<Point3> = pts.iter().map(|p| t.apply(p)).collect();
        let fit = fit_rigid(&pts, &moved);
        assert!((fit.rotation - t.rotation).abs().max() < 1e-9);
        assert!((fit.translation - t.translation).abs().max() < 1e-9);
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let tiny = vec![Point3::zeros(), Point3::x()];
        let index = SpatialIndex::new(&tiny);
        assert!(matches!(
            icp_from(&tiny, &tiny, &index, &IcpParams::default(), RigidTransform::identity()),
            Err(Error::DegenerateInput(_))
        ));
        let pts = blob(20, 5);
        let index = SpatialIndex::new(&pts);
        let bad = IcpParams {
            max_iterations: 0,
            ..IcpParams::default()
        };
        assert!(icp_from(&pts, &pts, &index, &bad, RigidTransform::identity()).is_err());
        let gate = IcpParams {
            reject_distance: Some(1e-9),
            ..IcpParams::default()
        };
        let far: Vec<Point3> = pts.iter().map(|p| p + Point3::new(10.0, 0.0, 0.0)).collect();
        assert!(matches!(
            icp_from(&far, &pts, &index, &gate, RigidTransform::identity()),
            Err(Error::DegenerateInput(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn mse_non_increasing_and_rigid(seed in any::<u64>(), angle in 0.0f64..3.1) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let target = preshape_of(blob(400, seed));
                let axis = Point3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1).normalize();
                let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
                let source: Vec<Point3> = blob(400, seed ^ 0xdead).iter().map(|p| rot * p).collect();
                let source = preshape_of(source);
                let index = SpatialIndex::new(&target.points);
                let params = IcpParams { max_iterations: 30, ..IcpParams::default() };
                let r = icp_align(&source, &target, &index, &params).unwrap();
                for w in r.history.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12);
                }
                // truncating the run exposes the transform held after each pass
                for m in 1..=r.iterations {
                    let cut = IcpParams { max_iterations: m, ..params };
                    let step = icp_align(&source, &target, &index, &cut).unwrap();
                    prop_assert!(rotation_defect(&step.transform.rotation) < 1e-9);
                    prop_assert_eq!(step.mse, r.history[m - 1]);
                }
                let again = icp_align(&source, &target, &index, &params).unwrap();
                prop_assert_eq!(again, r);
            }
        }
    }
}
