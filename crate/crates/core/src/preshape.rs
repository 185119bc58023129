//! Pre-shape normalization and ordered Procrustes alignment.
//!
//! A pre-shape is a configuration with translation and scale quotiented out:
//! the points are centred on their centroid and divided by the centroid
//! size. Rotation is left in and is resolved by search (see `align`).

use std::str::FromStr;

use nalgebra::Matrix3;

use crate::cloud::{centroid, Point3, PointCloud};
use crate::error::{Error, Result};

/// Size functional used to normalize scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleDef {
    /// `sqrt(sum |x_j - c|^2)`, the centroid size.
    #[default]
    Frobenius,
    /// `sqrt(sum |x_j - c|)`. Only homogeneous of degree 1/2 in the scale of
    /// the input, so clouds of different size do not normalize to the same
    /// pre-shape. Kept for comparison runs.
    AsPrinted,
}

impl ScaleDef {
    pub fn size(self, points: &[Point3], center: &Point3) -> f64 {
        match self {
            ScaleDef::Frobenius => points
                .iter()
                .map(|p| (p - center).norm_squared())
                .sum::<f64>()
                .sqrt(),
            ScaleDef::AsPrinted => points
                .iter()
                .map(|p| (p - center).norm())
                .sum::<f64>()
                .sqrt(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleDef::Frobenius => "frobenius",
            ScaleDef::AsPrinted => "as-printed",
        }
    }
}

impl FromStr for ScaleDef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" => Ok(ScaleDef::Frobenius),
            "as-printed" | "as_printed" => Ok(ScaleDef::AsPrinted),
            other => Err(Error::InvalidParams(format!("unknown scale definition `{other}`"))),
        }
    }
}

/// A translation- and scale-normalized point configuration together with
/// the centre and scale needed to map back to original units.
#[derive(Debug, Clone, PartialEq)]
pub struct PreShape {
    pub points: Vec<Point3>,
    pub centroid: Point3,
    pub scale: f64,
    pub source_name: String,
}

impl PreShape {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Normalizes `points` about an arbitrary `center` (the centroid for a
    /// plain pre-shape).
    pub fn about_center(
        points: &[Point3],
        center: Point3,
        scale_def: ScaleDef,
        name: &str,
    ) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegenerateCloud(format!(
                "{name}: pre-shape needs at least 2 points"
            )));
        }
        let scale = scale_def.size(points, &center);
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::DegenerateCloud(format!(
                "{name}: zero size about the centre"
            )));
        }
        Ok(Self {
            points: points.iter().map(|p| (p - center) / scale).collect(),
            centroid: center,
            scale,
            source_name: name.to_string(),
        })
    }

    /// Maps normalized coordinates back to original units.
    pub fn denormalize(&self, p: &Point3) -> Point3 {
        p * self.scale + self.centroid
    }
}

pub fn to_preshape(cloud: &PointCloud) -> Result<PreShape> {
    to_preshape_with(cloud, ScaleDef::default())
}

pub fn to_preshape_with(cloud: &PointCloud, scale_def: ScaleDef) -> Result<PreShape> {
    let pts = cloud.points();
    PreShape::about_center(pts, centroid(pts), scale_def, cloud.name())
}

/// `points * s + centre`, as a cloud named after the pre-shape's source.
pub fn from_preshape(ps: &PreShape, points: &[Point3]) -> Result<PointCloud> {
    PointCloud::new(
        points.iter().map(|p| ps.denormalize(p)).collect(),
        ps.source_name.clone(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcrustesResult {
    /// Angle between the aligned pre-shapes, radians in `[0, pi]`.
    pub distance: f64,
    /// Rotation taking `a` onto `b`.
    pub rotation: Matrix3<f64>,
}

/// Rotation `R` (det +1) maximizing `sum_j y_j . (R x_j)` for
/// `h = sum_j y_j x_j^T`, and the maximized value.
///
/// When the unconstrained optimum would be a reflection, the direction of
/// the smallest singular value is flipped.
pub fn kabsch_rotation(h: &Matrix3<f64>) -> (Matrix3<f64>, f64) {
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let sv = svd.singular_values;
    let mut trace = sv.sum();
    let mut rotation = u * v_t;
    if rotation.determinant() < 0.0 {
        let smallest = sv.imin();
        let mut flip = Matrix3::identity();
        flip[(smallest, smallest)] = -1.0;
        rotation = u * flip * v_t;
        trace -= 2.0 * sv[smallest];
    }
    (rotation, trace)
}

/// Ordered Procrustes analysis between two pre-shapes with index
/// correspondence.
pub fn procrustes(a: &PreShape, b: &PreShape) -> Result<ProcrustesResult> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let h = a
        .points
        .iter()
        .zip(&b.points)
        .fold(Matrix3::zeros(), |acc, (x, y)| acc + y * x.transpose());
    let (rotation, trace) = kabsch_rotation(&h);
    Ok(ProcrustesResult {
        distance: trace.clamp(-1.0, 1.0).acos(),
        rotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::{rotation_defect, EulerZyx};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.0..3.0),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        PointCloud::new(pts, "r").unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        use std::f64::consts::PI;
        EulerZyx {
            x: rng.random_range(-PI..PI),
            y: rng.random_range(-PI..PI),
            z: rng.random_range(-PI..PI),
        }
        .matrix()
    }

    fn max_delta(a: &[Point3], b: &[Point3]) -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q).amax()).fold(0.0, f64::max)
    }

    #[test]
    fn two_point_hand_values() {
        let cloud =
            PointCloud::new(vec![Point3::zeros(), Point3::new(2.0, 0.0, 0.0)], "pair").unwrap();
        let ps = to_preshape(&cloud).unwrap();
        assert_eq!(ps.centroid, Point3::new(1.0, 0.0, 0.0));
        assert!((ps.scale - 2f64.sqrt()).abs() < 1e-15);
        let h = 1.0 / 2f64.sqrt();
        assert!((ps.points[0] - Point3::new(-h, 0.0, 0.0)).norm() < 1e-15);
        assert!((ps.points[1] - Point3::new(h, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn degenerate_cloud_rejected() {
        let cloud = PointCloud::new(vec![Point3::new(1.0, 2.0, 3.0); 4], "dup").unwrap();
        assert!(matches!(to_preshape(&cloud), Err(Error::DegenerateCloud(_))));
        let single = PointCloud::new(vec![Point3::zeros()], "one").unwrap();
        assert!(to_preshape(&single).is_err());
    }

    #[test]
    fn stored_points_are_centred_and_unit_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ps = to_preshape(&random_cloud(&mut rng, 500)).unwrap();
        let c = centroid(&ps.points);
        assert!(c.amax() < 1e-9);
        let s = ScaleDef::Frobenius.size(&ps.points, &Point3::zeros());
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn round_trip_through_preshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let cloud = random_cloud(&mut rng, 50);
            let ps = to_preshape(&cloud).unwrap();
            let back = from_preshape(&ps, &ps.points).unwrap();
            assert!(max_delta(back.points(), cloud.points()) < 1e-9);
        }
    }

    #[test]
    fn identity_on_normalized_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ps = to_preshape(&random_cloud(&mut rng, 30)).unwrap();
        let again = PreShape::about_center(&ps.points, centroid(&ps.points), ScaleDef::Frobenius, "n")
            .unwrap();
        assert!(max_delta(&again.points, &ps.points) < 1e-12);
        let back = from_preshape(&again, &again.points).unwrap();
        assert!(max_delta(back.points(), &ps.points) < 1e-12);
    }

    #[test]
    fn procrustes_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ps = to_preshape(&random_cloud(&mut rng, 40)).unwrap();
        let r = procrustes(&ps, &ps).unwrap();
        assert!(r.distance < 1e-6);
        assert!((r.rotation - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn procrustes_recovers_known_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let a = to_preshape(&random_cloud(&mut rng, 60)).unwrap();
            let rot = random_rotation(&mut rng);
            let mut b = a.clone();
            b.points = a.points.iter().map(|p| rot * p).collect();
            let r = procrustes(&a, &b).unwrap();
            assert!((r.rotation - rot).norm() < 1e-6);
            assert!(r.distance < 1e-6);
        }
    }

    #[test]
    fn procrustes_mirrored_input_stays_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = to_preshape(&random_cloud(&mut rng, 60)).unwrap();
        let mut b = a.clone();
        b.points = a.points.iter().map(|p| Point3::new(-p.x, p.y, p.z)).collect();
        let r = procrustes(&a, &b).unwrap();
        assert!((r.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!(rotation_defect(&r.rotation) < 1e-9);
        assert!(r.distance > 1e-3);
    }

    #[test]
    fn size_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = to_preshape(&random_cloud(&mut rng, 10)).unwrap();
        let b = to_preshape(&random_cloud(&mut rng, 11)).unwrap();
        assert!(matches!(procrustes(&a, &b), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn as_printed_scale_is_not_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let cloud = random_cloud(&mut rng, 40);
        let big = PointCloud::new(cloud.points().iter().map(|p| p * 4.0).collect(), "big").unwrap();
        let a = to_preshape_with(&cloud, ScaleDef::AsPrinted).unwrap();
        let b = to_preshape_with(&big, ScaleDef::AsPrinted).unwrap();
        // size grows like sqrt(4) = 2, so normalized points double
        assert!((b.scale / a.scale - 2.0).abs() < 1e-12);
        assert!((b.points[0] - a.points[0] * 2.0).norm() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn translation_and_scale_invariance(
                seed in any::<u64>(),
                n in 2usize..200,
                scale in 0.01f64..100.0,
                t in proptest::array::uniform3(-1e3f64..1e3),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cloud = random_cloud(&mut rng, n);
                let shift = Point3::from(t);
                let moved = PointCloud::new(
                    cloud.points().iter().map(|p| p * scale + shift).collect(), "m").unwrap();
                let a = to_preshape(&cloud).unwrap();
                let b = to_preshape(&moved).unwrap();
                prop_assert!(max_delta(&a.points, &b.points) < 1e-9);
                prop_assert!((b.scale / a.scale - scale).abs() < 1e-9 * scale);
            }

            #[test]
            fn rotation_equivariance(seed in any::<u64>(), n in 2usize..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cloud = random_cloud(&mut rng, n);
                let rot = random_rotation(&mut rng);
                let turned = PointCloud::new(cloud.points().iter().map(|p| rot * p).collect(), "t").unwrap();
                let a = to_preshape(&cloud).unwrap();
                let b = to_preshape(&turned).unwrap();
                let ra: Vec<Point3> = a.points.iter().map(|p| rot * p).collect();
                prop_assert!(max_delta(&ra, &b.points) < 1e-9);
            }

            #[test]
            fn distance_is_symmetric(seed in any::<u64>(), n in 3usize..100) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = to_preshape(&random_cloud(&mut rng, n)).unwrap();
                let b = to_preshape(&random_cloud(&mut rng, n)).unwrap();
                let ab = procrustes(&a, &b).unwrap().distance;
                let ba = procrustes(&b, &a).unwrap().distance;
                prop_assert!((ab - ba).abs() < 1e-9);
                prop_assert!((0.0..=std::f64::consts::PI).contains(&ab));
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(8))]

            #[test]
            fn procrustes_beats_random_rotations(seed in any::<u64>(), n in 3usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = to_preshape(&random_cloud(&mut rng, n)).unwrap();
                let b = to_preshape(&random_cloud(&mut rng, n)).unwrap();
                let best = procrustes(&a, &b).unwrap();
                // the angle between a and O.b for a rotation O; procrustes is
                // the infimum over SO(3)
                for _ in 0..1000 {
                    let o = random_rotation(&mut rng);
                    let dot: f64 = a.points.iter().zip(&b.points).map(|(x, y)| x.dot(&(o * y))).sum();
                    prop_assert!(best.distance <= dot.clamp(-1.0, 1.0).acos() + 1e-9);
                }
            }
        }
    }
}
