//! Synthetic fixtures shared by the integration tests.

#![allow(dead_code)]

use kss_core::{Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_vector(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v = Point3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// A closed, bumpy, anisotropic surface with no rotational symmetry.
/// `id` selects the shape, `n` the number of surface samples.
pub fn shape(id: u64, n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + id);
    let axes = Point3::new(
        rng.random_range(1.2..2.0),
        rng.random_range(0.8..1.2),
        rng.random_range(0.4..0.8),
    );
    let bumps: Vec<(Point3, f64, f64)> = (0..4)
        .map(|_| (unit_vector(&mut rng), rng.random_range(0.25..0.6), rng.random_range(3.0..8.0)))
        .collect();
    let twist = rng.random_range(-0.4..0.4);
    let points = (0..n)
        .map(|_| {
            let v = unit_vector(&mut rng);
            let r = 1.0
                + bumps
                    .iter()
                    .map(|(c, h, w)| h * (-(v - c).norm_squared() * w).exp())
                    .sum::<f64>();
            let p = v.component_mul(&axes) * r;
            let a = twist * p.z;
            Point3::new(p.x * a.cos() - p.y * a.sin(), p.x * a.sin() + p.y * a.cos(), p.z)
        })
        .collect();
    PointCloud::new(points, format!("shape{id}")).unwrap()
}

/// Surface samples of an axis-aligned cube of edge 2 centred at the origin.
pub fn cube(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let face = rng.random_range(0..6);
            let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => Point3::new(s, a, b),
                1 => Point3::new(a, s, b),
                _ => Point3::new(a, b, s),
            }
        })
        .collect();
    PointCloud::new(points, "cube").unwrap()
}

/// Keeps the points whose coordinate along `axis` lies outside the slab
/// holding the top `fraction` of the extent.
pub fn slab_deleted(cloud: &PointCloud, axis: usize, fraction: f64) -> PointCloud {
    let bb = cloud.bounding_box();
    let cut = bb.max[axis] - fraction * (bb.max[axis] - bb.min[axis]);
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| cloud.points()[i][axis] < cut).collect();
    cloud.select(&keep).unwrap()
}

/// Surface samples of an axis-aligned box with corners `lo` and `hi`.
pub fn box_surface(n: usize, lo: Point3, hi: Point3, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let e = hi - lo;
    let areas = [e.y * e.z, e.x * e.z, e.x * e.y];
    let total = 2.0 * areas.iter().sum::<f64>();
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 0;
            while pick >= 2.0 * areas[axis] && axis < 2 {
                pick -= 2.0 * areas[axis];
                axis += 1;
            }
            let side = if pick < areas[axis] { lo[axis] } else { hi[axis] };
            let mut p = Point3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            p[axis] = side;
            p
        })
        .collect()
}

/// The cube of [`cube`] with a small tab on its top face, which leaves
/// a single correct orientation among the cube's 24.
pub fn tabbed_cube(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tab = n / 12;
    let mut points = cube(n - tab, seed ^ 0x7ab).into_points();
    points.extend(box_surface(
        tab,
        Point3::new(0.2, 0.2, 1.0),
        Point3::new(0.8, 0.8, 1.5),
        &mut rng,
    ));
    PointCloud::new(points, "tabbed_cube").unwrap()
}
