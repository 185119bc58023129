//! Exact nearest-neighbour queries over a fixed point set.
//!
//! A median-split kd-tree with small leaf buckets. Queries are exact and
//! ties are resolved towards the lowest original point index, so results are
//! identical to a brute-force scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::cloud::{centroid, Point3, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { axis: u8, value: f64, left: u32, right: u32 },
}

/// Immutable kd-tree over a point set. `Sync`, so one index can serve many
/// threads.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<[f64; 3]>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
struct Best {
    d2: f64,
    id: u32,
}

impl Best {
    #[inline]
    fn offer(&mut self, d2: f64, id: u32) {
        if d2 < self.d2 || (d2 == self.d2 && id < self.id) {
            self.d2 = d2;
            self.id = id;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapItem {
    d2: f64,
    id: u32,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    pub fn new(points: &[Point3]) -> Self {
        assert!(!points.is_empty(), "spatial index over an empty point set");
        assert!(points.len() < u32::MAX as usize);
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build(points, &mut order, 0, &mut nodes);
        let reordered = order
            .iter()
            .map(|&i| {
                let p = points[i as usize];
                [p.x, p.y, p.z]
            })
            .collect();
        Self {
            points: reordered,
            ids: order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the closest point to `q`.
    #[inline]
    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        let q = [q.x, q.y, q.z];
        let mut best = Best {
            d2: f64::INFINITY,
            id: u32::MAX,
        };
        self.search_nearest(0, &q, 0.0, &mut [0.0; 3], &mut best);
        (best.id as usize, best.d2)
    }

    /// Euclidean distance from `q` to the point set.
    #[inline]
    pub fn distance(&self, q: &Point3) -> f64 {
        self.nearest(q).1.sqrt()
    }

    /// Nearest-point search that descends with the squared distance `rd`
    /// from `q` to the current cell, kept per axis in `off`.
    fn search_nearest(&self, node: usize, q: &[f64; 3], rd: f64, off: &mut [f64; 3], best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start as usize..end as usize {
                    let p = &self.points[i];
                    let dx = q[0] - p[0];
                    let dy = q[1] - p[1];
                    let dz = q[2] - p[2];
                    best.offer(dx * dx + dy * dy + dz * dz, self.ids[i]);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let a = axis as usize;
                let diff = q[a] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_nearest(near as usize, q, rd, off, best);
                let old = off[a];
                let far_rd = rd - old * old + diff * diff;
                if far_rd <= best.d2 {
                    off[a] = diff;
                    self.search_nearest(far as usize, q, far_rd, off, best);
                    off[a] = old;
                }
            }
        }
    }

    /// The `k` closest points as `(index, squared distance)`, sorted by
    /// distance then index.
    pub fn k_nearest(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        let q = [q.x, q.y, q.z];
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search_k(0, &q, k, &mut heap);
        let mut out: Vec<_> = heap.into_vec();
        out.sort();
        out.into_iter().map(|h| (h.id as usize, h.d2)).collect()
    }

    fn search_k(&self, node: usize, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<HeapItem>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start as usize..end as usize {
                    let p = &self.points[i];
                    let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
                    let item = HeapItem { d2, id: self.ids[i] };
                    if heap.len() < k {
                        heap.push(item);
                    } else if item < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(item);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_k(near as usize, q, k, heap);
                let worst = if heap.len() < k {
                    f64::INFINITY
                } else {
                    heap.peek().map_or(f64::INFINITY, |h| h.d2)
                };
                if diff * diff <= worst {
                    self.search_k(far as usize, q, k, heap);
                }
            }
        }
    }
}

fn build(points: &[Point3], order: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + order.len()) as u32,
        });
        return id;
    }
    let mut lo = points[order[0] as usize];
    let mut hi = lo;
    for &i in order.iter() {
        lo = lo.inf(&points[i as usize]);
        hi = hi.sup(&points[i as usize]);
    }
    let axis = (hi - lo).imax();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    let value = points[order[mid] as usize][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = order.split_at_mut(mid);
    let left = build(points, l, offset, nodes);
    let right = build(points, r, offset + mid, nodes);
    nodes[id as usize] = Node::Split {
        axis: axis as u8,
        value,
        left,
        right,
    };
    id
}

/// Distances to a point set sampled at the centres of a regular grid. By
/// the triangle inequality `d(q) >= d(c) - |q - c|` for any centre `c`,
/// which gives a constant-time lower bound on the exact distance.
#[derive(Debug, Clone)]
pub struct DistanceBound {
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    dist: Vec<f64>,
}

impl DistanceBound {
    /// Grid over the bounding box of `points` with `resolution` cells along
    /// its longest edge.
    pub fn new(points: &[Point3], index: &SpatialIndex, resolution: usize) -> Self {
        let lo = points.iter().fold(points[0], |a, p| a.inf(p));
        let hi = points.iter().fold(points[0], |a, p| a.sup(p));
        let extent = hi - lo;
        let cell = (extent.max() / resolution.max(1) as f64).max(f64::MIN_POSITIVE);
        let dims = [0, 1, 2].map(|a| ((extent[a] / cell).ceil() as usize).max(1));
        let origin = lo;
        let centres: Vec<Point3> = (0..dims[0] * dims[1] * dims[2])
            .map(|i| {
                let (x, y, z) = (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]);
                origin + Point3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * cell
            })
            .collect();
        let dist = centres.par_iter().map(|c| index.distance(c)).collect();
        Self {
            origin,
            cell,
            dims,
            dist,
        }
    }

    /// A value no larger than the distance from `q` to the point set.
    #[inline]
    pub fn lower(&self, q: &Point3) -> f64 {
        let mut i = [0usize; 3];
        for a in 0..3 {
            let t = ((q[a] - self.origin[a]) / self.cell).floor();
            i[a] = t.clamp(0.0, (self.dims[a] - 1) as f64) as usize;
        }
        let c = self.origin
            + Point3::new(i[0] as f64 + 0.5, i[1] as f64 + 0.5, i[2] as f64 + 0.5) * self.cell;
        let d = self.dist[(i[0] * self.dims[1] + i[1]) * self.dims[2] + i[2]];
        (d - (q - c).norm()).max(0.0)
    }
}

pub fn build_index(cloud: &PointCloud) -> SpatialIndex {
    SpatialIndex::new(cloud.points())
}

/// Mean over all points of the mean distance to their `k` nearest neighbours
/// (the point itself excluded).
pub fn average_knn_distance(cloud: &PointCloud, k: usize) -> Result<f64> {
    average_knn_distance_with(cloud.points(), &build_index(cloud), k)
}

pub(crate) fn average_knn_distance_with(
    points: &[Point3],
    index: &SpatialIndex,
    k: usize,
) -> Result<f64> {
    if k == 0 || points.len() <= k {
        return Err(Error::TooFewPoints {
            needed: k + 1,
            got: points.len(),
        });
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let sum: f64 = index
                .k_nearest(p, k + 1)
                .into_iter()
                .filter(|&(j, _)| j != i)
                .take(k)
                .map(|(_, d2)| d2.sqrt())
                .sum();
            sum / k as f64
        })
        .sum();
    Ok(total / points.len() as f64)
}

/// PCA normals over the `k` nearest neighbours (self included), each flipped
/// to point away from the cloud centroid.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<Vec<Point3>> {
    let points = cloud.points();
    if points.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let index = build_index(cloud);
    let center = centroid(points);
    let k = k.max(3).min(points.len());
    Ok(points
        .iter()
        .map(|p| {
            let nbrs = index.k_nearest(p, k);
            let local: Vec<Point3> = nbrs.iter().map(|&(j, _)| points[j]).collect();
            let mean = centroid(&local);
            let cov = local.iter().fold(Matrix3::zeros(), |acc, q| {
                let d = q - mean;
                acc + d * d.transpose()
            });
            let eig = SymmetricEigen::new(cov);
            let smallest = eig.eigenvalues.imin();
            let mut n: Point3 = eig.eigenvectors.column(smallest).into_owned();
            let norm = n.norm();
            n = if norm > 0.0 && norm.is_finite() { n / norm } else { Point3::z() };
            if n.dot(&(p - center)) < 0.0 {
                n = -n;
            }
            n
        })
        .collect())
}

/// Returns the cloud's normals, estimating them when absent.
pub fn normals_or_estimate(cloud: &PointCloud, k: usize) -> Result<Vec<Point3>> {
    match cloud.normals() {
        Some(n) => Ok(n.to_vec()),
        None => estimate_normals(cloud, k),
    }
}
