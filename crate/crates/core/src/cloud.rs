//! Point cloud data model.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::transform::Similarity;

/// A 3D coordinate in model units.
pub type Point3 = Vector3<f64>;

const NORMAL_TOLERANCE: f64 = 1e-6;

/// Ordered list of finite points with optional unit normals.
///
/// The invariants (non-empty, finite coordinates, unit normals of matching
/// length) are checked on construction, so every `PointCloud` in circulation
/// is valid.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Point3>>,
    name: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if points.is_empty() {
            return Err(Error::EmptyCloud(name));
        }
        if let Some(i) = points.iter().position(|p| !is_finite(p)) {
            return Err(Error::Format(format!("{name}: non-finite coordinate at point {i}")));
        }
        Ok(Self {
            points,
            normals: None,
            name,
        })
    }

    pub fn with_normals(
        points: Vec<Point3>,
        normals: Vec<Point3>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let mut cloud = Self::new(points, name)?;
        cloud.set_normals(normals)?;
        Ok(cloud)
    }

    pub fn set_normals(&mut self, normals: Vec<Point3>) -> Result<()> {
        if normals.len() != self.points.len() {
            return Err(Error::SizeMismatch {
                left: self.points.len(),
                right: normals.len(),
            });
        }
        if let Some(i) = normals
            .iter()
            .position(|n| !is_finite(n) || (n.norm() - 1.0).abs() > NORMAL_TOLERANCE)
        {
            return Err(Error::Format(format!(
                "{}: normal {i} is not a finite unit vector",
                self.name
            )));
        }
        self.normals = Some(normals);
        Ok(())
    }

    pub fn clear_normals(&mut self) {
        self.normals = None;
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Point3]> {
        self.normals.as_deref()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::of(&self.points).expect("point cloud is never empty")
    }

    /// Keeps the points (and normals) at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let mut out = Self::new(points, self.name.clone())?;
        if let Some(normals) = &self.normals {
            out.normals = Some(indices.iter().map(|&i| normals[i]).collect());
        }
        Ok(out)
    }

    /// Applies `t` to every point; normals are rotated.
    pub fn transformed(&self, t: &Similarity) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| (t.rotation * n).normalize()).collect()),
            name: self.name.clone(),
        }
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }
}

pub(crate) fn is_finite(p: &Point3) -> bool {
    p.iter().all(|c| c.is_finite())
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let sum = points.iter().fold(Point3::zeros(), |acc, p| acc + p);
    sum / points.len() as f64
}

/// Axis-aligned bounds, `min <= max` componentwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Point3,
    pub max: Point3,
}

impl BoundingBox {
    pub fn of(points: &[Point3]) -> Option<Self> {
        let first = *points.first()?;
        let (min, max) = points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        });
        Some(Self { min, max })
    }

    pub fn extent(&self) -> Point3 {
        self.max - self.min
    }

    pub fn longest_edge(&self) -> f64 {
        self.extent().max()
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn center(&self) -> Point3 {
        (self.min + self.max) * 0.5
    }
}

pub fn bounding_box(cloud: &PointCloud) -> BoundingBox {
    cloud.bounding_box()
}
