//! Point-cloud value types, convex hulls, spatial indexing and the
//! preprocessing transforms shared by every other module.

mod ground;
mod hull;
mod index;
pub mod io;
mod sampling;
mod transform;

pub use ground::GroundModel;
pub use hull::{build_convex_hull, ConvexHull3, Facet, DEFAULT_CONTAINMENT_TOL};
pub use index::SpatialIndex;
pub use sampling::{subsample_fixed, voxel_downsample};
pub use transform::{normalize_unit_cube, UnitCubeTransform};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point in meters (world frame) or unit-cube coordinates (pair frame).
pub type Point3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("point lies inside the hull")]
    PointInside,
    #[error("cloud has zero extent")]
    ZeroExtent,
    #[error("cloud is empty")]
    Empty,
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("attribute length {got} does not match point count {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

#[inline]
pub fn dist(a: Point3, b: Point3) -> f64 {
    dist2(a, b).sqrt()
}

/// Semantic class of a simulated or annotated point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SemanticLabel {
    Ground = 0,
    Stem = 1,
    Branch = 2,
    Foliage = 3,
    LowVeg = 4,
}

impl SemanticLabel {
    pub const ALL: [SemanticLabel; 5] = [
        SemanticLabel::Ground,
        SemanticLabel::Stem,
        SemanticLabel::Branch,
        SemanticLabel::Foliage,
        SemanticLabel::LowVeg,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Owner id used for points that belong to no tree (ground, understory).
pub const NO_OWNER: i32 = -1;

/// An ordered point sequence with optional per-point labels and owner ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
    labels: Option<Vec<SemanticLabel>>,
    owners: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeomError> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeomError::NonFinite(i));
        }
        Ok(Self { points, labels: None, owners: None })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_labels(mut self, labels: Vec<SemanticLabel>) -> Result<Self, GeomError> {
        if labels.len() != self.points.len() {
            return Err(GeomError::LengthMismatch { expected: self.points.len(), got: labels.len() });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_owners(mut self, owners: Vec<i32>) -> Result<Self, GeomError> {
        if owners.len() != self.points.len() {
            return Err(GeomError::LengthMismatch { expected: self.points.len(), got: owners.len() });
        }
        self.owners = Some(owners);
        Ok(self)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[SemanticLabel]> {
        self.labels.as_deref()
    }

    pub fn owners(&self) -> Option<&[i32]> {
        self.owners.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn drop_attributes(mut self) -> Self {
        self.labels = None;
        self.owners = None;
        self
    }

    /// Keeps the points whose index satisfies `keep`, carrying attributes along.
    pub fn filter_indices(&self, mut keep: impl FnMut(usize, &Point3) -> bool) -> PointCloud {
        self.select(
            &self
                .points
                .iter()
                .enumerate()
                .filter(|(i, p)| keep(*i, p))
                .map(|(i, _)| i)
                .collect::<Vec<_>>(),
        )
    }

    /// Gathers the given indices (repeats allowed) into a new cloud.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            owners: self.owners.as_ref().map(|o| idx.iter().map(|&i| o[i]).collect()),
        }
    }

    /// Applies `f` to every point; attributes are kept.
    pub fn map_points(&self, f: impl Fn(Point3) -> Point3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|&p| f(p)).collect(),
            labels: self.labels.clone(),
            owners: self.owners.clone(),
        }
    }

    /// Concatenates two clouds. Attributes survive only if both sides carry them.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ if self.is_empty() => other.labels.clone(),
            _ if other.is_empty() => self.labels.clone(),
            _ => None,
        };
        let owners = match (&self.owners, &other.owners) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ if self.is_empty() => other.owners.clone(),
            _ if other.is_empty() => self.owners.clone(),
            _ => None,
        };
        PointCloud { points, labels, owners }
    }

    pub fn bbox(&self) -> Option<BBox3> {
        BBox3::from_points(&self.points)
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            c = add(c, *p);
        }
        Some(scale(c, 1.0 / self.points.len() as f64))
    }
}

/// Axis-aligned box with inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox3 {
    pub min: Point3,
    pub max: Point3,
}

impl BBox3 {
    pub fn new(min: Point3, max: Point3) -> Self {
        debug_assert!((0..3).all(|k| min[k] <= max[k]));
        Self { min, max }
    }

    pub fn from_points(points: &[Point3]) -> Option<Self> {
        let first = *points.first()?;
        let mut b = BBox3 { min: first, max: first };
        for p in &points[1..] {
            b.include(*p);
        }
        Some(b)
    }

    pub fn include(&mut self, p: Point3) {
        for k in 0..3 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    pub fn union(&self, other: &BBox3) -> BBox3 {
        let mut b = *self;
        b.include(other.min);
        b.include(other.max);
        b
    }

    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        self.min[0] <= x && x <= self.max[0] && self.min[1] <= y && y <= self.max[1]
    }

    pub fn extent(&self) -> Point3 {
        sub(self.max, self.min)
    }

    pub fn center(&self) -> Point3 {
        scale(add(self.min, self.max), 0.5)
    }

    pub fn footprint_area(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1]
    }

    pub fn diagonal(&self) -> f64 {
        norm(self.extent())
    }

    /// Grows each side by `frac` of the extent along that axis.
    pub fn inflate(&self, frac: f64) -> BBox3 {
        let e = self.extent();
        BBox3 {
            min: [self.min[0] - frac * e[0], self.min[1] - frac * e[1], self.min[2] - frac * e[2]],
            max: [self.max[0] + frac * e[0], self.max[1] + frac * e[1], self.max[2] + frac * e[2]],
        }
    }

    pub fn clamp(&self, p: Point3) -> Point3 {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
            p[2].clamp(self.min[2], self.max[2]),
        ]
    }
}

/// Points inside `bbox` (inclusive), with labels and owners carried over.
pub fn crop(cloud: &PointCloud, bbox: &BBox3) -> PointCloud {
    cloud.filter_indices(|_, p| bbox.contains(*p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert_eq!(PointCloud::new(vec![[0.0, 0.0, 0.0], [f64::NAN, 0.0, 0.0]]), Err(GeomError::NonFinite(1)));
        assert!(PointCloud::new(vec![[f64::INFINITY, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn label_length_checked() {
        let c = PointCloud::new(vec![[0.0; 3]; 3]).unwrap();
        assert!(c.clone().with_labels(vec![SemanticLabel::Stem; 2]).is_err());
        assert!(c.with_labels(vec![SemanticLabel::Stem; 3]).is_ok());
    }

    #[test]
    fn crop_whole_and_degenerate() {
        let pts: Vec<Point3> = (0..20).map(|i| [i as f64, (i * 3 % 7) as f64, 0.5 * i as f64]).collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let bb = cloud.bbox().unwrap();
        assert_eq!(crop(&cloud, &bb), cloud);
        let single = BBox3::new(pts[4], pts[4]);
        assert_eq!(crop(&cloud, &single).points(), &[pts[4]]);
    }

    #[test]
    fn crop_matches_linear_scan_and_keeps_attributes() {
        let pts: Vec<Point3> = (0..200).map(|i| {
            let f = i as f64;
            [(f * 0.37).sin() * 5.0, (f * 0.91).cos() * 5.0, f * 0.05]
        }).collect();
        let owners: Vec<i32> = (0..200).map(|i| i % 5).collect();
        let labels: Vec<SemanticLabel> = (0..200).map(|i| SemanticLabel::ALL[i % 5]).collect();
        let cloud = PointCloud::new(pts.clone()).unwrap().with_labels(labels.clone()).unwrap().with_owners(owners.clone()).unwrap();
        let bb = BBox3::new([0.0, -10.0, -10.0], [10.0, 10.0, 10.0]);
        let out = crop(&cloud, &bb);
        let expected: Vec<usize> = (0..200).filter(|&i| pts[i][0] >= 0.0).collect();
        assert_eq!(out.len(), expected.len());
        for (k, &i) in expected.iter().enumerate() {
            assert_eq!(out.points()[k], pts[i]);
            assert_eq!(out.labels().unwrap()[k], labels[i]);
            assert_eq!(out.owners().unwrap()[k], owners[i]);
        }
    }
}
