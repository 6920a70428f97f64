use serde::{Deserialize, Serialize};

use super::{BBox3, GeomError, Point3, PointCloud};

/// Uniform similarity `q = scale * p + translation` mapping a cloud into the unit cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitCubeTransform {
    pub translation: Point3,
    pub scale: f64,
}

impl UnitCubeTransform {
    /// Scales the longest side of `bbox` onto [0, 1] and centers the shorter sides.
    pub fn from_bbox(bbox: &BBox3) -> Result<Self, GeomError> {
        let e = bbox.extent();
        let longest = e[0].max(e[1]).max(e[2]);
        if !(longest > 0.0) {
            return Err(GeomError::ZeroExtent);
        }
        let scale = 1.0 / longest;
        let c = bbox.center();
        let translation = [0.5 - scale * c[0], 0.5 - scale * c[1], 0.5 - scale * c[2]];
        Ok(Self { translation, scale })
    }

    pub fn identity() -> Self {
        Self { translation: [0.0; 3], scale: 1.0 }
    }

    #[inline]
    pub fn apply(&self, p: Point3) -> Point3 {
        [
            self.scale * p[0] + self.translation[0],
            self.scale * p[1] + self.translation[1],
            self.scale * p[2] + self.translation[2],
        ]
    }

    #[inline]
    pub fn invert(&self, q: Point3) -> Point3 {
        [
            (q[0] - self.translation[0]) / self.scale,
            (q[1] - self.translation[1]) / self.scale,
            (q[2] - self.translation[2]) / self.scale,
        ]
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_points(|p| self.apply(p))
    }

    pub fn invert_cloud(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_points(|q| self.invert(q))
    }
}

pub fn normalize_unit_cube(cloud: &PointCloud) -> Result<(PointCloud, UnitCubeTransform), GeomError> {
    let bbox = cloud.bbox().ok_or(GeomError::Empty)?;
    let t = UnitCubeTransform::from_bbox(&bbox)?;
    Ok((t.apply_cloud(cloud), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_points_on_x_axis() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let (n, t) = normalize_unit_cube(&c).unwrap();
        assert_eq!(t.scale, 0.5);
        assert_eq!(n.points(), &[[0.0, 0.5, 0.5], [1.0, 0.5, 0.5]]);
    }

    #[test]
    fn normalized_cloud_is_fixed_point_up_to_centering() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.5, 0.2], [0.3, 1.0, 1.0]]).unwrap();
        let (n, t) = normalize_unit_cube(&c).unwrap();
        assert_eq!(t.scale, 1.0);
        assert_eq!(n, c);
    }

    #[test]
    fn coincident_points_rejected() {
        let c = PointCloud::new(vec![[1.0, 1.0, 1.0]; 4]).unwrap();
        assert_eq!(normalize_unit_cube(&c).unwrap_err(), GeomError::ZeroExtent);
        assert_eq!(normalize_unit_cube(&PointCloud::empty()).unwrap_err(), GeomError::Empty);
    }

    proptest! {
        #[test]
        fn stays_in_cube_and_round_trips(pts in prop::collection::vec(prop::array::uniform3(-500.0f64..500.0), 2..60)) {
            let c = PointCloud::new(pts.clone()).unwrap();
            let bb = c.bbox().unwrap();
            prop_assume!(bb.extent().iter().cloned().fold(0.0, f64::max) > 1e-6);
            let (n, t) = normalize_unit_cube(&c).unwrap();
            let ext = bb.extent().iter().cloned().fold(0.0, f64::max);
            let mut spans_unit = false;
            for k in 0..3 {
                let lo = n.points().iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
                let hi = n.points().iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo >= -1e-12 && hi <= 1.0 + 1e-12);
                spans_unit |= lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12;
            }
            prop_assert!(spans_unit);
            for (p, q) in pts.iter().zip(n.points()) {
                let back = t.invert(*q);
                for k in 0..3 {
                    prop_assert!((back[k] - p[k]).abs() < 1e-9 * ext.max(1.0));
                }
            }
        }
    }
}
