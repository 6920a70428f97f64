use kiddo::{ImmutableKdTree, SquaredEuclidean};

use super::Point3;

/// Exact nearest-neighbour index over a fixed point set.
pub struct SpatialIndex {
    tree: Option<ImmutableKdTree<f64, 3>>,
    len: usize,
}

impl SpatialIndex {
    pub fn new(points: &[Point3]) -> Self {
        let tree = if points.is_empty() {
            None
        } else {
            Some(ImmutableKdTree::new_from_slice(points).expect("finite coordinates"))
        };
        Self { tree, len: points.len() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index and squared distance of the nearest stored point.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        let tree = self.tree.as_ref()?;
        let nn = tree.query(q).nearest_one::<SquaredEuclidean<f64>>().execute();
        Some((nn.item as usize, nn.distance))
    }

    /// Indices of all stored points within `radius` of `q`.
    pub fn within(&self, q: &Point3, radius: f64) -> Vec<usize> {
        match &self.tree {
            None => Vec::new(),
            Some(tree) => {
                let mut v: Vec<usize> = tree
                    .query(q)
                    .within::<SquaredEuclidean<f64>>(radius * radius)
                    .execute()
                    .into_iter()
                    .map(|n| n.item as usize)
                    .collect();
                v.sort_unstable();
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::dist2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Point3> = (0..400).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let idx = SpatialIndex::new(&pts);
        for _ in 0..200 {
            let q: Point3 = [rng.random_range(-0.2..1.2), rng.random(), rng.random()];
            let (_, d) = idx.nearest(&q).unwrap();
            let brute = pts.iter().map(|p| dist2(*p, q)).fold(f64::INFINITY, f64::min);
            assert_eq!(d, brute);
        }
    }

    #[test]
    fn tolerates_many_duplicates() {
        let mut pts = vec![[0.5, 0.5, 0.5]; 300];
        pts.push([1.0, 1.0, 1.0]);
        let idx = SpatialIndex::new(&pts);
        assert_eq!(idx.nearest(&[0.9, 0.9, 0.9]).unwrap().0, 300);
        assert_eq!(idx.within(&[0.5, 0.5, 0.5], 0.01).len(), 300);
        assert!(SpatialIndex::new(&[]).nearest(&[0.0; 3]).is_none());
    }
}
