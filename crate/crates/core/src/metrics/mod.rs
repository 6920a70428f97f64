//! Reconstruction and containment metrics.
//!
//! Every cloud metric here is evaluated in whatever frame its inputs live in;
//! the pipeline always passes pair-normalized unit-cube coordinates for
//! CD/EMD/EPC and world meters for deviation distances.

mod assignment;

pub use assignment::{assignment_cost, solve_assignment};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{dist, ConvexHull3, GeomError, Point3, PointCloud, SpatialIndex, DEFAULT_CONTAINMENT_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("empty input sequence")]
    EmptyInput,
    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("hull is degenerate: {0}")]
    DegenerateHull(String),
}

impl From<GeomError> for MetricError {
    fn from(e: GeomError) -> Self {
        MetricError::DegenerateHull(e.to_string())
    }
}

/// Mean squared nearest-neighbour distance from every point of `from` into `to`.
fn directed_sq_nn(from: &[Point3], to: &SpatialIndex) -> f64 {
    let s: f64 = from.iter().map(|p| to.nearest(p).expect("non-empty index").1).sum();
    s / from.len() as f64
}

/// Symmetric Chamfer distance with squared Euclidean terms:
/// mean over X of the squared distance to Y, plus the same from Y to X.
pub fn chamfer(x: &PointCloud, y: &PointCloud) -> Result<f64, MetricError> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricError::EmptyCloud);
    }
    let ix = SpatialIndex::new(x.points());
    let iy = SpatialIndex::new(y.points());
    Ok(directed_sq_nn(x.points(), &iy) + directed_sq_nn(y.points(), &ix))
}

/// Exact earth mover's distance between equal-size clouds: the mean matched
/// Euclidean distance under the optimal bijection.
pub fn emd_exact(x: &PointCloud, y: &PointCloud) -> Result<f64, MetricError> {
    let n = x.len();
    if n != y.len() {
        return Err(MetricError::SizeMismatch(n, y.len()));
    }
    if n == 0 {
        return Err(MetricError::EmptyCloud);
    }
    let cost: Vec<f64> = x
        .points()
        .iter()
        .flat_map(|a| y.points().iter().map(move |b| dist(*a, *b)))
        .collect();
    let perm = solve_assignment(n, &cost);
    Ok(assignment_cost(n, &cost, &perm) / n as f64)
}

/// Fraction of `gen` inside the convex hull of `als` (boundary inclusive).
pub fn epc(gen: &PointCloud, als: &PointCloud) -> Result<f64, MetricError> {
    let hull = ConvexHull3::from_points(als.points())?;
    Ok(epc_with_hull(gen, &hull, DEFAULT_CONTAINMENT_TOL))
}

pub fn epc_with_hull(gen: &PointCloud, hull: &ConvexHull3, tol: f64) -> f64 {
    if gen.is_empty() {
        return 1.0;
    }
    let inside = gen.points().iter().filter(|p| hull.contains(**p, tol)).count();
    inside as f64 / gen.len() as f64
}

/// Summary of the generated points that fall outside an envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    pub n_generated: usize,
    pub out_fraction: f64,
    pub mean_out_dist: f64,
    pub std_out_dist: f64,
    pub out_distances: Vec<f64>,
}

impl DeviationStats {
    pub fn from_distances(n_generated: usize, out_distances: Vec<f64>) -> Self {
        let k = out_distances.len();
        let (mean, std) = if k == 0 {
            (0.0, 0.0)
        } else {
            let m = out_distances.iter().sum::<f64>() / k as f64;
            let v = out_distances.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / k as f64;
            (m, v.sqrt())
        };
        DeviationStats {
            n_generated,
            out_fraction: if n_generated == 0 { 0.0 } else { k as f64 / n_generated as f64 },
            mean_out_dist: mean,
            std_out_dist: std,
            out_distances,
        }
    }
}

pub fn deviation_stats(gen: &PointCloud, als: &PointCloud) -> Result<DeviationStats, MetricError> {
    let hull = ConvexHull3::from_points(als.points())?;
    Ok(deviation_stats_with_hull(gen, &hull, DEFAULT_CONTAINMENT_TOL))
}

pub fn deviation_stats_with_hull(gen: &PointCloud, hull: &ConvexHull3, tol: f64) -> DeviationStats {
    let out: Vec<f64> = gen
        .points()
        .iter()
        .filter(|p| !hull.contains(**p, tol))
        .map(|p| hull.distance_to_surface(*p).expect("point is outside"))
        .collect();
    DeviationStats::from_distances(gen.len(), out)
}

/// Empirical 1-Wasserstein distance between two samples, integrating the
/// absolute difference of their step quantile functions over [0, 1].
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == m {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64);
    }
    // Quantile steps end at i/n and j/m; compare i*m with j*n to merge exactly.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let (ni, nj) = ((i + 1) * m, (j + 1) * n);
        let next = ni.min(nj) as f64 / (n * m) as f64;
        total += (next - prev) * (a[i] - b[j]).abs();
        prev = next;
        if ni <= nj {
            i += 1;
        }
        if nj <= ni {
            j += 1;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::dist2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: Vec<Point3>) -> PointCloud {
        PointCloud::new(pts).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        cloud((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect())
    }

    fn cube_corners() -> PointCloud {
        let mut v = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    v.push([x, y, z]);
                }
            }
        }
        cloud(v)
    }

    #[test]
    fn chamfer_basics() {
        let a = cloud(vec![[0.0, 0.0, 0.0]]);
        let b = cloud(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer(&a, &PointCloud::empty()), Err(MetricError::EmptyCloud));
    }

    #[test]
    fn chamfer_symmetric_and_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = random_cloud(&mut rng, 50);
            let y = random_cloud(&mut rng, 37);
            let scan = |p: &PointCloud, q: &PointCloud| {
                p.points().iter().map(|a| q.points().iter().map(|b| dist2(*a, *b)).fold(f64::INFINITY, f64::min)).sum::<f64>()
                    / p.len() as f64
            };
            let brute = scan(&x, &y) + scan(&y, &x);
            let cd = chamfer(&x, &y).unwrap();
            assert!((cd - brute).abs() < 1e-12);
            assert_eq!(cd, chamfer(&y, &x).unwrap());
        }
    }

    #[test]
    fn emd_permutation_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_cloud(&mut rng, 30);
        let mut idx: Vec<usize> = (0..30).collect();
        idx.reverse();
        assert!(emd_exact(&x, &x.select(&idx)).unwrap().abs() < 1e-15);
        let shifted = x.map_points(|p| [p[0] + 5.0, p[1], p[2]]);
        assert!((emd_exact(&x, &shifted).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(emd_exact(&x, &random_cloud(&mut rng, 3)), Err(MetricError::SizeMismatch(30, 3)));
    }

    #[test]
    fn emd_dominates_nearest_neighbour_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x = random_cloud(&mut rng, 25);
            let y = random_cloud(&mut rng, 25);
            let nn: f64 = x
                .points()
                .iter()
                .map(|a| y.points().iter().map(|b| dist(*a, *b)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / 25.0;
            assert!(emd_exact(&x, &y).unwrap() >= nn - 1e-12);
        }
    }

    #[test]
    fn emd_metric_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let a = random_cloud(&mut rng, 8);
            let b = random_cloud(&mut rng, 8);
            let c = random_cloud(&mut rng, 8);
            let ab = emd_exact(&a, &b).unwrap();
            assert!((ab - emd_exact(&b, &a).unwrap()).abs() < 1e-12);
            assert!(ab <= emd_exact(&a, &c).unwrap() + emd_exact(&c, &b).unwrap() + 1e-12);
            assert!(ab > 1e-12);
        }
    }

    #[test]
    fn epc_inside_and_half() {
        let als = cube_corners();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inside = random_cloud(&mut rng, 100);
        assert_eq!(epc(&inside, &als).unwrap(), 1.0);
        let mut pts = inside.points()[..20].to_vec();
        pts.extend(inside.points()[..20].iter().map(|p| [p[0] + 10.0, p[1], p[2]]));
        assert_eq!(epc(&cloud(pts), &als).unwrap(), 0.5);
        let flat = cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        assert!(matches!(epc(&inside, &flat), Err(MetricError::DegenerateHull(_))));
    }

    #[test]
    fn epc_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let als = random_cloud(&mut rng, 40);
        let gen = cloud((0..80).map(|_| [rng.random_range(-0.2..1.2), rng.random(), rng.random()]).collect());
        let rev = |c: &PointCloud| c.select(&(0..c.len()).rev().collect::<Vec<_>>());
        let e = epc(&gen, &als).unwrap();
        assert_eq!(e, epc(&rev(&gen), &als).unwrap());
        assert_eq!(e, epc(&gen, &rev(&als)).unwrap());
    }

    #[test]
    fn deviation_single_offset() {
        let als = cube_corners();
        let mut pts = vec![[0.5, 0.5, 1.3]];
        pts.extend((0..9).map(|i| [0.1 * i as f64 + 0.05, 0.5, 0.5]));
        let d = deviation_stats(&cloud(pts), &als).unwrap();
        assert_eq!(d.out_fraction, 0.1);
        assert!((d.mean_out_dist - 0.3).abs() < 1e-12);
        assert_eq!(d.std_out_dist, 0.0);
        let all_in = deviation_stats(&cloud(vec![[0.5; 3]; 4]), &als).unwrap();
        assert_eq!(all_in.out_fraction, 0.0);
        assert!(all_in.out_distances.is_empty());
    }

    #[test]
    fn wasserstein_cases() {
        assert_eq!(wasserstein_1d(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap(), 0.0);
        assert!((wasserstein_1d(&[1.0, 2.0, 7.0], &[3.5, 4.5, 9.5]).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(wasserstein_1d(&[], &[1.0]), Err(MetricError::EmptyInput));
        // unequal sizes: {0,1} vs {0,0,1}: quantile functions differ on (1/2, 2/3]
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.0, 0.0, 1.0]).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_unequal_matches_replication() {
        // Replicating each sample to a common size leaves the distribution unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let a: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let ar: Vec<f64> = a.iter().flat_map(|v| [*v; 4]).collect();
            let br: Vec<f64> = b.iter().flat_map(|v| [*v; 3]).collect();
            let w = wasserstein_1d(&a, &b).unwrap();
            assert!((w - wasserstein_1d(&ar, &br).unwrap()).abs() < 1e-12);
            let bound = a.iter().fold(0f64, |m, v| m.max(v.abs())) + b.iter().fold(0f64, |m, v| m.max(v.abs()));
            assert!(w <= bound);
        }
    }
}
