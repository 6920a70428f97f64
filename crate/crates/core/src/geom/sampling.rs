use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Point3, PointCloud, SemanticLabel};

/// Replaces the points of every occupied voxel by their centroid.
///
/// Output order follows the first occurrence of each voxel in the input.
/// Labels and owners are resolved by majority vote (ties go to the smaller value).
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut slot: HashMap<[i64; 3], usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let key = [
            (p[0] / voxel).floor() as i64,
            (p[1] / voxel).floor() as i64,
            (p[2] / voxel).floor() as i64,
        ];
        let s = *slot.entry(key).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[s].push(i);
    }

    let pts = cloud.points();
    let points: Vec<Point3> = members
        .iter()
        .map(|m| {
            let mut c = [0.0; 3];
            for &i in m {
                for k in 0..3 {
                    c[k] += pts[i][k];
                }
            }
            let n = m.len() as f64;
            [c[0] / n, c[1] / n, c[2] / n]
        })
        .collect();
    let mut out = PointCloud::new(points).expect("centroids of finite points are finite");
    if let Some(labels) = cloud.labels() {
        let voted = members
            .iter()
            .map(|m| {
                let mut counts = [0usize; 5];
                for &i in m {
                    counts[labels[i] as usize] += 1;
                }
                let best = (0..5).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
                SemanticLabel::ALL[best]
            })
            .collect();
        out = out.with_labels(voted).unwrap();
    }
    if let Some(owners) = cloud.owners() {
        let voted = members
            .iter()
            .map(|m| {
                let mut counts: HashMap<i32, usize> = HashMap::new();
                for &i in m {
                    *counts.entry(owners[i]).or_default() += 1;
                }
                counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).unwrap().0
            })
            .collect();
        out = out.with_owners(voted).unwrap();
    }
    out
}

/// Draws exactly `n` points: without replacement when the cloud is large
/// enough, with replacement otherwise.
pub fn subsample_fixed(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    assert!(!cloud.is_empty() && n >= 1, "subsample needs a non-empty cloud and n >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cloud.len();
    let idx: Vec<usize> = if len >= n {
        rand::seq::index::sample(&mut rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    };
    cloud.select(&idx)
}
