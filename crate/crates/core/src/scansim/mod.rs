//! Virtual airborne and terrestrial scanners over a [`LabeledScene`], and
//! extraction of co-registered per-tree pairs.
//!
//! Both sensors traverse a voxel occupancy grid built from the non-ground
//! points of the master cloud; ground is intersected analytically through the
//! scene's ground model.

mod grid;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::geom::{crop, voxel_downsample, BBox3, Point3, PointCloud, SemanticLabel, UnitCubeTransform, NO_OWNER};
use crate::synthforest::LabeledScene;

pub use grid::OccupancyGrid;

/// Co-registered ALS and TLS clouds of one tree or cluster, both in the
/// shared unit-cube frame given by `transform`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreePair {
    pub als: PointCloud,
    pub tls: PointCloud,
    pub transform: UnitCubeTransform,
    pub bbox: BBox3,
    pub tree_ids: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlsSensor {
    /// Pulses per m².
    pub point_density: f64,
    pub max_returns_per_column: usize,
    /// Probability that a pulse continues past an occupied voxel.
    pub canopy_penetration_prob: f64,
    pub noise_sigma: f64,
    pub voxel: f64,
}

impl Default for AlsSensor {
    fn default() -> Self {
        Self { point_density: 15.0, max_returns_per_column: 8, canopy_penetration_prob: 0.5, noise_sigma: 0.03, voxel: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TlsSensor {
    pub max_range: f64,
    /// Angular resolution in radians, used for both azimuth and elevation.
    pub angular_step: f64,
    pub scanner_height: f64,
    pub occlusion_voxel: f64,
    pub noise_sigma: f64,
    /// A beam hits a surface sample passing within this distance of it.
    pub hit_radius: f64,
    /// Elevation range of the scan in radians.
    pub min_elevation: f64,
    pub max_elevation: f64,
}

impl Default for TlsSensor {
    fn default() -> Self {
        Self {
            max_range: 25.0,
            angular_step: 0.5f64.to_radians(),
            scanner_height: 1.5,
            occlusion_voxel: 0.25,
            noise_sigma: 0.005,
            hit_radius: 0.015,
            min_elevation: (-60.0f64).to_radians(),
            max_elevation: 85.0f64.to_radians(),
        }
    }
}

/// Per-pulse bookkeeping of the airborne scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlsRay {
    pub x: f64,
    pub y: f64,
    pub returns: usize,
    pub reached_ground: bool,
}

struct Builder {
    pts: Vec<Point3>,
    labels: Vec<SemanticLabel>,
    owners: Vec<i32>,
}

impl Builder {
    fn new() -> Self {
        Self { pts: Vec::new(), labels: Vec::new(), owners: Vec::new() }
    }

    fn push(&mut self, p: Point3, l: SemanticLabel, o: i32) {
        self.pts.push(p);
        self.labels.push(l);
        self.owners.push(o);
    }

    fn extend(&mut self, other: Builder) {
        self.pts.extend(other.pts);
        self.labels.extend(other.labels);
        self.owners.extend(other.owners);
    }

    fn finish(self) -> PointCloud {
        PointCloud::new(self.pts).expect("finite").with_labels(self.labels).expect("sized").with_owners(self.owners).expect("sized")
    }
}

fn noisy(p: Point3, n: &Normal<f64>, rng: &mut ChaCha8Rng) -> Point3 {
    [p[0] + n.sample(rng), p[1] + n.sample(rng), p[2] + n.sample(rng)]
}

pub fn simulate_als(scene: &LabeledScene, sensor: &AlsSensor, seed: u64) -> PointCloud {
    simulate_als_detailed(scene, sensor, seed).0
}

/// Vertical pulses on a jittered grid over the plot disk. Each occupied voxel
/// met on the way down yields a return at the master point nearest the pulse
/// axis; the pulse then continues with the penetration probability. Pulses
/// that pass every occupied voxel return from the ground.
pub fn simulate_als_detailed(scene: &LabeledScene, sensor: &AlsSensor, seed: u64) -> (PointCloud, Vec<AlsRay>) {
    assert!(sensor.point_density > 0.0 && (0.0..=1.0).contains(&sensor.canopy_penetration_prob));
    let grid = OccupancyGrid::from_scene(scene, sensor.voxel);
    let spacing = 1.0 / sensor.point_density.sqrt();
    let r = scene.area_radius;
    let n_side = (2.0 * r / spacing).ceil() as usize;
    let noise = Normal::new(0.0, sensor.noise_sigma.max(0.0)).unwrap();
    let rows: Vec<(Builder, Vec<AlsRay>)> = crate::with_workers(|| {
        (0..n_side)
            .into_par_iter()
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, j as u64));
                let mut b = Builder::new();
                let mut rays = Vec::new();
                for i in 0..n_side {
                    let x = -r + (i as f64 + rng.random::<f64>()) * spacing;
                    let y = -r + (j as f64 + rng.random::<f64>()) * spacing;
                    if x.hypot(y) > r {
                        continue;
                    }
                    let mut returns = 0;
                    let mut blocked = false;
                    let mut done = false;
                    if let Some((ix, iy)) = grid.column(x, y) {
                        for iz in (0..grid.dims[2]).rev() {
                            let Some(members) = grid.members(ix, iy, iz) else { continue };
                            let k = grid.nearest_horizontal(members, x, y);
                            b.push(noisy(grid.point(k), &noise, &mut rng), grid.label(k), grid.owner(k));
                            returns += 1;
                            if returns >= sensor.max_returns_per_column {
                                done = true;
                                break;
                            }
                            if !rng.random_bool(sensor.canopy_penetration_prob) {
                                blocked = true;
                                break;
                            }
                        }
                    }
                    let reached_ground = !blocked && !done;
                    if reached_ground {
                        let gz = scene.ground.elevation(x, y);
                        b.push(noisy([x, y, gz], &noise, &mut rng), SemanticLabel::Ground, NO_OWNER);
                        returns += 1;
                    }
                    rays.push(AlsRay { x, y, returns, reached_ground });
                }
                (b, rays)
            })
            .collect()
    });
    let mut out = Builder::new();
    let mut rays = Vec::new();
    for (b, r) in rows {
        out.extend(b);
        rays.extend(r);
    }
    (out.finish(), rays)
}

/// Spherical scans from each pose; first hit only, no hits beyond
/// `max_range`. Scans are concatenated in pose order.
pub fn simulate_tls(scene: &LabeledScene, poses: &[[f64; 2]], sensor: &TlsSensor, seed: u64) -> PointCloud {
    assert!(!poses.is_empty(), "at least one scanner pose");
    assert!(sensor.max_range > 0.0 && sensor.angular_step > 0.0);
    let grid = OccupancyGrid::from_scene(scene, sensor.occlusion_voxel);
    let n_az = (2.0 * PI / sensor.angular_step).round() as usize;
    let n_el = ((sensor.max_elevation - sensor.min_elevation) / sensor.angular_step).floor() as usize + 1;
    let noise = Normal::new(0.0, sensor.noise_sigma.max(0.0)).unwrap();
    let mut out = Builder::new();
    for (pi, pose) in poses.iter().enumerate() {
        let origin = [pose[0], pose[1], scene.ground.elevation(pose[0], pose[1]) + sensor.scanner_height];
        let chunks: Vec<Builder> = crate::with_workers(|| {
            (0..n_az)
                .into_par_iter()
                .map(|ia| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (pi * n_az + ia) as u64));
                    let az = ia as f64 * 2.0 * PI / n_az as f64;
                    let mut b = Builder::new();
                    for ie in 0..n_el {
                        let el = sensor.min_elevation + ie as f64 * sensor.angular_step;
                        let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
                        match grid.cast(origin, d, sensor.max_range, sensor.hit_radius, &scene.ground) {
                            Some(grid::Hit::Point(k)) => b.push(noisy(grid.point(k), &noise, &mut rng), grid.label(k), grid.owner(k)),
                            Some(grid::Hit::Ground(p)) => b.push(noisy(p, &noise, &mut rng), SemanticLabel::Ground, NO_OWNER),
                            None => {}
                        }
                    }
                    b
                })
                .collect()
        });
        for c in chunks {
            out.extend(c);
        }
    }
    out.finish()
}

/// Scanner positions on a hexagonal pattern: the plot center plus rings of
/// six at multiples of `spacing`, kept inside the plot.
pub fn default_tls_poses(area_radius: f64, spacing: f64) -> Vec<[f64; 2]> {
    let mut poses = vec![[0.0, 0.0]];
    let mut ring = 1;
    while ring as f64 * spacing <= area_radius {
        let rr = ring as f64 * spacing;
        let n = 6 * ring;
        for k in 0..n {
            let a = 2.0 * PI * k as f64 / n as f64 + if ring % 2 == 0 { PI / n as f64 } else { 0.0 };
            poses.push([rr * a.cos(), rr * a.sin()]);
        }
        ring += 1;
    }
    poses
}

/// Rigid misregistration: rotation about the vertical axis through the origin
/// by N(0, σ_θ) and translation by N(0, σ_t) per axis.
pub fn apply_rigid_jitter(cloud: &PointCloud, sigma_t: f64, sigma_theta: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    let theta = sigma_theta * n.sample(&mut rng);
    let t = [sigma_t * n.sample(&mut rng), sigma_t * n.sample(&mut rng), sigma_t * n.sample(&mut rng)];
    let (s, c) = theta.sin_cos();
    cloud.map_points(|p| [c * p[0] - s * p[1] + t[0], s * p[0] + c * p[1] + t[1], p[2] + t[2]])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub tls_voxel: f64,
    pub min_points: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { tls_voxel: 0.10, min_points: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub box_index: usize,
    pub als_points: usize,
    pub tls_points: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub pairs: Vec<TreePair>,
    /// Index into the input boxes of each kept pair.
    pub box_indices: Vec<usize>,
    pub skipped: Vec<SkipRecord>,
}

/// Crops both clouds to each box, downsamples TLS, and normalizes both by the
/// transform of their joint bounding box.
pub fn extract_pairs(scene: &LabeledScene, als: &PointCloud, tls: &PointCloud, boxes: &[BBox3], cfg: &ExtractConfig) -> Extraction {
    let mut out = Extraction { pairs: Vec::new(), box_indices: Vec::new(), skipped: Vec::new() };
    for (bi, b) in boxes.iter().enumerate() {
        let a = crop(als, b);
        let t = crop(tls, b);
        let t = if t.is_empty() { t } else { voxel_downsample(&t, cfg.tls_voxel) };
        let skip = |reason: &str| SkipRecord { box_index: bi, als_points: a.len(), tls_points: t.len(), reason: reason.into() };
        if a.len() < cfg.min_points || t.len() < cfg.min_points {
            out.skipped.push(skip("too few points"));
            continue;
        }
        let joint = a.bbox().unwrap().union(&t.bbox().unwrap());
        let Ok(tf) = UnitCubeTransform::from_bbox(&joint) else {
            out.skipped.push(skip("zero extent"));
            continue;
        };
        let tree_ids = scene.trees.iter().filter(|tr| b.contains_xy(tr.base[0], tr.base[1])).map(|tr| tr.id).collect();
        out.pairs.push(TreePair { als: tf.apply_cloud(&a), tls: tf.apply_cloud(&t), transform: tf, bbox: *b, tree_ids });
        out.box_indices.push(bi);
    }
    out
}

/// Axis-aligned box around a planted tree: crown footprint plus a margin,
/// from its base elevation minus `below` to above its tip.
pub fn ground_truth_box(tree: &crate::synthforest::PlacedTree, margin: f64, below: f64) -> BBox3 {
    let r = tree.params.crown_radius + margin;
    BBox3::new(
        [tree.base[0] - r, tree.base[1] - r, tree.base_z - below],
        [tree.base[0] + r, tree.base[1] + r, tree.base_z + tree.params.height + 0.5],
    )
}

#[cfg(test)]
mod tests;
