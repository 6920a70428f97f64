//! Procedural conifer-like trees and multi-tree scenes with per-point labels
//! and owner ids.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::geom::io::{read_cloud, write_cloud, IoError};
use crate::geom::{GroundModel, Point3, PointCloud, SemanticLabel, NO_OWNER};

/// Surface noise applied to every generated point.
pub const NOISE_SIGMA: f64 = 0.02;
/// Stem surface sampling density, points per m².
pub const STEM_DENSITY: f64 = 1500.0;
/// Branch sampling density, points per m of branch length.
pub const BRANCH_DENSITY: f64 = 60.0;
const GROUND_DENSITY: f64 = 20.0;
pub const BREAST_HEIGHT: f64 = 1.37;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid tree parameters: {0}")]
    InvalidParams(String),
    #[error("could not place tree {placed} of {requested} after {attempts} attempts")]
    PackingFailure { placed: usize, requested: usize, attempts: usize },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("scene file {0}: {1}")]
    Format(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub height: f64,
    /// Basal stem diameter.
    pub dbh: f64,
    pub crown_base_frac: f64,
    pub crown_radius: f64,
    pub whorl_count: usize,
    /// Foliage points per m³ of crown cone.
    pub foliage_density: f64,
    pub taper_exponent: f64,
}

impl TreeParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = self.height > 0.0
            && self.dbh > 0.0
            && self.dbh < self.height
            && self.crown_base_frac > 0.0
            && self.crown_base_frac < 1.0
            && self.crown_radius > 0.0
            && self.foliage_density >= 0.0
            && self.taper_exponent >= 0.0
            && [self.height, self.dbh, self.crown_radius, self.foliage_density, self.taper_exponent]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidParams(format!("{self:?}")))
        }
    }

    /// Stem radius at height `z` above the base.
    pub fn stem_radius(&self, z: f64) -> f64 {
        let u = (1.0 - z / self.height).clamp(0.0, 1.0);
        0.5 * self.dbh * u.powf(self.taper_exponent)
    }

    /// Stem diameter at breast height, the quantity a DBH estimator recovers.
    pub fn breast_height_diameter(&self) -> f64 {
        2.0 * self.stem_radius(BREAST_HEIGHT)
    }

    pub fn crown_base(&self) -> f64 {
        self.crown_base_frac * self.height
    }

    /// Crown cone radius at height `z`.
    pub fn crown_radius_at(&self, z: f64) -> f64 {
        let base = self.crown_base();
        if z < base || z > self.height {
            return 0.0;
        }
        self.crown_radius * (self.height - z) / (self.height - base)
    }
}

fn push(pts: &mut Vec<Point3>, labels: &mut Vec<SemanticLabel>, p: Point3, l: SemanticLabel) {
    pts.push(p);
    labels.push(l);
}

/// Points of one tree with its base at the origin, ground at `z = 0` and a
/// small ground disk. Noise of [`NOISE_SIGMA`] is applied to every point.
pub fn generate_tree(params: &TreeParams, seed: u64) -> Result<PointCloud, SynthError> {
    let (pts, labels) = tree_points(params, seed, true)?;
    Ok(PointCloud::new(pts).expect("finite").with_labels(labels).expect("sized"))
}

fn tree_points(p: &TreeParams, seed: u64, ground_disk: bool) -> Result<(Vec<Point3>, Vec<SemanticLabel>), SynthError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    let jitter = |rng: &mut ChaCha8Rng, q: Point3| [q[0] + noise.sample(rng), q[1] + noise.sample(rng), q[2] + noise.sample(rng)];

    // Stem: rings whose point count follows the local circumference.
    let ring_dz = 1.0 / STEM_DENSITY.sqrt();
    let mut z = 0.0;
    while z < p.height {
        let r = p.stem_radius(z);
        let n = (2.0 * PI * r * STEM_DENSITY.sqrt()).round() as usize;
        let phase: f64 = rng.random::<f64>() * 2.0 * PI;
        for k in 0..n {
            let a = phase + 2.0 * PI * k as f64 / n as f64;
            let q = [r * a.cos(), r * a.sin(), z];
            let q = jitter(&mut rng, q);
            push(&mut pts, &mut labels, q, SemanticLabel::Stem);
        }
        z += ring_dz;
    }
    // Tip marker so the apex is present regardless of ring spacing.
    let tip = jitter(&mut rng, [0.0, 0.0, p.height]);
    push(&mut pts, &mut labels, tip, SemanticLabel::Foliage);

    // Whorls of branches between crown base and near the tip.
    let base = p.crown_base();
    for w in 0..p.whorl_count {
        let zw = base + (0.9 * p.height - base) * (w as f64 + 0.5) / p.whorl_count as f64;
        let n_branch = rng.random_range(4..=6);
        let phase: f64 = rng.random::<f64>() * 2.0 * PI;
        for b in 0..n_branch {
            let a = phase + 2.0 * PI * b as f64 / n_branch as f64 + rng.random_range(-0.3..0.3);
            let len = 0.9 * p.crown_radius_at(zw);
            let rise = rng.random_range(0.0..0.3) * len;
            let n = (len * BRANCH_DENSITY).ceil() as usize;
            for k in 0..n {
                let s = (k as f64 + 0.5) / n as f64;
                let q = [s * len * a.cos(), s * len * a.sin(), zw + s * rise];
                let q = jitter(&mut rng, q);
                push(&mut pts, &mut labels, q, SemanticLabel::Branch);
            }
        }
    }

    // Foliage: uniform in the crown cone.
    let length = p.height - base;
    let volume = PI * p.crown_radius.powi(2) * length / 3.0;
    let n_fol = (volume * p.foliage_density).round() as usize;
    let mut placed = 0;
    while placed < n_fol {
        let q = [
            rng.random_range(-p.crown_radius..p.crown_radius),
            rng.random_range(-p.crown_radius..p.crown_radius),
            base + rng.random::<f64>() * length,
        ];
        if q[0].hypot(q[1]) <= p.crown_radius_at(q[2]) {
            let q = jitter(&mut rng, q);
            push(&mut pts, &mut labels, q, SemanticLabel::Foliage);
            placed += 1;
        }
    }

    if ground_disk {
        let r = p.crown_radius + 1.0;
        let n = (PI * r * r * GROUND_DENSITY).round() as usize;
        for _ in 0..n {
            let rr = r * rng.random::<f64>().sqrt();
            let a = rng.random::<f64>() * 2.0 * PI;
            let q = jitter(&mut rng, [rr * a.cos(), rr * a.sin(), 0.0]);
            push(&mut pts, &mut labels, q, SemanticLabel::Ground);
        }
    }
    Ok((pts, labels))
}

/// Uniform sampling ranges for random trees. DBH is drawn as a fraction of
/// height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamRanges {
    pub height: (f64, f64),
    pub dbh_frac: (f64, f64),
    pub crown_base_frac: (f64, f64),
    pub crown_radius: (f64, f64),
    pub whorl_count: (usize, usize),
    pub foliage_density: (f64, f64),
    pub taper_exponent: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            height: (9.0, 18.0),
            dbh_frac: (0.015, 0.025),
            crown_base_frac: (0.4, 0.6),
            crown_radius: (1.8, 3.0),
            whorl_count: (4, 8),
            foliage_density: (150.0, 250.0),
            taper_exponent: (0.5, 1.0),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

impl ParamRanges {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> TreeParams {
        let height = uniform(rng, self.height);
        TreeParams {
            height,
            dbh: height * uniform(rng, self.dbh_frac),
            crown_base_frac: uniform(rng, self.crown_base_frac),
            crown_radius: uniform(rng, self.crown_radius),
            whorl_count: rng.random_range(self.whorl_count.0..=self.whorl_count.1.max(self.whorl_count.0)),
            foliage_density: uniform(rng, self.foliage_density),
            taper_exponent: uniform(rng, self.taper_exponent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub area_radius: f64,
    pub min_spacing: f64,
    /// Fraction of trees deliberately placed closer than `min_spacing` to an
    /// earlier tree.
    pub cluster_fraction: f64,
    pub ranges: ParamRanges,
    pub ground_amplitude: f64,
    pub ground_wavelength: f64,
    pub ground_cell: f64,
    /// Expected shrubs per 100 m²; 0 disables the understory.
    pub shrub_density: f64,
    pub max_attempts: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 20,
            area_radius: 25.0,
            min_spacing: 8.0,
            cluster_fraction: 0.1,
            ranges: ParamRanges::default(),
            ground_amplitude: 0.5,
            ground_wavelength: 60.0,
            ground_cell: 0.5,
            shrub_density: 1.0,
            max_attempts: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedTree {
    pub id: i32,
    pub params: TreeParams,
    pub base: [f64; 2],
    /// Ground elevation at the base.
    pub base_z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub trees: Vec<PlacedTree>,
    pub ground: GroundModel,
    /// Master cloud; every point has a label and an owner id.
    pub cloud: PointCloud,
    pub area_radius: f64,
}

fn place_bases(cfg: &ForestConfig, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>, SynthError> {
    let n = cfg.n_trees;
    let footprint = n as f64 * PI * cfg.min_spacing.powi(2) / 4.0;
    if n == 0 || footprint >= PI * cfg.area_radius.powi(2) {
        return Err(SynthError::PackingFailure { placed: 0, requested: n, attempts: 0 });
    }
    let n_cluster = ((cfg.cluster_fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n - 1);
    let cluster_idx: Vec<usize> = rand::seq::index::sample(rng, n - 1, n_cluster).into_iter().map(|i| i + 1).collect();
    let r = cfg.area_radius;
    let s = cfg.min_spacing;
    let mut bases: Vec<[f64; 2]> = Vec::with_capacity(n);
    for i in 0..n {
        let clustered = cluster_idx.contains(&i);
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > cfg.max_attempts {
                return Err(SynthError::PackingFailure { placed: i, requested: n, attempts: cfg.max_attempts });
            }
            let cand = if clustered {
                let anchor = bases[rng.random_range(0..bases.len())];
                let d = rng.random_range(0.35..0.75) * s;
                let a = rng.random::<f64>() * 2.0 * PI;
                [anchor[0] + d * a.cos(), anchor[1] + d * a.sin()]
            } else {
                let rr = r * rng.random::<f64>().sqrt();
                let a = rng.random::<f64>() * 2.0 * PI;
                [rr * a.cos(), rr * a.sin()]
            };
            if cand[0].hypot(cand[1]) > r {
                continue;
            }
            let min_d = if clustered { 0.35 * s } else { s };
            if bases.iter().all(|b| (b[0] - cand[0]).hypot(b[1] - cand[1]) >= min_d) {
                bases.push(cand);
                break;
            }
        }
    }
    Ok(bases)
}

fn shrub_points(center: Point3, rng: &mut ChaCha8Rng, ground: &GroundModel) -> Vec<Point3> {
    let rx = rng.random_range(0.4..1.2);
    let rz = rng.random_range(0.3..0.8);
    let n = (4.0 / 3.0 * PI * rx * rx * rz * 300.0).round() as usize;
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0f64)];
        if u[0] * u[0] + u[1] * u[1] + u[2] * u[2] <= 1.0 {
            let x = center[0] + rx * u[0];
            let y = center[1] + rx * u[1];
            let z = ground.elevation(x, y) + 2.0 * rz * u[2];
            out.push([x + noise.sample(rng), y + noise.sample(rng), z + noise.sample(rng)]);
        }
    }
    out
}

/// Ground undulation used by [`generate_forest`].
pub fn ground_function(cfg: &ForestConfig, seed: u64) -> impl Fn(f64, f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p1: f64 = rng.random::<f64>() * 2.0 * PI;
    let p2: f64 = rng.random::<f64>() * 2.0 * PI;
    let a = cfg.ground_amplitude;
    let k = 2.0 * PI / cfg.ground_wavelength.max(1e-6);
    move |x: f64, y: f64| a * (k * x + p1).sin() * (k * y + p2).cos()
}

pub fn generate_forest(cfg: &ForestConfig, seed: u64) -> Result<LabeledScene, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let bases = place_bases(cfg, &mut rng)?;
    let params: Vec<TreeParams> = bases.iter().map(|_| cfg.ranges.draw(&mut rng)).collect();
    for p in &params {
        p.validate()?;
    }
    let margin = cfg.ranges.crown_radius.1 + 5.0;
    let lo = [-cfg.area_radius - margin; 2];
    let hi = [cfg.area_radius + margin; 2];
    let gfun = ground_function(cfg, derive_seed(seed, 1));
    let ground = GroundModel::from_fn(lo, hi, cfg.ground_cell, &gfun);

    let trees: Vec<PlacedTree> = bases
        .iter()
        .zip(&params)
        .enumerate()
        .map(|(i, (b, p))| PlacedTree { id: i as i32, params: *p, base: *b, base_z: ground.elevation(b[0], b[1]) })
        .collect();
    let area = PI * cfg.area_radius.powi(2);
    let n_shrubs = (cfg.shrub_density * area / 100.0).round() as usize;
    let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut shrubs = Vec::new();
    for _ in 0..n_shrubs {
        let rr = cfg.area_radius * srng.random::<f64>().sqrt();
        let a = srng.random::<f64>() * 2.0 * PI;
        shrubs.extend(shrub_points([rr * a.cos(), rr * a.sin(), 0.0], &mut srng, &ground));
    }
    Ok(assemble(trees, ground, cfg.area_radius, shrubs, seed))
}

/// Scene from explicitly placed trees on the given ground, without
/// understory. Tree ids are reassigned to list positions.
pub fn compose_scene(trees: &[(TreeParams, [f64; 2])], ground: GroundModel, area_radius: f64, seed: u64) -> Result<LabeledScene, SynthError> {
    for (p, _) in trees {
        p.validate()?;
    }
    let placed = trees
        .iter()
        .enumerate()
        .map(|(i, (p, b))| PlacedTree { id: i as i32, params: *p, base: *b, base_z: ground.elevation(b[0], b[1]) })
        .collect();
    Ok(assemble(placed, ground, area_radius, Vec::new(), seed))
}

fn assemble(trees: Vec<PlacedTree>, ground: GroundModel, area_radius: f64, shrubs: Vec<Point3>, seed: u64) -> LabeledScene {
    let per_tree: Vec<(Vec<Point3>, Vec<SemanticLabel>)> = crate::with_workers(|| {
        trees
            .par_iter()
            .map(|t| {
                let (pts, labels) = tree_points(&t.params, derive_seed(seed, 100 + t.id as u64), false).expect("validated");
                let pts = pts.into_iter().map(|q| [q[0] + t.base[0], q[1] + t.base[1], q[2] + t.base_z]).collect();
                (pts, labels)
            })
            .collect()
    });
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    let mut owners = Vec::new();
    for (t, (p, l)) in trees.iter().zip(per_tree) {
        owners.extend(std::iter::repeat_n(t.id, p.len()));
        pts.extend(p);
        labels.extend(l);
    }
    owners.extend(std::iter::repeat_n(NO_OWNER, shrubs.len()));
    labels.extend(std::iter::repeat_n(SemanticLabel::LowVeg, shrubs.len()));
    pts.extend(shrubs);

    // Ground samples on a jittered lattice over the plot disk.
    let mut grng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let step = 1.0 / GROUND_DENSITY.sqrt();
    let r = area_radius;
    let mut y = -r;
    while y <= r {
        let mut x = -r;
        while x <= r {
            let px = x + grng.random_range(-0.5..0.5) * step;
            let py = y + grng.random_range(-0.5..0.5) * step;
            if px.hypot(py) <= r {
                pts.push([px, py, ground.elevation(px, py) + noise.sample(&mut grng)]);
                labels.push(SemanticLabel::Ground);
                owners.push(NO_OWNER);
            }
            x += step;
        }
        y += step;
    }

    let cloud = PointCloud::new(pts).expect("finite").with_labels(labels).expect("sized").with_owners(owners).expect("sized");
    LabeledScene { trees, ground, cloud, area_radius }
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    area_radius: f64,
}

/// Writes `cloud.ply`, `trees.json`, `ground.csv` and `scene.json` into `dir`.
pub fn save_scene(scene: &LabeledScene, dir: &Path) -> Result<(), SynthError> {
    let io = |e: std::io::Error| SynthError::Io(IoError::Io { path: dir.display().to_string(), source: e });
    fs::create_dir_all(dir).map_err(io)?;
    write_cloud(&dir.join("cloud.ply"), &scene.cloud)?;
    fs::write(dir.join("trees.json"), serde_json::to_string_pretty(&scene.trees).unwrap()).map_err(io)?;
    fs::write(dir.join("ground.csv"), scene.ground.to_csv()).map_err(io)?;
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&SceneMeta { area_radius: scene.area_radius }).unwrap())
        .map_err(io)?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<LabeledScene, SynthError> {
    let read = |name: &str| {
        fs::read_to_string(dir.join(name))
            .map_err(|e| SynthError::Io(IoError::Io { path: dir.join(name).display().to_string(), source: e }))
    };
    let cloud = read_cloud(&dir.join("cloud.ply"))?;
    let trees: Vec<PlacedTree> =
        serde_json::from_str(&read("trees.json")?).map_err(|e| SynthError::Format("trees.json".into(), e.to_string()))?;
    let ground = GroundModel::from_csv(&read("ground.csv")?).map_err(|e| SynthError::Format("ground.csv".into(), e))?;
    let meta: SceneMeta =
        serde_json::from_str(&read("scene.json")?).map_err(|e| SynthError::Format("scene.json".into(), e.to_string()))?;
    Ok(LabeledScene { trees, ground, cloud, area_radius: meta.area_radius })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> TreeParams {
        TreeParams {
            height: 10.0,
            dbh: 0.3,
            crown_base_frac: 0.5,
            crown_radius: 2.0,
            whorl_count: 5,
            foliage_density: 100.0,
            taper_exponent: 0.0,
        }
    }

    #[test]
    fn untapered_stem_radius_at_breast_height() {
        let c = generate_tree(&params(), 1).unwrap();
        let labels = c.labels().unwrap();
        let radii: Vec<f64> = c
            .points()
            .iter()
            .zip(labels)
            .filter(|(p, l)| **l == SemanticLabel::Stem && (p[2] - 1.37).abs() < 0.05)
            .map(|(p, _)| p[0].hypot(p[1]))
            .collect();
        assert!(radii.len() > 20);
        let mean = radii.iter().sum::<f64>() / radii.len() as f64;
        assert!((mean - 0.15).abs() < NOISE_SIGMA, "{mean}");
    }

    #[test]
    fn tip_height_and_crown_extent() {
        for seed in 0..10 {
            let p = TreeParams { taper_exponent: 0.8, ..params() };
            let c = generate_tree(&p, seed).unwrap();
            let zmax = c.points().iter().map(|q| q[2]).fold(f64::MIN, f64::max);
            assert!((zmax - 10.0).abs() < 4.0 * NOISE_SIGMA, "{zmax}");
            let fol_r = c
                .points()
                .iter()
                .zip(c.labels().unwrap())
                .filter(|(_, l)| **l == SemanticLabel::Foliage)
                .map(|(q, _)| q[0].hypot(q[1]))
                .fold(0.0, f64::max);
            assert!(fol_r <= p.crown_radius + 3.0 * NOISE_SIGMA * std::f64::consts::SQRT_2, "{fol_r}");
        }
    }

    #[test]
    fn deterministic_and_invalid() {
        assert_eq!(generate_tree(&params(), 4).unwrap(), generate_tree(&params(), 4).unwrap());
        assert!(generate_tree(&TreeParams { dbh: 20.0, ..params() }, 0).is_err());
        assert!(generate_tree(&TreeParams { crown_base_frac: 1.0, ..params() }, 0).is_err());
    }

    fn small_forest(n: usize, cluster: f64) -> ForestConfig {
        ForestConfig {
            n_trees: n,
            cluster_fraction: cluster,
            ranges: ParamRanges { height: (6.0, 8.0), foliage_density: (20.0, 30.0), ..ParamRanges::default() },
            shrub_density: 0.5,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn spacing_respected_without_clusters() {
        let s = generate_forest(&small_forest(20, 0.0), 3).unwrap();
        for (i, a) in s.trees.iter().enumerate() {
            for b in &s.trees[i + 1..] {
                assert!((a.base[0] - b.base[0]).hypot(a.base[1] - b.base[1]) >= 8.0);
            }
        }
    }

    #[test]
    fn cluster_count_matches_fraction() {
        let s = generate_forest(&small_forest(20, 0.3), 5).unwrap();
        let close = (1..s.trees.len())
            .filter(|&j| {
                s.trees[..j].iter().any(|a| (a.base[0] - s.trees[j].base[0]).hypot(a.base[1] - s.trees[j].base[1]) < 8.0)
            })
            .count();
        assert_eq!(close, 6);
    }

    #[test]
    fn single_tree_scene_owners_and_labels() {
        let s = generate_forest(&small_forest(1, 0.0), 9).unwrap();
        let mut owners: Vec<i32> = s.cloud.owners().unwrap().to_vec();
        owners.sort_unstable();
        owners.dedup();
        assert_eq!(owners, vec![NO_OWNER, 0]);
        assert_eq!(s.cloud.labels().unwrap().len(), s.cloud.len());
        // each tree point within crown_radius + dbh of its axis
        let t = &s.trees[0];
        for (q, o) in s.cloud.points().iter().zip(s.cloud.owners().unwrap()) {
            if *o == 0 {
                assert!((q[0] - t.base[0]).hypot(q[1] - t.base[1]) <= t.params.crown_radius + t.params.dbh);
            }
        }
    }

    #[test]
    fn infeasible_packing_fails() {
        let cfg = ForestConfig { n_trees: 100, area_radius: 10.0, ..small_forest(1, 0.0) };
        assert!(matches!(generate_forest(&cfg, 0), Err(SynthError::PackingFailure { .. })));
    }

    #[test]
    fn scene_round_trip() {
        let s = generate_forest(&small_forest(2, 0.0), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&s, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.trees, s.trees);
        assert_eq!(back.cloud.len(), s.cloud.len());
        assert_eq!(back.cloud.owners(), s.cloud.owners());
    }
}
