//! Per-tree metrics (height, DBH, crown diameter, crown volume) and
//! distribution comparisons between sensing sources.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{crop, BBox3, ConvexHull3, GroundModel, Point3, PointCloud, SemanticLabel};
use crate::metrics::wasserstein_1d;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BiometricError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
}

/// Cells whose low percentile sits this far above the lowest cell within
/// `REJECT_RADIUS` are treated as canopy and refilled.
const REJECT_TOL: f64 = 1.0;
const REJECT_RADIUS: f64 = 5.0;
const LOW_BAND: f64 = 0.3;

pub fn estimate_ground(cloud: &PointCloud, cell: f64) -> GroundModel {
    assert!(cell > 0.0, "cell size must be positive");
    let Some(bb) = cloud.bbox() else {
        return GroundModel::flat(0.0);
    };
    let origin = [bb.min[0], bb.min[1]];
    let nx = ((bb.max[0] - origin[0]) / cell).floor() as usize + 1;
    let ny = ((bb.max[1] - origin[1]) / cell).floor() as usize + 1;
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); nx * ny];
    for p in cloud.points() {
        let i = (((p[0] - origin[0]) / cell) as usize).min(nx - 1);
        let j = (((p[1] - origin[1]) / cell) as usize).min(ny - 1);
        buckets[j * nx + i].push(p[2]);
    }
    let mut z: Vec<Option<f64>> = buckets
        .into_iter()
        .map(|mut b| {
            if b.is_empty() {
                return None;
            }
            b.sort_by(f64::total_cmp);
            // Canopy can outnumber ground returns in a cell, so the
            // percentile is taken over the band just above the cell minimum.
            let band = b.partition_point(|&z| z <= b[0] + LOW_BAND);
            Some(b[((band - 1) as f64 * 0.05).round() as usize])
        })
        .collect();

    let r = (REJECT_RADIUS / cell).ceil() as usize;
    let reject: Vec<bool> = (0..nx * ny)
        .map(|k| {
            let Some(v) = z[k] else { return false };
            let (i, j) = (k % nx, k / nx);
            let mut lo = v;
            for jj in j.saturating_sub(r)..=(j + r).min(ny - 1) {
                for ii in i.saturating_sub(r)..=(i + r).min(nx - 1) {
                    if let Some(w) = z[jj * nx + ii] {
                        lo = lo.min(w);
                    }
                }
            }
            v - lo > REJECT_TOL
        })
        .collect();
    for (k, r) in reject.into_iter().enumerate() {
        if r {
            z[k] = None;
        }
    }

    // Nearest-occupied fill by breadth-first flooding from every valid cell.
    let mut filled = z.clone();
    let mut queue: VecDeque<usize> = (0..nx * ny).filter(|&k| z[k].is_some()).collect();
    while let Some(k) = queue.pop_front() {
        let v = filled[k];
        let (i, j) = ((k % nx) as i64, (k / nx) as i64);
        for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (ii, jj) = (i + di, j + dj);
            if ii < 0 || jj < 0 || ii >= nx as i64 || jj >= ny as i64 {
                continue;
            }
            let kk = jj as usize * nx + ii as usize;
            if filled[kk].is_none() {
                filled[kk] = v;
                queue.push_back(kk);
            }
        }
    }
    let nodes = filled.into_iter().map(|v| v.unwrap_or(bb.min[2])).collect();
    GroundModel::new([origin[0] + 0.5 * cell, origin[1] + 0.5 * cell], cell, nx, ny, nodes)
}

pub fn tree_height(cloud: &PointCloud, ground: &GroundModel) -> f64 {
    let Some(top) = cloud.points().iter().copied().max_by(|a, b| a[2].total_cmp(&b[2])) else {
        return 0.0;
    };
    (top[2] - ground.elevation(top[0], top[1])).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacCircleConfig {
    pub breast_height: f64,
    pub slice_half_width: f64,
    pub slice_heights: Vec<f64>,
    pub iterations: usize,
    pub inlier_tol: f64,
    pub min_inliers: usize,
    /// Hypotheses with a larger radius are discarded.
    pub max_radius: f64,
    /// Removes the outward bias `s^2 / 2r` that tangential point noise adds
    /// to a fitted radius, with `s^2` the inlier residual variance.
    pub noise_correction: bool,
}

impl Default for RansacCircleConfig {
    fn default() -> Self {
        Self {
            breast_height: 1.37,
            slice_half_width: 0.05,
            slice_heights: (0..14).map(|i| 0.7 + 0.1 * i as f64).collect(),
            iterations: 500,
            inlier_tol: 0.05,
            min_inliers: 10,
            max_radius: 1.0,
            noise_correction: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

fn circle_through(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<Circle> {
    let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
    if d.abs() < 1e-12 {
        return None;
    }
    let (a2, b2, c2) = (a[0] * a[0] + a[1] * a[1], b[0] * b[0] + b[1] * b[1], c[0] * c[0] + c[1] * c[1]);
    let cx = (a2 * (b[1] - c[1]) + b2 * (c[1] - a[1]) + c2 * (a[1] - b[1])) / d;
    let cy = (a2 * (c[0] - b[0]) + b2 * (a[0] - c[0]) + c2 * (b[0] - a[0])) / d;
    Some(Circle { cx, cy, r: (a[0] - cx).hypot(a[1] - cy) })
}

/// Algebraic (Kasa) fit followed by Gauss-Newton on geometric residuals.
pub fn fit_circle(pts: &[[f64; 2]]) -> Option<Circle> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut suu, mut suv, mut svv, mut suuu, mut svvv, mut suvv, mut svuu) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for p in pts {
        let (u, v) = (p[0] - mx, p[1] - my);
        suu += u * u;
        suv += u * v;
        svv += v * v;
        suuu += u * u * u;
        svvv += v * v * v;
        suvv += u * v * v;
        svuu += v * u * u;
    }
    let det = suu * svv - suv * suv;
    if det.abs() < 1e-18 {
        return None;
    }
    let r1 = 0.5 * (suuu + suvv);
    let r2 = 0.5 * (svvv + svuu);
    let uc = (r1 * svv - r2 * suv) / det;
    let vc = (suu * r2 - suv * r1) / det;
    let mut c = Circle { cx: uc + mx, cy: vc + my, r: (uc * uc + vc * vc + (suu + svv) / n).sqrt() };
    for _ in 0..20 {
        // Normal equations of the 3-parameter geometric least squares.
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for p in pts {
            let (dx, dy) = (p[0] - c.cx, p[1] - c.cy);
            let d = dx.hypot(dy);
            if d < 1e-12 {
                continue;
            }
            let res = d - c.r;
            let j = [-dx / d, -dy / d, -1.0];
            for a in 0..3 {
                jtr[a] += j[a] * res;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let Some(step) = solve3(jtj, jtr) else { break };
        c.cx -= step[0];
        c.cy -= step[1];
        c.r -= step[2];
        if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-12 {
            break;
        }
    }
    (c.r.is_finite() && c.r > 0.0).then_some(c)
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det3 = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det3(a);
    if d.abs() < 1e-18 {
        return None;
    }
    let mut x = [0.0; 3];
    for (k, xk) in x.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][k] = b[r];
        }
        *xk = det3(m) / d;
    }
    Some(x)
}

fn inliers(pts: &[[f64; 2]], c: &Circle, tol: f64) -> Vec<[f64; 2]> {
    pts.iter().copied().filter(|p| ((p[0] - c.cx).hypot(p[1] - c.cy) - c.r).abs() <= tol).collect()
}

/// RANSAC circle for one slice; `None` when fewer than `min_inliers` agree.
pub fn ransac_circle(pts: &[[f64; 2]], cfg: &RansacCircleConfig, rng: &mut impl Rng) -> Option<Circle> {
    if pts.len() < cfg.min_inliers.max(3) {
        return None;
    }
    let n = pts.len();
    let mut best: Option<(usize, Circle)> = None;
    for _ in 0..cfg.iterations {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let c = rng.random_range(0..n);
        if a == b || b == c || a == c {
            continue;
        }
        let Some(h) = circle_through(pts[a], pts[b], pts[c]) else { continue };
        if h.r > cfg.max_radius {
            continue;
        }
        let count = pts.iter().filter(|p| ((p[0] - h.cx).hypot(p[1] - h.cy) - h.r).abs() <= cfg.inlier_tol).count();
        if best.is_none_or(|(bc, _)| count > bc) {
            best = Some((count, h));
        }
    }
    let (count, hyp) = best?;
    if count < cfg.min_inliers {
        return None;
    }
    let mut c = fit_circle(&inliers(pts, &hyp, cfg.inlier_tol))?;
    let mut second = inliers(pts, &c, cfg.inlier_tol);
    if second.len() >= cfg.min_inliers {
        c = fit_circle(&second).unwrap_or(c);
        second = inliers(pts, &c, cfg.inlier_tol);
    }
    if cfg.noise_correction && !second.is_empty() {
        let s2 = second.iter().map(|p| ((p[0] - c.cx).hypot(p[1] - c.cy) - c.r).powi(2)).sum::<f64>() / second.len() as f64;
        c.r = (c.r * c.r - s2).max(0.0).sqrt();
    }
    (c.r > 0.0 && c.r <= cfg.max_radius).then_some(c)
}

/// Fitted circle radius per accepted slice height.
pub fn stem_profile(cloud: &PointCloud, ground: &GroundModel, cfg: &RansacCircleConfig, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &h in &cfg.slice_heights {
        let slice: Vec<[f64; 2]> = cloud
            .points()
            .iter()
            .filter(|p| (p[2] - ground.elevation(p[0], p[1]) - h).abs() <= cfg.slice_half_width)
            .map(|p| [p[0], p[1]])
            .collect();
        if let Some(c) = ransac_circle(&slice, cfg, &mut rng) {
            out.push((h, c.r));
        }
    }
    out
}

pub fn dbh_ransac(cloud: &PointCloud, ground: &GroundModel, cfg: &RansacCircleConfig, seed: u64) -> Option<f64> {
    let prof = stem_profile(cloud, ground, cfg, seed);
    if prof.len() < 2 {
        return None;
    }
    let n = prof.len() as f64;
    let mh = prof.iter().map(|p| p.0).sum::<f64>() / n;
    let mr = prof.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = prof.iter().map(|p| (p.0 - mh).powi(2)).sum();
    let sxy: f64 = prof.iter().map(|p| (p.0 - mh) * (p.1 - mr)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r = mr + slope * (cfg.breast_height - mh);
    (r > 0.0).then_some(2.0 * r)
}

fn hull_2d(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut h: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = h.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while h.len() >= start + 2 && cross(h[h.len() - 2], h[h.len() - 1], p) <= 0.0 {
                h.pop();
            }
            h.push(p);
        }
        h.pop();
    }
    h
}

pub fn crown_diameter(foliage: &PointCloud) -> Result<f64, BiometricError> {
    if foliage.len() < 2 {
        return Err(BiometricError::TooFewPoints { need: 2, got: foliage.len() });
    }
    let h = hull_2d(foliage.points().iter().map(|p| [p[0], p[1]]).collect());
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let m = h.len();
    if m < 3 {
        return Ok(if m == 2 { d2(h[0], h[1]).sqrt() } else { 0.0 });
    }
    let area = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs();
    // Rotating calipers over antipodal vertex pairs.
    let mut best = 0.0f64;
    let mut j = 1;
    for i in 0..m {
        let ni = (i + 1) % m;
        while area(h[i], h[ni], h[(j + 1) % m]) > area(h[i], h[ni], h[j]) {
            j = (j + 1) % m;
        }
        best = best.max(d2(h[i], h[j])).max(d2(h[ni], h[j]));
    }
    Ok(best.sqrt())
}

pub fn crown_volume(foliage: &PointCloud, k: usize, seed: u64) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    let pts = foliage.points();
    if pts.len() < 4 {
        return 0.0;
    }
    let assign = kmeans(pts, k.min(pts.len()), seed);
    let kk = assign.iter().copied().max().map_or(0, |m| m + 1);
    let mut clusters: Vec<Vec<Point3>> = vec![Vec::new(); kk];
    for (p, &a) in pts.iter().zip(&assign) {
        clusters[a].push(*p);
    }
    clusters.iter().map(|c| ConvexHull3::from_points(c).map_or(0.0, |h| h.volume())).sum()
}

/// Lloyd iterations from k-means++ seeds; returns a cluster index per point.
pub fn kmeans(pts: &[Point3], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d2 = crate::geom::dist2;
    let mut centers = vec![pts[rng.random_range(0..pts.len())]];
    let mut nearest: Vec<f64> = pts.iter().map(|p| d2(*p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = pts.len() - 1;
        for (i, &w) in nearest.iter().enumerate() {
            if u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        centers.push(pts[pick]);
        for (n, p) in nearest.iter_mut().zip(pts) {
            *n = n.min(d2(*p, pts[pick]));
        }
    }
    let mut assign = vec![0usize; pts.len()];
    for iter in 0..50 {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(pts) {
            let mut best = (f64::INFINITY, 0);
            for (c, q) in centers.iter().enumerate() {
                let d = d2(*p, *q);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if *a != best.1 {
                *a = best.1;
                changed = true;
            }
        }
        if !changed && iter > 0 {
            break;
        }
        let mut sums = vec![([0.0f64; 3], 0usize); centers.len()];
        for (p, &a) in pts.iter().zip(&assign) {
            for d in 0..3 {
                sums[a].0[d] += p[d];
            }
            sums[a].1 += 1;
        }
        for (c, (s, n)) in centers.iter_mut().zip(sums) {
            if n > 0 {
                *c = s.map(|v| v / n as f64);
            }
        }
    }
    assign
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "ALS")]
    Als,
    #[serde(rename = "TLS")]
    Tls,
    #[serde(rename = "ALS+TLS")]
    AlsTls,
    #[serde(rename = "ALS+Gen")]
    AlsGen,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Als, Source::Tls, Source::AlsTls, Source::AlsGen];
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Als => "ALS",
            Source::Tls => "TLS",
            Source::AlsTls => "ALS+TLS",
            Source::AlsGen => "ALS+Gen",
        })
    }
}

impl std::str::FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Source::ALL.into_iter().find(|v| v.to_string() == s).ok_or_else(|| format!("unknown source {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiometricRecord {
    pub tree_id: usize,
    pub source: Source,
    pub height: Option<f64>,
    pub dbh: Option<f64>,
    pub crown_diameter: Option<f64>,
    pub crown_volume: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiometricConfig {
    pub ransac: RansacCircleConfig,
    pub crown_k: usize,
    pub ground_cell: f64,
    pub seed: u64,
}

impl Default for BiometricConfig {
    fn default() -> Self {
        Self { ransac: RansacCircleConfig::default(), crown_k: 5, ground_cell: 1.0, seed: 0 }
    }
}

const GROUND_BAND: f64 = 0.3;
const STEM_ZONE_TOP: f64 = 2.0;
const HIST_BIN: f64 = 0.5;

/// Stem and foliage subsets of one box by height stratification.
pub fn proxy_segment(cloud: &PointCloud, ground: &GroundModel, bbox: &BBox3) -> (PointCloud, PointCloud) {
    let pts = cloud.points();
    let agl: Vec<f64> = pts.iter().map(|p| p[2] - ground.elevation(p[0], p[1])).collect();
    let top = agl.iter().copied().fold(0.0, f64::max);
    let nbins = ((top - GROUND_BAND) / HIST_BIN).ceil().max(0.0) as usize;
    let mut hist = vec![0usize; nbins];
    for &z in &agl {
        if z > GROUND_BAND {
            hist[(((z - GROUND_BAND) / HIST_BIN) as usize).min(nbins - 1)] += 1;
        }
    }
    let zone_bins = (((STEM_ZONE_TOP - GROUND_BAND) / HIST_BIN).round() as usize).min(nbins);
    let zone = if zone_bins > 0 { hist[..zone_bins].iter().sum::<usize>() as f64 / zone_bins as f64 } else { 0.0 };
    let crown_base = (zone_bins..nbins)
        .find(|&b| hist[b] as f64 > 1.5 * zone && hist[b] >= 3)
        .map_or(0.5 * top, |b| GROUND_BAND + b as f64 * HIST_BIN);

    let in_zone: Vec<usize> = (0..pts.len()).filter(|&i| agl[i] > GROUND_BAND && agl[i] < crown_base).collect();
    let centroid = |idx: &[usize]| {
        let n = idx.len() as f64;
        [idx.iter().map(|&i| pts[i][0]).sum::<f64>() / n, idx.iter().map(|&i| pts[i][1]).sum::<f64>() / n]
    };
    let mut axis = [bbox.center()[0], bbox.center()[1]];
    if !in_zone.is_empty() {
        axis = centroid(&in_zone);
        let near: Vec<usize> = in_zone.iter().copied().filter(|&i| (pts[i][0] - axis[0]).hypot(pts[i][1] - axis[1]) <= 1.0).collect();
        if !near.is_empty() {
            axis = centroid(&near);
        }
    }
    let stem: Vec<usize> = in_zone.into_iter().filter(|&i| (pts[i][0] - axis[0]).hypot(pts[i][1] - axis[1]) <= 0.5).collect();
    let foliage: Vec<usize> = (0..pts.len()).filter(|&i| agl[i] >= crown_base).collect();
    (cloud.select(&stem), cloud.select(&foliage))
}

/// Label-aware split; restricted to the dominant owner when owners exist.
fn labeled_segment(cloud: &PointCloud) -> (PointCloud, PointCloud, PointCloud) {
    let labels = cloud.labels().expect("labels");
    let keep: Option<i32> = cloud.owners().and_then(|owners| {
        let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
        for (o, l) in owners.iter().zip(labels) {
            if *l != SemanticLabel::Ground && *o >= 0 {
                *counts.entry(*o).or_default() += 1;
            }
        }
        counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(o, _)| o)
    });
    let owned = |i: usize| keep.is_none_or(|k| cloud.owners().is_some_and(|o| o[i] == k));
    let tree = cloud.filter_indices(|i, _| labels[i] != SemanticLabel::Ground && labels[i] != SemanticLabel::LowVeg && owned(i));
    let stem = cloud.filter_indices(|i, _| labels[i] == SemanticLabel::Stem && owned(i));
    let foliage = cloud.filter_indices(|i, _| labels[i] == SemanticLabel::Foliage && owned(i));
    (tree, stem, foliage)
}

pub fn tree_biometrics(
    cloud: &PointCloud,
    ground: &GroundModel,
    bbox: &BBox3,
    id: usize,
    source: Source,
    cfg: &BiometricConfig,
) -> BiometricRecord {
    let seed = crate::derive_seed(cfg.seed, id as u64);
    let (tree, stem, foliage) = if cloud.labels().is_some() {
        labeled_segment(cloud)
    } else {
        let (s, f) = proxy_segment(cloud, ground, bbox);
        (cloud.clone(), s, f)
    };
    let height = (!tree.is_empty()).then(|| tree_height(&tree, ground)).filter(|&h| h > 0.0);
    let dbh = dbh_ransac(&stem, ground, &cfg.ransac, seed);
    let crown_diameter = crown_diameter(&foliage).ok().filter(|&d| d > 0.0);
    let crown_volume = Some(crown_volume(&foliage, cfg.crown_k, crate::derive_seed(seed, 1))).filter(|&v| v > 0.0);
    BiometricRecord { tree_id: id, source, height, dbh, crown_diameter, crown_volume }
}

pub fn plot_biometrics(cloud: &PointCloud, boxes: &[BBox3], source: Source, cfg: &BiometricConfig) -> Vec<BiometricRecord> {
    if boxes.is_empty() || cloud.is_empty() {
        return boxes
            .iter()
            .enumerate()
            .map(|(id, _)| BiometricRecord { tree_id: id, source, height: None, dbh: None, crown_diameter: None, crown_volume: None })
            .collect();
    }
    let ground = estimate_ground(cloud, cfg.ground_cell);
    boxes.par_iter().enumerate().map(|(id, b)| tree_biometrics(&crop(cloud, b), &ground, b, id, source, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Height,
    Dbh,
    Crd,
    Crv,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Height, Metric::Dbh, Metric::Crd, Metric::Crv];

    pub fn get(self, r: &BiometricRecord) -> Option<f64> {
        match self {
            Metric::Height => r.height,
            Metric::Dbh => r.dbh,
            Metric::Crd => r.crown_diameter,
            Metric::Crv => r.crown_volume,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Height => "height",
            Metric::Dbh => "dbh",
            Metric::Crd => "crd",
            Metric::Crv => "crv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    /// `None` when either side has no values.
    pub wd: Option<f64>,
    pub n_source: usize,
    pub n_reference: usize,
    pub dropped_source: usize,
    pub dropped_reference: usize,
}

/// Source name → metric name → comparison against the reference source.
pub type ComparisonTable = BTreeMap<String, BTreeMap<String, MetricComparison>>;

pub fn compare_sources(records: &[BiometricRecord], reference: Source) -> ComparisonTable {
    let values = |s: Source, m: Metric| {
        let all: Vec<Option<f64>> = records.iter().filter(|r| r.source == s).map(|r| m.get(r)).collect();
        let present: Vec<f64> = all.iter().flatten().copied().collect();
        let dropped = all.len() - present.len();
        (present, dropped)
    };
    let present: Vec<Source> = Source::ALL.into_iter().filter(|s| records.iter().any(|r| r.source == *s)).collect();
    let mut table = ComparisonTable::new();
    for s in present.into_iter().filter(|&s| s != reference) {
        let mut row = BTreeMap::new();
        for m in Metric::ALL {
            let (a, da) = values(s, m);
            let (b, db) = values(reference, m);
            row.insert(
                m.name().to_string(),
                MetricComparison {
                    wd: wasserstein_1d(&a, &b).ok(),
                    n_source: a.len(),
                    n_reference: b.len(),
                    dropped_source: da,
                    dropped_reference: db,
                },
            );
        }
        table.insert(s.to_string(), row);
    }
    table
}

pub fn records_to_csv(records: &[BiometricRecord]) -> String {
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    let mut out = String::from("tree_id,source,height_m,dbh_m,crd_m,crv_m3\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.tree_id,
            r.source,
            cell(r.height),
            cell(r.dbh),
            cell(r.crown_diameter),
            cell(r.crown_volume)
        ));
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<BiometricRecord>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("tree_id,source,height_m,dbh_m,crd_m,crv_m3") {
        return Err("bad header".into());
    }
    let opt = |s: &str| -> Result<Option<f64>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| format!("{s:?}: {e}"))
        }
    };
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(format!("expected 6 fields in {l:?}"));
            }
            Ok(BiometricRecord {
                tree_id: f[0].parse().map_err(|e| format!("{e}"))?,
                source: f[1].parse()?,
                height: opt(f[2])?,
                dbh: opt(f[3])?,
                crown_diameter: opt(f[4])?,
                crown_volume: opt(f[5])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
