//! Top-down tree detection: canopy height model, local maxima, seeded region
//! growing, and vertical expansion of each 2D footprint.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::biometrics::estimate_ground;
use crate::geom::{BBox3, GroundModel, PointCloud};

pub use crate::geom::crop;

/// Gridded canopy height above ground; `None` marks cells without points.
#[derive(Debug, Clone, PartialEq)]
pub struct ChmGrid {
    pub cell: f64,
    pub origin: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<Option<f64>>,
}

impl ChmGrid {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[j * self.nx + i]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [self.origin[0] + (i as f64 + 0.5) * self.cell, self.origin[1] + (j as f64 + 0.5) * self.cell]
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x - self.origin[0]) / self.cell;
        let fy = (y - self.origin[1]) / self.cell;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (i, j) = (fx as usize, fy as usize);
        (i < self.nx && j < self.ny).then_some((i, j))
    }

    pub fn max_value(&self) -> Option<f64> {
        self.values.iter().flatten().copied().fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }
}

pub fn rasterize_chm(cloud: &PointCloud, cell: f64, ground: &GroundModel) -> ChmGrid {
    assert!(cell > 0.0, "cell size must be positive");
    let Some(bb) = cloud.bbox() else {
        return ChmGrid { cell, origin: [0.0, 0.0], nx: 0, ny: 0, values: Vec::new() };
    };
    let origin = [bb.min[0], bb.min[1]];
    let nx = ((bb.max[0] - origin[0]) / cell).floor() as usize + 1;
    let ny = ((bb.max[1] - origin[1]) / cell).floor() as usize + 1;
    let mut top = vec![f64::NEG_INFINITY; nx * ny];
    for p in cloud.points() {
        let i = (((p[0] - origin[0]) / cell) as usize).min(nx - 1);
        let j = (((p[1] - origin[1]) / cell) as usize).min(ny - 1);
        let k = j * nx + i;
        top[k] = top[k].max(p[2]);
    }
    let mut grid = ChmGrid { cell, origin, nx, ny, values: vec![None; nx * ny] };
    for j in 0..ny {
        for i in 0..nx {
            let z = top[j * nx + i];
            if z.is_finite() {
                let c = grid.cell_center(i, j);
                grid.values[j * nx + i] = Some((z - ground.elevation(c[0], c[1])).max(0.0));
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub cell: f64,
    pub min_height: f64,
    /// Mean-filter radius in cells.
    pub smooth_radius: usize,
    pub min_footprint: usize,
    /// Region growing stops where the smoothed CHM falls below this fraction
    /// of the seed's height.
    pub descent_fraction: f64,
    /// Half-width in cells of the local-maximum window.
    pub maxima_radius: usize,
    pub ground_cell: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { cell: 0.5, min_height: 2.0, smooth_radius: 1, min_footprint: 4, descent_fraction: 0.2, maxima_radius: 3, ground_cell: 1.0 }
    }
}

fn smooth(chm: &ChmGrid, r: usize) -> Vec<f64> {
    let (nx, ny) = (chm.nx, chm.ny);
    let raw: Vec<f64> = chm.values.iter().map(|v| v.unwrap_or(0.0)).collect();
    let mut out = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let (mut s, mut n) = (0.0, 0usize);
            for jj in j.saturating_sub(r)..=(j + r).min(ny - 1) {
                for ii in i.saturating_sub(r)..=(i + r).min(nx - 1) {
                    s += raw[jj * nx + ii];
                    n += 1;
                }
            }
            out[j * nx + i] = s / n as f64;
        }
    }
    out
}

/// Per-region output of [`detect_trees_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox3,
    pub seed_xy: [f64; 2],
    pub seed_height: f64,
    pub cells: usize,
}

pub fn detect_trees(cloud: &PointCloud, cfg: &DetectConfig) -> Vec<BBox3> {
    detect_trees_detailed(cloud, cfg).into_iter().map(|d| d.bbox).collect()
}

pub fn detect_trees_detailed(cloud: &PointCloud, cfg: &DetectConfig) -> Vec<Detection> {
    assert!(cfg.min_height > 0.0, "min_height must be positive");
    if cloud.is_empty() {
        return Vec::new();
    }
    let ground = estimate_ground(cloud, cfg.ground_cell);
    let chm = rasterize_chm(cloud, cfg.cell, &ground);
    let (nx, ny) = (chm.nx, chm.ny);
    let h = smooth(&chm, cfg.smooth_radius);

    // Seeds: cells above min_height that beat every neighbor in the window;
    // equal values defer to the lower linear index.
    let w = cfg.maxima_radius;
    let mut seeds = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            let v = h[k];
            if v < cfg.min_height {
                continue;
            }
            let mut is_max = true;
            'win: for jj in j.saturating_sub(w)..=(j + w).min(ny - 1) {
                for ii in i.saturating_sub(w)..=(i + w).min(nx - 1) {
                    let kk = jj * nx + ii;
                    if kk != k && (h[kk] > v || (h[kk] == v && kk < k)) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                seeds.push(k);
            }
        }
    }
    seeds.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));

    // Multi-source breadth-first growth: each cell joins the seed that
    // reaches it first while it stays above that seed's descent threshold.
    let mut owner = vec![usize::MAX; nx * ny];
    let mut queue = VecDeque::new();
    for (s, &k) in seeds.iter().enumerate() {
        owner[k] = s;
        queue.push_back(k);
    }
    while let Some(k) = queue.pop_front() {
        let s = owner[k];
        let floor = cfg.descent_fraction * h[seeds[s]];
        let (i, j) = ((k % nx) as i64, (k / nx) as i64);
        for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)] {
            let (ii, jj) = (i + di, j + dj);
            if ii < 0 || jj < 0 || ii >= nx as i64 || jj >= ny as i64 {
                continue;
            }
            let kk = jj as usize * nx + ii as usize;
            if owner[kk] == usize::MAX && h[kk] >= floor && h[kk] > 0.0 {
                owner[kk] = s;
                queue.push_back(kk);
            }
        }
    }

    let mut ext = vec![(usize::MAX, usize::MAX, 0usize, 0usize, 0usize); seeds.len()];
    for (k, &s) in owner.iter().enumerate() {
        if s == usize::MAX {
            continue;
        }
        let (i, j) = (k % nx, k / nx);
        let e = &mut ext[s];
        e.0 = e.0.min(i);
        e.1 = e.1.min(j);
        e.2 = e.2.max(i);
        e.3 = e.3.max(j);
        e.4 += 1;
    }

    let mut out = Vec::new();
    for (s, e) in ext.iter().enumerate() {
        if e.4 < cfg.min_footprint {
            continue;
        }
        let x0 = chm.origin[0] + e.0 as f64 * chm.cell;
        let y0 = chm.origin[1] + e.1 as f64 * chm.cell;
        let x1 = chm.origin[0] + (e.2 + 1) as f64 * chm.cell;
        let y1 = chm.origin[1] + (e.3 + 1) as f64 * chm.cell;
        let (mut zlo, mut zhi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in cloud.points() {
            if p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1 {
                zlo = zlo.min(p[2]);
                zhi = zhi.max(p[2]);
            }
        }
        if !(zhi - zlo >= cfg.min_height) {
            continue;
        }
        let k = seeds[s];
        out.push(Detection {
            bbox: BBox3::new([x0, y0, zlo], [x1, y1, zhi]),
            seed_xy: chm.cell_center(k % nx, k / nx),
            seed_height: h[k],
            cells: e.4,
        });
    }
    out.sort_by(|a, b| {
        b.bbox
            .footprint_area()
            .total_cmp(&a.bbox.footprint_area())
            .then(a.bbox.min[0].total_cmp(&b.bbox.min[0]))
            .then(a.bbox.min[1].total_cmp(&b.bbox.min[1]))
    });
    out
}

/// Number of box pairs whose 2D footprints intersect.
pub fn overlap_count(boxes: &[BBox3]) -> usize {
    let mut n = 0;
    for (i, a) in boxes.iter().enumerate() {
        for b in &boxes[i + 1..] {
            if a.min[0] < b.max[0] && b.min[0] < a.max[0] && a.min[1] < b.max[1] && b.min[1] < a.max[1] {
                n += 1;
            }
        }
    }
    n
}

pub fn boxes_to_json(boxes: &[BBox3]) -> String {
    serde_json::to_string_pretty(boxes).expect("serializable")
}

pub fn boxes_from_json(text: &str) -> Result<Vec<BBox3>, serde_json::Error> {
    serde_json::from_str(text)
}
