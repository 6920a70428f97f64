use std::collections::HashMap;

use crate::geom::{GroundModel, Point3, SemanticLabel};
use crate::synthforest::LabeledScene;

const GROUND_STEP: f64 = 0.25;

pub(crate) enum Hit {
    Point(usize),
    Ground(Point3),
}

/// Voxel occupancy of the non-ground master points, with the points of each
/// occupied voxel stored contiguously.
pub struct OccupancyGrid {
    pub origin: Point3,
    pub voxel: f64,
    pub dims: [usize; 3],
    bits: Vec<u64>,
    cells: HashMap<usize, (u32, u32)>,
    order: Vec<u32>,
    points: Vec<Point3>,
    labels: Vec<SemanticLabel>,
    owners: Vec<i32>,
}

impl OccupancyGrid {
    pub fn from_scene(scene: &LabeledScene, voxel: f64) -> Self {
        assert!(voxel > 0.0);
        let cloud = &scene.cloud;
        let labels_in = cloud.labels();
        let owners_in = cloud.owners();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut owners = Vec::new();
        for (i, p) in cloud.points().iter().enumerate() {
            let l = labels_in.map_or(SemanticLabel::Foliage, |l| l[i]);
            if l == SemanticLabel::Ground {
                continue;
            }
            points.push(*p);
            labels.push(l);
            owners.push(owners_in.map_or(crate::geom::NO_OWNER, |o| o[i]));
        }
        let Some(bb) = crate::geom::BBox3::from_points(&points) else {
            return Self {
                origin: [0.0; 3],
                voxel,
                dims: [0; 3],
                bits: Vec::new(),
                cells: HashMap::new(),
                order: Vec::new(),
                points,
                labels,
                owners,
            };
        };
        let origin = [bb.min[0] - voxel, bb.min[1] - voxel, bb.min[2] - voxel];
        let dims = [0, 1, 2].map(|k| ((bb.max[k] - origin[k]) / voxel).floor() as usize + 2);
        let mut keyed: Vec<(usize, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let ix = ((p[0] - origin[0]) / voxel) as usize;
                let iy = ((p[1] - origin[1]) / voxel) as usize;
                let iz = ((p[2] - origin[2]) / voxel) as usize;
                ((iz * dims[1] + iy) * dims[0] + ix, i as u32)
            })
            .collect();
        keyed.sort_unstable();
        let total = dims[0] * dims[1] * dims[2];
        let mut bits = vec![0u64; total.div_ceil(64)];
        let mut cells = HashMap::new();
        let mut start = 0;
        while start < keyed.len() {
            let key = keyed[start].0;
            let mut end = start;
            while end < keyed.len() && keyed[end].0 == key {
                end += 1;
            }
            bits[key / 64] |= 1 << (key % 64);
            cells.insert(key, (start as u32, (end - start) as u32));
            start = end;
        }
        let order = keyed.into_iter().map(|(_, i)| i).collect();
        Self { origin, voxel, dims, bits, cells, order, points, labels, owners }
    }

    #[inline]
    fn key(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    #[inline]
    pub fn occupied(&self, ix: usize, iy: usize, iz: usize) -> bool {
        let k = self.key(ix, iy, iz);
        self.bits[k / 64] >> (k % 64) & 1 == 1
    }

    pub fn members(&self, ix: usize, iy: usize, iz: usize) -> Option<&[u32]> {
        if !self.occupied(ix, iy, iz) {
            return None;
        }
        let (s, n) = self.cells[&self.key(ix, iy, iz)];
        Some(&self.order[s as usize..(s + n) as usize])
    }

    pub fn column(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if self.dims[0] == 0 {
            return None;
        }
        let fx = (x - self.origin[0]) / self.voxel;
        let fy = (y - self.origin[1]) / self.voxel;
        if fx < 0.0 || fy < 0.0 || fx >= self.dims[0] as f64 || fy >= self.dims[1] as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    /// Number of occupied voxels in the column above `(x, y)`.
    pub fn column_occupancy(&self, x: f64, y: f64) -> usize {
        self.column(x, y).map_or(0, |(ix, iy)| (0..self.dims[2]).filter(|&iz| self.occupied(ix, iy, iz)).count())
    }

    pub fn nearest_horizontal(&self, members: &[u32], x: f64, y: f64) -> usize {
        let mut best = members[0] as usize;
        let mut bd = f64::INFINITY;
        for &m in members {
            let p = self.points[m as usize];
            let d = (p[0] - x).powi(2) + (p[1] - y).powi(2);
            if d < bd {
                bd = d;
                best = m as usize;
            }
        }
        best
    }

    #[inline]
    pub fn point(&self, k: usize) -> Point3 {
        self.points[k]
    }

    #[inline]
    pub fn label(&self, k: usize) -> SemanticLabel {
        self.labels[k]
    }

    #[inline]
    pub fn owner(&self, k: usize) -> i32 {
        self.owners[k]
    }

    /// First intersection on the parameter range `[lo, hi]` of the ray with
    /// the ground, scanning at a fixed step and refining by bisection.
    fn march_ground(&self, o: Point3, d: Point3, lo: f64, hi: f64, ground: &GroundModel) -> Option<Point3> {
        if d[2] >= 0.0 && o[2] + d[2] * lo > ground.elevation(o[0] + d[0] * lo, o[1] + d[1] * lo) + 1.0 {
            // Rising ray already well above ground; undulations are gentle.
            return None;
        }
        let mut a = lo;
        while a < hi {
            let b = (a + GROUND_STEP).min(hi);
            if let Some(p) = ground_crossing(o, d, a, b, ground) {
                return Some(p);
            }
            a = b;
        }
        None
    }

    pub(crate) fn cast(&self, o: Point3, d: Point3, max_range: f64, hit_radius: f64, ground: &GroundModel) -> Option<Hit> {
        if o[2] < ground.elevation(o[0], o[1]) {
            return None;
        }
        let Some((t0, t1)) = self.slab(o, d, max_range) else {
            return self.march_ground(o, d, 0.0, max_range, ground).map(Hit::Ground);
        };
        if t0 > 0.0 {
            if let Some(p) = self.march_ground(o, d, 0.0, t0, ground) {
                return Some(Hit::Ground(p));
            }
        }
        let v = self.voxel;
        let start = [o[0] + d[0] * t0, o[1] + d[1] * t0, o[2] + d[2] * t0];
        let mut idx = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for k in 0..3 {
            let f = ((start[k] - self.origin[k]) / v).floor() as i64;
            idx[k] = f.clamp(0, self.dims[k] as i64 - 1);
            if d[k] > 0.0 {
                step[k] = 1;
                t_max[k] = t0 + ((self.origin[k] + (idx[k] + 1) as f64 * v) - start[k]) / d[k];
                t_delta[k] = v / d[k];
            } else if d[k] < 0.0 {
                step[k] = -1;
                t_max[k] = t0 + ((self.origin[k] + idx[k] as f64 * v) - start[k]) / d[k];
                t_delta[k] = -v / d[k];
            }
        }
        let r2 = hit_radius * hit_radius;
        let mut t_cur = t0;
        while t_cur < t1 {
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            let t_exit = t_max[axis].min(t1);
            let ground_hit = ground_crossing(o, d, t_cur, t_exit, ground);
            let (ix, iy, iz) = (idx[0] as usize, idx[1] as usize, idx[2] as usize);
            if let Some(members) = self.members(ix, iy, iz) {
                let mut best: Option<(f64, usize)> = None;
                for &m in members {
                    let p = self.points[m as usize];
                    let w = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
                    let tp = w[0] * d[0] + w[1] * d[1] + w[2] * d[2];
                    if tp <= 0.0 || tp > max_range {
                        continue;
                    }
                    let perp2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2] - tp * tp;
                    if perp2 <= r2 && best.is_none_or(|(bt, _)| tp < bt) {
                        best = Some((tp, m as usize));
                    }
                }
                if let Some((tp, m)) = best {
                    let ground_first = ground_hit.is_some_and(|g| {
                        let wg = [g[0] - o[0], g[1] - o[1], g[2] - o[2]];
                        wg[0] * d[0] + wg[1] * d[1] + wg[2] * d[2] < tp
                    });
                    if !ground_first {
                        return Some(Hit::Point(m));
                    }
                }
            }
            if let Some(g) = ground_hit {
                return Some(Hit::Ground(g));
            }
            t_cur = t_exit;
            idx[axis] += step[axis];
            if idx[axis] < 0 || idx[axis] >= self.dims[axis] as i64 {
                break;
            }
            t_max[axis] += t_delta[axis];
        }
        let resume = t_cur;
        if resume < max_range {
            return self.march_ground(o, d, resume, max_range, ground).map(Hit::Ground);
        }
        None
    }

    /// Parameter interval of the ray inside the grid box, clipped to
    /// `[0, max_range]`.
    fn slab(&self, o: Point3, d: Point3, max_range: f64) -> Option<(f64, f64)> {
        if self.dims[0] == 0 {
            return None;
        }
        let mut lo = 0.0f64;
        let mut hi = max_range;
        for k in 0..3 {
            let a = self.origin[k];
            let b = self.origin[k] + self.dims[k] as f64 * self.voxel;
            if d[k].abs() < 1e-15 {
                if o[k] < a || o[k] >= b {
                    return None;
                }
            } else {
                let (mut ta, mut tb) = ((a - o[k]) / d[k], (b - o[k]) / d[k]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                lo = lo.max(ta);
                hi = hi.min(tb);
            }
        }
        (lo < hi).then_some((lo, hi))
    }
}

fn ground_crossing(o: Point3, d: Point3, a: f64, b: f64, ground: &GroundModel) -> Option<Point3> {
    let h = |t: f64| o[2] + d[2] * t - ground.elevation(o[0] + d[0] * t, o[1] + d[1] * t);
    if h(b) >= 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (a, b);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if h(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    let x = o[0] + d[0] * t;
    let y = o[1] + d[1] * t;
    Some([x, y, ground.elevation(x, y)])
}
