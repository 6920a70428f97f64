//! Quickhull-style 3D convex hull with facet half-space queries.

use std::collections::HashMap;

use super::{add, cross, dot, norm, scale, sub, BBox3, GeomError, Point3, PointCloud};

/// Containment tolerance (meters) used when callers have no better value.
pub const DEFAULT_CONTAINMENT_TOL: f64 = 1e-6;

/// Points closer than this fraction of the cloud diameter to a facet plane
/// are treated as lying on it.
const PLANE_EPS_REL: f64 = 1e-10;

/// Triangular facet with an outward unit normal; the hull is
/// `{p : dot(normal, p) <= offset}` over all facets.
#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    pub vertices: [usize; 3],
    pub normal: Point3,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexHull3 {
    vertices: Vec<Point3>,
    facets: Vec<Facet>,
    volume: f64,
    diameter: f64,
}

struct WorkFace {
    v: [usize; 3],
    normal: Point3,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

impl WorkFace {
    fn new(pts: &[Point3], v: [usize; 3]) -> Self {
        let n = cross(sub(pts[v[1]], pts[v[0]]), sub(pts[v[2]], pts[v[0]]));
        let len = norm(n);
        let normal = if len > 0.0 { scale(n, 1.0 / len) } else { [0.0, 0.0, 0.0] };
        let offset = dot(normal, pts[v[0]]);
        WorkFace { v, normal, offset, outside: Vec::new(), alive: true }
    }

    #[inline]
    fn signed_dist(&self, p: Point3) -> f64 {
        dot(self.normal, p) - self.offset
    }

    fn edges(&self) -> [(usize, usize); 3] {
        [(self.v[0], self.v[1]), (self.v[1], self.v[2]), (self.v[2], self.v[0])]
    }
}

pub fn build_convex_hull(cloud: &PointCloud) -> Result<ConvexHull3, GeomError> {
    ConvexHull3::from_points(cloud.points())
}

impl ConvexHull3 {
    pub fn from_points(input: &[Point3]) -> Result<Self, GeomError> {
        if input.len() < 4 {
            return Err(GeomError::DegenerateInput(format!("{} points, need at least 4", input.len())));
        }
        let bbox = BBox3::from_points(input).ok_or(GeomError::Empty)?;
        let diameter = bbox.diagonal();
        if !(diameter > 0.0) {
            return Err(GeomError::DegenerateInput("all points coincide".into()));
        }
        // Work in coordinates centered on the box so tolerances scale with the cloud, not its position.
        let center = bbox.center();
        let pts: Vec<Point3> = input.iter().map(|&p| sub(p, center)).collect();
        let eps = PLANE_EPS_REL * diameter;

        let simplex = initial_simplex(&pts, eps)?;
        let centroid = scale(
            simplex.iter().fold([0.0; 3], |acc, &i| add(acc, pts[i])),
            0.25,
        );

        let mut faces: Vec<WorkFace> = Vec::new();
        let mut edge_map: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]] {
            let mut v = [simplex[tri[0]], simplex[tri[1]], simplex[tri[2]]];
            let f = WorkFace::new(&pts, v);
            if f.signed_dist(centroid) > 0.0 {
                v.swap(1, 2);
            }
            let f = WorkFace::new(&pts, v);
            for e in f.edges() {
                edge_map.insert(e, faces.len());
            }
            faces.push(f);
        }

        for (i, &p) in pts.iter().enumerate() {
            if simplex.contains(&i) {
                continue;
            }
            if let Some(fi) = best_face(&faces, 0..faces.len(), p, eps) {
                faces[fi].outside.push(i);
            }
        }

        let mut pending: Vec<usize> = (0..faces.len()).filter(|&f| !faces[f].outside.is_empty()).collect();
        while let Some(fi) = pending.pop() {
            if !faces[fi].alive || faces[fi].outside.is_empty() {
                continue;
            }
            let eye = *faces[fi]
                .outside
                .iter()
                .max_by(|&&a, &&b| {
                    faces[fi].signed_dist(pts[a]).total_cmp(&faces[fi].signed_dist(pts[b])).then(b.cmp(&a))
                })
                .expect("non-empty outside set");
            let eye_p = pts[eye];

            // Flood the faces visible from the eye point and collect the horizon.
            let mut visible = vec![fi];
            let mut is_visible: HashMap<usize, bool> = HashMap::new();
            is_visible.insert(fi, true);
            let mut horizon: Vec<(usize, usize)> = Vec::new();
            let mut k = 0;
            while k < visible.len() {
                let f = visible[k];
                k += 1;
                for (a, b) in faces[f].edges() {
                    let g = match edge_map.get(&(b, a)) {
                        Some(&g) => g,
                        None => {
                            horizon.push((a, b));
                            continue;
                        }
                    };
                    let vis = *is_visible.entry(g).or_insert_with(|| faces[g].alive && faces[g].signed_dist(eye_p) > eps);
                    if vis {
                        if !visible.contains(&g) {
                            visible.push(g);
                        }
                    } else {
                        horizon.push((a, b));
                    }
                }
            }

            let mut orphans: Vec<usize> = Vec::new();
            for &f in &visible {
                faces[f].alive = false;
                for e in faces[f].edges() {
                    if edge_map.get(&e) == Some(&f) {
                        edge_map.remove(&e);
                    }
                }
                orphans.extend(faces[f].outside.drain(..).filter(|&i| i != eye));
            }

            let first_new = faces.len();
            for (a, b) in horizon {
                let nf = WorkFace::new(&pts, [a, b, eye]);
                for e in nf.edges() {
                    edge_map.insert(e, faces.len());
                }
                faces.push(nf);
            }
            for i in orphans {
                if let Some(g) = best_face(&faces, first_new..faces.len(), pts[i], eps) {
                    faces[g].outside.push(i);
                }
            }
            pending.extend((first_new..faces.len()).filter(|&g| !faces[g].outside.is_empty()));
        }

        let alive: Vec<&WorkFace> = faces.iter().filter(|f| f.alive).collect();
        let mut remap: HashMap<usize, usize> = HashMap::new();
        let mut used: Vec<usize> = alive.iter().flat_map(|f| f.v).collect();
        used.sort_unstable();
        used.dedup();
        for (new, &old) in used.iter().enumerate() {
            remap.insert(old, new);
        }
        let vertices: Vec<Point3> = used.iter().map(|&i| input[i]).collect();
        let mut volume = 0.0;
        let facets = alive
            .iter()
            .map(|f| {
                let [a, b, c] = f.v;
                volume += dot(pts[a], cross(pts[b], pts[c])) / 6.0;
                Facet {
                    vertices: [remap[&a], remap[&b], remap[&c]],
                    normal: f.normal,
                    offset: f.offset + dot(f.normal, center),
                }
            })
            .collect();
        Ok(ConvexHull3 { vertices, facets, volume: volume.max(0.0), diameter })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    /// Bounding-box diagonal of the input cloud.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn vertex_centroid(&self) -> Point3 {
        let s = self.vertices.iter().fold([0.0; 3], |acc, &p| add(acc, p));
        scale(s, 1.0 / self.vertices.len() as f64)
    }

    /// Inclusive half-space test against every facet.
    pub fn contains(&self, p: Point3, tol: f64) -> bool {
        self.facets.iter().all(|f| dot(f.normal, p) <= f.offset + tol)
    }

    /// Euclidean distance from an exterior point to the hull boundary.
    pub fn distance_to_surface(&self, p: Point3) -> Result<f64, GeomError> {
        if self.contains(p, 0.0) {
            return Err(GeomError::PointInside);
        }
        // The closest boundary point always lies on a facet that faces p.
        let best = self
            .facets
            .iter()
            .filter(|f| dot(f.normal, p) > f.offset)
            .map(|f| {
                let [a, b, c] = f.vertices.map(|i| self.vertices[i]);
                super::dist(p, closest_point_on_triangle(p, a, b, c))
            })
            .fold(f64::INFINITY, f64::min);
        Ok(best)
    }
}

fn best_face(faces: &[WorkFace], range: std::ops::Range<usize>, p: Point3, eps: f64) -> Option<usize> {
    let mut best = None;
    let mut best_d = eps;
    for fi in range {
        let f = &faces[fi];
        if !f.alive {
            continue;
        }
        let d = f.signed_dist(p);
        if d > best_d {
            best_d = d;
            best = Some(fi);
        }
    }
    best
}

fn initial_simplex(pts: &[Point3], eps: f64) -> Result<[usize; 4], GeomError> {
    let mut extremes = [0usize; 6];
    for (i, p) in pts.iter().enumerate() {
        for k in 0..3 {
            if p[k] < pts[extremes[2 * k]][k] {
                extremes[2 * k] = i;
            }
            if p[k] > pts[extremes[2 * k + 1]][k] {
                extremes[2 * k + 1] = i;
            }
        }
    }
    let (mut i0, mut i1, mut best) = (0, 0, -1.0);
    for a in 0..6 {
        for b in a + 1..6 {
            let d = super::dist2(pts[extremes[a]], pts[extremes[b]]);
            if d > best {
                best = d;
                i0 = extremes[a];
                i1 = extremes[b];
            }
        }
    }
    if best.sqrt() <= eps {
        return Err(GeomError::DegenerateInput("all points coincide".into()));
    }
    let dir = sub(pts[i1], pts[i0]);
    let (i2, d_line) = argmax(pts, |p| norm(cross(dir, sub(p, pts[i0]))) / norm(dir));
    if d_line <= eps {
        return Err(GeomError::DegenerateInput("points are collinear".into()));
    }
    let n = cross(dir, sub(pts[i2], pts[i0]));
    let n = scale(n, 1.0 / norm(n));
    let (i3, d_plane) = argmax(pts, |p| dot(n, sub(p, pts[i0])).abs());
    if d_plane <= eps {
        return Err(GeomError::DegenerateInput("points are coplanar".into()));
    }
    Ok([i0, i1, i2, i3])
}

fn argmax(pts: &[Point3], f: impl Fn(Point3) -> f64) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &p) in pts.iter().enumerate() {
        let v = f(p);
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Closest point to `p` on triangle `abc`, by Voronoi-region classification.
pub(crate) fn closest_point_on_triangle(p: Point3, a: Point3, b: Point3, c: Point3) -> Point3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    add(a, add(scale(ab, vb * denom), scale(ac, vc * denom)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube() -> Vec<Point3> {
        let mut v = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    v.push([x, y, z]);
                }
            }
        }
        v
    }

    #[test]
    fn tetrahedron() {
        let h = ConvexHull3::from_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(h.facets().len(), 4);
        assert!((h.volume() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn unit_cube() {
        let h = ConvexHull3::from_points(&cube()).unwrap();
        assert_eq!(h.vertices().len(), 8);
        assert!((h.volume() - 1.0).abs() < 1e-14);
        for f in h.facets() {
            assert!((norm(f.normal) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(ConvexHull3::from_points(&[[0.0; 3]; 3]), Err(GeomError::DegenerateInput(_))));
        let plane: Vec<Point3> = (0..20).map(|i| [i as f64, (i * i % 7) as f64, 0.0]).collect();
        assert!(matches!(ConvexHull3::from_points(&plane), Err(GeomError::DegenerateInput(_))));
        let line: Vec<Point3> = (0..20).map(|i| [i as f64, 2.0 * i as f64, 3.0 * i as f64]).collect();
        assert!(matches!(ConvexHull3::from_points(&line), Err(GeomError::DegenerateInput(_))));
        assert!(ConvexHull3::from_points(&[[1.0, 2.0, 3.0]; 10]).is_err());
    }

    #[test]
    fn sphere_interior_points_contained() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]];
        let mut interior = Vec::new();
        while interior.len() < 100 {
            let p: Point3 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if norm(p) < 1.0 {
                interior.push(p);
            }
        }
        pts.extend(&interior);
        let h = ConvexHull3::from_points(&pts).unwrap();
        for p in &interior {
            // brute-force half-space check
            for f in h.facets() {
                assert!(dot(f.normal, *p) <= f.offset + 1e-9 * h.diameter());
            }
            assert!(h.contains(*p, 1e-9));
        }
    }

    #[test]
    fn every_input_point_inside_and_vertices_are_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = 10 + trial * 37;
            let pts: Vec<Point3> = (0..n)
                .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(100.0..101.0), rng.random_range(0.0..30.0)])
                .collect();
            let h = ConvexHull3::from_points(&pts).unwrap();
            for p in &pts {
                assert!(h.contains(*p, 1e-9 * h.diameter()));
            }
            for v in h.vertices() {
                assert!(pts.contains(v));
            }
            // closed 2-manifold: V - E + F = 2 with E = 3F/2
            let f = h.facets().len();
            assert_eq!(h.vertices().len() + f - 3 * f / 2, 2);
        }
    }

    #[test]
    fn idempotent_on_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point3> = (0..500).map(|_| [rng.random(), rng.random(), rng.random::<f64>() * 3.0]).collect();
        let h = ConvexHull3::from_points(&pts).unwrap();
        let h2 = ConvexHull3::from_points(h.vertices()).unwrap();
        assert!(((h.volume() - h2.volume()) / h.volume()).abs() < 1e-12);
    }

    #[test]
    fn contains_centroid_and_vertices_rejects_far_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Point3> = (0..60).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let h = ConvexHull3::from_points(&pts).unwrap();
        let c = h.vertex_centroid();
        assert!(h.contains(c, 0.0));
        for v in h.vertices() {
            assert!(h.contains(*v, 1e-9));
        }
        let bb = BBox3::from_points(h.vertices()).unwrap();
        let ext = bb.extent().iter().cloned().fold(0.0, f64::max);
        assert!(!h.contains([c[0] + 2.0 * ext, c[1], c[2]], 1e-9));
    }

    #[test]
    fn cube_surface_distances() {
        let h = ConvexHull3::from_points(&cube()).unwrap();
        assert!((h.distance_to_surface([0.5, 0.5, 1.5]).unwrap() - 0.5).abs() < 1e-12);
        assert!((h.distance_to_surface([2.0, 2.0, 2.0]).unwrap() - 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(h.distance_to_surface([0.5, 0.5, 0.5]), Err(GeomError::PointInside));
    }

    #[test]
    fn distance_vanishes_at_boundary() {
        let h = ConvexHull3::from_points(&cube()).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..12 {
            let d = 10f64.powi(-k);
            let got = h.distance_to_surface([0.3, 1.0 + d, 0.7]).unwrap();
            assert!(got > 0.0 && got < prev);
            assert!((got - d).abs() < 1e-12);
            prev = got;
        }
    }
}
