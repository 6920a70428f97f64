use serde::{Deserialize, Serialize};

/// Regular grid of ground elevations with bilinear interpolation.
///
/// Node `(i, j)` sits at `origin + (i * cell, j * cell)`; queries outside the
/// grid are clamped to its border.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundModel {
    pub origin: [f64; 2],
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major by y: `z[j * nx + i]`.
    pub z: Vec<f64>,
}

impl GroundModel {
    pub fn new(origin: [f64; 2], cell: f64, nx: usize, ny: usize, z: Vec<f64>) -> Self {
        assert!(cell > 0.0 && nx >= 1 && ny >= 1 && z.len() == nx * ny);
        Self { origin, cell, nx, ny, z }
    }

    pub fn flat(z0: f64) -> Self {
        Self::new([0.0, 0.0], 1.0, 1, 1, vec![z0])
    }

    /// Samples `f` on a grid covering `[min, max]`.
    pub fn from_fn(min: [f64; 2], max: [f64; 2], cell: f64, f: impl Fn(f64, f64) -> f64) -> Self {
        let nx = ((max[0] - min[0]) / cell).ceil() as usize + 1;
        let ny = ((max[1] - min[1]) / cell).ceil() as usize + 1;
        let mut z = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                z.push(f(min[0] + i as f64 * cell, min[1] + j as f64 * cell));
            }
        }
        Self::new(min, cell, nx, ny, z)
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> f64 {
        self.z[j * self.nx + i]
    }

    pub fn node_xy(&self, i: usize, j: usize) -> [f64; 2] {
        [self.origin[0] + i as f64 * self.cell, self.origin[1] + j as f64 * self.cell]
    }

    pub fn elevation(&self, x: f64, y: f64) -> f64 {
        let fx = ((x - self.origin[0]) / self.cell).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((y - self.origin[1]) / self.cell).clamp(0.0, (self.ny - 1) as f64);
        let i0 = (fx.floor() as usize).min(self.nx.saturating_sub(2));
        let j0 = (fy.floor() as usize).min(self.ny.saturating_sub(2));
        let i1 = (i0 + 1).min(self.nx - 1);
        let j1 = (j0 + 1).min(self.ny - 1);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let z00 = self.node(i0, j0);
        let z10 = self.node(i1, j0);
        let z01 = self.node(i0, j1);
        let z11 = self.node(i1, j1);
        (1.0 - ty) * ((1.0 - tx) * z00 + tx * z10) + ty * ((1.0 - tx) * z01 + tx * z11)
    }

    /// Same surface shifted by `(dx, dy, dz)`.
    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Self {
        Self {
            origin: [self.origin[0] + dx, self.origin[1] + dy],
            z: self.z.iter().map(|z| z + dz).collect(),
            ..self.clone()
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,z\n");
        for j in 0..self.ny {
            for i in 0..self.nx {
                let [x, y] = self.node_xy(i, j);
                s.push_str(&format!("{},{},{}\n", x, y, self.node(i, j)));
            }
        }
        s
    }

    /// Parses the CSV produced by [`GroundModel::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut rows: Vec<[f64; 3]> = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let v: Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            match v {
                Ok(v) if v.len() == 3 && v.iter().all(|c| c.is_finite()) => rows.push([v[0], v[1], v[2]]),
                _ => return Err(format!("bad ground row at line {}", ln + 1)),
            }
        }
        if rows.is_empty() {
            return Err("empty ground grid".into());
        }
        let y0 = rows[0][1];
        let nx = rows.iter().take_while(|r| r[1] == y0).count();
        if rows.len() % nx != 0 {
            return Err("ragged ground grid".into());
        }
        let ny = rows.len() / nx;
        let cell = if nx > 1 { rows[1][0] - rows[0][0] } else if ny > 1 { rows[nx][1] - y0 } else { 1.0 };
        Ok(Self::new([rows[0][0], y0], cell, nx, ny, rows.iter().map(|r| r[2]).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_reproduces_planes() {
        let g = GroundModel::from_fn([-3.0, -2.0], [5.0, 4.0], 0.5, |x, y| 0.3 * x - 0.2 * y + 1.0);
        for &(x, y) in &[(0.1, 0.2), (4.9, 3.3), (-2.7, -1.9), (1.234, 2.345)] {
            assert!((g.elevation(x, y) - (0.3 * x - 0.2 * y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let g = GroundModel::from_fn([0.0, 0.0], [3.0, 2.0], 1.0, |x, y| (x * y).sin());
        assert_eq!(GroundModel::from_csv(&g.to_csv()).unwrap(), g);
    }
}
