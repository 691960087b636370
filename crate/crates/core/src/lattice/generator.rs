use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 8;

/// Search radius around the Babai point used by [`GeneratorMatrix::nearest_point`].
const REFINE_RADIUS: i64 = 2;

/// Square generator matrix; lattice points are `G·l` for integer `l`.
///
/// Entries are row-major, so the columns of the matrix are the basis vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    dim: usize,
    entries: Vec<f64>,
    inverse: Vec<f64>,
    /// Upper-triangular factor of `G = QR`, row-major; `‖G·l‖ = ‖R·l‖`.
    r: Vec<f64>,
    det: f64,
}

impl GeneratorMatrix {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Geometry(format!(
                "lattice dimension must be in 1..={MAX_DIM}, got {dim}"
            )));
        }
        if entries.len() != dim * dim {
            return Err(Error::Geometry(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("generator has non-finite entries".into()));
        }
        let m = DMatrix::from_row_slice(dim, dim, &entries);
        let det = m.determinant();
        let scale = entries.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // relative singularity test: |det| against the volume of a cube of side `scale`
        if !det.is_finite() || det == 0.0 || det.abs() <= 1e-12 * scale.powi(dim as i32) {
            return Err(Error::Geometry(format!("generator is singular (det = {det:e})")));
        }
        let inv = m
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Geometry("generator is not invertible".into()))?;
        let mut inverse = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                inverse.push(inv[(i, j)]);
            }
        }
        if inverse.iter().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("generator inverse is not finite".into()));
        }
        let qr = m.qr().r();
        let r = (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| qr[(i, j)]).collect();
        Ok(Self { dim, entries, inverse, r, det })
    }

    pub fn identity(dim: usize) -> Self {
        let mut e = vec![0.0; dim * dim];
        for i in 0..dim {
            e[i * dim + i] = 1.0;
        }
        Self::new(dim, e).expect("identity is a valid generator")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn inverse(&self) -> &[f64] {
        &self.inverse
    }

    pub(crate) fn r_factor(&self) -> &[f64] {
        &self.r
    }

    pub fn determinant(&self) -> f64 {
        self.det
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim + col]
    }

    /// `c·G`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.dim, self.entries.iter().map(|v| v * c).collect())
    }

    /// The same lattice shape with unit determinant magnitude.
    pub fn unit_determinant(&self) -> Result<Self> {
        self.scaled(self.det.abs().powf(-1.0 / self.dim as f64))
    }

    /// Writes `G·l` into `out`.
    #[inline]
    pub fn apply_int(&self, l: &[i64], out: &mut [f64]) {
        let d = self.dim;
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.entries[i * d..(i + 1) * d];
            *o = row.iter().zip(l).map(|(g, &c)| g * c as f64).sum();
        }
    }

    /// Writes `G·u` into `out`.
    #[inline]
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.entries[i * d..(i + 1) * d];
            *o = row.iter().zip(u).map(|(g, c)| g * c).sum();
        }
    }

    /// Writes `G⁻¹·x` into `out`.
    #[inline]
    pub fn solve(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.inverse[i * d..(i + 1) * d];
            *o = row.iter().zip(x).map(|(g, c)| g * c).sum();
        }
    }

    /// Largest Euclidean norm among the rows of `G⁻¹`.
    pub fn max_inverse_row_norm(&self) -> f64 {
        let d = self.dim;
        (0..d)
            .map(|i| self.inverse[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `½·Σⱼ‖colⱼ‖`, an upper bound on the covering radius (Babai rounding
    /// never lands further than this from its input).
    pub fn covering_radius_bound(&self) -> f64 {
        let d = self.dim;
        0.5 * (0..d)
            .map(|j| (0..d).map(|i| self.at(i, j).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
    }

    /// Nearest point of the infinite lattice: Babai rounding followed by an
    /// exhaustive search over the offset cube `{−2..2}^L`. Ties go to the
    /// lexicographically smallest coefficient vector.
    pub fn nearest_point(&self, x: &[f64]) -> Vec<i64> {
        let mut out = vec![0; self.dim];
        self.nearest_point_into(x, &mut out);
        out
    }

    pub fn nearest_point_into(&self, x: &[f64], best: &mut [i64]) {
        let d = self.dim;
        let mut coords = [0.0; MAX_DIM];
        self.solve(x, &mut coords[..d]);
        let mut base = [0i64; MAX_DIM];
        for i in 0..d {
            base[i] = coords[i].round() as i64;
        }
        let mut offset = [-REFINE_RADIUS; MAX_DIM];
        let mut cand = [0i64; MAX_DIM];
        let mut point = [0.0; MAX_DIM];
        let mut best_dist = f64::INFINITY;
        loop {
            for i in 0..d {
                cand[i] = base[i] + offset[i];
            }
            self.apply_int(&cand[..d], &mut point[..d]);
            let dist: f64 = (0..d).map(|i| (x[i] - point[i]).powi(2)).sum();
            if dist < best_dist || (dist == best_dist && cand[..d] < best[..d]) {
                best_dist = dist;
                best[..d].copy_from_slice(&cand[..d]);
            }
            // odometer over {-R..R}^d, last coordinate fastest
            let mut k = d;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                if offset[k] < REFINE_RADIUS {
                    offset[k] += 1;
                    break;
                }
                offset[k] = -REFINE_RADIUS;
            }
        }
    }

    /// Little-endian wire form: `u32` dimension followed by row-major `f64`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * self.entries.len());
        self.write_bytes(&mut out);
        out
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.entries {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Parses the wire form, returning the matrix and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let head: [u8; 4] = bytes
            .get(..4)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Protocol("truncated generator header".into()))?;
        let dim = u32::from_le_bytes(head) as usize;
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Protocol(format!("bad generator dimension {dim}")));
        }
        let need = 4 + 8 * dim * dim;
        if bytes.len() < need {
            return Err(Error::Protocol("truncated generator entries".into()));
        }
        let entries = bytes[4..need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let g = Self::new(dim, entries).map_err(|e| Error::Protocol(e.to_string()))?;
        Ok((g, need))
    }

    /// Vertices of the Voronoi cell of the origin, for `L ≤ 3`.
    ///
    /// Each vertex is equidistant from the origin and `L` other lattice
    /// points; candidates come from a small neighbourhood and are kept when no
    /// lattice point is strictly closer than the origin.
    pub fn voronoi_vertices(&self) -> Option<Vec<Vec<f64>>> {
        let d = self.dim;
        if d > 3 {
            return None;
        }
        let span: i64 = if d == 3 { 2 } else { 3 };
        let mut neighbours = Vec::new();
        let mut l = vec![-span; d];
        'outer: loop {
            if l.iter().any(|&c| c != 0) {
                let mut p = vec![0.0; d];
                self.apply_int(&l, &mut p);
                neighbours.push(p);
            }
            let mut k = d;
            loop {
                if k == 0 {
                    break 'outer;
                }
                k -= 1;
                if l[k] < span {
                    l[k] += 1;
                    break;
                }
                l[k] = -span;
            }
        }
        let mut vertices: Vec<Vec<f64>> = Vec::new();
        let mut push_if_vertex = |v: Vec<f64>| {
            let near = self.nearest_point(&v);
            let mut z = vec![0.0; d];
            self.apply_int(&near, &mut z);
            let dz: f64 = v.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum();
            let d0: f64 = v.iter().map(|a| a * a).sum();
            if dz >= d0 * (1.0 - 1e-9) - 1e-300
                && !vertices
                    .iter()
                    .any(|w| w.iter().zip(&v).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + a.abs())))
            {
                vertices.push(v);
            }
        };
        let half_sq = |p: &Vec<f64>| 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        match d {
            1 => {
                let g = self.entries[0].abs();
                vertices.push(vec![0.5 * g]);
                vertices.push(vec![-0.5 * g]);
            }
            _ => {
                let n = neighbours.len();
                let mut idx = vec![0usize; d];
                // all d-subsets of the neighbour list
                fn next_subset(idx: &mut [usize], n: usize) -> bool {
                    let k = idx.len();
                    let mut i = k;
                    while i > 0 {
                        i -= 1;
                        if idx[i] < n - k + i {
                            idx[i] += 1;
                            for j in i + 1..k {
                                idx[j] = idx[j - 1] + 1;
                            }
                            return true;
                        }
                    }
                    false
                }
                for (i, v) in idx.iter_mut().enumerate() {
                    *v = i;
                }
                loop {
                    let rows: Vec<f64> = idx.iter().flat_map(|&i| neighbours[i].clone()).collect();
                    let rhs: Vec<f64> = idx.iter().map(|&i| half_sq(&neighbours[i])).collect();
                    let a = DMatrix::from_row_slice(d, d, &rows);
                    if a.determinant().abs() > 1e-12 {
                        if let Some(inv) = a.try_inverse() {
                            let b = nalgebra::DVector::from_vec(rhs);
                            let v = inv * b;
                            push_if_vertex(v.iter().copied().collect());
                        }
                    }
                    if !next_subset(&mut idx, n) {
                        break;
                    }
                }
            }
        }
        Some(vertices)
    }

    /// Exact covering radius for `L ≤ 3` (from the Voronoi vertices), the
    /// Babai bound otherwise.
    pub fn covering_radius(&self) -> f64 {
        match self.voronoi_vertices() {
            Some(vs) if !vs.is_empty() => vs
                .iter()
                .map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt())
                .fold(0.0, f64::max),
            _ => self.covering_radius_bound(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::shapes;

    #[test]
    fn rejects_singular_and_non_finite() {
        assert!(matches!(
            GeneratorMatrix::new(2, vec![1.0, 2.0, 2.0, 4.0]),
            Err(Error::Geometry(_))
        ));
        assert!(GeneratorMatrix::new(2, vec![1.0, f64::NAN, 0.0, 1.0]).is_err());
        assert!(GeneratorMatrix::new(0, vec![]).is_err());
        assert!(GeneratorMatrix::new(2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn identity_rounding() {
        let g = GeneratorMatrix::identity(2);
        assert_eq!(g.nearest_point(&[0.6, -0.2]), vec![1, 0]);
        assert_eq!(g.nearest_point(&[0.0, 0.0]), vec![0, 0]);
    }

    #[test]
    fn hexagonal_nearest_matches_exhaustive_search() {
        let g = shapes::hexagonal();
        let x = [0.9, 0.5];
        let mut best = (f64::INFINITY, vec![0, 0]);
        for a in -4..=4 {
            for b in -4..=4 {
                let mut p = [0.0; 2];
                g.apply_int(&[a, b], &mut p);
                let d = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
                if d < best.0 {
                    best = (d, vec![a, b]);
                }
            }
        }
        assert_eq!(g.nearest_point(&x), best.1);
    }

    #[test]
    fn bytes_roundtrip_and_truncation() {
        let g = shapes::a2();
        let bytes = g.to_bytes();
        assert_eq!(bytes.len(), 4 + 8 * 4);
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        let (back, used) = GeneratorMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, g);
        assert!(GeneratorMatrix::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn covering_radius_known_values() {
        assert!((GeneratorMatrix::identity(1).covering_radius() - 0.5).abs() < 1e-12);
        let sq = GeneratorMatrix::identity(2).covering_radius();
        assert!((sq - 0.5f64.sqrt()).abs() < 1e-9, "{sq}");
        // unit-spacing hexagonal lattice: circumradius of the unit triangle
        let hex = shapes::hexagonal().covering_radius();
        assert!((hex - 1.0 / 3f64.sqrt()).abs() < 1e-9, "{hex}");
        let cube = GeneratorMatrix::identity(3).covering_radius();
        assert!((cube - 0.75f64.sqrt()).abs() < 1e-9, "{cube}");
        for g in [shapes::hexagonal(), shapes::a2(), shapes::d2()] {
            assert!(g.covering_radius() <= g.covering_radius_bound() + 1e-12);
        }
    }

    #[test]
    fn hexagon_has_six_voronoi_vertices() {
        assert_eq!(shapes::hexagonal().voronoi_vertices().unwrap().len(), 6);
        assert_eq!(GeneratorMatrix::identity(2).voronoi_vertices().unwrap().len(), 4);
    }
}
