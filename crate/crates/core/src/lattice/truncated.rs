use crate::error::{Error, Result};

use super::generator::GeneratorMatrix;

/// Default cap on the number of integer candidates scanned while enumerating.
pub const DEFAULT_ENUMERATION_CAP: u128 = 10_000_000;

/// Relative slack on the support radius so points lying on the sphere up to
/// rounding are kept (e.g. the hexagonal neighbours at distance exactly 1).
pub const BOUNDARY_REL_EPS: f64 = 1e-12;

#[inline]
pub(crate) fn within_radius(norm_sq: f64, gamma: f64) -> bool {
    let r = gamma * (1.0 + BOUNDARY_REL_EPS);
    norm_sq <= r * r
}

/// Lattice points inside the ball of radius `gamma`: the finite codebook.
///
/// Codewords are stored in lexicographic order of their integer coefficient
/// vectors; `point(i) == gen · index(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedLattice {
    gen: GeneratorMatrix,
    gamma: f64,
    indices: Vec<i64>,
    points: Vec<f64>,
}

/// Half-width of the integer search box that contains every `l` with
/// `‖G·l‖ ≤ gamma`.
pub fn search_half_width(gen: &GeneratorMatrix, gamma: f64) -> f64 {
    (gamma * (1.0 + BOUNDARY_REL_EPS) * gen.max_inverse_row_norm()).ceil()
}

impl TruncatedLattice {
    pub fn build(gen: &GeneratorMatrix, gamma: f64) -> Result<Self> {
        Self::build_with_cap(gen, gamma, DEFAULT_ENUMERATION_CAP)
    }

    pub fn build_with_cap(gen: &GeneratorMatrix, gamma: f64, cap: u128) -> Result<Self> {
        if !gamma.is_finite() || gamma <= 0.0 {
            return Err(Error::Usage(format!("support radius must be positive, got {gamma}")));
        }
        let dim = gen.dim();
        let mut found: Vec<Vec<i64>> = Vec::new();
        for_each_in_ball(gen, gamma, cap, |l| {
            found.push(l.to_vec());
            true
        })?;
        found.sort_unstable();
        let mut indices = Vec::with_capacity(found.len() * dim);
        let mut points = Vec::with_capacity(found.len() * dim);
        let mut p = vec![0.0; dim];
        for l in &found {
            gen.apply_int(l, &mut p);
            indices.extend_from_slice(l);
            points.extend_from_slice(&p);
        }
        Ok(Self { gen: gen.clone(), gamma, indices, points })
    }

    pub fn generator(&self) -> &GeneratorMatrix {
        &self.gen
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.gen.dim()
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self, i: usize) -> &[i64] {
        let d = self.dim();
        &self.indices[i * d..(i + 1) * d]
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points[i * d..(i + 1) * d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim())
    }

    /// Position of the origin codeword.
    pub fn origin_index(&self) -> Option<usize> {
        (0..self.len()).find(|&i| self.index(i).iter().all(|&c| c == 0))
    }

    /// Nearest retained codeword by exhaustive scan; ties go to the lowest
    /// index. Inputs outside the support map to the closest boundary codeword.
    pub fn quantize(&self, x: &[f64]) -> Result<(usize, &[f64])> {
        if self.is_empty() {
            return Err(Error::Geometry("empty codebook".into()));
        }
        if x.len() != self.dim() {
            return Err(Error::Usage(format!(
                "expected a vector of length {}, got {}",
                self.dim(),
                x.len()
            )));
        }
        let i = self.nearest_index(x);
        Ok((i, self.point(i)))
    }

    /// Unchecked variant of [`quantize`](Self::quantize) for hot loops.
    #[inline]
    pub fn nearest_index(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points().enumerate() {
            let d: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Bits per dimension: `log2|codebook| / L`.
    pub fn rate(&self) -> f64 {
        rate_of(self.len(), self.dim())
    }
}

pub fn rate_of(codebook_len: usize, dim: usize) -> f64 {
    (codebook_len as f64).log2() / dim as f64
}

/// Counts `|{l : ‖G·l‖ ≤ gamma}|` without materialising the codebook, giving
/// up with `None` once the count exceeds `limit` or the search visits more
/// than `cap` candidates.
pub fn count_points_up_to(gen: &GeneratorMatrix, gamma: f64, limit: usize, cap: u128) -> Option<usize> {
    let mut count = 0usize;
    let mut over = false;
    for_each_in_ball(gen, gamma, cap, |_| {
        count += 1;
        over = count > limit;
        !over
    })
    .ok()?;
    (!over).then_some(count)
}

/// Visits every `l` with `‖G·l‖ ≤ gamma` (up to the boundary slack) by
/// Fincke–Pohst enumeration over the triangular factor `R` of `G = QR`:
/// coordinates are fixed from last to first, each within the interval the
/// remaining radius allows. Candidates pass the same final norm test as
/// every other membership check. Stops early when `f` returns false.
fn for_each_in_ball(gen: &GeneratorMatrix, gamma: f64, cap: u128, mut f: impl FnMut(&[i64]) -> bool) -> Result<()> {
    let dim = gen.dim();
    let r = gen.r_factor();
    // Loose radius for the interval bounds; exactness comes from the final test.
    let outer = gamma * (1.0 + 1e-9);
    let mut l = vec![0i64; dim];
    let mut hi = vec![0i64; dim];
    let mut residual = vec![0.0; dim + 1];
    residual[dim] = outer * outer;
    let mut p = vec![0.0; dim];
    let mut visited: u128 = 0;

    // Interval for coordinate i given l[i+1..]; returns false if empty.
    let bounds = |i: usize, l: &[i64], residual: &[f64]| -> Option<(i64, i64)> {
        let c: f64 = (i + 1..dim).map(|j| r[i * dim + j] * l[j] as f64).sum();
        let budget = residual[i + 1].max(0.0).sqrt();
        let d = r[i * dim + i];
        let (a, b) = ((-budget - c) / d, (budget - c) / d);
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        if !a.is_finite() || !b.is_finite() || a.abs() > 1e15 || b.abs() > 1e15 {
            return None;
        }
        let (lo, up) = (a.ceil() as i64, b.floor() as i64);
        (lo <= up).then_some((lo, up))
    };
    let partial = |i: usize, l: &[i64]| -> f64 {
        (i..dim).map(|j| r[i * dim + j] * l[j] as f64).sum::<f64>().powi(2)
    };

    let mut i = dim - 1;
    match bounds(i, &l, &residual) {
        Some((lo, up)) => {
            l[i] = lo;
            hi[i] = up;
        }
        None => return Ok(()),
    }
    loop {
        if l[i] > hi[i] {
            if i == dim - 1 {
                return Ok(());
            }
            i += 1;
            l[i] += 1;
            continue;
        }
        visited += 1;
        if visited > cap {
            return Err(Error::Resource { what: "lattice enumeration", needed: visited, cap });
        }
        residual[i] = residual[i + 1] - partial(i, &l);
        if i == 0 {
            gen.apply_int(&l, &mut p);
            if within_radius(p.iter().map(|v| v * v).sum(), gamma) && !f(&l) {
                return Ok(());
            }
            l[0] += 1;
            continue;
        }
        i -= 1;
        match bounds(i, &l, &residual) {
            Some((lo, up)) => {
                l[i] = lo;
                hi[i] = up;
            }
            None => {
                i += 1;
                l[i] += 1;
            }
        }
    }
}
