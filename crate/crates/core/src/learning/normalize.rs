use crate::error::{Error, Result};
use crate::lattice::{count_points_up_to, GeneratorMatrix, DEFAULT_ENUMERATION_CAP};

const SCALE_MIN: f64 = 1e-6;
const SCALE_MAX: f64 = 1e6;
const SCALE_STEPS: usize = 60;

/// A raw generator rescaled to meet the codebook-size budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub gen: GeneratorMatrix,
    /// The factor `c` with `gen = c · raw`.
    pub scale: f64,
    pub codebook_len: usize,
}

/// Largest admissible codebook size for rate `R` in dimension `L`.
pub fn codebook_budget(dim: usize, rate: f64) -> usize {
    let b = (dim as f64 * rate).exp2();
    if b >= usize::MAX as f64 {
        usize::MAX
    } else {
        (b + 1e-9).floor() as usize
    }
}

fn unit_ball_volume(dim: usize) -> f64 {
    let (mut even, mut odd) = (1.0, 2.0);
    for n in 2..=dim {
        let v = if n % 2 == 0 { even } else { odd } * 2.0 * std::f64::consts::PI / n as f64;
        if n % 2 == 0 {
            even = v;
        } else {
            odd = v;
        }
    }
    if dim == 0 {
        1.0
    } else if dim % 2 == 0 {
        even
    } else {
        odd
    }
}

/// `|{l : ‖G·l‖ ≤ γ}|` if it does not exceed `limit`.
///
/// The ball of radius `γ − ρ` (ρ a covering-radius bound) is covered by the
/// Voronoi cells of the retained points, which gives a cheap certificate that
/// the count is too large before enumerating a huge box.
fn count_within_budget(gen: &GeneratorMatrix, gamma: f64, limit: usize) -> Option<usize> {
    let rho = gen.covering_radius_bound();
    if gamma > rho {
        let lower = unit_ball_volume(gen.dim()) * (gamma - rho).powi(gen.dim() as i32) / gen.determinant().abs();
        if lower > limit as f64 {
            return None;
        }
    }
    count_points_up_to(gen, gamma, limit, DEFAULT_ENUMERATION_CAP)
}

/// Smallest `c ∈ [1e-6, 1e6]` (geometric bisection) such that the lattice of
/// `c · raw` has at most `2^{L·R}` points within radius `gamma`.
pub fn normalize_generator(raw: &[f64], dim: usize, rate: f64, gamma: f64) -> Result<Normalized> {
    if !rate.is_finite() || rate <= 0.0 {
        return Err(Error::Usage(format!("rate must be positive, got {rate}")));
    }
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::Usage(format!("support radius must be positive, got {gamma}")));
    }
    let base = GeneratorMatrix::new(dim, raw.to_vec())?;
    let budget = codebook_budget(dim, rate);
    let at = |c: f64| -> Result<(GeneratorMatrix, Option<usize>)> {
        let g = base.scaled(c)?;
        let n = count_within_budget(&g, gamma, budget);
        Ok((g, n))
    };
    let (g_hi, n_hi) = at(SCALE_MAX)?;
    let Some(n_hi) = n_hi else {
        return Err(Error::Geometry(format!("no scale up to {SCALE_MAX} meets the codebook budget {budget}")));
    };
    if let (g, Some(n)) = at(SCALE_MIN)? {
        return Ok(Normalized { gen: g, scale: SCALE_MIN, codebook_len: n });
    }
    let (mut lo, mut hi) = (SCALE_MIN.ln(), SCALE_MAX.ln());
    let mut best = (g_hi, SCALE_MAX, n_hi);
    for _ in 0..SCALE_STEPS {
        let mid = 0.5 * (lo + hi);
        let c = mid.exp();
        match at(c)? {
            (g, Some(n)) => {
                hi = mid;
                best = (g, c, n);
            }
            (_, None) => lo = mid,
        }
    }
    let (gen, scale, codebook_len) = best;
    Ok(Normalized { gen, scale, codebook_len })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{shapes, TruncatedLattice};

    fn count(raw: &GeneratorMatrix, c: f64) -> usize {
        TruncatedLattice::build(&raw.scaled(c).unwrap(), 1.0).unwrap().len()
    }

    #[test]
    fn ball_volumes() {
        let pi = std::f64::consts::PI;
        assert_eq!(unit_ball_volume(1), 2.0);
        assert!((unit_ball_volume(2) - pi).abs() < 1e-15);
        assert!((unit_ball_volume(3) - 4.0 * pi / 3.0).abs() < 1e-14);
        assert!((unit_ball_volume(4) - pi * pi / 2.0).abs() < 1e-14);
    }

    #[test]
    fn budgets() {
        assert_eq!(codebook_budget(2, 1.0), 4);
        assert_eq!(codebook_budget(2, 1.5), 8);
        assert_eq!(codebook_budget(2, 3.0), 64);
        assert_eq!(codebook_budget(3, 1.0 / 3.0), 2);
    }

    #[test]
    fn identity_at_rate_one_matches_enumeration_grid() {
        // On the square lattice the in-disk count drops 5 → 1 once c passes 1,
        // so the smallest admissible c sits just above 1 with a single point.
        let raw = GeneratorMatrix::identity(2);
        let n = normalize_generator(raw.entries(), 2, 1.0, 1.0).unwrap();
        assert_eq!(n.codebook_len, 1);
        let grid: Vec<f64> = (0..2000).map(|k| 0.5 + k as f64 * 0.001).collect();
        let oracle = grid.iter().copied().find(|&c| count(&raw, c) <= 4).unwrap();
        assert!(n.scale <= oracle + 1e-12 && n.scale > oracle - 0.001 - 1e-12, "{} {oracle}", n.scale);
        assert_eq!(count(&raw, n.scale), n.codebook_len);
    }

    #[test]
    fn hexagonal_rate_three_is_tight() {
        let raw = shapes::hexagonal();
        let n = normalize_generator(raw.entries(), 2, 3.0, 1.0).unwrap();
        assert!(n.codebook_len > 32 && n.codebook_len <= 64, "{}", n.codebook_len);
        assert_eq!(count(&raw, n.scale), n.codebook_len);
        assert!(count(&raw, n.scale * (1.0 - 1e-9)) > 64);
    }

    #[test]
    fn already_sparse_raw_gets_minimal_scale() {
        let raw = GeneratorMatrix::identity(2).scaled(10.0).unwrap();
        let n = normalize_generator(raw.entries(), 2, 2.0, 1.0).unwrap();
        assert!(n.scale <= 1.0);
        assert!(n.codebook_len <= 16);
        assert!(count(&raw, n.scale * (1.0 - 1e-9)) > 16);
    }

    #[test]
    fn singular_raw_is_a_geometry_error() {
        let err = normalize_generator(&[1.0, 2.0, 2.0, 4.0], 2, 2.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)), "{err:?}");
        assert!(normalize_generator(&[0.0; 4], 2, 2.0, 1.0).is_err());
    }
}
