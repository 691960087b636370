use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{GeneratorMatrix, TruncatedLattice, BOUNDARY_REL_EPS};
use crate::learning::codebook_budget;
use crate::rng::derive_seed;

use super::distortion::cell_moment;
use super::sdq::measured_moment;
use super::CheckReport;

const CONSTANCY_SE: f64 = 3.0;

/// Smallest radius whose ball holds `2^{LR}` points of `A·Zᴸ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnclosingRadius {
    pub radius: f64,
    pub target: usize,
    /// Points within `radius`, ties included; exceeds `target` iff `tied`.
    pub count: usize,
    pub tied: bool,
}

/// The `2^{LR}`-th smallest norm among the points of `A·Zᴸ`, found by
/// enumerating balls of doubling radius and sorting the norms.
pub fn enclosing_radius(a: &GeneratorMatrix, rate: f64) -> Result<EnclosingRadius> {
    let target = codebook_budget(a.dim(), rate);
    if target == 0 || target > 1 << 24 {
        return Err(Error::Usage(format!("rate {rate} gives an unusable target of {target} points")));
    }
    let mut radius = a.covering_radius().max(f64::MIN_POSITIVE);
    let lattice = loop {
        let l = TruncatedLattice::build(a, radius)?;
        if l.len() >= target {
            break l;
        }
        radius *= 2.0;
    };
    let mut norms: Vec<f64> = lattice.points().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    norms.sort_by(f64::total_cmp);
    let r = norms[target - 1];
    let count = norms.iter().filter(|&&n| n <= r * (1.0 + BOUNDARY_REL_EPS)).count();
    Ok(EnclosingRadius { radius: r, target, count, tied: count > target })
}

fn check_unit_det(a: &GeneratorMatrix) -> Result<()> {
    if (a.determinant().abs() - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!("shape must have unit determinant, got {}", a.determinant())));
    }
    Ok(())
}

/// Monte Carlo `σ²_SDQ` of `G = (γ/r_A)·A` truncated at γ, inputs kept
/// inside `γ − 2ρ` (or at the origin when that is empty).
fn scaled_moment(a: &GeneratorMatrix, r: f64, gamma: f64, n: usize, seed: u64) -> Result<(GeneratorMatrix, usize, f64, f64, usize)> {
    let g = a.scaled(gamma / r)?;
    let count = TruncatedLattice::build(&g, gamma)?.len();
    let inner = (gamma - 2.0 * g.covering_radius()).max(0.0);
    let (m, se, overloads) = measured_moment(&g, gamma, inner, n, seed)?;
    Ok((g, count, m, se, overloads))
}

/// For each γ, builds `G = (γ / r_A(R))·A` and checks that its codebook
/// holds `2^{LR}` points and that `σ²_SDQ(γ)/γ²` does not depend on γ.
pub fn check_gamma_scaling(a: &GeneratorMatrix, rate: f64, gammas: &[f64], n: usize, seed: u64) -> Result<CheckReport> {
    check_unit_det(a)?;
    if gammas.len() < 2 || gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::Usage("need at least two positive radii".into()));
    }
    let er = enclosing_radius(a, rate)?;
    let mut r = CheckReport::new("gamma_scaling", (n * gammas.len()) as u64);
    r.metric("rate", rate);
    r.metric("enclosing_radius", er.radius);
    r.metric("target_points", er.target as f64);
    r.metric("points_within_radius", er.count as f64);
    r.metric("normalized_moment_exact", cell_moment(a)? / (er.radius * er.radius));
    if er.tied {
        r.note(format!(
            "{} points tie at the enclosing radius; the codebook holds {} > {} points",
            er.count - er.target + 1,
            er.count,
            er.target
        ));
    }
    let mut ratios = Vec::new();
    for (i, &gamma) in gammas.iter().enumerate() {
        let (_, count, m, se, overloads) = scaled_moment(a, er.radius, gamma, n, derive_seed(seed, &[i as u64]))?;
        let (q, q_se) = (m / (gamma * gamma), se / (gamma * gamma));
        r.metric(format!("sigma2_gamma_{gamma}"), m);
        r.metric(format!("sigma2_over_gamma2_{gamma}"), q);
        r.metric(format!("sigma2_over_gamma2_se_{gamma}"), q_se);
        r.assert_range(format!("codeword_count_gamma_{gamma}"), count as f64, Some(er.count as f64), Some(er.count as f64));
        r.assert_le(format!("overloads_gamma_{gamma}"), overloads as f64, 0.0);
        ratios.push((gamma, q, q_se));
    }
    let (g0, q0, s0) = ratios[0];
    for &(g, q, s) in &ratios[1..] {
        let z = (q - q0).abs() / (s * s + s0 * s0).sqrt();
        r.assert_le(format!("constancy_{g0}_vs_{g}_in_se"), z, CONSTANCY_SE);
    }
    Ok(r)
}

/// `σ²_SDQ` of shape `a` is no larger than that of shape `b` at equal
/// `(γ, R)`, both scaled by their enclosing radii.
pub fn check_shape_comparison(
    a: &GeneratorMatrix,
    b: &GeneratorMatrix,
    rate: f64,
    gamma: f64,
    n: usize,
    seed: u64,
) -> Result<CheckReport> {
    check_unit_det(a)?;
    check_unit_det(b)?;
    let mut r = CheckReport::new("shape_comparison", 2 * n as u64);
    r.metric("rate", rate);
    r.metric("gamma", gamma);
    let mut measured = Vec::new();
    for (k, (label, shape)) in [("a", a), ("b", b)].into_iter().enumerate() {
        let er = enclosing_radius(shape, rate)?;
        let (g, count, m, se, _) = scaled_moment(shape, er.radius, gamma, n, derive_seed(seed, &[k as u64]))?;
        r.metric(format!("sigma2_{label}"), m);
        r.metric(format!("sigma2_se_{label}"), se);
        r.metric(format!("sigma2_exact_{label}"), cell_moment(&g)?);
        r.metric(format!("codebook_{label}"), count as f64);
        if er.tied {
            r.note(format!("shape {label}: ties at the enclosing radius give {count} codewords"));
        }
        measured.push(m);
    }
    r.assert_le("sigma2_a_minus_b", measured[0] - measured[1], 0.0);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::shapes;

    #[test]
    fn square_five_points_have_unit_radius() {
        let er = enclosing_radius(&GeneratorMatrix::identity(2), 5f64.log2() / 2.0).unwrap();
        assert_eq!(er.target, 5);
        assert!((er.radius - 1.0).abs() < 1e-12);
        assert_eq!(er.count, 5);
        assert!(!er.tied);
    }

    #[test]
    fn ties_are_flagged() {
        // 16th norm of Z² lies on the √5 shell, which holds 8 points
        let er = enclosing_radius(&GeneratorMatrix::identity(2), 2.0).unwrap();
        assert!((er.radius - 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(er.count, 21);
        assert!(er.tied);
    }

    #[test]
    fn square_scaling_is_quadratic() {
        let r = check_gamma_scaling(&shapes::square(), 2.0, &[1.0, 2.0, 4.0], 20_000, 3).unwrap();
        assert!(r.pass, "{r:?}");
        let q1 = r.get_metric("sigma2_gamma_1").unwrap();
        let q4 = r.get_metric("sigma2_gamma_4").unwrap();
        assert!((q4 / q1 - 16.0).abs() < 0.5, "{}", q4 / q1);
    }

    #[test]
    fn rejects_non_unit_shapes() {
        assert!(check_gamma_scaling(&shapes::hexagonal(), 2.0, &[1.0, 2.0], 100, 0).is_err());
    }
}
