use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::lattice::{second_moment, shapes, DitherStream, GeneratorMatrix, MAX_DIM};
use crate::rng::{chacha, derive_seed};

use super::geometry::exact_second_moment;
use super::{CheckReport, Stats, StronglyConvexProblem};

/// Slack on the bound in units of the relative standard error of the
/// Monte Carlo left side.
const REL_SE_SLACK: f64 = 5.0;
/// Samples for the moment of cells without a closed form (`L > 2`).
const MOMENT_SAMPLES: usize = 1_000_000;

/// A user's quantizer for gradients: generator and input scale ζ.
#[derive(Debug, Clone, PartialEq)]
pub struct UserLattice {
    pub gen: GeneratorMatrix,
    pub zeta: f64,
}

/// Per-dimension second moment of the cell: exact in the plane, Monte Carlo
/// above.
pub(crate) fn cell_moment(gen: &GeneratorMatrix) -> Result<f64> {
    match exact_second_moment(gen) {
        Some(m) => Ok(m),
        None => Ok(second_moment(gen, MOMENT_SAMPLES, 0x006d_6f6d)?.value),
    }
}

/// `E‖Q(g) − g‖²` for an `m`-vector quantized blockwise at scale ζ without
/// overload: `m · M(G) / ζ²`.
pub(crate) fn sdq_variance(gen: &GeneratorMatrix, zeta: f64, m: usize) -> Result<f64> {
    Ok(m as f64 * cell_moment(gen)? / (zeta * zeta))
}

/// Right side of the distortion bound: `(1/U²) Σ_u (σ_u² + σ²_SDQ,u)`.
pub fn distortion_rhs(problem: &StronglyConvexProblem, lattices: &[UserLattice]) -> Result<f64> {
    Ok(distortion_terms(problem, lattices)?.iter().sum::<f64>() / (problem.num_users() as f64).powi(2))
}

fn distortion_terms(problem: &StronglyConvexProblem, lattices: &[UserLattice]) -> Result<Vec<f64>> {
    if lattices.len() != problem.num_users() {
        return Err(Error::Usage(format!(
            "{} lattices for {} users",
            lattices.len(),
            problem.num_users()
        )));
    }
    let m = problem.dim();
    lattices
        .iter()
        .zip(&problem.sigma)
        .map(|(ul, s)| {
            if m % ul.gen.dim() != 0 {
                return Err(Error::Usage(format!(
                    "model dimension {m} is not a multiple of lattice dimension {}",
                    ul.gen.dim()
                )));
            }
            Ok(s * s + sdq_variance(&ul.gen, ul.zeta, m)?)
        })
        .collect()
}

/// Blockwise dithered quantization of `g` at scale ζ on the untruncated
/// lattice. Returns false when the shifted block leaves the support ball of
/// radius `gamma` or its nearest point lies outside it (overload).
pub(crate) fn quantize_gradient(
    ul: &UserLattice,
    gamma: f64,
    g: &DVector<f64>,
    dither: &mut DitherStream,
    out: &mut DVector<f64>,
) -> bool {
    let dim = ul.gen.dim();
    let (mut d, mut y, mut z) = ([0.0; MAX_DIM], [0.0; MAX_DIM], [0.0; MAX_DIM]);
    let mut l = [0i64; MAX_DIM];
    let mut ok = true;
    for b in 0..g.len() / dim {
        dither.sample_into(&mut d[..dim]);
        for j in 0..dim {
            y[j] = ul.zeta * g[b * dim + j] + d[j];
        }
        ul.gen.nearest_point_into(&y[..dim], &mut l[..dim]);
        ul.gen.apply_int(&l[..dim], &mut z[..dim]);
        let ny: f64 = y[..dim].iter().map(|v| v * v).sum();
        let nz: f64 = z[..dim].iter().map(|v| v * v).sum();
        ok &= ny <= gamma * gamma && nz <= gamma * gamma;
        for j in 0..dim {
            out[b * dim + j] = (z[j] - d[j]) / ul.zeta;
        }
    }
    ok
}

/// Monte Carlo check of the distortion bound at `w = 0`: the averaged
/// quantized stochastic gradient deviates from the averaged full gradient by
/// at most `(1/U²) Σ_u (σ_u² + σ²_SDQ,u)` in mean square.
///
/// Each user's support radius is three times the sure bound on its gradient
/// norm (in lattice units) plus two covering radii, so no trial overloads.
pub fn check_distortion_bound(
    problem: &StronglyConvexProblem,
    lattices: &[UserLattice],
    n: usize,
    seed: u64,
) -> Result<CheckReport> {
    let terms = distortion_terms(problem, lattices)?;
    let users = problem.num_users();
    let m = problem.dim();
    let sum_terms: f64 = terms.iter().sum();
    let rhs = distortion_rhs(problem, lattices)?;
    let w = DVector::zeros(m);
    let full: Vec<DVector<f64>> = problem.users.iter().map(|q| q.gradient(&w)).collect();
    let gammas: Vec<f64> = (0..users)
        .map(|u| 3.0 * lattices[u].zeta * (full[u].norm() + problem.noise_bound(u)) + 2.0 * lattices[u].gen.covering_radius())
        .collect();
    let mean_full: DVector<f64> = full.iter().sum::<DVector<f64>>() / users as f64;
    let mut rng = chacha(derive_seed(seed, &[0]));
    let mut dithers: Vec<DitherStream> = lattices
        .iter()
        .enumerate()
        .map(|(u, ul)| DitherStream::new(derive_seed(seed, &[1, u as u64]), ul.gen.clone()))
        .collect();
    let mut q = DVector::zeros(m);
    let mut stats = Stats::default();
    let mut overloads = 0usize;
    for _ in 0..n {
        let mut avg = DVector::zeros(m);
        for u in 0..users {
            let g = problem.stochastic_gradient(u, &w, &mut rng);
            if !quantize_gradient(&lattices[u], gammas[u], &g, &mut dithers[u], &mut q) {
                overloads += 1;
            }
            avg += &q;
        }
        avg /= users as f64;
        stats.push((avg - &mean_full).norm_squared());
    }
    let lhs = stats.mean();
    let rel_se = stats.std_error() / lhs.max(f64::MIN_POSITIVE);
    let mut r = CheckReport::new("distortion_bound", n as u64);
    r.metric("users", users as f64);
    r.metric("lhs", lhs);
    r.metric("lhs_se", stats.std_error());
    r.metric("rhs", rhs);
    for (u, t) in terms.iter().enumerate() {
        r.metric(format!("term_{u}"), *t);
    }
    r.assert_le("lhs_over_rhs", lhs / rhs, 1.0 + REL_SE_SLACK * rel_se);
    let prefactor = rhs * (users * users) as f64 / sum_terms;
    r.assert_range("rhs_prefactor", prefactor, Some(1.0 - 4.0 * f64::EPSILON), Some(1.0 + 4.0 * f64::EPSILON));
    r.assert_le("overloads", overloads as f64, 0.0);
    Ok(r)
}

/// With identical per-user terms the bound falls exactly as `1/U`
/// (`U` equal terms under a `1/U²` prefactor).
pub fn check_distortion_user_scaling(seed: u64) -> Result<CheckReport> {
    let base = StronglyConvexProblem::random(4, 1, 1.0, 2.0, 0.8, seed)?;
    let ul = UserLattice { gen: shapes::hexagonal(), zeta: 3.0 };
    let rhs = |users: usize| -> Result<f64> {
        let p = StronglyConvexProblem::new(vec![base.users[0].clone(); users], vec![base.sigma[0]; users])?;
        distortion_rhs(&p, &vec![ul.clone(); users])
    };
    let r1 = rhs(1)?;
    let mut r = CheckReport::new("distortion_bound/user_scaling", 0);
    r.metric("rhs_1", r1);
    for users in [2usize, 4] {
        let ru = rhs(users)?;
        r.metric(format!("rhs_{users}"), ru);
        let ratio = r1 / ru;
        let u = users as f64;
        r.assert_range(format!("rhs_ratio_1_to_{users}"), ratio, Some(u * (1.0 - 1e-12)), Some(u * (1.0 + 1e-12)));
    }
    Ok(r)
}

/// Heterogeneous instance used by the default suite: hand-set noise levels
/// `σ_u = 0.25·(u + 1)` and a different planar lattice per user.
pub(crate) fn default_instance(users: usize, seed: u64) -> Result<(StronglyConvexProblem, Vec<UserLattice>)> {
    let base = StronglyConvexProblem::random(4, users, 1.0, 2.0, 0.0, seed)?;
    let sigma = (0..users).map(|u| 0.25 * (u + 1) as f64).collect();
    let problem = StronglyConvexProblem::new(base.users, sigma)?;
    let gens = [shapes::hexagonal(), shapes::square(), shapes::d2(), shapes::a2()];
    let lattices = (0..users).map(|u| UserLattice { gen: gens[u % 4].clone(), zeta: 2.0 + u as f64 }).collect();
    Ok((problem, lattices))
}
