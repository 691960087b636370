use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{shapes, within_radius, DitherStream, GeneratorMatrix, TruncatedLattice, MAX_DIM, ZETA_MAX};
use crate::learning::normalize_generator;
use crate::rng::{chacha, derive_seed};

use super::distortion::cell_moment;
use super::{CheckReport, StronglyConvexProblem};

/// Per-user truncated lattices at a common rate and support radius. User `u`
/// gets `shapes[u % shapes.len()]`, rescaled to the rate.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    pub shapes: Vec<GeneratorMatrix>,
    pub rate: f64,
    pub gamma: f64,
}

impl QuantizerSpec {
    pub fn planar(rate: f64) -> Self {
        Self {
            shapes: vec![shapes::hexagonal(), shapes::square(), shapes::d2(), shapes::a2()],
            rate,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    pub seeds: usize,
    pub seed: u64,
    /// `None` transmits exact stochastic gradients.
    pub quantizer: Option<QuantizerSpec>,
    /// Rounds between logged points.
    pub log_every: usize,
    /// Accepted range of the fitted log-log slope; `None` leaves a side open.
    pub slope_range: (Option<f64>, Option<f64>),
    /// Consecutive increasing windows that count as divergence.
    pub divergence_windows: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            seed: 0,
            quantizer: Some(QuantizerSpec::planar(4.0)),
            log_every: 1,
            slope_range: (Some(-1.3), Some(-0.7)),
            divergence_windows: 5,
        }
    }
}

struct UserQuantizer {
    lattice: TruncatedLattice,
    dither: DitherStream,
    moment: f64,
    /// Largest block norm, in lattice units, that cannot overload.
    safe_radius: f64,
}

struct Trace {
    /// `F(w_t) − F(w_opt)` for `t = 1..=T`.
    gap: Vec<f64>,
    /// `B_t` from the lattices and scales used in round `t`.
    b: Vec<f64>,
    overloads: usize,
}

fn build_quantizers(problem: &StronglyConvexProblem, spec: &QuantizerSpec) -> Result<Vec<(TruncatedLattice, f64, f64)>> {
    (0..problem.num_users())
        .map(|u| {
            let shape = &spec.shapes[u % spec.shapes.len()];
            let dim = shape.dim();
            if problem.dim() % dim != 0 {
                return Err(Error::Usage(format!(
                    "model dimension {} is not a multiple of lattice dimension {dim}",
                    problem.dim()
                )));
            }
            let norm = normalize_generator(shape.entries(), dim, spec.rate, spec.gamma)?;
            let lattice = TruncatedLattice::build(&norm.gen, spec.gamma)?;
            let rho = norm.gen.covering_radius();
            if !(spec.gamma > rho) {
                return Err(Error::Usage(format!(
                    "support radius {} does not exceed the covering radius {rho}",
                    spec.gamma
                )));
            }
            Ok((lattice, cell_moment(&norm.gen)?, rho))
        })
        .collect()
}

/// One seeded run: every round each user draws a stochastic gradient at
/// `w_t`, picks ζ so its largest block cannot overload, quantizes, and the
/// server steps along the average with `η_t = 2 / (μ(ν + t))`.
fn run_once(
    problem: &StronglyConvexProblem,
    lattices: Option<&[(TruncatedLattice, f64, f64)]>,
    rounds: usize,
    nu: f64,
    seed: u64,
) -> Result<Trace> {
    let users = problem.num_users();
    let m = problem.dim();
    let mut rng = chacha(derive_seed(seed, &[0]));
    let mut quantizers: Option<Vec<UserQuantizer>> = lattices
        .map(|ls| {
            ls.iter()
                .enumerate()
                .map(|(u, (lat, moment, rho))| {
                    let gen = lat.generator().clone();
                    let gamma = lat.gamma();
                    // Strictly inside γ − 2ρ both the shifted input and its
                    // nearest lattice point stay in the codebook.
                    let safe_radius = if gamma > 2.0 * rho { gamma - 2.0 * rho } else { gamma - rho };
                    let dither = DitherStream::new(derive_seed(seed, &[1, u as u64]), gen);
                    Ok(UserQuantizer { lattice: lat.clone(), dither, moment: *moment, safe_radius })
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let f_opt = problem.optimum_value();
    let two_l_gamma = 2.0 * problem.l_smooth * problem.gamma_gap;
    let base_noise: f64 = problem.sigma.iter().map(|s| s * s).sum();
    let mut w = DVector::zeros(m);
    let mut trace = Trace { gap: Vec::with_capacity(rounds), b: Vec::with_capacity(rounds), overloads: 0 };
    let (mut d, mut y, mut z) = ([0.0; MAX_DIM], [0.0; MAX_DIM], [0.0; MAX_DIM]);
    let mut l = [0i64; MAX_DIM];
    for t in 1..=rounds {
        let gap = problem.value(&w) - f_opt;
        if !gap.is_finite() {
            return Err(Error::Numeric(format!("optimality gap became {gap} at round {t}")));
        }
        trace.gap.push(gap);
        let eta = 2.0 / (problem.mu * (nu + t as f64));
        let mut avg = DVector::zeros(m);
        let mut sdq_sum = 0.0;
        for u in 0..users {
            let g = problem.stochastic_gradient(u, &w, &mut rng);
            match quantizers.as_mut() {
                None => avg += &g,
                Some(qs) => {
                    let q = &mut qs[u];
                    let dim = q.lattice.dim();
                    let gamma = q.lattice.gamma();
                    let max_block = (0..m / dim)
                        .map(|b| g.rows(b * dim, dim).norm())
                        .fold(0.0, f64::max);
                    let zeta = if max_block > 0.0 { (q.safe_radius / max_block).min(ZETA_MAX) } else { ZETA_MAX };
                    let gen = q.lattice.generator();
                    for b in 0..m / dim {
                        q.dither.sample_into(&mut d[..dim]);
                        for j in 0..dim {
                            y[j] = zeta * g[b * dim + j] + d[j];
                        }
                        // The untruncated nearest point is the codebook's
                        // choice whenever it lies in the support ball; only
                        // overloaded blocks need the full scan.
                        gen.nearest_point_into(&y[..dim], &mut l[..dim]);
                        gen.apply_int(&l[..dim], &mut z[..dim]);
                        let nz: f64 = z[..dim].iter().map(|v| v * v).sum();
                        if !within_radius(nz, gamma) {
                            trace.overloads += 1;
                            let i = q.lattice.nearest_index(&y[..dim]);
                            z[..dim].copy_from_slice(q.lattice.point(i));
                        }
                        for j in 0..dim {
                            avg[b * dim + j] += (z[j] - d[j]) / zeta;
                        }
                    }
                    sdq_sum += m as f64 * q.moment / (zeta * zeta);
                }
            }
        }
        trace.b.push((base_noise + sdq_sum) / (users * users) as f64 + two_l_gamma);
        avg /= users as f64;
        w -= avg * eta;
    }
    Ok(trace)
}

struct Aggregate {
    gap: Vec<f64>,
    b: Vec<f64>,
    overloads: usize,
}

fn run_seeds(problem: &StronglyConvexProblem, rounds: usize, cfg: &ConvergenceConfig) -> Result<Aggregate> {
    let nu = nu(problem);
    let lattices = cfg.quantizer.as_ref().map(|q| build_quantizers(problem, q)).transpose()?;
    let traces: Vec<Result<Trace>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|s| run_once(problem, lattices.as_deref(), rounds, nu, derive_seed(cfg.seed, &[s as u64])))
        .collect();
    let mut agg = Aggregate { gap: vec![0.0; rounds], b: vec![0.0; rounds], overloads: 0 };
    for tr in traces {
        let tr = tr?;
        for t in 0..rounds {
            agg.gap[t] += tr.gap[t] / cfg.seeds as f64;
            agg.b[t] += tr.b[t] / cfg.seeds as f64;
        }
        agg.overloads += tr.overloads;
    }
    Ok(agg)
}

fn nu(problem: &StronglyConvexProblem) -> f64 {
    (8.0 * problem.kappa()).max(1.0)
}

/// Least-squares slope of `y` on `x`.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Quantized federated SGD on the quadratic problem for `rounds` rounds,
/// averaged over `cfg.seeds` runs. Asserts the step-size premise
/// `η_1 ≤ 1/(2L)`, the log-log slope of the mean gap over the second half of
/// the run, and `gap_t ≤ κ/(ν+t−1)·(2/μ·max_{s≤t} B_s + μν/2·‖w_1 − w_opt‖²)`
/// at every logged round.
pub fn check_convergence_rate(problem: &StronglyConvexProblem, rounds: usize, cfg: &ConvergenceConfig) -> Result<CheckReport> {
    if rounds < 4 || cfg.seeds == 0 || cfg.log_every == 0 {
        return Err(Error::Usage("need at least 4 rounds, one seed and a positive logging interval".into()));
    }
    let (mu, l) = (problem.mu, problem.l_smooth);
    let (kappa, nu) = (problem.kappa(), nu(problem));
    let mut r = CheckReport::new("convergence_rate", (rounds * cfg.seeds) as u64);
    r.metric("mu", mu);
    r.metric("l_smooth", l);
    r.metric("kappa", kappa);
    r.metric("nu", nu);
    r.metric("heterogeneity_gap", problem.gamma_gap);
    r.metric("seeds", cfg.seeds as f64);
    let eta1 = 2.0 / (mu * (nu + 1.0));
    if !r.assert_le("eta_1_times_2l", eta1 * 2.0 * l, 1.0) {
        r.note("step-size premise violated; run skipped");
        return Ok(r);
    }
    let agg = run_seeds(problem, rounds, cfg)?;
    let init_dist = problem.w_opt.norm_squared();
    let mut running_b: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    let mut worst_t = 0;
    let mut logged = Vec::new();
    for t in 1..=rounds {
        running_b = running_b.max(agg.b[t - 1]);
        if t % cfg.log_every != 0 && t != rounds && t != 1 {
            continue;
        }
        let rhs = kappa / (nu + t as f64 - 1.0) * (2.0 / mu * running_b + mu * nu / 2.0 * init_dist);
        let ratio = agg.gap[t - 1] / rhs;
        if ratio > worst_ratio || !ratio.is_finite() {
            worst_ratio = ratio;
            worst_t = t;
        }
        logged.push((t, agg.gap[t - 1]));
    }
    r.metric("max_b", running_b);
    r.metric("final_gap", agg.gap[rounds - 1]);
    r.metric("worst_bound_round", worst_t as f64);
    r.metric("logged_points", logged.len() as f64);
    r.metric("overloaded_blocks", agg.overloads as f64);
    r.assert_le("max_gap_over_bound", worst_ratio, 1.0);

    let tail: Vec<&(usize, f64)> = logged.iter().filter(|(t, _)| *t >= rounds / 2).collect();
    let xs: Vec<f64> = tail.iter().map(|(t, _)| (nu + *t as f64).ln()).collect();
    let ys: Vec<f64> = tail.iter().map(|(_, g)| g.max(f64::MIN_POSITIVE).ln()).collect();
    let fitted = slope(&xs, &ys);
    r.assert_range("log_log_slope", fitted, cfg.slope_range.0, cfg.slope_range.1);

    // Divergence: window means of the mean gap increasing too many times in a row.
    let windows = 20.min(rounds);
    let width = rounds / windows;
    let means: Vec<f64> = (0..windows)
        .map(|k| agg.gap[k * width..(k + 1) * width].iter().sum::<f64>() / width as f64)
        .collect();
    let mut run = 0usize;
    let mut longest = 0usize;
    for k in 1..means.len() {
        run = if means[k] > means[k - 1] { run + 1 } else { 0 };
        longest = longest.max(run);
    }
    r.metric("longest_increasing_run", longest as f64);
    if !r.assert_le("increasing_windows", longest as f64, cfg.divergence_windows as f64 - 1.0) {
        r.note(format!("divergence trace (window means): {means:?}"));
    }
    Ok(r)
}

/// Paired runs on the same problem and noise streams: a coarse (`R = 1.5`)
/// and a fine (`R = 4`) lattice. The fine run must end no worse.
pub fn check_lattice_resolution_ordering(
    problem: &StronglyConvexProblem,
    rounds: usize,
    seeds: usize,
    seed: u64,
) -> Result<CheckReport> {
    let mut r = CheckReport::new("convergence_rate/coarse_vs_fine", (2 * rounds * seeds) as u64);
    let tail = (rounds / 10).max(1);
    let mut finals = Vec::new();
    for rate in [1.5, 4.0] {
        let cfg = ConvergenceConfig { seeds, seed, quantizer: Some(QuantizerSpec::planar(rate)), ..ConvergenceConfig::default() };
        let agg = run_seeds(problem, rounds, &cfg)?;
        let fin = agg.gap[rounds - tail..].iter().sum::<f64>() / tail as f64;
        r.metric(format!("final_gap_rate_{rate}"), fin);
        r.metric(format!("max_b_rate_{rate}"), agg.b.iter().cloned().fold(0.0, f64::max));
        finals.push(fin);
    }
    r.assert_le("fine_minus_coarse", finals[1] - finals[0], 0.0);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x: Vec<f64> = (1..50).map(|t| (t as f64).ln()).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 1.5 * v).collect();
        assert!((slope(&x, &y) + 1.5).abs() < 1e-12);
    }

    #[test]
    fn noiseless_unquantized_decays_faster_than_bound() {
        let p = StronglyConvexProblem::homogeneous(4, 4, 1.0, 2.0, 7).unwrap();
        let cfg = ConvergenceConfig { seeds: 1, quantizer: None, slope_range: (None, Some(-0.7)), ..Default::default() };
        let r = check_convergence_rate(&p, 400, &cfg).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn quantized_run_is_deterministic() {
        let p = StronglyConvexProblem::random(4, 4, 1.0, 2.0, 1.0, 1).unwrap();
        let cfg = ConvergenceConfig { seeds: 3, seed: 5, ..Default::default() };
        let a = check_convergence_rate(&p, 200, &cfg).unwrap();
        let b = check_convergence_rate(&p, 200, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_size_premise_is_recorded() {
        let p = StronglyConvexProblem::random(4, 2, 1.0, 3.0, 0.5, 2).unwrap();
        let r = check_convergence_rate(&p, 50, &ConvergenceConfig { seeds: 2, ..Default::default() }).unwrap();
        assert!(r.assertion("eta_1_times_2l").unwrap().pass);
    }
}
