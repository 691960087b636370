use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::lattice::{second_moment, DitherStream, GeneratorMatrix, SdqCodec, TruncatedLattice, MAX_DIM};
use crate::rng::{chacha, derive_seed};

use super::geometry::{cell_polygon, clip_to_box, exact_second_moment, polygon_area};
use super::{uniform_in_ball, CheckReport, Stats};

const MEAN_SE: f64 = 4.0;
const MOMENT_SE: f64 = 4.0;
const MAX_CORR: f64 = 0.02;
const CHI2_LEVEL: f64 = 0.999;
const GRID: usize = 5;
const MIN_EXPECTED: f64 = 5.0;

/// Raw sums gathered from `n` encode/decode trials at unit scale.
struct ErrorSample {
    dim: usize,
    n: usize,
    overloads: usize,
    components: Vec<Stats>,
    moment: Stats,
    sum_x: Vec<f64>,
    sum_xx: Vec<f64>,
    sum_ee: Vec<f64>,
    sum_ex: Vec<f64>,
    bins: Option<Bins>,
}

struct Bins {
    lo: [f64; 2],
    width: [f64; 2],
    /// Grid shape along each axis (`[GRID, 1]` for a scalar cell).
    shape: [usize; 2],
    counts: Vec<u64>,
}

impl Bins {
    fn for_cell(gen: &GeneratorMatrix) -> Option<Self> {
        let poly = cell_polygon(gen)?;
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &poly {
            for a in 0..2 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        let shape = if gen.dim() == 1 { [GRID, 1] } else { [GRID, GRID] };
        let width = [(hi[0] - lo[0]) / shape[0] as f64, ((hi[1] - lo[1]) / shape[1] as f64).max(1.0)];
        Some(Self { lo, width, shape, counts: vec![0; shape[0] * shape[1]] })
    }

    fn add(&mut self, e: &[f64]) {
        let cell = |a: usize, v: f64| (((v - self.lo[a]) / self.width[a]).floor().max(0.0) as usize).min(self.shape[a] - 1);
        let i = cell(0, e[0]);
        let j = if e.len() > 1 { cell(1, e[1]) } else { 0 };
        self.counts[i * self.shape[1] + j] += 1;
    }

    /// Probability of each bin under the uniform law on the cell.
    fn probabilities(&self, gen: &GeneratorMatrix) -> Vec<f64> {
        let poly = cell_polygon(gen).expect("binned cells are planar");
        if gen.dim() == 1 {
            return vec![1.0 / self.shape[0] as f64; self.shape[0]];
        }
        let total = polygon_area(&poly);
        let mut p = Vec::with_capacity(self.counts.len());
        for i in 0..self.shape[0] {
            for j in 0..self.shape[1] {
                let lo = [self.lo[0] + i as f64 * self.width[0], self.lo[1] + j as f64 * self.width[1]];
                let hi = [lo[0] + self.width[0], lo[1] + self.width[1]];
                p.push(polygon_area(&clip_to_box(&poly, lo, hi)) / total);
            }
        }
        p
    }
}

fn sample_errors(gen: &GeneratorMatrix, gamma: f64, input_radius: f64, n: usize, seed: u64) -> Result<ErrorSample> {
    let dim = gen.dim();
    let lattice = TruncatedLattice::build(gen, gamma)?;
    let codec = SdqCodec::new(lattice, 1.0, DitherStream::new(derive_seed(seed, &[1]), gen.clone()))?;
    let mut dither = DitherStream::new(derive_seed(seed, &[1]), gen.clone());
    let mut rng = chacha(derive_seed(seed, &[2]));
    let mut s = ErrorSample {
        dim,
        n,
        overloads: 0,
        components: vec![Stats::default(); dim],
        moment: Stats::default(),
        sum_x: vec![0.0; dim],
        sum_xx: vec![0.0; dim],
        sum_ee: vec![0.0; dim],
        sum_ex: vec![0.0; dim * dim],
        bins: Bins::for_cell(gen),
    };
    let (mut x, mut d, mut e, mut shifted, mut z) = ([0.0; MAX_DIM], [0.0; MAX_DIM], [0.0; MAX_DIM], [0.0; MAX_DIM], [0.0; MAX_DIM]);
    for _ in 0..n {
        uniform_in_ball(&mut rng, input_radius, &mut x[..dim]);
        dither.sample_into(&mut d[..dim]);
        let idx = codec.encode(&x[..dim], &d[..dim])?;
        codec.decode_into(idx, &d[..dim], &mut e[..dim])?;
        for j in 0..dim {
            shifted[j] = x[j] + d[j];
            e[j] -= x[j];
        }
        // Overloaded: outside the support ball, or truncation moved the
        // quantizer off the true nearest lattice point.
        let near = gen.nearest_point(&shifted[..dim]);
        gen.apply_int(&near, &mut z[..dim]);
        let norm_sq: f64 = shifted[..dim].iter().map(|v| v * v).sum();
        let off = z[..dim].iter().zip(codec.lattice().point(idx)).any(|(a, b)| a != b);
        if norm_sq > gamma * gamma || off {
            s.overloads += 1;
        }
        let mut sq = 0.0;
        for j in 0..dim {
            s.components[j].push(e[j]);
            sq += e[j] * e[j];
            s.sum_x[j] += x[j];
            s.sum_xx[j] += x[j] * x[j];
            s.sum_ee[j] += e[j] * e[j];
            for k in 0..dim {
                s.sum_ex[j * dim + k] += e[j] * x[k];
            }
        }
        s.moment.push(sq / dim as f64);
        if let Some(b) = s.bins.as_mut() {
            b.add(&e[..dim]);
        }
    }
    Ok(s)
}

/// Per-dimension second moment of the quantization error (mean, standard
/// error) and the number of overloaded trials.
pub(super) fn measured_moment(
    gen: &GeneratorMatrix,
    gamma: f64,
    input_radius: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    let s = sample_errors(gen, gamma, input_radius, n, seed)?;
    Ok((s.moment.mean(), s.moment.std_error(), s.overloads))
}

impl ErrorSample {
    fn max_abs_corr(&self) -> f64 {
        let n = self.n as f64;
        let mut worst: f64 = 0.0;
        for j in 0..self.dim {
            let me = self.components[j].mean();
            let ve = self.sum_ee[j] / n - me * me;
            for k in 0..self.dim {
                let mx = self.sum_x[k] / n;
                let vx = self.sum_xx[k] / n - mx * mx;
                let cov = self.sum_ex[j * self.dim + k] / n - me * mx;
                worst = worst.max((cov / (ve * vx).sqrt()).abs());
            }
        }
        worst
    }

    /// Pearson statistic after pooling bins with expected count below 5,
    /// with its degrees of freedom.
    fn chi_square(&self, gen: &GeneratorMatrix) -> Option<(f64, usize, usize)> {
        let bins = self.bins.as_ref()?;
        let n = self.n as f64;
        let probs = bins.probabilities(gen);
        let mut kept: Vec<(f64, f64)> = Vec::new();
        let (mut pool_obs, mut pool_exp) = (0.0, 0.0);
        for (&c, &p) in bins.counts.iter().zip(&probs) {
            if n * p < MIN_EXPECTED {
                pool_obs += c as f64;
                pool_exp += n * p;
            } else {
                kept.push((c as f64, n * p));
            }
        }
        if pool_exp >= MIN_EXPECTED || kept.is_empty() {
            kept.push((pool_obs, pool_exp));
        } else if pool_obs > 0.0 || pool_exp > 0.0 {
            let smallest = kept.iter_mut().min_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty");
            smallest.0 += pool_obs;
            smallest.1 += pool_exp;
        }
        let stat = kept
            .iter()
            .map(|&(o, e)| if e > 0.0 { (o - e).powi(2) / e } else if o > 0.0 { f64::INFINITY } else { 0.0 })
            .sum();
        Some((stat, kept.len().saturating_sub(1), bins.counts.len()))
    }
}

fn error_stats_report(
    name: &str,
    gen: &GeneratorMatrix,
    gamma: f64,
    input_radius: f64,
    n: usize,
    seed: u64,
) -> Result<CheckReport> {
    if n < 100 {
        return Err(Error::Usage(format!("error statistics need at least 100 samples, got {n}")));
    }
    let s = sample_errors(gen, gamma, input_radius, n, seed)?;
    let mut r = CheckReport::new(name, n as u64);
    r.metric("gamma", gamma);
    r.metric("input_radius", input_radius);
    r.metric("overload_fraction", s.overloads as f64 / n as f64);
    for (j, c) in s.components.iter().enumerate() {
        r.metric(format!("mean_{j}"), c.mean());
        r.assert_le(format!("mean_{j}_in_se"), c.mean().abs() / c.std_error(), MEAN_SE);
    }
    let reference = second_moment(gen, n, derive_seed(seed, &[3]))?;
    let combined = (s.moment.std_error().powi(2) + reference.std_error.powi(2)).sqrt();
    r.metric("second_moment", s.moment.mean());
    r.metric("second_moment_se", s.moment.std_error());
    r.metric("second_moment_reference", reference.value);
    r.metric("second_moment_reference_se", reference.std_error);
    if let Some(exact) = exact_second_moment(gen) {
        r.metric("second_moment_exact", exact);
    }
    r.assert_le("second_moment_in_se", (s.moment.mean() - reference.value).abs() / combined, MOMENT_SE);
    r.assert_le("max_abs_corr", s.max_abs_corr(), MAX_CORR);
    match s.chi_square(gen) {
        Some((stat, dof, raw)) if dof > 0 => {
            let q = ChiSquared::new(dof as f64).map_err(|e| Error::Numeric(e.to_string()))?.inverse_cdf(CHI2_LEVEL);
            r.metric("chi_square_bins", raw as f64);
            r.metric("chi_square_dof", dof as f64);
            r.assert_le("chi_square", stat, q);
        }
        _ => r.note("uniformity histogram skipped: only defined for one- and two-dimensional cells"),
    }
    Ok(r)
}

/// Error law of the dithered quantizer on inputs confined to the ball of
/// radius `γ − 2ρ`, so that neither the support ball nor truncation is ever
/// reached: zero mean, second moment equal to the cell's, no correlation
/// with the input and a uniform histogram over the cell.
pub fn check_sdq_error_stats(gen: &GeneratorMatrix, gamma: f64, n: usize, seed: u64) -> Result<CheckReport> {
    let rho = gen.covering_radius();
    let inner = gamma - 2.0 * rho;
    if !(inner > 0.0) {
        return Err(Error::Usage(format!(
            "gamma {gamma} leaves no room for inputs: need more than twice the covering radius {rho}"
        )));
    }
    let mut r = error_stats_report("sdq_error_stats", gen, gamma, inner, n, seed)?;
    let overloads = r.get_metric("overload_fraction").unwrap_or(f64::NAN);
    if !r.assert_le("overload_fraction", overloads, 0.0) {
        r.note("overload despite pre-shrunk inputs: sampling harness is broken");
    }
    Ok(r)
}

/// Negative control: inputs spread over twice the support radius, so most
/// trials overload and the error follows the input. Not expected to pass.
pub fn check_sdq_overloaded(gen: &GeneratorMatrix, n: usize, seed: u64) -> Result<CheckReport> {
    let gamma = super::comfortable_gamma(gen);
    let mut r = error_stats_report("sdq_error_stats/overloaded", gen, gamma, 2.0 * gamma, n, seed)?.negative_control();
    r.note("inputs exceed the support ball; independence is not expected to hold");
    Ok(r)
}

/// Scalar lattice `ΔZ`: the measured second moment matches `Δ²/12`.
pub fn check_scalar_moment(delta: f64, n: usize, seed: u64) -> Result<CheckReport> {
    let gen = GeneratorMatrix::new(1, vec![delta])?;
    let gamma = 3.0 * delta.abs();
    let s = sample_errors(&gen, gamma, gamma - delta.abs(), n, seed)?;
    let exact = delta * delta / 12.0;
    let mut r = CheckReport::new("scalar_moment", n as u64);
    r.metric("delta", delta);
    r.metric("second_moment", s.moment.mean());
    r.metric("second_moment_se", s.moment.std_error());
    r.metric("second_moment_exact", exact);
    r.assert_le("second_moment_in_se", (s.moment.mean() - exact).abs() / s.moment.std_error(), MOMENT_SE);
    r.assert_le("overload_fraction", s.overloads as f64 / n as f64, 0.0);
    Ok(r)
}
