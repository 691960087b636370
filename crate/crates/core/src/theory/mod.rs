//! Statistical checks of the quantizer's error law, the distortion and
//! convergence bounds, and the radius scaling of the optimal generator.
//!
//! Every check returns a [`CheckReport`] whose pass flag is a pure function
//! of the recorded assertions.

mod convergence;
mod distortion;
pub mod geometry;
mod problem;
mod scaling;
mod sdq;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::lattice::{shapes, GeneratorMatrix};
use crate::rng::derive_seed;

pub use convergence::{check_convergence_rate, check_lattice_resolution_ordering, ConvergenceConfig, QuantizerSpec};
pub use distortion::{check_distortion_bound, check_distortion_user_scaling, distortion_rhs, UserLattice};
pub use problem::{Quadratic, StronglyConvexProblem};
pub use scaling::{check_gamma_scaling, check_shape_comparison, enclosing_radius, EnclosingRadius};
pub use sdq::{check_scalar_moment, check_sdq_error_stats, check_sdq_overloaded};

/// One inequality `lower ≤ value ≤ upper`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    /// Premise deliberately violated; the outcome is recorded, not required.
    pub negative_control: bool,
    pub samples: u64,
    pub pass: bool,
    pub assertions: Vec<Assertion>,
    /// Measured values and derived constants, in insertion order.
    pub metrics: Vec<(String, f64)>,
    pub notes: Vec<String>,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, samples: u64) -> Self {
        Self {
            name: name.into(),
            negative_control: false,
            samples,
            pass: true,
            assertions: Vec::new(),
            metrics: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn negative_control(mut self) -> Self {
        self.negative_control = true;
        self
    }

    pub fn assert_range(&mut self, name: impl Into<String>, value: f64, lower: Option<f64>, upper: Option<f64>) -> bool {
        let pass = value.is_finite() && lower.is_none_or(|l| value >= l) && upper.is_none_or(|u| value <= u);
        self.assertions.push(Assertion { name: name.into(), value, lower, upper, pass });
        self.pass &= pass;
        pass
    }

    pub fn assert_le(&mut self, name: impl Into<String>, value: f64, upper: f64) -> bool {
        self.assert_range(name, value, None, Some(upper))
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.push((name.into(), value));
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn get_metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Stats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Stats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Uniform point in the centred ball of the given radius (rejection from the cube).
pub(crate) fn uniform_in_ball(rng: &mut impl Rng, radius: f64, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        if out.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            break;
        }
    }
    for v in out.iter_mut() {
        *v *= radius;
    }
}

/// Sizes and seeds of the default suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub scalar_samples: usize,
    pub sdq_samples: usize,
    pub distortion_trials: usize,
    pub convergence_rounds: usize,
    pub convergence_seeds: usize,
    /// Model dimension of the quadratic problem; larger values average out
    /// more of the seed-to-seed spread of the fitted slope.
    pub convergence_dim: usize,
    pub scaling_samples: usize,
    pub scaling_rate: f64,
    /// Rate of the hexagonal-versus-square comparison.
    pub shape_rate: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scalar_samples: 1_000_000,
            sdq_samples: 100_000,
            distortion_trials: 100_000,
            convergence_rounds: 2000,
            convergence_seeds: 20,
            convergence_dim: 128,
            scaling_samples: 100_000,
            scaling_rate: 2.0,
            shape_rate: 3.0,
        }
    }
}

pub(crate) fn named_generators() -> Vec<(&'static str, GeneratorMatrix)> {
    vec![
        ("identity", shapes::square()),
        ("hexagonal", shapes::hexagonal()),
        ("d2", shapes::d2()),
        ("a2", shapes::a2()),
    ]
}

/// Support radius that leaves a margin of two covering radii around a ball
/// of inputs of radius `4ρ`.
pub(crate) fn comfortable_gamma(gen: &GeneratorMatrix) -> f64 {
    6.0 * gen.covering_radius()
}

type Job = Box<dyn Fn(u64) -> Result<Vec<CheckReport>> + Send + Sync>;

/// Runs every check with its own derived seed; results come back in a fixed
/// order regardless of scheduling.
pub fn run_all(cfg: &SuiteConfig) -> Result<Vec<CheckReport>> {
    let c = cfg.clone();
    let mut jobs: Vec<Job> = Vec::new();
    {
        let n = c.scalar_samples;
        jobs.push(Box::new(move |s| Ok(vec![check_scalar_moment(1.0, n, s)?])));
    }
    for (name, gen) in named_generators() {
        let n = c.sdq_samples;
        jobs.push(Box::new(move |s| {
            let mut r = check_sdq_error_stats(&gen, comfortable_gamma(&gen), n, s)?;
            r.name = format!("sdq_error_stats/{name}");
            Ok(vec![r])
        }));
    }
    {
        let n = c.sdq_samples;
        jobs.push(Box::new(move |s| Ok(vec![check_sdq_overloaded(&shapes::hexagonal(), n, s)?])));
    }
    for users in [1usize, 2, 4] {
        let n = c.distortion_trials;
        jobs.push(Box::new(move |s| {
            let (problem, lattices) = distortion::default_instance(users, s)?;
            let mut r = check_distortion_bound(&problem, &lattices, n, s)?;
            r.name = format!("distortion_bound/U={users}");
            Ok(vec![r])
        }));
    }
    jobs.push(Box::new(|s| Ok(vec![check_distortion_user_scaling(s)?])));
    {
        let (t, seeds, m) = (c.convergence_rounds, c.convergence_seeds, c.convergence_dim);
        jobs.push(Box::new(move |s| {
            let problem = StronglyConvexProblem::random(m, 4, 1.0, 2.0, 1.0, s)?;
            let cfg = ConvergenceConfig { seeds, seed: s, ..ConvergenceConfig::default() };
            Ok(vec![check_convergence_rate(&problem, t, &cfg)?])
        }));
        jobs.push(Box::new(move |s| {
            let problem = StronglyConvexProblem::random(m, 4, 1.0, 2.0, 1.0, s)?;
            Ok(vec![check_lattice_resolution_ordering(&problem, t.min(500), seeds, s)?])
        }));
        jobs.push(Box::new(move |s| {
            let problem = StronglyConvexProblem::homogeneous(m, 4, 1.0, 2.0, s)?;
            let cfg = ConvergenceConfig {
                seeds: 1,
                seed: s,
                quantizer: None,
                slope_range: (None, Some(-0.7)),
                ..ConvergenceConfig::default()
            };
            let mut r = check_convergence_rate(&problem, t.min(500), &cfg)?;
            r.name = "convergence_rate/noiseless_unquantized".into();
            Ok(vec![r])
        }));
    }
    for (name, shape) in [("square", shapes::square()), ("hexagonal", shapes::hexagonal())] {
        let (rate, n) = (c.scaling_rate, c.scaling_samples);
        jobs.push(Box::new(move |s| {
            let a = shape.unit_determinant()?;
            let mut r = check_gamma_scaling(&a, rate, &[1.0, 2.0, 4.0], n, s)?;
            r.name = format!("gamma_scaling/{name}");
            Ok(vec![r])
        }));
    }
    {
        let (rate, n) = (c.shape_rate, c.scaling_samples);
        jobs.push(Box::new(move |s| {
            let hex = shapes::hexagonal().unit_determinant()?;
            let sq = shapes::square();
            Ok(vec![check_shape_comparison(&hex, &sq, rate, 1.0, n, s)?])
        }));
    }
    let out: Vec<Result<Vec<CheckReport>>> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, job)| job(derive_seed(cfg.seed, &[0x7468_6579, i as u64])))
        .collect();
    let mut reports = Vec::new();
    for r in out {
        reports.extend(r?);
    }
    Ok(reports)
}

/// True when every check that is not a negative control passed.
pub fn suite_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.negative_control || r.pass)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_flag_follows_assertions() {
        let mut r = CheckReport::new("x", 1);
        assert!(r.assert_le("a", 1.0, 2.0));
        assert!(r.pass);
        assert!(!r.assert_range("b", f64::NAN, None, None));
        assert!(!r.pass);
        assert!(!r.assertion("b").unwrap().pass);
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, 2.5, -3.0, 7.0];
        let mut s = Stats::default();
        xs.iter().for_each(|&x| s.push(x));
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((s.mean() - mean).abs() < 1e-12 && (s.variance() - var).abs() < 1e-12);
    }
}
