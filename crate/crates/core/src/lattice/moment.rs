use crate::error::{Error, Result};

use super::dither::DitherStream;
use super::generator::{GeneratorMatrix, MAX_DIM};
use super::truncated::{within_radius, TruncatedLattice};

/// Monte Carlo estimate of the per-dimension second moment of the Voronoi cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// `E‖d‖²/L` for `d` uniform on the basic cell, estimated from `samples`
/// dithers.
pub fn second_moment(gen: &GeneratorMatrix, samples: usize, seed: u64) -> Result<MomentEstimate> {
    if samples < 2 {
        return Err(Error::Usage("second moment needs at least two samples".into()));
    }
    let dim = gen.dim();
    let mut stream = DitherStream::new(seed, gen.clone());
    let mut d = [0.0; MAX_DIM];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        stream.sample_into(&mut d[..dim]);
        let v = d[..dim].iter().map(|x| x * x).sum::<f64>() / dim as f64;
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(MomentEstimate { value: mean, std_error: (var / n).sqrt(), samples })
}

/// Why [`fit_scale`] could not produce a regular interior solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleWarning {
    /// Every input block is zero; any ζ works and 1 is returned.
    ZeroInput,
    /// Even the smallest admissible ζ overloads too often (dither alone
    /// escapes the ball).
    InfeasibleAtMinimum,
    /// The largest admissible ζ is still within budget.
    SaturatedAtMaximum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleFit {
    pub zeta: f64,
    pub overload_fraction: f64,
    pub warning: Option<ScaleWarning>,
}

pub const ZETA_MIN: f64 = 1e-9;
pub const ZETA_MAX: f64 = 1e9;
const BISECTION_STEPS: usize = 50;

/// Largest ζ (to relative precision ~1e-13) whose overload fraction on
/// `blocks` stays within `target`, using one probe dither per block.
///
/// `blocks` is a flat row-major buffer of `L`-vectors. Bisection runs on
/// `log ζ`, which keeps the answer exactly equivariant under input rescaling
/// by powers of two and gives uniform relative accuracy.
pub fn fit_scale(
    blocks: &[f64],
    lattice: &TruncatedLattice,
    probe: &mut DitherStream,
    target: f64,
) -> Result<ScaleFit> {
    let dim = lattice.dim();
    if blocks.is_empty() || blocks.len() % dim != 0 {
        return Err(Error::Usage(format!(
            "expected a non-empty multiple of {dim} values, got {}",
            blocks.len()
        )));
    }
    if !(0.0..1.0).contains(&target) {
        return Err(Error::Usage(format!("overload target must lie in [0, 1), got {target}")));
    }
    if probe.generator().dim() != dim {
        return Err(Error::Usage("probe stream dimension differs from the lattice".into()));
    }
    let n = blocks.len() / dim;
    let dithers = probe.sample_many(n);
    if blocks.iter().all(|&v| v == 0.0) {
        let frac = overload_fraction(blocks, 1.0, &dithers, lattice.gamma(), dim);
        return Ok(ScaleFit { zeta: 1.0, overload_fraction: frac, warning: Some(ScaleWarning::ZeroInput) });
    }
    let allowed = (target * n as f64 + 1e-9).floor() as usize;
    let gamma = lattice.gamma();
    let count = |z: f64| overload_count(blocks, z, &dithers, gamma, dim);
    let fit = |zeta: f64, warning| ScaleFit {
        zeta,
        overload_fraction: count(zeta) as f64 / n as f64,
        warning,
    };

    if count(ZETA_MAX) <= allowed {
        return Ok(fit(ZETA_MAX, Some(ScaleWarning::SaturatedAtMaximum)));
    }
    if count(ZETA_MIN) > allowed {
        return Ok(fit(ZETA_MIN, Some(ScaleWarning::InfeasibleAtMinimum)));
    }
    let (mut lo, mut hi) = (ZETA_MIN.ln(), ZETA_MAX.ln());
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if count(mid.exp()) <= allowed {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(fit(lo.exp(), None))
}

fn overload_count(blocks: &[f64], zeta: f64, dithers: &[f64], gamma: f64, dim: usize) -> usize {
    blocks
        .chunks_exact(dim)
        .zip(dithers.chunks_exact(dim))
        .filter(|(x, d)| {
            let n2: f64 = x.iter().zip(*d).map(|(a, b)| (zeta * a + b).powi(2)).sum();
            !within_radius(n2, gamma)
        })
        .count()
}

/// Fraction of blocks with `‖ζ·x + d‖ > γ`.
pub fn overload_fraction(blocks: &[f64], zeta: f64, dithers: &[f64], gamma: f64, dim: usize) -> f64 {
    let n = blocks.len() / dim;
    if n == 0 {
        return 0.0;
    }
    overload_count(blocks, zeta, dithers, gamma, dim) as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::shapes;

    #[test]
    fn scalar_second_moment_is_one_twelfth() {
        let m = second_moment(&GeneratorMatrix::identity(1), 200_000, 1).unwrap();
        assert!((m.value - 1.0 / 12.0).abs() < 4.0 * m.std_error + 1e-12, "{m:?}");
    }

    #[test]
    fn hexagonal_second_moment() {
        // Unit-determinant hexagonal cell: G = 5/(36√3) ≈ 0.0801875.
        let g = shapes::hexagonal().unit_determinant().unwrap();
        let m = second_moment(&g, 400_000, 2).unwrap();
        let exact = 5.0 / (36.0 * 3f64.sqrt());
        assert!((m.value - exact).abs() < 4.0 * m.std_error, "{m:?} vs {exact}");
    }

    #[test]
    fn fit_scale_zero_input() {
        let g = GeneratorMatrix::identity(2);
        let lat = TruncatedLattice::build(&g, 2.0).unwrap();
        let mut probe = DitherStream::new(0, g);
        let fit = fit_scale(&[0.0; 8], &lat, &mut probe, 0.1).unwrap();
        assert_eq!(fit.zeta, 1.0);
        assert_eq!(fit.warning, Some(ScaleWarning::ZeroInput));
    }

    #[test]
    fn fit_scale_zero_target_brackets() {
        let g = shapes::hexagonal().scaled(0.1).unwrap();
        let lat = TruncatedLattice::build(&g, 1.0).unwrap();
        let rho = g.covering_radius();
        let blocks: Vec<f64> = (0..200).flat_map(|i| {
            let t = i as f64 * 0.1;
            [t.sin() * 3.0, t.cos() * 2.0]
        }).collect();
        let max_norm = blocks.chunks(2).map(|c| c[0].hypot(c[1])).fold(0.0, f64::max);
        let mut probe = DitherStream::new(4, g);
        let fit = fit_scale(&blocks, &lat, &mut probe, 0.0).unwrap();
        assert!(fit.warning.is_none());
        assert_eq!(fit.overload_fraction, 0.0);
        assert!(fit.zeta >= (1.0 - rho) / max_norm - 1e-9);
        assert!(fit.zeta <= (1.0 + rho) / max_norm + 1e-9);
    }

    #[test]
    fn fit_scale_is_scale_equivariant() {
        let g = shapes::hexagonal().scaled(0.2).unwrap();
        let lat = TruncatedLattice::build(&g, 1.0).unwrap();
        let blocks: Vec<f64> = (0..500).map(|i| ((i * 37 % 101) as f64 - 50.0) / 10.0).collect();
        let scaled: Vec<f64> = blocks.iter().map(|v| v * 4.0).collect();
        let a = fit_scale(&blocks, &lat, &mut DitherStream::new(8, g.clone()), 0.02).unwrap();
        let b = fit_scale(&scaled, &lat, &mut DitherStream::new(8, g), 0.02).unwrap();
        assert!((a.zeta / b.zeta - 4.0).abs() < 1e-9, "{} {}", a.zeta, b.zeta);
        assert!(a.overload_fraction <= 0.02 + 1e-12);
    }

    #[test]
    fn fit_scale_infeasible_at_minimum() {
        // Ball radius below the covering radius: dither alone overloads.
        let g = GeneratorMatrix::identity(2);
        let lat = TruncatedLattice::build(&g, 0.1).unwrap();
        let fit = fit_scale(&[1.0; 200], &lat, &mut DitherStream::new(1, g), 0.0).unwrap();
        assert_eq!(fit.warning, Some(ScaleWarning::InfeasibleAtMinimum));
        assert_eq!(fit.zeta, ZETA_MIN);
    }

    #[test]
    fn fit_scale_validates_inputs() {
        let g = GeneratorMatrix::identity(2);
        let lat = TruncatedLattice::build(&g, 2.0).unwrap();
        let mut p = DitherStream::new(1, g);
        assert!(fit_scale(&[1.0; 3], &lat, &mut p, 0.1).is_err());
        assert!(fit_scale(&[1.0; 4], &lat, &mut p, 1.0).is_err());
        assert!(fit_scale(&[], &lat, &mut p, 0.1).is_err());
    }
}
