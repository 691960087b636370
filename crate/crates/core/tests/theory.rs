use olala::lattice::{shapes, GeneratorMatrix, TruncatedLattice};
use olala::theory::geometry::{cell_polygon, clip_to_box, exact_second_moment, polygon_area};
use olala::theory::*;
use proptest::prelude::*;

fn small_suite(seed: u64) -> SuiteConfig {
    SuiteConfig {
        seed,
        scalar_samples: 20_000,
        sdq_samples: 20_000,
        distortion_trials: 5_000,
        convergence_rounds: 200,
        convergence_seeds: 3,
        convergence_dim: 8,
        scaling_samples: 5_000,
        ..SuiteConfig::default()
    }
}

#[test]
fn suite_is_deterministic_and_ordered() {
    let a = run_all(&small_suite(11)).unwrap();
    let b = run_all(&small_suite(11)).unwrap();
    assert_eq!(a, b);
    let names: Vec<&str> = a.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names[0], "scalar_moment");
    assert!(names.contains(&"sdq_error_stats/overloaded"));
    assert_eq!(a.iter().filter(|r| r.negative_control).count(), 1);
    let json = serde_json::to_string(&a).unwrap();
    assert!(json.contains("\"negative_control\":true"));
}

#[test]
fn suite_verdict_ignores_negative_controls() {
    let mut r = CheckReport::new("ok", 1);
    r.assert_le("x", 0.0, 1.0);
    let mut neg = CheckReport::new("neg", 1).negative_control();
    neg.assert_le("x", 2.0, 1.0);
    assert!(suite_passed(&[r.clone(), neg.clone()]));
    let mut bad = r.clone();
    bad.assert_le("y", 2.0, 1.0);
    assert!(!suite_passed(&[bad, neg]));
}

#[test]
fn every_named_generator_passes_error_law() {
    for g in [shapes::square(), shapes::hexagonal(), shapes::d2(), shapes::a2()] {
        let gamma = 6.0 * g.covering_radius();
        let r = check_sdq_error_stats(&g, gamma, 30_000, 8).unwrap();
        assert!(r.pass, "{r:?}");
    }
}

#[test]
fn hexagonal_moment_from_error_law_matches_cell() {
    let g = shapes::hexagonal();
    let r = check_sdq_error_stats(&g, 6.0 * g.covering_radius(), 100_000, 9).unwrap();
    let exact = exact_second_moment(&g).unwrap();
    let (m, se) = (r.get_metric("second_moment").unwrap(), r.get_metric("second_moment_se").unwrap());
    assert!((m - exact).abs() < 4.0 * se, "{m} vs {exact}");
}

#[test]
fn enclosing_radius_matches_brute_force_sort() {
    for (shape, rate) in [(shapes::hexagonal(), 2.0), (shapes::square(), 1.5), (shapes::d2(), 2.5)] {
        let a = shape.unit_determinant().unwrap();
        let er = enclosing_radius(&a, rate).unwrap();
        let mut norms = Vec::new();
        for i in -12i64..=12 {
            for j in -12i64..=12 {
                let mut p = [0.0; 2];
                a.apply_int(&[i, j], &mut p);
                norms.push((p[0] * p[0] + p[1] * p[1]).sqrt());
            }
        }
        norms.sort_by(f64::total_cmp);
        assert!((er.radius - norms[er.target - 1]).abs() < 1e-12);
    }
}

#[test]
fn unit_square_r2_codebook_counts_ties() {
    let r = check_gamma_scaling(&shapes::square(), 2.0, &[1.0, 2.0, 4.0], 5_000, 1).unwrap();
    assert!(r.pass, "{r:?}");
    assert_eq!(r.get_metric("points_within_radius"), Some(21.0));
    assert!(!r.notes.is_empty());
}

#[test]
fn hexagonal_beats_square_at_rate_three() {
    let hex = shapes::hexagonal().unit_determinant().unwrap();
    let r = check_shape_comparison(&hex, &shapes::square(), 3.0, 1.0, 20_000, 4).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn distortion_rhs_has_inverse_square_prefactor() {
    let p = StronglyConvexProblem::random(4, 4, 1.0, 2.0, 0.5, 3).unwrap();
    let l = vec![UserLattice { gen: shapes::hexagonal(), zeta: 2.0 }; 4];
    let rhs = distortion_rhs(&p, &l).unwrap();
    let single = StronglyConvexProblem::new(vec![p.users[0].clone()], vec![0.5]).unwrap();
    let one = distortion_rhs(&single, &l[..1]).unwrap();
    assert_eq!(rhs * 16.0, 4.0 * one);
}

#[test]
fn fine_lattice_converges_closer_than_coarse() {
    let p = StronglyConvexProblem::random(8, 4, 1.0, 2.0, 1.0, 2).unwrap();
    let r = check_lattice_resolution_ordering(&p, 300, 4, 7).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn convergence_bound_holds_along_short_runs() {
    let p = StronglyConvexProblem::random(8, 4, 1.0, 2.0, 1.0, 5).unwrap();
    let cfg = ConvergenceConfig { seeds: 4, seed: 1, slope_range: (None, None), ..Default::default() };
    let r = check_convergence_rate(&p, 300, &cfg).unwrap();
    assert!(r.assertion("max_gap_over_bound").unwrap().pass, "{r:?}");
    assert_eq!(r.get_metric("overloaded_blocks"), Some(0.0));
}

fn arb_generator() -> impl Strategy<Value = GeneratorMatrix> {
    (0.5f64..2.0, -1.0f64..1.0, 0.5f64..2.0, prop::bool::ANY)
        .prop_map(|(a, b, d, flip)| GeneratorMatrix::new(2, vec![a, b, 0.0, if flip { -d } else { d }]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cell_area_is_determinant(g in arb_generator()) {
        let poly = cell_polygon(&g).unwrap();
        prop_assert!((polygon_area(&poly) - g.determinant().abs()).abs() < 1e-9);
    }

    #[test]
    fn grid_clipping_conserves_area(g in arb_generator(), k in 2usize..7) {
        let poly = cell_polygon(&g).unwrap();
        let r = g.covering_radius() * 1.01;
        let w = 2.0 * r / k as f64;
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                let lo = [-r + i as f64 * w, -r + j as f64 * w];
                total += polygon_area(&clip_to_box(&poly, lo, [lo[0] + w, lo[1] + w]));
            }
        }
        prop_assert!((total - polygon_area(&poly)).abs() < 1e-9);
    }

    #[test]
    fn cell_moment_scales_quadratically_and_ignores_rotation(g in arb_generator(), c in 0.25f64..4.0, th in 0.0f64..std::f64::consts::TAU) {
        let m = exact_second_moment(&g).unwrap();
        let scaled = exact_second_moment(&g.scaled(c).unwrap()).unwrap();
        prop_assert!((scaled - c * c * m).abs() <= 1e-9 * scaled);
        let (s, co) = th.sin_cos();
        let e = g.entries();
        let rot = vec![
            co * e[0] - s * e[2], co * e[1] - s * e[3],
            s * e[0] + co * e[2], s * e[1] + co * e[3],
        ];
        let rotated = exact_second_moment(&GeneratorMatrix::new(2, rot).unwrap()).unwrap();
        prop_assert!((rotated - m).abs() <= 1e-9 * m);
    }

    #[test]
    fn cell_moment_beats_sphere_bound(g in arb_generator()) {
        // A disc of equal area has the least second moment: det/(4π) per dimension.
        let m = exact_second_moment(&g).unwrap();
        prop_assert!(m >= g.determinant().abs() / (4.0 * std::f64::consts::PI) * (1.0 - 1e-12));
    }

    #[test]
    fn enclosing_ball_holds_target(g in arb_generator(), rate in 1.0f64..2.5) {
        let a = g.unit_determinant().unwrap();
        let er = enclosing_radius(&a, rate).unwrap();
        let lat = TruncatedLattice::build(&a, er.radius).unwrap();
        prop_assert_eq!(lat.len(), er.count);
        prop_assert!(er.count >= er.target);
        prop_assert_eq!(er.tied, er.count > er.target);
    }
}
