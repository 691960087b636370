use olala::lattice::*;
use olala::rng::chacha;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Straight-line SplitMix64 walk, written independently of the library.
fn reference_uniform(seed: u64, index: u64) -> f64 {
    fn fin(mut z: u64) -> u64 {
        z ^= z >> 30;
        z = z.wrapping_mul(0xBF58476D1CE4E5B9);
        z ^= z >> 27;
        z = z.wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    let key = fin(seed);
    let bits = fin(key.wrapping_add((index + 1).wrapping_mul(0x9E3779B97F4A7C15)));
    (bits >> 11) as f64 / 9007199254740992.0
}

#[test]
fn encode_index_matches_reference_walk() {
    let g = GeneratorMatrix::identity(2);
    let lat = TruncatedLattice::build(&g, 1.0).unwrap();
    let mut stream = DitherStream::new(42, g.clone());
    let codec = SdqCodec::new(lat.clone(), 1.0, DitherStream::new(42, g)).unwrap();
    let d = stream.sample();

    let u = [reference_uniform(42, 0), reference_uniform(42, 1)];
    let folded = [u[0] - u[0].round(), u[1] - u[1].round()];
    assert_eq!(d, folded);
    let y = [0.3 + folded[0], 0.3 + folded[1]];
    let book = [(-1.0, 0.0), (0.0, -1.0), (0.0, 0.0), (0.0, 1.0), (1.0, 0.0)];
    let expected = (0..5)
        .min_by(|&a, &b| {
            let da = (book[a].0 - y[0]).powi(2) + (book[a].1 - y[1]).powi(2);
            let db = (book[b].0 - y[0]).powi(2) + (book[b].1 - y[1]).powi(2);
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    assert_eq!(codec.encode(&[0.3, 0.3], &d).unwrap(), expected);
}

#[test]
fn decode_error_is_zero_mean_within_three_standard_errors() {
    let g = shapes::hexagonal().scaled(0.2).unwrap();
    let lat = TruncatedLattice::build(&g, 1.0).unwrap();
    let codec = SdqCodec::new(lat, 1.0, DitherStream::new(0, g.clone())).unwrap();
    let mut stream = DitherStream::new(17, g.clone());
    let mut rng = chacha(5);
    let n = 10_000;
    let (mut s, mut s2) = ([0.0; 2], [0.0; 2]);
    let rho = g.covering_radius();
    for _ in 0..n {
        let r = (1.0 - 2.0 * rho) * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let x = [r * a.cos(), r * a.sin()];
        let d = stream.sample();
        let y = codec.decode(codec.encode(&x, &d).unwrap(), &d).unwrap();
        for j in 0..2 {
            let e = y[j] - x[j];
            s[j] += e;
            s2[j] += e * e;
        }
    }
    for j in 0..2 {
        let mean = s[j] / n as f64;
        let se = ((s2[j] / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "coordinate {j}: {mean} vs se {se}");
    }
}

#[test]
fn fitted_scale_holds_on_fresh_dithers() {
    let g = shapes::hexagonal().scaled(0.15).unwrap();
    let lat = TruncatedLattice::build(&g, 1.0).unwrap();
    let mut rng = chacha(8);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let blocks: Vec<f64> = (0..20_000).map(|_| normal.sample(&mut rng)).collect();
    let fit = fit_scale(&blocks, &lat, &mut DitherStream::new(1, g.clone()), 0.005).unwrap();
    assert!(fit.overload_fraction <= 0.005);
    let fresh = DitherStream::new(999, g).sample_many(10_000);
    let frac = overload_fraction(&blocks, fit.zeta, &fresh, 1.0, 2);
    assert!(frac <= 0.005 + 0.0025, "{frac}");
}

#[test]
fn second_moment_scales_quadratically() {
    let base = second_moment(&GeneratorMatrix::identity(1), 100_000, 3).unwrap();
    let scaled = second_moment(&GeneratorMatrix::identity(1).scaled(3.0).unwrap(), 100_000, 3).unwrap();
    // Same seed: the folded samples are exact multiples of each other.
    assert!((scaled.value / base.value - 9.0).abs() < 1e-9);
    let hex = shapes::hexagonal();
    let a = second_moment(&hex, 100_000, 4).unwrap();
    let b = second_moment(&hex.scaled(0.5).unwrap(), 100_000, 5).unwrap();
    let se = (b.std_error.powi(2) + (0.25 * a.std_error).powi(2)).sqrt();
    assert!((b.value - 0.25 * a.value).abs() <= 4.0 * se);
}

fn arb_generator(max_dim: usize) -> impl Strategy<Value = GeneratorMatrix> {
    (1..=max_dim).prop_flat_map(|dim| {
        prop::collection::vec(-0.4f64..0.4, dim * dim).prop_map(move |noise| {
            let entries: Vec<f64> = noise
                .iter()
                .enumerate()
                .map(|(k, v)| if k % (dim + 1) == 0 { 1.0 + v } else { *v })
                .collect();
            GeneratorMatrix::new(dim, entries).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_is_exact(g in arb_generator(3), gamma in 0.5f64..3.0) {
        let lat = TruncatedLattice::build(&g, gamma).unwrap();
        let dim = g.dim();
        let b = search_half_width(&g, gamma) as i64 + 1;
        let mut inside = 0;
        let total = (2 * b + 1).pow(dim as u32);
        let mut p = vec![0.0; dim];
        for k in 0..total {
            let mut rem = k;
            let l: Vec<i64> = (0..dim).map(|_| { let c = rem % (2 * b + 1) - b; rem /= 2 * b + 1; c }).collect();
            g.apply_int(&l, &mut p);
            let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= gamma * (1.0 + BOUNDARY_REL_EPS) {
                inside += 1;
            }
        }
        prop_assert_eq!(inside, lat.len());
        for i in 0..lat.len() {
            let n = lat.point(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n <= gamma * (1.0 + BOUNDARY_REL_EPS));
        }
    }

    #[test]
    fn nearest_point_is_optimal(g in arb_generator(3), seed in any::<u64>()) {
        let mut rng = chacha(seed);
        let dim = g.dim();
        let mut p = vec![0.0; dim];
        for _ in 0..20 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect();
            let got = g.nearest_point(&x);
            g.apply_int(&got, &mut p);
            let best_got: f64 = p.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
            let side = 11i64;
            let mut best = f64::INFINITY;
            for k in 0..side.pow(dim as u32) {
                let mut rem = k;
                let l: Vec<i64> = (0..dim).map(|_| { let c = rem % side - 5; rem /= side; c }).collect();
                g.apply_int(&l, &mut p);
                best = best.min(p.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum());
            }
            prop_assert!(best_got <= best + 1e-12, "{} vs {}", best_got, best);
        }
    }

    #[test]
    fn quantizer_is_idempotent_on_codewords(g in arb_generator(3), gamma in 0.5f64..2.5) {
        let lat = TruncatedLattice::build(&g, gamma).unwrap();
        for i in 0..lat.len() {
            let z = lat.point(i).to_vec();
            let (j, q) = lat.quantize(&z).unwrap();
            prop_assert_eq!(j, i);
            prop_assert_eq!(q, z.as_slice());
        }
    }

    #[test]
    fn equal_streams_agree(seed in any::<u64>(), g in arb_generator(4)) {
        let mut a = DitherStream::new(seed, g.clone());
        let mut b = DitherStream::new(seed, g);
        for _ in 0..16 {
            prop_assert_eq!(a.sample(), b.sample());
        }
    }

    #[test]
    fn vector_loopback_is_bit_exact(seed in any::<u64>(), m in 1usize..200, zeta in 0.1f64..10.0) {
        let g = shapes::hexagonal().scaled(0.3).unwrap();
        let lat = TruncatedLattice::build(&g, 1.0).unwrap();
        let mut rng = chacha(seed);
        let h: Vec<f64> = (0..m).map(|_| rng.random_range(-0.2..0.2)).collect();
        let mut client = SdqCodec::new(lat.clone(), zeta, DitherStream::new(seed, g.clone())).unwrap();
        let mut server = SdqCodec::new(lat, zeta, DitherStream::new(seed, g)).unwrap();
        let enc = client.encode_vector(&h).unwrap();
        let dec = server.decode_vector(&enc.indices, enc.padding).unwrap();
        prop_assert_eq!(dec.len(), m);
        prop_assert!(dec.iter().zip(&enc.reconstruction).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
