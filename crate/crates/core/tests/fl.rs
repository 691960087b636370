use olala::fl::*;
use olala::lattice::{split_vector, DitherStream, TruncatedLattice};
use olala::learning::{fit_scale_mode, normalize_generator, ClientObjective};
use olala::rng::{chacha, derive_seed, tags};
use rand::seq::SliceRandom;
use rand::Rng;

fn small_data() -> (Dataset, Dataset) {
    synthetic(&SyntheticSpec { train: 600, test: 200, dim: 12, ..Default::default() }).unwrap()
}

fn small_cfg(q: QuantizerKind) -> FlConfig {
    FlConfig {
        quantizer: q,
        rounds: 3,
        local_steps: 20,
        epochs: 3,
        data: DataConfig::Synthetic(SyntheticSpec { train: 600, test: 200, dim: 12, ..Default::default() }),
        ..Default::default()
    }
}

#[test]
fn linear_single_step_matches_softmax_gradient() {
    let (train, _) = small_data();
    let mut model = Model::new(ModelKind::Linear, 12, 10, [0, 0], 0).unwrap();
    let mut rng = chacha(4);
    for v in model.params_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    let mut r1 = chacha(9);
    let h = local_train(&model, &train, 1, 0.3, &mut r1).unwrap();
    let mut r2 = chacha(9);
    let i = r2.random_range(0..train.len());
    let (x, y) = (train.row(i), train.label(i));
    let w = model.params();
    let z: Vec<f64> = (0..10).map(|c| w[120 + c] + (0..12).map(|j| w[c * 12 + j] * x[j]).sum::<f64>()).collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
    for c in 0..10 {
        let p = (z[c] - mx).exp() / s - if c == y { 1.0 } else { 0.0 };
        for j in 0..12 {
            assert!((h[c * 12 + j] + 0.3 * p * x[j]).abs() < 1e-14);
        }
        assert!((h[120 + c] + 0.3 * p).abs() < 1e-14);
    }
}

#[test]
fn mlp_backprop_matches_finite_differences() {
    let (train, _) = small_data();
    let model = Model::new(ModelKind::Mlp, 12, 10, [9, 7], 3).unwrap();
    let idx: Vec<usize> = (0..15).collect();
    let shard = train.subset(&idx).unwrap();
    let obj = ShardObjective { model: &model, shard: &shard };
    let w = model.params().to_vec();
    let g = obj.gradient(&w);
    let eps = 1e-6;
    let fd: Vec<f64> = (0..w.len())
        .map(|k| {
            let mut p = w.clone();
            let mut q = w.clone();
            p[k] += eps;
            q[k] -= eps;
            (obj.loss(&p) - obj.loss(&q)) / (2.0 * eps)
        })
        .collect();
    let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(num / den <= 1e-4, "{}", num / den);
}

#[test]
fn memorizes_a_tiny_shard() {
    let (train, _) = small_data();
    let shard = train.subset(&(0..20).collect::<Vec<_>>()).unwrap();
    let mut model = Model::new(ModelKind::Mlp, 12, 10, [32, 32], 1).unwrap();
    let mut rng = chacha(2);
    for _ in 0..40 {
        let h = local_train(&model, &shard, 200, 0.1, &mut rng).unwrap();
        for (w, d) in model.params_mut().iter_mut().zip(&h) {
            *w += d;
        }
    }
    assert!(evaluate(&model, &shard) >= 0.95);
}

#[test]
fn accuracy_ignores_test_order() {
    let (train, test) = small_data();
    let out = run_fl_on(&small_cfg(QuantizerKind::None), &train, &test).unwrap();
    let mut idx: Vec<usize> = (0..test.len()).collect();
    idx.shuffle(&mut chacha(1));
    let shuffled = test.subset(&idx).unwrap();
    assert_eq!(evaluate(&out.model, &test), evaluate(&out.model, &shuffled));
}

#[test]
fn zero_rounds_returns_initial_model() {
    let (train, test) = small_data();
    let cfg = FlConfig { rounds: 0, ..small_cfg(QuantizerKind::Olala) };
    let out = run_fl_on(&cfg, &train, &test).unwrap();
    assert!(out.rounds.is_empty());
    let w0 = Model::new(ModelKind::Linear, 12, 10, cfg.hidden, derive_seed(0, &[tags::INIT])).unwrap();
    assert_eq!(out.model, w0);
}

/// Plain FedAvg written out directly from the shard partition.
#[test]
fn unquantized_run_matches_plain_fedavg() {
    let (train, test) = small_data();
    let cfg = FlConfig { model: ModelKind::Mlp, hidden: [8, 8], ..small_cfg(QuantizerKind::None) };
    let out = run_fl_on(&cfg, &train, &test).unwrap();

    let shards = partition_dataset(&train, 5, derive_seed(0, &[tags::PARTITION])).unwrap();
    let mut w = Model::new(ModelKind::Mlp, 12, 10, [8, 8], derive_seed(0, &[tags::INIT])).unwrap();
    for t in 0..3u64 {
        let mut sum = vec![0.0; w.len()];
        for (u, s) in shards.iter().enumerate() {
            let shard = train.subset(s).unwrap();
            let xi = client_seed(0, u);
            let mut rng = chacha(derive_seed(xi, &[tags::LOCAL_TRAIN, t]));
            let h = local_train(&w, &shard, 20, 0.1, &mut rng).unwrap();
            for (a, b) in sum.iter_mut().zip(&h) {
                *a += b;
            }
        }
        for (p, s) in w.params_mut().iter_mut().zip(&sum) {
            *p += s / 5.0;
        }
    }
    assert_eq!(out.model, w);
    assert!(out.rounds.iter().all(|r| r.total_bits == 5 * raw_bits(w.len())));
}

#[test]
fn runs_are_deterministic_across_thread_counts() {
    let (train, test) = small_data();
    for q in [QuantizerKind::Olala, QuantizerKind::StaticGlobal, QuantizerKind::FixedA2] {
        let a = run_fl_on(&small_cfg(q), &train, &test).unwrap();
        let b = run_fl_on(&FlConfig { parallel: 4, ..small_cfg(q) }, &train, &test).unwrap();
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.model, b.model);
    }
}

#[test]
fn fixed_hexagonal_payload_shape_and_recorded_distortion() {
    let (train, test) = small_data();
    let cfg = FlConfig { rate: 3.0, rounds: 1, ..small_cfg(QuantizerKind::FixedHex) };
    let out = run_fl_on(&cfg, &train, &test).unwrap();
    let m = 130;
    let rec = &out.rounds[0].clients[1];
    assert_eq!(rec.bits, bits_accounting(m, 3.0, 2, true));

    // Recompute client 1's upload from scratch.
    let shards = partition_dataset(&train, 5, derive_seed(0, &[tags::PARTITION])).unwrap();
    let shard = train.subset(&shards[1]).unwrap();
    let w0 = Model::new(ModelKind::Linear, 12, 10, cfg.hidden, derive_seed(0, &[tags::INIT])).unwrap();
    let xi = client_seed(0, 1);
    let h = local_train(&w0, &shard, 20, 0.1, &mut chacha(derive_seed(xi, &[tags::LOCAL_TRAIN, 0]))).unwrap();
    let gen = normalize_generator(olala::lattice::shapes::hexagonal().entries(), 2, 3.0, 1.0).unwrap().gen;
    let lat = TruncatedLattice::build(&gen, 1.0).unwrap();
    let split = split_vector(&h, 2).unwrap();
    let mut probe = DitherStream::new(derive_seed(xi, &[tags::PROBE, 0]), gen.clone());
    let zeta = fit_scale_mode(&split.blocks, &lat, &mut probe, cfg.overload).unwrap().zeta;
    assert_eq!(zeta, rec.zeta);
    let enc = encode_update(1, 0, xi, &h, &lat, zeta).unwrap();
    match &enc.payload.body {
        PayloadBody::Lattice { indices, .. } => assert_eq!(indices.len(), m.div_ceil(2)),
        PayloadBody::Raw(_) => unreachable!(),
    }
    let dec = decode_payload(&Payload::from_bytes(&enc.payload.to_bytes()).unwrap(), xi, 1.0).unwrap();
    let dist: f64 = dec.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum();
    assert_eq!(dist, rec.distortion);
}

#[test]
fn arrival_order_does_not_change_the_aggregate() {
    let g = normalize_generator(olala::lattice::shapes::hexagonal().entries(), 2, 2.0, 1.0).unwrap().gen;
    let lat = TruncatedLattice::build(&g, 1.0).unwrap();
    let seeds: Vec<u64> = (0..6).map(|u| client_seed(3, u)).collect();
    let mut rng = chacha(5);
    let payloads: Vec<Payload> = (0..6)
        .map(|u| {
            let h: Vec<f64> = (0..33).map(|_| rng.random_range(-1.0..1.0)).collect();
            encode_update(u as u32, 2, seeds[u], &h, &lat, rng.random_range(0.2..1.0)).unwrap().payload
        })
        .collect();
    let mut w0 = vec![0.1; 33];
    server_round(&payloads, &mut w0, &seeds, 2, 1.0).unwrap();
    for s in 0..10 {
        let mut shuffled = payloads.clone();
        shuffled.shuffle(&mut chacha(s));
        let mut w = vec![0.1; 33];
        server_round(&shuffled, &mut w, &seeds, 2, 1.0).unwrap();
        assert!(w.iter().zip(&w0).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let mut w = vec![0.1; 33];
    assert!(server_round(&payloads[1..], &mut w, &seeds, 2, 1.0).is_err());
    assert!(server_round(&payloads, &mut w, &seeds, 3, 1.0).is_err());
}

#[test]
fn odd_lengths_survive_three_dimensional_blocks() {
    let (train, test) = small_data();
    // 130 parameters is not a multiple of 3.
    let cfg = FlConfig { dim: 3, rounds: 2, ..small_cfg(QuantizerKind::Olala) };
    let out = run_fl_on(&cfg, &train, &test).unwrap();
    assert_eq!(out.rounds.len(), 2);
    assert_eq!(out.model.len(), 130);
    assert!(out.rounds[0].clients.iter().all(|c| c.gen.len() == 9 && c.codebook_len <= 64));
}

#[test]
fn every_quantizer_runs_and_records_lattices() {
    let (train, test) = small_data();
    for q in QuantizerKind::ALL {
        let cfg = FlConfig { rate: 1.5, ..small_cfg(q) };
        let out = run_fl_on(&cfg, &train, &test).unwrap();
        for r in &out.rounds {
            for c in &r.clients {
                if q == QuantizerKind::None {
                    assert!(c.gen.is_empty());
                } else {
                    assert!(c.codebook_len >= 1 && c.codebook_len <= 8, "{q}: {}", c.codebook_len);
                    assert!(c.zeta > 0.0);
                }
            }
        }
        let adapted: Vec<bool> = out.rounds.iter().map(|r| r.clients[0].adapted).collect();
        match q {
            QuantizerKind::Olala => assert_eq!(adapted, vec![true; 3]),
            QuantizerKind::StaticPerUser => assert_eq!(adapted, vec![true, false, false]),
            _ => assert_eq!(adapted, vec![false; 3]),
        }
    }
}

#[test]
fn config_validation_names_fields() {
    let bad = FlConfig { rate: -1.0, ..Default::default() };
    assert!(bad.validate().unwrap_err().to_string().starts_with("usage error: R:"));
    let bad = FlConfig { dim: 3, quantizer: QuantizerKind::FixedHex, ..Default::default() };
    assert!(bad.validate().unwrap_err().to_string().starts_with("usage error: L:"));
    let bad = FlConfig { users: 0, ..Default::default() };
    assert!(bad.validate().unwrap_err().to_string().starts_with("usage error: U:"));
    assert!(FlConfig::default().validate().is_ok());
}
