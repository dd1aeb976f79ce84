use detno::dataset::{
    build_dataset, decode_dataset, encode_dataset, extract_sensors, make_sample, train_count,
    Normalizer, QueryGrid, WindowSpec,
};
use detno::lwr::SimConfig;
use detno::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn small_run(n: usize, seed: u64) -> (SimConfig, WindowSpec, detno::dataset::Dataset) {
    let sim = SimConfig::default();
    let spec = WindowSpec::default();
    let data = build_dataset(n, &sim, &spec, seed, 1).unwrap();
    (sim, spec, data)
}

#[test]
fn split_follows_the_thousand_of_thirteen_hundred_ratio() {
    assert_eq!(train_count(1300), 1000);
    assert_eq!(train_count(100), 77);
    assert_eq!(train_count(13), 10);
    let (_, _, data) = small_run(13, 7);
    assert_eq!((data.n_train, data.n_test()), (10, 3));
    assert_eq!(data.test_ids(), 10..13);
}

#[test]
fn generation_is_independent_of_worker_count() {
    let sim = SimConfig::default();
    let spec = WindowSpec::default();
    let a = build_dataset(6, &sim, &spec, 11, 1).unwrap();
    let b = build_dataset(6, &sim, &spec, 11, 4).unwrap();
    assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
    let c = build_dataset(6, &sim, &spec, 12, 1).unwrap();
    assert_ne!(a, c);
}

#[test]
fn encoded_dataset_decodes_to_itself() {
    let (_, _, data) = small_run(3, 1);
    let bytes = encode_dataset(&data).unwrap();
    assert_eq!(decode_dataset(&bytes, Path::new("mem")).unwrap(), data);
    let err = decode_dataset(&bytes[..bytes.len() - 7], Path::new("mem")).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
}

#[test]
fn sample_has_the_documented_token_layout() {
    let (sim, spec, data) = small_run(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = make_sample(&data, &sim, &spec, 0, 5.0, 64, &mut rng).unwrap();
    assert_eq!(s.sensors.len(), 271);
    assert_eq!(spec.n_interior_tokens(), 189);
    assert_eq!(spec.n_boundary_tokens(), 82);
    assert_eq!(s.queries.len(), 64);
    for tok in &s.sensors[..189] {
        assert!((-1.0..=0.0).contains(&tok.t));
        assert!(tok.x > 0.0 && tok.x < 1.0);
        assert!((0.0..=1.0).contains(&tok.rho) && (0.0..=1.0).contains(&tok.v));
        assert!((tok.rho + tok.v - 1.0).abs() < 1e-12);
    }
    for tok in &s.sensors[189..] {
        assert!(tok.x == 0.0 || tok.x == 1.0);
        assert!((-1.0..=1.0).contains(&tok.t));
    }
    for (q, t) in s.queries.iter().zip(&s.targets) {
        assert!(q.x > 0.0 && q.x < 1.0 && q.t > 0.0 && q.t <= 1.0);
        assert_eq!((q.rho, q.v), (0.0, 0.0));
        assert!((0.0..=1.0).contains(&t[0]) && (t[0] + t[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn lattice_truth_at_cell_centres_reads_the_grid() {
    let (sim, spec, data) = small_run(1, 5);
    let field = &data.sims[0].field;
    let grid = QueryGrid::cell_centres(&sim, 20);
    let truth = grid.truth(field, &sim, &spec, 3.0).unwrap();
    assert_eq!(truth.len(), 2000);
    // Lattice times fall on stored rows (3 s spacing, 1.5 s solver rows).
    for j in 0..20 {
        let row = field.row_of(3.0 + grid.t_norm(j));
        for i in 0..sim.nx {
            assert!((truth[j * sim.nx + i][0] - field.rho[[row, i]]).abs() < 1e-12);
        }
    }
    let norm = Normalizer::new(&sim, &spec);
    let queries = grid.queries(&norm);
    assert!((queries[0].x - 0.005).abs() < 1e-12);
    assert!((queries.last().unwrap().t - 1.0).abs() < 1e-12);
}

#[test]
fn windows_outside_the_run_are_range_errors() {
    let (sim, spec, data) = small_run(1, 5);
    let field = &data.sims[0].field;
    let scenario = data.scenario(0, &sim);
    assert!(matches!(
        extract_sensors(field, &sim, &spec, &scenario, 0.5),
        Err(Error::Range(_))
    ));
    assert!(matches!(
        extract_sensors(field, &sim, &spec, &scenario, 24.5),
        Err(Error::Range(_))
    ));
    assert!(extract_sensors(field, &sim, &spec, &scenario, 24.0).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_are_deterministic_and_normalised(seed in any::<u64>(), anchor in 1usize..=16) {
        let (sim, spec, data) = small_run(1, seed);
        let t_c = anchor as f64;
        let a = make_sample(&data, &sim, &spec, 0, t_c, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = make_sample(&data, &sim, &spec, 0, t_c, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.sensors.iter().all(|s| (-1.0..=1.0).contains(&s.t) && (0.0..=1.0).contains(&s.x)));
        prop_assert!(a.targets.iter().all(|t| t.iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
