use detno::diffusion::{diffusion_loss_all_steps, loss_on_graph, training_batch, DiffusionSchedule, NoiseDraw, Objective, ScheduleKind};
use detno::model::{Batch, Detno, ModelConfig, Network, TOKEN_DIM};
use detno::nn::gradcheck::check_gradients;
use detno::nn::{
    fourier_embed, Attention, FourierEmbedConfig, Graph, LayerNorm, Linear, Mlp, MoE, ParamStore,
    Segments,
};
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn toy(two_stream: bool) -> ModelConfig {
    ModelConfig {
        d: 8,
        n_blocks: 2,
        n_heads: 2,
        n_experts: 2,
        expert_hidden: 8,
        gating_hidden: 8,
        fourier: FourierEmbedConfig {
            n_freq: 4,
            max_period: 10_000.0,
        },
        two_stream,
    }
}

fn toy_batch(b: usize, ns: usize, nq: usize, rng: &mut ChaCha8Rng) -> Batch {
    let taus = (0..b).map(|_| rng.random_range(0.0..1000.0)).collect();
    Batch::new(rand_mat(b * ns, TOKEN_DIM, rng), rand_mat(b * nq, TOKEN_DIM, rng), taus, ns, nq).unwrap()
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut store = ParamStore::<f64>::new();
    let mlp = Mlp::new(&mut store, "mlp", &[3, 7, 4], &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 4);
    let (x, t) = (rand_mat(4, 3, &mut rng), rand_mat(4, 4, &mut rng));
    let rep = check_gradients(&mut store, H, |g| {
        let xi = g.input(x.clone());
        let y = mlp.forward(g, xi)?;
        let y = ln.forward(g, y)?;
        g.mse(y, t.clone())
    })
    .unwrap();
    assert!(rep.passes(TOL), "{:?}", rep.worst());

    let mut store = ParamStore::<f64>::new();
    let attn = Attention::new(&mut store, "attn", 6, 3, &mut rng);
    let moe = MoE::new(&mut store, "moe", 6, 3, 5, TOKEN_DIM, 4, &mut rng).unwrap();
    let lin = Linear::new(&mut store, "lin", 6, 1, &mut rng);
    let (q, c, raw) = (
        rand_mat(4, 6, &mut rng),
        rand_mat(6, 6, &mut rng),
        rand_mat(4, TOKEN_DIM, &mut rng),
    );
    let rep = check_gradients(&mut store, H, |g| {
        let (qi, ci, ri) = (g.input(q.clone()), g.input(c.clone()), g.input(raw.clone()));
        let segs = Segments {
            count: 2,
            q_len: 2,
            k_len: 3,
        };
        let a = attn.forward(g, qi, ci, segs)?;
        let m = moe.forward(g, a, ri)?;
        let y = lin.forward(g, m)?;
        Ok(g.sum_squares(y))
    })
    .unwrap();
    assert!(rep.passes(TOL), "{:?}", rep.worst());
}

#[test]
fn toy_network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for two_stream in [true, false] {
        let (net, mut store) = Detno::init::<f64>(&toy(two_stream), 3).unwrap();
        let batch = toy_batch(1, 5, 3, &mut rng);
        let target = rand_mat(3, 2, &mut rng);
        let rep = check_gradients(&mut store, H, |g| {
            let y = net.forward(g, &batch)?;
            g.mse(y, target.clone())
        })
        .unwrap();
        assert!(rep.passes(TOL), "two_stream={two_stream}: {:?}", rep.worst());
    }
}

#[test]
fn diffusion_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (net, mut store) = Detno::init::<f64>(&toy(true), 5).unwrap();
    let schedule = DiffusionSchedule::new(10, 0.09, ScheduleKind::NoiseStd).unwrap();
    let sample = detno::dataset::TrainingSample {
        sensors: (0..5)
            .map(|i| detno::dataset::SensorToken {
                x: 0.1 * i as f64,
                t: -0.2 * i as f64,
                rho: rng.random(),
                v: rng.random(),
            })
            .collect(),
        queries: (0..3)
            .map(|i| detno::dataset::QueryToken::at(0.3 * i as f64, 0.5))
            .collect(),
        targets: (0..3).map(|_| [rng.random(), rng.random()]).collect(),
        sim_id: 0,
        t_c: 1.0,
    };
    let draws = [NoiseDraw::sample(&schedule, 3, &mut rng)];
    let (batch, target) = training_batch(&[&sample], &schedule, Objective::Diffusion, &draws).unwrap();
    let rep = check_gradients(&mut store, H, |g| loss_on_graph(g, &net, &batch, &target)).unwrap();
    assert!(rep.passes(TOL), "{:?}", rep.worst());
    // The all-steps mean is non-negative and zero only for a perfect model.
    let model = Network { net, store };
    let loss = diffusion_loss_all_steps(&model, &sample, &schedule, &mut rng).unwrap();
    assert!(loss > 0.0);
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `out_i = sum_j (softmax_feat(q_i) . softmax_tok(k)_j) v_j`, per head.
fn explicit(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> Array2<f64> {
    let (nq, d) = q.dim();
    let nk = k.nrows();
    let dh = d / heads;
    let mut out = Array2::zeros((nq, d));
    for h in 0..heads {
        let c0 = h * dh;
        let ks: Vec<Vec<f64>> = (0..dh)
            .map(|c| softmax(&k.column(c0 + c).to_vec()))
            .collect();
        for i in 0..nq {
            let qs = softmax(&q.slice(s![i, c0..c0 + dh]).to_vec());
            for j in 0..nk {
                let w: f64 = (0..dh).map(|c| qs[c] * ks[c][j]).sum();
                for c in 0..dh {
                    out[[i, c0 + c]] += w * v[[j, c0 + c]];
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn linear_attention_equals_explicit_order(
        seed in any::<u64>(),
        heads in 1usize..=4,
        dh in 1usize..=4,
        nq in 1usize..=16,
        nk in 1usize..=16,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * dh;
        let (q, k, v) = (rand_mat(nq, d, &mut rng) * 4.0, rand_mat(nk, d, &mut rng) * 4.0, rand_mat(nk, d, &mut rng));
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let (qi, ki, vi) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let out = g.linear_attention(qi, ki, vi, heads, Segments::single(nq, nk)).unwrap();
        let diff = (&g.value(out).to_owned() - &explicit(&q, &k, &v, heads)).mapv(f64::abs);
        prop_assert!(diff.iter().all(|&e| e <= 1e-6));
    }

    #[test]
    fn output_is_invariant_to_sensor_order(seed in any::<u64>(), two_stream in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Network::<f64>::new(&toy(two_stream), seed).unwrap();
        let batch = toy_batch(2, 6, 4, &mut rng);
        let base = model.net.predict(&model.store, &batch).unwrap();
        let mut perm = batch.clone();
        for b in 0..2 {
            let rows = b * 6..(b + 1) * 6;
            let mut block = batch.sensors.slice(s![rows.clone(), ..]).to_owned();
            let mut order: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for (dst, &src) in order.iter().enumerate() {
                block.row_mut(dst).assign(&batch.sensors.row(rows.start + src));
            }
            perm.sensors.slice_mut(s![rows, ..]).assign(&block);
        }
        prop_assert_eq!(model.net.predict(&model.store, &perm).unwrap(), base);
    }
}

#[test]
fn single_key_attention_returns_the_value_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (q, k, v) = (rand_mat(5, 4, &mut rng), rand_mat(1, 4, &mut rng), rand_mat(1, 4, &mut rng));
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let (qi, ki, vi) = (g.input(q), g.input(k), g.input(v.clone()));
    let out = g.linear_attention(qi, ki, vi, 2, Segments::single(5, 1)).unwrap();
    for row in g.value(out).rows() {
        for (a, b) in row.iter().zip(v.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn zeroed_residuals_give_query_local_outputs() {
    // With every residual branch zeroed each query is processed alone, so a
    // query's output does not depend on which other queries share the batch.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = toy(true);
    let mut model = Network::<f64>::new(&cfg, 1).unwrap();
    model.net.zero_residuals(&mut model.store);
    let sensors = rand_mat(7, TOKEN_DIM, &mut rng);
    let coarse = rand_mat(3, TOKEN_DIM, &mut rng);
    let mut fine = rand_mat(50, TOKEN_DIM, &mut rng);
    fine.slice_mut(s![..3, ..]).assign(&coarse);
    let a = model
        .net
        .predict(&model.store, &Batch::single(sensors.clone(), coarse, 300.0).unwrap())
        .unwrap();
    let b = model
        .net
        .predict(&model.store, &Batch::single(sensors, fine, 300.0).unwrap())
        .unwrap();
    for i in 0..3 {
        for c in 0..2 {
            assert!((a[[i, c]] - b[[i, c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn self_attention_couples_queries_once_trained_weights_are_present() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Network::<f64>::new(&toy(true), 1).unwrap();
    let sensors = rand_mat(7, TOKEN_DIM, &mut rng);
    let coarse = rand_mat(3, TOKEN_DIM, &mut rng);
    let mut fine = rand_mat(20, TOKEN_DIM, &mut rng);
    fine.slice_mut(s![..3, ..]).assign(&coarse);
    let a = model.net.predict(&model.store, &Batch::single(sensors.clone(), coarse, 0.0).unwrap()).unwrap();
    let b = model.net.predict(&model.store, &Batch::single(sensors, fine, 0.0).unwrap()).unwrap();
    assert!((0..3).any(|i| (a[[i, 0]] - b[[i, 0]]).abs() > 1e-9));
}

#[test]
fn fourier_features_are_bounded_sinusoids() {
    let cfg = FourierEmbedConfig::default();
    for tau in [0.0, 1.0, 300.0, 1000.0] {
        let e = fourier_embed(tau, &cfg);
        assert_eq!(e.len(), 64);
        for i in 0..32 {
            let (s, c) = (e[i], e[32 + i]);
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }
}
