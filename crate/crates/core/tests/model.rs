use proptest::prelude::*;
use rain::autodiff::gradcheck::{check_gradients, GradCheckOptions};
use rain::autodiff::{AutodiffError, Graph, ParamStore, Tensor, Var};
use rain::model::{Encoded, GraphVariant, ModelConfig, ModelError, RainModel, RolloutMode, SeqBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(n: usize, s: usize, t_enc: usize, t_dec: usize) -> ModelConfig {
    ModelConfig {
        state_dim: s,
        n_agents: n,
        state_mlp_hidden: 5,
        gru_input: 6,
        hidden_dim: 7,
        embed_dim: 4,
        heads: 2,
        graph_mlp_hidden: vec![5, 3],
        gatv2_hidden: 5,
        decoder_hidden: 6,
        t_enc,
        t_dec,
        ..ModelConfig::default()
    }
}

fn build(config: ModelConfig, seed: u64) -> (RainModel, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = RainModel::new(config, &mut store, &mut rng).unwrap();
    (model, store)
}

fn random_batch(b: usize, t: usize, n: usize, s: usize, seed: u64) -> SeqBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..b * t * n * s).map(|_| rng.random_range(-1.5..1.5)).collect();
    SeqBatch::new(b, t, n, s, data).unwrap()
}

fn zero_params(store: &mut ParamStore<f64>) {
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(0.0);
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn encoder_shape_contract() {
    let cfg = ModelConfig {
        n_agents: 10,
        state_dim: 4,
        ..ModelConfig::default()
    };
    let (m, s) = build(cfg, 0);
    let x = random_batch(1, 50, 10, 4, 1);
    let g = Graph::new();
    let enc = m.encode(&g, &s, &x).unwrap();
    assert_eq!(enc.hidden.len(), 50);
    assert!(enc.hidden.iter().all(|h| h.shape() == vec![10, 256]));
    let short = random_batch(1, 49, 10, 4, 1);
    assert!(matches!(m.encode(&g, &s, &short), Err(ModelError::Input(_))));
}

#[test]
fn agents_with_identical_trajectories_share_hidden_states() {
    let (m, s) = build(small(3, 2, 4, 2), 1);
    let mut x = random_batch(1, 6, 3, 2, 2);
    for t in 0..6 {
        for v in 0..2 {
            let val = x.get(0, t, 0, v);
            x.data[(t * 3 + 2) * 2 + v] = val;
        }
    }
    let g = Graph::new();
    let enc = m.encode(&g, &s, &x).unwrap();
    for h in &enc.hidden {
        let d = h.value().data().to_vec();
        assert_eq!(&d[0..7], &d[14..21]);
    }
}

#[test]
fn zero_parameters_give_zero_hidden_states() {
    let (m, mut s) = build(small(3, 2, 4, 2), 1);
    zero_params(&mut s);
    let x = random_batch(2, 6, 3, 2, 3);
    let g = Graph::new();
    for h in m.encode(&g, &s, &x).unwrap().hidden {
        assert!(h.value().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn single_step_attention_returns_the_values() {
    let (m, s) = build(small(3, 2, 1, 1), 4);
    let x = random_batch(2, 2, 3, 2, 5);
    let g = Graph::new();
    let enc = m.encode(&g, &s, &x).unwrap();
    let pa = m.pair_attention(&g, &s, &enc).unwrap();
    let e = pa.embedding.value().data().to_vec();
    let v = pa.values.value().data().to_vec();
    let (n, w) = (3, 4);
    assert!(pa.weights.value().data().iter().all(|&a| a == 1.0));
    for b in 0..2 {
        for i in 0..n {
            for j in 0..n {
                let er = &e[((b * n + i) * n + j) * w..][..w];
                let vr = &v[(b * n + j) * w..][..w];
                assert_eq!(er, vr);
            }
        }
    }
}

#[test]
fn constant_hidden_sequence_makes_embedding_equal_values() {
    let (m, s) = build(small(3, 2, 5, 1), 6);
    let x = random_batch(1, 5, 3, 2, 7);
    let g = Graph::new();
    let last = m.encode(&g, &s, &x).unwrap().last();
    let enc = Encoded { hidden: vec![last; 5] };
    let pa = m.pair_attention(&g, &s, &enc).unwrap();
    let e = pa.embedding.value().data().to_vec();
    let v = pa.values.value().data().to_vec();
    for i in 0..3 {
        for j in 0..3 {
            assert!(close(&e[(i * 3 + j) * 4..][..4], &v[j * 4..][..4], 1e-14));
        }
    }
}

#[test]
fn score_count_is_linear_in_the_window() {
    for (n, t_enc, heads) in [(3, 5, 2), (4, 7, 4), (5, 50, 4)] {
        let mut cfg = small(n, 2, t_enc, 1);
        cfg.heads = heads;
        cfg.embed_dim = heads * 2;
        let (m, s) = build(cfg, 8);
        let x = random_batch(3, t_enc, n, 2, 9);
        let g = Graph::new();
        let enc = m.encode(&g, &s, &x).unwrap();
        let _ = m.pair_attention(&g, &s, &enc).unwrap();
        let expected = (3 * heads * n * n * t_enc) as u64;
        assert_eq!(g.score_evaluations(), expected, "m N^2 T per sample");
    }
}

#[test]
fn pair_attention_is_directional() {
    let (m, s) = build(small(3, 2, 6, 1), 10);
    let x = random_batch(1, 6, 3, 2, 11);
    let g = Graph::new();
    let enc = m.encode(&g, &s, &x).unwrap();
    let e = m
        .pair_attention(&g, &s, &enc)
        .unwrap()
        .embedding
        .value()
        .data()
        .to_vec();
    let (i, j) = (0, 1);
    assert_ne!(&e[(i * 3 + j) * 4..][..4], &e[(j * 3 + i) * 4..][..4]);
}

#[test]
fn no_pa_pair_features() {
    let cfg = ModelConfig {
        use_pa: false,
        t_enc: 3,
        n_agents: 4,
        ..ModelConfig::default()
    };
    let (m, s) = build(cfg, 12);
    let mut x = random_batch(1, 3, 4, 4, 13);
    // Agents 1 and 2 share a trajectory.
    for t in 0..3 {
        for v in 0..4 {
            let val = x.get(0, t, 1, v);
            x.data[(t * 4 + 2) * 4 + v] = val;
        }
    }
    let g = Graph::new();
    let enc = m.encode(&g, &s, &x).unwrap();
    let p = m.pair_features(&g, &s, &enc).unwrap();
    assert_eq!(p.shape(), vec![1, 4, 4, 512]);
    let d = p.value().data().to_vec();
    assert_eq!(&d[(4 + 2) * 512..][..512], &d[(2 * 4 + 1) * 512..][..512]);
    // Changing agent 3 leaves the (0, 1) pair untouched.
    let mut y = x.clone();
    for t in 0..3 {
        y.data[(t * 4 + 3) * 4] += 0.5;
    }
    let g2 = Graph::new();
    let enc2 = m.encode(&g2, &s, &y).unwrap();
    let d2 = m.pair_features(&g2, &s, &enc2).unwrap().value().data().to_vec();
    assert_eq!(&d[512..1024], &d2[512..1024]);
    assert_ne!(&d[3 * 512..4 * 512], &d2[3 * 512..4 * 512]);
}

fn alpha_of(m: &RainModel, s: &ParamStore<f64>, x: &SeqBatch<f64>) -> Vec<f64> {
    let g = Graph::new();
    let (_, a) = m.infer_graph(&g, s, x).unwrap();
    let out = a.value().data().to_vec();
    out
}

#[test]
fn graph_diagonal_is_masked_for_every_variant() {
    for (variant, use_pa) in [
        (GraphVariant::MlpSigmoid, true),
        (GraphVariant::MlpSigmoid, false),
        (GraphVariant::Gatv2, true),
        (GraphVariant::Gatv2, false),
    ] {
        let cfg = ModelConfig {
            graph_variant: variant,
            use_pa,
            ..small(4, 3, 5, 1)
        };
        let (m, mut s) = build(cfg, 14);
        // Push scores up so the mask has to win against large logits.
        for id in s.ids().collect::<Vec<_>>() {
            if s.name(id).starts_with("graph") && s.name(id).ends_with(".b") {
                s.get_mut(id).data_mut().fill(50.0);
            }
        }
        let a = alpha_of(&m, &s, &random_batch(2, 5, 4, 3, 15));
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let v = a[(b * 4 + i) * 4 + j];
                    if i == j {
                        assert!(v < 1e-4);
                    } else {
                        assert!(v > 0.0 && v <= 1.0);
                    }
                }
            }
        }
    }
}

#[test]
fn zeroed_graph_head_gives_one_half() {
    for variant in [GraphVariant::MlpSigmoid, GraphVariant::Gatv2] {
        let cfg = ModelConfig {
            graph_variant: variant,
            ..small(3, 2, 4, 1)
        };
        let (m, mut s) = build(cfg, 16);
        for id in s.ids().collect::<Vec<_>>() {
            let name = s.name(id);
            let zero = match variant {
                GraphVariant::MlpSigmoid => name.starts_with("graph.mlp"),
                GraphVariant::Gatv2 => name.starts_with("graph.gatv2.a"),
            };
            if zero {
                s.get_mut(id).data_mut().fill(0.0);
            }
        }
        let a = alpha_of(&m, &s, &random_batch(1, 4, 3, 2, 17));
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(a[i * 3 + j], 0.5);
                }
            }
        }
    }
}

#[test]
fn gatv2_attention_ranking_depends_on_the_query() {
    // Without attention the pair feature is h_i ++ h_j. With W = [[1, 1], [-1, -1]]
    // acting on a one-dimensional projection and a = [1, 1], the score is
    // |h_i + h_j| up to the leaky slope, so the preferred neighbour flips with the
    // sign of h_i: the ranking differs per query, which static attention
    // (score = f(h_i) + g(h_j)) cannot express.
    let cfg = ModelConfig {
        graph_variant: GraphVariant::Gatv2,
        use_pa: false,
        gatv2_hidden: 2,
        ..small(4, 1, 1, 1)
    };
    let (m, mut s) = build(cfg, 18);
    let hid = 7;
    let w = s.find("graph.gatv2.w.w").unwrap();
    let mut wv = vec![0.0; 2 * hid * 2];
    // Column 0 reads +(h_i[0] + h_j[0]), column 1 reads -(h_i[0] + h_j[0]).
    for (row, sign) in [(0, 1.0), (hid, 1.0)] {
        wv[row * 2] = sign;
        wv[row * 2 + 1] = -sign;
    }
    s.get_mut(w).data_mut().copy_from_slice(&wv);
    s.get_mut(s.find("graph.gatv2.w.b").unwrap()).data_mut().fill(0.0);
    s.get_mut(s.find("graph.gatv2.a.w").unwrap())
        .data_mut()
        .copy_from_slice(&[1.0, 1.0]);
    let g = Graph::new();
    let h0 = [0.9, -0.9, 0.3, -0.3];
    let mut h = vec![0.0; 4 * hid];
    for (i, v) in h0.iter().enumerate() {
        h[i * hid] = *v;
    }
    let enc = Encoded {
        hidden: vec![g.constant(Tensor::from_f64(&[4, hid], &h).unwrap())],
    };
    let p = m.pair_features(&g, &s, &enc).unwrap();
    let a = m.extract_graph(&g, &s, p).unwrap().value().data().to_vec();
    let best = |i: usize| {
        (0..4)
            .filter(|&j| j != i)
            .max_by(|&x, &y| a[i * 4 + x].partial_cmp(&a[i * 4 + y]).unwrap())
            .unwrap()
    };
    assert_eq!(best(0), 2, "positive query prefers the positive neighbour");
    assert_eq!(best(1), 3, "negative query prefers the negative neighbour");
}

fn values_and_alpha(n: usize, alpha: &[f64]) -> (RainModel, ParamStore<f64>, Vec<f64>, Vec<f64>) {
    let (m, s) = build(small(n, 2, 2, 1), 20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let v: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = Graph::new();
    let msg = m
        .message(
            g.constant(Tensor::from_f64(&[1, n, n], alpha).unwrap()),
            g.constant(Tensor::from_f64(&[n, 4], &v).unwrap()),
        )
        .unwrap()
        .value()
        .data()
        .to_vec();
    (m, s, v, msg)
}

#[test]
fn message_aggregation_examples() {
    let (_, _, _, msg) = values_and_alpha(3, &[0.0; 9]);
    assert!(msg.iter().all(|&x| x == 0.0));
    let mut one = [0.0; 9];
    one[2] = 1.0; // agent 0 listens to agent 2 only
    let (_, _, v, msg) = values_and_alpha(3, &one);
    assert_eq!(&msg[0..4], &v[8..12]);
    let a = [0.0, 0.3, 0.6, 0.2, 0.0, 0.9, 0.5, 0.1, 0.0];
    let a2: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
    let (_, _, _, m1) = values_and_alpha(3, &a);
    let (_, _, _, m2) = values_and_alpha(3, &a2);
    for (x, y) in m1.iter().zip(&m2) {
        assert_eq!(2.0 * x, *y);
    }
}

#[test]
fn zero_graph_isolates_each_agent() {
    // With alpha = 0 the prediction of agent 0 ignores the other agents.
    let (m, s) = build(small(3, 2, 3, 1), 22);
    let x = random_batch(1, 4, 3, 2, 23);
    let mut y = x.clone();
    for t in 0..4 {
        y.data[(t * 3 + 1) * 2] += 1.0;
    }
    let predict = |x: &SeqBatch<f64>| {
        let g = Graph::new();
        let enc = m.encode(&g, &s, x).unwrap();
        let alpha = g.constant(Tensor::zeros(&[1, 3, 3]));
        let (mu, _) = m.predict(&g, &s, enc.last(), alpha).unwrap();
        let out = mu.value().data().to_vec();
        out
    };
    let (a, b) = (predict(&x), predict(&y));
    assert_eq!(&a[0..2], &b[0..2]);
    assert_ne!(&a[2..4], &b[2..4]);
}

#[test]
fn noiseless_closed_loop_path_is_the_cumulative_mean() {
    let (m, s) = build(small(3, 2, 3, 4), 24);
    let x = random_batch(2, 7, 3, 2, 25);
    let g = Graph::new();
    let (enc, alpha) = m.infer_graph(&g, &s, &x).unwrap();
    let last = x.frame(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let roll = m
        .rollout(
            &g,
            &s,
            &enc,
            alpha,
            last.clone(),
            4,
            RolloutMode::ClosedLoop { sample: false },
            None,
            &mut rng,
        )
        .unwrap();
    let mut acc = last.data().to_vec();
    for t in 0..4 {
        for (a, d) in acc.iter_mut().zip(roll.mean[t].value().data()) {
            *a += d;
        }
        assert!(close(&acc, roll.path[t].value().data(), 1e-14));
        assert!(roll.var[t].value().data().iter().all(|&v| v > 0.0));
    }
}

#[test]
fn one_step_rollout_is_one_decode_step() {
    let (m, s) = build(small(3, 2, 3, 1), 26);
    let x = random_batch(1, 4, 3, 2, 27);
    let g = Graph::new();
    let (enc, alpha) = m.infer_graph(&g, &s, &x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let roll = m
        .rollout(
            &g,
            &s,
            &enc,
            alpha,
            x.frame(2),
            1,
            RolloutMode::ClosedLoop { sample: true },
            None,
            &mut rng,
        )
        .unwrap();
    let (_, mu, var) = m
        .decode_step(&g, &s, enc.hidden[1], g.constant(x.frame(2)), alpha)
        .unwrap();
    assert_eq!(roll.mean[0].value().data(), mu.value().data());
    assert_eq!(roll.var[0].value().data(), var.value().data());
}

#[test]
fn teacher_forcing_needs_the_future() {
    let (m, s) = build(small(3, 2, 3, 2), 28);
    let x = random_batch(1, 5, 3, 2, 29);
    let g = Graph::new();
    let (enc, alpha) = m.infer_graph(&g, &s, &x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = m.rollout(
        &g,
        &s,
        &enc,
        alpha,
        x.frame(2),
        2,
        RolloutMode::TeacherForced,
        None,
        &mut rng,
    );
    assert!(matches!(r, Err(ModelError::Input(_))));
    let fut = x.window(3, 2);
    let roll = m
        .rollout(
            &g,
            &s,
            &enc,
            alpha,
            x.frame(2),
            2,
            RolloutMode::TeacherForced,
            Some(&fut),
            &mut rng,
        )
        .unwrap();
    assert_eq!(roll.path[1].value().data(), fut.frame(1).data());
}

fn to_autodiff(e: ModelError) -> AutodiffError {
    match e {
        ModelError::Autodiff(e) => e,
        other => AutodiffError::Shape(other.to_string()),
    }
}

fn hrtb<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> Result<Var<'g, f64>, AutodiffError>,
{
    f
}

#[test]
fn end_to_end_gradients_on_a_two_agent_toy() {
    for (variant, use_pa) in [
        (GraphVariant::MlpSigmoid, true),
        (GraphVariant::MlpSigmoid, false),
        (GraphVariant::Gatv2, true),
    ] {
        for seed in 0..5u64 {
            let cfg = ModelConfig {
                graph_variant: variant,
                use_pa,
                ..small(2, 2, 3, 2)
            };
            let (m, s) = build(cfg, 100 + seed);
            let x = random_batch(2, 5, 2, 2, 200 + seed);
            let loss = hrtb(|g, st| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                m.loss(g, st, &x, RolloutMode::ClosedLoop { sample: true }, &mut rng)
                    .map_err(to_autodiff)
            });
            let ids: Vec<_> = s.ids().collect();
            // The loss is O(5), so differencing round-off is ~1e-10 and entries
            // below 1e-5 compare absolutely.
            let opts = GradCheckOptions {
                abs_floor: 1e-5,
                ..GradCheckOptions::default()
            };
            let r = check_gradients(&s, loss, &ids, &opts).unwrap();
            assert!(
                r.max_rel_err < 1e-4,
                "{variant:?} pa={use_pa} seed {seed}: {:?}",
                r.worst
            );
            assert_eq!(r.coords_checked, s.n_scalars());
        }
    }
}

fn permuted_graph(a: &[f64], n: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for b in 0..a.len() / (n * n) {
        for i in 0..n {
            for j in 0..n {
                out[(b * n + i) * n + j] = a[(b * n + perm[i]) * n + perm[j]];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permuting_agents_permutes_everything(seed in 0u64..1000, use_pa in any::<bool>(), gat in any::<bool>()) {
        let n = 4;
        let cfg = ModelConfig {
            use_pa,
            graph_variant: if gat { GraphVariant::Gatv2 } else { GraphVariant::MlpSigmoid },
            ..small(n, 2, 4, 3)
        };
        let (m, s) = build(cfg, seed);
        let x = random_batch(2, 7, n, 2, seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let run = |x: &SeqBatch<f64>| {
            let g = Graph::new();
            let (enc, alpha) = m.infer_graph(&g, &s, x).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let roll = m
                .rollout(&g, &s, &enc, alpha, x.frame(3), 3, RolloutMode::ClosedLoop { sample: false }, None, &mut r)
                .unwrap();
            let h = enc.last().value().data().to_vec();
            let a = alpha.value().data().to_vec();
            let mu = roll.mean[2].value().data().to_vec();
            (h, a, mu)
        };
        let (h, a, mu) = run(&x);
        let (hp, ap, mup) = run(&x.permute_agents(&perm));
        let rows = |v: &[f64], w: usize| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            for b in 0..2 {
                for (k, &src) in perm.iter().enumerate() {
                    out[(b * n + k) * w..][..w].copy_from_slice(&v[(b * n + src) * w..][..w]);
                }
            }
            out
        };
        prop_assert!(close(&rows(&h, 7), &hp, 1e-12));
        prop_assert!(close(&permuted_graph(&a, n, &perm), &ap, 1e-12));
        prop_assert!(close(&rows(&mu, 2), &mup, 1e-10));
    }

    #[test]
    fn alpha_is_a_probability_with_a_masked_diagonal(seed in 0u64..1000) {
        let (m, s) = build(small(5, 3, 4, 1), seed);
        let a = alpha_of(&m, &s, &random_batch(2, 4, 5, 3, seed));
        for b in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    let v = a[(b * 5 + i) * 5 + j];
                    if i == j { prop_assert!(v < 1e-4); } else { prop_assert!(v > 0.0 && v < 1.0); }
                }
            }
        }
    }

    #[test]
    fn pair_embedding_is_a_convex_combination_over_time(seed in 0u64..1000) {
        let (n, t, w) = (3, 6, 4);
        let (m, s) = build(small(n, 2, t, 1), seed);
        let x = random_batch(2, t, n, 2, seed + 7);
        let g = Graph::new();
        let enc = m.encode(&g, &s, &x).unwrap();
        let pa = m.pair_attention(&g, &s, &enc).unwrap();
        let e = pa.embedding.value().data().to_vec();
        let v = pa.values.value().data().to_vec();
        for b in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    for c in 0..w {
                        let series: Vec<f64> = (0..t).map(|tt| v[((tt * 2 + b) * n + j) * w + c]).collect();
                        let lo = series.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let val = e[((b * n + i) * n + j) * w + c];
                        prop_assert!(val >= lo - 1e-12 && val <= hi + 1e-12);
                    }
                }
            }
        }
    }
}
