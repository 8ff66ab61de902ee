use rain::autodiff::gradcheck::{check_gradients, GradCheckOptions};
use rain::autodiff::{concat_last, gru_cell, stack, AutodiffError, Graph, PairDims, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const LINEAR_TOL: f64 = 1e-6;
const TOL: f64 = 1e-4;

type Loss = for<'g> fn(&'g Graph<f64>, &ParamStore<f64>) -> Result<Var<'g, f64>, AutodiffError>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Contracts `out` against fixed, irregular coefficients so every output entry
/// contributes a distinct amount to the scalar.
fn probe<'g>(g: &'g Graph<f64>, out: Var<'g, f64>) -> Result<Var<'g, f64>, AutodiffError> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let c: Vec<f64> = (0..n).map(|k| (k as f64 * 1.37 + 0.5).sin() + 0.1).collect();
    let c = g.constant(Tensor::from_f64(&shape, &c).unwrap());
    Ok(out.mul(c)?.sum())
}

fn p<'g>(g: &'g Graph<f64>, s: &ParamStore<f64>, name: &str) -> Var<'g, f64> {
    g.param(s, s.find(name).unwrap())
}

fn all(s: &ParamStore<f64>) -> Vec<ParamId> {
    s.ids().collect()
}

fn assert_grads(s: &ParamStore<f64>, loss: Loss, tol: f64, label: &str) {
    let r = check_gradients(s, loss, &all(s), &GradCheckOptions::default()).unwrap();
    assert!(r.coords_checked > 0);
    assert!(r.max_rel_err < tol, "{label}: {:?}", r.worst);
}

fn sweep(label: &str, tol: f64, build: impl Fn(&mut ChaCha8Rng) -> ParamStore<f64>, loss: Loss) {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = build(&mut rng);
        assert_grads(&s, loss, tol, &format!("{label} seed {seed}"));
    }
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.add(n, t);
    }
    s
}

#[test]
fn affine_map_gradients() {
    sweep(
        "affine",
        LINEAR_TOL,
        |r| {
            store(vec![
                ("x", random(r, &[2, 3, 3], -1.0, 1.0)),
                ("w", random(r, &[3, 4], -1.0, 1.0)),
                ("b", random(r, &[4], -1.0, 1.0)),
            ])
        },
        |g, s| {
            let y = p(g, s, "x").affine(p(g, s, "w"), Some(p(g, s, "b")))?;
            probe(g, y)
        },
    );
}

#[test]
fn affine_map_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let w = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::from_f64(&[2], &[3.0, 3.0]).unwrap());
    assert_eq!(x.affine(w, Some(b)).unwrap().value().data(), &[4.0, 5.0]);
    assert_eq!(x.affine(w, None).unwrap().value().data(), &[1.0, 2.0]);
    let bad = g.constant(Tensor::from_f64(&[3, 2], &[0.0; 6]).unwrap());
    assert!(matches!(x.affine(bad, None), Err(AutodiffError::Shape(_))));
}

#[test]
fn batched_matmul_gradients() {
    sweep(
        "bmm",
        LINEAR_TOL,
        |r| {
            store(vec![
                ("a", random(r, &[2, 3, 4], -1.0, 1.0)),
                ("b", random(r, &[2, 4, 2], -1.0, 1.0)),
            ])
        },
        |g, s| {
            let y = p(g, s, "a").bmm(p(g, s, "b"))?;
            probe(g, y)
        },
    );
}

#[test]
fn elementwise_binary_gradients() {
    sweep(
        "add/sub/mul/scale",
        LINEAR_TOL,
        |r| {
            store(vec![
                ("a", random(r, &[3, 4], -2.0, 2.0)),
                ("b", random(r, &[3, 4], -2.0, 2.0)),
            ])
        },
        |g, s| {
            let (a, b) = (p(g, s, "a"), p(g, s, "b"));
            let y = a.add(b)?.scale(0.7).sub(b.scale(2.0))?.add(a.mul(b)?)?;
            probe(g, y)
        },
    );
}

#[test]
fn smooth_unary_gradients() {
    let cases: [(&str, Loss); 5] = [
        ("sigmoid", |g, s| probe(g, p(g, s, "x").sigmoid())),
        ("tanh", |g, s| probe(g, p(g, s, "x").tanh())),
        ("mish", |g, s| probe(g, p(g, s, "x").mish())),
        ("softplus", |g, s| probe(g, p(g, s, "x").softplus())),
        ("exp", |g, s| probe(g, p(g, s, "x").exp())),
    ];
    for (label, loss) in cases {
        sweep(label, TOL, |r| store(vec![("x", random(r, &[4, 5], -4.0, 4.0))]), loss);
    }
}

#[test]
fn positive_domain_unary_gradients() {
    let cases: [(&str, Loss); 2] = [
        ("sqrt", |g, s| probe(g, p(g, s, "x").sqrt())),
        ("ln", |g, s| probe(g, p(g, s, "x").ln())),
    ];
    for (label, loss) in cases {
        sweep(label, TOL, |r| store(vec![("x", random(r, &[3, 5], 0.2, 3.0))]), loss);
    }
}

#[test]
fn leaky_relu_gradients_away_from_the_kink() {
    sweep(
        "leaky_relu",
        LINEAR_TOL,
        |r| {
            let mut t = random(r, &[4, 6], 0.05, 2.0);
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                if k % 2 == 0 {
                    *v = -*v;
                }
            }
            store(vec![("x", t)])
        },
        |g, s| probe(g, p(g, s, "x").leaky_relu(0.2)),
    );
}

#[test]
fn shape_op_gradients() {
    sweep(
        "reshape/narrow/gather/concat/stack",
        LINEAR_TOL,
        |r| {
            store(vec![
                ("a", random(r, &[2, 3, 4], -1.0, 1.0)),
                ("b", random(r, &[2, 3, 2], -1.0, 1.0)),
            ])
        },
        |g, s| {
            let (a, b) = (p(g, s, "a"), p(g, s, "b"));
            let c = concat_last(&[a, b, a.narrow_last(1, 2)?])?;
            let rows = c.reshape(&[6, 8])?.gather_rows(vec![5, 0, 0, 3], &[2, 2, 8])?;
            let st = stack(&[rows, rows.scale(-0.5)])?;
            probe(g, st)
        },
    );
}

#[test]
fn softmax_gradients() {
    sweep(
        "masked_softmax",
        TOL,
        |r| store(vec![("x", random(r, &[3, 5], -3.0, 3.0))]),
        |g, s| {
            let mask: Vec<bool> = (0..15).map(|k| k % 5 == k / 5).collect();
            let y = p(g, s, "x").masked_softmax(Some(&mask))?;
            let z = p(g, s, "x").softmax_last();
            probe(g, y.add(z)?)
        },
    );
}

fn pair_dims() -> PairDims {
    PairDims {
        steps: 3,
        batch: 2,
        agents: 3,
        heads: 2,
        head_dim: 2,
    }
}

#[test]
fn pair_attention_gradients() {
    sweep(
        "same_time_scores + time_weighted_sum",
        TOL,
        |r| {
            let d = pair_dims();
            let shape = [d.steps, d.batch, d.agents, d.width()];
            store(vec![
                ("k", random(r, &shape, -1.0, 1.0)),
                ("q", random(r, &shape, -1.0, 1.0)),
                ("v", random(r, &shape, -1.0, 1.0)),
            ])
        },
        |g, s| {
            let d = pair_dims();
            let scores = p(g, s, "k").same_time_scores(p(g, s, "q"), d, 0.5f64.sqrt())?;
            let w = scores.softmax_last();
            let e = w.time_weighted_sum(p(g, s, "v"), d)?;
            probe(g, e)
        },
    );
}

#[test]
fn gaussian_nll_gradients() {
    sweep(
        "gaussian_nll",
        TOL,
        |r| {
            store(vec![
                ("y", random(r, &[4, 3], -1.0, 1.0)),
                ("mu", random(r, &[4, 3], -1.0, 1.0)),
                ("raw", random(r, &[4, 3], -2.0, 2.0)),
            ])
        },
        |g, s| {
            let floor = g.constant(Tensor::full(&[4, 3], 1e-6));
            let var = p(g, s, "raw").softplus().add(floor)?;
            p(g, s, "y").gaussian_nll(p(g, s, "mu"), var, 0.25)
        },
    );
}

#[test]
fn gru_cell_gradients() {
    sweep(
        "gru_cell",
        TOL,
        |r| {
            let (din, hid, rows) = (3, 4, 2);
            store(vec![
                ("x", random(r, &[rows, din], -1.0, 1.0)),
                ("h", random(r, &[rows, hid], -1.0, 1.0)),
                ("w_ih", random(r, &[din, 3 * hid], -0.8, 0.8)),
                ("w_hh", random(r, &[hid, 3 * hid], -0.8, 0.8)),
                ("b_ih", random(r, &[3 * hid], -0.5, 0.5)),
                ("b_hh", random(r, &[3 * hid], -0.5, 0.5)),
            ])
        },
        |g, s| {
            let h1 = gru_cell(
                p(g, s, "x"),
                p(g, s, "h"),
                p(g, s, "w_ih"),
                p(g, s, "w_hh"),
                p(g, s, "b_ih"),
                p(g, s, "b_hh"),
            )?;
            // A second step reuses the weights so fan-out accumulation is covered.
            let h2 = gru_cell(
                p(g, s, "x").scale(-1.0),
                h1,
                p(g, s, "w_ih"),
                p(g, s, "w_hh"),
                p(g, s, "b_ih"),
                p(g, s, "b_hh"),
            )?;
            probe(g, h2)
        },
    );
}

fn gru_params(din: usize, hid: usize, fill: impl Fn(usize) -> f64) -> [Tensor<f64>; 4] {
    let mk = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let d: Vec<f64> = (0..n).map(&fill).collect();
        Tensor::from_f64(shape, &d).unwrap()
    };
    [mk(&[din, 3 * hid]), mk(&[hid, 3 * hid]), mk(&[3 * hid]), mk(&[3 * hid])]
}

#[test]
fn gru_zero_parameters_keep_the_zero_state() {
    let (din, hid) = (128, 256);
    let g = Graph::<f64>::new();
    let [wi, wh, bi, bh] = gru_params(din, hid, |_| 0.0);
    let x = g.constant(Tensor::full(&[2, din], 0.7));
    let h = g.constant(Tensor::zeros(&[2, hid]));
    let out = gru_cell(x, h, g.constant(wi), g.constant(wh), g.constant(bi), g.constant(bh)).unwrap();
    assert_eq!(out.shape(), vec![2, hid]);
    assert!(out.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_saturated_update_gate_copies_the_state() {
    let (din, hid) = (3, 4);
    let g = Graph::<f64>::new();
    let [wi, wh, mut bi, bh] = gru_params(din, hid, |k| (k as f64 * 0.31).sin() * 0.3);
    for c in hid..2 * hid {
        bi.data_mut()[c] = 60.0;
    }
    let hv = [0.3, -0.2, 0.9, -0.7, 0.1, 0.0, 0.5, -1.0];
    let x = g.constant(Tensor::full(&[2, din], 0.4));
    let h = g.constant(Tensor::from_f64(&[2, hid], &hv).unwrap());
    let out = gru_cell(x, h, g.constant(wi), g.constant(wh), g.constant(bi), g.constant(bh)).unwrap();
    for (a, b) in out.value().data().iter().zip(hv) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gru_rejects_mismatched_shapes() {
    let g = Graph::<f64>::new();
    let [wi, wh, bi, bh] = gru_params(3, 4, |_| 0.1);
    let x = g.constant(Tensor::zeros(&[2, 5]));
    let h = g.constant(Tensor::zeros(&[2, 4]));
    let r = gru_cell(x, h, g.constant(wi), g.constant(wh), g.constant(bi), g.constant(bh));
    assert!(matches!(r, Err(AutodiffError::Shape(_))));
}

fn unary(x: f64, f: impl for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>) -> f64 {
    let g = Graph::<f64>::new();
    let v = g.constant(Tensor::scalar(x));

    f(v).item()
}

#[test]
fn mish_values() {
    assert_eq!(unary(0.0, |v| v.mish()), 0.0);
    // x tanh(ln(1 + e^x)) evaluated directly at x = 1.
    let direct = (1.0f64.exp().ln_1p()).tanh();
    assert!((unary(1.0, |v| v.mish()) - direct).abs() < 1e-15);
    assert!((unary(1.0, |v| v.mish()) - 0.865098).abs() < 1e-6);
    let neg = unary(-20.0, |v| v.mish());
    assert!(neg < 0.0 && neg > -1e-7, "{neg}");
    assert!((unary(20.0, |v| v.mish()) - 20.0).abs() < 1e-12);
    for x in [-800.0, 800.0] {
        assert!(unary(x, |v| v.mish()).is_finite());
    }
}

fn softmax_rows(logits: &[f64], width: usize, mask: Option<&[bool]>) -> Result<Vec<f64>, AutodiffError> {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[logits.len() / width, width], logits).unwrap());
    let y = x.masked_softmax(mask)?;
    let out = y.value().data().to_vec();
    Ok(out)
}

#[test]
fn masked_softmax_examples() {
    let eq = softmax_rows(&[0.3; 4], 4, None).unwrap();
    assert!(eq.iter().all(|&w| (w - 0.25).abs() < 1e-15));
    let sat = softmax_rows(&[0.0, -10000.0], 2, None).unwrap();
    assert!((sat[0] - 1.0).abs() < 1e-4 && sat[1] < 1e-4);
    let masked = softmax_rows(&[2.0, 9.0, -1.0], 3, Some(&[false, true, false])).unwrap();
    assert!(masked[1] < 1e-4);
    let r = softmax_rows(&[1.0, 2.0, 3.0, 4.0], 2, Some(&[false, false, true, true]));
    assert!(matches!(r, Err(AutodiffError::DegenerateRow)));
}

#[test]
fn masked_softmax_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let a = softmax_rows(&x, 4, None).unwrap();
        let b = softmax_rows(&shifted, 4, None).unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn nll(y: &[f64], mu: &[f64], var: &[f64]) -> Result<f64, AutodiffError> {
    let g = Graph::<f64>::new();
    let t = |d: &[f64]| g.constant(Tensor::from_f64(&[d.len()], d).unwrap());
    Ok(t(y).gaussian_nll(t(mu), t(var), 1.0)?.item())
}

#[test]
fn gaussian_nll_examples() {
    assert!(nll(&[0.4, -1.0], &[0.4, -1.0], &[0.5, 0.5]).unwrap().abs() < 1e-15);
    assert!(matches!(nll(&[0.0], &[0.0], &[0.0]), Err(AutodiffError::Domain(_))));
    assert!(matches!(nll(&[0.0], &[0.0], &[-1.0]), Err(AutodiffError::Domain(_))));
}

#[test]
fn gaussian_nll_is_minimized_at_the_squared_residual() {
    let (y, mu) = (0.9, 0.2);
    let best = (y - mu) * (y - mu);
    let at = |v: f64| nll(&[y], &[mu], &[v]).unwrap();
    let f0 = at(best);
    for k in 1..50 {
        let d = best * k as f64 / 25.0;
        assert!(at(best + d) > f0);
        if best - d > 0.0 {
            assert!(at(best - d) > f0);
        }
    }
}

#[test]
fn gaussian_nll_mean_gradient_is_closed_form() {
    let s = store(vec![
        ("y", Tensor::from_f64(&[3], &[0.5, -0.3, 2.0]).unwrap()),
        ("mu", Tensor::from_f64(&[3], &[0.1, 0.4, 1.0]).unwrap()),
        ("var", Tensor::from_f64(&[3], &[0.2, 1.5, 0.7]).unwrap()),
    ]);
    let g = Graph::<f64>::new();
    let l = p(&g, &s, "y")
        .gaussian_nll(p(&g, &s, "mu"), p(&g, &s, "var"), 1.0)
        .unwrap();
    let grads = g.backward(l, s.len()).unwrap();
    let gm = grads.get(s.find("mu").unwrap()).unwrap().data();
    for (k, g) in gm.iter().enumerate() {
        let (y, m, v) = (
            s.get(ParamId(0)).data()[k],
            s.get(ParamId(1)).data()[k],
            s.get(ParamId(2)).data()[k],
        );
        assert!((g - (m - y) / v).abs() < 1e-6);
    }
}

#[test]
fn backward_examples() {
    let s = store(vec![("x", Tensor::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap())]);
    let g = Graph::<f64>::new();
    let l = p(&g, &s, "x").sum();
    assert!(g
        .backward(l, 1)
        .unwrap()
        .get(ParamId(0))
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 1.0));
    let g = Graph::<f64>::new();
    let x = p(&g, &s, "x");
    let l = x.mul(x).unwrap().sum();
    let gx = g.backward(l, 1).unwrap();
    for (a, b) in gx.get(ParamId(0)).unwrap().data().iter().zip(s.get(ParamId(0)).data()) {
        assert_eq!(*a, 2.0 * b);
    }
    assert!(g.is_empty(), "record is cleared after backward");
}

#[test]
fn backward_requires_a_scalar() {
    let s = store(vec![("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap())]);
    let g = Graph::<f64>::new();
    let x = p(&g, &s, "x");
    assert!(matches!(g.backward(x.exp(), 1), Err(AutodiffError::Shape(_))));
}

fn small_net<'g>(g: &'g Graph<f64>, s: &ParamStore<f64>) -> Result<Var<'g, f64>, AutodiffError> {
    let h = p(g, s, "x").affine(p(g, s, "w"), Some(p(g, s, "b")))?.mish();
    let sm = h.softmax_last();
    probe(g, sm.mul(h)?)
}

fn net_store(seed: u64) -> ParamStore<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    store(vec![
        ("x", random(&mut r, &[3, 4], -1.0, 1.0)),
        ("w", random(&mut r, &[4, 5], -1.0, 1.0)),
        ("b", random(&mut r, &[5], -1.0, 1.0)),
    ])
}

#[test]
fn fan_out_doubles_the_gradient_exactly() {
    let s = net_store(3);
    let g = Graph::<f64>::new();
    let l = small_net(&g, &s).unwrap();
    let once = g.backward(l, s.len()).unwrap();
    let g = Graph::<f64>::new();
    let l = small_net(&g, &s).unwrap().add(small_net(&g, &s).unwrap()).unwrap();
    let twice = g.backward(l, s.len()).unwrap();
    for id in s.ids() {
        for (a, b) in once.get(id).unwrap().data().iter().zip(twice.get(id).unwrap().data()) {
            assert_eq!(2.0 * a, *b);
        }
    }
}

#[test]
fn replayed_forward_is_bit_identical() {
    let s = net_store(8);
    let run = || {
        let g = Graph::<f64>::new();
        let l = small_net(&g, &s).unwrap();
        let v = l.item();
        let gr = g.backward(l, s.len()).unwrap();
        (
            v.to_bits(),
            gr.get(ParamId(1))
                .unwrap()
                .data()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn gradients_are_finite_after_backward() {
    let s = net_store(21);
    let g = Graph::<f64>::new();
    let l = small_net(&g, &s).unwrap();
    let gr = g.backward(l, s.len()).unwrap();
    assert!(gr.all_finite());
    for id in s.ids() {
        assert_eq!(gr.get(id).unwrap().shape(), s.get(id).shape());
    }
}
