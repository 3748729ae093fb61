use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lwgr::numerics::*;
use lwgr::LwgrError;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    let v = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(r, c, v).unwrap()
}

/// Contracts an arbitrary-shaped output with fixed weights into a scalar.
fn contract_out(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> lwgr::Result<Var> {
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = g.constant(rand_tensor(&mut rng, r, c))?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

#[test]
fn softmax_uniform_and_two_way() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::row(vec![0.0, 0.0, 0.0])).unwrap();
    let y = g.softmax(x, 1.0).unwrap();
    for &v in g.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::row(vec![2f64.ln(), 0.0])).unwrap();
    let y = g.softmax(x, 1.0).unwrap();
    assert!((g.value(y)[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.value(y)[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_rejects_nonpositive_temperature() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.softmax(x, 0.0), Err(LwgrError::Contract { .. })));
}

#[test]
fn stop_gradient_passes_value_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::row(vec![1.5, -2.0]).with_grad()).unwrap();
    let s = g.stop_gradient(x).unwrap();
    assert_eq!(g.value(s), g.value(x));
    let p = g.mul(s, x).unwrap();
    let loss = g.sum(p).unwrap();
    let mut grads = Gradients::new();
    g.backward(loss, &mut grads).unwrap();
    // d/dx sum(sg(x) * x) = sg(x)
    assert_eq!(grads.leaf(x).unwrap(), &[1.5, -2.0]);
}

#[test]
fn square_derivative_at_three() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0).with_grad()).unwrap();
    let y = g.mul(x, x).unwrap();
    let mut grads = Gradients::new();
    g.backward(y, &mut grads).unwrap();
    assert_eq!(g.scalar(y), 9.0);
    assert_eq!(grads.leaf(x).unwrap(), &[6.0]);
}

#[test]
fn softmax_nll_gradient_is_probs_minus_onehot() {
    let logits = vec![0.3, -1.2, 2.0, 0.5];
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::row(logits.clone()).with_grad()).unwrap();
    let l = g.nll(x, &[2]).unwrap();
    let loss = g.sum(l).unwrap();
    let mut grads = Gradients::new();
    g.backward(loss, &mut grads).unwrap();
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    let gx = grads.leaf(x).unwrap();
    for (i, &v) in logits.iter().enumerate() {
        let expect = v.exp() / z - if i == 2 { 1.0 } else { 0.0 };
        assert!((gx[i] - expect).abs() < 1e-14);
    }
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, 3, 4);
    let b = rand_tensor(&mut rng, 4, 2);
    let rep = check_leaves(&[a, b], &GradCheckOptions::default(), |g, v| {
        let c = g.matmul(v[0], v[1])?;
        contract_out(g, c, 1)
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    assert_eq!(rep.coords_checked, 20);
}

#[test]
fn grad_check_linear_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, 1, 6);
    let theta = rand_tensor(&mut rng, 1, 6);
    let a2 = a.clone();
    let rep = check_leaves(std::slice::from_ref(&theta), &GradCheckOptions::default(), move |g, v| {
        let av = g.constant(a2.clone())?;
        let p = g.mul(av, v[0])?;
        g.sum(p)
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-10, "{rep:?}");

    let rep = check_leaves(&[theta], &GradCheckOptions::default(), |g, _| g.constant(Tensor::scalar(4.0))).unwrap();
    assert_eq!(rep.max_rel_error, 0.0);
}

#[test]
fn grad_check_rejects_nondeterministic_function() {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let calls = AtomicUsize::new(0);
    let x = Tensor::row(vec![1.0]);
    let err = check_leaves(&[x], &GradCheckOptions::default(), |g, v| {
        let n = calls.fetch_add(1, Ordering::Relaxed) as f64;
        let s = g.sum(v[0])?;
        g.add_scalar(s, n)
    })
    .unwrap_err();
    assert!(matches!(err, LwgrError::Contract { .. }));
}

#[test]
fn backward_twice_doubles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", rand_tensor(&mut rng, 3, 3), true);
    let x = rand_tensor(&mut rng, 2, 3);
    let mut g = Graph::new();
    let sr = g.register(&store);
    let wv = g.param(sr, w).unwrap();
    let xv = g.constant(x).unwrap();
    let y = g.matmul(xv, wv).unwrap();
    let y = g.softmax(y, 0.7).unwrap();
    let loss = contract_out(&mut g, y, 9).unwrap();
    let mut once = Gradients::new();
    g.backward(loss, &mut once).unwrap();
    let mut twice = Gradients::new();
    g.backward(loss, &mut twice).unwrap();
    g.backward(loss, &mut twice).unwrap();
    let a = once.param(&store, w).unwrap();
    let b = twice.param(&store, w).unwrap();
    for (x, y) in a.iter().zip(b) {
        assert_eq!(2.0 * x, *y);
    }
}

#[test]
fn unreachable_params_get_zero() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::row(vec![1.0, 2.0]), true);
    let b = store.add("b", Tensor::row(vec![3.0]), true);
    let mut g = Graph::new();
    let sr = g.register(&store);
    let av = g.param(sr, a).unwrap();
    let loss = g.sum(av).unwrap();
    let mut grads = Gradients::new();
    g.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.param_or_zero(&store, b), vec![0.0]);
    assert_eq!(grads.param_or_zero(&store, a), vec![1.0, 1.0]);
}

#[test]
fn frozen_params_pass_gradient_through() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let mut g = Graph::new();
    let sr = g.register(&store);
    let x = g.leaf(Tensor::row(vec![1.0, 1.0]).with_grad()).unwrap();
    let wv = g.param(sr, w).unwrap();
    let y = g.matmul(x, wv).unwrap();
    let loss = g.sum(y).unwrap();
    let mut grads = Gradients::new();
    g.backward(loss, &mut grads).unwrap();
    assert!(grads.param(&store, w).is_none());
    assert_eq!(grads.leaf(x).unwrap(), &[3.0, 7.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::row(vec![1.0, 2.0]).with_grad()).unwrap();
    let mut grads = Gradients::new();
    assert!(matches!(g.backward(x, &mut grads), Err(LwgrError::Contract { op: "backward", .. })));
}

#[test]
fn shape_mismatch_names_op() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    match g.matmul(a, b) {
        Err(LwgrError::Contract { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("2x3"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_input_is_numeric_error() {
    let mut g = Graph::<f64>::new();
    let r = g.constant(Tensor::row(vec![f64::NAN]));
    assert!(matches!(r, Err(LwgrError::Numeric { .. })));
    let a = g.constant(Tensor::row(vec![1e300])).unwrap();
    let b = g.mul(a, a);
    assert!(matches!(b, Err(LwgrError::Numeric { .. })));
}

#[test]
fn straight_through_forward_is_exactly_hard() {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::row(vec![0.1, 0.7, 0.2]).with_grad()).unwrap();
    let e = g.straight_through(Tensor::row(vec![0.0, 1.0, 0.0]), p).unwrap();
    assert_eq!(g.value(e), &[0.0, 1.0, 0.0]);
    let w = g.constant(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
    let y = g.mul(e, w).unwrap();
    let loss = g.sum(y).unwrap();
    let mut grads = Gradients::new();
    g.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.leaf(p).unwrap(), &[1.0, 2.0, 3.0]);
}

#[test]
fn attention_respects_key_mask_and_block_causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut g = Graph::<f64>::new();
    let q = g.constant(rand_tensor(&mut rng, 4, 4)).unwrap();
    let k = g.constant(rand_tensor(&mut rng, 4, 4)).unwrap();
    let v = g.constant(rand_tensor(&mut rng, 4, 4)).unwrap();
    let keep = vec![true, true, false, true];
    let o = g.attention(q, k, v, 2, &AttnMask::Full(Some(keep))).unwrap();
    for i in 0..4 {
        for h in 0..2 {
            let (_, w) = g.attention_weights(o, i, h).unwrap();
            assert_eq!(w[2], 0.0);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let o = g.attention(q, k, v, 2, &AttnMask::BlockCausal { block: 2 }).unwrap();
    let (span, _) = g.attention_weights(o, 3, 0).unwrap();
    assert_eq!((span.lo, span.hi), (2, 4));
}

#[test]
fn generic_over_f32() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::<f32>::scalar(3.0).with_grad()).unwrap();
    let y = g.mul(x, x).unwrap();
    let mut grads = Gradients::new();
    g.backward(y, &mut grads).unwrap();
    assert_eq!(grads.leaf(x).unwrap(), &[6.0f32]);
}

#[derive(Debug, Clone, Copy)]
enum Prim {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Softmax,
    LayerNorm,
    Gather,
    MeanRows,
    ConcatRows,
    ConcatCols,
    SliceCols,
    Nll,
    MaxConst,
    SqDist,
    Attention,
    CausalAttention,
}

const PRIMS: [Prim; 19] = [
    Prim::MatMul,
    Prim::Transpose,
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::AddRow,
    Prim::Scale,
    Prim::Softmax,
    Prim::LayerNorm,
    Prim::Gather,
    Prim::MeanRows,
    Prim::ConcatRows,
    Prim::ConcatCols,
    Prim::SliceCols,
    Prim::Nll,
    Prim::MaxConst,
    Prim::SqDist,
    Prim::Attention,
    Prim::CausalAttention,
];

fn check_prim(p: Prim, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..4);
    let m = rng.gen_range(2..5);
    let k = rng.gen_range(1..4);
    let opts = GradCheckOptions::default();
    let mut t = |r, c| rand_tensor(&mut rng, r, c);
    let rep = match p {
        Prim::MatMul => check_leaves(&[t(n, k), t(k, m)], &opts, |g, v| {
            let o = g.matmul(v[0], v[1])?;
            contract_out(g, o, seed)
        }),
        Prim::Transpose => check_leaves(&[t(n, m)], &opts, |g, v| {
            let o = g.transpose(v[0])?;
            contract_out(g, o, seed)
        }),
        Prim::Add => check_leaves(&[t(n, m), t(n, m)], &opts, |g, v| {
            let o = g.add(v[0], v[1])?;
            contract_out(g, o, seed)
        }),
        Prim::Sub => check_leaves(&[t(n, m), t(n, m)], &opts, |g, v| {
            let o = g.sub(v[0], v[1])?;
            contract_out(g, o, seed)
        }),
        Prim::Mul => check_leaves(&[t(n, m), t(n, m)], &opts, |g, v| {
            let o = g.mul(v[0], v[1])?;
            contract_out(g, o, seed)
        }),
        Prim::AddRow => check_leaves(&[t(n, m), t(1, m)], &opts, |g, v| {
            let o = g.add_row(v[0], v[1])?;
            contract_out(g, o, seed)
        }),
        Prim::Scale => check_leaves(&[t(n, m)], &opts, |g, v| {
            let o = g.scale(v[0], -1.7)?;
            contract_out(g, o, seed)
        }),
        Prim::Softmax => check_leaves(&[t(n, m)], &opts, |g, v| {
            let o = g.softmax(v[0], 0.6)?;
            contract_out(g, o, seed)
        }),
        Prim::LayerNorm => check_leaves(&[t(n, m + 1), t(1, m + 1), t(1, m + 1)], &opts, |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            contract_out(g, o, seed)
        }),
        Prim::Gather => check_leaves(&[t(m, k)], &opts, |g, v| {
            let o = g.gather_rows(v[0], &[1, 0, 1])?;
            contract_out(g, o, seed)
        }),
        Prim::MeanRows => {
            let keep: Vec<bool> = (0..m).map(|i| i % 2 == 0).collect();
            check_leaves(&[t(m, k)], &opts, move |g, v| {
                let o = g.mean_rows(v[0], Some(&keep))?;
                contract_out(g, o, seed)
            })
        }
        Prim::ConcatRows => check_leaves(&[t(n, k), t(m, k)], &opts, |g, v| {
            let o = g.concat_rows(&[v[0], v[1]])?;
            contract_out(g, o, seed)
        }),
        Prim::ConcatCols => check_leaves(&[t(n, k), t(n, m)], &opts, |g, v| {
            let o = g.concat_cols(&[v[0], v[1]])?;
            contract_out(g, o, seed)
        }),
        Prim::SliceCols => check_leaves(&[t(n, m + 1)], &opts, |g, v| {
            let o = g.slice_cols(v[0], 1, m)?;
            contract_out(g, o, seed)
        }),
        Prim::Nll => {
            let targets: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % m).collect();
            check_leaves(&[t(n, m)], &opts, move |g, v| {
                let o = g.nll(v[0], &targets)?;
                contract_out(g, o, seed)
            })
        }
        Prim::MaxConst => check_leaves(&[t(n, m)], &opts, |g, v| {
            let o = g.max_const(v[0], 0.05)?;
            contract_out(g, o, seed)
        }),
        Prim::SqDist => check_leaves(&[t(n, k), t(m, k)], &opts, |g, v| {
            let o = g.sq_dist(v[0], v[1])?;
            contract_out(g, o, seed)
        }),
        Prim::Attention => {
            let keep: Vec<bool> = (0..m).map(|i| i != 1).collect();
            check_leaves(&[t(n, 4), t(m, 4), t(m, 4)], &opts, move |g, v| {
                let o = g.attention(v[0], v[1], v[2], 2, &AttnMask::Full(Some(keep.clone())))?;
                contract_out(g, o, seed)
            })
        }
        Prim::CausalAttention => check_leaves(&[t(4, 4), t(4, 4), t(4, 4)], &opts, |g, v| {
            let o = g.attention(v[0], v[1], v[2], 2, &AttnMask::BlockCausal { block: 2 })?;
            contract_out(g, o, seed)
        }),
    };
    rep.unwrap().max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for p in PRIMS {
            let err = check_prim(p, seed);
            // kinks of max_const are measure-zero for continuous random inputs
            prop_assert!(err < 1e-4, "{:?} seed {} rel err {}", p, seed, err);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 1..12), tau in 0.01f64..10.0) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::row(vals)).unwrap();
        let y = g.softmax(x, tau).unwrap();
        let s: f64 = g.value(y).iter().sum();
        prop_assert!(g.value(y).iter().all(|&p| p >= 0.0));
        prop_assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn stop_gradient_equals_constant_subtree(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 2, 3);
        let w = rand_tensor(&mut rng, 3, 3);
        // graph A: loss = sum(softmax(x W) * sg(x W))
        let run = |use_sg: bool| {
            let mut g = Graph::<f64>::new();
            let xv = g.leaf(x.clone().with_grad()).unwrap();
            let wv = g.constant(w.clone()).unwrap();
            let h = g.matmul(xv, wv).unwrap();
            let frozen = if use_sg {
                g.stop_gradient(h).unwrap()
            } else {
                let t = g.tensor(h);
                g.constant(t).unwrap()
            };
            let s = g.softmax(h, 1.0).unwrap();
            let p = g.mul(s, frozen).unwrap();
            let loss = g.sum(p).unwrap();
            let mut grads = Gradients::new();
            g.backward(loss, &mut grads).unwrap();
            grads.leaf(xv).unwrap().to_vec()
        };
        prop_assert_eq!(run(true), run(false));
    }
}
