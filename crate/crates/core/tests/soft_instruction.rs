use lwgr::gr_backbone::EncoderOutput;
use lwgr::numerics::{check_leaves, GradCheckOptions, Gradients, Graph, ParamStore, Tensor};
use lwgr::soft_instruction::*;
use lwgr::LwgrError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn row(g: &mut Graph<'_, f64>, v: Vec<f64>) -> lwgr::numerics::Var {
    g.leaf(Tensor::row(v).with_grad()).unwrap()
}

fn mat(g: &mut Graph<'_, f64>, r: usize, c: usize, v: Vec<f64>) -> lwgr::numerics::Var {
    g.leaf(Tensor::matrix(r, c, v).unwrap().with_grad()).unwrap()
}

#[test]
fn pooling_averages_valid_rows_only() {
    let mut g = Graph::<f64>::new();
    let v = vec![0.5, -1.0, 2.0];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let h = mat(&mut g, 3, 3, [v.clone(), neg, vec![9.0, 9.0, 9.0]].concat());
    let enc = EncoderOutput { h, mask: vec![true, true, false] };
    let p = pool_context(&mut g, &enc).unwrap();
    assert_eq!(g.value(p), &[0.0, 0.0, 0.0]);

    let h = mat(&mut g, 2, 3, [v.clone(), v.clone()].concat());
    let p = pool_context(&mut g, &EncoderOutput { h, mask: vec![true; 2] }).unwrap();
    assert_eq!(g.value(p), v.as_slice());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = randv(&mut rng, 5 * 4);
    let h = mat(&mut g, 5, 4, data.clone());
    let p = pool_context(&mut g, &EncoderOutput { h, mask: vec![true; 5] }).unwrap();
    for c in 0..4 {
        let m = (0..5).map(|r| data[r * 4 + c]).sum::<f64>() / 5.0;
        assert!((g.value(p)[c] - m).abs() < 1e-15);
    }

    let h = mat(&mut g, 2, 3, vec![0.0; 6]);
    let err = pool_context(&mut g, &EncoderOutput { h, mask: vec![false; 2] }).unwrap_err();
    assert!(matches!(err, LwgrError::Contract { .. }));
}

fn codebooks(k: usize, d: usize, d_llm: usize, seed: u64) -> (ParamStore<f64>, UserCodebooks) {
    let mut store = ParamStore::new();
    let cfg = SoftInstructionConfig {
        k,
        codewords: 6,
        ..Default::default()
    };
    let cb = UserCodebooks::new(&mut store, &cfg, d, d_llm, seed).unwrap();
    (store, cb)
}

#[test]
fn identity_projections_slice_the_context() {
    let (mut store, cb) = codebooks(3, 6, 4, 0);
    for k in 0..3 {
        let w: Vec<f64> = (0..6).flat_map(|r| (0..2).map(move |c| f64::from(u8::from(r == 2 * k + c)))).collect();
        store.set_values(&format!("si.proj.{k}.w"), &[6, 2], w).unwrap();
    }
    let mut g = Graph::new();
    let s = g.register(&store);
    let hv = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let h = row(&mut g, hv.clone());
    let us = cb.project_subspaces(&mut g, s, h).unwrap();
    for (k, u) in us.iter().enumerate() {
        assert_eq!(g.value(*u), &hv[2 * k..2 * k + 2]);
    }
    let zero = row(&mut g, vec![0.0; 6]);
    for u in cb.project_subspaces(&mut g, s, zero).unwrap() {
        assert!(g.value(u).iter().all(|&x| x == 0.0));
    }
    let bad = row(&mut g, vec![0.0; 5]);
    assert!(matches!(cb.project_subspaces(&mut g, s, bad), Err(LwgrError::Contract { .. })));
}

#[test]
fn projections_and_llm_tokens_match_matrix_oracles() {
    let (store, cb) = codebooks(2, 8, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hv = randv(&mut rng, 8);
    let mut g = Graph::new();
    let s = g.register(&store);
    let h = row(&mut g, hv.clone());
    let us = cb.project_subspaces(&mut g, s, h).unwrap();
    let si = cb.instruct(&mut g, s, h).unwrap();
    let toks = g.tensor(si.tokens.unwrap());
    assert_eq!(toks.shape(), &[2, 5]);
    for k in 0..2 {
        let w = store.get(cb.projections[k].w);
        let b = store.get(cb.projections[k].b.unwrap());
        for c in 0..4 {
            let want: f64 = (0..8).map(|r| hv[r] * w.get(r, c)).sum::<f64>() + b.values()[c];
            assert!((g.value(us[k])[c] - want).abs() < 1e-12);
        }
        let z = g.value(si.st_vectors[k]).to_vec();
        let wl = store.get(cb.to_llm[k].w);
        for c in 0..5 {
            let want: f64 = (0..4).map(|r| z[r] * wl.get(r, c)).sum();
            assert!((toks.get(k, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_llm_map_passes_codewords_through() {
    let (mut store, cb) = codebooks(2, 4, 2, 5);
    for k in 0..2 {
        store.set_values(&format!("si.to_llm.{k}.w"), &[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    }
    let mut g = Graph::new();
    let s = g.register(&store);
    let h = row(&mut g, vec![0.3, -0.2, 0.9, 0.1]);
    let si = cb.instruct(&mut g, s, h).unwrap();
    let toks = g.tensor(si.tokens.unwrap());
    for k in 0..2 {
        assert_eq!(toks.row_slice(k), g.value(si.st_vectors[k]));
        let book = store.get(cb.books[k]);
        assert_eq!(g.value(si.st_vectors[k]), book.row_slice(si.indices[k]));
    }
}

#[test]
fn exact_codeword_input_selects_that_codeword() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let book = randv(&mut rng, 5 * 3);
    let mut g = Graph::new();
    let u = row(&mut g, book[6..9].to_vec());
    let b = mat(&mut g, 5, 3, book.clone());
    let (idx, p, z) = quantize_st(&mut g, u, b, 1.0).unwrap();
    assert_eq!(idx, 2);
    assert_eq!(g.value(z), &book[6..9]);
    let pv = g.value(p);
    assert!(pv.iter().all(|&x| x <= pv[2]));

    let u = row(&mut g, vec![0.1, 0.2, 0.3]);
    let b = mat(&mut g, 1, 3, vec![5.0, 5.0, 5.0]);
    let (idx, p, _) = quantize_st(&mut g, u, b, 0.7).unwrap();
    assert_eq!((idx, g.value(p)), (0, &[1.0][..]));
}

#[test]
fn argmin_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (v, d) = (rng.gen_range(1..10), rng.gen_range(1..6));
        let book = randv(&mut rng, v * d);
        let uv = randv(&mut rng, d);
        let mut g = Graph::<f64>::new();
        let u = row(&mut g, uv.clone());
        let b = mat(&mut g, v, d, book.clone());
        let (idx, _, _) = quantize_st(&mut g, u, b, 1.0).unwrap();
        let dist = |j: usize| (0..d).map(|c| (uv[c] - book[j * d + c]).powi(2)).sum::<f64>();
        let best = (0..v).fold(0, |b, j| if dist(j) < dist(b) { j } else { b });
        assert_eq!(idx, best);
        assert_eq!(nearest_codeword(&uv, &book, d), best);
    }
}

#[test]
fn unselected_codewords_get_gradient_matching_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let u = Tensor::row(randv(&mut rng, 3));
        let book = Tensor::matrix(4, 3, randv(&mut rng, 12)).unwrap();
        let c = randv(&mut rng, 3);
        let f = |g: &mut Graph<'_, f64>, x: &[lwgr::numerics::Var]| {
            let (_, _, z) = quantize_st(g, x[0], x[1], 0.5)?;
            let w = g.constant(Tensor::row(c.clone()))?;
            let m = g.mul(z, w)?;
            g.sum(m)
        };
        let report = check_leaves(&[u.clone(), book.clone()], &GradCheckOptions::default(), f).unwrap();
        assert!(report.max_rel_error < 1e-4, "trial {trial}: {report:?}");

        let mut g = Graph::new();
        let uv = g.leaf(u.with_grad()).unwrap();
        let bv = g.leaf(book.with_grad()).unwrap();
        let out = f(&mut g, &[uv, bv]).unwrap();
        let (idx, p, _) = quantize_st(&mut g, uv, bv, 0.5).unwrap();
        let pv = g.value(p).to_vec();
        let mut grads = Gradients::new();
        g.backward(out, &mut grads).unwrap();
        let gb = grads.leaf(bv).unwrap();
        for j in (0..4).filter(|&j| j != idx && pv[j] > 1e-6) {
            assert!(gb[j * 3..j * 3 + 3].iter().any(|&x| x != 0.0), "row {j} got no gradient");
        }
    }
}

#[test]
fn one_step_moves_unselected_codewords() {
    let (mut store, cb) = codebooks(2, 4, 3, 8);
    let mut g = Graph::new();
    let s = g.register(&store);
    let h = row(&mut g, vec![0.4, -0.3, 0.2, 0.7]);
    let si = cb.instruct(&mut g, s, h).unwrap();
    let toks = si.tokens.unwrap();
    let loss = g.sum(toks).unwrap();
    let mut grads = Gradients::new();
    g.backward(loss, &mut grads).unwrap();
    let probs: Vec<Vec<f64>> = si.distributions.iter().map(|&p| g.value(p).to_vec()).collect();
    let indices = si.indices.clone();
    drop(g);
    grads.write_into(&mut store).unwrap();
    let before: Vec<Vec<f64>> = cb.books.iter().map(|&b| store.get(b).values().to_vec()).collect();
    for &b in &cb.books {
        let gr = store.get(b).grad.clone().unwrap();
        for (x, d) in store.get_mut(b).values_mut().iter_mut().zip(gr) {
            *x -= 0.1 * d;
        }
    }
    let mut moved = false;
    for k in 0..2 {
        let after = store.get(cb.books[k]).values();
        for j in (0..6).filter(|&j| j != indices[k] && probs[k][j] > 1e-6) {
            moved |= after[j * 2..j * 2 + 2] != before[k][j * 2..j * 2 + 2];
        }
    }
    assert!(moved);
}

#[test]
fn temperature_sharpens_and_flattens() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let book = randv(&mut rng, 6 * 2);
    let uv = randv(&mut rng, 2);
    let max_min = |tau: f64| {
        let mut g = Graph::<f64>::new();
        let u = row(&mut g, uv.clone());
        let b = mat(&mut g, 6, 2, book.clone());
        let (_, p, _) = quantize_st(&mut g, u, b, tau).unwrap();
        let v = g.value(p);
        let s: f64 = v.iter().sum();
        assert!((s - 1.0).abs() < 1e-12 && v.iter().all(|&x| x >= 0.0));
        let mx = v.iter().cloned().fold(0.0, f64::max);
        let mn = v.iter().cloned().fold(1.0, f64::min);
        (mx, mn)
    };
    assert!(max_min(1e-3).0 > max_min(1.0).0);
    let (mx, mn) = max_min(1e3);
    assert!(mx - mn < 1e-3);
}

#[test]
fn residual_depth_one_is_plain_quantization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let book = randv(&mut rng, 4 * 3);
    let uv = randv(&mut rng, 3);
    let mut g = Graph::<f64>::new();
    let u = row(&mut g, uv);
    let b = mat(&mut g, 4, 3, book);
    let (si, _) = quantize_rq(&mut g, u, &[b], 1.0).unwrap();
    let (idx, p, z) = quantize_st(&mut g, u, b, 1.0).unwrap();
    assert_eq!(si.indices, vec![idx]);
    assert_eq!(g.value(si.distributions[0]), g.value(p));
    assert_eq!(g.value(si.st_vectors[0]), g.value(z));
    assert!(matches!(quantize_rq(&mut g, u, &[], 1.0), Err(LwgrError::Contract { .. })));
}

#[test]
fn sum_of_codewords_leaves_zero_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let b1 = randv(&mut rng, 4 * 3);
    // level-2 codewords are small so the level-1 choice is unambiguous
    let b2: Vec<f64> = randv(&mut rng, 4 * 3).iter().map(|x| 0.01 * x).collect();
    let uv: Vec<f64> = (0..3).map(|c| b1[3 + c] + b2[6 + c]).collect();
    let mut g = Graph::<f64>::new();
    let u = row(&mut g, uv);
    let v1 = mat(&mut g, 4, 3, b1);
    let v2 = mat(&mut g, 4, 3, b2);
    let (si, r) = quantize_rq(&mut g, u, &[v1, v2], 1.0).unwrap();
    assert_eq!(si.indices, vec![1, 2]);
    assert!(g.value(r).iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn bad_configurations_are_rejected() {
    let mut store = ParamStore::<f64>::new();
    assert!(matches!(subspace_dim(4, 5), Err(LwgrError::Config(_))));
    assert!(matches!(subspace_dim(4, 0), Err(LwgrError::Config(_))));
    assert_eq!(subspace_dim(10, 3).unwrap(), 3);
    let cfg = SoftInstructionConfig { tau: 0.0, ..Default::default() };
    assert!(matches!(UserCodebooks::new(&mut store, &cfg, 10, 4, 0), Err(LwgrError::Config(_))));
    assert!(matches!(MlpInstruction::new(&mut store, 0, 4, 4, 0), Err(LwgrError::Config(_))));
}

#[test]
fn mlp_and_residual_instructions_have_k_tokens() {
    let mut store = ParamStore::<f64>::new();
    let cfg = SoftInstructionConfig { k: 3, codewords: 4, ..Default::default() };
    let rq = ResidualCodebooks::new(&mut store, &cfg, 6, 5, 0).unwrap();
    let mlp = MlpInstruction::new(&mut store, 3, 6, 5, 0).unwrap();
    let mut g = Graph::new();
    let s = g.register(&store);
    let h = row(&mut g, vec![0.1; 6]);
    for si in [rq.instruct(&mut g, s, h).unwrap(), mlp.instruct(&mut g, s, h).unwrap()] {
        assert_eq!(g.shape(si.tokens.unwrap()), (3, 5));
    }
}

#[test]
fn export_carries_every_book() {
    let dir = tempfile::tempdir().unwrap();
    let (store, cb) = codebooks(2, 4, 3, 1);
    let e = cb.export(&store);
    assert_eq!((e.k, e.codewords, e.d_k, e.books.len(), e.books[0].len()), (2, 6, 2, 2, 12));
    let p = dir.path().join("codebooks.json");
    e.save(&p).unwrap();
    let back: CodebookExport = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
    assert_eq!(back, e);
}

proptest! {
    #[test]
    fn forward_value_is_the_hard_codeword(seed in 0u64..100_000, tau in 0.01f64..10.0, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = (rng.gen_range(1..8), rng.gen_range(1..5));
        let book = randv(&mut rng, v * d);
        let uv = randv(&mut rng, d);
        let mut g = Graph::<f64>::new();
        let u = row(&mut g, uv);
        let b = mat(&mut g, v, d, book.clone());
        let (idx, p, z) = quantize_st(&mut g, u, b, tau).unwrap();
        prop_assert_eq!(g.value(z), &book[idx * d..(idx + 1) * d]);
        let pv = g.value(p).to_vec();
        prop_assert!((pv.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let amax = (0..v).fold(0, |b, j| if pv[j] > pv[b] { j } else { b });
        prop_assert_eq!(pv[amax], pv[idx]);

        // a common shift of the similarities leaves p unchanged
        let dist: Vec<f64> = (0..v).map(|j| -(0..d).map(|c| (g.value(u)[c] - book[j * d + c]).powi(2)).sum::<f64>()).collect();
        let a1 = g.constant(Tensor::row(dist.clone())).unwrap();
        let a2 = g.constant(Tensor::row(dist.iter().map(|x| x + shift).collect())).unwrap();
        let p1 = g.softmax(a1, tau).unwrap();
        let p2 = g.softmax(a2, tau).unwrap();
        for (x, y) in g.value(p1).iter().zip(g.value(p2)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in g.value(p1).iter().zip(&pv) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_error_does_not_grow_with_depth(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        // each level includes a zero codeword, so quantizing can only shrink the residual
        let books: Vec<Vec<f64>> = (0..4)
            .map(|_| [vec![0.0; d], randv(&mut rng, 5 * d)].concat())
            .collect();
        let mut g = Graph::<f64>::new();
        let u = row(&mut g, randv(&mut rng, d));
        let vars: Vec<_> = books.iter().map(|b| mat(&mut g, 6, d, b.clone())).collect();
        let mut last = f64::INFINITY;
        for depth in 1..=4 {
            let (_, r) = quantize_rq(&mut g, u, &vars[..depth], 1.0).unwrap();
            let e: f64 = g.value(r).iter().map(|x| x * x).sum();
            prop_assert!(e <= last + 1e-12);
            last = e;
        }
    }
}
