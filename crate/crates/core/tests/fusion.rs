use lwgr::fusion::*;
use lwgr::gr_backbone::{BackboneConfig, GrModel};
use lwgr::numerics::{AttnMask, Graph, ParamStore, Tensor, Var};
use lwgr::LwgrError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 8;
const D_LLM: usize = 6;

fn block(mode: FusionMode, seed: u64) -> (ParamStore<f64>, FusionBlock) {
    let mut store = ParamStore::new();
    let cfg = FusionConfig { mode, heads: 2, zero_init_output: false };
    let b = FusionBlock::new(&mut store, &cfg, D, D_LLM, seed).unwrap();
    // nonzero biases so the oracle exercises them
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for name in ["fusion.q.b", "fusion.k.b", "fusion.v.b", "fusion.o.b"] {
        let id = store.id(name).unwrap();
        for v in store.get_mut(id).values_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    (store, b)
}

fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<f64> {
    (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn affine(store: &ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.get(store.id(&format!("{name}.w")).unwrap());
    let b = store.get(store.id(&format!("{name}.b")).unwrap());
    (0..w.cols()).map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>() + b.values()[j]).collect()
}

/// Explicit loops over heads and keys.
fn brute_force(store: &ParamStore<f64>, heads: usize, q0: &[f64], h: &[Vec<f64>]) -> Vec<f64> {
    let q = affine(store, "fusion.q", q0);
    let ks: Vec<Vec<f64>> = h.iter().map(|r| affine(store, "fusion.k", r)).collect();
    let vs: Vec<Vec<f64>> = h.iter().map(|r| affine(store, "fusion.v", r)).collect();
    let dh = D / heads;
    let mut concat = vec![0.0; D];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        let logits: Vec<f64> = ks
            .iter()
            .map(|k| cols.clone().map(|c| q[c] * k[c]).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (j, l) in logits.iter().enumerate() {
            let a = (l - m).exp() / z;
            for c in cols.clone() {
                concat[c] += a * vs[j][c];
            }
        }
    }
    affine(store, "fusion.o", &concat)
}

fn fuse(store: &ParamStore<f64>, b: &FusionBlock, q0: &[f64], h: &[Vec<f64>]) -> Vec<f64> {
    let mut g = Graph::new();
    let s = g.register(store);
    let q = g.constant(Tensor::row(q0.to_vec())).unwrap();
    let hv = g.constant(Tensor::matrix(h.len(), D_LLM, h.concat()).unwrap()).unwrap();
    let out = b.fuse_bos(&mut g, s, q, Some(hv)).unwrap();
    g.value(out).to_vec()
}

#[test]
fn fusion_matches_brute_force_attention() {
    let (store, b) = block(FusionMode::Replace, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 1..6 {
        let q0 = randm(&mut rng, 1, D);
        let h: Vec<Vec<f64>> = (0..n).map(|_| randm(&mut rng, 1, D_LLM)).collect();
        let got = fuse(&store, &b, &q0, &h);
        let want = brute_force(&store, 2, &q0, &h);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-10, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn a_single_key_ignores_the_query() {
    let (store, b) = block(FusionMode::Replace, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = randm(&mut rng, 1, D_LLM);
    let a = fuse(&store, &b, &randm(&mut rng, 1, D), std::slice::from_ref(&v));
    let c = fuse(&store, &b, &randm(&mut rng, 1, D), std::slice::from_ref(&v));
    let want = affine(&store, "fusion.o", &affine(&store, "fusion.v", &v));
    for ((x, y), w) in a.iter().zip(&c).zip(&want) {
        assert!((x - w).abs() < 1e-12 && (y - w).abs() < 1e-12);
    }
    let repeated = fuse(&store, &b, &randm(&mut rng, 1, D), &vec![v; 4]);
    for (x, w) in repeated.iter().zip(&want) {
        assert!((x - w).abs() < 1e-12);
    }
}

#[test]
fn empty_knowledge_bypasses_fusion() {
    let (store, b) = block(FusionMode::Replace, 0);
    let mut g = Graph::new();
    let s = g.register(&store);
    let q = g.constant(Tensor::row(vec![0.25; D])).unwrap();
    assert_eq!(b.start_state(&mut g, s, q, None).unwrap(), q);
    let empty = g.constant(Tensor::zeros(&[0, D_LLM])).unwrap();
    assert_eq!(b.fuse_bos(&mut g, s, q, Some(empty)).unwrap(), q);
}

#[test]
fn modes_combine_as_documented() {
    let mut g = Graph::<f64>::new();
    let q0 = g.constant(Tensor::row(vec![1.0, -2.0, 0.5])).unwrap();
    let f = g.constant(Tensor::row(vec![0.25, 0.0, 4.0])).unwrap();
    let z = g.constant(Tensor::row(vec![0.0; 3])).unwrap();
    let r = combine(&mut g, q0, q0, FusionMode::Replace).unwrap();
    assert_eq!(g.value(r), g.value(q0));
    let r = combine(&mut g, q0, z, FusionMode::Residual).unwrap();
    assert_eq!(g.value(r), g.value(q0));
    let r = combine(&mut g, q0, f, FusionMode::Residual).unwrap();
    assert_eq!(g.value(r), &[1.25, -2.0, 4.5]);
    assert_eq!("residual".parse::<FusionMode>().unwrap(), FusionMode::Residual);
    assert!(matches!("gated".parse::<FusionMode>(), Err(LwgrError::Config(_))));
}

#[test]
fn zero_init_residual_starts_at_the_bos_state() {
    let mut store = ParamStore::<f64>::new();
    let cfg = FusionConfig { mode: FusionMode::Residual, heads: 2, zero_init_output: true };
    let b = FusionBlock::new(&mut store, &cfg, D, D_LLM, 0).unwrap();
    let mut g = Graph::new();
    let s = g.register(&store);
    let q = g.constant(Tensor::row(vec![0.3; D])).unwrap();
    let h = g.constant(Tensor::matrix(2, D_LLM, vec![0.7; 2 * D_LLM]).unwrap()).unwrap();
    let out = b.start_state(&mut g, s, q, Some(h)).unwrap();
    assert_eq!(g.value(out), &[0.3; D]);
}

#[test]
fn without_knowledge_the_decoder_is_unchanged() {
    let cfg = BackboneConfig { d: D, heads: 2, enc_layers: 1, dec_layers: 1, ffn_mult: 2, max_items: 4 };
    let m = GrModel::<f64>::new(&cfg, &[3, 3], 5).unwrap();
    let (_, b) = block(FusionMode::Replace, 0);
    let toks = vec![vec![0, 1], vec![2, 2]];
    let (mut g, enc, s) = m.encode_history(&toks, &[0, 1]).unwrap();
    let bos = m.arch.bos(&mut g, s).unwrap();
    let start = b.start_state(&mut g, s, bos, None).unwrap();
    let l1 = m.arch.nll_loss(&mut g, s, &enc, bos, &[1, 2]).unwrap();
    let l2 = m.arch.nll_loss(&mut g, s, &enc, start, &[1, 2]).unwrap();
    assert_eq!(g.scalar(l1).to_bits(), g.scalar(l2).to_bits());
}

fn single_query_weights(g: &mut Graph<'_, f64>, q: Var, k: Var, heads: usize) -> Vec<Vec<f64>> {
    let out = g.attention(q, k, k, heads, &AttnMask::Full(None)).unwrap();
    (0..heads).map(|h| g.attention_weights(out, 0, h).unwrap().1).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_weights_form_a_distribution(seed in 0u64..100_000, n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::row(randm(&mut rng, 1, D))).unwrap();
        let k = g.constant(Tensor::matrix(n, D, randm(&mut rng, n, D)).unwrap()).unwrap();
        for w in single_query_weights(&mut g, q, k, 2) {
            prop_assert_eq!(w.len(), n);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_knowledge_stays_finite_and_continuous(seed in 0u64..100_000, log_c in -3.0f64..3.0) {
        let (store, b) = block(FusionMode::Residual, seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q0 = randm(&mut rng, 1, D);
        let h: Vec<Vec<f64>> = (0..3).map(|_| randm(&mut rng, 1, D_LLM)).collect();
        let c = 10f64.powf(log_c);
        let scaled = |c: f64| -> Vec<Vec<f64>> { h.iter().map(|r| r.iter().map(|x| x * c).collect()).collect() };
        let a = fuse(&store, &b, &q0, &scaled(c));
        prop_assert!(a.iter().all(|x| x.is_finite()));
        let nudged = fuse(&store, &b, &q0, &scaled(c * (1.0 + 1e-9)));
        for (x, y) in a.iter().zip(&nudged) {
            prop_assert!((x - y).abs() < 1e-4 * (1.0 + x.abs()));
        }
    }
}
