use std::collections::HashSet;

use lwgr::item_tokenizer::*;
use lwgr::LwgrError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn one_hot_vectors_are_their_own_centroids() {
    let v: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let books = fit_codebooks(&v, 1, 4, 0).unwrap();
    let sids = encode_catalog(&v, &books).unwrap();
    for (x, s) in v.iter().zip(&sids) {
        assert_eq!(books.centroid(0, s.tokens[0]), x.as_slice());
        assert_eq!(s.disamb, 0);
    }
    let distinct: HashSet<_> = sids.iter().map(|s| s.tokens[0]).collect();
    assert_eq!(distinct.len(), 4);
}

#[test]
fn separated_blobs_recover_their_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers = [[-10.0, 0.0], [10.0, 3.0]];
    let mut pts = Vec::new();
    let mut means = [[0.0; 2]; 2];
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..50 {
            let p = vec![center[0] + rng.gen_range(-1.0..1.0), center[1] + rng.gen_range(-1.0..1.0)];
            means[c][0] += p[0] / 50.0;
            means[c][1] += p[1] / 50.0;
            pts.push(p);
        }
    }
    let books = fit_codebooks(&pts, 1, 2, 1).unwrap();
    for m in &means {
        let hit = (0..2).any(|j| {
            let c = books.centroid(0, j);
            (c[0] - m[0]).abs() < 1e-9 && (c[1] - m[1]).abs() < 1e-9
        });
        assert!(hit, "no centroid at blob mean {m:?}");
    }
}

#[test]
fn duplicates_share_tokens_and_get_increasing_suffixes() {
    let mut v = random_vectors(10, 4, 2);
    v.push(v[3].clone());
    v.push(v[3].clone());
    let books = fit_codebooks(&v, 2, 3, 0).unwrap();
    let sids = encode_catalog(&v, &books).unwrap();
    assert_eq!(sids[3].tokens, sids[10].tokens);
    assert_eq!(sids[10].tokens, sids[11].tokens);
    let suffixes: Vec<usize> = [3, 10, 11].iter().map(|&i| sids[i].disamb).collect();
    assert!(suffixes[0] < suffixes[1] && suffixes[1] < suffixes[2]);
}

#[test]
fn centroid_inputs_encode_to_themselves() {
    let v = random_vectors(40, 6, 3);
    let books = fit_codebooks(&v, 3, 5, 9).unwrap();
    for j in 0..5 {
        let x: Vec<f64> = (0..3).flat_map(|l| books.centroid(l, j).to_vec()).collect();
        let sid = &encode_catalog(&[x], &books).unwrap()[0];
        assert_eq!(sid.tokens, vec![j; 3]);
    }
}

#[test]
fn indivisible_dimension_is_a_config_error() {
    let v = random_vectors(10, 5, 0);
    assert!(matches!(fit_codebooks(&v, 2, 3, 0), Err(LwgrError::Config(_))));
    assert!(matches!(fit_codebooks(&v, 1, 11, 0), Err(LwgrError::Config(_))));
}

#[test]
fn dimension_mismatch_on_encode_is_a_contract_violation() {
    let books = fit_codebooks(&random_vectors(10, 4, 0), 2, 3, 0).unwrap();
    let err = encode_catalog(&random_vectors(2, 6, 1), &books).unwrap_err();
    assert!(matches!(err, LwgrError::Contract { .. }), "{err:?}");
}

#[test]
fn single_item_trie_has_one_path() {
    let t = PrefixTrie::build(&[vec![2, 0, 1]]).unwrap();
    assert_eq!(t.num_nodes(), 4);
    assert_eq!(t.lookup(&[2, 0, 1]), Some(0));
    assert!(!t.contains(&[2, 0, 0]));
}

#[test]
fn trie_membership_matches_a_set_oracle() {
    let v = random_vectors(150, 6, 4);
    let (_, cat) = tokenize_catalog(
        &v.iter()
            .enumerate()
            .map(|(i, c)| CatalogItem {
                item_id: format!("i{i}"),
                content: c.clone(),
                text_tokens: vec![],
            })
            .collect::<Vec<_>>(),
        3,
        4,
        0,
    )
    .unwrap();
    let trie = cat.trie().unwrap();
    let seqs = cat.sequences();
    let set: HashSet<Vec<usize>> = seqs.iter().cloned().collect();
    assert_eq!(set.len(), cat.len(), "SIDs must be injective");
    for (i, s) in seqs.iter().enumerate() {
        assert_eq!(trie.lookup(s), Some(i));
    }
    let vocab = cat.vocab_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    while checked < 1000 {
        let s: Vec<usize> = vocab.iter().map(|&m| rng.gen_range(0..m + 1)).collect();
        if set.contains(&s) {
            continue;
        }
        assert!(!trie.contains(&s), "{s:?} accepted");
        checked += 1;
    }
}

#[test]
fn catalog_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let items: Vec<CatalogItem> = random_vectors(12, 4, 6)
        .into_iter()
        .enumerate()
        .map(|(i, c)| CatalogItem {
            item_id: format!("item_{i}"),
            content: c,
            text_tokens: vec![i, i + 1],
        })
        .collect();
    let p = dir.path().join("catalog.jsonl");
    write_catalog(&p, &items).unwrap();
    assert_eq!(read_catalog(&p).unwrap(), items);

    let (_, cat) = tokenize_catalog(&items, 2, 3, 1).unwrap();
    let j = dir.path().join("sids.json");
    cat.save(&j).unwrap();
    let back = SidCatalog::load(&j).unwrap();
    assert_eq!(back.sids, cat.sids);
    assert_eq!(back.index_of("item_7").unwrap(), 7);
    assert!(matches!(back.index_of("nope"), Err(LwgrError::Lookup(_))));

    let c = dir.path().join("sids.csv");
    cat.write_csv(&c).unwrap();
    let text = std::fs::read_to_string(&c).unwrap();
    assert_eq!(text.lines().next(), Some("item_id,token_0,token_1,disamb"));
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn missing_catalog_file_is_reported() {
    let err = read_catalog(std::path::Path::new("/nonexistent/catalog.jsonl")).unwrap_err();
    assert!(matches!(err, LwgrError::MissingArtifact(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn inertia_never_increases(seed in 0u64..1000, n in 8usize..60, m in 1usize..6) {
        let v = random_vectors(n, 3, seed);
        let pts: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
        let km = kmeans(&pts, m, KMEANS_MAX_ITERS, seed).unwrap();
        for w in km.inertia.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", km.inertia);
        }
    }

    #[test]
    fn encoding_matches_exhaustive_scan(seed in 0u64..1000) {
        let v = random_vectors(30, 6, seed);
        let books = fit_codebooks(&v, 2, 4, seed).unwrap();
        let a = encode_catalog(&v, &books).unwrap();
        let b = encode_catalog(&v, &books).unwrap();
        prop_assert_eq!(&a, &b);
        for (x, sid) in v.iter().zip(&a) {
            for l in 0..2 {
                let (s, w) = books.slices[l];
                let d = |j: usize| books.centroid(l, j).iter().zip(&x[s..s + w]).map(|(c, y)| (c - y).powi(2)).sum::<f64>();
                let best = (0..4).fold(0, |b, j| if d(j) < d(b) { j } else { b });
                prop_assert_eq!(sid.tokens[l], best);
            }
        }
    }
}
