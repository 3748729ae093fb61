use std::sync::Arc;

use lwgr::config::RunConfig;
use lwgr::eval::{rank_policy, EvalConfig};
use lwgr::experiments::{build_policy, prepare, pretrain_reference, Prepared};
use lwgr::knowledge_source::KnowledgeMatrix;
use lwgr::policy::{Policy, Variant};
use lwgr::serving::*;
use lwgr::LwgrError;

const SMOKE: &str = include_str!("../../../configs/smoke.toml");

fn matrix(user: &str, fill: f64) -> KnowledgeMatrix {
    KnowledgeMatrix {
        user_id: user.into(),
        rows: 2,
        cols: 3,
        values: vec![fill; 6],
        context_fingerprint: String::new(),
    }
}

fn smoke() -> (RunConfig, Prepared<f64>, Policy<f64>) {
    let cfg = RunConfig::from_toml(SMOKE, &[]).unwrap();
    let p = prepare::<f64>(&cfg).unwrap();
    let (reference, _) = pretrain_reference(&cfg, &p).unwrap();
    let policy = build_policy(&cfg, &p, &reference, Variant::Lwgr).unwrap();
    (cfg, p, policy)
}

#[test]
fn publish_bumps_versions_and_touch_does_not() {
    let repo = KnowledgeRepository::new(matrix("", 0.0));
    assert!(repo.is_empty());
    assert!(repo.get("u").is_none());
    assert_eq!(repo.default_entry().version, 0);
    assert_eq!(repo.publish("u", matrix("u", 1.0), 10.0).version, 1);
    assert_eq!(repo.publish("u", matrix("u", 2.0), 20.0).version, 2);
    repo.touch("u", 30.0);
    let e = repo.get("u").unwrap();
    assert_eq!((e.version, e.refreshed_at), (2, 30.0));
    assert_eq!(e.matrix.values, vec![2.0; 6]);
    repo.touch("nobody", 5.0);
    assert_eq!(repo.len(), 1);
    assert_eq!(repo.snapshot()[0].0, "u");
}

#[test]
fn concurrent_readers_never_see_a_torn_entry() {
    let repo = Arc::new(KnowledgeRepository::new(matrix("", 0.0)));
    repo.publish("u", matrix("u", 0.0), 0.0);
    std::thread::scope(|s| {
        let w = repo.clone();
        s.spawn(move || {
            for i in 1..=500 {
                w.publish("u", matrix("u", i as f64), i as f64);
            }
        });
        for _ in 0..3 {
            let r = repo.clone();
            s.spawn(move || {
                let mut last = 0;
                for _ in 0..2000 {
                    let e = r.get("u").unwrap();
                    assert!(e.is_consistent());
                    assert!(e.matrix.values.iter().all(|&x| x == e.matrix.values[0]));
                    assert_eq!(e.matrix.values[0] as u64 + 1, e.version);
                    assert!(e.version >= last);
                    last = e.version;
                }
            });
        }
    });
    assert_eq!(repo.get("u").unwrap().version, 501);
}

#[test]
fn online_serving_matches_offline_ranking() {
    let (cfg, p, policy) = smoke();
    let models = ServingModels::new(&policy, p.env(), &p.trie, &p.catalog.item_ids);
    let repo = KnowledgeRepository::new(models.default_matrix().unwrap());
    let samples: Vec<_> = p.split.test_samples(&p.world).into_iter().take(6).collect();
    let sc = ServingConfig { k: 5, beam: 10, ..cfg.serving.clone() };
    let ec = EvalConfig { ks: vec![5], beam: 10, max_users: None };
    let offline = rank_policy(&policy, p.env(), &p.world.interactions, &samples, &p.trie, &p.catalog.item_ids, &ec).unwrap();
    for (s, off) in samples.iter().zip(&offline) {
        let uid = &p.world.users[s.user].user_id;
        let hist = &p.world.interactions[s.user][..s.end];
        repo.publish(uid, models.compute_entry(uid, hist).unwrap(), 0.0);
        let before = p.knowledge.forward_count();
        let t = serve_request(0, uid, hist, 7.0, &repo, &models, &sc).unwrap();
        assert_eq!(p.knowledge.forward_count(), before);
        assert_eq!((t.lookup_count, t.fusion_count, t.llm_forward_count), (1, 1, 0));
        assert_eq!((t.knowledge_version_used, t.staleness_ms, t.cold_start), (1, 7.0, false));
        let want: Vec<String> = off.ranked.iter().map(|&i| p.catalog.item_ids[i].clone()).collect();
        assert_eq!(t.top_k, want);
    }
}

#[test]
fn cold_start_uses_the_default_entry_or_bypasses_fusion() {
    let (cfg, p, policy) = smoke();
    let models = ServingModels::new(&policy, p.env(), &p.trie, &p.catalog.item_ids);
    let repo = KnowledgeRepository::new(models.default_matrix().unwrap());
    let hist = &p.world.interactions[0][..2];
    let t = serve_request(0, "stranger", hist, 1.0, &repo, &models, &cfg.serving).unwrap();
    assert!(t.cold_start);
    assert_eq!((t.knowledge_version_used, t.fusion_count, t.llm_forward_count), (0, 1, 0));
    let bypass = ServingConfig { cold_start: ColdStart::Bypass, ..cfg.serving.clone() };
    let t = serve_request(0, "stranger", hist, 1.0, &repo, &models, &bypass).unwrap();
    assert_eq!((t.fusion_count, t.llm_forward_count), (0, 0));
}

#[test]
fn scenarios_are_deterministic_and_never_refresh_without_a_period() {
    let (cfg, p, policy) = smoke();
    let models = ServingModels::new(&policy, p.env(), &p.trie, &p.catalog.item_ids);
    let users = sim_users(&p.world, 0.2, cfg.seed).unwrap();
    let ids: Vec<String> = users.iter().map(|u| u.user_id.clone()).collect();
    let sc = ServingConfig { requests: 60, ..cfg.serving.clone() };
    let workload = generate_workload(&ids, sc.requests, sc.mean_interarrival_ms, cfg.seed);
    assert!(workload.windows(2).all(|w| w[0].time_ms <= w[1].time_ms));

    let a = run_scenario(&workload, &users, &models, &sc, cfg.seed).unwrap();
    let b = run_scenario(&workload, &users, &models, &sc, cfg.seed).unwrap();
    assert_eq!(a.traces, b.traces);
    assert_eq!(a.summary.trace_checksum, b.summary.trace_checksum);
    assert_eq!(a.traces.len(), 60);
    assert_eq!(a.summary.online_llm_forwards, 0);

    let never = ServingConfig { refresh_period_ms: None, ..sc.clone() };
    let r = run_scenario(&workload, &users, &models, &never, cfg.seed).unwrap();
    assert_eq!(r.summary.refresh_batches, 0);
    assert!(r.traces.iter().all(|t| t.knowledge_version_used <= 1));
    let known = users.iter().filter(|u| u.known).count();
    assert_eq!(r.publishes.len(), known);

    let mut shuffled = workload.clone();
    shuffled.reverse();
    assert!(matches!(run_scenario(&shuffled, &users, &models, &sc, cfg.seed), Err(LwgrError::Config(_))));
}

#[test]
fn sim_users_hold_back_the_last_two_items() {
    let (cfg, p, _) = smoke();
    let users = sim_users(&p.world, 0.0, cfg.seed).unwrap();
    for (u, seq) in users.iter().zip(&p.world.interactions) {
        assert!(u.known);
        assert_eq!(u.upcoming.len(), 2);
        assert_eq!([u.history.clone(), u.upcoming.clone()].concat(), *seq);
    }
    assert!(matches!(sim_users(&p.world, 1.5, 0), Err(LwgrError::Config(_))));
}

#[test]
fn workload_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ids = vec!["a".to_string(), "b".to_string()];
    let w = generate_workload(&ids, 25, 12.5, 3);
    assert_eq!(w, generate_workload(&ids, 25, 12.5, 3));
    let p = dir.path().join("workload.csv");
    write_workload(&p, &w).unwrap();
    assert_eq!(read_workload(&p).unwrap(), w);
    assert!(matches!(read_workload(&dir.path().join("none.csv")), Err(LwgrError::MissingArtifact(_))));
}
