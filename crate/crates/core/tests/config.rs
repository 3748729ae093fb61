use lwgr::config::RunConfig;
use lwgr::LwgrError;

const SMOKE: &str = include_str!("../../../configs/smoke.toml");

fn over(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn unknown_keys_are_rejected() {
    for text in ["colour = 1", "[train]\nstepz = 3", "[world]\nnum_itemz = 5"] {
        assert!(matches!(RunConfig::from_toml(text, &[]), Err(LwgrError::Config(_))), "{text}");
    }
    let err = RunConfig::from_toml("", &over(&["train.nope=1"])).unwrap_err();
    assert!(matches!(err, LwgrError::Config(_)));
}

#[test]
fn overrides_parse_typed_values() {
    let cfg = RunConfig::from_toml(SMOKE, &over(&["train.lr=0.5", "seed=11", "ablation.beta_grid=[0.2, 0.4]", "train.dual.beta=0.3"])).unwrap();
    assert_eq!(cfg.train.lr, 0.5);
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.ablation.beta_grid, vec![0.2, 0.4]);
    assert_eq!(cfg.train.dual.beta, Some(0.3));
    for bad in ["train.lr", "train..lr=1", "seed.x=1"] {
        assert!(matches!(RunConfig::from_toml(SMOKE, &over(&[bad])), Err(LwgrError::Config(_))), "{bad}");
    }
}

#[test]
fn hash_ignores_key_order_and_tracks_values() {
    let a = RunConfig::from_toml("seed = 1\n[train]\nsteps = 5\nbatch = 2\n", &[]).unwrap();
    let b = RunConfig::from_toml("[train]\nbatch = 2\nsteps = 5\n\n[eval]\n", &over(&["seed=1"])).unwrap();
    assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
    let c = RunConfig::from_toml("seed = 1\n[train]\nsteps = 6\nbatch = 2\n", &[]).unwrap();
    assert_ne!(a.config_hash().unwrap(), c.config_hash().unwrap());
    let dir = a.run_dir(std::path::Path::new("runs")).unwrap();
    let name = dir.file_name().unwrap().to_str().unwrap();
    assert!(name.ends_with("-seed1") && name.len() == 12 + "-seed1".len());
}

#[test]
fn toml_round_trip_and_missing_file() {
    let cfg = RunConfig::from_toml(SMOKE, &[]).unwrap();
    let back = RunConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
    assert_eq!(back, cfg);
    let err = RunConfig::load(std::path::Path::new("/nonexistent.toml"), &[]).unwrap_err();
    assert!(matches!(err, LwgrError::MissingArtifact(_)));
}

#[test]
fn shipped_configs_parse() {
    for text in [SMOKE, include_str!("../../../configs/desk.toml"), include_str!("../../../configs/pilot.toml")] {
        RunConfig::from_toml(text, &[]).unwrap().validate().unwrap();
    }
}
