//! Command-line driver: one verb per pipeline stage. Every stage reads and
//! writes artifacts inside the run directory named by the configuration
//! hash and seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use lwgr::config::RunConfig;
use lwgr::constrained_trainer::{grad_check_objective, train_policy, DualState};
use lwgr::datagen::{generate_world, SyntheticWorld};
use lwgr::eval::{summarize, EvalReport};
use lwgr::experiments::{build_policy, evaluate_policy, evaluate_reference, prepare_with, pretrain_reference, run_ablation, sweep_k, Prepared};
use lwgr::gr_backbone::GrModel;
use lwgr::item_tokenizer::{tokenize_catalog, SidCatalog};
use lwgr::knowledge_source::{KnowledgeBackend, KnowledgeModel};
use lwgr::numerics::GradCheckOptions;
use lwgr::policy::Policy;
use lwgr::serving::{generate_workload, read_workload, run_scenario, sim_users, write_workload, ServingModels};
use lwgr::{LwgrError, Result};

const WORLD: &str = "world.jsonl";
const SIDS: &str = "sids.json";
const SIDS_CSV: &str = "sids.csv";
const KNOWLEDGE: &str = "knowledge.json";
const LM_REPORT: &str = "lm_report.json";
const REFERENCE: &str = "reference.json";
const REFERENCE_LOSS: &str = "reference_loss.csv";
const POLICY: &str = "policy.json";
const TRAIN_LOG: &str = "train_log.csv";
const METRICS: &str = "metrics.csv";
const METRICS_REFERENCE: &str = "metrics_reference.csv";
const ABLATION: &str = "ablation.csv";
const ABLATION_META: &str = "ablation.json";
const SWEEP: &str = "sweep_k.csv";
const WORKLOAD: &str = "workload.csv";
const TRACES: &str = "traces.jsonl";
const SERVING_SUMMARY: &str = "serving_summary.csv";
const GRAD_CHECK: &str = "grad_check.json";

#[derive(Parser)]
#[command(name = "lwgr", version, about = "Knowledge-fused generative retrieval over semantic IDs")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Dotted override such as `train.steps=50`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base directory for run directories.
    #[arg(long, env = "LWGR_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the synthetic world.
    GenData(Common),
    /// Fit item codebooks and assign semantic IDs.
    FitSids(Common),
    /// Pretrain (or seed) the knowledge model.
    PretrainLm(Common),
    /// Train the knowledge-free reference recommender.
    PretrainReference(Common),
    /// Train the configured variant against the reference.
    Train(Common),
    /// Evaluate the trained policy (or the reference) on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate the reference model instead of the policy.
        #[arg(long)]
        reference: bool,
    },
    /// Train and evaluate every ablation variant.
    Ablate(Common),
    /// Train the full model once per codebook count.
    SweepK(Common),
    /// Simulate hybrid serving of the trained policy.
    ServeSim {
        #[command(flatten)]
        common: Common,
        /// Arrival CSV (`time_ms,user_id`); generated when absent.
        #[arg(long)]
        workload: Option<PathBuf>,
    },
    /// Finite-difference check of the full training objective.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

impl Verb {
    fn common(&self) -> &Common {
        match self {
            Verb::GenData(c)
            | Verb::FitSids(c)
            | Verb::PretrainLm(c)
            | Verb::PretrainReference(c)
            | Verb::Train(c)
            | Verb::Ablate(c)
            | Verb::SweepK(c) => c,
            Verb::Eval { common, .. } | Verb::ServeSim { common, .. } | Verb::GradCheck { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Verb::GenData(_) => "gen-data",
            Verb::FitSids(_) => "fit-sids",
            Verb::PretrainLm(_) => "pretrain-lm",
            Verb::PretrainReference(_) => "pretrain-reference",
            Verb::Train(_) => "train",
            Verb::Eval { .. } => "eval",
            Verb::Ablate(_) => "ablate",
            Verb::SweepK(_) => "sweep-k",
            Verb::ServeSim { .. } => "serve-sim",
            Verb::GradCheck { .. } => "grad-check",
        }
    }
}

/// Resolved configuration and the run directory it maps to.
struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    outputs: Vec<&'static str>,
}

impl Run {
    fn open(c: &Common) -> Result<Self> {
        let cfg = RunConfig::load(&c.config, &c.overrides)?;
        let dir = cfg.run_dir(&c.out_dir)?;
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        Ok(Self {
            cfg,
            dir,
            outputs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an input artifact, which must exist.
    fn input(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(LwgrError::MissingArtifact(p))
        }
    }

    fn output(&mut self, name: &'static str) -> PathBuf {
        self.outputs.push(name);
        self.path(name)
    }

    fn world(&self) -> Result<SyntheticWorld> {
        SyntheticWorld::load(&self.input(WORLD)?)
    }

    fn prepared(&self) -> Result<Prepared<f64>> {
        let world = self.world()?;
        let catalog = SidCatalog::load(&self.input(SIDS)?)?;
        let knowledge = KnowledgeModel::load(&self.input(KNOWLEDGE)?)?;
        prepare_with(&self.cfg, world, catalog, Some(knowledge))
    }

    fn reference(&self) -> Result<GrModel<f64>> {
        GrModel::load(&self.input(REFERENCE)?)
    }

    fn policy(&self, p: &Prepared<f64>) -> Result<Policy<f64>> {
        let c = &self.cfg;
        let mut policy = Policy::new(
            c.variant,
            c.strategy,
            &c.backbone,
            &p.catalog.vocab_sizes(),
            &c.soft,
            &c.fusion,
            &c.lora,
            &p.knowledge,
            c.seed,
        )?;
        policy.load_params(&self.input(POLICY)?)?;
        Ok(policy)
    }

    /// `manifest-<verb>.json`: SHA-256 of every file the verb wrote.
    fn finish(&self, verb: &str) -> Result<()> {
        let mut m = serde_json::Map::new();
        for name in &self.outputs {
            let bytes = std::fs::read(self.path(name))?;
            m.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)).into());
        }
        let path = self.path(&format!("manifest-{verb}.json"));
        std::fs::write(path, serde_json::to_vec_pretty(&serde_json::Value::Object(m))?)?;
        println!("{verb}: wrote {} file(s) to {}", self.outputs.len(), self.dir.display());
        Ok(())
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn file_label(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn execute(verb: &Verb) -> Result<()> {
    let mut run = Run::open(verb.common())?;
    match verb {
        Verb::GenData(_) => {
            let world = generate_world(&run.cfg.world, run.cfg.seed)?;
            world.save(&run.output(WORLD))?;
        }
        Verb::FitSids(_) => {
            let world = run.world()?;
            let t = &run.cfg.tokenizer;
            let (_, catalog) = tokenize_catalog(&world.items, t.levels, t.codewords, run.cfg.seed)?;
            catalog.save(&run.output(SIDS))?;
            catalog.write_csv(&run.output(SIDS_CSV))?;
        }
        Verb::PretrainLm(_) => {
            let cfg = run.cfg.clone();
            let model = match cfg.knowledge_backend {
                KnowledgeBackend::FrozenToyLm => {
                    let world = run.world()?;
                    let (m, report) = KnowledgeModel::<f64>::pretrain(&cfg.lm, &world.text_corpus(), &cfg.lm_pretrain, cfg.seed)?;
                    write_json(&run.output(LM_REPORT), &report)?;
                    m
                }
                KnowledgeBackend::DeterministicOracle => KnowledgeModel::oracle(&cfg.lm, cfg.seed)?,
            };
            model.save(&run.output(KNOWLEDGE))?;
        }
        Verb::PretrainReference(_) => {
            let p = run.prepared()?;
            let (model, losses) = pretrain_reference(&run.cfg, &p)?;
            model.save(&run.output(REFERENCE))?;
            let mut w = csv::Writer::from_path(run.output(REFERENCE_LOSS))?;
            w.write_record(["step", "loss"])?;
            for (i, l) in losses.iter().enumerate() {
                w.write_record([i.to_string(), l.to_string()])?;
            }
            w.flush()?;
        }
        Verb::Train(_) => {
            let p = run.prepared()?;
            let reference = run.reference()?;
            let mut policy = build_policy(&run.cfg, &p, &reference, run.cfg.variant)?;
            let log_path = run.output(TRAIN_LOG);
            let out = train_policy(&mut policy, &reference, p.env(), &p.dataset(), &run.cfg.train, run.cfg.seed, Some(&log_path))?;
            policy.save(&run.output(POLICY))?;
            println!(
                "train: final lambda {:.4}, last-100 mean constraint {:.3e}",
                out.dual.lambda,
                out.log.tail_constraint(100)
            );
        }
        Verb::Eval { reference, .. } => {
            let p = run.prepared()?;
            let test = p.test_samples(&run.cfg.eval);
            let (label, lists) = if *reference {
                ("reference".to_string(), evaluate_reference(&run.cfg, &p, &run.reference()?, &test)?)
            } else {
                let policy = run.policy(&p)?;
                (run.cfg.variant.label().to_string(), evaluate_policy(&run.cfg, &p, &policy, &test)?)
            };
            let report = EvalReport {
                config_hash: run.cfg.config_hash()?,
                rows: summarize(&label, run.cfg.seed, &lists, &p.cohort_of, &run.cfg.eval.ks)?,
                failures: Vec::new(),
            };
            report.write_csv(&run.output(if *reference { METRICS_REFERENCE } else { METRICS }))?;
        }
        Verb::Ablate(_) => {
            let p = run.prepared()?;
            let res = run_ablation(&run.cfg, &p, &run.reference()?)?;
            res.report.write_csv(&run.output(ABLATION))?;
            std::fs::create_dir_all(run.path("ablation_logs"))?;
            for (label, log) in &res.logs {
                log.write_csv(&run.path("ablation_logs").join(format!("{}.csv", file_label(label))))?;
            }
            let meta = serde_json::json!({
                "config_hash": res.report.config_hash,
                "chosen_beta": res.chosen_beta,
                "failures": res.report.failures,
            });
            write_json(&run.output(ABLATION_META), &meta)?;
            for (label, e) in &res.report.failures {
                eprintln!("ablate: {label} failed: {e}");
            }
        }
        Verb::SweepK(_) => {
            let p = run.prepared()?;
            let (report, _) = sweep_k(&run.cfg, &p, &run.reference()?)?;
            report.write_csv(&run.output(SWEEP))?;
        }
        Verb::ServeSim { workload, .. } => {
            let p = run.prepared()?;
            let policy = run.policy(&p)?;
            let sc = run.cfg.serving.clone();
            let seed = run.cfg.seed;
            let users = sim_users(&p.world, sc.new_user_fraction, seed)?;
            let arrivals = match workload {
                Some(path) => read_workload(path)?,
                None => {
                    let ids: Vec<String> = users.iter().map(|u| u.user_id.clone()).collect();
                    generate_workload(&ids, sc.requests, sc.mean_interarrival_ms, seed)
                }
            };
            write_workload(&run.output(WORKLOAD), &arrivals)?;
            let models = ServingModels::new(&policy, p.env(), &p.trie, &p.catalog.item_ids);
            let res = run_scenario(&arrivals, &users, &models, &sc, seed)?;
            res.write_traces(&run.output(TRACES))?;
            res.summary.write_csv(&run.output(SERVING_SUMMARY))?;
        }
        Verb::GradCheck { seeds, tolerance, .. } => {
            let p = run.prepared()?;
            let c = run.cfg.clone();
            let data = p.dataset();
            let n = p.train_samples.len();
            let mut worst = 0.0f64;
            let mut per_seed = Vec::new();
            for seed in 0..*seeds {
                let mut policy = Policy::new(
                    c.variant,
                    c.strategy,
                    &c.backbone,
                    &p.catalog.vocab_sizes(),
                    &c.soft,
                    &c.fusion,
                    &c.lora,
                    &p.knowledge,
                    seed,
                )?;
                let pick = |k: u64| p.train_samples[(seed.wrapping_mul(2654435761).wrapping_add(k * 40503) % n as u64) as usize];
                let batch = [pick(0), pick(1)];
                // scores are negative, so a zero reference keeps the hinge active
                let s_ref = [0.0, 0.0];
                let dual = DualState::new(&c.train.dual)?;
                let opts = GradCheckOptions {
                    abs_floor: 1e-5,
                    max_coords_per_tensor: Some(8),
                    seed,
                    ..GradCheckOptions::default()
                };
                let rep = grad_check_objective(&mut policy, p.env(), &data, &batch, &s_ref, &dual, &opts)?;
                worst = worst.max(rep.max_rel_error);
                per_seed.push(serde_json::json!({
                    "seed": seed,
                    "max_rel_error": rep.max_rel_error,
                    "coords": rep.coords_checked,
                    "worst": rep.worst,
                }));
            }
            let pass = worst < *tolerance;
            write_json(
                &run.output(GRAD_CHECK),
                &serde_json::json!({ "pass": pass, "tolerance": tolerance, "max_rel_error": worst, "seeds": per_seed }),
            )?;
            println!("grad-check: max relative error {worst:.3e} (tolerance {tolerance:.0e})");
            if !pass {
                run.finish(verb.name())?;
                return Err(LwgrError::Numeric {
                    op: "grad_check",
                    detail: format!("max relative error {worst:.3e} exceeds {tolerance:.0e}"),
                });
            }
        }
    }
    run.finish(verb.name())
}

fn exit_code(e: &LwgrError) -> u8 {
    match e {
        LwgrError::Config(_) => 2,
        LwgrError::MissingArtifact(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut rec = serde_json::json!({
                "verb": cli.verb.name(),
                "kind": e.kind(),
                "message": e.to_string(),
            });
            if let LwgrError::MissingArtifact(p) = &e {
                rec["path"] = p.display().to_string().into();
            }
            eprintln!("{}", serde_json::json!({ "error": rec }));
            ExitCode::from(exit_code(&e))
        }
    }
}
