//! End-to-end pipeline wiring: world → semantic IDs → knowledge model →
//! reference → policy, plus the ablation and codebook-count harnesses.

use crate::config::RunConfig;
use crate::constrained_trainer::{train_policy, train_reference, Dataset, TrainLog, TrainOutcome};
use crate::datagen::{generate_world, leave_one_out_split, Sample, Split, SyntheticWorld};
use crate::error::Result;
use crate::eval::{rank_policy, rank_reference, summarize, EvalConfig, EvalReport, EvalRow, RankedList};
use crate::gr_backbone::GrModel;
use crate::item_tokenizer::{tokenize_catalog, PrefixTrie, SidCatalog};
use crate::knowledge_source::{KnowledgeBackend, KnowledgeModel, PretrainReport};
use crate::policy::{Policy, PolicyEnv, Variant};
use crate::scalar::Scalar;

/// Everything derived from the world before any recommender is trained.
pub struct Prepared<T> {
    pub world: SyntheticWorld,
    pub catalog: SidCatalog,
    pub item_tokens: Vec<Vec<usize>>,
    pub trie: PrefixTrie,
    pub split: Split,
    pub train_samples: Vec<Sample>,
    pub knowledge: KnowledgeModel<T>,
    pub lm_report: Option<PretrainReport>,
    pub text_table: Vec<Vec<T>>,
    pub cohort_of: Vec<String>,
}

impl<T: Scalar> Prepared<T> {
    pub fn env(&self) -> PolicyEnv<'_, T> {
        PolicyEnv {
            item_tokens: &self.item_tokens,
            text_table: &self.text_table,
            knowledge: &self.knowledge,
        }
    }

    pub fn dataset(&self) -> Dataset<'_> {
        Dataset {
            item_tokens: &self.item_tokens,
            sequences: &self.world.interactions,
            samples: &self.train_samples,
        }
    }

    /// At most `max_users` samples, evenly spaced over the split so every
    /// cohort is represented.
    fn limit(&self, s: Vec<Sample>, cfg: &EvalConfig) -> Vec<Sample> {
        match cfg.max_users {
            Some(m) if m < s.len() => (0..m).map(|i| s[i * s.len() / m]).collect(),
            _ => s,
        }
    }

    pub fn test_samples(&self, cfg: &EvalConfig) -> Vec<Sample> {
        self.limit(self.split.test_samples(&self.world), cfg)
    }

    pub fn validation_samples(&self, cfg: &EvalConfig) -> Vec<Sample> {
        self.limit(self.split.validation_samples(&self.world), cfg)
    }
}

/// Builds the catalog and knowledge model for `world`.
pub fn prepare_world<T: Scalar>(cfg: &RunConfig, world: SyntheticWorld, knowledge: Option<KnowledgeModel<T>>) -> Result<Prepared<T>> {
    let (_, catalog) = tokenize_catalog(&world.items, cfg.tokenizer.levels, cfg.tokenizer.codewords, cfg.seed)?;
    prepare_with(cfg, world, catalog, knowledge)
}

/// As [`prepare_world`] with an existing semantic-ID catalog.
pub fn prepare_with<T: Scalar>(
    cfg: &RunConfig,
    world: SyntheticWorld,
    catalog: SidCatalog,
    knowledge: Option<KnowledgeModel<T>>,
) -> Result<Prepared<T>> {
    let item_tokens = catalog.sequences();
    let trie = catalog.trie()?;
    let split = leave_one_out_split(&world);
    let train_samples = split.train_samples(&world);
    let (knowledge, lm_report) = match knowledge {
        Some(k) => (k, None),
        None => match cfg.knowledge_backend {
            KnowledgeBackend::FrozenToyLm => {
                let (k, r) = KnowledgeModel::pretrain(&cfg.lm, &world.text_corpus(), &cfg.lm_pretrain, cfg.seed)?;
                (k, Some(r))
            }
            KnowledgeBackend::DeterministicOracle => (KnowledgeModel::oracle(&cfg.lm, cfg.seed)?, None),
        },
    };
    let texts: Vec<Vec<usize>> = world.items.iter().map(|i| i.text_tokens.clone()).collect();
    let text_table = knowledge.text_table(&texts)?;
    let names = world.cohort_names();
    let cohort_of = world.users.iter().map(|u| names[u.cohort].clone()).collect();
    Ok(Prepared {
        world,
        catalog,
        item_tokens,
        trie,
        split,
        train_samples,
        knowledge,
        lm_report,
        text_table,
        cohort_of,
    })
}

/// Generates the configured world and prepares it.
pub fn prepare<T: Scalar>(cfg: &RunConfig) -> Result<Prepared<T>> {
    let world = generate_world(&cfg.world, cfg.seed)?;
    prepare_world(cfg, world, None)
}

/// Trains the knowledge-free reference on the training split.
pub fn pretrain_reference<T: Scalar>(cfg: &RunConfig, p: &Prepared<T>) -> Result<(GrModel<T>, Vec<f64>)> {
    train_reference(&cfg.backbone, &p.catalog.vocab_sizes(), &p.dataset(), &cfg.reference, cfg.seed)
}

/// A policy of `variant` warm-started from `reference`.
pub fn build_policy<T: Scalar>(cfg: &RunConfig, p: &Prepared<T>, reference: &GrModel<T>, variant: Variant) -> Result<Policy<T>> {
    let mut policy = Policy::new(
        variant,
        cfg.strategy,
        &cfg.backbone,
        &p.catalog.vocab_sizes(),
        &cfg.soft,
        &cfg.fusion,
        &cfg.lora,
        &p.knowledge,
        cfg.seed,
    )?;
    policy.warm_start(reference);
    Ok(policy)
}

/// A trained policy with its log and test metrics.
pub struct VariantRun<T: Scalar> {
    pub label: String,
    pub policy: Policy<T>,
    pub outcome: TrainOutcome,
    pub rows: Vec<EvalRow>,
    pub lists: Vec<RankedList>,
}

/// Builds, trains and evaluates one policy on `samples`.
pub fn run_variant<T: Scalar>(
    cfg: &RunConfig,
    p: &Prepared<T>,
    reference: &GrModel<T>,
    variant: Variant,
    label: &str,
    samples: &[Sample],
) -> Result<VariantRun<T>> {
    let mut policy = build_policy(cfg, p, reference, variant)?;
    let outcome = train_policy(&mut policy, reference, p.env(), &p.dataset(), &cfg.train, cfg.seed, None)?;
    let lists = evaluate_policy(cfg, p, &policy, samples)?;
    let rows = summarize(label, cfg.seed, &lists, &p.cohort_of, &cfg.eval.ks)?;
    Ok(VariantRun {
        label: label.to_string(),
        policy,
        outcome,
        rows,
        lists,
    })
}

pub fn evaluate_policy<T: Scalar>(cfg: &RunConfig, p: &Prepared<T>, policy: &Policy<T>, samples: &[Sample]) -> Result<Vec<RankedList>> {
    rank_policy(policy, p.env(), &p.world.interactions, samples, &p.trie, &p.catalog.item_ids, &cfg.eval)
}

pub fn evaluate_reference<T: Scalar>(cfg: &RunConfig, p: &Prepared<T>, reference: &GrModel<T>, samples: &[Sample]) -> Result<Vec<RankedList>> {
    rank_reference(reference, &p.item_tokens, &p.world.interactions, samples, &p.trie, &p.catalog.item_ids, &cfg.eval)
}

/// Label of a fixed-β run.
pub fn beta_label(beta: f64) -> String {
    format!("fixed_beta@{beta}")
}

/// Outputs of [`run_ablation`].
#[derive(Debug, Clone, Default)]
pub struct AblationResult {
    pub report: EvalReport,
    /// Training log per run label.
    pub logs: Vec<(String, TrainLog)>,
    /// β picked for the `fixed_beta` row by validation Recall@k (smallest k).
    pub chosen_beta: Option<f64>,
}

/// Trains every ablation variant from the same seed and data and evaluates
/// them next to the reference. The fixed-β variant runs once per grid value;
/// the row labelled `fixed_beta` repeats the grid value with the best
/// validation recall. A failing variant is recorded and the rest continue.
pub fn run_ablation<T: Scalar>(cfg: &RunConfig, p: &Prepared<T>, reference: &GrModel<T>) -> Result<AblationResult> {
    let test = p.test_samples(&cfg.eval);
    let val = p.validation_samples(&cfg.eval);
    let mut out = AblationResult {
        report: EvalReport {
            config_hash: cfg.config_hash()?,
            ..EvalReport::default()
        },
        ..AblationResult::default()
    };
    let ref_lists = evaluate_reference(cfg, p, reference, &test)?;
    out.report.rows.extend(summarize("reference", cfg.seed, &ref_lists, &p.cohort_of, &cfg.eval.ks)?);
    let k_sel = cfg.eval.ks.iter().copied().min().unwrap_or(5);
    let metric = format!("recall@{k_sel}");
    for variant in Variant::ALL {
        if variant == Variant::FixedBeta {
            let mut best: Option<(f64, f64, Vec<EvalRow>)> = None;
            for &beta in &cfg.ablation.beta_grid {
                let mut c = cfg.clone();
                c.train.dual.beta = Some(beta);
                let label = beta_label(beta);
                match run_variant(&c, p, reference, variant, &label, &test) {
                    Ok(run) => {
                        let vl = evaluate_policy(&c, p, &run.policy, &val)?;
                        let vrows = summarize(&label, c.seed, &vl, &p.cohort_of, &cfg.eval.ks)?;
                        let score = vrows
                            .iter()
                            .find(|r| r.metric == metric && r.cohort == crate::eval::ALL_COHORTS)
                            .map_or(0.0, |r| r.value);
                        if best.as_ref().is_none_or(|b| score > b.1) {
                            best = Some((beta, score, run.rows.clone()));
                        }
                        out.report.rows.extend(run.rows);
                        out.logs.push((label, run.outcome.log));
                    }
                    Err(e) => out.report.failures.push((label, e.to_string())),
                }
            }
            if let Some((beta, _, rows)) = best {
                out.chosen_beta = Some(beta);
                let label = variant.label();
                out.report.rows.extend(rows.into_iter().map(|mut r| {
                    r.variant = label.to_string();
                    r
                }));
                if let Some(log) = out.logs.iter().find(|(l, _)| *l == beta_label(beta)).map(|(_, l)| l.clone()) {
                    out.logs.push((label.to_string(), log));
                }
            }
            continue;
        }
        let label = variant.label();
        match run_variant(cfg, p, reference, variant, label, &test) {
            Ok(run) => {
                out.report.rows.extend(run.rows);
                out.logs.push((label.to_string(), run.outcome.log));
            }
            Err(e) => out.report.failures.push((label.to_string(), e.to_string())),
        }
    }
    Ok(out)
}

/// Label of a codebook-count run.
pub fn k_label(k: usize) -> String {
    format!("k={k}")
}

/// Trains the full method once per codebook count, everything else equal.
pub fn sweep_k<T: Scalar>(cfg: &RunConfig, p: &Prepared<T>, reference: &GrModel<T>) -> Result<(EvalReport, Vec<Vec<RankedList>>)> {
    let test = p.test_samples(&cfg.eval);
    let mut report = EvalReport {
        config_hash: cfg.config_hash()?,
        ..EvalReport::default()
    };
    let mut all_lists = Vec::new();
    for &k in &cfg.sweep.k_values {
        let mut c = cfg.clone();
        c.soft.k = k;
        let run = run_variant(&c, p, reference, Variant::Lwgr, &k_label(k), &test)?;
        report.rows.extend(run.rows);
        all_lists.push(run.lists);
    }
    Ok((report, all_lists))
}
