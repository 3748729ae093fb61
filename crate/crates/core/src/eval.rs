//! Leave-one-out ranking metrics and the evaluation report.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{contract, LwgrError, Result};
use crate::gr_backbone::GrModel;
use crate::item_tokenizer::PrefixTrie;
use crate::policy::{Policy, PolicyEnv};
use crate::scalar::Scalar;

fn check_ranking(op: &'static str, ranked: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        return Err(contract(op, "k must be at least 1"));
    }
    let mut seen = HashSet::with_capacity(ranked.len());
    if let Some(d) = ranked.iter().find(|&&x| !seen.insert(x)) {
        return Err(contract(op, format!("item {d} appears more than once in the ranking")));
    }
    Ok(())
}

/// 1-based rank of `target` within the first `k` entries.
fn rank_within(ranked: &[usize], target: usize, k: usize) -> Option<usize> {
    ranked.iter().take(k).position(|&x| x == target).map(|p| p + 1)
}

/// 1 if `target` is among the first `k` entries, else 0.
pub fn recall_at_k(ranked: &[usize], target: usize, k: usize) -> Result<f64> {
    check_ranking("recall_at_k", ranked, k)?;
    Ok(if rank_within(ranked, target, k).is_some() { 1.0 } else { 0.0 })
}

/// Single-relevant NDCG: `1 / log2(rank + 1)` when the target is within
/// the first `k` entries, else 0.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> Result<f64> {
    check_ranking("ndcg_at_k", ranked, k)?;
    Ok(rank_within(ranked, target, k).map_or(0.0, |r| 1.0 / ((r + 1) as f64).log2()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Beam width of trie-constrained decoding; ranking is over the full
    /// catalog.
    pub beam: usize,
    /// Evaluate only the first this-many users of the split.
    pub max_users: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10],
            beam: 16,
            max_users: None,
        }
    }
}

impl EvalConfig {
    pub fn top(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(10)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(LwgrError::Config("eval.ks must be non-empty and positive".into()));
        }
        if self.beam < self.top() {
            return Err(LwgrError::Config(format!("eval.beam {} is below the largest k {}", self.beam, self.top())));
        }
        Ok(())
    }
}

/// One user's ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user: usize,
    pub target: usize,
    pub ranked: Vec<usize>,
}

/// Rankings from the knowledge-free model.
pub fn rank_reference<T: Scalar>(
    model: &GrModel<T>,
    item_tokens: &[Vec<usize>],
    sequences: &[Vec<usize>],
    samples: &[Sample],
    trie: &PrefixTrie,
    item_ids: &[String],
    cfg: &EvalConfig,
) -> Result<Vec<RankedList>> {
    samples
        .par_iter()
        .map(|s| {
            let hist = &sequences[s.user][..s.end];
            let (mut g, enc, ps) = model.encode_history(item_tokens, hist)?;
            let bos = model.arch.bos(&mut g, ps)?;
            let top = model.arch.generate_topk(&mut g, ps, &enc, bos, trie, item_ids, cfg.top(), cfg.beam)?;
            Ok(RankedList {
                user: s.user,
                target: sequences[s.user][s.end],
                ranked: top.into_iter().map(|(i, _)| i).collect(),
            })
        })
        .collect()
}

/// Rankings from a knowledge-conditioned policy: knowledge is computed once
/// per user from the history, then decoding uses it as serving would.
pub fn rank_policy<T: Scalar>(
    policy: &Policy<T>,
    env: PolicyEnv<'_, T>,
    sequences: &[Vec<usize>],
    samples: &[Sample],
    trie: &PrefixTrie,
    item_ids: &[String],
    cfg: &EvalConfig,
) -> Result<Vec<RankedList>> {
    samples
        .par_iter()
        .map(|s| {
            let hist = &sequences[s.user][..s.end];
            let h_u = policy.compute_knowledge(env, hist)?;
            let top = policy.rank_with_knowledge(env, hist, h_u.as_ref(), trie, item_ids, cfg.top(), cfg.beam)?;
            Ok(RankedList {
                user: s.user,
                target: sequences[s.user][s.end],
                ranked: top.items.into_iter().map(|(i, _)| i).collect(),
            })
        })
        .collect()
}

/// One report cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub metric: String,
    pub value: f64,
    pub cohort: String,
    pub seed: u64,
}

/// Label of the all-users aggregate.
pub const ALL_COHORTS: &str = "all";

/// Mean Recall@k and NDCG@k per cohort and overall.
pub fn summarize(variant: &str, seed: u64, lists: &[RankedList], cohort_of: &[String], ks: &[usize]) -> Result<Vec<EvalRow>> {
    let mut groups: BTreeMap<&str, Vec<&RankedList>> = BTreeMap::new();
    for l in lists {
        let c = cohort_of
            .get(l.user)
            .ok_or_else(|| LwgrError::Lookup(format!("no cohort for user {}", l.user)))?;
        groups.entry(ALL_COHORTS).or_default().push(l);
        groups.entry(c.as_str()).or_default().push(l);
    }
    let mut rows = Vec::new();
    for (cohort, ls) in groups {
        for &k in ks {
            let n = ls.len() as f64;
            let mut r = 0.0;
            let mut nd = 0.0;
            for l in &ls {
                r += recall_at_k(&l.ranked, l.target, k)?;
                nd += ndcg_at_k(&l.ranked, l.target, k)?;
            }
            for (metric, v) in [(format!("recall@{k}"), r / n), (format!("ndcg@{k}"), nd / n)] {
                rows.push(EvalRow {
                    variant: variant.to_string(),
                    metric,
                    value: v,
                    cohort: cohort.to_string(),
                    seed,
                });
            }
        }
    }
    Ok(rows)
}

/// Metrics of one or more variants plus run metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
    /// Variants whose training or evaluation failed, with the error.
    pub failures: Vec<(String, String)>,
}

impl EvalReport {
    pub fn get(&self, variant: &str, metric: &str, cohort: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.metric == metric && r.cohort == cohort)
            .map(|r| r.value)
    }

    pub fn variants(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.variant) {
                v.push(r.variant.clone());
            }
        }
        v
    }

    /// CSV with columns `variant,metric,value,cohort,seed`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LwgrError::MissingArtifact(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<EvalRow>, _>>()?;
        Ok(Self {
            rows,
            ..Self::default()
        })
    }
}
