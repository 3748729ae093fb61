//! Reference pretraining and constrained policy training: the policy
//! minimizes next-item NLL while a Lagrange multiplier keeps its mean token
//! log-probability of the true item close to a frozen reference model.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{contract, numeric, LwgrError, Result};
use crate::gr_backbone::{BackboneConfig, GrModel};
use crate::nn::AdapterDropout;
use crate::numerics::{check_params, clip_grad_norm, FrozenTape, GradCheckOptions, GradCheckReport, Gradients, ParamId, Graph, Optimizer, OptimizerKind, ParamStore, Tensor, Var};
use crate::policy::{Policy, PolicyEnv, Variant};
use crate::scalar::Scalar;
use crate::soft_instruction::usage_entropy;

/// `max(0, s_ref − s_θ − δ)`.
pub fn margin_penalty(s_ref: f64, s_theta: f64, delta: f64) -> f64 {
    (s_ref - s_theta - delta).max(0.0)
}

/// Batch mean of [`margin_penalty`].
pub fn batch_constraint(s_ref: &[f64], s_theta: &[f64], delta: f64) -> Result<f64> {
    if s_ref.is_empty() || s_ref.len() != s_theta.len() {
        return Err(contract("batch_constraint", format!("{} reference vs {} policy scores", s_ref.len(), s_theta.len())));
    }
    let sum: f64 = s_ref.iter().zip(s_theta).map(|(&r, &t)| margin_penalty(r, t, delta)).sum();
    Ok(sum / s_ref.len() as f64)
}

/// `ℒ_rec + λ(C − ε)`.
pub fn lagrangian_loss(loss_rec: f64, c: f64, dual: &DualState) -> f64 {
    loss_rec + dual.lambda * (c - dual.epsilon)
}

/// `ℒ_rec + β·max(0, C − ε)`.
pub fn fixed_beta_loss(loss_rec: f64, c: f64, beta: f64, epsilon: f64) -> f64 {
    loss_rec + beta * (c - epsilon).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualConfig {
    pub lambda0: f64,
    pub eta_lambda: f64,
    pub epsilon: f64,
    pub delta: f64,
    /// Fixed hinge weight of the fixed-β variant.
    pub beta: Option<f64>,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.05,
            eta_lambda: 5e-4,
            epsilon: 1e-4,
            delta: 1e-4,
            beta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: f64,
    pub eta_lambda: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub beta: Option<f64>,
}

impl DualState {
    pub fn new(cfg: &DualConfig) -> Result<Self> {
        if cfg.lambda0 < 0.0 || cfg.epsilon < 0.0 || cfg.delta < 0.0 || cfg.eta_lambda < 0.0 {
            return Err(LwgrError::Config(format!("dual settings must be non-negative: {cfg:?}")));
        }
        if cfg.beta.is_some_and(|b| b < 0.0) {
            return Err(LwgrError::Config("beta must be non-negative".into()));
        }
        Ok(Self {
            lambda: cfg.lambda0,
            eta_lambda: cfg.eta_lambda,
            epsilon: cfg.epsilon,
            delta: cfg.delta,
            beta: cfg.beta,
        })
    }
}

/// `λ ← max(0, λ + η_λ(C − ε))`. Returns the new λ.
pub fn dual_step(dual: &mut DualState, c: f64) -> f64 {
    dual.lambda = (dual.lambda + dual.eta_lambda * (c - dual.epsilon)).max(0.0);
    dual.lambda
}

/// Final iterate of the toy primal–dual solver.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyOutcome {
    pub x: f64,
    pub lambda: f64,
    pub constraint: f64,
    pub steps: usize,
}

/// Primal–dual iteration on `min (x − target)² s.t. max(0, 1 − x) ≤ ε`,
/// with gradients taken through the autodiff graph.
pub fn solve_toy(target: f64, x0: f64, dual: &DualConfig, eta_x: f64, steps: usize) -> Result<ToyOutcome> {
    let mut state = DualState::new(dual)?;
    let mut x = x0;
    let mut c = 0.0;
    for _ in 0..steps {
        let mut g: Graph<'_, f64> = Graph::new();
        let xv = g.leaf(Tensor::scalar(x).with_grad())?;
        let diff = g.add_scalar(xv, -target)?;
        let obj = g.mul(diff, diff)?;
        let neg = g.scale(xv, -1.0)?;
        let slack = g.add_scalar(neg, 1.0)?;
        let hinge = g.max_const(slack, 0.0)?;
        let shifted = g.add_scalar(hinge, -state.epsilon)?;
        let pen = g.scale(shifted, state.lambda)?;
        let total = g.add(obj, pen)?;
        let mut grads = Gradients::new();
        g.backward(total, &mut grads)?;
        c = g.scalar(hinge);
        let gx = grads.leaf(xv).map_or(0.0, |v| v[0]);
        x -= eta_x * gx;
        dual_step(&mut state, c);
    }
    Ok(ToyOutcome {
        x,
        lambda: state.lambda,
        constraint: c,
        steps,
    })
}

/// Training examples over a catalog of tokenized items.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'d> {
    /// Full SID token sequence of every catalog item.
    pub item_tokens: &'d [Vec<usize>],
    /// Chronological item indices per user.
    pub sequences: &'d [Vec<usize>],
    pub samples: &'d [Sample],
}

impl<'d> Dataset<'d> {
    /// `(history, target tokens)` of a sample.
    pub fn example(&self, s: Sample) -> Result<(&'d [usize], &'d [usize])> {
        let seq = self
            .sequences
            .get(s.user)
            .ok_or_else(|| LwgrError::Lookup(format!("no user {}", s.user)))?;
        if s.end == 0 || s.end >= seq.len() {
            return Err(contract("dataset", format!("sample end {} outside 1..{}", s.end, seq.len())));
        }
        let target = self
            .item_tokens
            .get(seq[s.end])
            .ok_or_else(|| LwgrError::Lookup(format!("no catalog item {}", seq[s.end])))?;
        Ok((&seq[..s.end], target))
    }

    fn draw(&self, rng: &mut ChaCha8Rng, batch: usize) -> Result<Vec<Sample>> {
        if self.samples.is_empty() {
            return Err(contract("train", "no training samples"));
        }
        Ok((0..batch).map(|_| self.samples[rng.gen_range(0..self.samples.len())]).collect())
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 32,
            lr: 3e-3,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// Trains the knowledge-free recommender on `data` and freezes it.
/// Returns the model and the per-step mean NLL.
pub fn train_reference<T: Scalar>(
    cfg: &BackboneConfig,
    vocab: &[usize],
    data: &Dataset<'_>,
    rc: &ReferenceConfig,
    seed: u64,
) -> Result<(GrModel<T>, Vec<f64>)> {
    if rc.batch == 0 || rc.lr <= 0.0 {
        return Err(LwgrError::Config("reference training needs batch >= 1 and lr > 0".into()));
    }
    let mut model = GrModel::<T>::new(cfg, vocab, seed)?;
    let mut opt = Optimizer::new(rc.optimizer, rc.lr, rc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1, 0));
    let mut losses = Vec::with_capacity(rc.steps);
    let w = T::lit(1.0 / rc.batch as f64);
    for _ in 0..rc.steps {
        let batch = data.draw(&mut rng, rc.batch)?;
        let results: Vec<Result<(f64, Gradients<T>)>> = batch
            .par_iter()
            .map(|&smp| {
                let (hist, target) = data.example(smp)?;
                let mut g = Graph::new();
                let s = g.register(&model.store);
                let enc = model.arch.encode(&mut g, s, data.item_tokens, hist, false)?;
                let bos = model.arch.bos(&mut g, s)?;
                let nll = model.arch.nll_loss(&mut g, s, &enc, bos, target)?;
                let mut grads = Gradients::new();
                g.backward_seeded(&[(nll, w)], &mut grads)?;
                Ok((g.scalar(nll).as_f64(), grads))
            })
            .collect();
        let mut grads = Gradients::new();
        let mut total = 0.0;
        for r in results {
            let (l, gr) = r?;
            total += l;
            grads.merge(&gr);
        }
        check_grads(&grads, &model.store)?;
        clip_grad_norm(&mut grads, &model.store, rc.clip_norm);
        opt.step(&mut model.store, &grads)?;
        losses.push(total / rc.batch as f64);
    }
    model.store.freeze_all();
    Ok((model, losses))
}

fn check_grads<T: Scalar>(grads: &Gradients<T>, store: &ParamStore<T>) -> Result<()> {
    if grads.all_finite() {
        return Ok(());
    }
    let bad: Vec<String> = store
        .ids()
        .filter(|&id| grads.param(store, id).is_some_and(|g| g.iter().any(|x| !x.is_finite())))
        .map(|id| store.name(id).to_string())
        .collect();
    Err(numeric("primal_step", format!("non-finite gradient in {}", bad.join(", "))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub dual: DualConfig,
    /// Abort when the total loss exceeds this multiple of the first step's.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 32,
            lr: 1e-4,
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.0,
            clip_norm: 1.0,
            dual: DualConfig::default(),
            divergence_factor: 1e3,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_rec: f64,
    pub constraint: f64,
    pub lambda: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
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
        let rows = r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Mean constraint over the last `n` steps.
    pub fn tail_constraint(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|r| r.constraint).sum::<f64>() / tail.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub dual: DualState,
    pub reference_checksum: (String, String),
    pub knowledge_checksum: (String, String),
}

/// How strongly the constraint term enters the loss for a variant, and
/// whether λ is learned.
fn hinge_weight(variant: Variant, dual: &DualState, c: f64) -> Result<f64> {
    Ok(match variant {
        Variant::WoCons => 0.0,
        Variant::FixedBeta => {
            let beta = dual
                .beta
                .ok_or_else(|| LwgrError::Config("fixed_beta variant needs train.dual.beta".into()))?;
            if c > dual.epsilon {
                beta
            } else {
                0.0
            }
        }
        _ => dual.lambda,
    })
}

/// λ as reported in the log: the learned multiplier, β for the fixed-β
/// variant, and 0 for the unconstrained one.
fn logged_lambda(variant: Variant, dual: &DualState) -> f64 {
    match variant {
        Variant::WoCons => 0.0,
        Variant::FixedBeta => dual.beta.unwrap_or(0.0),
        _ => dual.lambda,
    }
}

/// Mean token log-probability of each sample's target under the reference.
pub fn reference_scores<T: Scalar>(reference: &GrModel<T>, data: &Dataset<'_>, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|&smp| {
            let (hist, target) = data.example(smp)?;
            Ok(reference.score(data.item_tokens, hist, target)?.as_f64())
        })
        .collect()
}

struct Pass<'a, T> {
    g: Graph<'a, T>,
    nll: Var,
    dists: Vec<Var>,
}

fn sample_pass<'a, T: Scalar>(
    policy: &'a Policy<T>,
    env: PolicyEnv<'a, T>,
    data: &Dataset<'_>,
    smp: Sample,
    dropout_seed: Option<u64>,
) -> Result<Pass<'a, T>> {
    let (hist, target) = data.example(smp)?;
    let mut g = Graph::new();
    let ps = g.register(&policy.store);
    let ks = g.register(&env.knowledge.store);
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let mut dropout = match (&mut rng, policy.lora_dropout > 0.0 && !policy.adapters.is_empty()) {
        (Some(r), true) => Some(AdapterDropout {
            rate: policy.lora_dropout,
            rng: r,
        }),
        _ => None,
    };
    let fwd = policy.forward(&mut g, ps, ks, env, hist, &mut dropout)?;
    let nll = policy.arch.nll_loss(&mut g, ps, &fwd.enc, fwd.start, target)?;
    Ok(Pass {
        g,
        nll,
        dists: fwd.instruction.distributions,
    })
}

/// The complete training objective of one micro-batch as a single scalar
/// node: mean NLL, the constraint term for the policy's variant, and the
/// optional usage-entropy bonus. Used for gradient checking; training
/// computes the same gradient sample by sample.
#[allow(clippy::too_many_arguments)]
pub fn objective_graph<'a, T: Scalar>(
    policy: &Policy<T>,
    store: &'a ParamStore<T>,
    env: PolicyEnv<'a, T>,
    g: &mut Graph<'a, T>,
    data: &Dataset<'_>,
    batch: &[Sample],
    s_ref: &[f64],
    dual: &DualState,
) -> Result<Var> {
    if batch.is_empty() || batch.len() != s_ref.len() {
        return Err(contract("objective", "batch and reference scores must be non-empty and aligned"));
    }
    let ps = g.register(store);
    let ks = g.register(&env.knowledge.store);
    let b = T::lit(batch.len() as f64);
    let l = T::lit(policy.arch.seq_len() as f64);
    let mut nlls = Vec::new();
    let mut hinges = Vec::new();
    let mut dists = Vec::new();
    for (&smp, &r) in batch.iter().zip(s_ref) {
        let (hist, target) = data.example(smp)?;
        let fwd = policy.forward(g, ps, ks, env, hist, &mut None)?;
        let nll = policy.arch.nll_loss(g, ps, &fwd.enc, fwd.start, target)?;
        // s_ref − s_θ − δ = s_ref − δ + nll / L
        let gap = g.scale(nll, T::one() / l)?;
        let gap = g.add_scalar(gap, T::lit(r - dual.delta))?;
        hinges.push(g.max_const(gap, T::zero())?);
        nlls.push(nll);
        dists.push(fwd.instruction.distributions);
    }
    let all = g.concat_rows(&nlls)?;
    let sum = g.sum(all)?;
    let rec = g.scale(sum, T::one() / b)?;
    let all = g.concat_rows(&hinges)?;
    let c = g.mean(all)?;
    let slack = g.add_scalar(c, T::lit(-dual.epsilon))?;
    let mut total = match policy.variant {
        Variant::WoCons => rec,
        Variant::FixedBeta => {
            let beta = dual
                .beta
                .ok_or_else(|| LwgrError::Config("fixed_beta variant needs train.dual.beta".into()))?;
            let active = g.max_const(slack, T::zero())?;
            let pen = g.scale(active, T::lit(beta))?;
            g.add(rec, pen)?
        }
        _ => {
            let pen = g.scale(slack, T::lit(dual.lambda))?;
            g.add(rec, pen)?
        }
    };
    if policy.entropy_weight > 0.0 && dists.first().is_some_and(|d| !d.is_empty()) {
        let ent = usage_entropy(g, &dists)?;
        let bonus = g.scale(ent, T::lit(-policy.entropy_weight))?;
        total = g.add(total, bonus)?;
    }
    Ok(total)
}

/// Gradient, statistics and per-sample scores of one training batch.
pub struct BatchGrad<T> {
    pub grads: Gradients<T>,
    pub loss_rec: f64,
    pub constraint: f64,
    pub loss_total: f64,
    pub s_theta: Vec<f64>,
}

/// Forward every sample on its own graph, then seed each graph's backward
/// with the sample's share of `∂ℒ_total`.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient<T: Scalar>(
    policy: &Policy<T>,
    env: PolicyEnv<'_, T>,
    data: &Dataset<'_>,
    batch: &[Sample],
    s_ref: &[f64],
    dual: &DualState,
    dropout_seeds: Option<&[u64]>,
) -> Result<BatchGrad<T>> {
    if batch.is_empty() || batch.len() != s_ref.len() {
        return Err(contract("batch_gradient", "batch and reference scores must be non-empty and aligned"));
    }
    let passes: Vec<Result<Pass<'_, T>>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, &smp)| sample_pass(policy, env, data, smp, dropout_seeds.map(|s| s[i])))
        .collect();
    let mut passes = passes.into_iter().collect::<Result<Vec<_>>>()?;
    let bsz = batch.len() as f64;
    let l = policy.arch.seq_len() as f64;
    let nlls: Vec<f64> = passes.iter().map(|p| p.g.scalar(p.nll).as_f64()).collect();
    let s_theta: Vec<f64> = nlls.iter().map(|n| -n / l).collect();
    let loss_rec = nlls.iter().sum::<f64>() / bsz;
    let c = batch_constraint(s_ref, &s_theta, dual.delta)?;
    let weight = hinge_weight(policy.variant, dual, c)?;
    let mut loss_total = match policy.variant {
        Variant::WoCons => loss_rec,
        Variant::FixedBeta => fixed_beta_loss(loss_rec, c, dual.beta.unwrap_or(0.0), dual.epsilon),
        _ => lagrangian_loss(loss_rec, c, dual),
    };

    // codeword usage over the batch, for the entropy bonus
    let ew = policy.entropy_weight;
    let k = passes.first().map_or(0, |p| p.dists.len());
    let mut log_mean = Vec::new();
    if ew > 0.0 && k > 0 {
        let mut ent = 0.0;
        for kk in 0..k {
            let v = passes[0].g.cols(passes[0].dists[kk]);
            let mut mean = vec![0.0; v];
            for p in &passes {
                for (m, x) in mean.iter_mut().zip(p.g.value(p.dists[kk])) {
                    *m += x.as_f64() / bsz;
                }
            }
            ent -= mean.iter().map(|&p| p * p.max(1e-12).ln()).sum::<f64>() / k as f64;
            log_mean.push(mean.iter().map(|&p| T::lit(p.max(1e-12).ln())).collect::<Vec<T>>());
        }
        loss_total -= ew * ent;
    }

    let results: Vec<Result<Gradients<T>>> = passes
        .par_iter_mut()
        .zip(s_ref.par_iter().zip(s_theta.par_iter()))
        .map(|(p, (&r, &t))| {
            let active = r - t - dual.delta > 0.0;
            let mut w = 1.0 / bsz;
            if active {
                w += weight / (bsz * l);
            }
            let mut seeds = vec![(p.nll, T::lit(w))];
            for (kk, lm) in log_mean.iter().enumerate() {
                let c = p.g.constant(Tensor::row(lm.clone()))?;
                let prod = p.g.mul(p.dists[kk], c)?;
                let dotp = p.g.sum(prod)?;
                seeds.push((dotp, T::lit(ew / (bsz * k as f64))));
            }
            let mut grads = Gradients::new();
            p.g.backward_seeded(&seeds, &mut grads)?;
            Ok(grads)
        })
        .collect();
    let mut grads = Gradients::new();
    for r in results {
        grads.merge(&r?);
    }
    Ok(BatchGrad {
        grads,
        loss_rec,
        constraint: c,
        loss_total,
        s_theta,
    })
}

/// Alternating primal/dual training of `policy` against `reference`.
///
/// The log is written to `log_path` (when given) on completion and on
/// divergence.
pub fn train_policy<T: Scalar>(
    policy: &mut Policy<T>,
    reference: &GrModel<T>,
    env: PolicyEnv<'_, T>,
    data: &Dataset<'_>,
    cfg: &TrainConfig,
    seed: u64,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.lr <= 0.0 || cfg.batch == 0 {
        return Err(LwgrError::Config("train needs lr > 0 and batch >= 1".into()));
    }
    let mut dual = DualState::new(&cfg.dual)?;
    if policy.variant == Variant::FixedBeta && dual.beta.is_none() {
        return Err(LwgrError::Config("fixed_beta variant needs train.dual.beta".into()));
    }
    let ref_before = reference.store.checksum();
    let km_before = env.knowledge.base_checksum();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2, 0));
    let mut cache: HashMap<(usize, usize), f64> = HashMap::new();
    let mut log = TrainLog::default();
    let mut first_loss: Option<f64> = None;
    for step in 0..cfg.steps {
        let batch = data.draw(&mut rng, cfg.batch)?;
        let missing: Vec<Sample> = batch.iter().copied().filter(|s| !cache.contains_key(&(s.user, s.end))).collect();
        for (s, v) in missing.iter().zip(reference_scores(reference, data, &missing)?) {
            cache.insert((s.user, s.end), v);
        }
        let s_ref: Vec<f64> = batch.iter().map(|s| cache[&(s.user, s.end)]).collect();
        let seeds: Vec<u64> = (0..batch.len()).map(|i| mix(seed, 3 + step as u64, i as u64)).collect();
        let lambda_used = logged_lambda(policy.variant, &dual);
        let mut bg = batch_gradient(policy, env, data, &batch, &s_ref, &dual, Some(&seeds))?;
        if let Err(e) = check_grads(&bg.grads, &policy.store) {
            if let Some(p) = log_path {
                log.write_csv(p)?;
            }
            return Err(e);
        }
        let grad_norm = clip_grad_norm(&mut bg.grads, &policy.store, cfg.clip_norm);
        log.rows.push(LogRow {
            step,
            loss_rec: bg.loss_rec,
            constraint: bg.constraint,
            lambda: lambda_used,
            loss_total: bg.loss_total,
            grad_norm,
        });
        let base = *first_loss.get_or_insert(bg.loss_total.abs().max(1e-12));
        let limit = cfg.divergence_factor * base;
        if !bg.loss_total.is_finite() || bg.loss_total > limit {
            if let Some(p) = log_path {
                log.write_csv(p)?;
            }
            return Err(LwgrError::Diverged {
                step,
                loss: bg.loss_total,
                limit,
            });
        }
        opt.step(&mut policy.store, &bg.grads)?;
        if policy.variant.constrained() && policy.variant != Variant::FixedBeta {
            dual_step(&mut dual, bg.constraint);
        }
    }
    if let Some(p) = log_path {
        log.write_csv(p)?;
    }
    Ok(TrainOutcome {
        log,
        dual,
        reference_checksum: (ref_before, reference.store.checksum()),
        knowledge_checksum: (km_before, env.knowledge.base_checksum()),
    })
}

/// Central-difference check of the full objective's gradient with respect
/// to every trainable policy parameter.
pub fn grad_check_objective<T: Scalar>(
    policy: &mut Policy<T>,
    env: PolicyEnv<'_, T>,
    data: &Dataset<'_>,
    batch: &[Sample],
    s_ref: &[f64],
    dual: &DualState,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut store = std::mem::take(&mut policy.store);
    let ids: Vec<ParamId> = store.ids().collect();
    let layout = &*policy;
    let report = check_params(&mut store, &ids, opts, |st, tape: Option<&FrozenTape<T>>, grads| {
        let mut g = Graph::new();
        match tape {
            Some(t) => g.replay_frozen(t.clone()),
            None => g.record_frozen(),
        }
        let v = objective_graph(layout, st, env, &mut g, data, batch, s_ref, dual)?;
        if let Some(gr) = grads {
            g.backward(v, gr)?;
        }
        Ok((g.scalar(v), g.take_frozen()))
    });
    policy.store = store;
    report
}
