//! Stand-in knowledge model: a small causal transformer over a synthetic text
//! vocabulary. Its hidden states for `[instruction tokens; item-text
//! embeddings]` form the per-user knowledge matrix.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{contract, LwgrError, Result};
use crate::nn::{AdapterDropout, AttnAdapters, LayerNorm, Lora, LoraCall, SelfAttnLayer};
use crate::numerics::{AttnMask, Gradients, Graph, Optimizer, ParamId, ParamStore, StoreRef, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Longest input the position table supports.
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            d: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 2,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmPretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            seq_len: 32,
            lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeBackend {
    /// Pretrained on the synthetic text corpus, then frozen.
    FrozenToyLm,
    /// Seeded random weights, no pretraining.
    DeterministicOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            scale: 16.0,
            dropout: 0.05,
        }
    }
}

/// Query/value adapters of one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerLora {
    pub q: Lora,
    pub v: Lora,
}

/// Adapters for every layer plus the store holding them.
#[derive(Clone, Copy)]
pub struct AdapterSet<'l> {
    pub layers: &'l [LayerLora],
    pub store: StoreRef,
}

/// Layer layout of the causal transformer.
#[derive(Debug, Clone)]
pub struct LmArch {
    pub cfg: LmConfig,
    pub emb: ParamId,
    pub pos: ParamId,
    pub layers: Vec<SelfAttnLayer>,
    pub ln_f: LayerNorm,
}

impl LmArch {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &LmConfig, seed: u64) -> Result<Self> {
        if cfg.vocab == 0 || cfg.d == 0 || cfg.max_len == 0 {
            return Err(LwgrError::Config("knowledge model sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (cfg.d as f64).sqrt();
        let emb = store.add_normal("lm.emb", &[cfg.vocab, cfg.d], std, &mut rng);
        let pos = store.add_normal("lm.pos", &[cfg.max_len, cfg.d], std, &mut rng);
        let layers = (0..cfg.layers)
            .map(|i| SelfAttnLayer::new(store, &format!("lm.{i}"), cfg.d, cfg.heads, cfg.ffn_mult * cfg.d, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, "lm.ln_f", cfg.d);
        Ok(Self {
            cfg: cfg.clone(),
            emb,
            pos,
            layers,
            ln_f,
        })
    }

    /// Adds adapters for every layer's query and value projections to `store`.
    pub fn new_adapters<T: Scalar>(&self, store: &mut ParamStore<T>, cfg: &LoraConfig, seed: u64) -> Result<Vec<LayerLora>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.cfg.d;
        (0..self.layers.len())
            .map(|i| {
                Ok(LayerLora {
                    q: Lora::new(store, &format!("lm.{i}.attn.q"), d, d, cfg.rank, cfg.scale, &mut rng)?,
                    v: Lora::new(store, &format!("lm.{i}.attn.v"), d, d, cfg.rank, cfg.scale, &mut rng)?,
                })
            })
            .collect()
    }

    /// Causal forward over `blocks` equal-length sequences stacked in `x`
    /// (`blocks·n × d` input embeddings). Returns final-layer hidden states.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        x: Var,
        blocks: usize,
        adapters: Option<AdapterSet<'_>>,
        dropout: &mut Option<AdapterDropout<'_>>,
    ) -> Result<Var> {
        let (rows, d) = g.shape(x);
        if d != self.cfg.d || blocks == 0 || rows % blocks != 0 {
            return Err(contract("knowledge_forward", format!("input {:?} with {blocks} blocks, width {}", g.shape(x), self.cfg.d)));
        }
        let n = rows / blocks;
        if n == 0 || n > self.cfg.max_len {
            return Err(contract("knowledge_forward", format!("sequence length {n} outside 1..={}", self.cfg.max_len)));
        }
        let pos = g.param(s, self.pos)?;
        let ids: Vec<usize> = (0..rows).map(|r| r % n).collect();
        let pos = g.gather_rows(pos, &ids)?;
        let mut h = g.add(x, pos)?;
        let mask = AttnMask::BlockCausal { block: n };
        for (i, layer) in self.layers.iter().enumerate() {
            let ad = match adapters {
                Some(a) => AttnAdapters {
                    q: Some(LoraCall {
                        lora: &a.layers[i].q,
                        store: a.store,
                    }),
                    v: Some(LoraCall {
                        lora: &a.layers[i].v,
                        store: a.store,
                    }),
                },
                None => AttnAdapters::default(),
            };
            h = layer.forward(g, s, h, &mask, ad, dropout)?;
        }
        self.ln_f.forward(g, s, h)
    }

    /// Next-token logits with the embedding table as output layer.
    pub fn token_logits<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef, h: Var) -> Result<Var> {
        let e = g.param(s, self.emb)?;
        let et = g.transpose(e)?;
        g.matmul(h, et)
    }

    /// Parameter ids of the base weights.
    pub fn base_ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store.iter().filter(|(_, n, _)| n.starts_with("lm.")).map(|(id, _, _)| id).collect()
    }
}

/// Input to knowledge extraction: instruction prefix then per-item text.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeInput<T> {
    /// `K × d_LLM` (zero rows when there is no instruction).
    pub prefix: Vec<Vec<T>>,
    /// `T × d_LLM`, chronological.
    pub body: Vec<Vec<T>>,
}

impl<T: Scalar> KnowledgeInput<T> {
    pub fn len(&self) -> usize {
        self.prefix.len() + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stacked(&self, d: usize) -> Result<Tensor<T>> {
        let rows: Vec<T> = self.prefix.iter().chain(&self.body).flatten().copied().collect();
        if rows.len() != self.len() * d {
            return Err(contract("build_input", format!("rows must all have width {d}")));
        }
        Tensor::matrix(self.len(), d, rows)
    }
}

/// Per-user knowledge matrix `H_u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeMatrix {
    pub user_id: String,
    /// Row-major `(K+T) × d_LLM`.
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub context_fingerprint: String,
}

impl KnowledgeMatrix {
    pub fn tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64(&[self.rows, self.cols], &self.values)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }
}

/// Hash of the context a knowledge matrix was computed from.
pub fn context_fingerprint(history: &[usize], codebook_version: &str) -> String {
    let mut h = Sha256::new();
    for it in history {
        h.update((*it as u64).to_le_bytes());
    }
    h.update(codebook_version.as_bytes());
    hex::encode(h.finalize())
}

/// The frozen knowledge model and its item-text embeddings.
#[derive(Debug)]
pub struct KnowledgeModel<T> {
    pub arch: LmArch,
    pub store: ParamStore<T>,
    pub backend: KnowledgeBackend,
    pub seed: u64,
    forward_calls: AtomicUsize,
}

impl<T: Scalar> Clone for KnowledgeModel<T> {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            store: self.store.clone(),
            backend: self.backend,
            seed: self.seed,
            forward_calls: AtomicUsize::new(self.forward_count()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LmHeader {
    config: LmConfig,
    backend: KnowledgeBackend,
    seed: u64,
}

/// Outcome of toy-LM pretraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub unigram_entropy: f64,
    pub losses: Vec<f64>,
}

impl<T: Scalar> KnowledgeModel<T> {
    /// Random-weight backend, frozen immediately.
    pub fn oracle(cfg: &LmConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = LmArch::new(&mut store, cfg, seed)?;
        store.freeze_all();
        Ok(Self {
            arch,
            store,
            backend: KnowledgeBackend::DeterministicOracle,
            seed,
            forward_calls: AtomicUsize::new(0),
        })
    }

    /// Next-token pretraining on `corpus` (token streams), then freezing.
    pub fn pretrain(cfg: &LmConfig, corpus: &[Vec<usize>], pc: &LmPretrainConfig, seed: u64) -> Result<(Self, PretrainReport)> {
        let tokens: usize = corpus.iter().map(|c| c.len()).sum();
        if tokens == 0 {
            return Err(contract("pretrain_toy_lm", "empty corpus"));
        }
        for &t in corpus.iter().flatten() {
            crate::nn::check_token("pretrain_toy_lm", t, cfg.vocab)?;
        }
        let seq_len = pc.seq_len.min(cfg.max_len).max(2);
        let windows: Vec<&[usize]> = corpus
            .iter()
            .flat_map(|c| c.windows(seq_len).step_by(seq_len / 2))
            .collect();
        if windows.is_empty() {
            return Err(contract("pretrain_toy_lm", format!("no corpus stream reaches length {seq_len}")));
        }
        let mut store = ParamStore::new();
        let arch = LmArch::new(&mut store, cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut opt = Optimizer::adamw(pc.lr, 0.0);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
        let eval: Vec<&[usize]> = (0..64.min(windows.len()))
            .map(|_| windows[eval_rng.gen_range(0..windows.len())])
            .collect();
        let initial_loss = Self::lm_loss(&arch, &store, &eval, None)?;
        let mut losses = Vec::with_capacity(pc.steps);
        for _ in 0..pc.steps {
            let batch: Vec<&[usize]> = windows.choose_multiple(&mut rng, pc.batch.min(windows.len())).copied().collect();
            let mut grads = Gradients::new();
            let l = Self::lm_loss(&arch, &store, &batch, Some(&mut grads))?;
            losses.push(l);
            crate::numerics::clip_grad_norm(&mut grads, &store, 1.0);
            opt.step(&mut store, &grads)?;
        }
        let final_loss = Self::lm_loss(&arch, &store, &eval, None)?;
        store.freeze_all();
        let report = PretrainReport {
            initial_loss,
            final_loss,
            unigram_entropy: unigram_entropy(corpus, cfg.vocab),
            losses,
        };
        Ok((
            Self {
                arch,
                store,
                backend: KnowledgeBackend::FrozenToyLm,
                seed,
                forward_calls: AtomicUsize::new(0),
            },
            report,
        ))
    }

    /// Mean next-token NLL (nats) over equal-length windows.
    fn lm_loss(arch: &LmArch, store: &ParamStore<T>, batch: &[&[usize]], grads: Option<&mut Gradients<T>>) -> Result<f64> {
        let mut g = if grads.is_some() { Graph::new() } else { Graph::inference() };
        let s = g.register(store);
        let n = batch[0].len() - 1;
        let ids: Vec<usize> = batch.iter().flat_map(|w| w[..n].iter().copied()).collect();
        let targets: Vec<usize> = batch.iter().flat_map(|w| w[1..].iter().copied()).collect();
        let e = g.param(s, arch.emb)?;
        let x = g.gather_rows(e, &ids)?;
        let h = arch.forward(&mut g, s, x, batch.len(), None, &mut None)?;
        let logits = arch.token_logits(&mut g, s, h)?;
        let nll = g.nll(logits, &targets)?;
        let loss = g.mean(nll)?;
        if let Some(gr) = grads {
            g.backward(loss, gr)?;
        }
        Ok(g.scalar(loss).as_f64())
    }

    pub fn d(&self) -> usize {
        self.arch.cfg.d
    }

    /// Number of knowledge forward passes run so far.
    pub fn forward_count(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn note_forward(&self) {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
    }

    /// Mean of the token-embedding rows of an item's text.
    pub fn embed_item_text(&self, tokens: &[usize]) -> Result<Vec<T>> {
        if tokens.is_empty() {
            return Err(contract("embed_item_text", "item has no text tokens"));
        }
        let d = self.d();
        let e = self.store.get(self.arch.emb).values();
        let mut out = vec![T::zero(); d];
        for &t in tokens {
            if t >= self.arch.cfg.vocab {
                return Err(LwgrError::Lookup(format!("text token {t} outside vocabulary of {}", self.arch.cfg.vocab)));
            }
            for (o, &v) in out.iter_mut().zip(&e[t * d..(t + 1) * d]) {
                *o += v;
            }
        }
        let n = T::lit(tokens.len() as f64);
        Ok(out.into_iter().map(|v| v / n).collect())
    }

    /// Text embeddings of every catalog item, row `i` for item `i`.
    pub fn text_table(&self, texts: &[Vec<usize>]) -> Result<Vec<Vec<T>>> {
        texts.iter().map(|t| self.embed_item_text(t)).collect()
    }

    /// `[instruction; text of the last `window` items]`.
    pub fn build_input(&self, instruction: &[Vec<T>], history: &[usize], text_table: &[Vec<T>], window: usize) -> Result<KnowledgeInput<T>> {
        let start = history.len().saturating_sub(window);
        let body = history[start..]
            .iter()
            .map(|&i| {
                text_table
                    .get(i)
                    .cloned()
                    .ok_or_else(|| LwgrError::Lookup(format!("no text for catalog item {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KnowledgeInput {
            prefix: instruction.to_vec(),
            body,
        })
    }

    /// Hidden states of the full input (`H_u`), without adapters.
    pub fn extract(&self, input: &KnowledgeInput<T>) -> Result<Tensor<T>> {
        self.extract_adapted(input, None)
    }

    /// As [`extract`](Self::extract), optionally through LoRA adapters held
    /// in `adapter_store`.
    pub fn extract_adapted(&self, input: &KnowledgeInput<T>, adapters: Option<(&[LayerLora], &ParamStore<T>)>) -> Result<Tensor<T>> {
        if input.is_empty() {
            return Err(contract("extract_knowledge", "empty knowledge input"));
        }
        let mut g = Graph::inference();
        let s = g.register(&self.store);
        let x = g.constant(input.stacked(self.d())?)?;
        let set = adapters.map(|(layers, st)| AdapterSet {
            layers,
            store: g.register(st),
        });
        let h = self.forward_var(&mut g, s, x, set, &mut None)?;
        Ok(g.tensor(h))
    }

    /// In-graph forward of one input sequence (`n × d_LLM`).
    pub fn forward_var(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        x: Var,
        adapters: Option<AdapterSet<'_>>,
        dropout: &mut Option<AdapterDropout<'_>>,
    ) -> Result<Var> {
        self.note_forward();
        self.arch.forward(g, s, x, 1, adapters, dropout)
    }

    /// Copy with every adapter folded into its query/value weight, so the
    /// plain forward reproduces the adapted one.
    pub fn merged(&self, adapters: &[LayerLora], adapter_store: &ParamStore<T>) -> Result<Self> {
        if adapters.len() != self.arch.layers.len() {
            return Err(contract(
                "merge_adapters",
                format!("{} adapter layers for {} model layers", adapters.len(), self.arch.layers.len()),
            ));
        }
        let mut out = self.clone();
        for (layer, ad) in self.arch.layers.iter().zip(adapters) {
            for (lin, lora) in [(&layer.attn.q, &ad.q), (&layer.attn.v, &ad.v)] {
                let w = lora.merged(self.store.get(lin.w), adapter_store);
                *out.store.get_mut(lin.w) = w;
            }
        }
        Ok(out)
    }

    /// Checksum of the base (non-adapter) weights.
    pub fn base_checksum(&self) -> String {
        let ids = self.arch.base_ids(&self.store);
        self.store.checksum_of(&ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = LmHeader {
            config: self.arch.cfg.clone(),
            backend: self.backend,
            seed: self.seed,
        };
        Checkpoint::from_store("knowledge_model", serde_json::to_value(header)?, &self.store)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let h: LmHeader = serde_json::from_value(ck.header.clone())?;
        let mut m = Self::oracle(&h.config, h.seed)?;
        ck.load_into(&mut m.store, true)?;
        m.store.freeze_all();
        m.backend = h.backend;
        Ok(m)
    }
}

/// Entropy (nats) of the corpus unigram distribution.
pub fn unigram_entropy(corpus: &[Vec<usize>], vocab: usize) -> f64 {
    let mut counts = vec![0usize; vocab];
    let mut total = 0usize;
    for &t in corpus.iter().flatten() {
        if t < vocab {
            counts[t] += 1;
            total += 1;
        }
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Fixed probe input and the hidden states it produced, for frozen-contract
/// checks across processes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFixture {
    pub rows: usize,
    pub cols: usize,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

impl ProbeFixture {
    pub fn capture<T: Scalar>(model: &KnowledgeModel<T>, seed: u64, rows: usize) -> Result<Self> {
        let d = model.d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::<T>::from_f64(&[rows, d], &input)?;
        let out = model.extract(&KnowledgeInput {
            prefix: Vec::new(),
            body: x.values().chunks(d).map(|r| r.to_vec()).collect(),
        })?;
        Ok(Self {
            rows,
            cols: d,
            input,
            output: out.to_f64_vec(),
        })
    }

    /// Whether `model` reproduces the stored output bit for bit.
    pub fn matches<T: Scalar>(&self, model: &KnowledgeModel<T>) -> Result<bool> {
        let x = Tensor::<T>::from_f64(&[self.rows, self.cols], &self.input)?;
        let out = model.extract(&KnowledgeInput {
            prefix: Vec::new(),
            body: x.values().chunks(self.cols).map(|r| r.to_vec()).collect(),
        })?;
        Ok(out.to_f64_vec().iter().zip(&self.output).all(|(a, b)| a.to_bits() == b.to_bits()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| LwgrError::MissingArtifact(path.to_path_buf()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
