//! Encoder–decoder recommender over semantic-ID tokens.
//!
//! The encoder reads a user's recent items flattened to their SID tokens;
//! the decoder starts from a single start state (the learned BOS vector, or a
//! knowledge-fused replacement) and predicts the target item's tokens level
//! by level.

use std::cmp::Ordering;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{contract, LwgrError, Result};
use crate::item_tokenizer::PrefixTrie;
use crate::nn::{AttnAdapters, DecoderLayer, LayerNorm, Linear, SelfAttnLayer};
use crate::numerics::{log_sum_exp_and_probs, AttnMask, Graph, ParamId, ParamStore, StoreRef, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Feed-forward width as a multiple of `d`.
    pub ffn_mult: usize,
    /// Most recent items fed to the encoder.
    pub max_items: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_mult: 2,
            max_items: 8,
        }
    }
}

/// A user's chronological interactions as catalog indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<usize>,
}

/// Encoder states plus the validity of each row.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub h: Var,
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn key_mask(&self) -> AttnMask {
        if self.mask.iter().all(|&m| m) {
            AttnMask::Full(None)
        } else {
            AttnMask::Full(Some(self.mask.clone()))
        }
    }
}

/// Parameter layout of the recommender inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    /// Vocabulary size of every decoded level.
    pub vocab: Vec<usize>,
    offsets: Vec<usize>,
    pub tok_emb: ParamId,
    pub enc_pos: ParamId,
    pub dec_pos: ParamId,
    pub bos: ParamId,
    enc: Vec<SelfAttnLayer>,
    enc_ln: LayerNorm,
    dec: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
    out: Vec<Linear>,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &BackboneConfig, vocab: &[usize], seed: u64) -> Result<Self> {
        if vocab.is_empty() || vocab.contains(&0) {
            return Err(LwgrError::Config(format!("invalid level vocabularies {vocab:?}")));
        }
        if cfg.d == 0 || cfg.max_items == 0 {
            return Err(LwgrError::Config("backbone d and max_items must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let l = vocab.len();
        let mut offsets = Vec::with_capacity(l);
        let mut total = 0;
        for &v in vocab {
            offsets.push(total);
            total += v;
        }
        let emb_std = 1.0 / (d as f64).sqrt();
        let tok_emb = store.add_normal("gr.tok_emb", &[total, d], emb_std, &mut rng);
        let enc_pos = store.add_normal("gr.enc_pos", &[cfg.max_items * l, d], emb_std, &mut rng);
        let dec_pos = store.add_normal("gr.dec_pos", &[l, d], emb_std, &mut rng);
        let bos = store.add_normal("gr.bos", &[1, d], emb_std, &mut rng);
        let ffn = cfg.ffn_mult * d;
        let enc = (0..cfg.enc_layers)
            .map(|i| SelfAttnLayer::new(store, &format!("gr.enc.{i}"), d, cfg.heads, ffn, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_ln = LayerNorm::new(store, "gr.enc_ln", d);
        let dec = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(store, &format!("gr.dec.{i}"), d, cfg.heads, ffn, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_ln = LayerNorm::new(store, "gr.dec_ln", d);
        let out = vocab
            .iter()
            .enumerate()
            .map(|(i, &v)| Linear::new(store, &format!("gr.out.{i}"), d, v, true, &mut rng))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            vocab: vocab.to_vec(),
            offsets,
            tok_emb,
            enc_pos,
            dec_pos,
            bos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out,
        })
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    /// Tokens generated per item.
    pub fn seq_len(&self) -> usize {
        self.vocab.len()
    }

    fn check_seq(&self, op: &'static str, seq: &[usize]) -> Result<()> {
        if seq.len() != self.seq_len() {
            return Err(contract(op, format!("token sequence of length {} for {} levels", seq.len(), self.seq_len())));
        }
        for (l, (&t, &v)) in seq.iter().zip(&self.vocab).enumerate() {
            if t >= v {
                return Err(contract(op, format!("level {l} token {t} outside vocabulary of {v}")));
            }
        }
        Ok(())
    }

    /// Embedding-table row of token `tok` at level `level`.
    pub fn token_row(&self, level: usize, tok: usize) -> usize {
        self.offsets[level] + tok
    }

    /// Encodes the last `max_items` items of `history`.
    ///
    /// `item_tokens[i]` is the token sequence of catalog item `i`. With
    /// `pad_to_max` the input is right-padded to `max_items` items; padded
    /// rows are excluded from attention and flagged invalid in the mask.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        item_tokens: &[Vec<usize>],
        history: &[usize],
        pad_to_max: bool,
    ) -> Result<EncoderOutput> {
        self.encode_with_prefix(g, s, item_tokens, history, pad_to_max, None)
    }

    /// As [`encode`](Self::encode), with extra `p × d` rows placed before the
    /// item tokens (they carry no position embedding).
    pub fn encode_with_prefix<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        item_tokens: &[Vec<usize>],
        history: &[usize],
        pad_to_max: bool,
        prefix: Option<Var>,
    ) -> Result<EncoderOutput> {
        if history.is_empty() {
            return Err(contract("encode", "empty interaction sequence"));
        }
        let start = history.len().saturating_sub(self.cfg.max_items);
        let l = self.seq_len();
        let mut rows = Vec::new();
        for &it in &history[start..] {
            let toks = item_tokens
                .get(it)
                .ok_or_else(|| LwgrError::Lookup(format!("unknown catalog item index {it}")))?;
            self.check_seq("encode", toks)?;
            rows.extend(toks.iter().enumerate().map(|(lv, &t)| self.token_row(lv, t)));
        }
        let n_valid = rows.len();
        let n = if pad_to_max { self.cfg.max_items * l } else { n_valid };
        let table = g.param(s, self.tok_emb)?;
        let mut x = g.gather_rows(table, &rows)?;
        if n > n_valid {
            let pad = g.constant(Tensor::zeros(&[n - n_valid, self.cfg.d]))?;
            x = g.concat_rows(&[x, pad])?;
        }
        let pos = g.param(s, self.enc_pos)?;
        let pos = g.slice_rows(pos, 0, n)?;
        let mut x = g.add(x, pos)?;
        let mut mask: Vec<bool> = (0..n).map(|i| i < n_valid).collect();
        if let Some(p) = prefix {
            if g.cols(p) != self.cfg.d {
                return Err(contract("encode", format!("prefix rows {:?} for width {}", g.shape(p), self.cfg.d)));
            }
            let np = g.rows(p);
            x = g.concat_rows(&[p, x])?;
            mask.splice(0..0, std::iter::repeat_n(true, np));
        }
        let n_valid = mask.iter().filter(|&&m| m).count();
        let n = mask.len();
        let attn_mask = if n > n_valid {
            AttnMask::Full(Some(mask.clone()))
        } else {
            AttnMask::Full(None)
        };
        for layer in &self.enc {
            x = layer.forward(g, s, x, &attn_mask, AttnAdapters::default(), &mut None)?;
        }
        let h = self.enc_ln.forward(g, s, x)?;
        Ok(EncoderOutput { h, mask })
    }

    /// The learned BOS start state (`1 × d`).
    pub fn bos<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef) -> Result<Var> {
        g.param(s, self.bos)
    }

    /// Decoder hidden states for `prefixes.len()` blocks of `n` rows each.
    ///
    /// Block `b` reads the start state followed by the embeddings of
    /// `prefixes[b]` (all of length `n - 1`); row `j` of a block predicts
    /// level `j`.
    pub fn decode_hidden<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        enc: &EncoderOutput,
        start: Var,
        prefixes: &[Vec<usize>],
    ) -> Result<Var> {
        let d = self.cfg.d;
        if g.shape(start) != (1, d) {
            return Err(contract("decode", format!("start state {:?}, expected (1, {d})", g.shape(start))));
        }
        let n = prefixes.first().map_or(1, |p| p.len() + 1);
        if n > self.seq_len() || prefixes.iter().any(|p| p.len() + 1 != n) {
            return Err(contract("decode", "prefixes must share a length below the SID length"));
        }
        let blocks = prefixes.len().max(1);
        let table = g.param(s, self.tok_emb)?;
        let pos = g.param(s, self.dec_pos)?;
        let pos = g.slice_rows(pos, 0, n)?;
        let mut parts = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let x = if n == 1 {
                g.add(start, pos)?
            } else {
                let p = &prefixes[b];
                let ids: Vec<usize> = p.iter().enumerate().map(|(lv, &t)| self.token_row(lv, t)).collect();
                let emb = g.gather_rows(table, &ids)?;
                let x = g.concat_rows(&[start, emb])?;
                g.add(x, pos)?
            };
            parts.push(x);
        }
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let self_mask = AttnMask::BlockCausal { block: n };
        let mem_mask = enc.key_mask();
        for layer in &self.dec {
            x = layer.forward(g, s, x, enc.h, &self_mask, &mem_mask)?;
        }
        self.dec_ln.forward(g, s, x)
    }

    /// Logits of level `level` from the given hidden rows.
    pub fn level_logits<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef, hidden_rows: Var, level: usize) -> Result<Var> {
        self.out[level].forward(g, s, hidden_rows)
    }

    /// Per-level negative log-likelihoods of `target` under teacher forcing.
    /// Returns one `1 × 1` node per level.
    pub fn level_nlls<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        enc: &EncoderOutput,
        start: Var,
        target: &[usize],
    ) -> Result<Vec<Var>> {
        self.check_seq("nll_loss", target)?;
        let l = self.seq_len();
        let hidden = self.decode_hidden(g, s, enc, start, &[target[..l - 1].to_vec()])?;
        let mut out = Vec::with_capacity(l);
        for lv in 0..l {
            let row = g.slice_rows(hidden, lv, 1)?;
            let logits = self.level_logits(g, s, row, lv)?;
            out.push(g.nll(logits, &[target[lv]])?);
        }
        Ok(out)
    }

    /// `−Σ_ℓ log p(c^ℓ | c^{<ℓ}, s_u)` as a scalar node.
    pub fn nll_loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        enc: &EncoderOutput,
        start: Var,
        target: &[usize],
    ) -> Result<Var> {
        let terms = self.level_nlls(g, s, enc, start, target)?;
        let all = g.concat_rows(&terms)?;
        g.sum(all)
    }

    /// Mean token log-probability `(1/L) Σ_ℓ log p(c^ℓ | …)`, i.e. `−nll/L`.
    pub fn score_from_nll<T: Scalar>(&self, g: &mut Graph<'_, T>, nll: Var) -> Result<Var> {
        g.scale(nll, -T::one() / T::lit(self.seq_len() as f64))
    }

    /// Log-probabilities of every level-`level` token for each block's row.
    fn block_log_probs<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        enc: &EncoderOutput,
        start: Var,
        prefixes: &[Vec<usize>],
        level: usize,
    ) -> Result<Vec<Vec<T>>> {
        let n = level + 1;
        let hidden = self.decode_hidden(g, s, enc, start, prefixes)?;
        let rows: Vec<usize> = (0..prefixes.len().max(1)).map(|b| b * n + level).collect();
        let h = g.gather_rows(hidden, &rows)?;
        let logits = self.level_logits(g, s, h, level)?;
        let v = self.vocab[level];
        Ok(g.value(logits).chunks(v).map(log_probs).collect())
    }

    /// Sequence log-probability of every catalog sequence, accumulated in
    /// level order exactly as beam search does.
    pub fn exhaustive_scores<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        enc: &EncoderOutput,
        start: Var,
        sequences: &[Vec<usize>],
    ) -> Result<Vec<T>> {
        let l = self.seq_len();
        for sq in sequences {
            self.check_seq("exhaustive_scores", sq)?;
        }
        let prefixes: Vec<Vec<usize>> = sequences.iter().map(|q| q[..l - 1].to_vec()).collect();
        let hidden = self.decode_hidden(g, s, enc, start, &prefixes)?;
        let mut scores = vec![T::zero(); sequences.len()];
        for lv in 0..l {
            let rows: Vec<usize> = (0..sequences.len()).map(|b| b * l + lv).collect();
            let h = g.gather_rows(hidden, &rows)?;
            let logits = self.level_logits(g, s, h, lv)?;
            let v = self.vocab[lv];
            for (b, row) in g.value(logits).chunks(v).enumerate() {
                scores[b] += log_probs(row)[sequences[b][lv]];
            }
        }
        Ok(scores)
    }

    /// Trie-constrained beam search. Returns `(catalog index, sequence
    /// log-probability)` for the best `min(k, catalog)` items, best first;
    /// equal scores are ordered by `item_ids` ascending.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_topk<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        enc: &EncoderOutput,
        start: Var,
        trie: &PrefixTrie,
        item_ids: &[String],
        k: usize,
        beam: usize,
    ) -> Result<Vec<(usize, T)>> {
        if beam < k || k == 0 {
            return Err(LwgrError::Config(format!("beam width {beam} must be at least k = {k} >= 1")));
        }
        if trie.depth() != self.seq_len() {
            return Err(contract("generate_topk", "trie depth differs from the SID length"));
        }
        struct Hyp<T> {
            prefix: Vec<usize>,
            node: usize,
            score: T,
        }
        let mut beams = vec![Hyp {
            prefix: Vec::new(),
            node: PrefixTrie::ROOT,
            score: T::zero(),
        }];
        for lv in 0..self.seq_len() {
            let prefixes: Vec<Vec<usize>> = beams.iter().map(|h| h.prefix.clone()).collect();
            let lp = self.block_log_probs(g, s, enc, start, &prefixes, lv)?;
            let mut cand = Vec::new();
            for (b, h) in beams.iter().enumerate() {
                for &(tok, child) in trie.children(h.node) {
                    let mut p = h.prefix.clone();
                    p.push(tok);
                    cand.push(Hyp {
                        prefix: p,
                        node: child,
                        score: h.score + lp[b][tok],
                    });
                }
            }
            let last = lv + 1 == self.seq_len();
            cand.sort_by(|a, b| {
                b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| {
                    if last {
                        let (ia, ib) = (trie.item_at(a.node).unwrap_or(0), trie.item_at(b.node).unwrap_or(0));
                        item_ids[ia].cmp(&item_ids[ib])
                    } else {
                        a.prefix.cmp(&b.prefix)
                    }
                })
            });
            cand.truncate(beam);
            beams = cand;
        }
        Ok(beams
            .into_iter()
            .take(k)
            .map(|h| (trie.item_at(h.node).expect("full-depth trie node is a leaf"), h.score))
            .collect())
    }

    /// Names of the parameters that belong to the recommender.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.enc_pos, self.dec_pos, self.bos];
        let lin = |l: &Linear, ids: &mut Vec<ParamId>| {
            ids.push(l.w);
            ids.extend(l.b);
        };
        let ln = |l: &LayerNorm, ids: &mut Vec<ParamId>| ids.extend([l.gain, l.bias]);
        for e in &self.enc {
            ln(&e.ln1, &mut ids);
            for p in [&e.attn.q, &e.attn.k, &e.attn.v, &e.attn.o, &e.ffn.up, &e.ffn.down] {
                lin(p, &mut ids);
            }
            ln(&e.ln2, &mut ids);
        }
        ln(&self.enc_ln, &mut ids);
        for dl in &self.dec {
            for l in [&dl.ln1, &dl.ln2, &dl.ln3] {
                ln(l, &mut ids);
            }
            for a in [&dl.self_attn, &dl.cross] {
                for p in [&a.q, &a.k, &a.v, &a.o] {
                    lin(p, &mut ids);
                }
            }
            lin(&dl.ffn.up, &mut ids);
            lin(&dl.ffn.down, &mut ids);
        }
        ln(&self.dec_ln, &mut ids);
        for o in &self.out {
            lin(o, &mut ids);
        }
        ids
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_probs<T: Scalar>(row: &[T]) -> Vec<T> {
    let (lse, _) = log_sum_exp_and_probs(row);
    row.iter().map(|&x| x - lse).collect()
}

/// A stand-alone recommender: layout plus its own parameters. Used for the
/// knowledge-free reference model.
#[derive(Debug, Clone)]
pub struct GrModel<T: Scalar> {
    pub arch: Backbone,
    pub store: ParamStore<T>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GrHeader {
    config: BackboneConfig,
    vocab: Vec<usize>,
    seed: u64,
}

impl<T: Scalar> GrModel<T> {
    pub fn new(cfg: &BackboneConfig, vocab: &[usize], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Backbone::new(&mut store, cfg, vocab, seed)?;
        Ok(Self { arch, store, seed })
    }

    pub fn encode_history(&self, item_tokens: &[Vec<usize>], history: &[usize]) -> Result<(Graph<'_, T>, EncoderOutput, StoreRef)> {
        let mut g = Graph::inference();
        let s = g.register(&self.store);
        let enc = self.arch.encode(&mut g, s, item_tokens, history, false)?;
        Ok((g, enc, s))
    }

    /// Mean token log-probability of `target` given `history` (no knowledge).
    pub fn score(&self, item_tokens: &[Vec<usize>], history: &[usize], target: &[usize]) -> Result<T> {
        let (mut g, enc, s) = self.encode_history(item_tokens, history)?;
        let bos = self.arch.bos(&mut g, s)?;
        let nll = self.arch.nll_loss(&mut g, s, &enc, bos, target)?;
        let sc = self.arch.score_from_nll(&mut g, nll)?;
        Ok(g.scalar(sc))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = GrHeader {
            config: self.arch.cfg.clone(),
            vocab: self.arch.vocab.clone(),
            seed: self.seed,
        };
        Checkpoint::from_store("gr_backbone", serde_json::to_value(header)?, &self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let h: GrHeader = serde_json::from_value(ck.header.clone())?;
        let mut m = Self::new(&h.config, &h.vocab, h.seed)?;
        ck.load_into(&mut m.store, true)?;
        Ok(m)
    }
}
