//! The knowledge-conditioned recommender: backbone, instruction extractor,
//! fusion block and optional knowledge-model adapters in one parameter
//! store, plus the ablation variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{contract, LwgrError, Result};
use crate::fusion::{FusionBlock, FusionConfig};
use crate::gr_backbone::{Backbone, BackboneConfig, EncoderOutput, GrModel};
use crate::item_tokenizer::PrefixTrie;
use crate::knowledge_source::{AdapterSet, KnowledgeModel, LayerLora, LoraConfig};
use crate::nn::{AdapterDropout, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, StoreRef, Tensor, Var};
use crate::scalar::Scalar;
use crate::soft_instruction::{pool_context, MlpInstruction, ResidualCodebooks, SoftInstruction, SoftInstructionConfig, UserCodebooks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full method: parallel codebooks, fusion, constrained training.
    Lwgr,
    /// Unconstrained training (λ held at 0).
    WoCons,
    /// Knowledge rows concatenated to the encoder input instead of fused.
    WoFus,
    /// Instruction tokens from an MLP instead of codebooks.
    WoPcb,
    /// Residual instead of parallel codebooks.
    Rq,
    /// Fixed hinge weight instead of the learned multiplier.
    FixedBeta,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::WoCons,
        Variant::WoFus,
        Variant::WoPcb,
        Variant::Rq,
        Variant::FixedBeta,
        Variant::Lwgr,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Lwgr => "lwgr",
            Variant::WoCons => "w/o_cons",
            Variant::WoFus => "w/o_fus",
            Variant::WoPcb => "w/o_pcb",
            Variant::Rq => "rq",
            Variant::FixedBeta => "fixed_beta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.label() == s || format!("{v:?}").to_lowercase() == s.replace(['/', '_'], ""))
            .ok_or_else(|| LwgrError::Config(format!("unknown variant {s:?}")))
    }

    /// Whether training uses the reference-based constraint.
    pub fn constrained(self) -> bool {
        !matches!(self, Variant::WoCons)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Knowledge model fully frozen.
    Frozen,
    /// Trainable low-rank adapters on the knowledge model's query/value
    /// projections.
    Lora,
}

#[derive(Debug, Clone)]
pub enum Instructor {
    Parallel(UserCodebooks),
    Residual(ResidualCodebooks),
    Mlp(MlpInstruction),
}

/// Read-only data the policy needs per user.
#[derive(Clone, Copy)]
pub struct PolicyEnv<'e, T> {
    pub item_tokens: &'e [Vec<usize>],
    pub text_table: &'e [Vec<T>],
    pub knowledge: &'e KnowledgeModel<T>,
}

/// Handles produced by one policy forward pass.
pub struct PolicyForward {
    pub instruction: SoftInstruction,
    pub h_u: Option<Var>,
    pub enc: EncoderOutput,
    pub start: Var,
}

/// Result of online ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking<T> {
    /// `(catalog index, sequence log-probability)`, best first.
    pub items: Vec<(usize, T)>,
    pub fusion_calls: usize,
}

#[derive(Debug, Clone)]
pub struct Policy<T: Scalar> {
    pub arch: Backbone,
    pub instructor: Instructor,
    pub fusion: Option<FusionBlock>,
    /// Projection of knowledge rows into the encoder width (concatenation
    /// variant only).
    pub knowledge_proj: Option<Linear>,
    pub adapters: Vec<LayerLora>,
    pub store: ParamStore<T>,
    pub variant: Variant,
    pub strategy: Strategy,
    pub lora_dropout: f64,
    /// Weight of the codeword-usage entropy bonus.
    pub entropy_weight: f64,
}

impl<T: Scalar> Policy<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        variant: Variant,
        strategy: Strategy,
        backbone: &BackboneConfig,
        vocab: &[usize],
        soft: &SoftInstructionConfig,
        fusion: &FusionConfig,
        lora: &LoraConfig,
        knowledge: &KnowledgeModel<T>,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Backbone::new(&mut store, backbone, vocab, seed)?;
        let d = backbone.d;
        let d_llm = knowledge.d();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let si_seed = seed.wrapping_add(101);
        let instructor = match variant {
            Variant::WoPcb => Instructor::Mlp(MlpInstruction::new(&mut store, soft.k, d, d_llm, si_seed)?),
            Variant::Rq => Instructor::Residual(ResidualCodebooks::new(&mut store, soft, d, d_llm, si_seed)?),
            _ => Instructor::Parallel(UserCodebooks::new(&mut store, soft, d, d_llm, si_seed)?),
        };
        let (fusion, knowledge_proj) = if variant == Variant::WoFus {
            (None, Some(Linear::new(&mut store, "knowledge_proj", d_llm, d, true, &mut rng)))
        } else {
            (Some(FusionBlock::new(&mut store, fusion, d, d_llm, seed.wrapping_add(202))?), None)
        };
        let adapters = match strategy {
            Strategy::Frozen => Vec::new(),
            Strategy::Lora => knowledge.arch.new_adapters(&mut store, lora, seed.wrapping_add(303))?,
        };
        Ok(Self {
            arch,
            instructor,
            fusion,
            knowledge_proj,
            adapters,
            store,
            variant,
            strategy,
            lora_dropout: lora.dropout,
            entropy_weight: soft.entropy_weight,
        })
    }

    /// Copies every backbone weight from `reference`. Returns the count.
    pub fn warm_start(&mut self, reference: &GrModel<T>) -> usize {
        self.store.copy_matching(&reference.store)
    }

    /// Writes every trainable weight, tagged with variant and strategy.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({ "variant": self.variant, "strategy": self.strategy });
        Checkpoint::from_store("policy", header, &self.store)?.save(path)
    }

    /// Loads weights saved by [`save`](Self::save) into a policy built with
    /// the same configuration.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::load(path)?;
        let header = serde_json::json!({ "variant": self.variant, "strategy": self.strategy });
        if ck.kind != "policy" || ck.header != header {
            return Err(contract(
                "load_policy",
                format!("{} holds {} {}, expected policy {header}", path.display(), ck.kind, ck.header),
            ));
        }
        ck.load_into(&mut self.store, true)
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.adapters.iter().flat_map(|l| [l.q.down, l.q.up, l.v.down, l.v.up]).collect()
    }

    pub fn k(&self) -> usize {
        match &self.instructor {
            Instructor::Parallel(c) => c.k,
            Instructor::Residual(c) => c.depth,
            Instructor::Mlp(m) => m.k,
        }
    }

    fn instruct(&self, g: &mut Graph<'_, T>, s: StoreRef, h: Var) -> Result<SoftInstruction> {
        match &self.instructor {
            Instructor::Parallel(c) => c.instruct(g, s, h),
            Instructor::Residual(c) => c.instruct(g, s, h),
            Instructor::Mlp(m) => m.instruct(g, s, h),
        }
    }

    /// Instruction tokens and knowledge-model input rows for `history`,
    /// followed by the knowledge forward pass. `h` is the pooled context.
    fn knowledge_in_graph(
        &self,
        g: &mut Graph<'_, T>,
        ps: StoreRef,
        ks: StoreRef,
        env: PolicyEnv<'_, T>,
        h: Var,
        history: &[usize],
        dropout: &mut Option<AdapterDropout<'_>>,
    ) -> Result<(SoftInstruction, Option<Var>)> {
        let instruction = self.instruct(g, ps, h)?;
        let input = env.knowledge.build_input(&[], history, env.text_table, self.arch.cfg.max_items)?;
        let mut parts = Vec::new();
        if let Some(t) = instruction.tokens {
            parts.push(t);
        }
        if !input.body.is_empty() {
            parts.push(g.constant(input.stacked(env.knowledge.d())?)?);
        }
        if parts.is_empty() {
            return Ok((instruction, None));
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let adapters = (!self.adapters.is_empty()).then_some(AdapterSet {
            layers: &self.adapters,
            store: ps,
        });
        let h_u = env.knowledge.forward_var(g, ks, x, adapters, dropout)?;
        Ok((instruction, Some(h_u)))
    }

    /// Decoder start state and encoder memory given knowledge rows, plus
    /// the number of fusion blocks applied (0 or 1).
    fn condition(
        &self,
        g: &mut Graph<'_, T>,
        ps: StoreRef,
        env: PolicyEnv<'_, T>,
        history: &[usize],
        enc: EncoderOutput,
        h_u: Option<Var>,
    ) -> Result<(EncoderOutput, Var, usize)> {
        let bos = self.arch.bos(g, ps)?;
        let h_u = h_u.filter(|&h| g.rows(h) > 0);
        match (&self.fusion, &self.knowledge_proj, h_u) {
            (Some(f), _, Some(h)) => {
                let start = f.start_state(g, ps, bos, Some(h))?;
                Ok((enc, start, 1))
            }
            (None, Some(proj), Some(h)) => {
                let rows = proj.forward(g, ps, h)?;
                let enc2 = self.arch.encode_with_prefix(g, ps, env.item_tokens, history, false, Some(rows))?;
                Ok((enc2, bos, 0))
            }
            _ => Ok((enc, bos, 0)),
        }
    }

    /// Full differentiable pass: encoder, instruction, knowledge, fusion.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        ps: StoreRef,
        ks: StoreRef,
        env: PolicyEnv<'_, T>,
        history: &[usize],
        dropout: &mut Option<AdapterDropout<'_>>,
    ) -> Result<PolicyForward> {
        let enc = self.arch.encode(g, ps, env.item_tokens, history, false)?;
        let h = pool_context(g, &enc)?;
        let (instruction, h_u) = self.knowledge_in_graph(g, ps, ks, env, h, history, dropout)?;
        let (enc, start, _) = self.condition(g, ps, env, history, enc, h_u)?;
        Ok(PolicyForward {
            instruction,
            h_u,
            enc,
            start,
        })
    }

    /// Nearline part: the knowledge matrix for `history` (runs the knowledge
    /// model once).
    pub fn compute_knowledge(&self, env: PolicyEnv<'_, T>, history: &[usize]) -> Result<Option<Tensor<T>>> {
        let mut g = Graph::inference();
        let ps = g.register(&self.store);
        let ks = g.register(&env.knowledge.store);
        let enc = self.arch.encode(&mut g, ps, env.item_tokens, history, false)?;
        let h = pool_context(&mut g, &enc)?;
        let (_, h_u) = self.knowledge_in_graph(&mut g, ps, ks, env, h, history, &mut None)?;
        Ok(h_u.map(|v| g.tensor(v)))
    }

    /// Knowledge for a user with no history: the instruction from a zero
    /// context and an empty text body.
    pub fn default_knowledge(&self, env: PolicyEnv<'_, T>) -> Result<Option<Tensor<T>>> {
        let mut g = Graph::inference();
        let ps = g.register(&self.store);
        let ks = g.register(&env.knowledge.store);
        let h = g.constant(Tensor::zeros(&[1, self.arch.d()]))?;
        let (_, h_u) = self.knowledge_in_graph(&mut g, ps, ks, env, h, &[], &mut None)?;
        Ok(h_u.map(|v| g.tensor(v)))
    }

    /// Online part: rank items using cached knowledge; never runs the
    /// knowledge model.
    #[allow(clippy::too_many_arguments)]
    pub fn rank_with_knowledge(
        &self,
        env: PolicyEnv<'_, T>,
        history: &[usize],
        h_u: Option<&Tensor<T>>,
        trie: &PrefixTrie,
        item_ids: &[String],
        k: usize,
        beam: usize,
    ) -> Result<Ranking<T>> {
        let mut g = Graph::inference();
        let ps = g.register(&self.store);
        let enc = self.arch.encode(&mut g, ps, env.item_tokens, history, false)?;
        let hv = match h_u {
            Some(t) => Some(g.constant(t.clone())?),
            None => None,
        };
        let (enc, start, fusion_calls) = self.condition(&mut g, ps, env, history, enc, hv)?;
        let items = self.arch.generate_topk(&mut g, ps, &enc, start, trie, item_ids, k, beam)?;
        Ok(Ranking { items, fusion_calls })
    }

    /// Score of every catalog sequence with cached knowledge.
    pub fn exhaustive_with_knowledge(
        &self,
        env: PolicyEnv<'_, T>,
        history: &[usize],
        h_u: Option<&Tensor<T>>,
        sequences: &[Vec<usize>],
    ) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let ps = g.register(&self.store);
        let enc = self.arch.encode(&mut g, ps, env.item_tokens, history, false)?;
        let hv = match h_u {
            Some(t) => Some(g.constant(t.clone())?),
            None => None,
        };
        let (enc, start, _) = self.condition(&mut g, ps, env, history, enc, hv)?;
        self.arch.exhaustive_scores(&mut g, ps, &enc, start, sequences)
    }
}
