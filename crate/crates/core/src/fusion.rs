//! Cross-attention of the decoder start state over the knowledge matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, LwgrError, Result};
use crate::nn::{AttnAdapters, Attention};
use crate::numerics::{AttnMask, Graph, ParamStore, StoreRef, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// The fused vector becomes the start state.
    Replace,
    /// The fused vector is added to the BOS state.
    Residual,
}

impl std::str::FromStr for FusionMode {
    type Err = LwgrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(Self::Replace),
            "residual" => Ok(Self::Residual),
            other => Err(LwgrError::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub heads: usize,
    /// Start the output projection at zero, so the fused model initially
    /// reproduces the knowledge-free one in residual mode.
    pub zero_init_output: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Replace,
            heads: 4,
            zero_init_output: false,
        }
    }
}

/// Multi-head attention with the BOS vector as the only query.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub attn: Attention,
    pub mode: FusionMode,
}

impl FusionBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &FusionConfig, d: usize, d_llm: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attn = Attention::new(store, "fusion", d, d_llm, d, cfg.heads, &mut rng)?;
        if cfg.zero_init_output {
            store.set_values("fusion.o.w", &[d, d], vec![T::zero(); d * d])?;
        }
        Ok(Self { attn, mode: cfg.mode })
    }

    /// `q̃0 = MHA(q0, H_u, H_u)`. An empty knowledge matrix bypasses fusion
    /// and returns `q0`.
    pub fn fuse_bos<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef, q0: Var, h_u: Option<Var>) -> Result<Var> {
        let Some(h) = h_u.filter(|&h| g.rows(h) > 0) else { return Ok(q0) };
        if g.rows(q0) != 1 {
            return Err(contract("fuse_bos", format!("query must be one row, got {:?}", g.shape(q0))));
        }
        self.attn
            .forward(g, s, q0, h, &AttnMask::Full(None), AttnAdapters::default(), &mut None)
    }

    /// Decoder start state from the BOS vector and the knowledge matrix.
    pub fn start_state<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef, q0: Var, h_u: Option<Var>) -> Result<Var> {
        let Some(h) = h_u.filter(|&h| g.rows(h) > 0) else { return Ok(q0) };
        let fused = self.fuse_bos(g, s, q0, Some(h))?;
        combine(g, q0, fused, self.mode)
    }
}

/// `replace → q̃0`, `residual → q0 + q̃0`.
pub fn combine<T: Scalar>(g: &mut Graph<'_, T>, q0: Var, fused: Var, mode: FusionMode) -> Result<Var> {
    match mode {
        FusionMode::Replace => Ok(fused),
        FusionMode::Residual => g.add(q0, fused),
    }
}
