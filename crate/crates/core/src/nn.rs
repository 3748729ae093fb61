//! Transformer building blocks shared by the recommender, the knowledge
//! model and the fusion block.
//!
//! Everything uses the row convention: activations are `n × d` matrices and
//! a linear map is `x · W` with `W` stored as `d_in × d_out`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::numerics::{AttnMask, Graph, ParamId, ParamStore, StoreRef, Tensor, Var};
use crate::scalar::Scalar;

/// Affine map `x · W (+ b)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(&format!("{name}.w"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng);
        let b = bias.then(|| store.add_const(&format!("{name}.b"), &[1, d_out], 0.0));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef, x: Var) -> Result<Var> {
        let w = g.param(s, self.w)?;
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(s, b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_const(&format!("{name}.g"), &[1, d], 1.0),
            bias: store.add_const(&format!("{name}.b"), &[1, d], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef, x: Var) -> Result<Var> {
        let gain = g.param(s, self.gain)?;
        let bias = g.param(s, self.bias)?;
        g.layer_norm(x, gain, bias, T::lit(LN_EPS))
    }
}

/// Low-rank update of one projection: `ΔW = scale · A · B`.
///
/// With `A` of shape `d_out × r` and `B` of shape `r × d_in` (column
/// convention), the row-convention weight update is `scale · Bᵀ Aᵀ`; the
/// store holds `down = Bᵀ` (`d_in × r`) and `up = Aᵀ` (`r × d_out`).
#[derive(Debug, Clone)]
pub struct Lora {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl Lora {
    /// `up` starts at zero so the adapted layer initially equals the base.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(crate::LwgrError::Config(format!(
                "lora rank {rank} must be in 1..{} for a {d_in}x{d_out} layer",
                d_in.min(d_out)
            )));
        }
        let down = store.add_normal(&format!("{name}.lora_down"), &[d_in, rank], 1.0 / (d_in as f64).sqrt(), rng);
        let up = store.add_const(&format!("{name}.lora_up"), &[rank, d_out], 0.0);
        Ok(Self { down, up, rank, scale })
    }

    /// `A` in the column convention (`d_out × r`).
    pub fn a_matrix<T: Scalar>(&self, store: &ParamStore<T>) -> Tensor<T> {
        transpose(store.get(self.up))
    }

    /// `B` in the column convention (`r × d_in`).
    pub fn b_matrix<T: Scalar>(&self, store: &ParamStore<T>) -> Tensor<T> {
        transpose(store.get(self.down))
    }

    /// Row-convention merged weight `W + scale · Bᵀ Aᵀ`.
    pub fn merged<T: Scalar>(&self, base: &Tensor<T>, store: &ParamStore<T>) -> Tensor<T> {
        let down = store.get(self.down);
        let up = store.get(self.up);
        let (d_in, d_out) = (base.rows(), base.cols());
        let delta = crate::numerics::matmul_raw(down.values(), up.values(), d_in, self.rank, d_out);
        let sc = T::lit(self.scale);
        let vals = base.values().iter().zip(&delta).map(|(&w, &d)| w + sc * d).collect();
        Tensor::matrix(d_in, d_out, vals).expect("merged shape")
    }
}

pub(crate) fn transpose<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.values()[i * c + j];
        }
    }
    Tensor::matrix(c, r, out).expect("transpose shape")
}

/// Adapter attached to a projection, plus where its weights live.
#[derive(Clone, Copy)]
pub struct LoraCall<'l> {
    pub lora: &'l Lora,
    pub store: StoreRef,
}

/// Dropout on the adapter input, active only while training.
pub struct AdapterDropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn adapted<T: Scalar>(
    g: &mut Graph<'_, T>,
    lin: &Linear,
    s: StoreRef,
    x: Var,
    lora: Option<LoraCall<'_>>,
    dropout: &mut Option<AdapterDropout<'_>>,
) -> Result<Var> {
    let y = lin.forward(g, s, x)?;
    let Some(lc) = lora else { return Ok(y) };
    let xin = match dropout {
        Some(d) if d.rate > 0.0 => {
            let (r, c) = g.shape(x);
            let keep = 1.0 / (1.0 - d.rate);
            let mask: Vec<T> = (0..r * c)
                .map(|_| if d.rng.gen::<f64>() < d.rate { T::zero() } else { T::lit(keep) })
                .collect();
            let m = g.constant(Tensor::matrix(r, c, mask)?)?;
            g.mul(x, m)?
        }
        _ => x,
    };
    let down = g.param(lc.store, lc.lora.down)?;
    let up = g.param(lc.store, lc.lora.up)?;
    let h = g.matmul(xin, down)?;
    let h = g.matmul(h, up)?;
    let h = g.scale(h, T::lit(lc.lora.scale))?;
    g.add(y, h)
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Optional query/value adapters for one attention block.
#[derive(Clone, Copy, Default)]
pub struct AttnAdapters<'l> {
    pub q: Option<LoraCall<'l>>,
    pub v: Option<LoraCall<'l>>,
}

impl Attention {
    /// `d_q` is the query-side input width, `d_kv` the key/value-side width;
    /// the inner and output widths are `d`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_q: usize,
        d_kv: usize,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(crate::LwgrError::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_q, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            heads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        x: Var,
        kv: Var,
        mask: &AttnMask,
        adapters: AttnAdapters<'_>,
        dropout: &mut Option<AdapterDropout<'_>>,
    ) -> Result<Var> {
        let q = adapted(g, &self.q, s, x, adapters.q, dropout)?;
        let k = self.k.forward(g, s, kv)?;
        let v = adapted(g, &self.v, s, kv, adapters.v, dropout)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, s, a)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef, x: Var) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = g.relu(h)?;
        self.down.forward(g, s, h)
    }
}

/// Pre-LN self-attention layer (encoder, or causal stack when given a
/// causal mask).
#[derive(Debug, Clone)]
pub struct SelfAttnLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl SelfAttnLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, d, d, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn, rng),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        x: Var,
        mask: &AttnMask,
        adapters: AttnAdapters<'_>,
        dropout: &mut Option<AdapterDropout<'_>>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let a = self.attn.forward(g, s, h, h, mask, adapters, dropout)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, h)?;
        g.add(x, f)
    }
}

/// Pre-LN decoder layer: causal self-attention, cross-attention over the
/// encoder memory, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross: Attention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: Attention::new(store, &format!("{name}.self"), d, d, d, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            cross: Attention::new(store, &format!("{name}.cross"), d, d, d, heads, rng)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn, rng),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: StoreRef,
        x: Var,
        memory: Var,
        self_mask: &AttnMask,
        memory_mask: &AttnMask,
    ) -> Result<Var> {
        let none = &mut None;
        let h = self.ln1.forward(g, s, x)?;
        let a = self.self_attn.forward(g, s, h, h, self_mask, AttnAdapters::default(), none)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, s, x)?;
        let c = self.cross.forward(g, s, h, memory, memory_mask, AttnAdapters::default(), none)?;
        let x = g.add(x, c)?;
        let h = self.ln3.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, h)?;
        g.add(x, f)
    }
}

/// Checks that a token id is inside a vocabulary.
pub(crate) fn check_token(op: &'static str, tok: usize, vocab: usize) -> Result<()> {
    if tok >= vocab {
        return Err(contract(op, format!("token {tok} outside vocabulary of {vocab}")));
    }
    Ok(())
}
