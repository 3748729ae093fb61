//! User-side soft instructions: pooled context, K subspace projections,
//! straight-through codeword selection and projection into the knowledge
//! model's embedding space.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, LwgrError, Result};
use crate::gr_backbone::EncoderOutput;
use crate::nn::Linear;
use crate::numerics::{Graph, ParamId, ParamStore, StoreRef, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftInstructionConfig {
    /// Number of parallel codebooks.
    pub k: usize,
    /// Codewords per codebook.
    pub codewords: usize,
    pub tau: f64,
    /// Weight of the optional codeword-usage entropy bonus (off by default).
    pub entropy_weight: f64,
}

impl Default for SoftInstructionConfig {
    fn default() -> Self {
        Self {
            k: 5,
            codewords: 32,
            tau: 1.0,
            entropy_weight: 0.0,
        }
    }
}

/// Graph handles and plain values of one quantized instruction.
#[derive(Debug, Clone)]
pub struct SoftInstruction {
    pub indices: Vec<usize>,
    /// `1 × |V_k|` distributions.
    pub distributions: Vec<Var>,
    /// `1 × d_k` straight-through codeword vectors.
    pub st_vectors: Vec<Var>,
    /// `K × d_LLM` instruction tokens (`None` when K = 0).
    pub tokens: Option<Var>,
}

/// Mean of the valid encoder rows.
pub fn pool_context<T: Scalar>(g: &mut Graph<'_, T>, enc: &EncoderOutput) -> Result<Var> {
    if !enc.mask.iter().any(|&m| m) {
        return Err(contract("pool_context", "all encoder positions are masked"));
    }
    g.mean_rows(enc.h, Some(&enc.mask))
}

/// Straight-through selection of the codeword nearest to `u` (`1 × d_k`)
/// in `book` (`|V| × d_k`). Returns `(index, p, st_vector)`.
pub fn quantize_st<T: Scalar>(g: &mut Graph<'_, T>, u: Var, book: Var, tau: f64) -> Result<(usize, Var, Var)> {
    if tau <= 0.0 {
        return Err(contract("quantize_st", format!("temperature must be positive, got {tau}")));
    }
    let dist = g.sq_dist(u, book)?;
    let alpha = g.scale(dist, -T::one())?;
    let p = g.softmax(alpha, T::lit(tau))?;
    let idx = g.argmax_rows(alpha)?[0];
    let v = g.cols(p);
    let mut hard = vec![T::zero(); v];
    hard[idx] = T::one();
    let e = g.straight_through(Tensor::row(hard), p)?;
    let z = g.matmul(e, book)?;
    Ok((idx, p, z))
}

/// Orthogonal `n × n` matrix from Gram–Schmidt on a seeded Gaussian draw.
pub fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for b in &q {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    q.into_iter().flatten().collect()
}

/// Parallel (product) codebooks over K learned subspaces.
#[derive(Debug, Clone)]
pub struct UserCodebooks {
    pub k: usize,
    pub d: usize,
    pub d_k: usize,
    pub codewords: usize,
    pub d_llm: usize,
    pub tau: f64,
    pub projections: Vec<Linear>,
    pub books: Vec<ParamId>,
    /// Row-convention `d_k × d_LLM` maps (the transpose of `W_L^k`).
    pub to_llm: Vec<Linear>,
}

/// Subspace width for `d` split `k` ways.
pub fn subspace_dim(d: usize, k: usize) -> Result<usize> {
    if k == 0 || d / k == 0 {
        return Err(LwgrError::Config(format!("cannot split width {d} into {k} subspaces")));
    }
    Ok(d / k)
}

impl UserCodebooks {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &SoftInstructionConfig,
        d: usize,
        d_llm: usize,
        seed: u64,
    ) -> Result<Self> {
        if cfg.tau <= 0.0 {
            return Err(LwgrError::Config(format!("tau must be positive, got {}", cfg.tau)));
        }
        if cfg.codewords == 0 {
            return Err(LwgrError::Config("codebooks need at least one codeword".into()));
        }
        let d_k = if cfg.k == 0 { 0 } else { subspace_dim(d, cfg.k)? };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rot = random_orthogonal(d, &mut rng);
        let mut projections = Vec::with_capacity(cfg.k);
        let mut books = Vec::with_capacity(cfg.k);
        let mut to_llm = Vec::with_capacity(cfg.k);
        for k in 0..cfg.k {
            let lin = Linear::new(store, &format!("si.proj.{k}"), d, d_k, true, &mut rng);
            // columns k·d_k .. (k+1)·d_k of the rotation
            let w: Vec<T> = (0..d)
                .flat_map(|r| (0..d_k).map(move |c| (r, k * d_k + c)))
                .map(|(r, c)| T::lit(rot[r * d + c]))
                .collect();
            store.set_values(&format!("si.proj.{k}.w"), &[d, d_k], w)?;
            projections.push(lin);
            books.push(store.add_normal(&format!("si.book.{k}"), &[cfg.codewords, d_k], 1.0 / (d_k as f64).sqrt(), &mut rng));
            to_llm.push(Linear::new(store, &format!("si.to_llm.{k}"), d_k, d_llm, false, &mut rng));
        }
        Ok(Self {
            k: cfg.k,
            d,
            d_k,
            codewords: cfg.codewords,
            d_llm,
            tau: cfg.tau,
            projections,
            books,
            to_llm,
        })
    }

    /// `u^k = f_k(h)` for every subspace.
    pub fn project_subspaces<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef, h: Var) -> Result<Vec<Var>> {
        if g.shape(h) != (1, self.d) {
            return Err(contract("project_subspaces", format!("h {:?}, expected (1, {})", g.shape(h), self.d)));
        }
        self.projections.iter().map(|p| p.forward(g, s, h)).collect()
    }

    /// Full instruction from the pooled context.
    pub fn instruct<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef, h: Var) -> Result<SoftInstruction> {
        let us = self.project_subspaces(g, s, h)?;
        let mut out = SoftInstruction {
            indices: Vec::with_capacity(self.k),
            distributions: Vec::with_capacity(self.k),
            st_vectors: Vec::with_capacity(self.k),
            tokens: None,
        };
        let mut toks = Vec::with_capacity(self.k);
        for (k, u) in us.into_iter().enumerate() {
            let book = g.param(s, self.books[k])?;
            let (idx, p, z) = quantize_st(g, u, book, self.tau)?;
            toks.push(self.to_llm[k].forward(g, s, z)?);
            out.indices.push(idx);
            out.distributions.push(p);
            out.st_vectors.push(z);
        }
        if !toks.is_empty() {
            out.tokens = Some(g.concat_rows(&toks)?);
        }
        Ok(out)
    }

    pub fn export(&self, store: &ParamStore<impl Scalar>) -> CodebookExport {
        CodebookExport {
            k: self.k,
            codewords: self.codewords,
            d_k: self.d_k,
            tau: self.tau,
            books: self.books.iter().map(|&b| store.get(b).to_f64_vec()).collect(),
        }
    }
}

/// Residual quantization over a shared `d`-wide space: level `k` quantizes
/// what levels `< k` left unexplained.
#[derive(Debug, Clone)]
pub struct ResidualCodebooks {
    pub depth: usize,
    pub d: usize,
    pub codewords: usize,
    pub d_llm: usize,
    pub tau: f64,
    pub projection: Linear,
    pub books: Vec<ParamId>,
    pub to_llm: Vec<Linear>,
}

impl ResidualCodebooks {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &SoftInstructionConfig,
        d: usize,
        d_llm: usize,
        seed: u64,
    ) -> Result<Self> {
        if cfg.k == 0 || cfg.tau <= 0.0 || cfg.codewords == 0 {
            return Err(LwgrError::Config("residual quantizer needs depth >= 1, tau > 0 and codewords".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Linear::new(store, "si.rq.proj", d, d, true, &mut rng);
        let rot: Vec<T> = random_orthogonal(d, &mut rng).into_iter().map(T::lit).collect();
        store.set_values("si.rq.proj.w", &[d, d], rot)?;
        let mut books = Vec::new();
        let mut to_llm = Vec::new();
        for k in 0..cfg.k {
            // later levels model smaller residuals
            let std = 1.0 / (d as f64).sqrt() / (k as f64 + 1.0);
            books.push(store.add_normal(&format!("si.rq.book.{k}"), &[cfg.codewords, d], std, &mut rng));
            to_llm.push(Linear::new(store, &format!("si.rq.to_llm.{k}"), d, d_llm, false, &mut rng));
        }
        Ok(Self {
            depth: cfg.k,
            d,
            codewords: cfg.codewords,
            d_llm,
            tau: cfg.tau,
            projection,
            books,
            to_llm,
        })
    }

    pub fn instruct<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef, h: Var) -> Result<SoftInstruction> {
        let u = self.projection.forward(g, s, h)?;
        let books: Vec<Var> = self.books.iter().map(|&b| g.param(s, b)).collect::<Result<_>>()?;
        let (mut si, _) = quantize_rq(g, u, &books, self.tau)?;
        let toks = si
            .st_vectors
            .iter()
            .zip(&self.to_llm)
            .map(|(&z, lin)| lin.forward(g, s, z))
            .collect::<Result<Vec<_>>>()?;
        si.tokens = Some(g.concat_rows(&toks)?);
        Ok(si)
    }
}

/// Residual straight-through quantization of `u` against `books` in order.
/// Returns the instruction (without tokens) and the final residual.
pub fn quantize_rq<T: Scalar>(g: &mut Graph<'_, T>, u: Var, books: &[Var], tau: f64) -> Result<(SoftInstruction, Var)> {
    if books.is_empty() {
        return Err(contract("quantize_rq", "depth must be at least 1"));
    }
    let mut si = SoftInstruction {
        indices: Vec::new(),
        distributions: Vec::new(),
        st_vectors: Vec::new(),
        tokens: None,
    };
    let mut r = u;
    for &book in books {
        let (idx, p, z) = quantize_st(g, r, book, tau)?;
        r = g.sub(r, z)?;
        si.indices.push(idx);
        si.distributions.push(p);
        si.st_vectors.push(z);
    }
    Ok((si, r))
}

/// Ablation without codebooks: an MLP maps the pooled context straight to K
/// instruction tokens.
#[derive(Debug, Clone)]
pub struct MlpInstruction {
    pub k: usize,
    pub d_llm: usize,
    pub hidden: Linear,
    pub out: Linear,
}

impl MlpInstruction {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, k: usize, d: usize, d_llm: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(LwgrError::Config("MLP instruction needs k >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            k,
            d_llm,
            hidden: Linear::new(store, "si.mlp.hidden", d, 2 * d, true, &mut rng),
            out: Linear::new(store, "si.mlp.out", 2 * d, k * d_llm, true, &mut rng),
        })
    }

    pub fn instruct<T: Scalar>(&self, g: &mut Graph<'_, T>, s: StoreRef, h: Var) -> Result<SoftInstruction> {
        let x = self.hidden.forward(g, s, h)?;
        let x = g.relu(x)?;
        let x = self.out.forward(g, s, x)?;
        let rows = (0..self.k)
            .map(|k| g.slice_cols(x, k * self.d_llm, self.d_llm))
            .collect::<Result<Vec<_>>>()?;
        Ok(SoftInstruction {
            indices: Vec::new(),
            distributions: Vec::new(),
            st_vectors: Vec::new(),
            tokens: Some(g.concat_rows(&rows)?),
        })
    }
}

/// Mean entropy of the batch-averaged codeword usage, one term per codebook.
/// Adding `−w · entropy` to the loss spreads selections across codewords.
pub fn usage_entropy<T: Scalar>(g: &mut Graph<'_, T>, dists: &[Vec<Var>]) -> Result<Var> {
    let k = dists.first().map_or(0, |d| d.len());
    if k == 0 || dists.iter().any(|d| d.len() != k) {
        return Err(contract("usage_entropy", "every sample needs the same number of distributions"));
    }
    let mut terms = Vec::with_capacity(k);
    for kk in 0..k {
        let rows: Vec<Var> = dists.iter().map(|d| d[kk]).collect();
        let stacked = g.concat_rows(&rows)?;
        let mean = g.mean_rows(stacked, None)?;
        let v = g.value(mean).to_vec();
        let logp: Vec<T> = v.iter().map(|&p| p.max(T::lit(1e-12)).ln()).collect();
        let lp = g.constant(Tensor::row(logp))?;
        // holding log p fixed drops a −1 from the gradient, which vanishes
        // because perturbations of a distribution sum to zero
        let prod = g.mul(mean, lp)?;
        let ent = g.sum(prod)?;
        terms.push(g.scale(ent, -T::one())?);
    }
    let all = g.concat_rows(&terms)?;
    g.mean(all)
}

/// JSON export of trained codebooks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookExport {
    pub k: usize,
    pub codewords: usize,
    pub d_k: usize,
    pub tau: f64,
    /// Row-major `codewords × d_k` matrices.
    pub books: Vec<Vec<f64>>,
}

impl CodebookExport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Plain-array quantization, used by tests and the serving pipeline checks.
pub fn nearest_codeword(u: &[f64], book: &[f64], d_k: usize) -> usize {
    crate::item_tokenizer::nearest(u, book, d_k).0
}
