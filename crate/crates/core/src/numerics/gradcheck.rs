//! Central-difference gradient checking.
//!
//! Both entry points compare reverse-mode gradients against
//! `(f(θ + h) - f(θ - h)) / 2h`, coordinate by coordinate. Functions that
//! contain stop-gradients or argmax selections are differentiated as the
//! surrogate in which those quantities are frozen at the base point (see
//! [`FrozenTape`]).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FrozenTape, Gradients, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{contract, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Denominator floor for the relative error, so that two tiny gradients
    /// do not produce a huge ratio.
    pub abs_floor: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_coords_per_tensor: Option<usize>,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            abs_floor: 1e-6,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(tensor name, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            coords_checked: 0,
            worst: None,
        }
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.coords_checked += 1;
        if (rel > self.max_rel_error || self.worst.is_none())
            && rel >= self.max_rel_error {
                self.max_rel_error = rel;
                self.worst = Some((name.to_string(), idx, analytic, numeric));
            }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(len: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if let Some(k) = opts.max_coords_per_tensor {
        if k < len {
            idx.shuffle(rng);
            idx.truncate(k);
            idx.sort_unstable();
        }
    }
    idx
}

/// Checks a scalar function of free input tensors.
///
/// `f` builds the computation on a fresh graph from the leaf handles and
/// returns the scalar output.
pub fn check_leaves<T, F>(inputs: &[Tensor<T>], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor<T>], tape: Option<&FrozenTape<T>>, grads: Option<&mut Gradients<T>>| -> Result<(T, FrozenTape<T>, Vec<Var>)> {
        let mut g = Graph::new();
        match tape {
            Some(t) => g.replay_frozen(t.clone()),
            None => g.record_frozen(),
        }
        let leaves = vals
            .iter()
            .map(|t| g.leaf(t.clone().with_grad()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &leaves)?;
        if g.shape(out) != (1, 1) {
            return Err(contract("grad_check", "function output is not scalar"));
        }
        if let Some(gr) = grads {
            g.backward(out, gr)?;
        }
        let v = g.scalar(out);
        Ok((v, g.take_frozen(), leaves))
    };

    let mut grads = Gradients::new();
    let (v1, tape, leaves) = run(inputs, None, Some(&mut grads))?;
    let (v2, _, _) = run(inputs, None, None)?;
    if v1.as_f64().to_bits() != v2.as_f64().to_bits() {
        return Err(contract("grad_check", "function is not deterministic"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::new();
    let h = T::lit(opts.h);
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads
            .leaf(leaves[ti])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); t.len()]);
        for c in coords(t.len(), opts, &mut rng) {
            let mut plus = inputs.to_vec();
            plus[ti].values_mut()[c] += h;
            let mut minus = inputs.to_vec();
            minus[ti].values_mut()[c] -= h;
            let (fp, _, _) = run(&plus, Some(&tape), None)?;
            let (fm, _, _) = run(&minus, Some(&tape), None)?;
            let num = (fp.as_f64() - fm.as_f64()) / (2.0 * opts.h);
            report.record(&format!("input{ti}"), c, analytic[c].as_f64(), num, opts.abs_floor);
        }
    }
    Ok(report)
}

/// Checks a scalar function of the parameters in `store`.
///
/// `f(store, tape, grads)` evaluates the objective at the store's current
/// values. With `tape = None` it records a fresh frozen tape and returns it;
/// with `Some` it must replay it. When `grads` is given it accumulates the
/// analytic gradient. Only trainable parameters listed in `ids` are checked.
pub fn check_params<T, P, F>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>, Option<&P>, Option<&mut Gradients<T>>) -> Result<(T, P)>,
{
    let mut grads = Gradients::new();
    let (v1, tape) = f(store, None, Some(&mut grads))?;
    let (v2, _) = f(store, None, None)?;
    if v1.as_f64().to_bits() != v2.as_f64().to_bits() {
        return Err(contract("grad_check", "function is not deterministic"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::new();
    let h = T::lit(opts.h);
    for &id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let analytic = grads.param_or_zero(store, id);
        let name = store.name(id).to_string();
        for c in coords(store.get(id).len(), opts, &mut rng) {
            let orig = store.get(id).values()[c];
            store.get_mut(id).values_mut()[c] = orig + h;
            let (fp, _) = f(store, Some(&tape), None)?;
            store.get_mut(id).values_mut()[c] = orig - h;
            let (fm, _) = f(store, Some(&tape), None)?;
            store.get_mut(id).values_mut()[c] = orig;
            let num = (fp.as_f64() - fm.as_f64()) / (2.0 * opts.h);
            report.record(&name, c, analytic[c].as_f64(), num, opts.abs_floor);
        }
    }
    Ok(report)
}
