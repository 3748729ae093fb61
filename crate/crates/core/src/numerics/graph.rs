use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{contract, numeric, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Handle to a parameter store registered with a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreRef(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum GradKey {
    Param { store: u64, index: usize },
    Leaf(usize),
}

/// Accumulated gradients, keyed by parameter (store id + index) or by free
/// leaf node. Backward passes add into it, so running backward twice without
/// clearing doubles every entry.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    map: BTreeMap<GradKey, Vec<T>>,
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    fn add(&mut self, key: GradKey, g: &[T]) {
        match self.map.get_mut(&key) {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => {
                self.map.insert(key, g.to_vec());
            }
        }
    }

    /// Gradient of a parameter; `None` when nothing reached it.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Option<&[T]> {
        self.map
            .get(&GradKey::Param {
                store: store.uid(),
                index: id.index(),
            })
            .map(|v| v.as_slice())
    }

    /// Gradient of a parameter, zeros when unreachable.
    pub fn param_or_zero(&self, store: &ParamStore<T>, id: ParamId) -> Vec<T> {
        self.param(store, id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); store.get(id).len()])
    }

    /// Gradient of a free leaf created with [`Graph::leaf`].
    pub fn leaf(&self, v: Var) -> Option<&[T]> {
        self.map.get(&GradKey::Leaf(v.0)).map(|v| v.as_slice())
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise sum with another gradient map (the merge step for
    /// gradients produced on separate graphs).
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (k, g) in &other.map {
            self.add(*k, g);
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.map.values_mut() {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    /// Euclidean norm over the gradients belonging to `store`.
    pub fn norm_for(&self, store: &ParamStore<T>) -> T {
        let uid = store.uid();
        let mut s = T::zero();
        for (k, g) in &self.map {
            if matches!(k, GradKey::Param { store, .. } if *store == uid) {
                for &x in g {
                    s += x * x;
                }
            }
        }
        s.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// Copies the gradients of `store` into its tensors' `grad` fields.
    pub fn write_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if let Some(g) = self.param(store, id).map(|g| g.to_vec()) {
                store.get_mut(id).accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}

/// Values recorded at stop-gradient and discrete-selection points.
///
/// Replaying a tape holds those values fixed, which turns a function that
/// contains `sg[·]` or an argmax into the smooth surrogate whose exact
/// derivative equals the straight-through gradient. Finite-difference checks
/// run against that surrogate.
#[derive(Debug, Clone, Default)]
pub struct FrozenTape<T> {
    values: Vec<Vec<T>>,
    picks: Vec<Vec<usize>>,
}

#[derive(Debug)]
enum Freeze<T> {
    Off,
    Record(FrozenTape<T>),
    Replay {
        tape: FrozenTape<T>,
        next_value: usize,
        next_pick: usize,
    },
}

/// Key validity window for one query row of [`Graph::attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub lo: usize,
    pub hi: usize,
}

/// Which keys each query row may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key whose mask entry is `true` (or all keys).
    Full(Option<Vec<bool>>),
    /// Rows are grouped into consecutive blocks of `block` rows; row `i` sees
    /// keys from the start of its block through `i` (queries and keys share
    /// the row layout).
    BlockCausal { block: usize },
}

enum Val<'a, T> {
    Owned(Vec<T>),
    Borrowed(&'a [T]),
}

impl<T> Val<'_, T> {
    fn as_slice(&self) -> &[T] {
        match self {
            Val::Owned(v) => v,
            Val::Borrowed(s) => s,
        }
    }
}

enum Op<T> {
    Constant,
    Leaf,
    Param { store: u64, index: usize, trainable: bool },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Softmax { x: Var, tau: T },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    MeanRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Nll { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    MaxConst { x: Var, c: T },
    StopGradient,
    StraightThrough { soft: Var },
    SqDist(Var, Var),
    Sum(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: T, spans: Vec<Span>, probs: Vec<T>, offsets: Vec<usize> },
}

struct Node<'a, T> {
    rows: usize,
    cols: usize,
    value: Val<'a, T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations, rebuilt for every forward pass.
///
/// Nodes are appended in execution order, so the tape is a topological order
/// by construction and backward walks it once in reverse.
pub struct Graph<'a, T> {
    stores: Vec<&'a ParamStore<T>>,
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
    freeze: Freeze<T>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite_or_err<T: Scalar>(op: &'static str, vals: &[T]) -> Result<()> {
    if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
        return Err(numeric(op, format!("non-finite output at flat index {i}")));
    }
    Ok(())
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            stores: Vec::new(),
            nodes: Vec::new(),
            grad_enabled: true,
            freeze: Freeze::Off,
        }
    }

    /// A graph that records no gradient information (inference).
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn register(&mut self, store: &'a ParamStore<T>) -> StoreRef {
        if let Some(i) = self.stores.iter().position(|s| s.uid() == store.uid()) {
            return StoreRef(i);
        }
        self.stores.push(store);
        StoreRef(self.stores.len() - 1)
    }

    pub fn record_frozen(&mut self) {
        self.freeze = Freeze::Record(FrozenTape::default());
    }

    pub fn replay_frozen(&mut self, tape: FrozenTape<T>) {
        self.freeze = Freeze::Replay {
            tape,
            next_value: 0,
            next_pick: 0,
        };
    }

    /// Returns the recorded tape (empty unless recording was enabled).
    pub fn take_frozen(&mut self) -> FrozenTape<T> {
        match std::mem::replace(&mut self.freeze, Freeze::Off) {
            Freeze::Record(t) => t,
            Freeze::Replay { tape, .. } => tape,
            Freeze::Off => FrozenTape::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape")
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        debug_assert_eq!(rows * cols, value.len());
        finite_or_err(name, &value)?;
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // attention keeps its weights for inspection even without gradients
        let op = if requires_grad || matches!(op, Op::Attention { .. }) { op } else { Op::Constant };
        self.nodes.push(Node {
            rows,
            cols,
            value: Val::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims_of(t: &Tensor<T>) -> (usize, usize) {
        (t.rows(), t.cols())
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        t.check_finite("constant")?;
        let (r, c) = Self::dims_of(&t);
        self.nodes.push(Node {
            rows: r,
            cols: c,
            value: Val::Owned(t.into_values()),
            op: Op::Constant,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Free input whose gradient is reported via [`Gradients::leaf`] when
    /// `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        t.check_finite("leaf")?;
        let (r, c) = Self::dims_of(&t);
        let rg = t.requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            rows: r,
            cols: c,
            value: Val::Owned(t.into_values()),
            op: if rg { Op::Leaf } else { Op::Constant },
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, store: StoreRef, id: ParamId) -> Result<Var> {
        let s: &'a ParamStore<T> = self.stores[store.0];
        let t: &'a Tensor<T> = s.get(id);
        t.check_finite("param")?;
        let trainable = t.requires_grad;
        let (r, c) = Self::dims_of(t);
        self.nodes.push(Node {
            rows: r,
            cols: c,
            value: Val::Borrowed(t.values()),
            op: Op::Param {
                store: s.uid(),
                index: id.index(),
                trainable,
            },
            // frozen parameters are differentiable-through but never collect
            requires_grad: trainable && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(contract(op, format!("shapes {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(contract("matmul", format!("[{n}x{k}] x [{k2}x{m}]")));
        }
        let out = matmul_raw(self.value(a), self.value(b), n, k, m);
        self.push(n, m, out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        let out = transpose_raw(self.value(a), n, m);
        self.push(m, n, out, Op::Transpose(a), &[a], "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let (r, c) = self.shape(a);
        self.push(r, c, out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(row) != (1, m) {
            return Err(contract("add_row", format!("[{n}x{m}] + {:?}", self.shape(row))));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(m)
            .flat_map(|xs| xs.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        self.push(n, m, out, Op::AddRow(a, row), &[a, row], "add_row")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let (r, cc) = self.shape(a);
        self.push(r, cc, out, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let (r, cc) = self.shape(a);
        self.push(r, cc, out, Op::AddScalar(a), &[a], "add_scalar")
    }

    /// Row-wise `softmax(x / tau)`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, tau: T) -> Result<Var> {
        if !(tau > T::zero()) {
            return Err(contract("softmax", format!("temperature {tau} must be positive")));
        }
        let (n, m) = self.shape(x);
        let mut out = Vec::with_capacity(n * m);
        for row in self.value(x).chunks(m) {
            out.extend(softmax_row(row, tau));
        }
        self.push(n, m, out, Op::Softmax { x, tau }, &[x], "softmax")
    }

    /// Row-wise layer normalization with learned gain and bias (`1 × d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(contract(
                "layer_norm",
                format!("x [{n}x{d}], gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let dn = T::lit(d as f64);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in self.value(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        self.push(n, d, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias], "layer_norm")
    }

    /// Selects rows of `table` by index; this is the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(contract("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(ids.len(), d, out, Op::Gather { table, ids: ids.to_vec() }, &[table], "gather_rows")
    }

    /// Mean over the rows whose `keep` flag is set (all rows when `None`).
    pub fn mean_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (n, d) = self.shape(x);
        let rows: Vec<usize> = match keep {
            Some(k) => {
                if k.len() != n {
                    return Err(contract("mean_rows", format!("mask length {} for {n} rows", k.len())));
                }
                (0..n).filter(|&i| k[i]).collect()
            }
            None => (0..n).collect(),
        };
        if rows.is_empty() {
            return Err(contract("mean_rows", "no valid rows to pool"));
        }
        let xv = self.value(x);
        let inv = T::one() / T::lit(rows.len() as f64);
        let mut out = vec![T::zero(); d];
        for &r in &rows {
            for (o, &v) in out.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        self.push(1, d, out, Op::MeanRows { x, rows }, &[x], "mean_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_rows", "no inputs"));
        }
        let d = self.cols(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.cols(p) != d {
                return Err(contract("concat_rows", format!("column counts {d} and {}", self.cols(p))));
            }
            rows += self.rows(p);
            out.extend_from_slice(self.value(p));
        }
        self.push(rows, d, out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_cols", "no inputs"));
        }
        let n = self.rows(parts[0]);
        if let Some(&p) = parts.iter().find(|&&p| self.rows(p) != n) {
            return Err(contract("concat_cols", format!("row counts {n} and {}", self.rows(p))));
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        self.push(n, total, out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.shape(x);
        if start + len > m {
            return Err(contract("slice_cols", format!("cols {start}..{} of {m}", start + len)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv[r * m + start..r * m + start + len]);
        }
        self.push(n, len, out, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.rows(x);
        if start + len > n {
            return Err(contract("slice_rows", format!("rows {start}..{} of {n}", start + len)));
        }
        let ids: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &ids)
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(logits)`;
    /// returns an `n × 1` column.
    pub fn nll(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, m) = self.shape(logits);
        if targets.len() != n {
            return Err(contract("nll", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= m) {
            return Err(contract("nll", format!("target {t} out of range for {m} classes")));
        }
        let mut probs = Vec::with_capacity(n * m);
        let mut out = Vec::with_capacity(n);
        for (row, &t) in self.value(logits).chunks(m).zip(targets) {
            let (lse, p) = log_sum_exp_and_probs(row);
            out.push(lse - row[t]);
            probs.extend(p);
        }
        self.push(n, 1, out, Op::Nll { logits, targets: targets.to_vec(), probs }, &[logits], "nll")
    }

    /// Elementwise `max(x, c)`: ReLU for `c = 0`, hinge in general.
    pub fn max_const(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| if v > c { v } else { c }).collect();
        let (r, cc) = self.shape(x);
        self.push(r, cc, out, Op::MaxConst { x, c }, &[x], "max_const")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.max_const(x, T::zero())
    }

    fn frozen_value(&mut self, current: Vec<T>, op: &'static str) -> Result<Vec<T>> {
        match &mut self.freeze {
            Freeze::Off => Ok(current),
            Freeze::Record(tape) => {
                tape.values.push(current.clone());
                Ok(current)
            }
            Freeze::Replay { tape, next_value, .. } => {
                let v = tape
                    .values
                    .get(*next_value)
                    .cloned()
                    .ok_or_else(|| contract(op, "frozen tape exhausted"))?;
                if v.len() != current.len() {
                    return Err(contract(op, "frozen tape entry has wrong length"));
                }
                *next_value += 1;
                Ok(v)
            }
        }
    }

    /// Passes values through and blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let v = self.frozen_value(self.value(x).to_vec(), "stop_gradient")?;
        self.nodes.push(Node {
            rows: r,
            cols: c,
            value: Val::Owned(v),
            op: Op::StopGradient,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Row-wise argmax (lowest index on ties). Recorded and replayed like a
    /// stop-gradient value.
    pub fn argmax_rows(&mut self, x: Var) -> Result<Vec<usize>> {
        let m = self.cols(x);
        let picks: Vec<usize> = self.value(x).chunks(m).map(argmax).collect();
        match &mut self.freeze {
            Freeze::Off => Ok(picks),
            Freeze::Record(tape) => {
                tape.picks.push(picks.clone());
                Ok(picks)
            }
            Freeze::Replay { tape, next_pick, .. } => {
                let p = tape
                    .picks
                    .get(*next_pick)
                    .cloned()
                    .ok_or_else(|| contract("argmax_rows", "frozen tape exhausted"))?;
                *next_pick += 1;
                Ok(p)
            }
        }
    }

    /// Straight-through combination `hard - sg[soft] + soft`.
    ///
    /// The forward value is exactly `hard` (no rounding from the add/sub
    /// pair); the backward pass hands the incoming gradient to `soft`
    /// unchanged.
    pub fn straight_through(&mut self, hard: Tensor<T>, soft: Var) -> Result<Var> {
        if Self::dims_of(&hard) != self.shape(soft) {
            return Err(contract(
                "straight_through",
                format!("hard {:?} vs soft {:?}", hard.shape(), self.shape(soft)),
            ));
        }
        let (r, c) = self.shape(soft);
        // the hard part and sg[soft] are stop-gradient quantities
        let hv = self.frozen_value(hard.into_values(), "straight_through")?;
        let now = self.value(soft).to_vec();
        let held = self.frozen_value(now.clone(), "straight_through")?;
        let v = if matches!(self.freeze, Freeze::Replay { .. }) {
            // surrogate away from the base point: hard + (soft - sg[soft])
            hv.iter().zip(now.iter().zip(&held)).map(|(&h, (&s, &s0))| h + (s - s0)).collect()
        } else {
            hv
        };
        self.push(r, c, v, Op::StraightThrough { soft }, &[soft], "straight_through")
    }

    /// Pairwise squared Euclidean distances between rows: `[n×d],[m×d] -> [n×m]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.shape(a);
        let (m, d2) = self.shape(b);
        if d != d2 {
            return Err(contract("sq_dist", format!("[{n}x{d}] vs [{m}x{d2}]")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &bv[j * d..(j + 1) * d];
                out.push(ai.iter().zip(bj).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
        }
        self.push(n, m, out, Op::SqDist(a, b), &[a, b], "sq_dist")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `n × D`, `k` and `v` are `m × D`; heads split the columns into
    /// `heads` equal groups and the output concatenates them back (`n × D`).
    /// A row with no visible keys outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Result<Var> {
        let (n, dm) = self.shape(q);
        let (m, dk) = self.shape(k);
        if dk != dm || self.shape(v) != (m, dm) || heads == 0 || dm % heads != 0 {
            return Err(contract(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, heads {heads}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        let (spans, keep) = match mask {
            AttnMask::Full(keep) => {
                if let Some(kp) = keep {
                    if kp.len() != m {
                        return Err(contract("attention", format!("key mask length {} for {m} keys", kp.len())));
                    }
                }
                (vec![Span { lo: 0, hi: m }; n], keep.clone())
            }
            AttnMask::BlockCausal { block } => {
                if *block == 0 || n != m || n % block != 0 {
                    return Err(contract("attention", format!("block-causal needs n == m divisible by {block}; n={n}, m={m}")));
                }
                ((0..n).map(|i| Span { lo: i - i % block, hi: i + 1 }).collect(), None)
            }
        };
        let dh = dm / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut offsets = Vec::with_capacity(n + 1);
        let mut total = 0;
        for s in &spans {
            offsets.push(total);
            total += (s.hi - s.lo) * heads;
        }
        offsets.push(total);
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); n * dm];
        let mut scores = Vec::new();
        for i in 0..n {
            let Span { lo, hi } = spans[i];
            let width = hi - lo;
            for h in 0..heads {
                let qi = &qv[i * dm + h * dh..i * dm + (h + 1) * dh];
                scores.clear();
                let mut mx = T::neg_infinity();
                for j in lo..hi {
                    let visible = keep.as_ref().is_none_or(|kp| kp[j]);
                    if visible {
                        let kj = &kv[j * dm + h * dh..j * dm + (h + 1) * dh];
                        let s = dot(qi, kj) * scale;
                        if s > mx {
                            mx = s;
                        }
                        scores.push(Some(s));
                    } else {
                        scores.push(None);
                    }
                }
                if mx == T::neg_infinity() {
                    continue;
                }
                let base = offsets[i] + h * width;
                let mut z = T::zero();
                for (t, s) in scores.iter().enumerate() {
                    if let Some(s) = s {
                        let e = (*s - mx).exp();
                        probs[base + t] = e;
                        z += e;
                    }
                }
                let oi = &mut out[i * dm + h * dh..i * dm + (h + 1) * dh];
                for t in 0..width {
                    let p = probs[base + t] / z;
                    probs[base + t] = p;
                    if p != T::zero() {
                        let j = lo + t;
                        let vj = &vv[j * dm + h * dh..j * dm + (h + 1) * dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.push(
            n,
            dm,
            out,
            Op::Attention { q, k, v, heads, scale, spans, probs, offsets },
            &[q, k, v],
            "attention",
        )
    }

    /// Attention weights of query row `i`, head `h`, over its key span.
    pub fn attention_weights(&self, out: Var, i: usize, h: usize) -> Option<(Span, Vec<T>)> {
        match &self.nodes[out.0].op {
            Op::Attention { spans, probs, offsets, heads, .. } => {
                let s = spans[i];
                let w = s.hi - s.lo;
                let base = offsets[i] + h.min(heads - 1) * w;
                Some((s, probs[base..base + w].to_vec()))
            }
            _ => None,
        }
    }

    /// Backpropagates from a scalar loss with unit seed.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<T>) -> Result<()> {
        self.backward_seeded(&[(loss, T::one())], grads)
    }

    /// Backpropagates `Σ weight · d(var)` for scalar `var`s in one sweep.
    pub fn backward_seeded(&self, seeds: &[(Var, T)], grads: &mut Gradients<T>) -> Result<()> {
        let mut node_grads: Vec<Option<Vec<T>>> = Vec::new();
        node_grads.resize_with(self.nodes.len(), || None);
        let mut top = 0;
        for &(v, w) in seeds {
            if self.shape(v) != (1, 1) {
                return Err(contract("backward", format!("loss must be scalar, got {:?}", self.shape(v))));
            }
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let g = node_grads[v.0].get_or_insert_with(|| vec![T::zero()]);
            g[0] += w;
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(gout) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, node, &gout, &mut node_grads, grads);
        }
        Ok(())
    }

    fn acc(&self, node_grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.value(v).len();
        let buf = node_grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }

    fn propagate(&self, i: usize, node: &Node<'a, T>, gout: &[T], ng: &mut [Option<Vec<T>>], grads: &mut Gradients<T>) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Constant | Op::StopGradient => {}
            Op::Leaf => grads.add(GradKey::Leaf(i), gout),
            Op::Param { store, index, trainable } => {
                if *trainable {
                    grads.add(GradKey::Param { store: *store, index: *index }, gout);
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.cols(*b);
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(ng, *a, |ga| {
                    // dA = dC · Bᵀ
                    for r in 0..n {
                        let gr = &gout[r * m..(r + 1) * m];
                        for c in 0..k {
                            ga[r * k + c] += dot(gr, &bv[c * m..(c + 1) * m]);
                        }
                    }
                });
                self.acc(ng, *b, |gb| {
                    // dB = Aᵀ · dC
                    for r in 0..n {
                        let gr = &gout[r * m..(r + 1) * m];
                        for c in 0..k {
                            let a_rc = av[r * k + c];
                            if a_rc != T::zero() {
                                axpy(a_rc, gr, &mut gb[c * m..(c + 1) * m]);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let t = transpose_raw(gout, rows, cols);
                self.acc(ng, *a, |ga| add_into(ga, &t));
            }
            Op::Add(a, b) => {
                self.acc(ng, *a, |ga| add_into(ga, gout));
                self.acc(ng, *b, |gb| add_into(gb, gout));
            }
            Op::Sub(a, b) => {
                self.acc(ng, *a, |ga| add_into(ga, gout));
                self.acc(ng, *b, |gb| {
                    for (g, &x) in gb.iter_mut().zip(gout) {
                        *g -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(ng, *a, |ga| {
                    for ((g, &x), &y) in ga.iter_mut().zip(gout).zip(bv) {
                        *g += x * y;
                    }
                });
                self.acc(ng, *b, |gb| {
                    for ((g, &x), &y) in gb.iter_mut().zip(gout).zip(av) {
                        *g += x * y;
                    }
                });
            }
            Op::AddRow(a, r) => {
                self.acc(ng, *a, |ga| add_into(ga, gout));
                self.acc(ng, *r, |gr| {
                    for row in gout.chunks(cols) {
                        add_into(gr, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(ng, *a, |ga| axpy(*c, gout, ga));
            }
            Op::AddScalar(a) => {
                self.acc(ng, *a, |ga| add_into(ga, gout));
            }
            Op::Softmax { x, tau } => {
                let y = node.value.as_slice();
                self.acc(ng, *x, |gx| {
                    for ((gxr, yr), gr) in gx.chunks_mut(cols).zip(y.chunks(cols)).zip(gout.chunks(cols)) {
                        let s = dot(yr, gr);
                        for ((g, &yy), &gg) in gxr.iter_mut().zip(yr).zip(gr) {
                            *g += yy * (gg - s) / *tau;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = cols;
                let gv = self.value(*gain);
                let dn = T::lit(d as f64);
                self.acc(ng, *x, |gx| {
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = gr[j] * gv[j];
                        }
                        let m1 = dxh.iter().copied().sum::<T>() / dn;
                        let m2 = dot(&dxh, xh) / dn;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                self.acc(ng, *gain, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(ng, *bias, |gb| {
                    for row in gout.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Gather { table, ids } => {
                self.acc(ng, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &gout[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::MeanRows { x, rows: kept } => {
                let inv = T::one() / T::lit(kept.len() as f64);
                self.acc(ng, *x, |gx| {
                    for &r in kept {
                        axpy(inv, gout, &mut gx[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let seg = &gout[off..off + len];
                    self.acc(ng, p, |gp| add_into(gp, seg));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.cols(p);
                    self.acc(ng, p, |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &gout[r * cols + start..r * cols + start + c]);
                        }
                    });
                    start += c;
                }
            }
            Op::SliceCols { x, start } => {
                let m = self.cols(*x);
                self.acc(ng, *x, |gx| {
                    for r in 0..rows {
                        add_into(&mut gx[r * m + start..r * m + start + cols], &gout[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Nll { logits, targets, probs } => {
                let m = self.cols(*logits);
                self.acc(ng, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let go = gout[r];
                        for c in 0..m {
                            gl[r * m + c] += go * probs[r * m + c];
                        }
                        gl[r * m + t] -= go;
                    }
                });
            }
            Op::MaxConst { x, c } => {
                let xv = self.value(*x);
                self.acc(ng, *x, |gx| {
                    for ((g, &go), &v) in gx.iter_mut().zip(gout).zip(xv) {
                        if v > *c {
                            *g += go;
                        }
                    }
                });
            }
            Op::StraightThrough { soft } => {
                self.acc(ng, *soft, |gs| add_into(gs, gout));
            }
            Op::SqDist(a, b) => {
                let (n, d) = self.shape(*a);
                let m = self.rows(*b);
                let (av, bv) = (self.value(*a), self.value(*b));
                let two = T::lit(2.0);
                self.acc(ng, *a, |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            let w = two * gout[i * m + j];
                            for t in 0..d {
                                ga[i * d + t] += w * (av[i * d + t] - bv[j * d + t]);
                            }
                        }
                    }
                });
                self.acc(ng, *b, |gb| {
                    for i in 0..n {
                        for j in 0..m {
                            let w = two * gout[i * m + j];
                            for t in 0..d {
                                gb[j * d + t] -= w * (av[i * d + t] - bv[j * d + t]);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g = gout[0];
                self.acc(ng, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g;
                    }
                });
            }
            Op::Attention { q, k, v, heads, scale, spans, probs, offsets } => {
                self.attention_backward(gout, *q, *k, *v, *heads, *scale, spans, probs, offsets, ng);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gout: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        spans: &[Span],
        probs: &[T],
        offsets: &[usize],
        ng: &mut [Option<Vec<T>>],
    ) {
        let (n, dm) = self.shape(q);
        let m = self.rows(k);
        let dh = dm / heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![T::zero(); n * dm];
        let mut gk = vec![T::zero(); m * dm];
        let mut gv = vec![T::zero(); m * dm];
        let mut dw = Vec::new();
        for i in 0..n {
            let Span { lo, hi } = spans[i];
            let width = hi - lo;
            for h in 0..heads {
                let base = offsets[i] + h * width;
                let p = &probs[base..base + width];
                let go = &gout[i * dm + h * dh..i * dm + (h + 1) * dh];
                dw.clear();
                let mut s = T::zero();
                for t in 0..width {
                    let j = lo + t;
                    let vj = &vv[j * dm + h * dh..j * dm + (h + 1) * dh];
                    let d = dot(go, vj);
                    dw.push(d);
                    s += p[t] * d;
                    if p[t] != T::zero() {
                        axpy(p[t], go, &mut gv[j * dm + h * dh..j * dm + (h + 1) * dh]);
                    }
                }
                let qi = &qv[i * dm + h * dh..i * dm + (h + 1) * dh];
                for t in 0..width {
                    let ds = p[t] * (dw[t] - s) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let j = lo + t;
                    let kj = &kv[j * dm + h * dh..j * dm + (h + 1) * dh];
                    axpy(ds, kj, &mut gq[i * dm + h * dh..i * dm + (h + 1) * dh]);
                    axpy(ds, qi, &mut gk[j * dm + h * dh..j * dm + (h + 1) * dh]);
                }
            }
        }
        self.acc(ng, q, |g| add_into(g, &gq));
        self.acc(ng, k, |g| add_into(g, &gk));
        self.acc(ng, v, |g| add_into(g, &gv));
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yy, &xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

#[inline]
fn add_into<T: Scalar>(y: &mut [T], x: &[T]) {
    for (yy, &xx) in y.iter_mut().zip(x) {
        *yy += xx;
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for c in 0..k {
            let x = a[r * k + c];
            if x != T::zero() {
                axpy(x, &b[c * m..(c + 1) * m], orow);
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for r in 0..n {
        for c in 0..m {
            out[c * n + r] = a[r * m + c];
        }
    }
    out
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T], tau: T) -> Vec<T> {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = row.iter().map(|&v| ((v - mx) / tau).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub(crate) fn log_sum_exp_and_probs<T: Scalar>(row: &[T]) -> (T, Vec<T>) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let z: T = e.iter().copied().sum();
    (mx + z.ln(), e.into_iter().map(|v| v / z).collect())
}

/// Index of the largest entry; the lowest index wins ties.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
