//! Discrete-event simulation of hybrid serving: a nearline job refreshes a
//! versioned per-user knowledge repository, and online requests do one
//! repository lookup, one fusion and trie-constrained decoding.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::SyntheticWorld;
use crate::error::{LwgrError, Result};
use crate::item_tokenizer::PrefixTrie;
use crate::knowledge_source::{context_fingerprint, KnowledgeMatrix};
use crate::numerics::Tensor;
use crate::policy::{Policy, PolicyEnv};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColdStart {
    /// Fuse a knowledge entry computed from an empty history.
    DefaultEntry,
    /// Skip fusion and decode from the plain BOS state.
    Bypass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServingConfig {
    /// Interval between nearline refresh batches; `None` disables refresh.
    pub refresh_period_ms: Option<f64>,
    /// Fixed cost of one refresh batch.
    pub refresh_base_ms: f64,
    /// Modeled cost of recomputing one user's knowledge.
    pub refresh_cost_per_user_ms: f64,
    pub lookup_cost_ms: f64,
    pub fusion_cost_ms: f64,
    pub encode_cost_ms: f64,
    /// Modeled cost of one beam-search level.
    pub decode_cost_per_step_ms: f64,
    pub k: usize,
    pub beam: usize,
    pub cold_start: ColdStart,
    /// Probability that a served user then consumes their next item.
    pub interaction_prob: f64,
    /// Generated workload: request count and mean inter-arrival time.
    pub requests: usize,
    pub mean_interarrival_ms: f64,
    /// Fraction of users unknown to the repository at start.
    pub new_user_fraction: f64,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self {
            refresh_period_ms: Some(60_000.0),
            refresh_base_ms: 50.0,
            refresh_cost_per_user_ms: 2.0,
            lookup_cost_ms: 0.2,
            fusion_cost_ms: 0.3,
            encode_cost_ms: 2.0,
            decode_cost_per_step_ms: 3.0,
            k: 10,
            beam: 16,
            cold_start: ColdStart::DefaultEntry,
            interaction_prob: 0.3,
            requests: 10_000,
            mean_interarrival_ms: 30.0,
            new_user_fraction: 0.1,
        }
    }
}

/// One immutable repository entry. Entries are replaced whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub matrix: KnowledgeMatrix,
    pub version: u64,
    pub refreshed_at: f64,
    /// Checksum of `matrix.values`, for torn-read detection.
    pub checksum: String,
}

impl Entry {
    pub fn new(matrix: KnowledgeMatrix, version: u64, refreshed_at: f64) -> Self {
        let checksum = values_checksum(&matrix.values);
        Self {
            matrix,
            version,
            refreshed_at,
            checksum,
        }
    }

    /// True when the stored checksum matches the values.
    pub fn is_consistent(&self) -> bool {
        values_checksum(&self.matrix.values) == self.checksum
    }
}

fn values_checksum(v: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Versioned per-user knowledge store. Readers clone an `Arc` to a complete
/// entry; writers swap the `Arc`, so a reader sees either the old or the new
/// entry and never a mixture.
#[derive(Debug)]
pub struct KnowledgeRepository {
    entries: RwLock<HashMap<String, Arc<Entry>>>,
    default_entry: Arc<Entry>,
}

impl KnowledgeRepository {
    pub fn new(default_entry: KnowledgeMatrix) -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            default_entry: Arc::new(Entry::new(default_entry, 0, 0.0)),
        }
    }

    pub fn default_entry(&self) -> Arc<Entry> {
        self.default_entry.clone()
    }

    pub fn get(&self, user: &str) -> Option<Arc<Entry>> {
        self.entries.read().expect("repository lock poisoned").get(user).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("repository lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Installs a new matrix for `user` with the next version.
    pub fn publish(&self, user: &str, matrix: KnowledgeMatrix, now: f64) -> Arc<Entry> {
        let mut map = self.entries.write().expect("repository lock poisoned");
        let version = map.get(user).map_or(1, |e| e.version + 1);
        let e = Arc::new(Entry::new(matrix, version, now));
        map.insert(user.to_string(), e.clone());
        e
    }

    /// Marks the entry as validated at `now` without changing its content
    /// or version.
    pub fn touch(&self, user: &str, now: f64) {
        let mut map = self.entries.write().expect("repository lock poisoned");
        if let Some(e) = map.get(user) {
            let mut fresh = (**e).clone();
            fresh.refreshed_at = now;
            map.insert(user.to_string(), Arc::new(fresh));
        }
    }

    /// Snapshot of every entry, sorted by user id.
    pub fn snapshot(&self) -> Vec<(String, Arc<Entry>)> {
        let map = self.entries.read().expect("repository lock poisoned");
        let mut v: Vec<(String, Arc<Entry>)> = map.iter().map(|(k, e)| (k.clone(), e.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

/// Per-request record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTrace {
    pub request_id: usize,
    pub user_id: String,
    pub arrival_ms: f64,
    pub lookup_count: usize,
    pub knowledge_version_used: u64,
    pub staleness_ms: f64,
    pub llm_forward_count: usize,
    pub fusion_count: usize,
    pub latency_ms: f64,
    pub cold_start: bool,
    pub top_k: Vec<String>,
}

/// The models and catalog the simulator serves with.
pub struct ServingModels<'m, T: Scalar> {
    pub policy: &'m Policy<T>,
    pub env: PolicyEnv<'m, T>,
    pub trie: &'m PrefixTrie,
    pub item_ids: &'m [String],
    /// Identifies the instruction-extractor weights in context fingerprints.
    pub codebook_version: String,
}

impl<'m, T: Scalar> ServingModels<'m, T> {
    pub fn new(policy: &'m Policy<T>, env: PolicyEnv<'m, T>, trie: &'m PrefixTrie, item_ids: &'m [String]) -> Self {
        Self {
            policy,
            env,
            trie,
            item_ids,
            codebook_version: policy.store.checksum(),
        }
    }

    /// Nearline computation of one user's knowledge matrix.
    pub fn compute_entry(&self, user: &str, history: &[usize]) -> Result<KnowledgeMatrix> {
        let t = self.policy.compute_knowledge(self.env, history)?;
        Ok(matrix_from(user, t, context_fingerprint(history, &self.codebook_version)))
    }

    /// Knowledge for users with no repository entry.
    pub fn default_matrix(&self) -> Result<KnowledgeMatrix> {
        let t = self.policy.default_knowledge(self.env)?;
        Ok(matrix_from("", t, context_fingerprint(&[], &self.codebook_version)))
    }
}

fn matrix_from<T: Scalar>(user: &str, t: Option<Tensor<T>>, fingerprint: String) -> KnowledgeMatrix {
    let (rows, cols, values) = match t {
        Some(t) => (t.rows(), t.cols(), t.to_f64_vec()),
        None => (0, 0, Vec::new()),
    };
    KnowledgeMatrix {
        user_id: user.to_string(),
        rows,
        cols,
        values,
        context_fingerprint: fingerprint,
    }
}

/// Online path for one request: a single lookup, fusion of the cached
/// matrix and decoding. Never runs the knowledge model.
pub fn serve_request<T: Scalar>(
    request_id: usize,
    user: &str,
    history: &[usize],
    now: f64,
    repo: &KnowledgeRepository,
    models: &ServingModels<'_, T>,
    cfg: &ServingConfig,
) -> Result<RequestTrace> {
    let mut lookups = 0;
    let found = {
        lookups += 1;
        repo.get(user)
    };
    let cold = found.is_none();
    let entry = found.unwrap_or_else(|| repo.default_entry());
    let h_u = if cold && cfg.cold_start == ColdStart::Bypass {
        None
    } else {
        Some(entry.matrix.tensor::<T>()?)
    };
    let before = models.env.knowledge.forward_count();
    let ranking = models
        .policy
        .rank_with_knowledge(models.env, history, h_u.as_ref(), models.trie, models.item_ids, cfg.k, cfg.beam)?;
    let llm = models.env.knowledge.forward_count() - before;
    let levels = models.policy.arch.seq_len() as f64;
    let latency = cfg.lookup_cost_ms * lookups as f64
        + cfg.encode_cost_ms
        + cfg.fusion_cost_ms * ranking.fusion_calls as f64
        + cfg.decode_cost_per_step_ms * levels;
    Ok(RequestTrace {
        request_id,
        user_id: user.to_string(),
        arrival_ms: now,
        lookup_count: lookups,
        knowledge_version_used: entry.version,
        staleness_ms: if cold { 0.0 } else { now - entry.refreshed_at },
        llm_forward_count: llm,
        fusion_count: ranking.fusion_calls,
        latency_ms: latency,
        cold_start: cold,
        top_k: ranking.items.iter().map(|&(i, _)| models.item_ids[i].clone()).collect(),
    })
}

/// One arrival of the workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub time_ms: f64,
    pub user_id: String,
}

pub fn read_workload(path: &Path) -> Result<Vec<Arrival>> {
    if !path.exists() {
        return Err(LwgrError::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let v = r.deserialize().collect::<std::result::Result<Vec<Arrival>, _>>()?;
    Ok(v)
}

pub fn write_workload(path: &Path, w: &[Arrival]) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    for a in w {
        wr.serialize(a)?;
    }
    wr.flush()?;
    Ok(())
}

/// Poisson arrivals over `users`, sorted by time.
pub fn generate_workload(users: &[String], requests: usize, mean_interarrival_ms: f64, seed: u64) -> Vec<Arrival> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    (0..requests)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            t += -mean_interarrival_ms * u.ln();
            Arrival {
                time_ms: (t * 1000.0).round() / 1000.0,
                user_id: users[rng.gen_range(0..users.len())].clone(),
            }
        })
        .collect()
}

/// Live state of one simulated user.
#[derive(Debug, Clone)]
pub struct SimUser {
    pub user_id: String,
    /// Interactions visible at the start of the scenario.
    pub history: Vec<usize>,
    /// Items the user will consume next, in order.
    pub upcoming: Vec<usize>,
    /// Whether the nearline job knows the user at start.
    pub known: bool,
}

/// Simulated users from a world: the test item and the one before it are
/// still to come, and a seeded `new_user_fraction` of users start unknown
/// to the repository.
pub fn sim_users(world: &SyntheticWorld, new_user_fraction: f64, seed: u64) -> Result<Vec<SimUser>> {
    if !(0.0..=1.0).contains(&new_user_fraction) {
        return Err(LwgrError::Config(format!("new_user_fraction {new_user_fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(world
        .users
        .iter()
        .zip(&world.interactions)
        .map(|(u, seq)| {
            let cut = seq.len().saturating_sub(2).max(1).min(seq.len());
            SimUser {
                user_id: u.user_id.clone(),
                history: seq[..cut].to_vec(),
                upcoming: seq[cut..].to_vec(),
                known: rng.gen::<f64>() >= new_user_fraction,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Request(usize),
    RefreshStart,
    RefreshSwap(usize),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    // min-heap on (time, insertion sequence)
    fn cmp(&self, o: &Self) -> Ordering {
        o.time.total_cmp(&self.time).then_with(|| o.seq.cmp(&self.seq))
    }
}

/// Event queue ordered by time, ties broken by insertion order.
#[derive(Debug, Default)]
pub struct SimClock {
    now: f64,
    next_seq: u64,
    queue: BinaryHeap<Event>,
}

impl SimClock {
    pub fn now(&self) -> f64 {
        self.now
    }

    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.queue.push(Event {
            time,
            seq: self.next_seq,
            kind,
        });
        self.next_seq += 1;
    }

    fn pop(&mut self) -> Option<Event> {
        let e = self.queue.pop()?;
        debug_assert!(e.time >= self.now);
        self.now = e.time;
        Some(e)
    }
}

/// A finished refresh batch awaiting its swap.
struct PendingBatch {
    started_at: f64,
    updates: Vec<(String, KnowledgeMatrix)>,
    validated: Vec<String>,
}

/// Aggregate statistics of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub requests: usize,
    pub refresh_batches: usize,
    pub refreshed_users: usize,
    pub failed_refreshes: usize,
    pub max_refresh_duration_ms: f64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    pub lookup_ms: f64,
    pub fusion_ms: f64,
    pub decode_ms: f64,
    pub max_staleness_ms: f64,
    pub cold_start_rate: f64,
    pub online_llm_forwards: usize,
    pub nearline_llm_forwards: usize,
    pub trace_checksum: String,
}

impl ScenarioSummary {
    /// Two-column CSV (`stat,value`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let v = serde_json::to_value(self)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["stat", "value"])?;
        if let serde_json::Value::Object(m) = v {
            for (k, x) in m {
                let s = match x {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                w.write_record([k, s])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub traces: Vec<RequestTrace>,
    pub summary: ScenarioSummary,
    /// `(user, version, refreshed_at)` per publish, in order.
    pub publishes: Vec<(String, u64, f64)>,
    pub failures: Vec<(String, String)>,
}

impl ScenarioResult {
    pub fn write_traces(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.traces {
            serde_json::to_writer(&mut f, t)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Runs the scenario: known users are loaded into the repository at time 0
/// (version 1), refresh batches start every `refresh_period_ms` and swap
/// their results in when the modeled batch duration has elapsed, and
/// requests are served from whatever the repository holds at arrival.
pub fn run_scenario<T: Scalar>(
    workload: &[Arrival],
    users: &[SimUser],
    models: &ServingModels<'_, T>,
    cfg: &ServingConfig,
    seed: u64,
) -> Result<ScenarioResult> {
    if workload.windows(2).any(|w| w[1].time_ms < w[0].time_ms) {
        return Err(LwgrError::Config("workload must be sorted by arrival time".into()));
    }
    let index: HashMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (u.user_id.as_str(), i)).collect();
    for a in workload {
        if !index.contains_key(a.user_id.as_str()) {
            return Err(LwgrError::Lookup(format!("workload user {} has no profile", a.user_id)));
        }
    }
    let repo = KnowledgeRepository::new(models.default_matrix()?);
    let llm_start = models.env.knowledge.forward_count();
    let mut histories: Vec<Vec<usize>> = users.iter().map(|u| u.history.clone()).collect();
    let mut consumed = vec![0usize; users.len()];
    let mut active: BTreeSet<usize> = users.iter().enumerate().filter(|(_, u)| u.known).map(|(i, _)| i).collect();
    let mut publishes = Vec::new();
    let mut failures = Vec::new();

    let init: Vec<(usize, Result<KnowledgeMatrix>)> = active
        .iter()
        .copied()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|i| (i, models.compute_entry(&users[i].user_id, &histories[i])))
        .collect();
    for (i, m) in init {
        match m {
            Ok(m) => {
                let e = repo.publish(&users[i].user_id, m, 0.0);
                publishes.push((users[i].user_id.clone(), e.version, 0.0));
            }
            Err(err) => failures.push((users[i].user_id.clone(), err.to_string())),
        }
    }
    let init_forwards = models.env.knowledge.forward_count() - llm_start;

    let mut clock = SimClock::default();
    for (i, _) in workload.iter().enumerate() {
        clock.schedule(workload[i].time_ms, EventKind::Request(i));
    }
    let end = workload.last().map_or(0.0, |a| a.time_ms);
    if let Some(p) = cfg.refresh_period_ms.filter(|p| p.is_finite() && *p > 0.0) {
        clock.schedule(p, EventKind::RefreshStart);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pending_requests: Vec<(usize, usize, Vec<usize>, f64)> = Vec::new();
    let mut batches: Vec<Option<PendingBatch>> = Vec::new();
    let mut traces: Vec<RequestTrace> = Vec::with_capacity(workload.len());
    let mut refreshed_users = 0;
    let mut max_duration: f64 = 0.0;
    let mut nearline_forwards = init_forwards;

    // Requests between two writes see the same repository, so they are
    // decoded in parallel when the next write (or the end) arrives.
    let flush = |pending: &mut Vec<(usize, usize, Vec<usize>, f64)>, traces: &mut Vec<RequestTrace>| -> Result<()> {
        let before = models.env.knowledge.forward_count();
        let out: Vec<Result<RequestTrace>> = pending
            .par_iter()
            .map(|(rid, ui, hist, now)| serve_request(*rid, &users[*ui].user_id, hist, *now, &repo, models, cfg))
            .collect();
        let parallel_forwards = models.env.knowledge.forward_count() - before;
        let mut out = out.into_iter().collect::<Result<Vec<_>>>()?;
        if parallel_forwards > 0 {
            // attribute forwards to individual requests by re-serving serially
            out = pending
                .iter()
                .map(|(rid, ui, hist, now)| serve_request(*rid, &users[*ui].user_id, hist, *now, &repo, models, cfg))
                .collect::<Result<Vec<_>>>()?;
        }
        traces.extend(out);
        pending.clear();
        Ok(())
    };

    while let Some(ev) = clock.pop() {
        let now = clock.now();
        match ev.kind {
            EventKind::Request(rid) => {
                let ui = index[workload[rid].user_id.as_str()];
                pending_requests.push((rid, ui, histories[ui].clone(), now));
                active.insert(ui);
                if consumed[ui] < users[ui].upcoming.len() && rng.gen_bool(cfg.interaction_prob.clamp(0.0, 1.0)) {
                    histories[ui].push(users[ui].upcoming[consumed[ui]]);
                    consumed[ui] += 1;
                }
            }
            EventKind::RefreshStart => {
                let mut changed = Vec::new();
                let mut validated = Vec::new();
                for &ui in &active {
                    let uid = &users[ui].user_id;
                    let fp = context_fingerprint(&histories[ui], &models.codebook_version);
                    match repo.get(uid) {
                        Some(e) if e.matrix.context_fingerprint == fp => validated.push(uid.clone()),
                        _ => changed.push(ui),
                    }
                }
                let before = models.env.knowledge.forward_count();
                let computed: Vec<(usize, Result<KnowledgeMatrix>)> = changed
                    .par_iter()
                    .map(|&ui| (ui, models.compute_entry(&users[ui].user_id, &histories[ui])))
                    .collect();
                nearline_forwards += models.env.knowledge.forward_count() - before;
                let mut updates = Vec::new();
                for (ui, m) in computed {
                    match m {
                        Ok(m) => updates.push((users[ui].user_id.clone(), m)),
                        Err(err) => failures.push((users[ui].user_id.clone(), err.to_string())),
                    }
                }
                let duration = cfg.refresh_base_ms + cfg.refresh_cost_per_user_ms * changed.len() as f64;
                max_duration = max_duration.max(duration);
                batches.push(Some(PendingBatch {
                    started_at: now,
                    updates,
                    validated,
                }));
                clock.schedule(now + duration, EventKind::RefreshSwap(batches.len() - 1));
                let p = cfg.refresh_period_ms.unwrap_or(f64::INFINITY);
                if now + p <= end {
                    clock.schedule(now + p, EventKind::RefreshStart);
                }
            }
            EventKind::RefreshSwap(b) => {
                flush(&mut pending_requests, &mut traces)?;
                let batch = batches[b].take().expect("each batch swaps once");
                debug_assert!(now >= batch.started_at);
                for (uid, m) in batch.updates {
                    let e = repo.publish(&uid, m, now);
                    publishes.push((uid, e.version, now));
                    refreshed_users += 1;
                }
                for uid in batch.validated {
                    repo.touch(&uid, now);
                }
            }
        }
    }
    flush(&mut pending_requests, &mut traces)?;
    traces.sort_by_key(|t| t.request_id);

    let mut lat: Vec<f64> = traces.iter().map(|t| t.latency_ms).collect();
    lat.sort_by(f64::total_cmp);
    let n = traces.len().max(1) as f64;
    let levels = models.policy.arch.seq_len() as f64;
    let mut h = Sha256::new();
    for t in &traces {
        h.update(serde_json::to_vec(t)?);
    }
    let summary = ScenarioSummary {
        requests: traces.len(),
        refresh_batches: batches.len(),
        refreshed_users,
        failed_refreshes: failures.len(),
        max_refresh_duration_ms: max_duration,
        latency_p50_ms: percentile(&lat, 0.5),
        latency_p99_ms: percentile(&lat, 0.99),
        lookup_ms: cfg.lookup_cost_ms,
        fusion_ms: traces.iter().map(|t| t.fusion_count as f64).sum::<f64>() * cfg.fusion_cost_ms / n,
        decode_ms: cfg.decode_cost_per_step_ms * levels,
        max_staleness_ms: traces.iter().map(|t| t.staleness_ms).fold(0.0, f64::max),
        cold_start_rate: traces.iter().filter(|t| t.cold_start).count() as f64 / n,
        online_llm_forwards: traces.iter().map(|t| t.llm_forward_count).sum(),
        nearline_llm_forwards: nearline_forwards,
        trace_checksum: hex::encode(h.finalize()),
    };
    Ok(ScenarioResult {
        traces,
        summary,
        publishes,
        failures,
    })
}
