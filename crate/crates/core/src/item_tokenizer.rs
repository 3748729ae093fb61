//! Item semantic IDs: per-subspace k-means codebooks, catalog encoding with a
//! collision suffix, and the prefix trie used for constrained decoding.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, LwgrError, Result};

pub const KMEANS_MAX_ITERS: usize = 50;

/// One catalog record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_id: String,
    pub content: Vec<f64>,
    pub text_tokens: Vec<usize>,
}

pub fn read_catalog(path: &Path) -> Result<Vec<CatalogItem>> {
    let f = std::fs::File::open(path).map_err(|_| LwgrError::MissingArtifact(path.to_path_buf()))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_catalog(path: &Path, items: &[CatalogItem]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Per-level codebooks over contiguous slices of the content vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCodebooks {
    pub dim: usize,
    /// `(start, len)` of each level's slice.
    pub slices: Vec<(usize, usize)>,
    /// Row-major `m_ℓ × len_ℓ` centroid matrices.
    pub books: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
}

impl ItemCodebooks {
    pub fn levels(&self) -> usize {
        self.books.len()
    }

    pub fn centroid(&self, level: usize, j: usize) -> &[f64] {
        let w = self.slices[level].1;
        &self.books[level][j * w..(j + 1) * w]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticId {
    pub tokens: Vec<usize>,
    pub disamb: usize,
}

/// Result of one k-means run.
#[derive(Debug, Clone)]
pub struct KMeans {
    /// Row-major `m × d`.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Total within-cluster squared distance after each assignment step.
    pub inertia: Vec<f64>,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest row of `rows` (row-major, width `d`); lowest index on ties.
pub fn nearest(x: &[f64], rows: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in rows.chunks(d).enumerate() {
        let dist = sq(x, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

/// Lloyd's algorithm with farthest-point seeding.
///
/// The first centroid is a seeded random point; each further centroid is the
/// point farthest from the ones chosen so far. A cluster that empties is
/// re-seeded at the point currently farthest from its own centroid.
pub fn kmeans(points: &[&[f64]], m: usize, max_iters: usize, seed: u64) -> Result<KMeans> {
    let n = points.len();
    if m == 0 || n < m {
        return Err(LwgrError::Config(format!("k-means needs at least {m} points, got {n}")));
    }
    let d = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);
    let mut centroids = Vec::with_capacity(m * d);
    centroids.extend_from_slice(points[first]);
    let mut min_d: Vec<f64> = points.iter().map(|p| sq(p, points[first])).collect();
    for _ in 1..m {
        let (far, _) = min_d
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        centroids.extend_from_slice(points[far]);
        for (i, p) in points.iter().enumerate() {
            min_d[i] = min_d[i].min(sq(p, points[far]));
        }
    }

    let mut assignments = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut inertia = Vec::new();
    for it in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, dist) = nearest(p, &centroids, d);
            if it == 0 || j != assignments[i] {
                changed = true;
            }
            assignments[i] = j;
            dists[i] = dist;
        }
        inertia.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = vec![0.0; m * d];
        let mut counts = vec![0usize; m];
        for (i, p) in points.iter().enumerate() {
            let j = assignments[i];
            counts[j] += 1;
            for (s, x) in sums[j * d..(j + 1) * d].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for j in 0..m {
            if counts[j] > 0 {
                for c in 0..d {
                    centroids[j * d + c] = sums[j * d + c] / counts[j] as f64;
                }
            }
        }
        for j in 0..m {
            if counts[j] == 0 {
                let (far, _) = dists
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                centroids[j * d..(j + 1) * d].copy_from_slice(points[far]);
                dists[far] = 0.0;
            }
        }
    }
    Ok(KMeans {
        centroids,
        assignments,
        inertia,
    })
}

/// Fits `levels` independent k-means codebooks over equal contiguous slices.
pub fn fit_codebooks(vectors: &[Vec<f64>], levels: usize, m: usize, seed: u64) -> Result<ItemCodebooks> {
    let dim = vectors.first().map_or(0, |v| v.len());
    if levels == 0 || dim == 0 || !dim.is_multiple_of(levels) {
        return Err(LwgrError::Config(format!(
            "content dimension {dim} is not divisible by {levels} levels"
        )));
    }
    if let Some(bad) = vectors.iter().position(|v| v.len() != dim) {
        return Err(contract("fit_codebooks", format!("item {bad} has dimension {} != {dim}", vectors[bad].len())));
    }
    let w = dim / levels;
    let mut books = Vec::with_capacity(levels);
    let mut slices = Vec::with_capacity(levels);
    for l in 0..levels {
        let pts: Vec<&[f64]> = vectors.iter().map(|v| &v[l * w..(l + 1) * w]).collect();
        let km = kmeans(&pts, m, KMEANS_MAX_ITERS, seed.wrapping_add(l as u64))?;
        books.push(km.centroids);
        slices.push((l * w, w));
    }
    Ok(ItemCodebooks {
        dim,
        slices,
        books,
        sizes: vec![m; levels],
    })
}

/// Nearest-centroid tokens per level, then collision suffixes in input order.
pub fn encode_catalog(vectors: &[Vec<f64>], books: &ItemCodebooks) -> Result<Vec<SemanticId>> {
    if let Some(bad) = vectors.iter().position(|v| v.len() != books.dim) {
        return Err(contract(
            "encode_catalog",
            format!("item {bad} has dimension {}, codebooks expect {}", vectors[bad].len(), books.dim),
        ));
    }
    let tokens: Vec<Vec<usize>> = vectors
        .par_iter()
        .map(|v| {
            books
                .slices
                .iter()
                .zip(&books.books)
                .map(|(&(s, w), book)| nearest(&v[s..s + w], book, w).0)
                .collect()
        })
        .collect();
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    Ok(tokens
        .into_iter()
        .map(|t| {
            let c = seen.entry(t.clone()).or_insert(0);
            let disamb = *c;
            *c += 1;
            SemanticId { tokens: t, disamb }
        })
        .collect())
}

/// Prefix trie over full token sequences (SID tokens plus the suffix level
/// when present). Leaves point at catalog indices.
#[derive(Debug, Clone, Default)]
pub struct PrefixTrie {
    /// Per node: sorted `(token, child)` edges.
    children: Vec<Vec<(usize, usize)>>,
    item: Vec<Option<usize>>,
    depth: usize,
}

impl PrefixTrie {
    pub const ROOT: usize = 0;

    pub fn build(sequences: &[Vec<usize>]) -> Result<Self> {
        let depth = sequences.first().map_or(0, |s| s.len());
        if sequences.is_empty() {
            return Err(contract("build_prefix_trie", "empty catalog"));
        }
        let mut t = PrefixTrie {
            children: vec![Vec::new()],
            item: vec![None],
            depth,
        };
        for (idx, seq) in sequences.iter().enumerate() {
            if seq.len() != depth {
                return Err(contract("build_prefix_trie", format!("sequence {idx} has length {} != {depth}", seq.len())));
            }
            let mut node = Self::ROOT;
            for &tok in seq {
                node = match t.step(node, tok) {
                    Some(c) => c,
                    None => {
                        let c = t.children.len();
                        t.children.push(Vec::new());
                        t.item.push(None);
                        let edges = &mut t.children[node];
                        let pos = edges.partition_point(|&(k, _)| k < tok);
                        edges.insert(pos, (tok, c));
                        c
                    }
                };
            }
            if t.item[node].is_some() {
                return Err(contract("build_prefix_trie", format!("duplicate sequence {seq:?}")));
            }
            t.item[node] = Some(idx);
        }
        Ok(t)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_nodes(&self) -> usize {
        self.children.len()
    }

    pub fn step(&self, node: usize, tok: usize) -> Option<usize> {
        let e = &self.children[node];
        e.binary_search_by_key(&tok, |&(k, _)| k).ok().map(|i| e[i].1)
    }

    pub fn children(&self, node: usize) -> &[(usize, usize)] {
        &self.children[node]
    }

    pub fn item_at(&self, node: usize) -> Option<usize> {
        self.item[node]
    }

    /// Catalog index of a full sequence, if it is in the catalog.
    pub fn lookup(&self, seq: &[usize]) -> Option<usize> {
        if seq.len() != self.depth {
            return None;
        }
        let mut node = Self::ROOT;
        for &t in seq {
            node = self.step(node, t)?;
        }
        self.item[node]
    }

    pub fn contains(&self, seq: &[usize]) -> bool {
        self.lookup(seq).is_some()
    }
}

/// Fitted catalog: item ids, semantic IDs and per-level vocabularies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidCatalog {
    pub item_ids: Vec<String>,
    pub sids: Vec<SemanticId>,
    /// Vocabulary size of each SID level.
    pub level_sizes: Vec<usize>,
    /// Size of the suffix vocabulary (largest collision group); 0 when the
    /// plain tokens are already unique.
    pub disamb_size: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl SidCatalog {
    pub fn new(item_ids: Vec<String>, sids: Vec<SemanticId>, level_sizes: Vec<usize>) -> Result<Self> {
        if item_ids.len() != sids.len() {
            return Err(contract("sid_catalog", "item/SID count mismatch"));
        }
        let max_group = sids.iter().map(|s| s.disamb + 1).max().unwrap_or(1);
        let disamb_size = if max_group > 1 { max_group } else { 0 };
        let mut c = Self {
            item_ids,
            sids,
            level_sizes,
            disamb_size,
            index: HashMap::new(),
        };
        c.reindex()?;
        Ok(c)
    }

    fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, id) in self.item_ids.iter().enumerate() {
            if self.index.insert(id.clone(), i).is_some() {
                return Err(contract("sid_catalog", format!("duplicate item id {id}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn index_of(&self, item_id: &str) -> Result<usize> {
        self.index
            .get(item_id)
            .copied()
            .ok_or_else(|| LwgrError::Lookup(format!("unknown item {item_id}")))
    }

    /// Vocabulary sizes of every decoded level, including the suffix level.
    pub fn vocab_sizes(&self) -> Vec<usize> {
        let mut v = self.level_sizes.clone();
        if self.disamb_size > 0 {
            v.push(self.disamb_size);
        }
        v
    }

    /// Number of generated tokens per item.
    pub fn seq_len(&self) -> usize {
        self.level_sizes.len() + usize::from(self.disamb_size > 0)
    }

    /// Full decoded token sequence of catalog item `idx`.
    pub fn sequence(&self, idx: usize) -> Vec<usize> {
        let s = &self.sids[idx];
        let mut v = s.tokens.clone();
        if self.disamb_size > 0 {
            v.push(s.disamb);
        }
        v
    }

    pub fn sequences(&self) -> Vec<Vec<usize>> {
        (0..self.len()).map(|i| self.sequence(i)).collect()
    }

    pub fn trie(&self) -> Result<PrefixTrie> {
        PrefixTrie::build(&self.sequences())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["item_id".to_string()];
        header.extend((0..self.level_sizes.len()).map(|l| format!("token_{l}")));
        header.push("disamb".into());
        w.write_record(&header)?;
        for (id, s) in self.item_ids.iter().zip(&self.sids) {
            let mut rec = vec![id.clone()];
            rec.extend(s.tokens.iter().map(|t| t.to_string()));
            rec.push(s.disamb.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| LwgrError::MissingArtifact(path.to_path_buf()))?;
        let mut c: Self = serde_json::from_slice(&bytes)?;
        c.reindex()?;
        Ok(c)
    }
}

/// Fits codebooks and encodes the whole catalog.
pub fn tokenize_catalog(items: &[CatalogItem], levels: usize, m: usize, seed: u64) -> Result<(ItemCodebooks, SidCatalog)> {
    let vectors: Vec<Vec<f64>> = items.iter().map(|i| i.content.clone()).collect();
    let books = fit_codebooks(&vectors, levels, m, seed)?;
    let sids = encode_catalog(&vectors, &books)?;
    let ids = items.iter().map(|i| i.item_id.clone()).collect();
    let cat = SidCatalog::new(ids, sids, books.sizes.clone())?;
    Ok((books, cat))
}
