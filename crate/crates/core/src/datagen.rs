//! Synthetic cohort worlds.
//!
//! Items belong to latent topics. Content vectors are noisy topic centroids
//! (what the item tokenizer sees); text tokens are drawn from topic word
//! ranges (what the knowledge model sees). A cohort's alignment decides how
//! often the text of items in the cohort's favourite topics names a
//! different, shared topic instead of the true one, so that anti-aligned
//! text is systematically misleading and less informative.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LwgrError, Result};
use crate::item_tokenizer::CatalogItem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub name: String,
    pub users: usize,
    /// In `[-1, 1]`: +1 text always names the true topic, −1 never does.
    pub alignment: f64,
    /// Favourite topics.
    pub topics: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub num_topics: usize,
    pub num_items: usize,
    pub content_dim: usize,
    pub content_strength: f64,
    pub content_noise: f64,
    pub text_vocab: usize,
    pub words_per_topic: usize,
    pub text_len: usize,
    /// Probability that a text token is a topic word rather than generic.
    pub topic_word_prob: f64,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that the next interaction stays in the current topic.
    pub stay_prob: f64,
    /// Share of a cohort's interest on its favourite topics.
    pub favorite_mass: f64,
    /// Zipf exponent of item popularity inside a topic.
    pub popularity_exponent: f64,
    pub cohorts: Vec<CohortSpec>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let cohort = |i: usize, alignment: f64| CohortSpec {
            name: format!("cohort_{i}"),
            users: 500,
            alignment,
            topics: vec![2 * i, 2 * i + 1],
        };
        Self {
            num_topics: 8,
            num_items: 400,
            content_dim: 24,
            content_strength: 1.0,
            content_noise: 1.0,
            text_vocab: 256,
            words_per_topic: 24,
            text_len: 8,
            topic_word_prob: 0.75,
            min_interactions: 5,
            max_interactions: 20,
            stay_prob: 0.6,
            favorite_mass: 0.85,
            popularity_exponent: 1.0,
            cohorts: vec![cohort(0, 1.0), cohort(1, 1.0), cohort(2, 1.0), cohort(3, -1.0)],
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LwgrError::Config(m));
        if self.cohorts.is_empty() {
            return bad("world needs at least one cohort".into());
        }
        if self.num_topics == 0 || self.num_items < 2 * self.num_topics {
            return bad(format!("{} items cannot give every one of {} topics two items", self.num_items, self.num_topics));
        }
        if self.num_topics * self.words_per_topic >= self.text_vocab || self.words_per_topic == 0 {
            return bad("topic words must leave room for generic words in the text vocabulary".into());
        }
        if self.min_interactions < 5 || self.max_interactions < self.min_interactions {
            return bad(format!(
                "interaction range {}..={} must start at 5 or more",
                self.min_interactions, self.max_interactions
            ));
        }
        if self.text_len == 0 || self.content_dim == 0 {
            return bad("text_len and content_dim must be positive".into());
        }
        for p in [self.topic_word_prob, self.stay_prob, self.favorite_mass] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        for c in &self.cohorts {
            if !(-1.0..=1.0).contains(&c.alignment) {
                return bad(format!("cohort {} alignment {} outside [-1, 1]", c.name, c.alignment));
            }
            if c.users == 0 || c.topics.is_empty() || c.topics.iter().any(|&t| t >= self.num_topics) {
                return bad(format!("cohort {} needs users and valid favourite topics", c.name));
            }
        }
        Ok(())
    }

    /// Topics misleading text about topic `t` may name: every other topic
    /// whose owning cohort is aligned, or every other topic when none is.
    pub fn misleading_candidates(&self, t: usize) -> Vec<usize> {
        let align = self.owner_alignment();
        let aligned: Vec<usize> = (0..self.num_topics).filter(|&x| x != t && align[x] > 0.0).collect();
        if aligned.is_empty() {
            (0..self.num_topics).filter(|&x| x != t).collect()
        } else {
            aligned
        }
    }

    /// Alignment of the cohort that lists each topic as a favourite (the
    /// first such cohort wins; unowned topics count as aligned).
    pub fn owner_alignment(&self) -> Vec<f64> {
        let mut a = vec![1.0; self.num_topics];
        for c in self.cohorts.iter().rev() {
            for &t in &c.topics {
                a[t] = c.alignment;
            }
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldUser {
    pub user_id: String,
    pub cohort: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub spec: WorldSpec,
    pub items: Vec<CatalogItem>,
    pub item_topics: Vec<usize>,
    /// Topic the item's text was drawn from.
    pub text_topics: Vec<usize>,
    pub users: Vec<WorldUser>,
    /// Per user, chronological catalog indices.
    pub interactions: Vec<Vec<usize>>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_world(spec: &WorldSpec, seed: u64) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nt = spec.num_topics;
    let centroids: Vec<Vec<f64>> = (0..nt)
        .map(|_| (0..spec.content_dim).map(|_| gauss(&mut rng)).collect())
        .collect();
    let owner_alignment = spec.owner_alignment();
    let generic_lo = nt * spec.words_per_topic;
    let mut items = Vec::with_capacity(spec.num_items);
    let mut item_topics = Vec::with_capacity(spec.num_items);
    let mut text_topics = Vec::with_capacity(spec.num_items);
    for i in 0..spec.num_items {
        let t = i % nt;
        let content = centroids[t]
            .iter()
            .map(|&c| spec.content_strength * c + spec.content_noise * gauss(&mut rng))
            .collect();
        let p_mislead = (1.0 - owner_alignment[t]) / 2.0;
        let tt = if rng.gen::<f64>() < p_mislead {
            let cands = spec.misleading_candidates(t);
            cands[rng.gen_range(0..cands.len())]
        } else {
            t
        };
        let text_tokens = (0..spec.text_len)
            .map(|_| {
                if rng.gen::<f64>() < spec.topic_word_prob {
                    tt * spec.words_per_topic + rng.gen_range(0..spec.words_per_topic)
                } else {
                    rng.gen_range(generic_lo..spec.text_vocab)
                }
            })
            .collect();
        items.push(CatalogItem {
            item_id: format!("item_{i:04}"),
            content,
            text_tokens,
        });
        item_topics.push(t);
        text_topics.push(tt);
    }

    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); nt];
    for (i, &t) in item_topics.iter().enumerate() {
        by_topic[t].push(i);
    }
    let popularity: Vec<WeightedIndex<f64>> = by_topic
        .iter()
        .map(|its| {
            let w: Vec<f64> = (0..its.len()).map(|r| 1.0 / ((r + 1) as f64).powf(spec.popularity_exponent)).collect();
            WeightedIndex::new(w).expect("topic has items")
        })
        .collect();

    let mut users = Vec::new();
    let mut interactions = Vec::new();
    for (ci, c) in spec.cohorts.iter().enumerate() {
        let mut interest = vec![(1.0 - spec.favorite_mass) / nt as f64; nt];
        for &t in &c.topics {
            interest[t] += spec.favorite_mass / c.topics.len() as f64;
        }
        let pick_topic = WeightedIndex::new(&interest).expect("positive interest");
        for u in 0..c.users {
            let len = rng.gen_range(spec.min_interactions..=spec.max_interactions);
            let mut seq = Vec::with_capacity(len);
            let mut topic = pick_topic.sample(&mut rng);
            for step in 0..len {
                if step > 0 && rng.gen::<f64>() >= spec.stay_prob {
                    topic = pick_topic.sample(&mut rng);
                }
                let mut item = by_topic[topic][popularity[topic].sample(&mut rng)];
                // avoid immediate repeats when the topic has alternatives
                for _ in 0..4 {
                    if seq.last() != Some(&item) {
                        break;
                    }
                    item = by_topic[topic][popularity[topic].sample(&mut rng)];
                }
                seq.push(item);
            }
            users.push(WorldUser {
                user_id: format!("{}_u{u:04}", c.name),
                cohort: ci,
            });
            interactions.push(seq);
        }
    }
    Ok(SyntheticWorld {
        seed,
        spec: spec.clone(),
        items,
        item_topics,
        text_topics,
        users,
        interactions,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WorldRecord {
    Header {
        seed: u64,
        spec: WorldSpec,
    },
    Item {
        item_id: String,
        content: Vec<f64>,
        text_tokens: Vec<usize>,
        topic: usize,
        text_topic: usize,
    },
    User {
        user_id: String,
        cohort: usize,
    },
    Interactions {
        user_id: String,
        items: Vec<String>,
    },
}

impl SyntheticWorld {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut put = |r: &WorldRecord| -> Result<()> {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
            Ok(())
        };
        put(&WorldRecord::Header {
            seed: self.seed,
            spec: self.spec.clone(),
        })?;
        for (i, it) in self.items.iter().enumerate() {
            put(&WorldRecord::Item {
                item_id: it.item_id.clone(),
                content: it.content.clone(),
                text_tokens: it.text_tokens.clone(),
                topic: self.item_topics[i],
                text_topic: self.text_topics[i],
            })?;
        }
        for u in &self.users {
            put(&WorldRecord::User {
                user_id: u.user_id.clone(),
                cohort: u.cohort,
            })?;
        }
        for (u, seq) in self.users.iter().zip(&self.interactions) {
            put(&WorldRecord::Interactions {
                user_id: u.user_id.clone(),
                items: seq.iter().map(|&i| self.items[i].item_id.clone()).collect(),
            })?;
        }
        Ok(out)
    }

    /// SHA-256 of the JSON Lines serialization.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_jsonl()?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_jsonl()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|_| LwgrError::MissingArtifact(path.to_path_buf()))?;
        let mut w = SyntheticWorld {
            seed: 0,
            spec: WorldSpec::default(),
            items: Vec::new(),
            item_topics: Vec::new(),
            text_topics: Vec::new(),
            users: Vec::new(),
            interactions: Vec::new(),
        };
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut user_index: HashMap<String, usize> = HashMap::new();
        let mut header = false;
        for line in std::io::BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<WorldRecord>(&line)? {
                WorldRecord::Header { seed, spec } => {
                    w.seed = seed;
                    w.spec = spec;
                    header = true;
                }
                WorldRecord::Item {
                    item_id,
                    content,
                    text_tokens,
                    topic,
                    text_topic,
                } => {
                    item_index.insert(item_id.clone(), w.items.len());
                    w.items.push(CatalogItem {
                        item_id,
                        content,
                        text_tokens,
                    });
                    w.item_topics.push(topic);
                    w.text_topics.push(text_topic);
                }
                WorldRecord::User { user_id, cohort } => {
                    user_index.insert(user_id.clone(), w.users.len());
                    w.users.push(WorldUser { user_id, cohort });
                    w.interactions.push(Vec::new());
                }
                WorldRecord::Interactions { user_id, items } => {
                    let u = *user_index
                        .get(&user_id)
                        .ok_or_else(|| LwgrError::Lookup(format!("interactions for unknown user {user_id}")))?;
                    w.interactions[u] = items
                        .iter()
                        .map(|id| {
                            item_index
                                .get(id)
                                .copied()
                                .ok_or_else(|| LwgrError::Lookup(format!("unknown item {id}")))
                        })
                        .collect::<Result<_>>()?;
                }
            }
        }
        if !header {
            return Err(LwgrError::Config(format!("{} has no header record", path.display())));
        }
        Ok(w)
    }

    /// Per-user token streams (item texts in interaction order), the toy
    /// LM's pretraining corpus.
    pub fn text_corpus(&self) -> Vec<Vec<usize>> {
        self.interactions
            .iter()
            .map(|seq| seq.iter().flat_map(|&i| self.items[i].text_tokens.iter().copied()).collect())
            .collect()
    }

    pub fn cohort_names(&self) -> Vec<String> {
        self.spec.cohorts.iter().map(|c| c.name.clone()).collect()
    }
}

/// Plug-in estimate (nats) of the mutual information between a text token
/// and the latent topic of the item it belongs to.
pub fn text_topic_mutual_information(world: &SyntheticWorld) -> f64 {
    let nt = world.spec.num_topics;
    let v = world.spec.text_vocab;
    let mut joint = vec![0f64; nt * v];
    let mut total = 0.0;
    for (it, &t) in world.items.iter().zip(&world.item_topics) {
        for &w in &it.text_tokens {
            joint[t * v + w] += 1.0;
            total += 1.0;
        }
    }
    let mut pt = vec![0.0; nt];
    let mut pw = vec![0.0; v];
    for t in 0..nt {
        for w in 0..v {
            let p = joint[t * v + w] / total;
            pt[t] += p;
            pw[w] += p;
        }
    }
    let mut mi = 0.0;
    for t in 0..nt {
        for w in 0..v {
            let p = joint[t * v + w] / total;
            if p > 0.0 {
                mi += p * (p / (pt[t] * pw[w])).ln();
            }
        }
    }
    mi
}

/// One training or evaluation example: `history = seq[..end]`, target `seq[end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub user: usize,
    pub end: usize,
}

/// Leave-one-out split of every sufficiently long user.
#[derive(Debug, Clone)]
pub struct Split {
    /// Users kept (indices into the world).
    pub users: Vec<usize>,
    /// Users dropped for having fewer than three interactions.
    pub excluded: usize,
}

impl Split {
    /// Training prefixes: every position inside the training part with a
    /// non-empty history.
    pub fn train_samples(&self, world: &SyntheticWorld) -> Vec<Sample> {
        let mut out = Vec::new();
        for &u in &self.users {
            let n_train = world.interactions[u].len() - 2;
            out.extend((1..n_train).map(|end| Sample { user: u, end }));
        }
        out
    }

    /// History = training part, target = second-to-last interaction.
    pub fn validation_samples(&self, world: &SyntheticWorld) -> Vec<Sample> {
        self.users
            .iter()
            .map(|&u| Sample {
                user: u,
                end: world.interactions[u].len() - 2,
            })
            .collect()
    }

    /// History = everything but the last interaction, target = last.
    pub fn test_samples(&self, world: &SyntheticWorld) -> Vec<Sample> {
        self.users
            .iter()
            .map(|&u| Sample {
                user: u,
                end: world.interactions[u].len() - 1,
            })
            .collect()
    }

    /// `(train items, validation item, test item)` of user `u`.
    pub fn parts<'w>(&self, world: &'w SyntheticWorld, u: usize) -> (&'w [usize], usize, usize) {
        let s = &world.interactions[u];
        let n = s.len();
        (&s[..n - 2], s[n - 2], s[n - 1])
    }
}

pub fn leave_one_out_split(world: &SyntheticWorld) -> Split {
    let (users, short): (Vec<usize>, Vec<usize>) = (0..world.users.len()).partition(|&u| world.interactions[u].len() >= 3);
    Split {
        users,
        excluded: short.len(),
    }
}

/// Optional ingestion of review-style JSON Lines (`user_id`, `item_id`,
/// `timestamp` fields, as in the public Amazon review dumps) into
/// chronological per-user item-id lists. Users with fewer than
/// `min_interactions` reviews are dropped.
pub fn ingest_reviews(path: &Path, min_interactions: usize) -> Result<Vec<(String, Vec<String>)>> {
    #[derive(Deserialize)]
    struct Review {
        #[serde(alias = "reviewerID")]
        user_id: String,
        #[serde(alias = "asin", alias = "parent_asin")]
        item_id: String,
        #[serde(alias = "unixReviewTime", default)]
        timestamp: i64,
    }
    let f = std::fs::File::open(path).map_err(|_| LwgrError::MissingArtifact(path.to_path_buf()))?;
    let mut per_user: HashMap<String, Vec<(i64, usize, String)>> = HashMap::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Review = serde_json::from_str(&line)?;
        per_user.entry(r.user_id).or_default().push((r.timestamp, n, r.item_id));
    }
    let mut out: Vec<(String, Vec<String>)> = per_user
        .into_iter()
        .filter(|(_, v)| v.len() >= min_interactions)
        .map(|(u, mut v)| {
            v.sort();
            (u, v.into_iter().map(|(_, _, i)| i).collect())
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
