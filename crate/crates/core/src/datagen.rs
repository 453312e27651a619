//! Synthetic planted-preference interaction logs and their ingestion.
//!
//! Items belong to genres. Item text mixes genre words with common words
//! (the semantic signal); within a genre, items sit on a ring and users tend
//! to step to the ring successor of their last item (the behavioral signal).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Fnv64;
use crate::views::{words, SeqItem, UserSequence, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_genres: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub interactions_min: usize,
    pub interactions_max: usize,
    pub genre_affinity: f64,
    pub semantic_signal: f64,
    pub behavioral_signal: f64,
    /// Zipf exponent of within-genre item popularity; 0 is uniform.
    pub popularity_skew: f64,
    pub genre_words: usize,
    pub common_words: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 200,
            n_genres: 4,
            tokens_min: 5,
            tokens_max: 12,
            interactions_min: 10,
            interactions_max: 30,
            genre_affinity: 0.9,
            semantic_signal: 0.7,
            behavioral_signal: 0.6,
            popularity_skew: 0.0,
            genre_words: 30,
            common_words: 60,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("data: {m}")));
        if self.n_genres == 0 || self.n_genres > self.n_items {
            return bad(format!("n_genres {} must lie in 1..=n_items ({})", self.n_genres, self.n_items));
        }
        if self.n_users == 0 {
            return bad("n_users must be positive".into());
        }
        if self.tokens_min == 0 || self.tokens_min > self.tokens_max {
            return bad("need 1 <= tokens_min <= tokens_max".into());
        }
        if self.interactions_min == 0 || self.interactions_min > self.interactions_max {
            return bad("need 1 <= interactions_min <= interactions_max".into());
        }
        if !(0.5..=1.0).contains(&self.genre_affinity) {
            return bad("genre_affinity must lie in [0.5, 1]".into());
        }
        for (n, v) in [("semantic_signal", self.semantic_signal), ("behavioral_signal", self.behavioral_signal)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{n} must lie in [0, 1]"));
            }
        }
        if !(self.popularity_skew >= 0.0) {
            return bad("popularity_skew must be nonnegative".into());
        }
        if self.genre_words == 0 || self.common_words == 0 {
            return bad("word pools must be nonempty".into());
        }
        Ok(())
    }
}

/// One line of the interaction log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub user_id: String,
    pub item_id: String,
    pub text: String,
    pub ts: i64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub users: BTreeMap<String, usize>,
    pub items: BTreeMap<String, usize>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pa", "se", "do", "fu", "gi", "ha", "jo", "be",
];

/// Deterministic pseudo-word for an index.
fn pseudo_word(mut k: usize) -> String {
    let mut w = String::new();
    loop {
        w.push_str(SYLLABLES[k % SYLLABLES.len()]);
        k /= SYLLABLES.len();
        if k == 0 {
            break;
        }
        k -= 1;
    }
    w.push_str(SYLLABLES[w.len() % 7]);
    w
}

pub fn user_id(u: usize) -> String {
    format!("u{u:05}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

/// Genre of item `i`: genres are dealt round-robin.
pub fn item_genre(i: usize, n_genres: usize) -> usize {
    i % n_genres
}

/// Generates the log (sorted by user, then timestamp) and the planted genres.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<LogRecord>, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = cfg.n_genres;
    let genre_pool: Vec<Vec<String>> = (0..g)
        .map(|k| (0..cfg.genre_words).map(|j| pseudo_word(k * cfg.genre_words + j)).collect())
        .collect();
    let common: Vec<String> = (0..cfg.common_words).map(|j| pseudo_word(g * cfg.genre_words + j)).collect();

    let mut texts = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let n = rng.gen_range(cfg.tokens_min..=cfg.tokens_max);
        let words: Vec<&str> = (0..n)
            .map(|_| {
                if rng.gen_bool(cfg.semantic_signal) {
                    genre_pool[item_genre(i, g)].choose(&mut rng).expect("nonempty pool").as_str()
                } else {
                    common.choose(&mut rng).expect("nonempty pool").as_str()
                }
            })
            .collect();
        texts.push(words.join(" "));
    }

    let members: Vec<Vec<usize>> = (0..g).map(|k| (k..cfg.n_items).step_by(g).collect()).collect();
    let mut ring: Vec<Vec<usize>> = members.clone();
    for r in &mut ring {
        r.shuffle(&mut rng);
    }
    let mut next = vec![0; cfg.n_items];
    for r in &ring {
        for (p, &i) in r.iter().enumerate() {
            next[i] = r[(p + 1) % r.len()];
        }
    }
    let samplers: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            let mut rank: Vec<usize> = (0..m.len()).collect();
            rank.shuffle(&mut rng);
            let w: Vec<f64> = rank.iter().map(|&r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_skew)).collect();
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();

    let mut truth = GroundTruth::default();
    for i in 0..cfg.n_items {
        truth.items.insert(item_id(i), item_genre(i, g));
    }
    let mut records = Vec::new();
    for u in 0..cfg.n_users {
        let home = rng.gen_range(0..g);
        truth.users.insert(user_id(u), home);
        let n = rng.gen_range(cfg.interactions_min..=cfg.interactions_max);
        let mut ts: i64 = 1_600_000_000 + rng.gen_range(0..86_400);
        let mut prev: Option<usize> = None;
        for _ in 0..n {
            let genre = if g == 1 || rng.gen_bool(cfg.genre_affinity) {
                home
            } else {
                let k = rng.gen_range(0..g - 1);
                if k >= home {
                    k + 1
                } else {
                    k
                }
            };
            let step = rng.gen_bool(cfg.behavioral_signal);
            let item = match prev {
                Some(p) if step && item_genre(p, g) == genre => next[p],
                _ => members[genre][samplers[genre].sample(&mut rng)],
            };
            records.push(LogRecord {
                user_id: user_id(u),
                item_id: item_id(item),
                text: texts[item].clone(),
                ts,
            });
            ts += rng.gen_range(60..86_400);
            prev = Some(item);
        }
    }
    Ok((records, truth))
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: k + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_id: String,
    pub text: String,
    pub tokens: Vec<usize>,
}

/// Which held-out interaction a leave-one-out pass targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    /// Sorted by item id; a [`SeqItem::item`] indexes this list.
    pub catalog: Vec<CatalogItem>,
    /// Sorted by user id.
    pub users: Vec<UserSequence>,
}

/// Minimum history length for a user to enter evaluation.
pub const MIN_EVAL_LEN: usize = 3;

impl Dataset {
    /// Builds vocabulary, catalog and user sequences from log records.
    /// Line numbers in errors refer to `records` order, 1-based.
    pub fn from_records(records: &[LogRecord], source: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Data {
            path: source.to_path_buf(),
            line,
            msg,
        };
        let mut texts: BTreeMap<&str, (String, usize)> = BTreeMap::new();
        let mut by_user: BTreeMap<&str, Vec<(&str, i64)>> = BTreeMap::new();
        for (k, r) in records.iter().enumerate() {
            let norm = words(&r.text).collect::<Vec<_>>().join(" ");
            if norm.is_empty() {
                return Err(err(k + 1, format!("item {} has empty text", r.item_id)));
            }
            match texts.get(r.item_id.as_str()) {
                Some((t, first)) if *t != norm => {
                    return Err(err(k + 1, format!("item {} text differs from line {first}", r.item_id)));
                }
                Some(_) => {}
                None => {
                    texts.insert(&r.item_id, (norm, k + 1));
                }
            }
            let seq = by_user.entry(&r.user_id).or_default();
            if let Some(&(_, last)) = seq.last() {
                if r.ts < last {
                    return Err(err(k + 1, format!("timestamp goes backwards for user {}", r.user_id)));
                }
            }
            seq.push((&r.item_id, r.ts));
        }
        if texts.is_empty() {
            return Err(err(0, "no interactions".into()));
        }
        let vocab = Vocab::build(texts.values().map(|(t, _)| t.as_str()));
        let index: HashMap<&str, usize> = texts.keys().enumerate().map(|(i, &id)| (id, i)).collect();
        let catalog: Vec<CatalogItem> = texts
            .iter()
            .map(|(&id, (t, _))| CatalogItem {
                item_id: id.to_string(),
                text: t.clone(),
                tokens: vocab.tokenize(t),
            })
            .collect();
        let users = by_user
            .into_iter()
            .map(|(u, seq)| UserSequence {
                user_id: u.to_string(),
                items: seq
                    .into_iter()
                    .map(|(i, ts)| {
                        let item = index[i];
                        SeqItem {
                            item,
                            tokens: catalog[item].tokens.clone(),
                            ts,
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(Self { vocab, catalog, users })
    }

    /// The catalog item as an interaction with timestamp 0.
    pub fn item(&self, idx: usize) -> SeqItem {
        SeqItem {
            item: idx,
            tokens: self.catalog[idx].tokens.clone(),
            ts: 0,
        }
    }

    pub fn items(&self) -> Vec<SeqItem> {
        (0..self.catalog.len()).map(|i| self.item(i)).collect()
    }

    /// Users with enough history for leave-one-out evaluation.
    pub fn eval_users(&self) -> Vec<usize> {
        (0..self.users.len()).filter(|&u| self.users[u].items.len() >= MIN_EVAL_LEN).collect()
    }

    /// `(input length, target position)` for a user under a split, or `None`
    /// when the user is excluded from evaluation.
    pub fn held_out(&self, u: usize, split: Split) -> Option<usize> {
        let n = self.users[u].items.len();
        if n < MIN_EVAL_LEN {
            return None;
        }
        Some(match split {
            Split::Test => n - 1,
            Split::Valid => n - 2,
        })
    }

    /// Target positions usable for training: never the validation or test
    /// interaction, and always with at least one prior interaction.
    pub fn train_targets(&self, u: usize) -> std::ops::Range<usize> {
        let n = self.users[u].items.len();
        let end = if n >= MIN_EVAL_LEN { n - 2 } else { n };
        1..end.max(1)
    }

    /// Every `(user, target)` training pair.
    pub fn train_examples(&self) -> Vec<(usize, usize)> {
        (0..self.users.len()).flat_map(|u| self.train_targets(u).map(move |t| (u, t))).collect()
    }

    /// Interaction counts visible before the split's target.
    pub fn popularity(&self, split: Split) -> Vec<f64> {
        let mut c = vec![0.0; self.catalog.len()];
        for (u, seq) in self.users.iter().enumerate() {
            let end = self.held_out(u, split).unwrap_or(seq.items.len());
            for it in &seq.items[..end] {
                c[it.item] += 1.0;
            }
        }
        c
    }

    /// Records in canonical form: sorted by user then time, normalised text.
    pub fn to_records(&self) -> Vec<LogRecord> {
        self.users
            .iter()
            .flat_map(|u| {
                u.items.iter().map(move |it| LogRecord {
                    user_id: u.user_id.clone(),
                    item_id: self.catalog[it.item].item_id.clone(),
                    text: self.catalog[it.item].text.clone(),
                    ts: it.ts,
                })
            })
            .collect()
    }

    pub fn n_interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    /// Stable hash of the vocabulary, catalog and sequences.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for t in self.vocab.tokens() {
            h.write(t.as_bytes());
            h.write(&[0]);
        }
        for r in self.to_records() {
            h.write(r.user_id.as_bytes());
            h.write(r.item_id.as_bytes());
            h.write(&r.ts.to_le_bytes());
        }
        h.finish()
    }
}

/// Reads and ingests an interaction log.
pub fn ingest(path: &Path) -> Result<Dataset> {
    let records = read_log(path)?;
    Dataset::from_records(&records, path)
}
