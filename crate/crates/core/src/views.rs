//! Semantic (token-level) and behavioral (item-level) inputs for a batch of
//! entities, packed row-wise so one backbone pass covers the whole batch.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::nn::Affine;
use crate::numcore::{ParamStore, Segments, Tape, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<sep>"];

/// Lowercased whitespace tokens.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved ids first, then corpus words by descending frequency, ties
    /// broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(w, _)| !RESERVED.contains(&w.as_str())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(w, _)| w)).collect();
        Self::from_tokens(tokens).expect("built vocabulary is duplicate-free")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Input("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.id(&w).unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(RESERVED[UNK])).collect::<Vec<_>>().join(" ")
    }
}

/// One interaction: catalog index, token ids of the item text, timestamp.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqItem {
    pub item: usize,
    pub tokens: Vec<usize>,
    pub ts: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<SeqItem>,
}

impl UserSequence {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Input(format!("user {} has no interactions", self.user_id)));
        }
        if self.items.windows(2).any(|w| w[1].ts < w[0].ts) {
            return Err(Error::Input(format!("user {} has decreasing timestamps", self.user_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Last,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub t_max: usize,
    pub l_max: usize,
    pub readout: Readout,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            t_max: 96,
            l_max: 32,
            readout: Readout::Last,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self, max_positions: usize) -> Result<()> {
        if self.t_max == 0 || self.l_max == 0 {
            return Err(Error::Config("views: t_max and l_max must be positive".into()));
        }
        if self.t_max.max(self.l_max) > max_positions {
            return Err(Error::Config(format!(
                "views: t_max {} / l_max {} exceed max_positions {max_positions}",
                self.t_max, self.l_max
            )));
        }
        Ok(())
    }
}

fn check_items(items: &[SeqItem]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Input("empty sequence".into()));
    }
    if let Some(it) = items.iter().find(|it| it.tokens.is_empty()) {
        return Err(Error::Input(format!("item {} has no tokens", it.item)));
    }
    Ok(())
}

/// `[c_1; sep; c_2; sep; …; c_L; sep]`, keeping the most recent `t_max` ids.
pub fn semantic_tokens(items: &[SeqItem], t_max: usize) -> Result<Vec<usize>> {
    check_items(items)?;
    let mut out = Vec::new();
    for it in items {
        out.extend_from_slice(&it.tokens);
        out.push(SEP);
    }
    let cut = out.len().saturating_sub(t_max);
    out.drain(..cut);
    Ok(out)
}

/// The most recent `l_max` interactions.
pub fn behavioral_items(items: &[SeqItem], l_max: usize) -> Result<&[SeqItem]> {
    check_items(items)?;
    Ok(&items[items.len().saturating_sub(l_max)..])
}

/// Packed dual-view input for `N` entities.
#[derive(Debug, Clone)]
pub struct DualViewInput {
    /// `E^S` rows of every entity, `[ΣT×d]`.
    pub semantic: Var,
    /// `E^B` rows of every entity, `[ΣL×d]`.
    pub behavioral: Var,
    /// `u^S` per entity, `[N×d]`.
    pub u_sem: Var,
    /// `u^B` per entity, `[N×d]`.
    pub u_beh: Var,
    pub sem_seg: Segments,
    pub beh_seg: Segments,
}

impl DualViewInput {
    pub fn len(&self) -> usize {
        self.sem_seg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sem_seg.is_empty()
    }
}

/// Token embeddings of every entity's semantic sequence.
pub fn build_semantic(
    tape: &mut Tape,
    store: &ParamStore,
    backbone: &Backbone,
    entities: &[&[SeqItem]],
    t_max: usize,
) -> Result<(Var, Segments)> {
    let mut ids = Vec::new();
    let mut lens = Vec::with_capacity(entities.len());
    for e in entities {
        let t = semantic_tokens(e, t_max)?;
        lens.push(t.len());
        ids.extend(t);
    }
    let seg = Segments::from_lengths(&lens)?;
    Ok((backbone.embed(tape, store, &ids)?, seg))
}

/// One row per interaction: `P_U(mean of the item's token embeddings)`.
pub fn build_behavioral(
    tape: &mut Tape,
    store: &ParamStore,
    backbone: &Backbone,
    projector: &Affine,
    entities: &[&[SeqItem]],
    l_max: usize,
) -> Result<(Var, Segments)> {
    let mut ids = Vec::new();
    let mut item_lens = Vec::new();
    let mut lens = Vec::with_capacity(entities.len());
    for e in entities {
        let items = behavioral_items(e, l_max)?;
        lens.push(items.len());
        for it in items {
            item_lens.push(it.tokens.len());
            ids.extend_from_slice(&it.tokens);
        }
    }
    let emb = backbone.embed(tape, store, &ids)?;
    let pooled = tape.segment_mean(emb, &Segments::from_lengths(&item_lens)?)?;
    let rows = projector.forward(tape, store, pooled)?;
    Ok((rows, Segments::from_lengths(&lens)?))
}

/// Mean over each entity's rows.
pub fn user_summaries(tape: &mut Tape, input: &DualViewInput) -> Result<(Var, Var)> {
    Ok((
        tape.segment_mean(input.semantic, &input.sem_seg)?,
        tape.segment_mean(input.behavioral, &input.beh_seg)?,
    ))
}

pub fn build_views(
    tape: &mut Tape,
    store: &ParamStore,
    backbone: &Backbone,
    projector: &Affine,
    entities: &[&[SeqItem]],
    cfg: &ViewConfig,
) -> Result<DualViewInput> {
    if entities.is_empty() {
        return Err(Error::Input("no entities to encode".into()));
    }
    let (semantic, sem_seg) = build_semantic(tape, store, backbone, entities, cfg.t_max)?;
    let (behavioral, beh_seg) = build_behavioral(tape, store, backbone, projector, entities, cfg.l_max)?;
    let u_sem = tape.segment_mean(semantic, &sem_seg)?;
    let u_beh = tape.segment_mean(behavioral, &beh_seg)?;
    Ok(DualViewInput {
        semantic,
        behavioral,
        u_sem,
        u_beh,
        sem_seg,
        beh_seg,
    })
}

/// A catalog item as a single-interaction entity.
pub fn encode_item(
    tape: &mut Tape,
    store: &ParamStore,
    backbone: &Backbone,
    projector: &Affine,
    item: &SeqItem,
    cfg: &ViewConfig,
) -> Result<DualViewInput> {
    build_views(tape, store, backbone, projector, &[std::slice::from_ref(item)], cfg)
}
