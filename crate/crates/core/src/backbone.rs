//! Pre-norm causal Transformer over packed sequences with adapter hooks.
//!
//! Every adapted linear map computes `W x + b + Δ(x)`, where `Δ` comes from a
//! [`SiteAdapter`]. With no adapter the forward is the plain frozen model.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Affine, Init, Norm};
use crate::numcore::{Decay, ParamId, ParamStore, Segments, Tape, Var};
use crate::trainkit::{AdamConfig, AdamW};

/// Linear maps inside a block that may carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfUp,
    FfDown,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::AttnQ,
        Target::AttnK,
        Target::AttnV,
        Target::AttnO,
        Target::FfUp,
        Target::FfDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::AttnQ => "attn_q",
            Target::AttnK => "attn_k",
            Target::AttnV => "attn_v",
            Target::AttnO => "attn_o",
            Target::FfUp => "ff_up",
            Target::FfDown => "ff_down",
        }
    }

    /// `(d_in, d_out)` of the base matrix.
    pub fn dims(self, d_model: usize, d_ff: usize) -> (usize, usize) {
        match self {
            Target::FfUp => (d_model, d_ff),
            Target::FfDown => (d_ff, d_model),
            _ => (d_model, d_model),
        }
    }
}

/// One adapted matrix: `(layer, target)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub target: Target,
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.target.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Zero means "take it from the dataset vocabulary".
    pub vocab_size: usize,
    pub max_positions: usize,
    pub adapted_targets: Vec<Target>,
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 0,
            max_positions: 512,
            adapted_targets: vec![Target::AttnQ, Target::AttnV, Target::FfUp, Target::FfDown],
            init_std: 0.02,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("backbone: {m}")));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size < 3 {
            return bad("vocab_size must cover the reserved ids");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive");
        }
        if self.adapted_targets.is_empty() {
            return bad("adapted_targets must be nonempty");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    /// Adapted sites in layer-major order, targets in canonical order.
    pub fn sites(&self) -> Vec<SiteId> {
        let mut targets = self.adapted_targets.clone();
        targets.sort();
        targets.dedup();
        (0..self.n_layers)
            .flat_map(|layer| targets.iter().map(move |&target| SiteId { layer, target }))
            .collect()
    }
}

/// Supplies `ΔW_j x` for adapted sites.
pub trait SiteAdapter {
    /// Every site this adapter will be asked about.
    fn sites(&self) -> Vec<SiteId>;

    /// Adjustment for the packed site input `x` `[S×d_in]`, shaped `[S×d_out]`.
    fn delta(&mut self, tape: &mut Tape, store: &ParamStore, site: SiteId, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    ln2: Norm,
    up: Affine,
    down: Affine,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    sites: Vec<SiteId>,
    params: Vec<ParamId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            seed: 7,
        }
    }
}

impl Backbone {
    /// Registers all backbone parameters (trainable until [`Backbone::freeze`]).
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, std) = (cfg.d_model, cfg.init_std);
        let first = store.len();
        let tok_emb = store.gaussian("backbone.tok_emb", &[cfg.vocab_size, d], std, rng, Decay::No)?;
        let pos_emb = store.gaussian("backbone.pos_emb", &[cfg.max_positions, d], std, rng, Decay::No)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("backbone.layer{l}");
            let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, t: Target| {
                let (i, o) = t.dims(d, cfg.d_ff);
                Affine::new(store, &format!("{p}.{}", t.name()), i, o, Init::Gaussian(std), rng)
            };
            blocks.push(Block {
                ln1: Norm::new(store, &format!("{p}.ln1"), d)?,
                q: lin(store, rng, Target::AttnQ)?,
                k: lin(store, rng, Target::AttnK)?,
                v: lin(store, rng, Target::AttnV)?,
                o: lin(store, rng, Target::AttnO)?,
                ln2: Norm::new(store, &format!("{p}.ln2"), d)?,
                up: lin(store, rng, Target::FfUp)?,
                down: lin(store, rng, Target::FfDown)?,
            });
        }
        let ln_f = Norm::new(store, "backbone.ln_f", d)?;
        let params = (first..store.len()).map(ParamId).collect();
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            sites: cfg.sites(),
            params,
        })
    }

    pub fn sites(&self) -> &[SiteId] {
        &self.sites
    }

    /// Every parameter owned by the backbone, embeddings included.
    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.params.iter().map(|&id| store.tensor(id).numel()).sum()
    }

    /// Marks every backbone parameter as non-trainable. Idempotent.
    pub fn freeze(&self, store: &mut ParamStore) {
        for &id in &self.params {
            store.set_trainable(id, false);
        }
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        self.params.iter().all(|&id| !store.is_trainable(id))
    }

    pub fn checksum(&self, store: &ParamStore) -> u64 {
        store.checksum(|p| p.name.starts_with("backbone."))
    }

    /// Token-embedding rows for `ids`, `[n×d]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let e = tape.param(store, self.tok_emb);
        tape.index_select(e, 0, ids)
    }

    /// Runs the stack on packed embeddings `x` `[S×d]`; positions restart at
    /// every segment boundary.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        seg: &Segments,
        mut adapter: Option<&mut dyn SiteAdapter>,
    ) -> Result<Var> {
        if seg.max_len() > self.cfg.max_positions {
            return Err(Error::SequenceTooLong {
                len: seg.max_len(),
                max: self.cfg.max_positions,
            });
        }
        if tape.shape(x) != [seg.total_rows(), self.cfg.d_model] {
            return Err(Error::dim("backbone input", tape.shape(x), &[seg.total_rows(), self.cfg.d_model]));
        }
        if let Some(a) = adapter.as_deref() {
            if let Some(s) = a.sites().into_iter().find(|s| !self.sites.contains(s)) {
                return Err(Error::UnknownSite(s.to_string()));
            }
        }
        let pe = tape.param(store, self.pos_emb);
        let pos = tape.index_select(pe, 0, &seg.positions())?;
        let mut h = tape.add(x, pos)?;
        for (layer, b) in self.blocks.iter().enumerate() {
            let mut site = |tape: &mut Tape, lin: &Affine, t: Target, x: Var| -> Result<Var> {
                let y = lin.forward(tape, store, x)?;
                let id = SiteId { layer, target: t };
                match adapter.as_deref_mut() {
                    Some(a) if self.sites.contains(&id) => {
                        let d = a.delta(tape, store, id, x)?;
                        tape.add(y, d)
                    }
                    _ => Ok(y),
                }
            };
            let n1 = b.ln1.forward(tape, store, h)?;
            let q = site(tape, &b.q, Target::AttnQ, n1)?;
            let k = site(tape, &b.k, Target::AttnK, n1)?;
            let v = site(tape, &b.v, Target::AttnV, n1)?;
            let att = tape.causal_attention(q, k, v, self.cfg.n_heads, seg)?;
            let o = site(tape, &b.o, Target::AttnO, att)?;
            h = tape.add(h, o)?;
            let n2 = b.ln2.forward(tape, store, h)?;
            let up = site(tape, &b.up, Target::FfUp, n2)?;
            let act = tape.gelu(up);
            let down = site(tape, &b.down, Target::FfDown, act)?;
            h = tape.add(h, down)?;
        }
        self.ln_f.forward(tape, store, h)
    }

    /// Mean next-token cross-entropy over packed sequences, using the token
    /// embedding as the output layer.
    pub fn lm_loss(&self, tape: &mut Tape, store: &ParamStore, seqs: &[&[usize]]) -> Result<Var> {
        let seqs: Vec<&[usize]> = seqs.iter().copied().filter(|s| s.len() >= 2).collect();
        if seqs.is_empty() {
            return Err(Error::Input("language-model batch needs a sequence of length ≥ 2".into()));
        }
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let seg = Segments::from_lengths(&seqs.iter().map(|s| s.len()).collect::<Vec<_>>())?;
        let x = self.embed(tape, store, &ids)?;
        let h = self.forward(tape, store, x, &seg, None)?;
        let mut rows = Vec::new();
        let mut next = Vec::new();
        for &(s, l) in seg.spans() {
            for r in s..s + l - 1 {
                rows.push(r);
                next.push(ids[r + 1]);
            }
        }
        let hs = tape.index_select(h, 0, &rows)?;
        let e = tape.param(store, self.tok_emb);
        let logits = tape.matmul_t(hs, e)?;
        let lp = tape.log_softmax(logits, 1)?;
        let v = self.cfg.vocab_size;
        let mut onehot = vec![0.0; rows.len() * v];
        for (i, &t) in next.iter().enumerate() {
            onehot[i * v + t] = 1.0;
        }
        let mask = tape.constant(&[rows.len(), v], onehot)?;
        let picked = tape.mul(lp, mask)?;
        let total = tape.sum_all(picked);
        Ok(tape.scale(total, -1.0 / rows.len() as f64))
    }

    /// Trains the backbone as a language model on `corpus`, then freezes it.
    /// Returns the loss of every step. Sequences longer than
    /// `max_positions` keep their most recent tokens.
    pub fn pretrain_lm(&self, store: &mut ParamStore, corpus: &[Vec<usize>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
        if self.is_frozen(store) {
            return Err(Error::Frozen);
        }
        let usable: Vec<&[usize]> = corpus
            .iter()
            .filter(|s| s.len() >= 2)
            .map(|s| &s[s.len().saturating_sub(self.cfg.max_positions)..])
            .collect();
        if cfg.steps > 0 && usable.is_empty() {
            return Err(Error::Input("pretraining corpus has no sequence of length ≥ 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamW::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut losses = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let batch: Vec<&[usize]> = (0..cfg.batch_size.max(1))
                .map(|_| *usable.choose(&mut rng).expect("nonempty"))
                .collect();
            let mut tape = Tape::new();
            let loss = self.lm_loss(&mut tape, store, &batch)?;
            tape.backward(loss)?;
            store.zero_grads();
            tape.accumulate_into(store);
            opt.update(store, cfg.lr);
            losses.push(tape.scalar(loss));
        }
        self.freeze(store);
        Ok(losses)
    }
}
