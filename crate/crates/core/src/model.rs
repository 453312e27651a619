//! The assembled dual-view model: frozen backbone, behavioral projector,
//! expert pool and fusion parameters in one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PretrainConfig};
use crate::dpmoe::{ExpertConfig, ExpertPool, RoutingDecision, View, ViewAdapter, ViewBalance};
use crate::error::{Error, Result};
use crate::fusion::{extract_representation, fuse, single_view, AcfParams, ViewOutputs};
use crate::nn::{Affine, Init};
use crate::numcore::{ParamId, ParamStore, Tape};
use crate::views::{build_views, SeqItem, ViewConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub experts: ExpertConfig,
    pub views: ViewConfig,
    pub pretrain: PretrainConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.experts.validate()?;
        self.views.validate(self.backbone.max_positions)
    }
}

/// Which parts of the pipeline run during encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub semantic: bool,
    pub behavioral: bool,
    /// Run the expert adapters; off means the plain frozen backbone.
    pub adapt: bool,
    /// Keep every routing decision for inspection.
    pub record: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            semantic: true,
            behavioral: true,
            adapt: true,
            record: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub out: ViewOutputs,
    pub balance: Vec<ViewBalance>,
    pub decisions: Vec<RoutingDecision>,
}

#[derive(Debug, Clone)]
pub struct L2Rec {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub projector: Affine,
    pub pool: ExpertPool,
    pub acf: AcfParams,
}

impl L2Rec {
    /// Builds the model with a random frozen backbone.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, &[])
    }

    /// Builds the model, first pretraining the backbone as a language model
    /// on `corpus` for `cfg.pretrain.steps` steps.
    pub fn build(cfg: &ModelConfig, seed: u64, corpus: &[Vec<usize>]) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, &mut store, &mut rng)?;
        if cfg.pretrain.steps > 0 {
            backbone.pretrain_lm(&mut store, corpus, &cfg.pretrain)?;
        }
        backbone.freeze(&mut store);
        let d = cfg.backbone.d_model;
        let projector = Affine::new(&mut store, "views.p_u", d, d, Init::Identity, &mut rng)?;
        let pool = ExpertPool::new(&cfg.experts, &cfg.backbone, &mut store, &mut rng)?;
        let acf = AcfParams::new(&mut store, d, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            projector,
            pool,
            acf,
        })
    }

    /// Parameters outside the backbone.
    pub fn adapter_params(&self) -> Vec<ParamId> {
        let mut v = self.projector.params().to_vec();
        v.extend_from_slice(self.pool.param_ids());
        v.extend(self.acf.params());
        v
    }

    /// Encodes a packed batch of entities (user histories or single items).
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, entities: &[&[SeqItem]], opts: EncodeOptions) -> Result<Encoded> {
        if !opts.semantic && !opts.behavioral {
            return Err(Error::Config("at least one view must run".into()));
        }
        let input = build_views(tape, store, &self.backbone, &self.projector, entities, &self.cfg.views)?;
        let readout = self.cfg.views.readout;
        let mut balance = Vec::new();
        let mut decisions = Vec::new();
        let mut run = |tape: &mut Tape, view: View| -> Result<_> {
            let (x, u, seg) = match view {
                View::Semantic => (input.semantic, input.u_sem, &input.sem_seg),
                View::Behavioral => (input.behavioral, input.u_beh, &input.beh_seg),
            };
            let h = if opts.adapt {
                let mut ad = ViewAdapter::new(&self.pool, view, u, seg.clone(), opts.record);
                let h = self.backbone.forward(tape, store, x, seg, Some(&mut ad))?;
                balance.extend(ad.balance(tape));
                decisions.append(&mut ad.decisions);
                h
            } else {
                self.backbone.forward(tape, store, x, seg, None)?
            };
            extract_representation(tape, h, seg, readout)
        };
        let h_sem = if opts.semantic { Some(run(tape, View::Semantic)?) } else { None };
        let h_beh = if opts.behavioral { Some(run(tape, View::Behavioral)?) } else { None };
        let out = match (h_beh, h_sem) {
            (Some(b), Some(s)) => fuse(tape, store, &self.acf, b, s)?,
            (Some(b), None) => single_view(tape, store, &self.acf, b, true)?,
            (None, Some(s)) => single_view(tape, store, &self.acf, s, false)?,
            (None, None) => unreachable!("checked above"),
        };
        Ok(Encoded { out, balance, decisions })
    }

    /// Fused representations `h^F`, one row per entity, computed without
    /// recording gradients in chunks of `chunk` entities.
    pub fn embed(&self, entities: &[&[SeqItem]], opts: EncodeOptions, chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(entities.len());
        for part in entities.chunks(chunk.max(1)) {
            let mut tape = Tape::no_grad();
            let enc = self.encode(&mut tape, &self.store, part, opts)?;
            let d = tape.shape(enc.out.h_f)[1];
            out.extend(tape.value(enc.out.h_f).chunks(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}
