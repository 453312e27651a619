use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::optim::{clip_grad_norm, AdamConfig, AdamW};
use crate::config::Config;
use crate::datagen::{Dataset, Split};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalProtocol, MetricReport};
use crate::model::{EncodeOptions, L2Rec};
use crate::numcore::{Fnv64, ParamId, ParamStore, Tape, Var};
use crate::objectives::{bpc_loss, lb_loss, negative_sets, rec_loss, total_loss, LossConfig, LossValues};
use crate::views::{semantic_tokens, SeqItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub no_semantic: bool,
    pub no_behavioral: bool,
    pub no_bpc: bool,
    pub no_pr: bool,
    pub no_adapt: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 5] = ["no_semantic", "no_behavioral", "no_bpc", "no_pr", "no_adapt"];

    pub fn enable(&mut self, name: &str) -> Result<()> {
        let flag = match name {
            "no_semantic" => &mut self.no_semantic,
            "no_behavioral" => &mut self.no_behavioral,
            "no_bpc" => &mut self.no_bpc,
            "no_pr" => &mut self.no_pr,
            "no_adapt" => &mut self.no_adapt,
            _ => return Err(Error::Config(format!("unknown ablation {name:?}; expected one of {:?}", Self::NAMES))),
        };
        *flag = true;
        Ok(())
    }

    pub fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            semantic: !self.no_semantic,
            behavioral: !self.no_behavioral,
            adapt: !self.no_adapt,
            record: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seeds parameter init; the data stream uses the same seed on a
    /// separate ChaCha stream.
    pub seed: u64,
    pub batch_size: usize,
    /// First phase: targets drawn from every training position.
    pub steps: u64,
    pub lr: f64,
    /// Second phase: targets are each user's latest training interaction.
    pub finetune_steps: u64,
    pub lr_finetune: f64,
    /// Gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub adam: AdamConfig,
    /// Validation cadence in steps; 0 disables periodic validation.
    pub eval_every: u64,
    /// Users scored per periodic validation; 0 means all.
    pub eval_users: usize,
    pub ablation: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            batch_size: 16,
            steps: 600,
            lr: 3e-3,
            finetune_steps: 0,
            lr_finetune: 5e-4,
            grad_clip: 1.0,
            adam: AdamConfig::default(),
            eval_every: 0,
            eval_users: 200,
            ablation: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        for (n, v) in [("lr", self.lr), ("lr_finetune", self.lr_finetune)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{n} must be positive")));
            }
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("train.grad_clip must be nonnegative".into()));
        }
        if self.ablation.no_semantic && self.ablation.no_behavioral {
            return Err(Error::Config("cannot ablate both views".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        if self.ablation.no_adapt {
            0
        } else {
            self.steps + self.finetune_steps
        }
    }
}

/// Splits every parameter into (frozen, trainable).
pub fn trainable_partition(model: &L2Rec) -> (Vec<ParamId>, Vec<ParamId>) {
    model.store.ids().partition(|&id| !model.store.is_trainable(id))
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_rec: f64,
    pub l_bpc: f64,
    pub l_lb: f64,
    pub total: f64,
    pub lr: f64,
    pub val_recall10: Option<f64>,
    pub val_ndcg10: Option<f64>,
    pub grad_norm: f64,
    /// Running hash of every sampled example so far.
    pub data_hash: String,
}

/// Owns the model, optimizer and data stream of one run.
pub struct Trainer<'a> {
    pub cfg: Config,
    pub data: &'a Dataset,
    pub model: L2Rec,
    pub opt: AdamW,
    pub step: u64,
    rng: ChaCha8Rng,
    order: Fnv64,
    examples: Vec<(usize, usize)>,
    latest: Vec<(usize, usize)>,
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

impl<'a> Trainer<'a> {
    /// Builds the model (pretraining the backbone on the users' training
    /// text when configured) and applies the ablation partition.
    pub fn new(mut cfg: Config, data: &'a Dataset) -> Result<Self> {
        bind_vocab(&mut cfg, data)?;
        cfg.validate()?;
        let corpus: Vec<Vec<usize>> = (0..data.users.len())
            .map(|u| {
                let end = data.train_targets(u).end;
                semantic_tokens(&data.users[u].items[..end], cfg.views.t_max)
            })
            .collect::<Result<_>>()?;
        let mut model = L2Rec::build(&cfg.model(), cfg.train.seed, &corpus)?;
        let ab = cfg.train.ablation;
        if ab.no_pr {
            model.pool.depersonalize(&mut model.store);
        }
        if ab.no_adapt {
            for id in model.adapter_params() {
                model.store.set_trainable(id, false);
            }
        }
        let rng = data_rng(cfg.train.seed);
        Self::assemble(cfg, data, model, 0, rng, Fnv64::new(), None)
    }

    fn assemble(
        cfg: Config,
        data: &'a Dataset,
        model: L2Rec,
        step: u64,
        rng: ChaCha8Rng,
        order: Fnv64,
        opt: Option<AdamW>,
    ) -> Result<Self> {
        let examples = data.train_examples();
        if examples.is_empty() {
            return Err(Error::Input("dataset has no training examples".into()));
        }
        let latest = (0..data.users.len())
            .filter_map(|u| {
                let r = data.train_targets(u);
                (!r.is_empty()).then(|| (u, r.end - 1))
            })
            .collect();
        let opt = opt.unwrap_or_else(|| AdamW::new(cfg.train.adam));
        Ok(Self {
            cfg,
            data,
            model,
            opt,
            step,
            rng,
            order,
            examples,
            latest,
        })
    }

    /// Restores a run from a checkpoint so that further steps match an
    /// uninterrupted run.
    pub fn resume(ckpt: &Checkpoint, data: &'a Dataset) -> Result<Self> {
        let cfg = Config::from_toml(&ckpt.config)?;
        if ckpt.vocab != data.vocab.tokens() {
            return Err(Error::Checkpoint("vocabulary differs from the dataset".into()));
        }
        let model = ckpt.restore_model()?;
        let opt = ckpt.restore_optimizer(&model)?;
        let rng = ckpt.rng.restore();
        Self::assemble(cfg, data, model, ckpt.step, rng, Fnv64::from_state(ckpt.data_hash), Some(opt))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.cfg, &self.data.vocab, &self.model, &self.opt, self.step, RngState::capture(&self.rng), self.order.finish())
    }

    pub fn encode_options(&self) -> EncodeOptions {
        self.cfg.train.ablation.encode_options()
    }

    pub fn loss_config(&self) -> LossConfig {
        let mut l = self.cfg.loss.clone();
        if self.cfg.train.ablation.no_bpc {
            l.gamma = 0.0;
        }
        l
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.train.total_steps()
    }

    pub fn data_hash(&self) -> u64 {
        self.order.finish()
    }

    /// Draws the next batch from the data stream.
    pub fn sample_batch(&mut self) -> Result<Batch> {
        let tc = &self.cfg.train;
        let pool = if self.step < tc.steps { &self.examples } else { &self.latest };
        let n_items = self.data.catalog.len();
        if n_items < 2 {
            return Err(Error::Input("need at least two catalog items".into()));
        }
        let k_neg = self.cfg.loss.k_neg.min(n_items - 1);
        let mut users = Vec::with_capacity(tc.batch_size);
        let mut sampled = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            let (u, t) = pool[self.rng.gen_range(0..pool.len())];
            let pos = self.data.users[u].items[t].item;
            let negs: Vec<usize> = sample(&mut self.rng, n_items - 1, k_neg)
                .into_iter()
                .map(|j| if j >= pos { j + 1 } else { j })
                .collect();
            for v in [u, t, pos].iter().chain(&negs) {
                self.order.write(&(*v as u64).to_le_bytes());
            }
            users.push((u, t));
            sampled.push(negs);
        }
        Batch::new(self.data, users, &sampled, self.cfg.loss.in_batch_negatives)
    }

    /// One optimisation step on a freshly sampled batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let lr = if self.step < self.cfg.train.steps { self.cfg.train.lr } else { self.cfg.train.lr_finetune };
        let batch = self.sample_batch()?;
        let loss_cfg = self.loss_config();
        let step = self.step;
        let non_finite = |detail: String| Error::NonFinite {
            step,
            detail: format!("{detail}; batch (user, target) = {:?}", batch.users),
        };
        let mut tape = Tape::new();
        let (total, values) = objective(&self.model, &self.model.store, &mut tape, self.data, &batch, &loss_cfg, self.encode_options())
            .map_err(|e| match e {
                Error::NonFiniteValue(op) => non_finite(format!("non-finite activations in {op}")),
                e => e,
            })?;
        if !values.total.is_finite() {
            return Err(non_finite(format!(
                "rec={} bpc={} lb={} total={}",
                values.rec, values.bpc, values.lb, values.total
            )));
        }
        tape.backward(total)?;
        let store = &mut self.model.store;
        store.zero_grads();
        tape.accumulate_into(store);
        let grad_norm = clip_grad_norm(store, self.cfg.train.grad_clip);
        self.opt.update(store, lr);
        self.step += 1;

        let mut rec = StepRecord {
            step: self.step,
            l_rec: values.rec,
            l_bpc: values.bpc,
            l_lb: values.lb,
            total: values.total,
            lr,
            val_recall10: None,
            val_ndcg10: None,
            grad_norm,
            data_hash: format!("{:016x}", self.order.finish()),
        };
        let every = self.cfg.train.eval_every;
        if every > 0 && self.step.is_multiple_of(every) {
            let r = self.validate()?;
            rec.val_recall10 = Some(r.recall_at_k);
            rec.val_ndcg10 = Some(r.ndcg_at_k);
        }
        Ok(rec)
    }

    /// Validation-split metrics on at most `train.eval_users` users.
    pub fn validate(&self) -> Result<MetricReport> {
        let proto = EvalProtocol {
            split: Split::Valid,
            max_users: self.cfg.train.eval_users,
            ..self.cfg.eval.clone()
        };
        evaluate(&self.model, self.data, &proto, self.encode_options())
    }

    /// Steps until `total_steps`, handing every record to `log`.
    pub fn run(&mut self, mut log: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while !self.done() {
            let r = self.step()?;
            log(&r)?;
        }
        Ok(())
    }
}

/// One training batch: user prefixes, the items they are scored against,
/// and per-user positive and negative rows into `items`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(user, target position)`; the user's history is everything before.
    pub users: Vec<(usize, usize)>,
    /// Sorted distinct catalog indices.
    pub items: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl Batch {
    /// `sampled` lists catalog indices per user.
    pub fn new(data: &Dataset, users: Vec<(usize, usize)>, sampled: &[Vec<usize>], in_batch: bool) -> Result<Self> {
        let pos: Vec<usize> = users.iter().map(|&(u, t)| data.users[u].items[t].item).collect();
        let mut items: Vec<usize> = pos.iter().chain(sampled.iter().flatten()).copied().collect();
        items.sort_unstable();
        items.dedup();
        let row = |i: usize| items.binary_search(&i).expect("item collected");
        let positives: Vec<usize> = pos.iter().map(|&i| row(i)).collect();
        let sampled_rows: Vec<Vec<usize>> = sampled.iter().map(|s| s.iter().map(|&i| row(i)).collect()).collect();
        let negatives = negative_sets(&positives, &sampled_rows, in_batch)?;
        Ok(Self {
            users,
            items,
            positives,
            negatives,
        })
    }
}

/// The full objective for one batch: users and items are encoded in one
/// packed forward pass, then scored with the recommendation, alignment and
/// balance losses.
pub fn objective(
    model: &L2Rec,
    store: &ParamStore,
    tape: &mut Tape,
    data: &Dataset,
    batch: &Batch,
    loss: &LossConfig,
    opts: EncodeOptions,
) -> Result<(Var, LossValues)> {
    let singles: Vec<SeqItem> = batch.items.iter().map(|&i| data.item(i)).collect();
    let mut entities: Vec<&[SeqItem]> = batch.users.iter().map(|&(u, t)| &data.users[u].items[..t]).collect();
    entities.extend(singles.iter().map(std::slice::from_ref));
    let n = batch.users.len();
    let enc = model.encode(tape, store, &entities, opts)?;
    let user_rows: Vec<usize> = (0..n).collect();
    let item_rows: Vec<usize> = (n..entities.len()).collect();
    let hu = tape.index_select(enc.out.h_f, 0, &user_rows)?;
    let hi = tape.index_select(enc.out.h_f, 0, &item_rows)?;
    let rec = rec_loss(tape, hu, hi, &batch.positives, &batch.negatives, loss.tau)?;
    let bpc = match (enc.out.ht_beh, enc.out.ht_sem) {
        (Some(hb), Some(hs)) if loss.gamma > 0.0 => {
            let hb = tape.index_select(hb, 0, &user_rows)?;
            let hs = tape.index_select(hs, 0, &user_rows)?;
            Some(bpc_loss(tape, hb, hs, loss.tau, loss.lambda)?)
        }
        _ => None,
    };
    let lb = if enc.balance.is_empty() { None } else { Some(lb_loss(tape, &enc.balance)?) };
    total_loss(tape, rec, bpc, lb, loss.gamma, loss.beta)
}

/// Fills `backbone.vocab_size` from the data, or checks it covers the data.
pub fn bind_vocab(cfg: &mut Config, data: &Dataset) -> Result<()> {
    let need = data.vocab.len();
    match cfg.backbone.vocab_size {
        0 => cfg.backbone.vocab_size = need,
        v if v < need => {
            return Err(Error::Config(format!("backbone.vocab_size {v} is smaller than the data vocabulary ({need})")));
        }
        _ => {}
    }
    Ok(())
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    pub validation: MetricReport,
}

/// Runs a full training job. With `out`, writes `config.toml`,
/// `metrics.jsonl` and `checkpoint.l2r` there.
pub fn train(cfg: &Config, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut tr = Trainer::new(cfg.clone(), data)?;
    let mut metrics = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), tr.cfg.to_toml()?)?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut history = Vec::new();
    tr.run(|r| {
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        history.push(r.clone());
        Ok(())
    })?;
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    let checkpoint = tr.checkpoint()?;
    if let Some(dir) = out {
        checkpoint.save(&dir.join("checkpoint.l2r"))?;
    }
    let validation = tr.validate()?;
    Ok(TrainOutcome {
        checkpoint,
        history,
        validation,
    })
}
