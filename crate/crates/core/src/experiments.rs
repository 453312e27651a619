//! Multi-run studies: ablation tables, hyperparameter sweeps and routing
//! dumps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::datagen::Dataset;
use crate::dpmoe::{routing_stats, RoutingDecision, View};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, MetricReport};
use crate::model::{EncodeOptions, L2Rec};
use crate::trainkit::{train, Ablations, TrainOutcome};

/// Trains under `cfg` and scores the result on `cfg.eval`.
pub fn train_and_evaluate(cfg: &Config, data: &Dataset) -> Result<(TrainOutcome, MetricReport)> {
    let out = train(cfg, data, None)?;
    let model = out.checkpoint.restore_model()?;
    let rep = evaluate(&model, data, &cfg.eval, cfg.train.ablation.encode_options())?;
    Ok((out, rep))
}

/// Variant labels and the ablation each one switches on.
pub fn variants() -> Vec<(&'static str, Ablations)> {
    let with = |f: fn(&mut Ablations)| {
        let mut a = Ablations::default();
        f(&mut a);
        a
    };
    vec![
        ("L2Rec", Ablations::default()),
        ("w/o Adapt", with(|a| a.no_adapt = true)),
        ("w/o Semantic", with(|a| a.no_semantic = true)),
        ("w/o Behavioral", with(|a| a.no_behavioral = true)),
        ("w/o BPC", with(|a| a.no_bpc = true)),
        ("w/o PR", with(|a| a.no_pr = true)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub steps: u64,
    /// Hash of the sampled training examples; equal across trained variants.
    pub data_hash: Option<String>,
}

/// Trains the full model and every ablation under the same seeds.
/// `cfg.train.ablation` is ignored.
pub fn ablate(cfg: &Config, data: &Dataset, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, ab) in variants() {
        let mut c = cfg.clone();
        c.train.ablation = ab;
        let (out, rep) = train_and_evaluate(&c, data)?;
        let row = AblationRow {
            variant: name.to_string(),
            recall_at_k: rep.recall_at_k,
            ndcg_at_k: rep.ndcg_at_k,
            steps: out.history.len() as u64,
            data_hash: out.history.last().map(|r| r.data_hash.clone()),
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Rank,
    TopN,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(Self::Rank),
            "top_n" => Ok(Self::TopN),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?} (rank, top_n)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub seed: u64,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
}

/// Configs for every `(value, seed)` pair, all validated before any run.
pub fn sweep_configs(cfg: &Config, param: SweepParam, values: &[usize], seeds: &[u64]) -> Result<Vec<(usize, u64, Config)>> {
    let mut out = Vec::new();
    for &v in values {
        for &s in seeds {
            let mut c = cfg.clone();
            match param {
                SweepParam::Rank => c.experts.rank = v,
                SweepParam::TopN => c.experts.top_n = v,
            }
            c.train.seed = s;
            c.experts
                .validate()
                .map_err(|e| Error::Config(format!("sweep value {v}: {e}")))?;
            out.push((v, s, c));
        }
    }
    Ok(out)
}

/// One train+eval per `(value, seed)`.
pub fn sweep(
    cfg: &Config,
    data: &Dataset,
    param: SweepParam,
    values: &[usize],
    seeds: &[u64],
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (value, seed, c) in sweep_configs(cfg, param, values, seeds)? {
        let (_, rep) = train_and_evaluate(&c, data)?;
        let row = SweepRow {
            value,
            seed,
            recall_at_k: rep.recall_at_k,
            ndcg_at_k: rep.ndcg_at_k,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Mean NDCG per swept value, in value order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.value).or_default();
        e.0 += r.ndcg_at_k;
        e.1 += 1;
    }
    acc.into_iter().map(|(v, (s, n))| (v, s / n as f64)).collect()
}

/// Cosine agreement between each user's two view representations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewAlignment {
    /// Mean of cos(h̃ᴮ_u, h̃ˢ_u).
    pub matched: f64,
    /// Mean of cos(h̃ᴮ_u, h̃ˢ_v) over ordered pairs u ≠ v.
    pub cross: f64,
    pub users: usize,
}

impl ViewAlignment {
    pub fn gap(&self) -> f64 {
        self.matched - self.cross
    }
}

/// Measures view alignment on every evaluable user's history before the
/// held-out item of `split`. Needs both views.
pub fn view_alignment(model: &L2Rec, data: &Dataset, split: crate::datagen::Split, opts: EncodeOptions, chunk: usize) -> Result<ViewAlignment> {
    let users = data.eval_users();
    if users.len() < 2 {
        return Err(Error::Input("view alignment needs at least two evaluable users".into()));
    }
    let hists: Vec<&[crate::views::SeqItem]> = users
        .iter()
        .map(|&u| &data.users[u].items[..data.held_out(u, split).expect("evaluable user")])
        .collect();
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let (mut beh, mut sem) = (Vec::new(), Vec::new());
    for part in hists.chunks(chunk.max(1)) {
        let mut tape = crate::numcore::Tape::no_grad();
        let enc = model.encode(&mut tape, &model.store, part, opts)?;
        let (Some(b), Some(s)) = (enc.out.ht_beh, enc.out.ht_sem) else {
            return Err(Error::Config("view alignment needs both views".into()));
        };
        let d = tape.shape(b)[1];
        beh.extend(tape.value(b).chunks(d).map(unit));
        sem.extend(tape.value(s).chunks(d).map(unit));
    }
    let n = beh.len() as f64;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let matched: f64 = beh.iter().zip(&sem).map(|(b, s)| dot(b, s)).sum();
    let d = beh[0].len();
    let sum = |rows: &[Vec<f64>]| (0..d).map(|j| rows.iter().map(|r| r[j]).sum()).collect::<Vec<f64>>();
    let all = dot(&sum(&beh), &sum(&sem));
    Ok(ViewAlignment {
        matched: matched / n,
        cross: (all - matched) / (n * (n - 1.0)),
        users: beh.len(),
    })
}

/// One routed position of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub user_id: String,
    #[serde(flatten)]
    pub decision: RoutingDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageHistogram {
    pub view: View,
    /// Share of view-specific selections per expert; sums to 1.
    pub fractions: Vec<f64>,
    pub positions: usize,
}

/// Routes each named user's test-time history and records every decision.
pub fn route_inspect(
    model: &L2Rec,
    data: &Dataset,
    user_ids: &[String],
    opts: EncodeOptions,
) -> Result<(Vec<RouteRecord>, Vec<UsageHistogram>)> {
    let mut records = Vec::new();
    for id in user_ids {
        let u = data
            .users
            .binary_search_by(|s| s.user_id.as_str().cmp(id))
            .map_err(|_| Error::Input(format!("unknown user {id}")))?;
        let items = &data.users[u].items;
        let hist = match data.held_out(u, crate::datagen::Split::Test) {
            Some(t) => &items[..t],
            None => &items[..],
        };
        let mut tape = crate::numcore::Tape::no_grad();
        let enc = model.encode(&mut tape, &model.store, &[hist], EncodeOptions { record: true, ..opts })?;
        records.extend(enc.decisions.into_iter().map(|decision| RouteRecord {
            user_id: id.clone(),
            decision,
        }));
    }
    let mut hist = Vec::new();
    for view in View::BOTH {
        let ds: Vec<RoutingDecision> = records.iter().filter(|r| r.decision.view == view).map(|r| r.decision.clone()).collect();
        if ds.is_empty() {
            continue;
        }
        let s = routing_stats(&ds)?;
        hist.push(UsageHistogram {
            view,
            fractions: s.f,
            positions: s.positions,
        });
    }
    Ok((records, hist))
}

/// Most-selected view-specific expert per `(user, view)`.
pub fn modal_experts(records: &[RouteRecord]) -> BTreeMap<(String, View), usize> {
    let mut counts: BTreeMap<(String, View), Vec<usize>> = BTreeMap::new();
    for r in records {
        let c = counts
            .entry((r.user_id.clone(), r.decision.view))
            .or_insert_with(|| vec![0; r.decision.fused.len()]);
        r.decision.selected.iter().for_each(|&k| c[k] += 1);
    }
    counts
        .into_iter()
        .map(|(k, c)| {
            let best = (0..c.len()).max_by_key(|&i| (c[i], std::cmp::Reverse(i))).unwrap_or(0);
            (k, best)
        })
        .collect()
}
