//! Per-site pools of low-rank experts with three-signal routing.
//!
//! Each adapted site owns a bank of shared experts (always on) and one bank
//! per view, plus a router per view. A bank stores its experts stacked: `A`
//! is `[n·r × d_in]` and `B` is `[d_out × n·r]`, expert `i` occupying rows
//! (resp. columns) `i·r..(i+1)·r`. Stacking turns the per-expert sum into
//! two matrix products.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, SiteAdapter, SiteId};
use crate::error::{Error, Result};
use crate::nn::{Affine, Init};
use crate::numcore::{Decay, DenseTensor, ParamId, ParamStore, Segments, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Semantic,
    Behavioral,
}

impl View {
    pub const BOTH: [View; 2] = [View::Semantic, View::Behavioral];

    pub fn name(self) -> &'static str {
        match self {
            View::Semantic => "semantic",
            View::Behavioral => "behavioral",
        }
    }
}

/// Whether routing runs once per position or once per pooled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Token,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub n_shared: usize,
    pub n_semantic: usize,
    pub n_behavioral: usize,
    pub rank: usize,
    pub alpha: f64,
    pub top_n: usize,
    pub router_hidden: usize,
    pub granularity: Granularity,
    pub a_init_std: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            n_shared: 1,
            n_semantic: 8,
            n_behavioral: 8,
            rank: 8,
            alpha: 16.0,
            top_n: 2,
            router_hidden: 16,
            granularity: Granularity::Token,
            a_init_std: 0.02,
        }
    }
}

impl ExpertConfig {
    pub fn n_view(&self, view: View) -> usize {
        match view {
            View::Semantic => self.n_semantic,
            View::Behavioral => self.n_behavioral,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("experts: {m}")));
        if self.n_shared == 0 {
            return bad("n_shared must be at least 1".into());
        }
        if self.n_semantic == 0 || self.n_behavioral == 0 {
            return bad("each view needs at least one expert".into());
        }
        if self.rank == 0 || self.router_hidden == 0 {
            return bad("rank and router_hidden must be positive".into());
        }
        if self.top_n == 0 || self.top_n > self.n_semantic.min(self.n_behavioral) {
            return bad(format!(
                "top_n {} must lie in 1..={}",
                self.top_n,
                self.n_semantic.min(self.n_behavioral)
            ));
        }
        if !self.alpha.is_finite() || !(self.a_init_std >= 0.0) {
            return bad("alpha and a_init_std must be finite and nonnegative".into());
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Closed-form parameter count of the pool for a backbone shape.
    pub fn param_count(&self, bb: &BackboneConfig) -> usize {
        let (r, h) = (self.rank, self.router_hidden);
        let router = |d_in: usize, e: usize| d_in * h + h + h * e + e;
        bb.sites()
            .iter()
            .map(|s| {
                let (di, dout) = s.target.dims(bb.d_model, bb.d_ff);
                let experts = (self.n_shared + self.n_semantic + self.n_behavioral) * r * (di + dout);
                let routers: usize = [self.n_semantic, self.n_behavioral]
                    .iter()
                    .map(|&e| router(di, e) + router(bb.d_model, e) + router(bb.d_model + di, e))
                    .sum();
                experts + routers
            })
            .sum()
    }
}

/// Stacked `(A, B)` of `n` experts.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub a: ParamId,
    pub b: ParamId,
    pub n: usize,
}

/// One expert's matrices, copied out of its bank.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    pub b: DenseTensor,
    pub a: DenseTensor,
    pub rank: usize,
    pub alpha: f64,
}

impl ExpertBank {
    fn new(store: &mut ParamStore, name: &str, n: usize, d_in: usize, d_out: usize, cfg: &ExpertConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let a = if cfg.a_init_std > 0.0 {
            store.gaussian(format!("{name}.A"), &[n * cfg.rank, d_in], cfg.a_init_std, rng, Decay::Yes)?
        } else {
            store.filled(format!("{name}.A"), &[n * cfg.rank, d_in], 0.0, Decay::Yes)?
        };
        let b = store.filled(format!("{name}.B"), &[d_out, n * cfg.rank], 0.0, Decay::Yes)?;
        Ok(Self { a, b, n })
    }

    pub fn expert(&self, store: &ParamStore, i: usize, cfg: &ExpertConfig) -> LoraExpert {
        let r = cfg.rank;
        let (at, bt) = (store.tensor(self.a), store.tensor(self.b));
        let d_in = at.shape()[1];
        let d_out = bt.shape()[0];
        let a = at.values()[i * r * d_in..(i + 1) * r * d_in].to_vec();
        let b = (0..d_out).flat_map(|o| bt.row(o)[i * r..(i + 1) * r].to_vec()).collect();
        LoraExpert {
            b: DenseTensor::new(vec![d_out, r], b).expect("slice shape"),
            a: DenseTensor::new(vec![r, d_in], a).expect("slice shape"),
            rank: r,
            alpha: cfg.alpha,
        }
    }
}

/// `softmax(R2·ReLU(R1 z + b1) + b2)`.
#[derive(Debug, Clone)]
pub struct SignalRouter {
    pub hidden: Affine,
    pub out: Affine,
}

impl SignalRouter {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, cfg: &ExpertConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = cfg.router_hidden;
        Ok(Self {
            hidden: Affine::new(store, &format!("{name}.hidden"), d_in, h, Init::Gaussian(1.0 / (d_in as f64).sqrt()), rng)?,
            out: Affine::new(store, &format!("{name}.out"), h, n, Init::Gaussian(1.0 / (h as f64).sqrt()), rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, z)?;
        let h = tape.relu(h);
        let logits = self.out.forward(tape, store, h)?;
        tape.softmax(logits, 1)
    }

    pub fn params(&self) -> [ParamId; 4] {
        let [a, b] = self.hidden.params();
        let [c, d] = self.out.params();
        [a, b, c, d]
    }
}

/// Context, user and interaction routers of one view at one site.
#[derive(Debug, Clone)]
pub struct ViewRouter {
    pub context: SignalRouter,
    pub user: SignalRouter,
    pub interaction: SignalRouter,
}

#[derive(Debug, Clone)]
pub struct SitePool {
    pub site: SiteId,
    pub d_in: usize,
    pub d_out: usize,
    pub shared: ExpertBank,
    pub semantic: ExpertBank,
    pub behavioral: ExpertBank,
    pub router_sem: ViewRouter,
    pub router_beh: ViewRouter,
}

impl SitePool {
    pub fn bank(&self, view: View) -> &ExpertBank {
        match view {
            View::Semantic => &self.semantic,
            View::Behavioral => &self.behavioral,
        }
    }

    pub fn router(&self, view: View) -> &ViewRouter {
        match view {
            View::Semantic => &self.router_sem,
            View::Behavioral => &self.router_beh,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpertPool {
    pub cfg: ExpertConfig,
    pub d_model: usize,
    sites: Vec<SitePool>,
    index: BTreeMap<SiteId, usize>,
    params: Vec<ParamId>,
}

/// Tape values of one routing evaluation over `S` rows.
#[derive(Debug, Clone)]
pub struct Routed {
    pub g_c: Var,
    pub g_u: Var,
    pub g_f: Var,
    pub fused: Var,
    /// `fused` with everything outside the per-row Top-N zeroed.
    pub gates: Var,
    pub selected: Vec<Vec<usize>>,
}

/// Indices of the `n` largest values, ties to the lowest index.
pub fn top_n(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

impl ExpertPool {
    pub fn new(cfg: &ExpertConfig, bb: &BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let first = store.len();
        let mut sites = Vec::new();
        for site in bb.sites() {
            let (d_in, d_out) = site.target.dims(bb.d_model, bb.d_ff);
            let p = format!("dpmoe.{site}");
            let bank = |store: &mut ParamStore, rng: &mut ChaCha8Rng, tag: &str, n: usize| {
                ExpertBank::new(store, &format!("{p}.{tag}"), n, d_in, d_out, cfg, rng)
            };
            let shared = bank(store, rng, "shared", cfg.n_shared)?;
            let semantic = bank(store, rng, "semantic", cfg.n_semantic)?;
            let behavioral = bank(store, rng, "behavioral", cfg.n_behavioral)?;
            let router = |store: &mut ParamStore, rng: &mut ChaCha8Rng, view: View| -> Result<ViewRouter> {
                let n = cfg.n_view(view);
                let r = format!("{p}.router.{}", view.name());
                Ok(ViewRouter {
                    context: SignalRouter::new(store, &format!("{r}.context"), d_in, cfg, n, rng)?,
                    user: SignalRouter::new(store, &format!("{r}.user"), bb.d_model, cfg, n, rng)?,
                    interaction: SignalRouter::new(store, &format!("{r}.interaction"), bb.d_model + d_in, cfg, n, rng)?,
                })
            };
            let router_sem = router(store, rng, View::Semantic)?;
            let router_beh = router(store, rng, View::Behavioral)?;
            sites.push(SitePool {
                site,
                d_in,
                d_out,
                shared,
                semantic,
                behavioral,
                router_sem,
                router_beh,
            });
        }
        let index = sites.iter().enumerate().map(|(i, s)| (s.site, i)).collect();
        Ok(Self {
            cfg: cfg.clone(),
            d_model: bb.d_model,
            sites,
            index,
            params: (first..store.len()).map(ParamId).collect(),
        })
    }

    pub fn sites(&self) -> &[SitePool] {
        &self.sites
    }

    pub fn site(&self, id: SiteId) -> Result<&SitePool> {
        self.index
            .get(&id)
            .map(|&i| &self.sites[i])
            .ok_or_else(|| Error::UnknownSite(id.to_string()))
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// Parameters of the user and interaction router branches.
    pub fn personalization_params(&self) -> Vec<ParamId> {
        self.sites
            .iter()
            .flat_map(|s| [&s.router_sem, &s.router_beh])
            .flat_map(|r| r.user.params().into_iter().chain(r.interaction.params()))
            .collect()
    }

    /// Zeroes and freezes the user and interaction branches, leaving both
    /// uniform so routing depends on the context signal alone.
    pub fn depersonalize(&self, store: &mut ParamStore) {
        for id in self.personalization_params() {
            store.get_mut(id).tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
            store.set_trainable(id, false);
        }
    }

    /// Routes the rows of `x` `[S×d_in]` given per-row user vectors
    /// `u_rows` `[S×d]`. `g_u` may be computed once per entity and expanded
    /// by the caller; pass it as `g_u_rows` to skip the user router here.
    #[allow(clippy::too_many_arguments)]
    pub fn route_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        site: SiteId,
        view: View,
        u_rows: Var,
        x: Var,
        g_u_rows: Option<Var>,
    ) -> Result<Routed> {
        let sp = self.site(site)?;
        let r = sp.router(view);
        let (xs, us) = (tape.shape(x).to_vec(), tape.shape(u_rows).to_vec());
        if xs.len() != 2 || us.len() != 2 || xs[1] != sp.d_in || us[1] != self.d_model || xs[0] != us[0] {
            return Err(Error::dim("route", &xs, &us));
        }
        let g_c = r.context.forward(tape, store, x)?;
        let g_u = match g_u_rows {
            Some(g) => g,
            None => r.user.forward(tape, store, u_rows)?,
        };
        let z = tape.concat(&[u_rows, x], 1)?;
        let g_f = r.interaction.forward(tape, store, z)?;
        let uf = tape.add(g_u, g_f)?;
        let boost = tape.mul(uf, g_c)?;
        let fused = tape.add(g_c, boost)?;
        let e = self.cfg.n_view(view);
        let rows = xs[0];
        let vals = tape.value(fused).to_vec();
        let mut mask = vec![0.0; rows * e];
        let mut selected = Vec::with_capacity(rows);
        for i in 0..rows {
            let sel = top_n(&vals[i * e..(i + 1) * e], self.cfg.top_n);
            for &k in &sel {
                mask[i * e + k] = 1.0;
            }
            selected.push(sel);
        }
        tape.note_discrete(mask.iter().map(|&m| m > 0.0));
        let mask = tape.constant(&[rows, e], mask)?;
        let gates = tape.mul(fused, mask)?;
        Ok(Routed {
            g_c,
            g_u,
            g_f,
            fused,
            gates,
            selected,
        })
    }

    /// Routing for one position: `u` and `x` are single vectors.
    pub fn route(&self, store: &ParamStore, site: SiteId, u: &[f64], x: &[f64], view: View) -> Result<RoutingDecision> {
        let mut tape = Tape::no_grad();
        let uv = tape.constant(&[1, u.len()], u.to_vec())?;
        let xv = tape.constant(&[1, x.len()], x.to_vec())?;
        let routed = self.route_rows(&mut tape, store, site, view, uv, xv, None)?;
        Ok(RoutingDecision::from_rows(&tape, &routed, site, view, 0, 0, 0))
    }

    /// `ΔW x` for the rows of `x`: shared experts at weight 1 plus the view
    /// bank weighted by `gates` `[S×E_v]`. `None` applies the shared bank only.
    pub fn compose_delta(&self, tape: &mut Tape, store: &ParamStore, site: SiteId, view: View, gates: Option<Var>, x: Var) -> Result<Var> {
        let sp = self.site(site)?;
        let r = self.cfg.rank;
        let a_sh = tape.param(store, sp.shared.a);
        let b_sh = tape.param(store, sp.shared.b);
        let low = tape.matmul_t(x, a_sh)?;
        let mut delta = tape.matmul_t(low, b_sh)?;
        if let Some(g) = gates {
            let bank = sp.bank(view);
            let rows = tape.shape(x)[0];
            if tape.shape(g) != [rows, bank.n] {
                return Err(Error::dim("compose_delta gates", tape.shape(g), &[rows, bank.n]));
            }
            let mut rep = vec![0.0; bank.n * bank.n * r];
            for i in 0..bank.n {
                for k in 0..r {
                    rep[i * bank.n * r + i * r + k] = 1.0;
                }
            }
            let rep = tape.constant(&[bank.n, bank.n * r], rep)?;
            let wide = tape.matmul(g, rep)?;
            let a = tape.param(store, bank.a);
            let b = tape.param(store, bank.b);
            let low = tape.matmul_t(x, a)?;
            let gated = tape.mul(low, wide)?;
            let view_delta = tape.matmul_t(gated, b)?;
            delta = tape.add(delta, view_delta)?;
        }
        Ok(tape.scale(delta, self.cfg.scale()))
    }
}

/// Everything the router computed for one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub site: SiteId,
    pub view: View,
    pub entity: usize,
    pub position: usize,
    pub g_c: Vec<f64>,
    pub g_u: Vec<f64>,
    pub g_f: Vec<f64>,
    pub fused: Vec<f64>,
    pub gates: Vec<f64>,
    pub selected: Vec<usize>,
}

impl RoutingDecision {
    fn from_rows(tape: &Tape, r: &Routed, site: SiteId, view: View, row: usize, entity: usize, position: usize) -> Self {
        let e = tape.shape(r.fused)[1];
        let take = |v: Var| tape.value(v)[row * e..(row + 1) * e].to_vec();
        Self {
            site,
            view,
            entity,
            position,
            g_c: take(r.g_c),
            g_u: take(r.g_u),
            g_f: take(r.g_f),
            fused: take(r.fused),
            gates: take(r.gates),
            selected: r.selected[row].clone(),
        }
    }
}

/// Expert usage fractions `f` and mean normalised router mass `P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub view: View,
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub positions: usize,
}

pub fn routing_stats(decisions: &[RoutingDecision]) -> Result<RoutingStats> {
    let first = decisions.first().ok_or_else(|| Error::Input("no routing decisions".into()))?;
    let e = first.fused.len();
    let mut f = vec![0.0; e];
    let mut p = vec![0.0; e];
    let mut picks = 0usize;
    for d in decisions {
        if d.view != first.view {
            return Err(Error::Input("routing decisions mix views".into()));
        }
        if d.fused.len() != e {
            return Err(Error::Input("routing decisions disagree on expert count".into()));
        }
        for &k in &d.selected {
            f[k] += 1.0;
        }
        picks += d.selected.len();
        let total: f64 = d.fused.iter().sum();
        for (pk, g) in p.iter_mut().zip(&d.fused) {
            *pk += g / total;
        }
    }
    let n = decisions.len() as f64;
    f.iter_mut().for_each(|v| *v /= picks as f64);
    p.iter_mut().for_each(|v| *v /= n);
    Ok(RoutingStats {
        view: first.view,
        f,
        p,
        positions: decisions.len(),
    })
}

/// Differentiable load-balance inputs for one view: selection fractions
/// (constants) and the tape node of the mean normalised router mass.
#[derive(Debug, Clone)]
pub struct ViewBalance {
    pub view: View,
    pub f: Vec<f64>,
    pub p: Var,
}

/// Adapter for one view over a packed batch: routes each site input with the
/// entity's pooled summary and composes the expert adjustment.
pub struct ViewAdapter<'a> {
    pool: &'a ExpertPool,
    view: View,
    u: Var,
    seg: Segments,
    owner: Vec<usize>,
    u_rows: Option<Var>,
    record: bool,
    pub decisions: Vec<RoutingDecision>,
    counts: Vec<f64>,
    picks: usize,
    rows: usize,
    p_sum: Option<Var>,
}

impl<'a> ViewAdapter<'a> {
    /// `u` holds one summary row per segment of `seg`.
    pub fn new(pool: &'a ExpertPool, view: View, u: Var, seg: Segments, record: bool) -> Self {
        let owner = seg.row_owner();
        Self {
            pool,
            view,
            u,
            seg,
            owner,
            u_rows: None,
            record,
            decisions: Vec::new(),
            counts: vec![0.0; pool.cfg.n_view(view)],
            picks: 0,
            rows: 0,
            p_sum: None,
        }
    }

    pub fn view(&self) -> View {
        self.view
    }

    /// Load-balance inputs accumulated over every routed site so far.
    pub fn balance(&self, tape: &mut Tape) -> Option<ViewBalance> {
        let p_sum = self.p_sum?;
        let p = tape.scale(p_sum, 1.0 / self.rows as f64);
        Some(ViewBalance {
            view: self.view,
            f: self.counts.iter().map(|c| c / self.picks as f64).collect(),
            p,
        })
    }

    fn accumulate(&mut self, tape: &mut Tape, routed: &Routed) -> Result<()> {
        let shape = tape.shape(routed.fused).to_vec();
        let (rows, e) = (shape[0], shape[1]);
        let ones_col = tape.filled(&[e, 1], 1.0);
        let totals = tape.matmul(routed.fused, ones_col)?;
        let inv = tape.recip(totals);
        let ones_row = tape.filled(&[1, e], 1.0);
        let wide = tape.matmul(inv, ones_row)?;
        let norm = tape.mul(routed.fused, wide)?;
        let col = tape.sum(norm, 0)?;
        self.p_sum = Some(match self.p_sum {
            Some(p) => tape.add(p, col)?,
            None => col,
        });
        for sel in &routed.selected {
            for &k in sel {
                self.counts[k] += 1.0;
            }
            self.picks += sel.len();
        }
        self.rows += rows;
        Ok(())
    }
}

impl SiteAdapter for ViewAdapter<'_> {
    fn sites(&self) -> Vec<SiteId> {
        self.pool.sites.iter().map(|s| s.site).collect()
    }

    fn delta(&mut self, tape: &mut Tape, store: &ParamStore, site: SiteId, x: Var) -> Result<Var> {
        let sp = self.pool.site(site)?;
        let router = sp.router(self.view);
        let (routed, expand) = match self.pool.cfg.granularity {
            Granularity::Token => {
                let g_u = router.user.forward(tape, store, self.u)?;
                let g_u_rows = tape.index_select(g_u, 0, &self.owner)?;
                let u_rows = match self.u_rows {
                    Some(v) => v,
                    None => {
                        let v = tape.index_select(self.u, 0, &self.owner)?;
                        self.u_rows = Some(v);
                        v
                    }
                };
                (self.pool.route_rows(tape, store, site, self.view, u_rows, x, Some(g_u_rows))?, false)
            }
            Granularity::Sequence => {
                let pooled = tape.segment_mean(x, &self.seg)?;
                (self.pool.route_rows(tape, store, site, self.view, self.u, pooled, None)?, true)
            }
        };
        self.accumulate(tape, &routed)?;
        if self.record {
            let positions = if expand { vec![0; self.seg.len()] } else { self.seg.positions() };
            for row in 0..routed.selected.len() {
                let entity = if expand { row } else { self.owner[row] };
                self.decisions.push(RoutingDecision::from_rows(tape, &routed, site, self.view, row, entity, positions[row]));
            }
        }
        let gates = if expand {
            tape.index_select(routed.gates, 0, &self.owner)?
        } else {
            routed.gates
        };
        self.pool.compose_delta(tape, store, site, self.view, Some(gates), x)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::backbone::Target;
    use crate::numcore::gradcheck::numeric_grad;

    fn bb_cfg() -> BackboneConfig {
        BackboneConfig {
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 6,
            vocab_size: 10,
            max_positions: 16,
            adapted_targets: vec![Target::AttnQ, Target::FfUp],
            init_std: 0.3,
        }
    }

    fn ex_cfg() -> ExpertConfig {
        ExpertConfig {
            n_shared: 1,
            n_semantic: 4,
            n_behavioral: 4,
            rank: 2,
            alpha: 4.0,
            top_n: 2,
            router_hidden: 5,
            granularity: Granularity::Token,
            a_init_std: 0.3,
        }
    }

    fn pool(cfg: &ExpertConfig, seed: u64) -> (ExpertPool, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ExpertPool::new(cfg, &bb_cfg(), &mut store, &mut rng).unwrap();
        (p, store)
    }

    fn randomize(store: &mut ParamStore, ids: &[ParamId], seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &id in ids {
            store.get_mut(id).tensor.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
        }
    }

    const Q: SiteId = SiteId {
        layer: 0,
        target: Target::AttnQ,
    };

    #[test]
    fn zero_routers_give_uniform_scores_and_low_index_ties() {
        let (p, mut store) = pool(&ex_cfg(), 1);
        let ids: Vec<ParamId> = p.param_ids().to_vec();
        for id in ids {
            if store.get(id).name.contains(".router.") {
                store.get_mut(id).tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let d = p.route(&store, Q, &[0.3, -1.0, 2.0, 0.5], &[1.0, 2.0, 3.0, 4.0], View::Semantic).unwrap();
        for g in [&d.g_c, &d.g_u, &d.g_f] {
            assert!(g.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        assert!(d.fused.iter().all(|&v| (v - 0.375).abs() < 1e-15));
        assert_eq!(d.selected, vec![0, 1]);
        assert_eq!(d.gates, vec![0.375, 0.375, 0.0, 0.0]);
    }

    #[test]
    fn top_n_rules() {
        assert_eq!(top_n(&[0.5, 0.3, 0.2, 0.1], 2), vec![0, 1]);
        assert_eq!(top_n(&[0.1, 0.3, 0.3, 0.5], 2), vec![1, 3]);
        assert_eq!(top_n(&[0.1, 0.2, 0.3], 3), vec![0, 1, 2]);
    }

    #[test]
    fn fused_formula_and_sparsity() {
        let (p, store) = pool(&ex_cfg(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let u: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let d = p.route(&store, Q, &u, &x, View::Behavioral).unwrap();
            for i in 0..4 {
                let want = d.g_c[i] + (d.g_u[i] + d.g_f[i]) * d.g_c[i];
                assert!((d.fused[i] - want).abs() < 1e-12);
                assert!(d.fused[i] > 0.0 && d.fused[i] < 2.0);
            }
            assert_eq!(d.gates.iter().filter(|&&g| g != 0.0).count(), 2);
            for &k in &d.selected {
                assert_eq!(d.gates[k], d.fused[k]);
            }
        }
        let mut all = ex_cfg();
        all.top_n = 4;
        let (p, store) = pool(&all, 2);
        let d = p.route(&store, Q, &[1.0; 4], &[0.5; 4], View::Semantic).unwrap();
        assert_eq!(d.gates, d.fused);
    }

    #[test]
    fn route_errors() {
        let (p, store) = pool(&ex_cfg(), 3);
        assert!(p.route(&store, Q, &[1.0; 3], &[1.0; 4], View::Semantic).is_err());
        let bad = SiteId {
            layer: 0,
            target: Target::AttnO,
        };
        assert!(matches!(p.route(&store, bad, &[1.0; 4], &[1.0; 4], View::Semantic), Err(Error::UnknownSite(_))));
        let mut c = ex_cfg();
        c.top_n = 5;
        assert!(c.validate().is_err());
    }

    fn delta_of(p: &ExpertPool, store: &ParamStore, gates: Option<Vec<f64>>, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(&[1, 4], x.to_vec()).unwrap();
        let g = gates.map(|g| tape.constant(&[1, 4], g).unwrap());
        let d = p.compose_delta(&mut tape, store, Q, View::Semantic, g, xv).unwrap();
        tape.value(d).to_vec()
    }

    #[test]
    fn compose_delta_cases() {
        let (p, mut store) = pool(&ex_cfg(), 4);
        let x = [0.5, -1.0, 2.0, 0.25];
        assert!(delta_of(&p, &store, Some(vec![0.4, 0.3, 0.0, 0.0]), &x).iter().all(|&v| v == 0.0));

        let ids = p.param_ids().to_vec();
        randomize(&mut store, &ids, 9, 1.0);
        let sp = p.site(Q).unwrap();
        let cfg = ex_cfg();
        let apply = |e: &LoraExpert| -> Vec<f64> {
            let ax: Vec<f64> = (0..e.rank).map(|k| (0..4).map(|j| e.a.at(k, j) * x[j]).sum()).collect();
            (0..4).map(|o| e.alpha / e.rank as f64 * (0..e.rank).map(|k| e.b.at(o, k) * ax[k]).sum::<f64>()).collect()
        };
        let shared = apply(&sp.shared.expert(&store, 0, &cfg));
        let only = delta_of(&p, &store, None, &x);
        for (a, b) in only.iter().zip(&shared) {
            assert!((a - b).abs() < 1e-12);
        }

        let e2 = apply(&sp.semantic.expert(&store, 2, &cfg));
        let g1 = delta_of(&p, &store, Some(vec![0.0, 0.0, 0.3, 0.0]), &x);
        let g2 = delta_of(&p, &store, Some(vec![0.0, 0.0, 0.6, 0.0]), &x);
        for o in 0..4 {
            assert!((g1[o] - shared[o] - 0.3 * e2[o]).abs() < 1e-12);
            assert!((g2[o] - shared[o] - 2.0 * (g1[o] - shared[o])).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_counting_and_round_trip() {
        let mk = |sel: Vec<usize>, fused: Vec<f64>| RoutingDecision {
            site: Q,
            view: View::Semantic,
            entity: 0,
            position: 0,
            g_c: fused.clone(),
            g_u: fused.clone(),
            g_f: fused.clone(),
            gates: fused.clone(),
            fused,
            selected: sel,
        };
        let ds: Vec<_> = (0..6).map(|_| mk(vec![0, 1], vec![0.4, 0.3, 0.2, 0.1])).collect();
        let s = routing_stats(&ds).unwrap();
        assert_eq!(s.f, vec![0.5, 0.5, 0.0, 0.0]);
        assert!((s.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let uni: Vec<_> = (0..4).map(|i| mk(vec![i], vec![0.25; 4])).collect();
        let s = routing_stats(&uni).unwrap();
        assert_eq!(s.f, vec![0.25; 4]);
        assert_eq!(s.p, vec![0.25; 4]);

        let text: Vec<String> = ds.iter().map(|d| serde_json::to_string(d).unwrap()).collect();
        let back: Vec<RoutingDecision> = text.iter().map(|t| serde_json::from_str(t).unwrap()).collect();
        assert_eq!(routing_stats(&back).unwrap(), routing_stats(&ds).unwrap());

        let mut mixed = ds.clone();
        mixed[3].view = View::Behavioral;
        assert!(routing_stats(&mixed).is_err());
        assert!(routing_stats(&[]).is_err());
    }

    #[test]
    fn depersonalized_routing_follows_context() {
        let (p, mut store) = pool(&ex_cfg(), 6);
        p.depersonalize(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let u1: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = p.route(&store, Q, &u1, &x, View::Semantic).unwrap();
            let b = p.route(&store, Q, &[0.0; 4], &x, View::Semantic).unwrap();
            assert_eq!(a.gates, b.gates);
            for i in 0..4 {
                assert!((a.fused[i] - a.g_c[i] * 1.5).abs() < 1e-15);
            }
            assert_eq!(a.selected, top_n(&a.g_c, 2));
        }
        assert!(p.personalization_params().iter().all(|&id| !store.is_trainable(id)));
    }

    #[test]
    fn users_change_routing() {
        let (p, store) = pool(&ex_cfg(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let found = (0..200).any(|_| {
            let u1: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let u2: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = p.route(&store, Q, &u1, &x, View::Semantic).unwrap();
            let b = p.route(&store, Q, &u2, &x, View::Semantic).unwrap();
            a.selected != b.selected
        });
        assert!(found);
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        for gran in [Granularity::Token, Granularity::Sequence] {
            let cfg = ExpertConfig {
                granularity: gran,
                ..ex_cfg()
            };
            let (p, mut store) = pool(&cfg, 10);
            let ids = p.param_ids().to_vec();
            randomize(&mut store, &ids, 12, 0.8);
            let seg = Segments::from_lengths(&[3, 2]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let xs: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let us: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eval = |store: &ParamStore, xs: &[f64], grad: bool| -> (f64, u64, Vec<f64>, Tape, Var) {
                let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
                let x = tape.leaf(DenseTensor::new(vec![5, 4], xs.to_vec()).unwrap().with_grad(true));
                let u = tape.constant(&[2, 4], us.clone()).unwrap();
                let mut ad = ViewAdapter::new(&p, View::Behavioral, u, seg.clone(), false);
                let d = ad.delta(&mut tape, store, Q, x).unwrap();
                let wv = tape.constant(&[5, 4], w.clone()).unwrap();
                let m = tape.mul(d, wv).unwrap();
                let mut loss = tape.sum_all(m);
                let bal = ad.balance(&mut tape).unwrap();
                let fv = tape.constant(&[4], bal.f.clone()).unwrap();
                let fp = tape.mul(bal.p, fv).unwrap();
                let lb = tape.sum_all(fp);
                loss = tape.add(loss, lb).unwrap();
                let sig = tape.discrete_signature();
                let val = tape.scalar(loss);
                (val, sig, bal.f, tape, x)
            };
            let (_, sig0, _, mut tape, x) = eval(&store, &xs, true);
            let loss = Var(tape.len() - 1);
            tape.backward(loss).unwrap();
            let gx = tape.grad(x).unwrap().to_vec();
            store.zero_grads();
            tape.accumulate_into(&mut store);
            let num = numeric_grad(&xs, 1e-5, |v| eval(&store, v, false).0);
            for i in 0..xs.len() {
                let mut xp = xs.clone();
                xp[i] += 1e-5;
                if eval(&store, &xp, false).1 != sig0 {
                    continue;
                }
                assert!((gx[i] - num[i]).abs() < 1e-6 * gx[i].abs().max(1.0), "x[{i}]");
            }
            let analytic: Vec<Vec<f64>> = ids.iter().map(|&i| store.tensor(i).grad.clone().unwrap()).collect();
            let report = crate::numcore::gradcheck::check_params(&mut store, &ids, &analytic, 1e-5, 1e-6, |s| {
                let (v, sig, ..) = eval(s, &xs, false);
                Ok((v, sig))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{gran:?} {report:?}");
            assert!(report.checked > report.skipped);
        }
    }

    #[test]
    fn closed_form_count() {
        let (p, store) = pool(&ex_cfg(), 1);
        let enumerated: usize = p.param_ids().iter().map(|&i| store.tensor(i).numel()).sum();
        assert_eq!(enumerated, ex_cfg().param_count(&bb_cfg()));
    }
}
