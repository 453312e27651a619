//! Contrastive recommendation loss, cross-view preference alignment and
//! expert load balancing.

use serde::{Deserialize, Serialize};

use crate::dpmoe::ViewBalance;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub beta: f64,
    pub k_neg: usize,
    pub in_batch_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 0.1,
            gamma: 0.1,
            beta: 0.01,
            k_neg: 10,
            in_batch_negatives: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config("loss: tau must be positive".into()));
        }
        for (n, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss: {n} must be finite and nonnegative")));
            }
        }
        if self.k_neg == 0 && !self.in_batch_negatives {
            return Err(Error::Config("loss: no negatives (k_neg = 0 without in-batch negatives)".into()));
        }
        Ok(())
    }
}

/// Candidate negatives per user: the sampled rows plus, optionally, every
/// other user's positive row, deduplicated and never the user's own positive.
pub fn negative_sets(positives: &[usize], sampled: &[Vec<usize>], in_batch: bool) -> Result<Vec<Vec<usize>>> {
    if positives.len() != sampled.len() {
        return Err(Error::Input("one sampled-negative list per positive required".into()));
    }
    positives
        .iter()
        .zip(sampled)
        .map(|(&pos, s)| {
            let mut set: Vec<usize> = s.iter().copied().filter(|&n| n != pos).collect();
            if in_batch {
                set.extend(positives.iter().copied().filter(|&p| p != pos));
            }
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(Error::Input("empty negative set".into()));
            }
            Ok(set)
        })
        .collect()
}

/// Row-wise cosine similarity divided by `tau`: `[A×B]`.
pub fn scaled_cosine(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    let na = tape.normalize_rows(a)?;
    let nb = tape.normalize_rows(b)?;
    let s = tape.matmul_t(na, nb)?;
    Ok(tape.scale(s, 1.0 / tau))
}

/// Mean InfoNCE of user rows `users` `[U×d]` against item rows `items`
/// `[M×d]`; `positives[u]` and `negatives[u]` index item rows.
pub fn rec_loss(tape: &mut Tape, users: Var, items: Var, positives: &[usize], negatives: &[Vec<usize>], tau: f64) -> Result<Var> {
    let n_users = tape.shape(users)[0];
    if positives.len() != n_users || negatives.len() != n_users {
        return Err(Error::Input("one positive and one negative set per user required".into()));
    }
    if negatives.iter().any(Vec::is_empty) {
        return Err(Error::Input("empty negative set".into()));
    }
    let sims = scaled_cosine(tape, users, items, tau)?;
    let mut terms = Vec::with_capacity(n_users);
    for (u, (&pos, negs)) in positives.iter().zip(negatives).enumerate() {
        let row = tape.index_select(sims, 0, &[u])?;
        let mut cand = Vec::with_capacity(negs.len() + 1);
        cand.push(pos);
        cand.extend_from_slice(negs);
        let logits = tape.index_select(row, 1, &cand)?;
        let lp = tape.log_softmax(logits, 1)?;
        terms.push(tape.index_select(lp, 1, &[0])?);
    }
    let all = tape.concat(&terms, 1)?;
    let total = tape.sum_all(all);
    Ok(tape.scale(total, -1.0 / n_users as f64))
}

/// Bidirectional InfoNCE between each user's two projected views, plus
/// `lambda` times their mean squared distance.
pub fn bpc_loss(tape: &mut Tape, ht_beh: Var, ht_sem: Var, tau: f64, lambda: f64) -> Result<Var> {
    let n = tape.shape(ht_beh)[0];
    if n < 2 {
        return Err(Error::Input("cross-view alignment needs at least two users".into()));
    }
    if tape.shape(ht_beh) != tape.shape(ht_sem) {
        return Err(Error::dim("bpc_loss", tape.shape(ht_beh), tape.shape(ht_sem)));
    }
    let s = scaled_cosine(tape, ht_beh, ht_sem, tau)?;
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let eye = tape.constant(&[n, n], eye)?;
    // Row i of `s` scores h̃^B_i against every h̃^S; column i scores h̃^S_i
    // against every h̃^B.
    let b2s = tape.log_softmax(s, 1)?;
    let s2b = tape.log_softmax(s, 0)?;
    let both = tape.add(b2s, s2b)?;
    let diag = tape.mul(both, eye)?;
    let nce = tape.sum_all(diag);
    let nce = tape.scale(nce, -1.0 / n as f64);
    let diff = tape.sub(ht_beh, ht_sem)?;
    let sq = tape.square(diff);
    let dist = tape.sum_all(sq);
    let dist = tape.scale(dist, lambda / n as f64);
    tape.add(nce, dist)
}

/// Mean over views of `E · Σ_i f_i P_i`.
pub fn lb_loss(tape: &mut Tape, stats: &[ViewBalance]) -> Result<Var> {
    if stats.is_empty() {
        return Err(Error::Input("no routing statistics".into()));
    }
    let mut terms = Vec::with_capacity(stats.len());
    for s in stats {
        let e = s.f.len();
        if tape.shape(s.p) != [e] {
            return Err(Error::dim("lb_loss", tape.shape(s.p), &[e]));
        }
        let f = tape.constant(&[e], s.f.clone())?;
        let fp = tape.mul(s.p, f)?;
        let sum = tape.sum_all(fp);
        terms.push(tape.scale(sum, e as f64 / stats.len() as f64));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Component values of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub rec: f64,
    pub bpc: f64,
    pub lb: f64,
    pub total: f64,
}

/// `L = L_rec + γ·L_bpc + β·L_lb`; absent components count as zero.
pub fn total_loss(tape: &mut Tape, rec: Var, bpc: Option<Var>, lb: Option<Var>, gamma: f64, beta: f64) -> Result<(Var, LossValues)> {
    let mut total = rec;
    let mut vals = LossValues {
        rec: tape.scalar(rec),
        ..LossValues::default()
    };
    if let Some(b) = bpc {
        vals.bpc = tape.scalar(b);
        if gamma != 0.0 {
            let w = tape.scale(b, gamma);
            total = tape.add(total, w)?;
        }
    }
    if let Some(l) = lb {
        vals.lb = tape.scalar(l);
        if beta != 0.0 {
            let w = tape.scale(l, beta);
            total = tape.add(total, w)?;
        }
    }
    vals.total = tape.scalar(total);
    Ok((total, vals))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dpmoe::View;
    use crate::numcore::gradcheck::{numeric_grad, relative_error};
    use crate::numcore::DenseTensor;

    fn rows(tape: &mut Tape, n: usize, d: usize, v: Vec<f64>) -> Var {
        tape.leaf(DenseTensor::new(vec![n, d], v).unwrap().with_grad(true))
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn equal_scores_give_ln2() {
        let mut tape = Tape::no_grad();
        let u = rows(&mut tape, 1, 2, vec![1.0, 0.0]);
        let i = rows(&mut tape, 2, 2, vec![1.0, 1.0, 1.0, -1.0]);
        let l = rec_loss(&mut tape, u, i, &[0], &[vec![1]], 1.0).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);

        let i = rows(&mut tape, 2, 2, vec![1.0, 0.0, -1.0, 0.0]);
        let l = rec_loss(&mut tape, u, i, &[0], &[vec![1]], 0.01).unwrap();
        assert!(tape.scalar(l) < 1e-80);
    }

    #[test]
    fn rec_loss_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let users: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, d)).collect();
        let items: Vec<Vec<f64>> = (0..9).map(|_| unit(&mut rng, d)).collect();
        let positives = [0, 1, 2];
        let sampled = vec![vec![3, 4], vec![5, 6], vec![7, 8]];
        let negs = negative_sets(&positives, &sampled, true).unwrap();
        assert_eq!(negs[0], vec![1, 2, 3, 4]);

        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut oracle = 0.0;
        for u in 0..3 {
            let pos = dot(&users[u], &items[positives[u]]).exp();
            let mut denom = pos;
            for &n in &negs[u] {
                denom += dot(&users[u], &items[n]).exp();
            }
            oracle -= (pos / denom).ln();
        }
        oracle /= 3.0;

        let mut tape = Tape::no_grad();
        let u = rows(&mut tape, 3, d, users.concat());
        let i = rows(&mut tape, 9, d, items.concat());
        let l = rec_loss(&mut tape, u, i, &positives, &negs, 1.0).unwrap();
        assert!((tape.scalar(l) - oracle).abs() < 1e-10);
    }

    #[test]
    fn rec_loss_monotone_in_positive_score_and_errors() {
        let mut tape = Tape::no_grad();
        let u = rows(&mut tape, 1, 2, vec![1.0, 0.0]);
        let mut last = f64::INFINITY;
        for k in 0..5 {
            let a = 1.5 - 0.3 * k as f64;
            let i = rows(&mut tape, 2, 2, vec![a.cos(), a.sin(), 0.0, 1.0]);
            let l = { let v = rec_loss(&mut tape, u, i, &[0], &[vec![1]], 0.5).unwrap(); tape.scalar(v) };
            assert!(l >= 0.0 && l < last);
            last = l;
        }
        let z = rows(&mut tape, 2, 2, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(rec_loss(&mut tape, u, z, &[1], &[vec![0]], 1.0), Err(Error::ZeroNorm)));
        assert!(rec_loss(&mut tape, u, z, &[1], &[vec![]], 1.0).is_err());
        assert!(negative_sets(&[0], &[vec![0]], true).is_err());
    }

    #[test]
    fn bpc_hand_values() {
        let mut tape = Tape::no_grad();
        let v = rows(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let l = bpc_loss(&mut tape, v, v, 1.0, 0.0).unwrap();
        let want = 2.0 * (1.0 + (-1f64).exp()).ln();
        assert!((tape.scalar(l) - want).abs() < 1e-12);
        assert!((want - 0.6265).abs() < 1e-4);
        let with_dist = bpc_loss(&mut tape, v, v, 1.0, 3.0).unwrap();
        assert_eq!(tape.scalar(with_dist), tape.scalar(l));

        // Rows differing by [3,4] with both users aligned: the InfoNCE terms
        // are unchanged by scaling, the distance adds λ·25.
        let b = rows(&mut tape, 2, 2, vec![6.0, 8.0, -4.0, 3.0]);
        let s = rows(&mut tape, 2, 2, vec![3.0, 4.0, -8.0, 6.0]);
        let l0 = { let v = bpc_loss(&mut tape, b, s, 1.0, 0.0).unwrap(); tape.scalar(v) };
        let l1 = { let v = bpc_loss(&mut tape, b, s, 1.0, 1.0).unwrap(); tape.scalar(v) };
        assert!((l1 - l0 - 25.0).abs() < 1e-12);
        assert!((l0 - want).abs() < 1e-12);

        let one = rows(&mut tape, 1, 2, vec![1.0, 0.0]);
        assert!(bpc_loss(&mut tape, one, one, 1.0, 0.0).is_err());
    }

    #[test]
    fn bpc_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (c, sn) = (0.7f64.cos(), 0.7f64.sin());
        let rot = |v: &[f64]| -> Vec<f64> { v.chunks(2).flat_map(|p| [c * p[0] - sn * p[1], sn * p[0] + c * p[1]]).collect() };
        let eval = |b: Vec<f64>, s: Vec<f64>| {
            let mut tape = Tape::no_grad();
            let bv = rows(&mut tape, 3, 2, b);
            let sv = rows(&mut tape, 3, 2, s);
            let l = bpc_loss(&mut tape, bv, sv, 0.5, 0.3).unwrap();
            tape.scalar(l)
        };
        assert!((eval(b.clone(), s.clone()) - eval(rot(&b), rot(&s))).abs() < 1e-12);
    }

    fn balance(tape: &mut Tape, f: Vec<f64>, p: Vec<f64>) -> ViewBalance {
        let n = p.len();
        ViewBalance {
            view: View::Semantic,
            f,
            p: tape.constant(&[n], p).unwrap(),
        }
    }

    #[test]
    fn load_balance_values() {
        let mut tape = Tape::no_grad();
        let u = balance(&mut tape, vec![0.25; 4], vec![0.25; 4]);
        assert!(({ let v = lb_loss(&mut tape, &[u]).unwrap(); tape.scalar(v) } - 1.0).abs() < 1e-15);
        let c = balance(&mut tape, vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!({ let v = lb_loss(&mut tape, std::slice::from_ref(&c)).unwrap(); tape.scalar(v) }, 4.0);
        let u = balance(&mut tape, vec![0.25; 4], vec![0.25; 4]);
        assert!(({ let v = lb_loss(&mut tape, &[u, c]).unwrap(); tape.scalar(v) } - 2.5).abs() < 1e-15);
        assert!(lb_loss(&mut tape, &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let e = rng.gen_range(2..10);
            let raw: Vec<f64> = (0..e).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let f: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let b = balance(&mut tape, f.clone(), f);
            assert!({ let v = lb_loss(&mut tape, &[b]).unwrap(); tape.scalar(v) } >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn total_combines_weights() {
        let mut tape = Tape::no_grad();
        let r = tape.constant_scalar(0.7);
        let b = tape.constant_scalar(0.6);
        let l = tape.constant_scalar(1.0);
        let (t, v) = total_loss(&mut tape, r, Some(b), Some(l), 1.0, 1.0).unwrap();
        assert!((tape.scalar(t) - 2.3).abs() < 1e-15);
        assert_eq!((v.rec, v.bpc, v.lb), (0.7, 0.6, 1.0));
        let (t, v) = total_loss(&mut tape, r, Some(b), Some(l), 0.0, 0.0).unwrap();
        assert_eq!(tape.scalar(t), 0.7);
        assert_eq!(v.total, v.rec);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (nu, ni, d) = (3, 7, 4);
        let x0: Vec<f64> = (0..(2 * nu + ni) * d + 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let negs = negative_sets(&[0, 1, 2], &[vec![3, 4], vec![5, 6], vec![3, 6]], true).unwrap();
        let build = |tape: &mut Tape, x: &[f64]| -> Var {
            let t = tape.leaf(DenseTensor::new(vec![x.len()], x.to_vec()).unwrap().with_grad(true));
            let u = tape.index_select(t, 0, &(0..nu * d).collect::<Vec<_>>()).unwrap();
            let u = tape.reshape(u, &[nu, d]).unwrap();
            let s = tape.index_select(t, 0, &(nu * d..2 * nu * d).collect::<Vec<_>>()).unwrap();
            let s = tape.reshape(s, &[nu, d]).unwrap();
            let it = tape.index_select(t, 0, &(2 * nu * d..(2 * nu + ni) * d).collect::<Vec<_>>()).unwrap();
            let it = tape.reshape(it, &[ni, d]).unwrap();
            let p = tape.index_select(t, 0, &((2 * nu + ni) * d..(2 * nu + ni) * d + 4).collect::<Vec<_>>()).unwrap();
            let p = tape.softmax(p, 0).unwrap();
            let rec = rec_loss(tape, u, it, &[0, 1, 2], &negs, 0.3).unwrap();
            let bpc = bpc_loss(tape, u, s, 0.3, 0.2).unwrap();
            let lb = lb_loss(
                tape,
                &[ViewBalance {
                    view: View::Behavioral,
                    f: vec![0.1, 0.2, 0.3, 0.4],
                    p,
                }],
            )
            .unwrap();
            total_loss(tape, rec, Some(bpc), Some(lb), 0.5, 0.25).unwrap().0
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &x0);
        tape.backward(loss).unwrap();
        let g = tape.grad(crate::numcore::Var(0)).unwrap().to_vec();
        let num = numeric_grad(&x0, 1e-5, |x| {
            let mut t = Tape::no_grad();
            let l = build(&mut t, x);
            t.scalar(l)
        });
        for (a, n) in g.iter().zip(&num) {
            assert!(relative_error(*a, *n, 1e-6) < 1e-5, "{a} vs {n}");
        }
    }
}
