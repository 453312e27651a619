//! Adaptive cross-view fusion: residual projections and a scalar sigmoid gate.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Affine, Init};
use crate::numcore::{Decay, ParamId, ParamStore, Segments, Tape, Var};
use crate::views::Readout;

#[derive(Debug, Clone)]
pub struct AcfParams {
    pub p_beh: Affine,
    pub p_sem: Affine,
    /// `[1×2d]`, applied to `[h̃^B; h̃^S]`.
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub d: usize,
}

impl AcfParams {
    /// Zero projections and gate: `h̃ = h`, `δ = ½`.
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            p_beh: Affine::new(store, "acf.p_beh", d, d, Init::Zero, rng)?,
            p_sem: Affine::new(store, "acf.p_sem", d, d, Init::Zero, rng)?,
            w_g: store.filled("acf.w_g", &[1, 2 * d], 0.0, Decay::Yes)?,
            b_g: store.filled("acf.b_g", &[1], 0.0, Decay::No)?,
            d,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.p_beh.params().to_vec();
        v.extend(self.p_sem.params());
        v.extend([self.w_g, self.b_g]);
        v
    }
}

/// Per-entity representations, each `[N×d]` (`delta` is `[N×1]`).
///
/// A pathway that did not run leaves its fields `None`; `h_f` is then the
/// projected output of the pathway that did.
#[derive(Debug, Clone, Copy)]
pub struct ViewOutputs {
    pub h_sem: Option<Var>,
    pub h_beh: Option<Var>,
    pub ht_sem: Option<Var>,
    pub ht_beh: Option<Var>,
    pub delta: Option<Var>,
    pub h_f: Var,
}

/// One row per segment: the final position, or the mean over positions.
pub fn extract_representation(tape: &mut Tape, hidden: Var, seg: &Segments, readout: Readout) -> Result<Var> {
    if seg.is_empty() {
        return Err(Error::Input("empty sequence".into()));
    }
    match readout {
        Readout::Last => tape.index_select(hidden, 0, &seg.last_rows()),
        Readout::Mean => tape.segment_mean(hidden, seg),
    }
}

fn residual(tape: &mut Tape, store: &ParamStore, p: &Affine, h: Var) -> Result<Var> {
    let ph = p.forward(tape, store, h)?;
    tape.add(h, ph)
}

/// `h^F = δ·h̃^B + (1−δ)·h̃^S` with `δ = σ(W_g[h̃^B; h̃^S] + b_g)`.
pub fn fuse(tape: &mut Tape, store: &ParamStore, acf: &AcfParams, h_beh: Var, h_sem: Var) -> Result<ViewOutputs> {
    if tape.shape(h_beh) != tape.shape(h_sem) {
        return Err(Error::dim("fuse", tape.shape(h_beh), tape.shape(h_sem)));
    }
    let ht_beh = residual(tape, store, &acf.p_beh, h_beh)?;
    let ht_sem = residual(tape, store, &acf.p_sem, h_sem)?;
    let both = tape.concat(&[ht_beh, ht_sem], 1)?;
    let w = tape.param(store, acf.w_g);
    let b = tape.param(store, acf.b_g);
    let score = tape.matmul_t(both, w)?;
    let score = tape.add_row(score, b)?;
    let delta = tape.sigmoid(score);
    let ones = tape.filled(&[1, acf.d], 1.0);
    let dw = tape.matmul(delta, ones)?;
    let neg = tape.scale(dw, -1.0);
    let rest = tape.shift(neg, 1.0);
    let from_b = tape.mul(dw, ht_beh)?;
    let from_s = tape.mul(rest, ht_sem)?;
    let h_f = tape.add(from_b, from_s)?;
    Ok(ViewOutputs {
        h_sem: Some(h_sem),
        h_beh: Some(h_beh),
        ht_sem: Some(ht_sem),
        ht_beh: Some(ht_beh),
        delta: Some(delta),
        h_f,
    })
}

/// Single-pathway output: `h^F = h̃` of the surviving view.
pub fn single_view(tape: &mut Tape, store: &ParamStore, acf: &AcfParams, h: Var, behavioral: bool) -> Result<ViewOutputs> {
    let p = if behavioral { &acf.p_beh } else { &acf.p_sem };
    let ht = residual(tape, store, p, h)?;
    let (hb, hs) = if behavioral { (Some(h), None) } else { (None, Some(h)) };
    let (tb, ts) = if behavioral { (Some(ht), None) } else { (None, Some(ht)) };
    Ok(ViewOutputs {
        h_sem: hs,
        h_beh: hb,
        ht_sem: ts,
        ht_beh: tb,
        delta: None,
        h_f: ht,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::numcore::DenseTensor;

    fn setup() -> (AcfParams, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let acf = AcfParams::new(&mut store, 3, &mut rng).unwrap();
        (acf, store)
    }

    fn rows(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(DenseTensor::new(vec![v.len() / 3, 3], v.to_vec()).unwrap().with_grad(true))
    }

    #[test]
    fn zero_parameters_average_the_views() {
        let (acf, store) = setup();
        let mut tape = Tape::no_grad();
        let b = rows(&mut tape, &[1.0, 2.0, 3.0]);
        let s = rows(&mut tape, &[3.0, -2.0, 1.0]);
        let out = fuse(&mut tape, &store, &acf, b, s).unwrap();
        assert_eq!(tape.value(out.delta.unwrap()), &[0.5]);
        assert_eq!(tape.value(out.h_f), &[2.0, 0.0, 2.0]);
        assert_eq!(tape.value(out.ht_beh.unwrap()), tape.value(b));
    }

    #[test]
    fn saturated_gate_and_convexity() {
        let (acf, mut store) = setup();
        store.get_mut(acf.b_g).tensor.values_mut()[0] = 20.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for id in acf.params() {
            if id != acf.b_g {
                store.get_mut(id).tensor.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
            }
        }
        let mut tape = Tape::no_grad();
        let vb: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = rows(&mut tape, &vb);
        let s = rows(&mut tape, &vs);
        let out = fuse(&mut tape, &store, &acf, b, s).unwrap();
        let (tb, ts, hf) = (
            tape.value(out.ht_beh.unwrap()).to_vec(),
            tape.value(out.ht_sem.unwrap()).to_vec(),
            tape.value(out.h_f).to_vec(),
        );
        let d = tape.value(out.delta.unwrap()).to_vec();
        for i in 0..6 {
            let di = d[i / 3];
            assert!(di > 0.0 && di < 1.0);
            assert!((hf[i] - tb[i]).abs() < 1e-8);
            assert_eq!(hf[i], di * tb[i] + (1.0 - di) * ts[i]);
        }
    }

    #[test]
    fn gradient_reaches_both_views() {
        let (acf, store) = setup();
        let mut tape = Tape::new();
        let b = rows(&mut tape, &[0.5, -0.2, 0.1]);
        let s = rows(&mut tape, &[0.3, 0.9, -0.4]);
        let out = fuse(&mut tape, &store, &acf, b, s).unwrap();
        let sq = tape.square(out.h_f);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert!(tape.grad(b).unwrap().iter().any(|&g| g != 0.0));
        assert!(tape.grad(s).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn readouts() {
        let mut tape = Tape::no_grad();
        let h = tape.constant(&[3, 1], vec![1.0, 2.0, 6.0]).unwrap();
        let seg = Segments::from_lengths(&[1, 2]).unwrap();
        let last = extract_representation(&mut tape, h, &seg, Readout::Last).unwrap();
        assert_eq!(tape.value(last), &[1.0, 6.0]);
        let mean = extract_representation(&mut tape, h, &seg, Readout::Mean).unwrap();
        assert_eq!(tape.value(mean), &[1.0, 4.0]);
        assert!(extract_representation(&mut tape, h, &Segments::default(), Readout::Last).is_err());
    }
}
