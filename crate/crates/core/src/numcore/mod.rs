//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Broadcasting is deliberately narrow: binary ops accept identical shapes or
//! a one-element operand. Row-wise helpers (`add_row`, `segment_mean`,
//! `index_select`) cover the remaining cases with explicit gradient rules.

mod gemm;
pub mod gradcheck;
mod params;
mod segments;
mod tape;
mod tensor;

pub use params::{Decay, Fnv64, Param, ParamId, ParamStore};
pub use segments::Segments;
pub use tape::{Tape, Var};
pub use tensor::DenseTensor;

#[allow(unused_imports)]
pub(crate) use tape::{dot, sigmoid};

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::{numeric_grad, relative_error};
    use super::*;
    use crate::error::Result;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Runs `build` on leaves with the given shapes and checks every input
    /// gradient of `sum(out ⊙ w)` (random `w`) against central differences.
    fn check_op(
        shapes: &[Vec<usize>],
        trials: usize,
        tol: f64,
        mut init: impl FnMut(&mut ChaCha8Rng, usize) -> Vec<f64>,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..trials {
            let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| init(&mut rng, s.iter().product())).collect();
            let eval = |vals: &[Vec<f64>], w: Option<&[f64]>| -> (f64, Vec<f64>, Vec<Vec<f64>>, u64) {
                let mut t = Tape::new();
                let vars: Vec<Var> = shapes
                    .iter()
                    .zip(vals)
                    .map(|(s, v)| t.leaf(DenseTensor::new(s.clone(), v.clone()).unwrap().with_grad(true)))
                    .collect();
                let out = build(&mut t, &vars).unwrap();
                let n = t.value(out).len();
                let wv: Vec<f64> = match w {
                    Some(w) => w.to_vec(),
                    None => (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect(),
                };
                let wvar = t.constant(t.shape(out).to_vec().as_slice(), wv.clone()).unwrap();
                let prod = t.mul(out, wvar).unwrap();
                let loss = t.sum_all(prod);
                let l = t.scalar(loss);
                t.backward(loss).unwrap();
                let grads = vars.iter().map(|&v| t.grad(v).unwrap().to_vec()).collect();
                (l, wv, grads, t.discrete_signature())
            };
            let (_, w, analytic, sig) = eval(&inputs, None);
            for (k, x) in inputs.iter().enumerate() {
                let mut skip = false;
                let num = numeric_grad(x, 1e-5, |xp| {
                    let mut vals = inputs.clone();
                    vals[k] = xp.to_vec();
                    let (l, _, _, s) = eval(&vals, Some(&w));
                    skip |= s != sig;
                    l
                });
                if skip {
                    continue;
                }
                for (a, n) in analytic[k].iter().zip(&num) {
                    let e = relative_error(*a, *n, 1e-6);
                    assert!(e < tol, "input {k}: analytic {a} vs numeric {n} (rel err {e})");
                }
            }
        }
    }

    fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        rand_vec(rng, n)
    }

    #[test]
    fn matmul_hand_example() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        assert_eq!(t.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity_and_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let av = rand_vec(&mut rng, 12);
        let a = t.constant(&[3, 4], av.clone()).unwrap();
        let i = t.leaf(DenseTensor::identity(4));
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c), av.as_slice());
        let bad = t.constant(&[3, 2], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, bad).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        check_op(&[vec![3, 4], vec![4, 2]], 100, 1e-6, uniform, |t, v| t.matmul(v[0], v[1]));
        check_op(&[vec![3, 4], vec![2, 4]], 20, 1e-6, uniform, |t, v| t.matmul_t(v[0], v[1]));
        check_op(&[vec![4, 3], vec![2, 4]], 20, 1e-6, uniform, |t, v| t.matmul_ex(v[0], v[1], true, true));
    }

    #[test]
    fn softmax_values() {
        let mut t = Tape::new();
        let a = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        let s = t.softmax(a, 0).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.5]);
        let b = t.constant(&[2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax(b, 0).unwrap();
        assert!((t.value(s)[0] - 1.0).abs() < 1e-12 && t.value(s)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        check_op(&[vec![5]], 100, 1e-5, uniform, |t, v| t.softmax(v[0], 0));
        check_op(&[vec![3, 4]], 20, 1e-5, uniform, |t, v| t.softmax(v[0], 0));
        check_op(&[vec![3, 4]], 20, 1e-5, uniform, |t, v| t.log_softmax(v[0], 1));
    }

    #[test]
    fn elementwise_values() {
        let mut t = Tape::new();
        let a = t.constant(&[2], vec![-1.0, 2.0]).unwrap();
        let r = t.relu(a);
        assert_eq!(t.value(r), &[0.0, 2.0]);
        let z = t.constant_scalar(0.0);
        let s = t.sigmoid(z);
        assert_eq!(t.scalar(s), 0.5);
        let v = t.constant(&[2], vec![3.0, 4.0]).unwrap();
        let n = t.l2norm(v);
        let n2 = t.square(n);
        assert!((t.scalar(n2) - 25.0).abs() < 1e-12);
        let m = t.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(t.add(a, m).is_err());
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let s = vec![vec![3, 2], vec![3, 2]];
        check_op(&s, 100, 1e-4, uniform, |t, v| t.add(v[0], v[1]));
        check_op(&s, 20, 1e-4, uniform, |t, v| t.sub(v[0], v[1]));
        check_op(&s, 100, 1e-4, uniform, |t, v| t.mul(v[0], v[1]));
        check_op(&[vec![3, 2], vec![1]], 20, 1e-4, uniform, |t, v| t.mul(v[0], v[1]));
        check_op(&[vec![1], vec![3, 2]], 20, 1e-4, uniform, |t, v| t.sub(v[0], v[1]));
        check_op(&[vec![6]], 100, 1e-4, uniform, |t, v| Ok(t.relu(v[0])));
        check_op(&[vec![6]], 100, 1e-4, uniform, |t, v| Ok(t.sigmoid(v[0])));
        check_op(&[vec![6]], 100, 1e-4, uniform, |t, v| Ok(t.gelu(v[0])));
        check_op(&[vec![6]], 100, 1e-4, uniform, |t, v| Ok(t.square(v[0])));
        check_op(&[vec![6]], 20, 1e-4, |r, n| (0..n).map(|_| r.gen_range(0.5..2.0)).collect(), |t, v| Ok(t.recip(v[0])));
        check_op(&[vec![6]], 20, 1e-4, uniform, |t, v| Ok(t.l2norm(v[0])));
        check_op(&[vec![3, 4], vec![4]], 20, 1e-4, uniform, |t, v| t.add_row(v[0], v[1]));
        check_op(&[vec![3, 4]], 20, 1e-4, uniform, |t, v| {
            let s = t.scale(v[0], -2.5);
            Ok(t.shift(s, 1.0))
        });
    }

    #[test]
    fn reduce_values_and_gradients() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        let m = t.mean(a, 0).unwrap();
        assert_eq!(t.value(m), &[2.0, 4.0]);
        let z = t.constant(&[3], vec![0.0; 3]).unwrap();
        let s = t.sum(z, 0).unwrap();
        assert_eq!(t.value(s), &[0.0]);
        assert!(t.mean(a, 2).is_err());

        // d mean / d x_i = 1/n
        let mut t = Tape::new();
        let x = t.leaf(DenseTensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap().with_grad(true));
        let m = t.mean(x, 0).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.25; 4]);

        check_op(&[vec![3, 4]], 100, 1e-4, uniform, |t, v| t.mean(v[0], 1));
        check_op(&[vec![2, 3, 4]], 20, 1e-4, uniform, |t, v| t.sum(v[0], 1));
    }

    #[test]
    fn concat_values_and_gradients() {
        let mut t = Tape::new();
        let a = t.constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(&[1], vec![3.0]).unwrap();
        let c = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0]);
        let u = t.constant(&[8], vec![0.0; 8]).unwrap();
        let x = t.constant(&[8], vec![1.0; 8]).unwrap();
        let ux = t.concat(&[u, x], 0).unwrap();
        assert_eq!(t.shape(ux), &[16]);
        let m = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let n = t.constant(&[3, 3], vec![0.0; 9]).unwrap();
        assert!(t.concat(&[m, n], 1).is_err());

        check_op(&[vec![2, 3], vec![2, 1]], 100, 1e-4, uniform, |t, v| t.concat(&[v[0], v[1]], 1));
        check_op(&[vec![2, 3], vec![1, 3]], 20, 1e-4, uniform, |t, v| t.concat(&[v[0], v[1]], 0));
    }

    #[test]
    fn structural_op_gradients() {
        check_op(&[vec![4, 3]], 20, 1e-4, uniform, |t, v| t.index_select(v[0], 0, &[3, 0, 3]));
        check_op(&[vec![4, 3]], 20, 1e-4, uniform, |t, v| t.index_select(v[0], 1, &[2, 2]));
        check_op(&[vec![3, 4]], 20, 1e-4, uniform, |t, v| t.transpose(v[0]));
        check_op(&[vec![3, 4]], 20, 1e-4, uniform, |t, v| t.normalize_rows(v[0]));
        let seg = Segments::from_lengths(&[2, 3]).unwrap();
        check_op(&[vec![5, 3]], 20, 1e-4, uniform, |t, v| t.segment_mean(v[0], &seg));
    }

    #[test]
    fn layer_norm_gradient() {
        check_op(&[vec![3, 6], vec![6], vec![6]], 30, 1e-4, uniform, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    }

    #[test]
    fn attention_gradient_and_causality() {
        let seg = Segments::from_lengths(&[3, 2]).unwrap();
        let s = vec![5, 4];
        check_op(&[s.clone(), s.clone(), s.clone()], 30, 1e-4, uniform, |t, v| {
            t.causal_attention(v[0], v[1], v[2], 2, &seg)
        });

        // row i of segment output ignores rows > i and other segments
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = rand_vec(&mut rng, 20);
        let run = |vals: &[f64]| {
            let mut t = Tape::no_grad();
            let x = t.constant(&[5, 4], vals.to_vec()).unwrap();
            let o = t.causal_attention(x, x, x, 2, &seg).unwrap();
            t.value(o).to_vec()
        };
        let o0 = run(&base);
        let mut pert = base.clone();
        pert[2 * 4] += 1.0; // last row of segment 0
        let o1 = run(&pert);
        assert_eq!(o0[..8], o1[..8]);
        assert_ne!(o0[8..12], o1[8..12]);
        assert_eq!(o0[12..], o1[12..]);
    }

    #[test]
    fn backward_rules() {
        let mut t = Tape::new();
        let x = t.leaf(DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad(true));
        let sq = t.square(x);
        let l = t.sum_all(sq);
        assert!(t.backward(sq).is_err(), "non-scalar loss");
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
        assert!(t.backward(l).is_err(), "double backward");
        t.reset_grads();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

        let mut t = Tape::new();
        let x = t.leaf(DenseTensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad(true));
        let c = t.constant_scalar(4.0);
        t.backward(c).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn ops_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = rand_vec(&mut rng, 64);
        let run = || {
            let mut t = Tape::new();
            let a = t.leaf(DenseTensor::new(vec![8, 8], v.clone()).unwrap().with_grad(true));
            let b = t.matmul_t(a, a).unwrap();
            let s = t.softmax(b, 1).unwrap();
            let l = t.sum_all(s);
            let sq = t.square(l);
            t.backward(sq).unwrap();
            (t.value(s).to_vec(), t.grad(a).unwrap().to_vec())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_shift_invariant(
                logits in proptest::collection::vec(-30.0f64..30.0, 1..12),
                c in -50.0f64..50.0,
            ) {
                let n = logits.len();
                let mut t = Tape::no_grad();
                let a = t.constant(&[n], logits.clone()).unwrap();
                let s = t.softmax(a, 0).unwrap();
                let shifted = t.shift(a, c);
                let s2 = t.softmax(shifted, 0).unwrap();
                let total: f64 = t.value(s).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!(t.value(s).iter().all(|&p| p >= 0.0));
                for (p, q) in t.value(s).iter().zip(t.value(s2)) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }
}
