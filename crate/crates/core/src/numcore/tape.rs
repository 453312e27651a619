//! Wengert tape: every op appends a node holding its output value and enough
//! saved state to run its local gradient rule; `backward` walks the nodes once
//! in reverse creation order, which is a valid reverse topological order
//! because inputs always precede outputs.

use std::collections::HashMap;

use super::gemm::{gemm, Mat};
use super::params::{Fnv64, ParamId, ParamStore};
use super::tensor::lanes;
use super::{DenseTensor, Segments};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Shift { a: Var },
    AddRow { x: Var, b: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Gelu { a: Var },
    Square { a: Var },
    Recip { a: Var },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    Sum { a: Var, axis: usize },
    Mean { a: Var, axis: usize },
    SumAll { a: Var },
    L2Norm { a: Var },
    NormalizeRows { a: Var, norms: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    IndexSelect { a: Var, axis: usize, idx: Vec<usize> },
    SegmentMean { a: Var, seg: Segments },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, seg: Segments, probs: Vec<f64> },
    Transpose { a: Var },
    Reshape { a: Var },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub op: Op,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
    backward_done: bool,
    discrete: Fnv64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
            backward_done: false,
            discrete: Fnv64::new(),
        }
    }

    /// A tape on which nothing requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> DenseTensor {
        let n = &self.nodes[v.0];
        DenseTensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Hash of every discrete branch taken so far (ReLU signs, Top-N masks).
    ///
    /// Finite-difference checks compare signatures across perturbed
    /// evaluations and skip coordinates whose perturbation crosses a kink.
    pub fn discrete_signature(&self) -> u64 {
        self.discrete.finish()
    }

    pub fn note_discrete(&mut self, bits: impl IntoIterator<Item = bool>) {
        for b in bits {
            self.discrete.write(&[u8::from(b)]);
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: DenseTensor) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), rg, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = DenseTensor::new(shape.to_vec(), values)?;
        Ok(self.leaf(t))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn filled(&mut self, shape: &[usize], v: f64) -> Var {
        let n = shape.iter().product();
        self.push(shape.to_vec(), vec![v; n], false, Op::Leaf)
    }

    /// Binds a stored parameter as a leaf; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = store.tensor(id);
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), t.requires_grad, Op::Leaf);
        self.bound.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    /// Adds the gradients of bound parameters into the store's grad slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let mut pairs: Vec<_> = self.bound_params().collect();
        pairs.sort();
        for (id, v) in pairs {
            let t = &mut store.get_mut(id).tensor;
            if !t.requires_grad {
                continue;
            }
            let n = t.numel();
            let dst = t.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = self.nodes[v.0].grad.as_deref() {
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }

    // ---------------------------------------------------------------- ops

    /// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let ma = Mat::new(self.value(a), sa[0], sa[1], ta);
        let mb = Mat::new(self.value(b), sb[0], sb[1], tb);
        let ((m, k), (k2, n)) = (ma.dims(), mb.dims());
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(ma, mb, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ`, the natural form for `x Wᵀ` with `W` stored `[out×in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (va, vb) = (self.value(a), self.value(b));
        if sa == sb {
            Ok((sa.to_vec(), va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()))
        } else if vb.len() == 1 {
            let y = vb[0];
            Ok((sa.to_vec(), va.iter().map(|&x| f(x, y)).collect()))
        } else if va.len() == 1 {
            let x = va[0];
            Ok((sb.to_vec(), vb.iter().map(|&y| f(x, y)).collect()))
        } else {
            Err(Error::dim(name, sa, sb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(s, v, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(s, v, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(s, v, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.push(s, v, rg, Op::Scale { a, c })
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x + c).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.push(s, v, rg, Op::Shift { a })
    }

    /// Adds the vector `b[n]` to every row of `x[S×n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let n = *sx.last().unwrap_or(&0);
        if sx.len() != 2 || sb.iter().product::<usize>() != n {
            return Err(Error::dim("add_row", &sx, &sb));
        }
        let bv = self.value(b);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|r| r.iter().zip(bv).map(|(a, c)| a + c))
            .collect();
        let rg = self.rg(&[x, b]);
        Ok(self.push(sx, out, rg, Op::AddRow { x, b }))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.push(s, v, rg, op)
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let signs: Vec<bool> = self.value(a).iter().map(|&x| x > 0.0).collect();
        self.note_discrete(signs);
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu(x).0, Op::Gelu { a })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    /// Elementwise `1 / a`; callers guarantee nonzero inputs.
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip { a })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = lanes(self.shape(a), axis)?;
        let mut out = self.value(a).to_vec();
        for_lanes(outer, n, inner, |idx| {
            let m = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in idx.clone() {
                out[i] = (out[i] - m).exp();
                z += out[i];
            }
            for i in idx {
                out[i] /= z;
            }
        });
        let (s, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        Ok(self.push(s, out, rg, Op::Softmax { a, axis }))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = lanes(self.shape(a), axis)?;
        let mut out = self.value(a).to_vec();
        for_lanes(outer, n, inner, |idx| {
            let m = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + idx.clone().map(|i| (out[i] - m).exp()).sum::<f64>().ln();
            for i in idx {
                out[i] -= lse;
            }
        });
        let (s, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        Ok(self.push(s, out, rg, Op::LogSoftmax { a, axis }))
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &e)| e).collect();
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = lanes(self.shape(a), axis)?;
        let out = reduce(self.value(a), outer, n, inner, 1.0);
        let (s, rg) = (Self::reduced_shape(self.shape(a), axis), self.rg(&[a]));
        Ok(self.push(s, out, rg, Op::Sum { a, axis }))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = lanes(self.shape(a), axis)?;
        let out = reduce(self.value(a), outer, n, inner, 1.0 / n as f64);
        let (s, rg) = (Self::reduced_shape(self.shape(a), axis), self.rg(&[a]));
        Ok(self.push(s, out, rg, Op::Mean { a, axis }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::SumAll { a })
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2norm(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::L2Norm { a })
    }

    /// Scales every row of a rank-2 tensor to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Tensor(format!("normalize_rows needs rank 2, got {s:?}")));
        }
        let c = s[1];
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(s[0] * c);
        for row in self.value(a).chunks(c) {
            let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !nrm.is_finite() {
                return Err(Error::NonFiniteValue("normalize_rows"));
            }
            if nrm == 0.0 {
                return Err(Error::ZeroNorm);
            }
            norms.push(nrm);
            out.extend(row.iter().map(|x| x / nrm));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(s, out, rg, Op::NormalizeRows { a, norms }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?).to_vec();
        lanes(&first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = lanes(&shape, axis)?;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let v = self.value(p);
                out.extend_from_slice(&v[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(shape, out, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Gathers slices `idx` along `axis`; indices may repeat.
    pub fn index_select(&mut self, a: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (outer, n, inner) = lanes(&s, axis)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("index {bad} out of range for extent {n}")));
        }
        if idx.is_empty() {
            return Err(Error::Input("index_select with no indices".into()));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * n + i) * inner;
                out.extend_from_slice(&v[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = idx.len();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, rg, Op::IndexSelect { a, axis, idx: idx.to_vec() }))
    }

    /// Mean of the rows of each segment: `[S×d] -> [n_seg×d]`.
    pub fn segment_mean(&mut self, a: Var, seg: &Segments) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || seg.total_rows() != s[0] {
            return Err(Error::Input(format!("segments cover {} rows, tensor is {s:?}", seg.total_rows())));
        }
        let d = s[1];
        let v = self.value(a);
        let mut out = vec![0.0; seg.len() * d];
        for (k, &(start, len)) in seg.spans().iter().enumerate() {
            let dst = &mut out[k * d..(k + 1) * d];
            for r in start..start + len {
                dst.iter_mut().zip(&v[r * d..(r + 1) * d]).for_each(|(o, x)| *o += x);
            }
            let inv = 1.0 / len as f64;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![seg.len(), d], out, rg, Op::SegmentMean { a, seg: seg.clone() }))
    }

    /// Row-wise layer normalisation with gain and bias vectors.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.value(g).len() != s[1] || self.value(b).len() != s[1] {
            return Err(Error::dim("layer_norm", &s, self.shape(g)));
        }
        let d = s[1];
        let (gv, bv) = (self.value(g), self.value(b));
        let mut xhat = Vec::with_capacity(s[0] * d);
        let mut rstd = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(s[0] * d);
        for row in self.value(x).chunks(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mu) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let rg = self.rg(&[x, g, b]);
        Ok(self.push(s, out, rg, Op::LayerNorm { x, g, b, xhat, rstd }))
    }

    /// Multi-head causal self-attention confined to each segment.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seg: &Segments) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::dim("attention", &s, self.shape(k)));
        }
        if heads == 0 || !s[1].is_multiple_of(heads) || seg.total_rows() != s[0] {
            return Err(Error::Input(format!("attention: {heads} heads, shape {s:?}, {} segment rows", seg.total_rows())));
        }
        let d = s[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; s[0] * d];
        let mut probs = Vec::with_capacity(seg.spans().iter().map(|&(_, l)| l * l).sum::<usize>() * heads);
        let mut row = Vec::new();
        for &(start, len) in seg.spans() {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..len {
                    let qi = &qv[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    row.clear();
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        let sc = dot(qi, kj) * scale;
                        m = m.max(sc);
                        row.push(sc);
                    }
                    let mut z = 0.0;
                    for p in row.iter_mut() {
                        *p = (*p - m).exp();
                        z += *p;
                    }
                    let o = &mut out[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    for (j, p) in row.iter_mut().enumerate() {
                        *p /= z;
                        let vj = &vv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        o.iter_mut().zip(vj).for_each(|(a, b)| *a += *p * b);
                    }
                    probs.extend_from_slice(&row);
                    probs.extend(std::iter::repeat_n(0.0, len - i - 1));
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(s, out, rg, Op::Attention { q, k, v, heads, seg: seg.clone(), probs }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Tensor(format!("transpose needs rank 2, got {s:?}")));
        }
        let v = self.value(a);
        let mut out = vec![0.0; v.len()];
        for i in 0..s[0] {
            for j in 0..s[1] {
                out[j * s[0] + i] = v[i * s[1] + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s[1], s[0]], out, rg, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), v, rg, Op::Reshape { a }))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar loss.
    ///
    /// Every leaf with `requires_grad` ends up with a populated gradient,
    /// zero when the loss does not depend on it. A second call without
    /// [`Tape::reset_grads`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("gradients already computed; call reset_grads first".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape)));
        }
        self.backward_done = true;
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(&op, i, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        for n in &mut self.nodes {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(vec![0.0; n.value.len()]);
            }
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn acc(&mut self, v: Var, contrib: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut g = self.nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
        contrib(&mut g, &self.nodes);
        self.nodes[v.0].grad = Some(g);
    }

    fn backprop(&mut self, op: &Op, out: usize, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
                let (m, n) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                self.acc(a, |ga, nodes| {
                    let bv = &nodes[b.0].value;
                    let gm = Mat::new(g, m, n, false);
                    if ta {
                        gemm(Mat::new(bv, sb[0], sb[1], tb), Mat::new(g, m, n, true), ga, true);
                    } else {
                        gemm(gm, Mat::new(bv, sb[0], sb[1], !tb), ga, true);
                    }
                });
                self.acc(b, |gb, nodes| {
                    let av = &nodes[a.0].value;
                    if tb {
                        gemm(Mat::new(g, m, n, true), Mat::new(av, sa[0], sa[1], ta), gb, true);
                    } else {
                        gemm(Mat::new(av, sa[0], sa[1], !ta), Mat::new(g, m, n, false), gb, true);
                    }
                });
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                self.acc(a, |ga, _| broadcast_back(ga, g, |gi, _| gi));
                self.acc(b, |gb, _| broadcast_back(gb, g, |gi, _| sign * gi));
            }
            Op::Mul { a, b } => {
                self.acc(a, |ga, nodes| {
                    let bv = &nodes[b.0].value;
                    broadcast_back(ga, g, |gi, k| gi * pick(bv, k));
                });
                self.acc(b, |gb, nodes| {
                    let av = &nodes[a.0].value;
                    broadcast_back(gb, g, |gi, k| gi * pick(av, k));
                });
            }
            Op::Scale { a, c } => self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)),
            Op::Shift { a } => self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s)),
            Op::AddRow { x, b } => {
                self.acc(x, |gx, _| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                self.acc(b, |gb, _| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Relu { a } => self.acc(a, |ga, nodes| {
                let av = &nodes[a.0].value;
                for ((d, s), x) in ga.iter_mut().zip(g).zip(av) {
                    if *x > 0.0 {
                        *d += s;
                    }
                }
            }),
            Op::Sigmoid { a } => self.acc(a, |ga, nodes| {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(&nodes[out].value) {
                    *d += s * y * (1.0 - y);
                }
            }),
            Op::Gelu { a } => self.acc(a, |ga, nodes| {
                for ((d, s), x) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                    *d += s * gelu(*x).1;
                }
            }),
            Op::Square { a } => self.acc(a, |ga, nodes| {
                for ((d, s), x) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                    *d += 2.0 * s * x;
                }
            }),
            Op::Recip { a } => self.acc(a, |ga, nodes| {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(&nodes[out].value) {
                    *d -= s * y * y;
                }
            }),
            Op::Softmax { a, axis } => self.acc(a, |ga, nodes| {
                let y = &nodes[out].value;
                let (outer, n, inner) = lanes(&nodes[out].shape, axis).expect("axis validated in forward");
                for_lanes(outer, n, inner, |idx| {
                    let dot: f64 = idx.clone().map(|i| y[i] * g[i]).sum();
                    for i in idx {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                });
            }),
            Op::LogSoftmax { a, axis } => self.acc(a, |ga, nodes| {
                let y = &nodes[out].value;
                let (outer, n, inner) = lanes(&nodes[out].shape, axis).expect("axis validated in forward");
                for_lanes(outer, n, inner, |idx| {
                    let total: f64 = idx.clone().map(|i| g[i]).sum();
                    for i in idx {
                        ga[i] += g[i] - y[i].exp() * total;
                    }
                });
            }),
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let is_mean = matches!(op, Op::Mean { .. });
                self.acc(a, |ga, nodes| {
                    let (outer, n, inner) = lanes(&nodes[a.0].shape, axis).expect("axis validated in forward");
                    let f = if is_mean { 1.0 / n as f64 } else { 1.0 };
                    for o in 0..outer {
                        for i in 0..n {
                            for k in 0..inner {
                                ga[(o * n + i) * inner + k] += f * g[o * inner + k];
                            }
                        }
                    }
                });
            }
            Op::SumAll { a } => self.acc(a, |ga, _| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::L2Norm { a } => {
                let nrm = self.nodes[out].value[0];
                self.acc(a, |ga, nodes| {
                    if nrm > 0.0 {
                        for (d, x) in ga.iter_mut().zip(&nodes[a.0].value) {
                            *d += g[0] * x / nrm;
                        }
                    }
                });
            }
            Op::NormalizeRows { a, ref norms } => self.acc(a, |ga, nodes| {
                let y = &nodes[out].value;
                let c = nodes[out].shape[1];
                for (r, &nrm) in norms.iter().enumerate() {
                    let span = r * c..(r + 1) * c;
                    let dot: f64 = span.clone().map(|i| y[i] * g[i]).sum();
                    for i in span {
                        ga[i] += (g[i] - y[i] * dot) / nrm;
                    }
                }
            }),
            Op::Concat { ref parts, axis } => {
                let shape = self.nodes[out].shape.clone();
                let (outer, total, inner) = lanes(&shape, axis).expect("axis validated in forward");
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].shape[axis];
                    self.acc(p, |gp, _| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            gp[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += n;
                }
            }
            Op::IndexSelect { a, axis, ref idx } => self.acc(a, |ga, nodes| {
                let (outer, n, inner) = lanes(&nodes[a.0].shape, axis).expect("axis validated in forward");
                let m = idx.len();
                for o in 0..outer {
                    for (t, &i) in idx.iter().enumerate() {
                        let src = &g[(o * m + t) * inner..(o * m + t + 1) * inner];
                        let dst = &mut ga[(o * n + i) * inner..(o * n + i + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }),
            Op::SegmentMean { a, ref seg } => self.acc(a, |ga, nodes| {
                let d = nodes[a.0].shape[1];
                for (k, &(start, len)) in seg.spans().iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    let src = &g[k * d..(k + 1) * d];
                    for r in start..start + len {
                        ga[r * d..(r + 1) * d].iter_mut().zip(src).for_each(|(o, s)| *o += s * inv);
                    }
                }
            }),
            Op::LayerNorm { x, g: gain, b, ref xhat, ref rstd } => {
                let d = self.nodes[x.0].shape[1];
                self.acc(b, |gb, _| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(o, s)| *o += s);
                    }
                });
                self.acc(gain, |gg, _| {
                    for (row, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * xh[j];
                        }
                    }
                });
                self.acc(x, |gx, nodes| {
                    let gv = &nodes[gain.0].value;
                    let mut dxh = vec![0.0; d];
                    for (r, (row, xh)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxh[j] = row[j] * gv[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, ref seg, ref probs } => {
                let d = self.nodes[q.0].shape[1];
                let rows = self.nodes[q.0].shape[0];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                {
                    let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                    let mut off = 0;
                    let mut dp = Vec::new();
                    for &(start, len) in seg.spans() {
                        for h in 0..heads {
                            let c0 = h * dh;
                            for i in 0..len {
                                let p = &probs[off + i * len..off + i * len + i + 1];
                                let gi = &g[(start + i) * d + c0..(start + i) * d + c0 + dh];
                                dp.clear();
                                for (j, &pij) in p.iter().enumerate() {
                                    let vj = &vv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                                    dp.push(dot(gi, vj));
                                    let gvj = &mut gv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                                    gvj.iter_mut().zip(gi).for_each(|(o, s)| *o += pij * s);
                                }
                                let sum: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                                for (j, &pij) in p.iter().enumerate() {
                                    let ds = pij * (dp[j] - sum) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    for c in 0..dh {
                                        gq[(start + i) * d + c0 + c] += ds * kv[(start + j) * d + c0 + c];
                                        gk[(start + j) * d + c0 + c] += ds * qv[(start + i) * d + c0 + c];
                                    }
                                }
                            }
                            off += len * len;
                        }
                    }
                }
                self.acc(q, |d, _| d.iter_mut().zip(&gq).for_each(|(o, s)| *o += s));
                self.acc(k, |d, _| d.iter_mut().zip(&gk).for_each(|(o, s)| *o += s));
                self.acc(v, |d, _| d.iter_mut().zip(&gv).for_each(|(o, s)| *o += s));
            }
            Op::Transpose { a } => self.acc(a, |ga, nodes| {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }),
            Op::Reshape { a } => self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s)),
        }
    }
}

fn pick(v: &[f64], k: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

/// Accumulates `f(g[k], k)` into `dst`, summing when `dst` is a broadcast scalar.
fn broadcast_back(dst: &mut [f64], g: &[f64], f: impl Fn(f64, usize) -> f64) {
    if dst.len() == g.len() {
        for (k, d) in dst.iter_mut().enumerate() {
            *d += f(g[k], k);
        }
    } else {
        dst[0] += g.iter().enumerate().map(|(k, &gi)| f(gi, k)).sum::<f64>();
    }
}

fn for_lanes(outer: usize, n: usize, inner: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..outer {
        for k in 0..inner {
            let start = o * n * inner + k;
            f((start..start + n * inner).step_by(inner));
        }
    }
}

fn reduce(v: &[f64], outer: usize, n: usize, inner: usize, f: f64) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..n {
            for k in 0..inner {
                out[o * inner + k] += v[(o * n + i) * inner + k];
            }
        }
    }
    if f != 1.0 {
        out.iter_mut().for_each(|x| *x *= f);
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(gelu(x), gelu'(x))`.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}
