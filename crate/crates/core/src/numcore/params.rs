use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::DenseTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether decoupled weight decay applies to a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    Yes,
    No,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: DenseTensor,
    pub decay: Decay,
}

/// Named registry of every model parameter, frozen or trainable.
///
/// Registration order is stable, which is what makes checkpoints and
/// gradient checks reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: DenseTensor, decay: Decay) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, tensor, decay });
        Ok(id)
    }

    pub fn gaussian<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
        decay: Decay,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| normal.sample(rng)).collect();
        let t = DenseTensor::new(shape.to_vec(), values)?.with_grad(true);
        self.register(name, t, decay)
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64, decay: Decay) -> Result<ParamId> {
        let mut t = DenseTensor::zeros(shape).with_grad(true);
        t.values_mut().iter_mut().for_each(|v| *v = value);
        self.register(name, t, decay)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &DenseTensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let t = &mut self.params[id.0].tensor;
        t.requires_grad = trainable;
        if !trainable {
            t.grad = None;
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].tensor.requires_grad
    }

    /// Total scalar count over parameters satisfying `pred`.
    pub fn count(&self, pred: impl Fn(&Param) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if p.tensor.requires_grad {
                let n = p.tensor.numel();
                p.tensor.grad = Some(vec![0.0; n]);
            }
        }
    }

    /// FNV-1a over names, shapes and value bits of the selected parameters.
    pub fn checksum(&self, pred: impl Fn(&Param) -> bool) -> u64 {
        let mut h = Fnv64::new();
        for p in self.params.iter().filter(|p| pred(p)) {
            h.write(p.name.as_bytes());
            for &e in p.tensor.shape() {
                h.write(&(e as u64).to_le_bytes());
            }
            for v in p.tensor.values() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }

    /// Continues a hash from a previous [`Fnv64::finish`] value.
    pub fn from_state(state: u64) -> Self {
        Fnv64(state)
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}
