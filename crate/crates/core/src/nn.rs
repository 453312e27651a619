//! Small building blocks shared by the backbone, projectors and routers.

use rand::Rng;

use crate::error::Result;
use crate::numcore::{Decay, DenseTensor, ParamId, ParamStore, Tape, Var};

/// Initial value of an affine map's weight.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Gaussian(f64),
    Zero,
    Identity,
}

/// `y = x Wᵀ + b` with `W` stored `[d_out×d_in]`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Affine {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init, rng: &mut R) -> Result<Self> {
        let weight = match init {
            Init::Gaussian(std) => store.gaussian(format!("{name}.weight"), &[d_out, d_in], std, rng, Decay::Yes)?,
            Init::Zero => store.filled(format!("{name}.weight"), &[d_out, d_in], 0.0, Decay::Yes)?,
            Init::Identity => {
                let mut t = DenseTensor::zeros(&[d_out, d_in]).with_grad(true);
                for i in 0..d_out.min(d_in) {
                    t.values_mut()[i * d_in + i] = 1.0;
                }
                store.register(format!("{name}.weight"), t, Decay::Yes)?
            }
        };
        let bias = store.filled(format!("{name}.bias"), &[d_out], 0.0, Decay::No)?;
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul_t(x, w)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Layer-norm gain and bias.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.filled(format!("{name}.gain"), &[d], 1.0, Decay::No)?,
            bias: store.filled(format!("{name}.bias"), &[d], 0.0, Decay::No)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, 1e-5)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}
