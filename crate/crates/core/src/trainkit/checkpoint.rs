//! Binary checkpoint container.
//!
//! Layout, all little-endian: magic `L2R1`, `u32` format version, `u32` blob
//! count, then per blob a `u32` name length, the UTF-8 name, a `u64` payload
//! length and the payload; finally an FNV-1a 64-bit hash of every preceding
//! byte. Blob `meta` holds JSON (config, vocabulary, counters, RNG state);
//! `param/<name>` holds a trainable flag, the shape and the values;
//! `moment/<name>` holds the optimizer's first and second moments.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, Moments};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::L2Rec;
use crate::numcore::{Fnv64, ParamStore};
use crate::views::Vocab;

pub const MAGIC: &[u8; 4] = b"L2R1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved configuration as TOML.
    pub config: String,
    pub vocab: Vec<String>,
    pub step: u64,
    pub data_hash: u64,
    pub rng: RngState,
    pub adam_step: u64,
    pub params: Vec<ParamBlob>,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: String,
    vocab: Vec<String>,
    step: u64,
    data_hash: String,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    adam_step: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    let bad = || Error::Checkpoint(format!("bad hex field {s:?}"));
    if !s.len().is_multiple_of(2) {
        return Err(bad());
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2).ok_or_else(bad)?, 16).map_err(|_| bad()))
        .collect()
}

impl Checkpoint {
    pub fn capture(
        cfg: &Config,
        vocab: &Vocab,
        model: &L2Rec,
        opt: &AdamW,
        step: u64,
        rng: RngState,
        data_hash: u64,
    ) -> Result<Self> {
        let params = model
            .store
            .iter()
            .map(|(_, p)| ParamBlob {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.values().to_vec(),
                trainable: p.tensor.requires_grad,
            })
            .collect();
        let moments = opt
            .moments
            .iter()
            .map(|(&id, m)| (model.store.get(id).name.clone(), m.clone()))
            .collect();
        Ok(Self {
            config: cfg.to_toml()?,
            vocab: vocab.tokens().to_vec(),
            step,
            data_hash,
            rng,
            adam_step: opt.step,
            params,
            moments,
        })
    }

    /// Copies every stored parameter into `store`, which must hold exactly
    /// the same names and shapes.
    pub fn load_params(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for blob in &self.params {
            let id = store
                .id(&blob.name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {}", blob.name)))?;
            let t = &mut store.get_mut(id).tensor;
            if t.shape() != blob.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: blob.name.clone(),
                    stored: blob.shape.clone(),
                    expected: t.shape().to_vec(),
                });
            }
            t.values_mut().copy_from_slice(&blob.values);
            store.set_trainable(id, blob.trainable);
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored config and loads the
    /// stored parameters into it, without rerunning backbone pretraining.
    pub fn restore_model(&self) -> Result<L2Rec> {
        let cfg = Config::from_toml(&self.config)?;
        let full = cfg.model();
        let mut shell = full.clone();
        shell.pretrain.steps = 0;
        let mut model = L2Rec::new(&shell, cfg.train.seed)?;
        self.load_params(&mut model.store)?;
        model.cfg = full;
        Ok(model)
    }

    pub fn restore_optimizer(&self, model: &L2Rec) -> Result<AdamW> {
        let cfg = Config::from_toml(&self.config)?;
        let mut opt = AdamW::new(cfg.train.adam);
        opt.step = self.adam_step;
        for (name, m) in &self.moments {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("moments for unknown parameter {name}")))?;
            let n = model.store.tensor(id).numel();
            if m.m.len() != n || m.v.len() != n {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    stored: vec![m.m.len()],
                    expected: vec![n],
                });
            }
            opt.moments.insert(id, m.clone());
        }
        Ok(opt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            data_hash: format!("{:016x}", self.data_hash),
            rng_seed: hex(&self.rng.seed),
            rng_stream: self.rng.stream,
            rng_word_pos: self.rng.word_pos.to_string(),
            adam_step: self.adam_step,
        };
        let mut blobs: Vec<(String, Vec<u8>)> = vec![("meta".into(), serde_json::to_vec(&meta)?)];
        for p in &self.params {
            let mut b = Vec::with_capacity(13 + 8 * (p.shape.len() + p.values.len()));
            b.push(u8::from(p.trainable));
            b.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            p.shape.iter().for_each(|&d| b.extend_from_slice(&(d as u64).to_le_bytes()));
            p.values.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
            blobs.push((format!("param/{}", p.name), b));
        }
        for (name, m) in &self.moments {
            let mut b = Vec::with_capacity(8 + 16 * m.m.len());
            b.extend_from_slice(&(m.m.len() as u64).to_le_bytes());
            m.m.iter().chain(&m.v).for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
            blobs.push((format!("moment/{name}"), b));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, data) in &blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(data);
        }
        let mut h = Fnv64::new();
        h.write(&out);
        out.extend_from_slice(&h.finish().to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic or too short)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut h = Fnv64::new();
        h.write(body);
        if h.finish().to_le_bytes() != tail {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {VERSION}")));
        }
        let n = r.u32()?;
        let mut meta: Option<Meta> = None;
        let mut params = Vec::new();
        let mut moments = BTreeMap::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?
                .to_string();
            let len = r.u64()? as usize;
            let mut b = Reader { buf: r.take(len)?, pos: 0 };
            if name == "meta" {
                meta = Some(serde_json::from_slice(b.buf)?);
            } else if let Some(p) = name.strip_prefix("param/") {
                let trainable = b.take(1)?[0] != 0;
                let rank = b.u32()? as usize;
                let shape = (0..rank).map(|_| b.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let values = b.f64s(shape.iter().product())?;
                params.push(ParamBlob {
                    name: p.to_string(),
                    shape,
                    values,
                    trainable,
                });
            } else if let Some(p) = name.strip_prefix("moment/") {
                let k = b.u64()? as usize;
                let m = b.f64s(k)?;
                let v = b.f64s(k)?;
                moments.insert(p.to_string(), Moments { m, v });
            } else {
                return Err(Error::Checkpoint(format!("unknown blob {name}")));
            }
        }
        let meta = meta.ok_or_else(|| Error::Checkpoint("missing meta blob".into()))?;
        let seed: [u8; 32] = unhex(&meta.rng_seed)?
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let parse_err = |f: &str| Error::Checkpoint(format!("bad {f}"));
        Ok(Self {
            config: meta.config,
            vocab: meta.vocab,
            step: meta.step,
            data_hash: u64::from_str_radix(&meta.data_hash, 16).map_err(|_| parse_err("data_hash"))?,
            rng: RngState {
                seed,
                stream: meta.rng_stream,
                word_pos: meta.rng_word_pos.parse().map_err(|_| parse_err("rng_word_pos"))?,
            },
            adam_step: meta.adam_step,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("blob extends past end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
