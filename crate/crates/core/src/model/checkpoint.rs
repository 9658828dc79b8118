//! Binary checkpoint format. Layout is described in `docs/checkpoint.md`.

use std::fs;
use std::path::Path;

use super::{Bert, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MINIBERT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NDIM: usize = 8;

/// Decoded checkpoint contents, not yet checked against a layout.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &Bert<f32>) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<Bert<f32>> {
        Bert::from_params(self.config, self.params)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let c = &self.config;
        for v in [c.vocab_size, c.hidden_dim, c.num_layers, c.num_heads, c.ff_dim, c.max_len] {
            put_u32(&mut out, v as u32);
        }
        out.extend_from_slice(&c.dropout.to_le_bytes());
        out.push(c.tie_mlm_weights as u8);
        put_u32(&mut out, self.params.len() as u32);
        for (_, p) in self.params.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.ndim() as u32);
            for &d in p.value.shape() {
                put_u32(&mut out, d as u32);
            }
            for &x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let dropout = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let tie = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("invalid tie flag {b}"))),
        };
        let config = ModelConfig {
            vocab_size: dims[0],
            hidden_dim: dims[1],
            num_layers: dims[2],
            num_heads: dims[3],
            ff_dim: dims[4],
            max_len: dims[5],
            dropout,
            tie_mlm_weights: tie,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > MAX_NDIM {
                return Err(Error::Checkpoint(format!("parameter {name}: bad rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel = 1usize;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("parameter {name}: shape overflows")))?;
                shape.push(d);
            }
            let nbytes = numel
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name}: shape overflows")))?;
            let raw = r.take(nbytes)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let value = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            params
                .insert(name, value)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, params })
    }
}

impl Bert<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, Checkpoint::from_model(self).encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::decode(&fs::read(path)?)?.into_model()
    }

    /// Fails unless `other` has the same architecture, naming the first
    /// field that differs. Dropout is not part of the architecture.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let a = self.config();
        let fields = [
            ("vocab_size", a.vocab_size, other.vocab_size),
            ("hidden_dim", a.hidden_dim, other.hidden_dim),
            ("num_layers", a.num_layers, other.num_layers),
            ("num_heads", a.num_heads, other.num_heads),
            ("ff_dim", a.ff_dim, other.ff_dim),
            ("max_len", a.max_len, other.max_len),
            ("tie_mlm_weights", a.tie_mlm_weights as usize, other.tie_mlm_weights as usize),
        ];
        match fields.iter().find(|(_, x, y)| x != y) {
            Some((name, x, y)) => Err(Error::Checkpoint(format!(
                "checkpoint {name} is {x} but {y} was requested"
            ))),
            None => Ok(()),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
