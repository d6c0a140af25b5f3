//! Binary checkpoint format.
//!
//! All integers and floats are little-endian; strings are UTF-8 preceded by
//! their byte length.
//!
//! ```text
//! magic        8 bytes   "CEDUALCK"
//! version      u32       1
//! model config u64 len + TOML text
//! run config   u64 len + text (opaque; may be empty)
//! vocabulary   u64 count, then per token: u32 len + bytes
//! seed         u64
//! step         u64
//! params       u32 count, then per parameter:
//!                u32 len + name, u32 ndim, ndim × u64 dims, numel × f64
//! statistics   same layout as params (running, non-trained values)
//! ```
//!
//! Parameters appear in the model's canonical order and nothing time- or
//! host-dependent is recorded, so equal models give byte-identical files.

use std::fs;
use std::path::Path;

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{CedualModel, ModelConfig};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"CEDUALCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CedualModel,
    pub vocab: Vocabulary,
    pub seed: u64,
    pub step: u64,
    /// The full run configuration the model was trained with.
    pub run_config: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = toml::to_string(self.model.config()).expect("model config serializes");
        put_long_str(&mut out, &config);
        put_long_str(&mut out, &self.run_config);
        out.extend_from_slice(&(self.vocab.len() as u64).to_le_bytes());
        for t in self.vocab.tokens() {
            put_str(&mut out, t);
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_store(&mut out, self.model.params());
        put_store(&mut out, self.model.buffers());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let config_text = r.long_str()?;
        let config: ModelConfig = toml::from_str(&config_text)
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let run_config = r.long_str()?;
        let n_tokens = r.u64()? as usize;
        let mut tokens = Vec::with_capacity(n_tokens.min(1 << 20));
        for _ in 0..n_tokens {
            tokens.push(r.str()?);
        }
        let vocab = Vocabulary::from_full_tokens(tokens)
            .map_err(|e| Error::Checkpoint(format!("bad vocabulary: {e}")))?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let seed = r.u64()?;
        let step = r.u64()?;
        let params = r.store()?;
        let buffers = r.store()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - r.pos
            )));
        }
        let model = CedualModel::from_parts(config, params, buffers)?;
        Ok(Self {
            model,
            vocab,
            seed,
            step,
            run_config,
        })
    }

    /// Writes via a temporary file and rename, so an existing checkpoint is
    /// never left half-written.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_long_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_store(out: &mut Vec<u8>, store: &ParamStore) {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        put_str(out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.utf8(n)
    }

    fn long_str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        self.utf8(n)
    }

    fn store(&mut self) -> Result<ParamStore> {
        let count = self.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = self.str()?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: tensor too large")))?;
            let data = self
                .take(numel)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            store.insert(name, tensor)?;
        }
        Ok(store)
    }
}
