//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `XMTLCKPT`, u32 version, u64-prefixed JSON header (config, vocab,
//! step, best validation loss), u32 parameter count, then per parameter a
//! u32-prefixed name, u32 rank, u64 dims and f64 values, then the optimizer
//! step and moment vectors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Vocab;
use crate::error::{Error, Result};
use crate::numeric::{Adam, ParamStore, Rng, Tensor};

use super::config::ExperimentConfig;
use super::pipeline::Pipeline;

pub const MAGIC: &[u8; 8] = b"XMTLCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    languages: Vec<String>,
    content: Vec<String>,
    label: String,
    step: u64,
    best_valid: f64,
    learning_rate: f64,
}

/// A trained model with the state needed to resume or evaluate it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub vocab: Vocab,
    /// Which run produced it: a language pair or `multi`.
    pub label: String,
    pub store: ParamStore,
    pub adam: Adam,
    pub step: u64,
    /// Validation loss at `step`, the lowest seen under `learning_rate`.
    pub best_valid: f64,
    pub learning_rate: f64,
}

fn content_tokens(vocab: &Vocab) -> Vec<String> {
    (vocab.content_start()..vocab.len()).filter_map(|i| vocab.token(i).map(str::to_string)).collect()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(corrupt("file is truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len() / 8 + 1).ok_or_else(|| corrupt(format!("implausible length {n}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            languages: self.vocab.languages().to_vec(),
            content: content_tokens(&self.vocab),
            label: self.label.clone(),
            step: self.step,
            best_valid: self.best_valid,
            learning_rate: self.learning_rate,
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * 3 * self.store.total_numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, p) in self.store.iter() {
            out.extend_from_slice(&(p.name().len() as u32).to_le_bytes());
            out.extend_from_slice(p.name().as_bytes());
            let shape = p.value().shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, p.value().data());
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&(self.adam.first.len() as u32).to_le_bytes());
        for (m, v) in self.adam.first.iter().zip(&self.adam.second) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
        Ok(out)
    }

    /// Decodes a checkpoint, rebuilding the model from its stored config and
    /// overwriting every parameter with the stored values.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Checkpoint, Pipeline)> {
        let mut r = Reader { buf: bytes };
        if r.take(8)? != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic bytes)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("format version {version} is not supported (expected {VERSION})")));
        }
        let n = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(n)?).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let vocab = Vocab::new(&header.languages, &header.content)?;
        let mut store = ParamStore::new();
        let pipeline = Pipeline::new(header.config.model.resolved(&vocab), &mut store, &Rng::new(0))?;
        let count = r.u32()? as usize;
        if count != store.len() {
            return Err(corrupt(format!("{count} stored parameters but the model has {}", store.len())));
        }
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let value = Tensor::new(shape, r.f64s(numel)?)?;
            let id = store.id(&name).ok_or_else(|| corrupt(format!("unknown parameter `{name}`")))?;
            let p = store.get_mut(id);
            if p.value().shape() != value.shape() {
                return Err(corrupt(format!("`{name}` has shape {:?}, model expects {:?}", value.shape(), p.value().shape())));
            }
            *p.value_mut() = value;
        }
        let mut adam = Adam::new(&store, header.config.training.adam.clone());
        adam.step = r.u64()?;
        let moments = r.u32()? as usize;
        if moments != store.len() {
            return Err(corrupt("optimizer state does not match the parameters"));
        }
        for i in 0..moments {
            let len = r.len()?;
            adam.first[i] = r.f64s(len)?;
            adam.second[i] = r.f64s(len)?;
        }
        if !r.buf.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", r.buf.len())));
        }
        let ck = Checkpoint {
            config: header.config,
            vocab,
            label: header.label,
            store,
            adam,
            step: header.step,
            best_valid: header.best_valid,
            learning_rate: header.learning_rate,
        };
        Ok((ck, pipeline))
    }

    /// Atomic save: writes a sibling temporary file, then renames it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Checkpoint, Pipeline)> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
