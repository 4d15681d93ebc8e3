//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! magic `GGCN`, `u32` version, config text, label list, embedding backend,
//! parameter manifest (name, trainable flag, rank, `u64` dims), then every
//! parameter's values as `f64` in manifest order. Strings are a `u32` byte
//! length followed by UTF-8.

use std::fs;
use std::path::Path;

use crate::encoder::{EmbeddingProvider, LookupEmbeddings, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::model::{EmbeddingInit, GatedGcnModel};

pub const MAGIC: &[u8; 4] = b"GGCN";
pub const VERSION: u32 = 1;

const MODE_LOOKUP: u8 = 0;
const MODE_CONTEXTUAL: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }

    fn u32(&mut self, x: usize) {
        let x = u32::try_from(x).expect("checkpoint field exceeds u32");
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn u64(&mut self, x: usize) {
        self.0.extend_from_slice(&(x as u64).to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
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
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| Error::Checkpoint("dimension overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn to_bytes(model: &GatedGcnModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.str(&model.config.to_text());
    w.u32(model.labels.len());
    for l in &model.labels {
        w.str(l);
    }
    match &model.provider {
        EmbeddingProvider::Lookup { vocab, table } => {
            w.u8(MODE_LOOKUP);
            w.u8(model.params.get(*table).requires_grad as u8);
            w.u32(vocab.len());
            for word in vocab.words() {
                w.str(word);
            }
        }
        EmbeddingProvider::Contextual { dim } => {
            w.u8(MODE_CONTEXTUAL);
            w.u32(*dim);
        }
    }
    w.u32(model.params.len());
    for (_, name, t) in model.params.iter() {
        w.str(name);
        w.u8(t.requires_grad as u8);
        w.u32(t.shape().len());
        for &d in t.shape() {
            w.u64(d);
        }
    }
    for (_, _, t) in model.params.iter() {
        for v in t.values() {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<GatedGcnModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let config = TrainConfig::from_text(&r.str()?)?;
    let labels = (0..r.u32()?).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let embedding = match r.u8()? {
        MODE_LOOKUP => {
            let trainable = r.u8()? != 0;
            let vocab: Vocab = (0..r.u32()?).map(|_| r.str()).collect::<Result<_>>()?;
            EmbeddingInit::Lookup(LookupEmbeddings {
                // placeholder width; the stored table replaces it below
                table: Tensor::zeros(vec![vocab.len() + 1, 1])?,
                vocab,
                trainable,
            })
        }
        MODE_CONTEXTUAL => EmbeddingInit::Contextual { dim: r.u32()? },
        other => return Err(Error::Checkpoint(format!("unknown embedding mode {other}"))),
    };
    let count = r.u32()?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str()?;
        let trainable = r.u8()? != 0;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        manifest.push((name, trainable, shape));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, trainable, shape) in manifest {
        let len: usize = shape.iter().product();
        let values = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut t =
            Tensor::new(shape, values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        t.requires_grad = trainable;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let embedding = match embedding {
        EmbeddingInit::Lookup(mut lookup) => {
            let stored = tensors
                .iter()
                .find(|(n, _)| n == "embedding.table")
                .ok_or_else(|| Error::Checkpoint("missing embedding.table".into()))?;
            lookup.table = stored.1.clone();
            EmbeddingInit::Lookup(lookup)
        }
        other => other,
    };
    let mut model = GatedGcnModel::new(config, labels, embedding)?;
    if tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            tensors.len(),
            model.params.len()
        )));
    }
    for (name, t) in tensors {
        let slot = model
            .params
            .by_name_mut(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(model)
}

pub fn save(model: &GatedGcnModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<GatedGcnModel> {
    from_bytes(&fs::read(path)?)
}
