//! Binary checkpoints. The byte layout is documented in
//! `docs/checkpoint-format.md`; all integers and floats are little-endian.

use std::path::Path;

use thiserror::Error;

use super::{Model, ModelSpec};
use crate::error::{KwsError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LKWSCKPT";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint has unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("checkpoint is missing parameter {0:?}")]
    MissingParameter(String),
    #[error("parameter {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint was saved for a different model spec:\nexpected:\n{expected}found:\n{found}")]
    SpecMismatch { expected: String, found: String },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Training state stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub epoch: u32,
    pub seed: u64,
    pub best_val_loss: f64,
    pub class_names: Vec<String>,
    /// Optimizer momentum buffers keyed by parameter name.
    pub velocity: Vec<(String, Tensor)>,
}

enum Entry {
    F64(Tensor),
    U64(Vec<usize>, Vec<u64>),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn short_str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn header(&mut self, name: &str, dtype: u8, shape: &[usize]) {
        self.short_str(name);
        self.u8(dtype);
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(d as u32);
        }
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.header(name, DTYPE_F64, t.shape());
        for &x in t.data() {
            self.f64(x);
        }
    }
    fn table<'a>(&mut self, entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) {
        self.u32(entries.len() as u32);
        for (n, t) in entries {
            self.tensor(n, t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &'static str) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn string(&mut self, len: usize, what: &'static str) -> std::result::Result<String, CheckpointError> {
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
    fn entry(&mut self) -> std::result::Result<(String, Entry), CheckpointError> {
        let len = self.u16("parameter name length")? as usize;
        let name = self.string(len, "parameter name")?;
        let dtype = self.u8("dtype")?;
        let rank = self.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: extents overflow")))?;
        let raw = self.take(bytes, "tensor data")?;
        let words = raw.chunks_exact(8).map(|c| c.try_into().unwrap());
        let e = match dtype {
            DTYPE_F64 => {
                let data = words.map(f64::from_le_bytes).collect();
                Entry::F64(
                    Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?,
                )
            }
            DTYPE_U64 => Entry::U64(shape, words.map(u64::from_le_bytes).collect()),
            d => return Err(CheckpointError::Malformed(format!("{name}: unknown dtype code {d}"))),
        };
        Ok((name, e))
    }
    fn table(&mut self) -> std::result::Result<Vec<(String, Entry)>, CheckpointError> {
        let n = self.u32("table length")?;
        (0..n).map(|_| self.entry()).collect()
    }
}

/// Serializes weights, running statistics, spec and training metadata.
pub fn to_bytes(model: &Model, meta: &TrainingMeta) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let p = model.params();
    w.u32((p.len() + 3 * p.num_norms()) as u32);
    for (n, t) in p.iter() {
        w.tensor(n, t);
    }
    for (n, s) in p.norms() {
        let c = s.channels();
        w.tensor(&format!("{n}.running_mean"), &Tensor::from_parts(vec![c], s.mean.clone()));
        w.tensor(&format!("{n}.running_var"), &Tensor::from_parts(vec![c], s.var.clone()));
        w.header(&format!("{n}.num_batches"), DTYPE_U64, &[1]);
        w.u64(s.updates);
    }
    let spec = model.spec().to_text();
    w.u32(spec.len() as u32);
    w.0.extend_from_slice(spec.as_bytes());
    w.u32(meta.epoch);
    w.u64(meta.seed);
    w.f64(meta.best_val_loss);
    w.u32(meta.class_names.len() as u32);
    for c in &meta.class_names {
        w.short_str(c);
    }
    w.table(meta.velocity.iter().map(|(n, t)| (n.as_str(), t)));
    w.0
}

/// Parses a checkpoint. When `expected` is given, a different stored spec is
/// rejected before any weights are used.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelSpec>) -> Result<(Model, TrainingMeta)> {
    Ok(parse(bytes, expected)?)
}

fn parse(bytes: &[u8], expected: Option<&ModelSpec>) -> std::result::Result<(Model, TrainingMeta), CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated("magic")
        } else {
            CheckpointError::BadMagic
        });
    }
    if r.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION });
    }
    let entries = r.table()?;
    let spec_len = r.u32("spec length")? as usize;
    let spec_text = r.string(spec_len, "spec")?;
    let epoch = r.u32("epoch")?;
    let seed = r.u64("seed")?;
    let best_val_loss = r.f64("best validation loss")?;
    let n_classes = r.u32("class count")?;
    let mut class_names = Vec::with_capacity(n_classes as usize);
    for _ in 0..n_classes {
        let len = r.u16("class name length")? as usize;
        class_names.push(r.string(len, "class name")?);
    }
    let velocity_entries = r.table()?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }

    let spec = ModelSpec::from_text(&spec_text).map_err(|e| CheckpointError::Malformed(format!("spec: {e}")))?;
    if let Some(exp) = expected {
        if *exp != spec {
            return Err(CheckpointError::SpecMismatch { expected: exp.to_text(), found: spec_text });
        }
    }
    let mut model = Model::build(&spec, 0).map_err(|e| CheckpointError::Malformed(format!("spec: {e}")))?;
    let store = model.params_mut();
    let mut seen_t = vec![false; store.len()];
    let mut seen_n = vec![[false; 3]; store.num_norms()];
    for (name, e) in entries {
        if let Some(id) = store.find(&name) {
            let Entry::F64(t) = e else {
                return Err(CheckpointError::Malformed(format!("{name}: expected f64 data")));
            };
            let want = store.get(id).shape().to_vec();
            if t.shape() != want.as_slice() {
                return Err(CheckpointError::ShapeMismatch { name, expected: want, found: t.shape().to_vec() });
            }
            *store.get_mut(id) = t;
            seen_t[id.0] = true;
            continue;
        }
        let norm = ["running_mean", "running_var", "num_batches"]
            .iter()
            .enumerate()
            .find_map(|(i, suffix)| {
                let base = name.strip_suffix(suffix)?.strip_suffix('.')?;
                store.find_norm(base).map(|id| (id, i))
            });
        let Some((id, field)) = norm else {
            return Err(CheckpointError::UnknownParameter(name));
        };
        let stats = store.norm_mut(id);
        let c = stats.channels();
        match (field, e) {
            (0 | 1, Entry::F64(t)) if t.shape() == [c] => {
                let v = t.into_data();
                if field == 0 {
                    stats.mean = v;
                } else {
                    stats.var = v;
                }
            }
            (2, Entry::U64(shape, v)) if shape == [1] => stats.updates = v[0],
            (_, Entry::F64(t)) => {
                return Err(CheckpointError::ShapeMismatch { name, expected: vec![c], found: t.shape().to_vec() })
            }
            _ => return Err(CheckpointError::Malformed(format!("{name}: wrong dtype or shape"))),
        }
        seen_n[id.0][field] = true;
    }
    if let Some(i) = seen_t.iter().position(|s| !s) {
        return Err(CheckpointError::MissingParameter(store.name(super::ParamId(i)).to_string()));
    }
    for (i, (name, _)) in store.norms().enumerate() {
        if let Some(f) = seen_n[i].iter().position(|s| !s) {
            let suffix = ["running_mean", "running_var", "num_batches"][f];
            return Err(CheckpointError::MissingParameter(format!("{name}.{suffix}")));
        }
    }
    let mut velocity = Vec::with_capacity(velocity_entries.len());
    for (name, e) in velocity_entries {
        let Some(id) = store.find(&name) else {
            return Err(CheckpointError::UnknownParameter(name));
        };
        let Entry::F64(t) = e else {
            return Err(CheckpointError::Malformed(format!("velocity {name}: expected f64 data")));
        };
        if t.shape() != store.get(id).shape() {
            let expected = store.get(id).shape().to_vec();
            return Err(CheckpointError::ShapeMismatch { name, expected, found: t.shape().to_vec() });
        }
        velocity.push((name, t));
    }
    let meta = TrainingMeta { epoch, seed, best_val_loss, class_names, velocity };
    Ok((model, meta))
}

pub fn save(path: &Path, model: &Model, meta: &TrainingMeta) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta)).map_err(|e| KwsError::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, TrainingMeta)> {
    let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
    from_bytes(&bytes, None)
}

/// Loads a checkpoint that must have been saved for `spec`.
pub fn load_for(path: &Path, spec: &ModelSpec) -> Result<(Model, TrainingMeta)> {
    let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
    from_bytes(&bytes, Some(spec))
}
