//! Single-file binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "AFFCKPT\0" | version u32
//! config text | vocabulary TSV            (u64 length + UTF-8 each)
//! epoch u64 | step u64 | best aIoU f64 (NaN when unset)
//! prototype id count u64 | ids u64...     (u64::MAX count when APA is off)
//! block count u64 | blocks: name, ndim u32, dims u64..., values f64...
//! FNV-1a 64 of everything above
//! ```
//!
//! Blocks are named `param/<name>`, `adam_m/<name>`, `adam_v/<name>`,
//! `proto/value`, `proto/adam_m`, `proto/adam_v`.

use crate::apa::PrototypeSet;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use std::collections::HashMap;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"AFFCKPT\0";
pub const VERSION: u32 = 1;
const NO_PROTOTYPES: u64 = u64::MAX;
const MAX_DIMS: u32 = 2;

/// Adam moments, aligned with the parameter store order, plus the
/// prototype moments when APA is on.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub proto_m: Option<Tensor>,
    pub proto_v: Option<Tensor>,
}

impl OptimizerState {
    /// Zero moments shaped like `model`'s parameters.
    pub fn zeros(model: &ModelState) -> Self {
        let zeros: Vec<Tensor> = model.store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let proto = model.prototypes.as_ref().map(|p| Tensor::zeros(p.prototypes.shape()));
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            proto_m: proto.clone(),
            proto_v: proto,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_aiou: Option<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::invalid("checkpoint", msg)
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated"))?;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).map_or(true, |b| b > left) {
            return Err(corrupt(format!("length {n} exceeds remaining {left} bytes")));
        }
        Ok(n as usize)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let ndim = self.u32()?;
        if ndim == 0 || ndim > MAX_DIMS {
            return Err(corrupt(format!("block `{name}` has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(usize::try_from(self.u64()?).map_err(|_| corrupt("dimension overflow"))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| corrupt(format!("block `{name}` larger than the file")))?;
        let data: Vec<f64> = self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

impl Checkpoint {
    /// A checkpoint of freshly initialized `model` at epoch 0.
    pub fn initial(model: ModelState) -> Self {
        let optimizer = OptimizerState::zeros(&model);
        Self {
            model,
            optimizer,
            epoch: 0,
            best_val_aiou: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.model.config.to_text());
        w.str(&self.model.vocab.to_tsv());
        w.u64(self.epoch as u64);
        w.u64(self.optimizer.step);
        w.f64(self.best_val_aiou.unwrap_or(f64::NAN));
        match &self.model.prototypes {
            Some(p) => {
                w.u64(p.len() as u64);
                for &id in p.ids() {
                    w.u64(id as u64);
                }
            }
            None => w.u64(NO_PROTOTYPES),
        }
        let mut blocks: Vec<(String, &Tensor)> = Vec::new();
        for (i, (_, name, t)) in self.model.store.iter().enumerate() {
            blocks.push((format!("param/{name}"), t));
            blocks.push((format!("adam_m/{name}"), &self.optimizer.m[i]));
            blocks.push((format!("adam_v/{name}"), &self.optimizer.v[i]));
        }
        if let Some(p) = &self.model.prototypes {
            blocks.push(("proto/value".into(), &p.prototypes));
            if let (Some(m), Some(v)) = (&self.optimizer.proto_m, &self.optimizer.proto_v) {
                blocks.push(("proto/adam_m".into(), m));
                blocks.push(("proto/adam_v".into(), v));
            }
        }
        w.u64(blocks.len() as u64);
        for (name, t) in blocks {
            w.tensor(&name, t);
        }
        let sum = fnv1a(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let config = RunConfig::parse(&r.str()?)?;
        let vocab = Vocabulary::from_tsv(&r.str()?)?;
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let best = r.f64()?;
        let ids = match r.u64()? {
            NO_PROTOTYPES => None,
            n => {
                if n.checked_mul(8).map_or(true, |b| b > (body.len() - r.pos) as u64) {
                    return Err(corrupt("prototype id count exceeds file"));
                }
                Some((0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?)
            }
        };
        let count = r.len(1)?;
        let mut blocks: HashMap<String, Tensor> = HashMap::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            if blocks.insert(name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate block `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }

        let mut model = ModelState::new(config, vocab)?;
        let mut take = |name: String, like: &[usize]| -> Result<Tensor> {
            let t = blocks.remove(&name).ok_or_else(|| corrupt(format!("missing block `{name}`")))?;
            if t.shape() != like {
                return Err(corrupt(format!("block `{name}` has shape {:?}, expected {like:?}", t.shape())));
            }
            Ok(t)
        };
        let names: Vec<(String, Vec<usize>)> = model
            .store
            .iter()
            .map(|(_, n, t)| (n.to_owned(), t.shape().to_vec()))
            .collect();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (i, (name, shape)) in names.iter().enumerate() {
            model.store.tensors_mut()[i] = take(format!("param/{name}"), shape)?;
            m.push(take(format!("adam_m/{name}"), shape)?);
            v.push(take(format!("adam_v/{name}"), shape)?);
        }
        let (proto_m, proto_v) = match (model.config.apa, ids) {
            (true, Some(ids)) => {
                let shape = [ids.len(), model.config.dim];
                let value = take("proto/value".into(), &shape)?;
                let pm = take("proto/adam_m".into(), &shape)?;
                let pv = take("proto/adam_v".into(), &shape)?;
                model.prototypes = Some(PrototypeSet::from_parts(value, ids)?);
                (Some(pm), Some(pv))
            }
            (false, None) => (None, None),
            _ => return Err(corrupt("prototype map disagrees with the APA flag")),
        };
        if let Some(extra) = blocks.keys().next() {
            return Err(corrupt(format!("unexpected block `{extra}`")));
        }
        Ok(Self {
            model,
            optimizer: OptimizerState {
                step,
                m,
                v,
                proto_m,
                proto_v,
            },
            epoch,
            best_val_aiou: (!best.is_nan()).then_some(best),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
