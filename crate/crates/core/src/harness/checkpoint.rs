//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BIDN" | version u32
//! vocab section x2 (source, target):
//!     mode u8 (0 word-level, 1 subword) | token count u32 | tokens
//!     | merge count u32 | merges (left, right)
//! tensor count u32
//! tensor, sorted by (partition, name):
//!     name length u32 | name (partition-prefixed UTF-8) | rank u32
//!     | extents u64 x rank | f32 data
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8 bytes. The model shape is
//! recovered from the tensor shapes on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::corpus::write_atomic;
use crate::model::{Model, ModelParameters};
use crate::tensor::Tensor;
use crate::vocab::{MergeTable, Tokenizer, Vocab, RESERVED};

pub const MAGIC: &[u8; 4] = b"BIDN";
pub const VERSION: u32 = 1;

/// A model with its source and target tokenizers.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub src: Tokenizer,
    pub tgt: Tokenizer,
}

impl Checkpoint {
    pub fn new(model: Model, src: Tokenizer, tgt: Tokenizer) -> Result<Self> {
        let c = Checkpoint { model, src, tgt };
        c.check_vocab()?;
        Ok(c)
    }

    fn check_vocab(&self) -> Result<()> {
        let cfg = &self.model.config;
        if cfg.src_vocab != self.src.vocab.len() {
            return Err(Error::Config(format!(
                "source vocabulary has {} entries but the model expects {}",
                self.src.vocab.len(),
                cfg.src_vocab
            )));
        }
        if cfg.tgt_vocab != self.tgt.vocab.len() {
            return Err(Error::Config(format!(
                "target vocabulary has {} entries but the model expects {}",
                self.tgt.vocab.len(),
                cfg.tgt_vocab
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_tokenizer(&mut out, &self.src);
        write_tokenizer(&mut out, &self.tgt);
        let tensors = self.model.params.iter_partitioned();
        put_u32(&mut out, tensors.len() as u32);
        for (_, name, t) in tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error_at(0, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error_at(4, &format!("unsupported version {version}")));
        }
        let src = read_tokenizer(&mut r)?;
        let tgt = read_tokenizer(&mut r)?;
        let n = r.u32("tensor count")?;
        let mut params = ModelParameters::default();
        let mut last: Option<(u8, String)> = None;
        for _ in 0..n {
            let at = r.pos;
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(r.error_at(at, &format!("tensor {name}: implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let e = r.u64("extent")?;
                shape.push(usize::try_from(e).map_err(|_| r.error_at(r.pos - 8, "extent too large"))?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let Some(numel) = numel.filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining())) else {
                return Err(r.error_at(r.pos, &format!("tensor {name}: data truncated")));
            };
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let partition = crate::model::Partition::of(&name).map_err(|e| r.error_at(at, &e.to_string()))?;
            let key = (partition as u8, name.clone());
            if last.as_ref().is_some_and(|l| *l >= key) {
                return Err(r.error_at(at, &format!("tensor {name} out of order")));
            }
            last = Some(key);
            let tensor = Tensor::new(shape, data).map_err(|e| r.error_at(at, &e.to_string()))?;
            params.insert(name, tensor).map_err(|e| r.error_at(at, &e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(r.error_at(r.pos, "trailing bytes"));
        }
        let model = Model::from_params(params).map_err(|e| r.error_at(r.pos, &e.to_string()))?;
        Checkpoint::new(model, src, tgt)
    }

    /// Writes through a temporary file so a failed save leaves no partial
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn write_tokenizer(out: &mut Vec<u8>, t: &Tokenizer) {
    out.push(u8::from(t.merges.is_some()));
    put_u32(out, t.vocab.len() as u32);
    for tok in t.vocab.tokens() {
        put_str(out, tok);
    }
    let pairs = t.merges.as_ref().map_or(&[][..], |m| m.pairs());
    put_u32(out, pairs.len() as u32);
    for (l, r) in pairs {
        put_str(out, l);
        put_str(out, r);
    }
}

fn read_tokenizer(r: &mut Reader) -> Result<Tokenizer> {
    let at = r.pos;
    let mode = r.take(1, "vocab mode")?[0];
    if mode > 1 {
        return Err(r.error_at(at, &format!("unknown vocab mode {mode}")));
    }
    let n = r.u32("token count")?;
    let mut tokens = Vec::new();
    for _ in 0..n {
        tokens.push(r.string("token")?);
    }
    if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
        return Err(r.error_at(at, "vocabulary does not start with the reserved tokens"));
    }
    let vocab = Vocab::from_tokens(tokens.drain(RESERVED.len()..)).map_err(|e| r.error_at(at, &e.to_string()))?;
    let at = r.pos;
    let m = r.u32("merge count")?;
    let mut pairs = Vec::new();
    for _ in 0..m {
        let a = r.string("merge")?;
        let b = r.string("merge")?;
        pairs.push((a, b));
    }
    let merges = match mode {
        0 if m > 0 => return Err(r.error_at(at, "word-level vocabulary with merges")),
        0 => None,
        _ => Some(MergeTable::from_pairs(pairs).map_err(|e| r.error_at(at, &e.to_string()))?),
    };
    Ok(Tokenizer { vocab, merges })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn error_at(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error_at(self.pos, &format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error_at(at, &format!("{what} is not UTF-8")))
    }
}
