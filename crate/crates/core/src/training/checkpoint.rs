//! Binary checkpoints.
//!
//! All integers are little-endian `u32` unless noted; reals are `f64`.
//!
//! ```text
//! magic        10 bytes  "BACAPCKPT1"
//! version      u32       1
//! config       5 x u32   input_dim, embed_dim, hidden_dim, word_dim, vocab_size
//! vocabulary   u32 count, then per token: u32 byte length + UTF-8 bytes
//! parameters   tensor block
//! optimizer    u8 flag (0 = absent, 1 = present), and when present:
//!              f64 rho, f64 eps, f64 lr, u64 steps,
//!              tensor block E[g^2], tensor block E[dx^2]
//!
//! tensor block u32 count, then per tensor:
//!              u32 name length + UTF-8 name, u32 rows, u32 cols,
//!              rows * cols f64 values, row-major
//! ```
//!
//! Tensors appear in the model's fixed traversal order (vectors as `dim x 1`)
//! and loading checks every name and shape against that order, so a file
//! written by [`Checkpoint::save`] and read back reproduces the same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Shape};

use super::{Adadelta, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 10] = b"BACAPCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub optimizer: Option<Adadelta<ModelParams>>,
}

impl Checkpoint {
    pub fn new(
        vocab: Vocabulary,
        params: ModelParams,
        optimizer: Option<Adadelta<ModelParams>>,
    ) -> Result<Self> {
        if vocab.len() != params.config().vocab_size {
            return Err(Error::invalid(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                params.config().vocab_size
            )));
        }
        Ok(Checkpoint {
            vocab,
            params,
            optimizer,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.params.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        let c = self.config();
        for d in [c.input_dim, c.embed_dim, c.hidden_dim, c.word_dim, c.vocab_size] {
            put_u32(&mut w, d as u32);
        }
        put_u32(&mut w, self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            put_str(&mut w, t);
        }
        put_tensors(&mut w, &self.params);
        match &self.optimizer {
            None => w.push(0),
            Some(opt) => {
                w.push(1);
                for v in [opt.rho, opt.eps, opt.lr] {
                    w.extend_from_slice(&v.to_le_bytes());
                }
                w.extend_from_slice(&opt.steps.to_le_bytes());
                put_tensors(&mut w, &opt.sq_grad);
                put_tensors(&mut w, &opt.sq_update);
            }
        }
        w
    }

    /// Parses a checkpoint image; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.fail_at(0, "bad magic, expected BACAPCKPT1"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail_at(10, &format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let cfg = ModelConfig {
            input_dim: dims[0],
            embed_dim: dims[1],
            hidden_dim: dims[2],
            word_dim: dims[3],
            vocab_size: dims[4],
        };
        let vocab_at = r.pos;
        let count = r.u32()? as usize;
        if count != cfg.vocab_size {
            return Err(r.fail_at(vocab_at, &format!(
                "vocabulary holds {count} tokens, header says {}",
                cfg.vocab_size
            )));
        }
        let mut tokens = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            tokens.push(r.string()?);
        }
        let vocab = Vocabulary::from_tokens(tokens).map_err(|e| r.fail_at(vocab_at, &e.to_string()))?;

        let mut params = ModelParams::zeros(&cfg);
        r.tensors(&mut params)?;
        let flag_at = r.pos;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let rho = r.f64()?;
                let eps = r.f64()?;
                let lr = r.f64()?;
                let steps = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let mut opt = Adadelta::with_hyper(&params, rho, eps, lr);
                opt.steps = steps;
                r.tensors(&mut opt.sq_grad)?;
                r.tensors(&mut opt.sq_update)?;
                Some(opt)
            }
            f => return Err(r.fail_at(flag_at, &format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(r.fail_at(r.pos, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            vocab,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_tensors(w: &mut Vec<u8>, p: &impl ParamSet) {
    put_u32(w, p.layout().len() as u32);
    p.visit("", &mut |name, shape, data| {
        put_str(w, name);
        put_u32(w, shape.rows as u32);
        put_u32(w, shape.cols as u32);
        for v in data {
            w.extend_from_slice(&v.to_le_bytes());
        }
    });
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn fail_at(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: offset as u64,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail_at(self.bytes.len(), &format!("truncated: needed {n} bytes at offset {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail_at(at, "invalid UTF-8"))
    }

    /// Reads a tensor block into `p`, which fixes the expected names and shapes.
    fn tensors(&mut self, p: &mut impl ParamSet) -> Result<()> {
        let expected = p.layout();
        let at = self.pos;
        let count = self.u32()? as usize;
        if count != expected.len() {
            return Err(self.fail_at(at, &format!("{count} tensors, expected {}", expected.len())));
        }
        let mut values = Vec::with_capacity(p.num_params());
        for (want_name, want_shape) in &expected {
            let at = self.pos;
            let name = self.string()?;
            let shape = Shape {
                rows: self.u32()? as usize,
                cols: self.u32()? as usize,
            };
            if &name != want_name || shape != *want_shape {
                return Err(self.fail_at(at, &format!(
                    "tensor {name:?} {shape}, expected {want_name:?} {want_shape}"
                )));
            }
            for _ in 0..shape.len() {
                values.push(self.f64()?);
            }
        }
        p.assign_flat(&values)
    }
}
