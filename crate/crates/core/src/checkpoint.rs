//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "NSE1"  u32 version
//! u8 encoder (0 lstm, 1 nse)  u32 dim  u32 src_vocab  u32 tgt_vocab
//! u8 has_forget_bias  f64 forget_bias
//! vocab src, vocab tgt          u32 count, then (u32 len, utf-8 bytes) each
//! u32 epoch  f64 dev_bleu  f64 dev_sari
//! u32 n_params, then per parameter:
//!     u32 name_len, name, u8 rank, u32 dims[rank], f32 data[numel]
//! u8 has_adam [u64 t, then per parameter f64 m[numel], f64 v[numel]]
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Parameters are stored at `f32` precision. Optimizer moments stay `f64`
//! so resumed training continues exactly.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2Seq};
use crate::tensor::{ParamStore, Tensor};
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"NSE1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    pub epoch: u32,
    pub dev_bleu: f64,
    pub dev_sari: f64,
}

impl Checkpoint {
    pub fn new(model: &Seq2Seq, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Self {
        Checkpoint {
            config: model.config.clone(),
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            params: model.params.clone(),
            adam: None,
            epoch: 0,
            dev_bleu: 0.0,
            dev_sari: 0.0,
        }
    }

    pub fn model(&self) -> Result<Seq2Seq> {
        Seq2Seq::from_params(self.config.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        w.push(match self.config.encoder {
            EncoderKind::Lstm => 0,
            EncoderKind::Nse => 1,
        });
        for n in [
            self.config.dim,
            self.config.src_vocab,
            self.config.tgt_vocab,
        ] {
            put_u32(&mut w, n as u32);
        }
        w.push(u8::from(self.config.forget_bias.is_some()));
        w.extend_from_slice(&self.config.forget_bias.unwrap_or(0.0).to_le_bytes());
        for vocab in [&self.src_vocab, &self.tgt_vocab] {
            put_u32(&mut w, vocab.len() as u32);
            for t in vocab.tokens() {
                put_str(&mut w, t);
            }
        }
        put_u32(&mut w, self.epoch);
        w.extend_from_slice(&self.dev_bleu.to_le_bytes());
        w.extend_from_slice(&self.dev_sari.to_le_bytes());
        put_u32(&mut w, self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            put_str(&mut w, name);
            w.push(t.shape.len() as u8);
            for &d in &t.shape {
                put_u32(&mut w, d as u32);
            }
            for &v in &t.data {
                w.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        match &self.adam {
            None => w.push(0),
            Some(a) => {
                w.push(1);
                w.extend_from_slice(&a.t.to_le_bytes());
                for (m, v) in a.m.iter().zip(&a.v) {
                    for x in m.iter().chain(v) {
                        w.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error_at(4, &format!("unsupported version {version}")));
        }
        if bytes.len() < r.pos + DIGEST_LEN {
            return Err(r.error_at(bytes.len(), "truncated file"));
        }
        let body_end = bytes.len() - DIGEST_LEN;
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(r.error_at(
                body_end,
                "checksum mismatch, file is corrupted or truncated",
            ));
        }
        r.bytes = &bytes[..body_end];

        let at = r.pos;
        let encoder = match r.u8()? {
            0 => EncoderKind::Lstm,
            1 => EncoderKind::Nse,
            k => return Err(r.error_at(at, &format!("unknown encoder tag {k}"))),
        };
        let dim = r.u32()? as usize;
        let src_vocab_size = r.u32()? as usize;
        let tgt_vocab_size = r.u32()? as usize;
        let has_fb = r.u8()? != 0;
        let fb = r.f64()?;
        let config = ModelConfig {
            encoder,
            dim,
            src_vocab: src_vocab_size,
            tgt_vocab: tgt_vocab_size,
            forget_bias: has_fb.then_some(fb),
        };
        let src_vocab = r.vocab(src_vocab_size)?;
        let tgt_vocab = r.vocab(tgt_vocab_size)?;
        let epoch = r.u32()?;
        let dev_bleu = r.f64()?;
        let dev_sari = r.f64()?;

        let mut params = ParamStore::new();
        let n = r.u32()? as usize;
        for _ in 0..n {
            let at = r.pos;
            let name = r.string()?;
            if params.find(&name).is_some() {
                return Err(r.error_at(at, &format!("duplicate parameter {name}")));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if shape.contains(&0) || numel * 4 > r.remaining() {
                return Err(r.error_at(at, &format!("bad shape {shape:?} for {name}")));
            }
            let data = (0..numel)
                .map(|_| r.f32().map(f64::from))
                .collect::<Result<Vec<_>>>()?;
            params.add(name, Tensor::new(shape, data)?);
        }
        let adam = match r.u8()? {
            0 => None,
            _ => {
                let t = r.u64()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for (_, _, p) in params.iter() {
                    let k = p.numel();
                    m.push((0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                    v.push((0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                }
                Some(AdamState { m, v, t })
            }
        };
        if r.remaining() != 0 {
            return Err(r.error_at(r.pos, "trailing bytes"));
        }
        let ckpt = Checkpoint {
            config,
            src_vocab,
            tgt_vocab,
            params,
            adam,
            epoch,
            dev_bleu,
            dev_sari,
        };
        // the layout must match what the architecture expects
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { location, detail } => Error::Format {
                location: format!("{}: {location}", path.display()),
                detail,
            },
            other => other,
        })
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, detail: &str) -> Error {
        Error::Format {
            location: format!("byte offset {offset}"),
            detail: detail.to_string(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error_at(
                self.pos,
                &format!("unexpected end of data reading {n} bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error_at(at, "invalid UTF-8"))
    }

    fn vocab(&mut self, expected: usize) -> Result<Vocabulary> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n != expected {
            return Err(self.error_at(
                at,
                &format!("vocabulary has {n} entries, header says {expected}"),
            ));
        }
        let tokens = (0..n).map(|_| self.string()).collect::<Result<Vec<_>>>()?;
        Vocabulary::from_tokens(tokens).map_err(|e| self.error_at(at, &e.to_string()))
    }
}
