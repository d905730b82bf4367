//! Binary checkpoint format.
//!
//! Layout (little-endian):
//! ```text
//! magic      8 bytes  "GLIDECKP"
//! version    u32      1
//! n_layers   u32      N_T for a target, N_D for a draft
//! heads      u32      target heads h
//! head_dim   u32      target d_k
//! model_dim  u32      d_D for a draft, h*d_k for a target
//! vocab      u32
//! block_len  u32      L for a draft, 0 for a target
//! blocks...  u32 name_len, name, u32 rows, u32 cols, rows*cols f64
//! ```
//! Architecture values not in the header travel as 1x1 `config.*` blocks.

use std::fs;
use std::path::Path;

use super::config::{GlideConfig, TargetConfig};
use super::{Decoder, DraftModel, TargetModel};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"GLIDECKP";
pub const VERSION: u32 = 1;

const KIND_TARGET: f64 = 0.0;
const KIND_GLIDE: f64 = 1.0;
const KIND_VANILLA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Target(TargetModel),
    Draft(DraftModel),
}

/// Header fields as stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub n_layers: u32,
    pub heads: u32,
    pub head_dim: u32,
    pub model_dim: u32,
    pub vocab: u32,
    pub block_length: u32,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, m.rows() as u32);
    put_u32(out, m.cols() as u32);
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn scalar(v: f64) -> Matrix {
    Matrix::filled(1, 1, v)
}

fn encode(header: Header, config: &[(&str, f64)], decoder: &Decoder) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for v in [
        header.n_layers,
        header.heads,
        header.head_dim,
        header.model_dim,
        header.vocab,
        header.block_length,
    ] {
        put_u32(&mut out, v);
    }
    for (name, v) in config {
        put_block(&mut out, &format!("config.{name}"), &scalar(*v));
    }
    for (name, m) in decoder.named_params() {
        put_block(&mut out, &name, m);
    }
    out
}

impl TargetModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.cfg;
        let header = Header {
            n_layers: c.n_layers as u32,
            heads: c.n_heads as u32,
            head_dim: c.head_dim as u32,
            model_dim: c.model_dim() as u32,
            vocab: c.vocab as u32,
            block_length: 0,
        };
        encode(
            header,
            &[
                ("kind", KIND_TARGET),
                ("ffn_dim", c.ffn_dim as f64),
                ("max_seq", c.max_seq as f64),
            ],
            &self.decoder,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match load_checkpoint(path)? {
            Checkpoint::Target(t) => Ok(t),
            Checkpoint::Draft(_) => Err(Error::Format("expected a target checkpoint, found a draft".into())),
        }
    }
}

impl DraftModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.cfg;
        let header = Header {
            n_layers: c.n_layers as u32,
            heads: c.target.n_heads as u32,
            head_dim: c.target.head_dim as u32,
            model_dim: c.draft_dim as u32,
            vocab: c.target.vocab as u32,
            block_length: c.block_length as u32,
        };
        let kind = if c.cross_attention { KIND_GLIDE } else { KIND_VANILLA };
        encode(
            header,
            &[
                ("kind", kind),
                ("ffn_dim", c.ffn_dim as f64),
                ("max_seq", c.target.max_seq as f64),
                ("draft_heads", c.draft_heads as f64),
                ("target_layers", c.target.n_layers as f64),
                ("target_ffn_dim", c.target.ffn_dim as f64),
            ],
            &self.decoder,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match load_checkpoint(path)? {
            Checkpoint::Draft(d) => Ok(d),
            Checkpoint::Target(_) => Err(Error::Format("expected a draft checkpoint, found a target".into())),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.at == self.buf.len()
    }
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader { buf: bytes, at: 0 };
    read_header_from(&mut r)
}

fn read_header_from(r: &mut Reader<'_>) -> Result<Header> {
    if r.take(8).map_err(|_| Error::Format("missing magic".into()))? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    Ok(Header {
        n_layers: r.u32()?,
        heads: r.u32()?,
        head_dim: r.u32()?,
        model_dim: r.u32()?,
        vocab: r.u32()?,
        block_length: r.u32()?,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, at: 0 };
    let header = read_header_from(&mut r)?;
    let mut blocks: Vec<(String, Matrix)> = Vec::new();
    while !r.done() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.push((name, Matrix::new(rows, cols, data)?));
    }
    let config = |key: &str| -> Result<usize> {
        let full = format!("config.{key}");
        blocks
            .iter()
            .find(|(n, _)| *n == full)
            .map(|(_, m)| m.get(0, 0) as usize)
            .ok_or_else(|| Error::Format(format!("missing {full}")))
    };
    let kind = config("kind")? as f64;
    let h = header;
    let mut decoder = if kind == KIND_TARGET {
        let cfg = TargetConfig {
            n_layers: h.n_layers as usize,
            n_heads: h.heads as usize,
            head_dim: h.head_dim as usize,
            vocab: h.vocab as usize,
            max_seq: config("max_seq")?,
            ffn_dim: config("ffn_dim")?,
        };
        if cfg.model_dim() != h.model_dim as usize {
            return Err(Error::Format("target model_dim disagrees with heads x head_dim".into()));
        }
        Checkpoint::Target(TargetModel::new(cfg, 0)?)
    } else if kind == KIND_GLIDE || kind == KIND_VANILLA {
        let target = TargetConfig {
            n_layers: config("target_layers")?,
            n_heads: h.heads as usize,
            head_dim: h.head_dim as usize,
            vocab: h.vocab as usize,
            max_seq: config("max_seq")?,
            ffn_dim: config("target_ffn_dim")?,
        };
        let cfg = GlideConfig {
            n_layers: h.n_layers as usize,
            draft_dim: h.model_dim as usize,
            draft_heads: config("draft_heads")?,
            ffn_dim: config("ffn_dim")?,
            block_length: h.block_length as usize,
            cross_attention: kind == KIND_GLIDE,
            target,
        };
        Checkpoint::Draft(DraftModel::new(cfg, 0)?)
    } else {
        return Err(Error::Format(format!("unknown model kind {kind}")));
    };
    let dec = match &mut decoder {
        Checkpoint::Target(t) => &mut t.decoder,
        Checkpoint::Draft(d) => &mut d.decoder,
    };
    let names: Vec<String> = dec.named_params().into_iter().map(|(n, _)| n).collect();
    let params: Vec<&(String, Matrix)> = blocks.iter().filter(|(n, _)| !n.starts_with("config.")).collect();
    if params.len() != names.len() {
        return Err(Error::Format(format!(
            "expected {} parameter blocks, found {}",
            names.len(),
            params.len()
        )));
    }
    for ((slot, name), (found_name, m)) in dec.params_mut().into_iter().zip(&names).zip(params) {
        if name != found_name {
            return Err(Error::Format(format!("expected block {name}, found {found_name}")));
        }
        if slot.shape() != m.shape() {
            return Err(Error::Dimension {
                name: name.clone(),
                expected: slot.shape(),
                found: m.shape(),
            });
        }
        *slot = m.clone();
    }
    Ok(decoder)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glide() -> DraftModel {
        let target = TargetConfig {
            n_layers: 2,
            n_heads: 4,
            head_dim: 16,
            vocab: 64,
            max_seq: 64,
            ffn_dim: 32,
        };
        DraftModel::new(
            GlideConfig {
                n_layers: 1,
                draft_dim: 64,
                draft_heads: 4,
                ffn_dim: 32,
                block_length: 5,
                cross_attention: true,
                target,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let g = glide();
        let bytes = g.to_bytes();
        let back = match from_bytes(&bytes).unwrap() {
            Checkpoint::Draft(d) => d,
            _ => panic!("kind"),
        };
        assert_eq!(back, g);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_declares_dims() {
        let h = read_header(&glide().to_bytes()).unwrap();
        assert_eq!(
            h,
            Header {
                n_layers: 1,
                heads: 4,
                head_dim: 16,
                model_dim: 64,
                vocab: 64,
                block_length: 5
            }
        );
    }

    #[test]
    fn corrupted_inputs_rejected() {
        let mut bytes = glide().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = glide().to_bytes();
        bytes[8] = 2;
        assert!(matches!(from_bytes(&bytes), Err(Error::Version { found: 2, .. })));
        let bytes = glide().to_bytes();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
