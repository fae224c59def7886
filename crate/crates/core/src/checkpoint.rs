//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "RNNENCDC"
//! version      u32      1
//! config       6 x u64  src_vocab tgt_vocab hidden embed maxout output_rank
//!              u8       cell (0 gated, 1 tanh)
//!              u8       bias (0/1)
//! block count  u32
//! per block:   u32 name length, name bytes (UTF-8),
//!              u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Blocks appear in [`ModelParams::named_blocks`] order. Loading rejects
//! any name or shape that disagrees with the stored config, and any
//! trailing bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CellKind, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"RNNENCDC";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 6 * 8 + 2 + 4;

/// Exact file size for a model with this config.
pub fn encoded_len(cfg: &ModelConfig) -> usize {
    HEADER_LEN
        + ModelParams::zeros(cfg)
            .named_blocks()
            .iter()
            .map(|(name, m)| 4 + name.len() + 16 + 8 * m.len())
            .sum::<usize>()
}

pub fn to_bytes(p: &ModelParams) -> Vec<u8> {
    let cfg = &p.config;
    let mut out = Vec::with_capacity(encoded_len(cfg));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.src_vocab,
        cfg.tgt_vocab,
        cfg.hidden,
        cfg.embed,
        cfg.maxout,
        cfg.output_rank,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.push(match cfg.cell {
        CellKind::Gated => 0,
        CellKind::Tanh => 1,
    });
    out.push(cfg.bias as u8);
    let blocks = p.named_blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, m) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} out of range")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u64("config")?;
    }
    let cell = match r.u8("cell kind")? {
        0 => CellKind::Gated,
        1 => CellKind::Tanh,
        other => return Err(Error::Format(format!("unknown cell kind {other}"))),
    };
    let bias = match r.u8("bias flag")? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad bias flag {other}"))),
    };
    let cfg = ModelConfig {
        src_vocab: dims[0],
        tgt_vocab: dims[1],
        hidden: dims[2],
        embed: dims[3],
        maxout: dims[4],
        output_rank: dims[5],
        cell,
        bias,
    };
    cfg.validate()
        .map_err(|e| Error::Format(format!("invalid config block: {e}")))?;
    // Refuse absurd headers before allocating.
    let expected = encoded_len_checked(&cfg)
        .ok_or_else(|| Error::Format("config block implies an impossible size".into()))?;
    if expected != buf.len() {
        return Err(Error::Format(format!(
            "file holds {} bytes but header declares {expected}",
            buf.len()
        )));
    }

    let mut p = ModelParams::zeros(&cfg);
    let count = r.u32("block count")? as usize;
    let mut blocks = p.named_blocks_mut();
    if count != blocks.len() {
        return Err(Error::Format(format!(
            "expected {} parameter blocks, found {count}",
            blocks.len()
        )));
    }
    for (name, m) in blocks.iter_mut() {
        let len = r.u32("name length")? as usize;
        let got = r.take(len, "block name")?;
        if got != name.as_bytes() {
            return Err(Error::Format(format!(
                "expected block {name}, found {}",
                String::from_utf8_lossy(got)
            )));
        }
        let rows = r.u64("rows")?;
        let cols = r.u64("cols")?;
        if (rows, cols) != m.shape() {
            return Err(Error::Format(format!(
                "block {name} has shape ({rows}, {cols}), config implies {:?}",
                m.shape()
            )));
        }
        let raw = r.take(8 * rows * cols, "block data")?;
        for (dst, chunk) in m.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last block".into()));
    }
    drop(blocks);
    Ok(p)
}

fn encoded_len_checked(cfg: &ModelConfig) -> Option<usize> {
    let (k_s, k_t, n, d, m, r) = (
        cfg.src_vocab,
        cfg.tgt_vocab,
        cfg.hidden,
        cfg.embed,
        cfg.maxout,
        cfg.output_rank,
    );
    let entries = [
        k_s.checked_mul(d)?,
        k_t.checked_mul(d)?,
        n.checked_mul(d)?.checked_mul(6)?,
        n.checked_mul(n)?.checked_mul(9)?,
        n.checked_mul(n)?.checked_mul(2)?,
        n.checked_mul(6)?,
        m.checked_mul(2)?.checked_mul(n.checked_mul(2)?.checked_add(k_t)?)?,
        k_t.checked_mul(r)?,
        r.checked_mul(m)?,
    ]
    .iter()
    .try_fold(0usize, |acc, &x| acc.checked_add(x))?;
    // 1 GiB of parameters is far beyond anything this crate trains.
    if entries > (1 << 27) {
        return None;
    }
    Some(encoded_len(cfg))
}

pub fn save(p: &ModelParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(p)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
