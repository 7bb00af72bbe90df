//! Binary checkpoint container.
//!
//! ```text
//! magic     8 bytes  "SPS4CKPT"
//! version   u32
//! header    u64 length + JSON (run config, epoch, best score, history)
//! params    u32 count, then per tensor:
//!           u32 name length, name, u8 trainable, u32 rank, u64 dims…, f64 data…
//! optimizer u8 present; if 1: u64 step, f64 lr/beta1/beta2/eps, f64 m…, f64 v…
//! checksum  32-byte SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian; tensors are row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::{OptimState, RadamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPS4CKPT";
pub const VERSION: u32 = 1;

/// Per-epoch training record, also written to the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_si_snr: f64,
    pub val_si_snr_noisy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_si_snr: Option<f64>,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ParamStore,
    pub optim: Option<OptimState>,
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(b: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{what}: size overflow")))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, VERSION);
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        put_u64(&mut b, header.len() as u64);
        b.extend_from_slice(&header);
        put_u32(&mut b, self.params.len() as u32);
        for p in self.params.iter() {
            put_u32(&mut b, p.name.len() as u32);
            b.extend_from_slice(p.name.as_bytes());
            b.push(p.trainable as u8);
            put_u32(&mut b, p.value.rank() as u32);
            for &d in p.value.shape() {
                put_u64(&mut b, d as u64);
            }
            put_f64s(&mut b, p.value.data());
        }
        match &self.optim {
            None => b.push(0),
            Some(o) => {
                b.push(1);
                put_u64(&mut b, o.step);
                put_f64s(&mut b, &[o.config.lr, o.config.beta1, o.config.beta2, o.config.eps]);
                for m in &o.m {
                    put_f64s(&mut b, m);
                }
                for v in &o.v {
                    put_f64s(&mut b, v);
                }
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("checkpoint version {version} is not supported (expected {VERSION})")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let hlen = r.u64("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32("parameter count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(nlen, "name")?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let trainable = r.u8("trainable flag")? != 0;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflow")))?;
            let data = r.f64s(n, &name)?;
            params
                .add(name, Tensor::new(shape, data)?, trainable)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let optim = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let c = r.f64s(4, "optimizer config")?;
                let config = RadamConfig { lr: c[0], beta1: c[1], beta2: c[2], eps: c[3] };
                let sizes: Vec<usize> = params.iter().map(|p| p.value.numel()).collect();
                let m = sizes.iter().map(|&n| r.f64s(n, "first moment")).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| r.f64s(n, "second moment")).collect::<Result<Vec<_>>>()?;
                Some(OptimState { config, step, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { header, params, optim })
    }

    /// Write through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
