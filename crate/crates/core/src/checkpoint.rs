//! Binary envelopes for parameters (`MMCK`) and optimizer state (`MMAS`).
//!
//! `MMCK`: magic, version `u16`, layout hash (32 bytes), count `u64`, the
//! values as little-endian `f64`, then the SHA-256 of everything before it.
//! `MMAS` shares the header and footer; its body is the step counter `u64`,
//! the four hyperparameters as `f64`, the count and the two moment vectors.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Layout, ParamVector};
use crate::optim::{AdamHyper, AdamState};
use crate::scalar::Real;

pub const PARAMS_MAGIC: &[u8; 4] = b"MMCK";
pub const ADAM_MAGIC: &[u8; 4] = b"MMAS";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 32;
const FOOTER: usize = 32;

fn header(magic: &[u8; 4], hash: &[u8; 32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(hash);
    buf
}

fn seal(mut buf: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

fn push_values<S: Real>(buf: &mut Vec<u8>, values: &[S]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

/// Serialize parameters into an `MMCK` envelope.
pub fn encode_params<S: Real>(params: &ParamVector<S>) -> Vec<u8> {
    let mut buf = header(PARAMS_MAGIC, params.spec_hash());
    buf.reserve(8 + 8 * params.len() + FOOTER);
    push_values(&mut buf, params.values());
    seal(buf)
}

/// Hex digest identifying a parameter vector (the `MMCK` footer).
pub fn params_digest<S: Real>(params: &ParamVector<S>) -> String {
    let bytes = encode_params(params);
    hex::encode(&bytes[bytes.len() - FOOTER..])
}

/// Check magic, version and footer of any envelope; returns the magic, the
/// layout hash and the hex footer digest.
pub fn verify_envelope(bytes: &[u8]) -> Result<([u8; 4], [u8; 32], String)> {
    if bytes.len() < HEADER + FOOTER {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if &magic != PARAMS_MAGIC && &magic != ADAM_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let (body, footer) = bytes.split_at(bytes.len() - FOOTER);
    if Sha256::digest(body).as_slice() != footer {
        return Err(Error::Checkpoint("payload digest mismatch".into()));
    }
    let hash: [u8; 32] = bytes[6..HEADER].try_into().expect("length checked");
    Ok((magic, hash, hex::encode(footer)))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values<S: Real>(&mut self, expected: usize, what: &str) -> Result<Vec<S>> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::Checkpoint(format!("{what}: {n} values, layout expects {expected}")));
        }
        (0..n)
            .map(|i| {
                let v = self.f64()?;
                if v.is_finite() {
                    Ok(S::of(v))
                } else {
                    Err(Error::NonFinite {
                        context: what.into(),
                        index: i,
                    })
                }
            })
            .collect()
    }
}

fn open<'a>(bytes: &'a [u8], magic: &[u8; 4], layout: &Layout) -> Result<Cursor<'a>> {
    let (found, hash, _) = verify_envelope(bytes)?;
    if &found != magic {
        return Err(Error::Checkpoint(format!("expected {magic:?}, found {found:?}")));
    }
    crate::nn::params::ensure_hash(layout.hash(), &hash)?;
    Ok(Cursor {
        bytes: &bytes[..bytes.len() - FOOTER],
        pos: HEADER,
    })
}

pub fn decode_params<S: Real>(bytes: &[u8], layout: Arc<Layout>) -> Result<ParamVector<S>> {
    let mut c = open(bytes, PARAMS_MAGIC, &layout)?;
    let values = c.values(layout.len(), "checkpoint")?;
    if c.pos != c.bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    ParamVector::new(layout, values)
}

pub fn save_params<S: Real>(path: impl AsRef<Path>, params: &ParamVector<S>) -> Result<String> {
    let bytes = encode_params(params);
    fs::write(path, &bytes)?;
    Ok(hex::encode(&bytes[bytes.len() - FOOTER..]))
}

pub fn load_params<S: Real>(path: impl AsRef<Path>, layout: Arc<Layout>) -> Result<ParamVector<S>> {
    decode_params(&fs::read(path)?, layout)
}

pub fn encode_adam<S: Real>(state: &AdamState<S>, layout_hash: &[u8; 32]) -> Vec<u8> {
    let mut buf = header(ADAM_MAGIC, layout_hash);
    buf.extend_from_slice(&state.t.to_le_bytes());
    for h in [state.hyper.lr, state.hyper.beta1, state.hyper.beta2, state.hyper.eps] {
        buf.extend_from_slice(&h.as_f64().to_le_bytes());
    }
    push_values(&mut buf, &state.m);
    push_values(&mut buf, &state.v);
    seal(buf)
}

pub fn decode_adam<S: Real>(bytes: &[u8], layout: &Layout) -> Result<AdamState<S>> {
    let mut c = open(bytes, ADAM_MAGIC, layout)?;
    let t = c.u64()?;
    let hyper = AdamHyper {
        lr: S::of(c.f64()?),
        beta1: S::of(c.f64()?),
        beta2: S::of(c.f64()?),
        eps: S::of(c.f64()?),
    };
    let m = c.values(layout.len(), "adam m")?;
    let v = c.values(layout.len(), "adam v")?;
    if c.pos != c.bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(AdamState { m, v, t, hyper })
}
