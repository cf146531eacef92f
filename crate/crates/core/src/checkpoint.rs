//! Binary checkpoint: `DMCK`, version, config hash, step and a list of named
//! little-endian f32 tensors. Momentum buffers are stored as `momentum/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::diff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::trainer::TrainState;

const MAGIC: &[u8; 4] = b"DMCK";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MOMENTUM: &str = "momentum/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub state: TrainState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let st = &ck.state;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ck.config_hash);
    out.extend_from_slice(&st.step.to_le_bytes());
    put_u32(&mut out, st.params.len() + st.momentum.len())?;
    for (name, t) in st.params.iter() {
        put_tensor(&mut out, name, t)?;
    }
    for (name, t) in &st.momentum {
        put_tensor(&mut out, &format!("{MOMENTUM}{name}"), t)?;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Parse {
            what: "checkpoint".into(),
            detail: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Parse { what: "checkpoint".into(), detail: detail.into() }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let step = r.u64()?;
    let count = r.u32()?;
    let mut params = ParamStore::new(0);
    let mut momentum = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_owned();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(bad(format!("`{name}` has unknown dtype {dtype}")));
        }
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad(format!("`{name}` is too large")))?;
        let data = r.take(n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data)?;
        match name.strip_prefix(MOMENTUM) {
            Some(base) => {
                momentum.insert(base.to_owned(), t);
            }
            None => params.insert(name, t)?,
        }
    }
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    for name in momentum.keys() {
        if !params.contains(name) {
            return Err(bad(format!("momentum for unknown parameter `{name}`")));
        }
    }
    Ok(Checkpoint { config_hash, state: TrainState { params, momentum, step } })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(ck)?).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; a config hash that differs from `expected` is logged
/// as a warning, not rejected.
pub fn load(path: &Path, expected: Option<&[u8; 32]>) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode(&buf)?;
    if let Some(h) = expected {
        if h != &ck.config_hash {
            log::warn!(
                "{} was written under a different config ({} vs {})",
                path.display(),
                hex(&ck.config_hash),
                hex(h)
            );
        }
    }
    Ok(ck)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
