//! `VPNX` checkpoints: magic, u32 version, u32 tensor count, then per
//! tensor a u32 name length, the UTF-8 name, a u8 rank, u32 extents and the
//! little-endian f32 payload. All integers are little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use vpnext::ParamStore;
use vpnext_tensor::Tensor;

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"VPNX";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format!("truncated {what} at byte {}", self.pos));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ParamStore<f32>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("bad magic (not a VPNX checkpoint)".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version} (expected {VERSION})"));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| "tensor name is not UTF-8".to_string())?;
        if !seen.insert(name.to_string()) {
            return Err(format!("duplicate tensor `{name}`"));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let shape = (0..rank).map(|_| r.u32("extent").map(|e| e as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or("tensor too large")?, &format!("payload of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        store.insert(name, t).map_err(|e| e.to_string())?;
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(store)
}

pub fn save(params: &ParamStore<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes).map_err(|m| HarnessError::format(path, m))
}
