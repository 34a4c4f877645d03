// SPDX-License-Identifier: Apache-2.0

//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//! `b"MGAF"`, version, entry count, then per entry the name length, the
//! UTF-8 name, the rank, each dimension and the `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{is_running_stat, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MGAF";
pub const VERSION: u32 = 1;

const OPT_M: &str = "optim.m.";
const OPT_V: &str = "optim.v.";
const OPT_STEP: &str = "optim.step";

pub type Entry = (String, Tensor<f32>);

pub fn encode_entries(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    let u = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    u(&mut out, VERSION as usize);
    u(&mut out, entries.len());
    for (name, t) in entries {
        u(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u(&mut out, t.shape.len());
        for &d in &t.shape {
            u(&mut out, d);
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.at)));
        };
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_entries(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut c = Cursor { buf, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflows")))?;
        let bytes = c.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)));
    }
    if c.at != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.at)));
    }
    Ok(out)
}

pub fn write_entries(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode_entries(entries);
    // write-then-rename so an interrupted save leaves the old file intact
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_entries(&buf)
}

fn store_entries(store: &ParamStore<f32>) -> Vec<Entry> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
}

/// Parameters only.
pub fn save_params(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    write_entries(path, &store_entries(store))
}

/// Parameter entries as a detached store; optimizer entries are skipped.
pub fn params_from_entries(entries: &[Entry]) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        if name.starts_with("optim.") {
            continue;
        }
        s.add(name.clone(), t.clone(), !is_running_stat(name));
    }
    s
}

/// Overwrite the values of `store` from a checkpoint with identical
/// parameter names and shapes.
pub fn load_params(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    store.load_from(&params_from_entries(&read_entries(path)?))
}

/// Optimizer state saved next to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: usize,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

pub fn save_training(path: &Path, store: &ParamStore<f32>, opt: &OptimState) -> Result<()> {
    let mut e = store_entries(store);
    for (i, (_, p)) in store.iter().enumerate() {
        e.push((format!("{OPT_M}{}", p.name), opt.m[i].clone()));
        e.push((format!("{OPT_V}{}", p.name), opt.v[i].clone()));
    }
    let step = u32::try_from(opt.step).map_err(|_| Error::Checkpoint("step count overflows".into()))?;
    // two 16-bit halves so the count survives the f32 encoding exactly
    e.push((
        OPT_STEP.into(),
        Tensor::from_vec(&[2], vec![(step >> 16) as f32, (step & 0xffff) as f32]),
    ));
    write_entries(path, &e)
}

/// Restore parameters into `store` and return the optimizer state, or
/// `None` for a parameters-only checkpoint.
pub fn load_training(path: &Path, store: &mut ParamStore<f32>) -> Result<Option<OptimState>> {
    let entries = read_entries(path)?;
    store.load_from(&params_from_entries(&entries))?;
    let Some((_, st)) = entries.iter().find(|(n, _)| n == OPT_STEP) else {
        return Ok(None);
    };
    if st.len() != 2 {
        return Err(Error::Checkpoint("malformed step entry".into()));
    }
    let step = ((st.data[0] as usize) << 16) | st.data[1] as usize;
    let find = |prefix: &str, name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let key = format!("{prefix}{name}");
        let t = entries
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
        if t.shape != shape {
            return Err(Error::Checkpoint(format!("`{key}` has shape {:?}", t.shape)));
        }
        Ok(t)
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (_, p) in store.iter() {
        m.push(find(OPT_M, &p.name, &p.value.shape)?);
        v.push(find(OPT_V, &p.name, &p.value.shape)?);
    }
    Ok(Some(OptimState { step, m, v }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 1e30]), true);
        s.add("a.bn.running_var", Tensor::from_vec(&[2], vec![0.5, 2.0]), false);
        s.add("s", Tensor::scalar(4.0), true);
        s
    }

    #[test]
    fn byte_layout() {
        let b = encode_entries(&[("ab".into(), Tensor::from_vec(&[1], vec![1.0]))]);
        let mut want = b"MGAF".to_vec();
        for v in [1u32, 1, 2] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(b"ab");
        for v in [1u32, 1] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = store();
        save_params(&path, &s).unwrap();
        let mut t = store();
        t.iter_mut().for_each(|p| p.value.data.iter_mut().for_each(|v| *v = 0.0));
        load_params(&path, &mut t).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(t.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert!(load_training(&path, &mut t).unwrap().is_none());

        let bytes = std::fs::read(&path).unwrap();
        assert!(decode_entries(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_entries(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_entries(&extra).is_err());

        let mut other = ParamStore::<f32>::new();
        other.add("a.w", Tensor::zeros(&[3, 2]), true);
        other.add("a.bn.running_var", Tensor::zeros(&[2]), false);
        other.add("s", Tensor::scalar(0.0), true);
        assert!(load_params(&path, &mut other).is_err());
    }

    #[test]
    fn training_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let s = store();
        let st = OptimState {
            step: 123_457,
            m: s.iter().map(|(_, p)| p.value.map(|v| v * 0.5)).collect(),
            v: s.iter().map(|(_, p)| p.value.map(|v| v * v)).collect(),
        };
        save_training(&path, &s, &st).unwrap();
        let mut t = store();
        assert_eq!(load_training(&path, &mut t).unwrap(), Some(st));
    }
}
