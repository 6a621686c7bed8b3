//! Named-tensor checkpoints.
//!
//! Layout, little-endian: `EVDP`, version `u32`, record count `u32`, then per
//! record the name length `u32`, UTF-8 name, rank `u32`, dims as `u32`s and
//! the raw `f32` payload. A trailing `u64` FNV-1a hash covers every payload
//! byte. Optimizer moments live under `opt/m/<name>` and `opt/v/<name>`,
//! the step counter under `opt/step`.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{ModuleSet, ParamStore};
use crate::train::optim::{AdamW, OptimConfig};
use crate::util::Fnv64;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVDP";
pub const CHECKPOINT_VERSION: u32 = 1;

const OPT_STEP: &str = "opt/step";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, optim: Option<&AdamW>) -> Self {
        let mut tensors: Vec<(String, Tensor)> = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        if let Some(opt) = optim {
            for (id, mo) in opt.tracked() {
                let name = &store.get(id).name;
                tensors.push((format!("opt/m/{name}"), mo.m.clone()));
                tensors.push((format!("opt/v/{name}"), mo.v.clone()));
            }
            let step = Tensor::new(vec![2], split_u64(opt.step)).expect("two lanes");
            tensors.push((OPT_STEP.to_string(), step));
        }
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut hash = Fnv64::new();
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                let b = v.to_le_bytes();
                hash.write(&b);
                out.extend_from_slice(&b);
            }
        }
        out.extend_from_slice(&hash.finish().to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic, not an EVDP checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut hash = Fnv64::new();
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            hash.write(bytes);
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let stored = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if stored != hash.finish() {
            return Err(bad("payload checksum mismatch"));
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes after checksum"));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(Error::io(format!("writing checkpoint {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(Error::io(format!("reading checkpoint {}", path.display())))?;
        Self::decode(&buf)
    }

    /// Overwrites every parameter of `store`; every parameter must be
    /// present with a matching shape.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.get(&name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            let p = store.value_mut(id);
            if t.shape() != p.shape() {
                return Err(bad(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t.clone();
        }
        Ok(())
    }

    /// Optimizer state for `trainable`, if the checkpoint carries one.
    pub fn restore_optimizer(
        &self,
        store: &ParamStore,
        trainable: ModuleSet,
        cfg: &OptimConfig,
    ) -> Result<Option<AdamW>> {
        let Some(step) = self.get(OPT_STEP) else {
            return Ok(None);
        };
        let mut opt = AdamW::new(store, trainable, cfg);
        opt.step = join_u64(step.data()).ok_or_else(|| bad("malformed `opt/step`"))?;
        let ids: Vec<_> = opt.tracked().map(|(id, _)| id).collect();
        for id in ids {
            let name = &store.get(id).name;
            let m = self.get(&format!("opt/m/{name}"));
            let v = self.get(&format!("opt/v/{name}"));
            let (Some(m), Some(v)) = (m, v) else {
                return Err(bad(format!("missing optimizer moments for `{name}`")));
            };
            let mo = opt.moments_mut(id).expect("tracked");
            if m.shape() != mo.m.shape() || v.shape() != mo.v.shape() {
                return Err(bad(format!("optimizer moments for `{name}` have the wrong shape")));
            }
            mo.m = m.clone();
            mo.v = v.clone();
        }
        Ok(Some(opt))
    }
}

// the step counter travels as two f32 lanes holding its raw 32-bit halves
fn split_u64(x: u64) -> Vec<f32> {
    vec![f32::from_bits(x as u32), f32::from_bits((x >> 32) as u32)]
}

fn join_u64(d: &[f32]) -> Option<u64> {
    match d {
        [lo, hi] => Some(u64::from(lo.to_bits()) | (u64::from(hi.to_bits()) << 32)),
        _ => None,
    }
}
