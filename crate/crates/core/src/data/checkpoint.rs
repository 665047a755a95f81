//! Binary checkpoints: configuration snapshot, every named tensor (trainable
//! and buffers), optimizer moments and the step counter. Values are stored as
//! little-endian `f64`, so save → load → save reproduces the bytes exactly.
//!
//! Layout: `TSTC`, `u32` version, `u64`-prefixed config text, `u64` step,
//! `u64` tensor count, then per tensor a `u32`-prefixed name, a kind byte
//! (0 trainable, 1 buffer), `u32` rank, `u64` extents and the payload; a
//! final flag byte says whether Adam state (`u64` t, then `m` and `v` per
//! trainable tensor) follows.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::optim::AdamState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TSTC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
    pub adam: Option<AdamState>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem) > self.bytes.len() - self.at {
            return Err(Error::format(self.path, format!("length {n} exceeds the file")));
        }
        Ok(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn capture(model: &impl Module, config: String, step: u64, adam: Option<AdamState>) -> Self {
        let mut tensors = Vec::new();
        model.visit("", &mut |name, t, kind| {
            tensors.push(NamedTensor {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
        });
        Self {
            config,
            step,
            tensors,
            adam,
        }
    }

    /// Copies stored values into `model`; names, kinds and shapes must match
    /// one-to-one.
    pub fn restore(&self, model: &mut impl Module) -> Result<()> {
        let mut i = 0;
        let mut failure: Option<Error> = None;
        model.visit_mut("", &mut |name, t, kind| {
            if failure.is_some() {
                return;
            }
            let Some(e) = self.tensors.get(i) else {
                failure = Some(Error::Config(format!("checkpoint lacks '{name}'")));
                return;
            };
            i += 1;
            if e.name != name || e.kind != kind || e.shape != t.shape() {
                failure = Some(Error::Config(format!(
                    "checkpoint tensor '{}' {:?} does not match model tensor '{name}' {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
                return;
            }
            let made = match kind {
                ParamKind::Trainable => Tensor::param(e.data.clone(), &e.shape),
                ParamKind::Buffer => Tensor::new(e.data.clone(), &e.shape),
            };
            match made {
                Ok(x) => *t = x,
                Err(err) => failure = Some(err),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if i != self.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model has {i}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(match t.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, &t.data);
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.t.to_le_bytes());
                out.extend_from_slice(&(a.m.len() as u64).to_le_bytes());
                for (m, v) in a.m.iter().zip(&a.v) {
                    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
                    put_f64s(&mut out, m);
                    put_f64s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "missing TSTC magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let n = r.len(1)?;
        let config = r.string(n)?;
        let step = r.u64()?;
        let count = r.len(1)?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let kind = match r.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(Error::format(path, format!("bad tensor kind {k}"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product::<usize>();
            let data = r.f64s(numel)?;
            tensors.push(NamedTensor { name, kind, shape, data });
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let n = r.len(8)?;
                let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    let len = r.len(16)?;
                    m.push(r.f64s(len)?);
                    v.push(r.f64s(len)?);
                }
                Some(AdamState { t, m, v })
            }
            f => return Err(Error::format(path, format!("bad optimizer flag {f}"))),
        };
        if r.at != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Self {
            config,
            step,
            tensors,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
