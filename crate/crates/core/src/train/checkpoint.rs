//! Versioned binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "SMCK" u32:version
//! u32:config_len  config text (utf-8)
//! u32:epoch  f64:best_rsum  f64:lr
//! u32:entries  { u32:name_len name u8:trainable u32:rank u32:dims[rank] f64:data[..] }*
//! u64:adam_step f64:beta1 f64:beta2 f64:eps
//! { u32:len f64:m[len] f64:v[len] }*   one per entry, empty for buffers
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::optim::AdamState;

pub const MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub epoch: u32,
    /// Best validation RSum so far; `-inf` before the first evaluation.
    pub best_rsum: f64,
    pub lr: f64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                field,
                self.pos as u64,
                format!(
                    "truncated: expected {n} bytes, found {}",
                    self.bytes.len() - self.pos
                ),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(field)?))
    }

    fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.saturating_mul(8), field)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32(field)? as usize;
        let raw = self.take(n, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(field, at, "invalid utf-8"))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config.to_text());
        put_u32(&mut out, self.epoch);
        put_f64s(&mut out, &[self.best_rsum, self.lr]);
        put_u32(&mut out, self.params.len() as u32);
        for e in self.params.entries() {
            put_str(&mut out, &e.name);
            out.push(u8::from(e.trainable));
            put_u32(&mut out, e.tensor.shape().len() as u32);
            for &d in e.tensor.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f64s(&mut out, e.tensor.data());
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        put_f64s(&mut out, &[self.adam.beta1, self.adam.beta2, self.adam.eps]);
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            put_u32(&mut out, m.len() as u32);
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("magic", 0, "not a checkpoint (expected \"SMCK\")"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                "version",
                4,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let config = TrainConfig::parse(&r.string("config")?)?;
        let epoch = r.u32("epoch")?;
        let best_rsum = r.f64("best_rsum")?;
        let lr = r.f64("lr")?;
        let count = r.u32("entry count")? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string("entry name")?;
            let at = r.pos as u64;
            let trainable = match r.take(1, "trainable flag")?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::format("trainable flag", at, format!("invalid value {b}"))),
            };
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let at = r.pos as u64;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format("dimension", at, "shape overflows"))?;
            let data = r.f64s(numel, &name)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::format(&name, at, e.to_string()))?;
            if params.find(&name).is_some() {
                return Err(Error::format("entry name", at, format!("duplicate entry {name}")));
            }
            if trainable {
                params.add(name, t);
            } else {
                params.add_buffer(name, t);
            }
        }
        let step = r.u64("adam step")?;
        let beta1 = r.f64("adam beta1")?;
        let beta2 = r.f64("adam beta2")?;
        let eps = r.f64("adam eps")?;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for e in params.entries() {
            let at = r.pos as u64;
            let n = r.u32("moment length")? as usize;
            let expected = if e.trainable { e.tensor.numel() } else { 0 };
            if n != expected {
                return Err(Error::format(
                    "moment length",
                    at,
                    format!("{} has {n} moments, expected {expected}", e.name),
                ));
            }
            m.push(r.f64s(n, "adam m")?);
            v.push(r.f64s(n, "adam v")?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                "trailing data",
                r.pos as u64,
                format!("{} unexpected bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self {
            config,
            params,
            adam: AdamState {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            },
            epoch,
            best_rsum,
            lr,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a.w", Tensor::from_rows(&[vec![1.0, -2.5], vec![0.125, 3.0]]));
        params.add_buffer("a.running", Tensor::row(&[0.5, 0.25]));
        let mut adam = AdamState::new(&params, 0.9, 0.999, 1e-8);
        adam.step = 7;
        adam.m[0] = vec![0.1, 0.2, 0.3, 0.4];
        Checkpoint {
            config: TrainConfig::toy(),
            params,
            adam,
            epoch: 3,
            best_rsum: 123.5,
            lr: 2.5e-5,
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format { .. })));
    }
}
