//! Versioned binary parameter container.
//!
//! Layout (little-endian): magic `ASGM1`, `u64` length + UTF-8 config text,
//! `u32` tensor count, then per tensor `u32` name length, name, `u32` rank,
//! `u64` dims, `f64` values in row-major order.

use std::io::Read;
use std::path::Path;

use crate::config::ModelConfig;
use crate::data::{write_atomic, Scaler, Split};
use crate::error::{Error, Result};
use crate::model::AsgMamba;
use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"ASGM1";

const SCALER_MEAN: &str = "scaler.mean";
const SCALER_STD: &str = "scaler.std";

pub fn encode(header: &str, tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { u64::from(self.u32()?) };
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len().saturating_mul(8).max(1 << 20))
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }

    fn string(&mut self, wide: bool) -> Result<String> {
        let n = self.len(wide)?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 text".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("missing ASGM1 magic header".into()));
    }
    let header = r.string(true)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string(false)?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
        }
        let shape = (0..rank)
            .map(|_| r.len(true))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.buf.len()))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: file is truncated")))?;
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
    }
    Ok((header, tensors))
}

/// A trained model together with the data scaler it was fitted with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: AsgMamba,
    pub scaler: Option<Scaler>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(&str, &Tensor)> = self.model.params.iter().collect();
        let scaler = self.scaler.as_ref().map(|s| {
            (
                Tensor::from_vec(s.mean.clone()),
                Tensor::from_vec(s.std.clone()),
            )
        });
        if let Some((m, s)) = &scaler {
            named.push((SCALER_MEAN, m));
            named.push((SCALER_STD, s));
        }
        encode(&self.model.config.to_text(), &named)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = decode(bytes)?;
        let config = ModelConfig::from_text(&header)?;
        let mut params = Params::new();
        let (mut mean, mut std) = (None, None);
        for (name, t) in tensors {
            match name.as_str() {
                SCALER_MEAN => mean = Some(t.into_data()),
                SCALER_STD => std = Some(t.into_data()),
                _ => params.insert(name, t),
            }
        }
        let scaler = match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Some(Scaler {
                mean,
                std,
                source: Split::Train,
            }),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete scaler record".into())),
        };
        Ok(Checkpoint {
            model: AsgMamba::from_params(config, params)?,
            scaler,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes named tensors with a free-form header.
pub fn save_tensors(path: impl AsRef<Path>, header: &str, tensors: &[(&str, &Tensor)]) -> Result<()> {
    write_atomic(path, &encode(header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bits() {
        let a = Tensor::new(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::scalar(3.25);
        let bytes = encode("x = 1\n", &[("a.w", &a), ("b", &b)]);
        let (h, t) = decode(&bytes).unwrap();
        assert_eq!(h, "x = 1\n");
        assert_eq!(t[0].0, "a.w");
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t[0].1), bits(&a));
        assert_eq!(t[1].1, b);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"ASGM0....").is_err());
        let bytes = encode("", &[("a", &Tensor::ones(vec![4]))]);
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
    }
}
