//! Little-endian binary checkpoints.
//!
//! Layout: `b"DGAE"`, `u32` version, `u32` tensor count, then per tensor a
//! `u32` name length, the UTF-8 name, a `u32` rank, `rank` dims as `u64` and
//! the `f64` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::GaeModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DGAE";
pub const VERSION: u32 = 1;

struct Entry {
    name: &'static str,
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn entries(model: &GaeModel) -> Vec<Entry> {
    let (f, h) = model.w_enc.shape();
    vec![
        Entry { name: "w_enc", dims: vec![f, h], values: model.w_enc.data().to_vec() },
        Entry { name: "w_dec", dims: vec![h, f], values: model.w_dec.data().to_vec() },
        Entry { name: "mask_token", dims: vec![f], values: model.mask_token.data().to_vec() },
        Entry { name: "remask_token", dims: vec![h], values: model.remask_token.data().to_vec() },
        Entry { name: "act_slope_enc", dims: vec![], values: vec![model.act_slope_enc] },
        Entry { name: "act_slope_dec", dims: vec![], values: vec![model.act_slope_dec] },
    ]
}

pub fn encode(model: &GaeModel) -> Vec<u8> {
    let entries = entries(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for d in &e.dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &e.values {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<GaeModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut found: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 2 {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is larger than the file")))?;
        let raw = r.take(numel * 8)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if found.iter().any(|(n, _, _)| *n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        found.push((name, dims, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }

    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        let idx = found
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let (_, d, v) = found.swap_remove(idx);
        Ok((d, v))
    };
    let matrix = |name: &str, (d, v): (Vec<usize>, Vec<f64>)| -> Result<Tensor> {
        if d.len() != 2 {
            return Err(Error::Checkpoint(format!("{name} must be rank 2")));
        }
        Tensor::from_vec(d[0], d[1], v)
    };
    let vector = |name: &str, (d, v): (Vec<usize>, Vec<f64>)| -> Result<Tensor> {
        if d.len() != 1 {
            return Err(Error::Checkpoint(format!("{name} must be rank 1")));
        }
        Tensor::from_vec(1, d[0], v)
    };
    let scalar = |name: &str, (d, v): (Vec<usize>, Vec<f64>)| -> Result<f64> {
        if !d.is_empty() {
            return Err(Error::Checkpoint(format!("{name} must be rank 0")));
        }
        Ok(v[0])
    };
    let model = GaeModel {
        w_enc: matrix("w_enc", take("w_enc")?)?,
        w_dec: matrix("w_dec", take("w_dec")?)?,
        mask_token: vector("mask_token", take("mask_token")?)?,
        remask_token: vector("remask_token", take("remask_token")?)?,
        act_slope_enc: scalar("act_slope_enc", take("act_slope_enc")?)?,
        act_slope_dec: scalar("act_slope_dec", take("act_slope_dec")?)?,
    };
    if let Some((name, _, _)) = found.first() {
        return Err(Error::Checkpoint(format!("unknown tensor {name}")));
    }
    model
        .validate()
        .map_err(|e| Error::Checkpoint(format!("inconsistent parameters: {e}")))?;
    Ok(model)
}

pub fn save(model: &GaeModel, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<GaeModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut m = GaeModel::new(7, 3, 9);
        m.mask_token.data_mut()[2] = -0.0;
        m.remask_token.data_mut()[1] = f64::MIN_POSITIVE;
        m.act_slope_dec = 1.0 / 3.0;
        let back = decode(&encode(&m)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.w_enc), bits(&m.w_enc));
        assert_eq!(bits(&back.w_dec), bits(&m.w_dec));
        assert_eq!(bits(&back.mask_token), bits(&m.mask_token));
        assert_eq!(bits(&back.remask_token), bits(&m.remask_token));
        assert_eq!(back.act_slope_dec.to_bits(), m.act_slope_dec.to_bits());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&GaeModel::zeros(2, 1));
        assert_eq!(&bytes[..4], b"DGAE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(&bytes[16..21], b"w_enc");
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let good = encode(&GaeModel::new(3, 2, 0));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());
        assert!(decode(&good[..good.len() - 3]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode(&trailing).is_err());
        let mut version = good.clone();
        version[4] = 2;
        assert!(decode(&version).is_err());
        assert!(decode(&[]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = GaeModel::new(4, 2, 1);
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
        assert!(load(&dir.path().join("missing")).is_err());
    }
}
