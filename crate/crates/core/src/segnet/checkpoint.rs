//! Little-endian binary checkpoint format.
//!
//! ```text
//! magic      4 bytes  "SEGN"
//! version    u32
//! config     base_channels u32, depth u32, cascade u8, in_channels u32, seed u64
//! count      u32      number of parameter records
//! records    name_len u32, name (UTF-8), shape 4×u32, numel × f64
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, Param, SegNet};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEGN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub(super) fn encode(net: &SegNet) -> Vec<u8> {
    let cfg = net.config();
    let mut buf = Vec::with_capacity(64 + net.param_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, cfg.base_channels);
    put_u32(&mut buf, cfg.depth);
    buf.push(u8::from(cfg.cascade));
    put_u32(&mut buf, cfg.in_channels);
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    put_u32(&mut buf, net.params().len());
    for p in net.params() {
        put_u32(&mut buf, p.name.len());
        buf.extend_from_slice(p.name.as_bytes());
        for d in p.value.shape().0 {
            put_u32(&mut buf, d);
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated checkpoint while reading {what} at byte {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
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
}

pub(super) fn decode(bytes: &[u8], path: &Path) -> Result<SegNet> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let base_channels = r.u32("base_channels")? as usize;
    let depth = r.u32("depth")? as usize;
    let cascade = match r.u8("cascade flag")? {
        0 => false,
        1 => true,
        other => return Err(Error::format(path, format!("invalid cascade flag {other}"))),
    };
    let in_channels = r.u32("in_channels")? as usize;
    let seed = r.u64("seed")?;
    let config = ModelConfig {
        base_channels,
        depth,
        cascade,
        in_channels,
        seed,
    };
    config
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;

    let count = r.u32("record count")? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_owned();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("shape")? as usize;
        }
        let shape = Shape(dims);
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::format(path, format!("implausible shape {shape} for {name}")))?;
        let raw = r.take(numel * 8, "parameter values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Param {
            name,
            value: Tensor::from_vec(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after last record", bytes.len() - r.pos),
        ));
    }
    SegNet::from_parts(config, params).map_err(|e| Error::format(path, e.to_string()))
}

pub(super) fn save(net: &SegNet, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub(super) fn load(path: &Path) -> Result<SegNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> SegNet {
        SegNet::init(ModelConfig {
            base_channels: 2,
            depth: 2,
            cascade: true,
            in_channels: 1,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let bytes = encode(&n);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, n);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn size_is_header_plus_records() {
        let n = net();
        let header = 4 + 4 + (4 + 4 + 1 + 4 + 8) + 4;
        let records: usize = n.params().iter().map(|p| 4 + p.name.len() + 16).sum();
        assert_eq!(encode(&n).len(), header + records + 8 * n.param_count());
    }

    #[test]
    fn every_truncation_is_detected() {
        let bytes = encode(&net());
        for cut in [0, 3, 7, 20, 33, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = decode(&bytes[..cut], Path::new("cut")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
            assert!(err.to_string().contains("truncated"), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = encode(&net());
        bytes[4] = 9;
        assert!(matches!(decode(&bytes, Path::new("v")), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, Path::new("m")), Err(Error::Format { .. })));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode(&net());
        bytes.push(0);
        assert!(decode(&bytes, Path::new("t")).is_err());
    }
}
