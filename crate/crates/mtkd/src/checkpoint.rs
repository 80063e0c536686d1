//! Binary checkpoint format.
//!
//! ```text
//! "MTKD" | version u32 | count u32 |
//!   count × ( name_len u32 | name utf-8 | rank u32 | rank × extent u64 | f32 data )
//! | checksum u64
//! ```
//!
//! Integers and floats are little-endian, data row-major. The checksum is
//! CRC-64/ECMA-182 of every preceding byte.

use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use mtkd_core::{Parameters, Tensor};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTKD";
pub const VERSION: u32 = 1;
pub const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

pub type Named = Vec<(String, Tensor<f32>)>;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = CRC.checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Integrity(format!("truncated in {what}")));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Named> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("bad magic".into()));
    }
    if bytes.len() < 20 {
        return Err(Error::Integrity("truncated header".into()));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { bytes: payload, at: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity((count as usize).min(1024));
    for i in 0..count {
        let len = r.u32(&format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("name of tensor {i}"))?)
            .map_err(|_| Error::Integrity(format!("name of tensor {i} is not UTF-8")))?
            .to_string();
        let rank = r.u32(&format!("rank of {name}"))?;
        let shape = (0..rank)
            .map(|_| r.u64(&format!("extents of {name}")).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let bytes = n
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Integrity(format!("extents of {name} overflow")))?;
        let values = r
            .take(bytes, &format!("data of {name}"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| Error::Integrity(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.at != payload.len() {
        return Err(Error::Integrity(format!("{} trailing bytes after the last tensor", payload.len() - r.at)));
    }
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if CRC.checksum(payload) != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, encode(tensors)).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Named> {
    decode(&std::fs::read(path).map_err(Error::io(path))?)
}

/// Values of every parameter, without gradients.
pub fn snapshot<P: Parameters<f32> + ?Sized>(params: &mut P, prefix: &str) -> Named {
    params
        .named_mut(prefix)
        .into_iter()
        .map(|(n, t)| (n, Tensor::new(t.shape().to_vec(), t.values().to_vec()).expect("valid shape")))
        .collect()
}

/// Copies tensors into `params` by name. Every parameter must be present
/// with a matching shape; extra entries are ignored.
pub fn restore<P: Parameters<f32> + ?Sized>(params: &mut P, prefix: &str, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    for (name, t) in params.named_mut(prefix) {
        let Some((_, src)) = tensors.iter().find(|(n, _)| *n == name) else {
            return Err(Error::Integrity(format!("checkpoint has no tensor {name}")));
        };
        if src.shape() != t.shape() {
            return Err(Error::Integrity(format!("{name} has shape {:?}, expected {:?}", src.shape(), t.shape())));
        }
        t.values_mut().copy_from_slice(src.values());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Named {
        vec![
            ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.0, f32::MIN_POSITIVE]).unwrap()),
            ("layer.0.w".into(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
            ("é".into(), Tensor::new(vec![1, 1, 1], vec![-0.0]).unwrap()),
        ]
    }

    /// Bit-at-a-time CRC-64/ECMA-182: poly 0x42F0E1EBA9EA3693, no reflection,
    /// zero init and xor-out.
    fn crc64_reference(bytes: &[u8]) -> u64 {
        let mut crc = 0u64;
        for &b in bytes {
            crc ^= (b as u64) << 56;
            for _ in 0..8 {
                crc = if crc & (1 << 63) != 0 { (crc << 1) ^ 0x42F0_E1EB_A9EA_3693 } else { crc << 1 };
            }
        }
        crc
    }

    #[test]
    fn crc_matches_reference_and_check_value() {
        assert_eq!(CRC.checksum(b"123456789"), 0x6C40_DF5F_0B49_7347);
        assert_eq!(crc64_reference(b"123456789"), 0x6C40_DF5F_0B49_7347);
        let bytes = encode(&fixture());
        let (payload, trailer) = bytes.split_at(bytes.len() - 8);
        assert_eq!(u64::from_le_bytes(trailer.try_into().unwrap()), crc64_reference(payload));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let back = decode(&encode(&fixture())).unwrap();
        assert_eq!(back.len(), 3);
        for ((n0, t0), (n1, t1)) in fixture().iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let bits = |t: &Tensor<f32>| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t0), bits(t1));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&fixture());
        assert_eq!(&bytes[..4], b"MTKD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'a');
    }

    #[test]
    fn corruption_is_named() {
        let good = encode(&fixture());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Integrity(m)) if m.contains("magic")));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Integrity(m)) if m.contains("version")));
        let mut bad = good.clone();
        let last_value = bad.len() - 9;
        bad[last_value] ^= 1;
        assert!(matches!(decode(&bad), Err(Error::Integrity(m)) if m.contains("checksum")));
        for cut in [3, 12, 30, good.len() - 1] {
            assert!(matches!(decode(&good[..cut]), Err(Error::Integrity(_))), "cut at {cut}");
        }
    }
}
