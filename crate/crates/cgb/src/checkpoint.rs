//! CGB1 checkpoint container.
//!
//! Layout: ASCII magic `CGB1`, little-endian u32 tensor count, then per
//! tensor: u32 name length, UTF-8 name bytes, u32 rank, rank x u64 extents,
//! little-endian f64 values. Values round-trip bit-exactly (they are moved as
//! raw bits, so NaN payloads and signed zeros survive).

use crate::tensor::Tensor;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"CGB1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic (not a CGB1 file)")]
    BadMagic,
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("tensor {name}: declared {expected} values, file truncated")]
    Truncated { name: String, expected: usize },
    #[error("unreasonable field size {0} (corrupt file?)")]
    FieldTooLarge(u64),
}

/// Limits a corrupt length field to something allocatable.
const MAX_FIELD: u64 = 1 << 33;

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &e in &t.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len as u64 > MAX_FIELD {
            return Err(CheckpointError::FieldTooLarge(name_len as u64));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let e = u64::from_le_bytes(b);
            numel = numel.saturating_mul(e.max(1));
            shape.push(e as usize);
        }
        if numel > MAX_FIELD {
            return Err(CheckpointError::FieldTooLarge(numel));
        }
        let numel = shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated {
                name: name.clone(),
                expected: numel,
            })?;
            data.push(f64::from_bits(u64::from_le_bytes(buf)));
        }
        let tensor =
            Tensor::new(shape, data).map_err(|_| CheckpointError::Truncated { name: name.clone(), expected: numel })?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Stash a u64 (epoch counters, RNG positions) as a 1-element tensor without
/// losing bits.
pub fn u64_tensor(v: u64) -> Tensor {
    Tensor::new(vec![1], vec![f64::from_bits(v)]).expect("fixed shape")
}

pub fn tensor_u64(t: &Tensor) -> u64 {
    t.data[0].to_bits()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip(entries: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save(&path, &entries).unwrap();
        load(&path).unwrap()
    }

    #[test]
    fn empty_checkpoint() {
        assert_eq!(roundtrip(vec![]).len(), 0);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
        assert!(matches!(load(&path).unwrap_err(), CheckpointError::BadMagic));
    }

    #[test]
    fn rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save(&path, &[("w".into(), t)]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 9]).unwrap();
        assert!(matches!(load(&path).unwrap_err(), CheckpointError::Truncated { .. }));
    }

    #[test]
    fn u64_survives() {
        let v = 0xDEAD_BEEF_0BAD_F00D;
        assert_eq!(tensor_u64(&u64_tensor(v)), v);
    }

    proptest! {
        #[test]
        fn bit_exact_roundtrip(
            tensors in proptest::collection::vec(
                (
                    "[a-z_/.]{1,24}",
                    proptest::collection::vec(1usize..5, 0..3),
                    proptest::collection::vec(
                        prop_oneof![
                            any::<f64>().prop_filter("finite", |v| v.is_finite()),
                            Just(0.0f64), Just(-0.0f64), Just(f64::MIN_POSITIVE),
                        ],
                        1..40,
                    ),
                ),
                0..6,
            )
        ) {
            let entries: Vec<(String, Tensor)> = tensors
                .into_iter()
                .map(|(name, mut shape, data)| {
                    // force shape/data agreement: trailing dim absorbs the length
                    let lead: usize = shape.iter().product();
                    let take = lead * (data.len() / lead).max(1);
                    let mut data = data;
                    data.resize(take.max(lead), 1.5);
                    shape.push(data.len() / lead);
                    (name, Tensor::new(shape, data).unwrap())
                })
                .collect();
            let back = roundtrip(entries.clone());
            prop_assert_eq!(back.len(), entries.len());
            for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(&t1.shape, &t2.shape);
                for (a, b) in t1.data.iter().zip(&t2.data) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
