//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//! `BPFL` magic, format version, config hash, round number, then a list of
//! named parameter sets (name, entry count, entries as name/rank/extents/
//! trainable flag/f64 bit patterns), and a trailing CRC-32 of everything
//! before it. Values round-trip bit for bit.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BPFL";
pub const FORMAT_VERSION: u32 = 1;

/// IEEE CRC-32 (reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub round: usize,
    pub sets: IndexMap<String, ParamSet>,
}

impl Checkpoint {
    pub fn set(&self, name: &str) -> Result<&ParamSet> {
        self.sets
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint is missing set {name:?}")))
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    out.extend_from_slice(&(ckpt.round as u64).to_le_bytes());
    out.extend_from_slice(&(ckpt.sets.len() as u32).to_le_bytes());
    for (set_name, set) in &ckpt.sets {
        put_bytes(&mut out, set_name.as_bytes());
        out.extend_from_slice(&(set.len() as u32).to_le_bytes());
        for (name, p) in set.iter() {
            put_bytes(&mut out, name.as_bytes());
            out.push(p.trainable as u8);
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity("checkpoint contains a non-UTF-8 name".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Integrity("checkpoint too short for a header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Integrity(format!(
            "bad magic {:02x?}, not a checkpoint",
            &bytes[..4]
        )));
    }
    if bytes.len() < 4 + 4 {
        return Err(Error::Integrity("checkpoint truncated before version".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32(body);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }

    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let config_hash = r.u64()?;
    let round = r.u64()? as usize;
    let n_sets = r.u32()? as usize;
    let mut sets = IndexMap::new();
    for _ in 0..n_sets {
        let set_name = r.string()?;
        let n_entries = r.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..n_entries {
            let name = r.string()?;
            let trainable = r.u8()? != 0;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_bits(r.u64()?));
            }
            let value = Tensor::new(shape, data)
                .map_err(|e| Error::Integrity(format!("checkpoint entry {name:?}: {e}")))?;
            set.insert(&name, value, trainable)
                .map_err(|e| Error::Integrity(format!("checkpoint entry {name:?}: {e}")))?;
        }
        if sets.insert(set_name.clone(), set).is_some() {
            return Err(Error::Integrity(format!("duplicate set {set_name:?}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after the last set",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config_hash,
        round,
        sets,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    Ok(std::fs::write(path, encode(ckpt))?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Check values from the classic reference vectors.
    #[test]
    fn crc32_known_vectors() {
        assert_eq!(crc32(b""), 0);
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b"The quick brown fox jumps over the lazy dog"), 0x414F_A339);
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::matrix(2, 2, vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE]).unwrap(), true)
            .unwrap();
        a.insert("b", Tensor::new(vec![2], vec![-0.0, 3.125]).unwrap(), false)
            .unwrap();
        let mut b = ParamSet::new();
        b.insert("step", Tensor::scalar(17.0), false).unwrap();
        let mut sets = IndexMap::new();
        sets.insert("model".to_string(), a);
        sets.insert("opt".to_string(), b);
        Checkpoint {
            config_hash: 0xDEAD_BEEF_0123_4567,
            round: 42,
            sets,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let back = decode(&encode(&ckpt)).unwrap();
        assert_eq!(back.config_hash, ckpt.config_hash);
        assert_eq!(back.round, ckpt.round);
        assert_eq!(back.sets.len(), 2);
        assert!(back.set("model").unwrap().bit_eq(ckpt.set("model").unwrap()));
        assert!(back.set("opt").unwrap().bit_eq(ckpt.set("opt").unwrap()));
        // -0.0 survives as -0.0
        let b = back.set("model").unwrap().get("b").unwrap();
        assert!(b.value.data()[0].is_sign_negative());
        assert!(!b.trainable);
    }

    #[test]
    fn truncation_is_integrity_error() {
        let bytes = encode(&sample_checkpoint());
        for cut in [3, 7, 20, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Integrity(_)), "cut at {cut}: {err}");
        }
    }

    #[test]
    fn single_bit_flip_is_detected() {
        let mut bytes = encode(&sample_checkpoint());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = encode(&sample_checkpoint());
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let ckpt = sample_checkpoint();
        let mut bytes = encode(&ckpt);
        bytes[4] = 99;
        // rewrite the checksum so only the version mismatch fires
        let body_len = bytes.len() - 4;
        let crc = crc32(&bytes[..body_len]).to_le_bytes();
        bytes[body_len..].copy_from_slice(&crc);
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ckpt = sample_checkpoint();
        save(&path, &ckpt).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.round, 42);
        assert!(back.set("model").unwrap().bit_eq(ckpt.set("model").unwrap()));
    }
}
