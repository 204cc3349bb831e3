//! Parameter checkpoint archive.
//!
//! A checkpoint is a flat list of named tensors serialized to one binary
//! file: a manifest header (names, shapes, data offsets) followed by a raw
//! data section of little-endian `f64` bit patterns.  Round-trips are
//! bit-exact, including NaN payloads.  The decoder validates every length
//! against the remaining buffer before allocating, so arbitrary bytes can
//! be thrown at it safely.
//!
//! Layout:
//!
//! ```text
//! magic  "LRAGCKP1"                       8 bytes
//! u32    format version (1)
//! u16    config-hash length, then bytes
//! u32    entry count
//! entry* u16 name length, name bytes,
//!        u8 rank, u64 per dimension,
//!        u64 data offset (f64 units into the data section)
//! f64*   data section, little-endian
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LRAGCKP1";
const VERSION: u32 = 1;

/// One named tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// An ordered collection of named tensors plus the run-config hash that
/// produced them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn new(config_hash: &str) -> Self {
        Checkpoint { config_hash: config_hash.to_string(), entries: Vec::new() }
    }

    /// Append an entry; duplicate names are rejected.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Data(format!("duplicate checkpoint entry '{name}'")));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Shape(format!(
                "entry '{name}': shape {:?} implies {count} values, got {}",
                shape,
                data.len()
            )));
        }
        self.entries.push(CheckpointEntry { name: name.to_string(), shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[CheckpointEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    // ── encoding ───────────────────────────────────────────────────────────

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let hash = self.config_hash.as_bytes();
        out.extend_from_slice(&(hash.len() as u16).to_le_bytes());
        out.extend_from_slice(hash);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += e.data.len() as u64;
        }
        for e in &self.entries {
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.str16()?;
        let count = r.u32()? as usize;

        struct RawEntry {
            name: String,
            shape: Vec<usize>,
            offset: usize,
            count: usize,
        }
        let mut raw = Vec::new();
        let mut names = BTreeSet::new();
        let mut total = 0usize;
        for _ in 0..count {
            let name = r.str16()?;
            if !names.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate entry name '{name}'")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            let mut elems: usize = 1;
            for _ in 0..rank {
                let d = r.u64()?;
                let d = usize::try_from(d)
                    .map_err(|_| Error::Format("dimension does not fit in usize".into()))?;
                elems = elems
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format("shape overflow".into()))?;
                shape.push(d);
            }
            let offset = usize::try_from(r.u64()?)
                .map_err(|_| Error::Format("offset does not fit in usize".into()))?;
            let end = offset
                .checked_add(elems)
                .ok_or_else(|| Error::Format("entry extent overflow".into()))?;
            total = total.max(end);
            raw.push(RawEntry { name, shape, offset, count: elems });
        }
        let remaining = r.remaining();
        if remaining != total * 8 {
            return Err(Error::Format(format!(
                "data section holds {} bytes but manifest requires {}",
                remaining,
                total * 8
            )));
        }
        let data_section = &r.bytes[r.pos..];
        let mut ck = Checkpoint::new(&config_hash);
        for e in raw {
            let mut data = Vec::with_capacity(e.count);
            for i in 0..e.count {
                let at = (e.offset + i) * 8;
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&data_section[at..at + 8]);
                data.push(f64::from_le_bytes(buf));
            }
            ck.insert(&e.name, e.shape, data)?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Digest of the serialized archive, used to stamp index files.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        hex(&digest)[..16].to_string()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Bounds-checked little-endian reader shared by the binary decoders.
pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Reader<'a> {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("truncated input".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(b);
        Ok(u64::from_le_bytes(buf))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(b);
        Ok(f64::from_le_bytes(buf))
    }

    /// Length-prefixed (u16) utf-8 string.
    pub(crate) fn str16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("string field is not utf-8".into()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_exact_including_nan() {
        let mut ck = Checkpoint::new("abcd1234");
        ck.insert("w", vec![2, 2], vec![1.5, -0.0, f64::NAN, f64::MIN_POSITIVE]).unwrap();
        ck.insert("b", vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config_hash, "abcd1234");
        assert_eq!(back.len(), 2);
        for (a, b) in ck.entries().iter().zip(back.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let abits: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(abits, bbits);
        }
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ck = Checkpoint::new("");
        ck.insert("w", vec![1], vec![1.0]).unwrap();
        assert!(matches!(ck.insert("w", vec![1], vec![2.0]), Err(Error::Data(_))));
    }

    #[test]
    fn shape_data_mismatch_rejected() {
        let mut ck = Checkpoint::new("");
        assert!(ck.insert("w", vec![2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn truncated_and_garbage_inputs_fail_cleanly() {
        assert!(Checkpoint::from_bytes(b"").is_err());
        assert!(Checkpoint::from_bytes(b"LRAGCKP1").is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let mut ck = Checkpoint::new("h");
        ck.insert("w", vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = ck.to_bytes();
        for cut in [1, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(data in proptest::collection::vec(any::<u8>(), 0..512)) {
            let _ = Checkpoint::from_bytes(&data);
        }

        #[test]
        fn random_checkpoints_round_trip(
            entries in proptest::collection::vec(
                ("[a-z]{1,12}", proptest::collection::vec(any::<f64>(), 0..32)),
                0..6,
            )
        ) {
            let mut ck = Checkpoint::new("hash");
            let mut used = std::collections::BTreeSet::new();
            for (name, data) in &entries {
                if used.insert(name.clone()) {
                    ck.insert(name, vec![data.len()], data.clone()).unwrap();
                }
            }
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.len(), ck.len());
            for (a, b) in ck.entries().iter().zip(back.entries()) {
                let abits: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
                let bbits: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
        }
    }
}
