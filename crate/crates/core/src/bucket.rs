//! The replicated unit: a versioned map of key-value pairs, and its binary
//! encoding.
//!
//! Encoding, all integers little-endian:
//!
//! ```text
//! "BZB1" | index u32 | elect_id u64 | counter u64 | needs_copy u8 | entry_count u32
//!        | entry_count × (key_len u16 | key | val_len u32 | val)
//! ```
//!
//! Entries are written in lexicographic key order, so equal buckets encode to
//! equal bytes.

use std::collections::BTreeMap;
use std::sync::Arc;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::types::{BucketVersion, ElectId};

pub const MAX_KEY_LEN: usize = 4 * 1024;
pub const MAX_VALUE_LEN: usize = 64 * 1024;

const MAGIC: &[u8; 4] = b"BZB1";
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1 + 4;

pub type Entries = BTreeMap<Bytes, Bytes>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub index: u32,
    pub ver: BucketVersion,
    /// Shared so that sending a bucket to every replica does not copy it.
    pub entries: Arc<Entries>,
    /// Set on every bucket of an instance created by a reconfiguration,
    /// cleared once the bucket has been copied from the previous instance.
    pub needs_copy: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated bucket record: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("needs_copy flag must be 0 or 1, got {0}")]
    BadFlag(u8),
    #[error("key of {0} bytes exceeds the 4 KiB limit")]
    KeyTooLong(usize),
    #[error("value of {0} bytes exceeds the 64 KiB limit")]
    ValueTooLong(usize),
    #[error("entries not in strictly increasing key order")]
    UnorderedKeys,
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
}

impl Bucket {
    pub fn empty(index: u32) -> Self {
        Bucket {
            index,
            ver: BucketVersion::default(),
            entries: Arc::new(Entries::new()),
            needs_copy: false,
        }
    }

    pub fn elect_id(&self) -> ElectId {
        self.ver.elect_id
    }

    pub fn encode_set(&mut self, key: Bytes, value: Bytes) {
        Arc::make_mut(&mut self.entries).insert(key, value);
    }

    pub fn encode_delete(&mut self, key: &[u8]) {
        if self.entries.contains_key(key) {
            Arc::make_mut(&mut self.entries).remove(key);
        }
    }

    pub fn decode(&self, key: &[u8]) -> Option<&Bytes> {
        self.entries.get(key)
    }

    pub fn decode_keys(&self) -> impl Iterator<Item = &Bytes> + '_ {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .entries
                .iter()
                .map(|(k, v)| 2 + k.len() + 4 + v.len())
                .sum::<usize>()
    }

    pub fn serialize(&self) -> Bytes {
        let mut out = BytesMut::with_capacity(self.encoded_len());
        out.put_slice(MAGIC);
        out.put_u32_le(self.index);
        out.put_u64_le(self.ver.elect_id.0);
        out.put_u64_le(self.ver.counter);
        out.put_u8(self.needs_copy as u8);
        out.put_u32_le(self.entries.len() as u32);
        for (k, v) in self.entries.iter() {
            assert!(k.len() <= MAX_KEY_LEN && v.len() <= MAX_VALUE_LEN);
            out.put_u16_le(k.len() as u16);
            out.put_slice(k);
            out.put_u32_le(v.len() as u32);
            out.put_slice(v);
        }
        out.freeze()
    }

    pub fn deserialize(mut buf: &[u8]) -> Result<Bucket, DecodeError> {
        need(buf, HEADER_LEN)?;
        let mut magic = [0u8; 4];
        buf.copy_to_slice(&mut magic);
        if &magic != MAGIC {
            return Err(DecodeError::BadMagic(magic));
        }
        let index = buf.get_u32_le();
        let elect_id = buf.get_u64_le();
        let counter = buf.get_u64_le();
        let needs_copy = match buf.get_u8() {
            0 => false,
            1 => true,
            other => return Err(DecodeError::BadFlag(other)),
        };
        let count = buf.get_u32_le();
        let mut entries = Entries::new();
        let mut prev: Option<Bytes> = None;
        for _ in 0..count {
            need(buf, 2)?;
            let klen = buf.get_u16_le() as usize;
            if klen > MAX_KEY_LEN {
                return Err(DecodeError::KeyTooLong(klen));
            }
            need(buf, klen)?;
            let key = Bytes::copy_from_slice(&buf[..klen]);
            buf.advance(klen);
            need(buf, 4)?;
            let vlen = buf.get_u32_le() as usize;
            if vlen > MAX_VALUE_LEN {
                return Err(DecodeError::ValueTooLong(vlen));
            }
            need(buf, vlen)?;
            let value = Bytes::copy_from_slice(&buf[..vlen]);
            buf.advance(vlen);
            if prev.as_ref().is_some_and(|p| *p >= key) {
                return Err(DecodeError::UnorderedKeys);
            }
            prev = Some(key.clone());
            entries.insert(key, value);
        }
        if !buf.is_empty() {
            return Err(DecodeError::TrailingBytes(buf.len()));
        }
        Ok(Bucket {
            index,
            ver: BucketVersion::new(elect_id, counter),
            entries: Arc::new(entries),
            needs_copy,
        })
    }
}

fn need(buf: &[u8], n: usize) -> Result<(), DecodeError> {
    if buf.len() < n {
        Err(DecodeError::Truncated {
            needed: n - buf.len(),
        })
    } else {
        Ok(())
    }
}
