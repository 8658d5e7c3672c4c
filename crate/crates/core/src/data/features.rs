//! Binary feature container.
//!
//! Layout (little-endian):
//!
//! ```text
//! header   magic "SMDC" | version u32 | item count u32 | max length u32 | width u32
//! item     id u64 | length L u32 | L × width × f32
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on use.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::temporal_conv::SequenceFeatureMap;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMDC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
pub const ITEM_HEADER_LEN: usize = 12;

/// One sequence: `len` rows of `width` features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureItem {
    pub id: u64,
    pub len: u32,
    pub values: Vec<f32>,
}

impl FeatureItem {
    pub fn new(id: u64, len: u32, values: Vec<f32>) -> Self {
        Self { id, len, values }
    }

    /// Narrows an `L×d` tensor to `f32` storage.
    pub fn from_tensor(id: u64, t: &Tensor) -> Result<Self> {
        let (rows, _) = t.dims2()?;
        Ok(Self {
            id,
            len: rows as u32,
            values: t.data().iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_tensor(&self, width: usize) -> Tensor {
        Tensor::matrix(
            self.len as usize,
            width,
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("validated item")
    }

    pub fn to_map(&self, width: usize) -> SequenceFeatureMap {
        SequenceFeatureMap::new(self.to_tensor(width)).expect("rank-2 item")
    }
}

/// An in-memory feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    width: u32,
    max_len: u32,
    items: Vec<FeatureItem>,
    index: BTreeMap<u64, usize>,
}

impl FeatureFile {
    /// Validates widths and lengths; `max_len` is the longest item.
    pub fn new(width: usize, items: Vec<FeatureItem>) -> Result<Self> {
        let max_len = items.iter().map(|i| i.len).max().unwrap_or(0);
        Self::with_max_len(width, max_len, items)
    }

    pub fn with_max_len(width: usize, max_len: u32, items: Vec<FeatureItem>) -> Result<Self> {
        let width_u32 = u32::try_from(width)
            .map_err(|_| Error::config(format!("feature width {width} exceeds u32")))?;
        let mut index = BTreeMap::new();
        for (pos, item) in items.iter().enumerate() {
            if item.len == 0 || item.len > max_len {
                return Err(Error::config(format!(
                    "item {} has length {} outside 1..={max_len}",
                    item.id, item.len
                )));
            }
            if item.values.len() != item.len as usize * width {
                return Err(Error::dim(format!(
                    "item {} holds {} values, expected {} × {width}",
                    item.id,
                    item.values.len(),
                    item.len
                )));
            }
            if index.insert(item.id, pos).is_some() {
                return Err(Error::config(format!("duplicate item id {}", item.id)));
            }
        }
        Ok(Self {
            width: width_u32,
            max_len,
            items,
            index,
        })
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn max_len(&self) -> u32 {
        self.max_len
    }

    pub fn items(&self) -> &[FeatureItem] {
        &self.items
    }

    pub fn get(&self, id: u64) -> Option<&FeatureItem> {
        self.index.get(&id).map(|&p| &self.items[p])
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    /// Widened `L×width` tensor for item `id`.
    pub fn tensor(&self, id: u64) -> Result<Tensor> {
        self.get(id)
            .map(|i| i.to_tensor(self.width()))
            .ok_or_else(|| Error::Manifest(format!("unknown feature id {id}")))
    }

    pub fn byte_len(&self) -> usize {
        HEADER_LEN
            + self
                .items
                .iter()
                .map(|i| ITEM_HEADER_LEN + 4 * i.values.len())
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.max_len.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        for item in &self.items {
            out.extend_from_slice(&item.id.to_le_bytes());
            out.extend_from_slice(&item.len.to_le_bytes());
            for v in &item.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format("magic", 0, format!("expected \"SMDC\", found {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                "version",
                4,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let count = r.u32("item count")? as usize;
        let max_len = r.u32("max sequence length")?;
        let width = r.u32("feature width")? as usize;
        // Each item needs at least its header; reject absurd counts before allocating.
        if count.saturating_mul(ITEM_HEADER_LEN) > r.remaining() {
            return Err(Error::format(
                "item count",
                8,
                format!(
                    "{count} items need at least {} bytes, only {} remain",
                    count.saturating_mul(ITEM_HEADER_LEN),
                    r.remaining()
                ),
            ));
        }
        let mut items = Vec::with_capacity(count);
        for n in 0..count {
            let item_start = r.pos as u64;
            let id = r.u64(&format!("item {n} id"))?;
            let len = r.u32(&format!("item {n} length"))?;
            if len == 0 || len > max_len {
                return Err(Error::format(
                    format!("item {n} length"),
                    item_start + 8,
                    format!("length {len} outside 1..={max_len}"),
                ));
            }
            let payload = (len as usize)
                .checked_mul(width)
                .and_then(|v| v.checked_mul(4))
                .ok_or_else(|| Error::format(format!("item {n} payload"), r.pos as u64, "size overflow"))?;
            let raw = r.take(payload, &format!("item {n} payload"))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            items.push(FeatureItem { id, len, values });
        }
        if r.remaining() != 0 {
            return Err(Error::format(
                "trailing data",
                r.pos as u64,
                format!(
                    "expected {} bytes in total, found {}",
                    r.pos,
                    bytes.len()
                ),
            ));
        }
        Self::with_max_len(width, max_len, items).map_err(|e| Error::format("items", 0, e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                field,
                self.pos as u64,
                format!(
                    "truncated: expected {} bytes, found {}",
                    self.pos + n,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn write_features(file: &FeatureFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, file.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_items() -> FeatureFile {
        let a = FeatureItem::new(7, 3, (0..12).map(|v| v as f32 * 0.5).collect());
        let b = FeatureItem::new(9, 1, vec![1.5, -2.0, f32::MIN_POSITIVE, 3.25]);
        FeatureFile::new(4, vec![a, b]).unwrap()
    }

    #[test]
    fn empty_file_is_header_only() {
        let f = FeatureFile::new(4, vec![]).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(FeatureFile::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn byte_accounting_and_round_trip() {
        let f = two_items();
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), 20 + 2 * 12 + (12 + 4) * 4);
        assert_eq!(f.byte_len(), bytes.len());
        let back = FeatureFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_reports_expected_and_actual() {
        let bytes = two_items().to_bytes();
        let cut = &bytes[..bytes.len() - 5];
        match FeatureFile::from_bytes(cut) {
            Err(Error::Format { message, offset, .. }) => {
                assert!(message.contains(&format!("expected {}", bytes.len())), "{message}");
                assert!(message.contains(&format!("found {}", cut.len())), "{message}");
                assert_eq!(offset, (bytes.len() - 16) as u64);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = two_items().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            FeatureFile::from_bytes(&bytes),
            Err(Error::Format { ref field, offset: 0, .. }) if field == "magic"
        ));
        let mut bytes = two_items().to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            FeatureFile::from_bytes(&bytes),
            Err(Error::Format { ref field, offset: 4, .. }) if field == "version"
        ));
    }

    #[test]
    fn oversized_count_rejected_before_allocation() {
        let mut bytes = FeatureFile::new(4, vec![]).unwrap().to_bytes();
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            FeatureFile::from_bytes(&bytes),
            Err(Error::Format { ref field, .. }) if field == "item count"
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = two_items().to_bytes();
        bytes.push(0);
        assert!(FeatureFile::from_bytes(&bytes).is_err());
    }

    #[test]
    fn item_length_over_header_max_rejected() {
        let mut bytes = two_items().to_bytes();
        bytes[12..16].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            FeatureFile::from_bytes(&bytes),
            Err(Error::Format { offset: 28, .. })
        ));
    }

    #[test]
    fn width_mismatch_rejected() {
        let bad = FeatureItem::new(0, 2, vec![0.0; 5]);
        assert!(FeatureFile::new(4, vec![bad]).is_err());
    }
}
