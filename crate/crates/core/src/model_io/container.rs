//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      "QNTZ1\0"
//! u32        record count
//! per record:
//!   u16      name length, then UTF-8 name bytes
//!   u8       dtype code (0=f32, 1=i8, 2=u8, 3=ternary2)
//!   u8       rank, then rank x u32 dims
//!   u64      payload byte length, then payload
//! ```
//!
//! `ternary2` payloads hold four 2-bit codes per byte, lowest index in the
//! lowest-order bit pair: `00` = 0, `01` = +1, `10` = -1, `11` is invalid.
//! Trailing pad codes in the final byte are `00`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"QNTZ1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I8,
    U8,
    Ternary2,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::U8 => 2,
            DType::Ternary2 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DType::F32,
            1 => DType::I8,
            2 => DType::U8,
            3 => DType::Ternary2,
            _ => return None,
        })
    }

    /// Payload bytes needed for `count` elements.
    pub fn byte_len(self, count: u64) -> u64 {
        match self {
            DType::F32 => count * 4,
            DType::I8 | DType::U8 => count,
            DType::Ternary2 => count.div_ceil(4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u32>,
    pub data: Vec<u8>,
}

impl TensorRecord {
    pub fn element_count(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    pub fn shape_usize(&self) -> Vec<usize> {
        self.shape.iter().map(|&d| d as usize).collect()
    }

    /// Check the record invariants: positive dims, a name that fits the
    /// header, and a payload whose length matches shape and dtype.
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::InvalidRecord { record: self.name.clone(), detail };
        if self.name.is_empty() {
            return Err(bad("empty name".into()));
        }
        if self.name.len() > u16::MAX as usize {
            return Err(bad(format!("name is {} bytes (max {})", self.name.len(), u16::MAX)));
        }
        if self.shape.len() > u8::MAX as usize {
            return Err(bad(format!("rank {} exceeds 255", self.shape.len())));
        }
        if let Some(i) = self.shape.iter().position(|&d| d == 0) {
            return Err(bad(format!("dimension {i} is zero")));
        }
        let count = self
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| bad("element count overflows u64".into()))?;
        let want = self.dtype.byte_len(count);
        if want != self.data.len() as u64 {
            return Err(bad(format!(
                "payload is {} bytes but shape {:?} as {:?} needs {}",
                self.data.len(),
                self.shape,
                self.dtype,
                want
            )));
        }
        if self.dtype == DType::Ternary2 {
            unpack_ternary(&self.data, count as usize).map_err(|e| bad(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_f32(name: impl Into<String>, shape: &[usize], values: &[f32]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::F32,
            shape: shape.iter().map(|&d| d as u32).collect(),
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self::from_f32(name, &t.shape, &t.data)
    }

    pub fn from_i8(name: impl Into<String>, shape: &[usize], values: &[i8]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::I8,
            shape: shape.iter().map(|&d| d as u32).collect(),
            data: values.iter().map(|&v| v as u8).collect(),
        }
    }

    pub fn from_u8(name: impl Into<String>, shape: &[usize], values: &[u8]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::U8,
            shape: shape.iter().map(|&d| d as u32).collect(),
            data: values.to_vec(),
        }
    }

    pub fn from_ternary(name: impl Into<String>, shape: &[usize], codes: &[i8]) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            dtype: DType::Ternary2,
            shape: shape.iter().map(|&d| d as u32).collect(),
            data: pack_ternary(codes)?,
        })
    }

    fn expect(&self, dtype: DType) -> Result<()> {
        if self.dtype != dtype {
            return Err(Error::InvalidRecord {
                record: self.name.clone(),
                detail: format!("expected dtype {:?}, found {:?}", dtype, self.dtype),
            });
        }
        Ok(())
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        self.expect(DType::F32)?;
        Ok(self.data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape_usize(), self.to_f32()?)
    }

    pub fn to_i8(&self) -> Result<Vec<i8>> {
        self.expect(DType::I8)?;
        Ok(self.data.iter().map(|&b| b as i8).collect())
    }

    pub fn to_u8(&self) -> Result<Vec<u8>> {
        self.expect(DType::U8)?;
        Ok(self.data.clone())
    }

    pub fn to_ternary(&self) -> Result<Vec<i8>> {
        self.expect(DType::Ternary2)?;
        unpack_ternary(&self.data, self.element_count() as usize)
    }
}

/// Pack ternary values (each in {-1, 0, +1}) four to a byte.
pub fn pack_ternary(codes: &[i8]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; codes.len().div_ceil(4)];
    for (i, &c) in codes.iter().enumerate() {
        let bits = match c {
            0 => 0b00,
            1 => 0b01,
            -1 => 0b10,
            _ => return Err(Error::InvalidTernaryCode { index: i }),
        };
        out[i / 4] |= bits << (2 * (i % 4));
    }
    Ok(out)
}

/// Unpack `count` ternary values. Rejects the reserved `11` code and
/// non-zero padding so that packing is a bijection.
pub fn unpack_ternary(bytes: &[u8], count: usize) -> Result<Vec<i8>> {
    if bytes.len() != count.div_ceil(4) {
        return Err(Error::InvalidRecord {
            record: "<ternary>".into(),
            detail: format!("{} bytes cannot hold exactly {} codes", bytes.len(), count),
        });
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let bits = (bytes[i / 4] >> (2 * (i % 4))) & 0b11;
        out.push(match bits {
            0b00 => 0,
            0b01 => 1,
            0b10 => -1,
            _ => return Err(Error::InvalidTernaryCode { index: i }),
        });
    }
    if !count.is_multiple_of(4) {
        let used = 2 * (count % 4);
        if bytes[bytes.len() - 1] >> used != 0 {
            return Err(Error::NonZeroTernaryPadding);
        }
    }
    Ok(out)
}

/// Serialize records. Every record is validated (and names checked for
/// uniqueness) before any byte is produced.
pub fn encode_container(records: &[TensorRecord]) -> Result<Vec<u8>> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.name.as_str()) {
            return Err(Error::DuplicateName(r.name.clone()));
        }
    }
    let count = u32::try_from(records.len()).map_err(|_| Error::InvalidGraph("more than u32::MAX records".into()))?;
    let mut out = Vec::with_capacity(10 + records.iter().map(|r| r.data.len() + 32).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.dtype.code());
        out.push(r.shape.len() as u8);
        for d in &r.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(r.data.len() as u64).to_le_bytes());
        out.extend_from_slice(&r.data);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<TensorRecord>> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    match rd.take(MAGIC.len()) {
        Some(m) if m == MAGIC => {}
        _ => return Err(Error::MalformedHeader("missing QNTZ1 magic".into())),
    }
    let count = rd.u32().ok_or_else(|| Error::MalformedHeader("missing record count".into()))?;
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for i in 0..count {
        let placeholder = format!("#{i}");
        let trunc = |record: &str, what: &str| Error::Truncated {
            record: record.to_string(),
            detail: format!("ends inside {what}"),
        };
        let name_len = rd.u16().ok_or_else(|| trunc(&placeholder, "name length"))?;
        let name_bytes = rd.take(name_len as usize).ok_or_else(|| trunc(&placeholder, "name"))?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| Error::InvalidRecord {
            record: placeholder.clone(),
            detail: "name is not valid UTF-8".into(),
        })?;
        let code = rd.u8().ok_or_else(|| trunc(&name, "dtype"))?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::UnknownDType { record: name.clone(), code })?;
        let rank = rd.u8().ok_or_else(|| trunc(&name, "rank"))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(rd.u32().ok_or_else(|| trunc(&name, "dims"))?);
        }
        let len = rd.u64().ok_or_else(|| trunc(&name, "byte length"))?;
        let len = usize::try_from(len).map_err(|_| trunc(&name, "payload"))?;
        let data = rd.take(len).ok_or_else(|| trunc(&name, "payload"))?.to_vec();
        let rec = TensorRecord { name, dtype, shape, data };
        rec.validate()?;
        if !seen.insert(rec.name.clone()) {
            return Err(Error::DuplicateName(rec.name));
        }
        records.push(rec);
    }
    if rd.pos != bytes.len() {
        return Err(Error::MalformedHeader(format!("{} trailing bytes after {} records", bytes.len() - rd.pos, count)));
    }
    Ok(records)
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Vec<TensorRecord>> {
    decode_container(&std::fs::read(path)?)
}

pub fn save_container(records: &[TensorRecord], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_container(records)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Name-indexed view over a record list that keeps insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    records: Vec<TensorRecord>,
    index: HashMap<String, usize>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<TensorRecord>) -> Result<Self> {
        let mut s = Self::new();
        for r in records {
            if s.index.contains_key(&r.name) {
                return Err(Error::DuplicateName(r.name));
            }
            s.insert(r);
        }
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(load_container(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_container(&self.records, path)
    }

    /// Insert or replace (in place) a record.
    pub fn insert(&mut self, r: TensorRecord) {
        match self.index.get(&r.name) {
            Some(&i) => self.records[i] = r,
            None => {
                self.index.insert(r.name.clone(), self.records.len());
                self.records.push(r);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.index.get(name).map(|&i| &self.records[i])
    }

    pub fn require(&self, layer: &str, name: &str) -> Result<&TensorRecord> {
        self.get(name).ok_or_else(|| Error::DanglingTensor { layer: layer.to_string(), tensor: name.to_string() })
    }

    pub fn tensor(&self, layer: &str, name: &str) -> Result<Tensor> {
        self.require(layer, name)?.to_tensor()
    }

    pub fn records(&self) -> &[TensorRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TensorRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_container_round_trips() {
        let bytes = encode_container(&[]).unwrap();
        assert_eq!(bytes.len(), 10);
        assert!(decode_container(&bytes).unwrap().is_empty());
    }

    #[test]
    fn f32_record_round_trips() {
        let r = TensorRecord::from_f32("w", &[2, 2], &[1.0, -1.0, 0.5, 0.0]);
        let back = decode_container(&encode_container(std::slice::from_ref(&r)).unwrap()).unwrap();
        assert_eq!(back, vec![r.clone()]);
        assert_eq!(back[0].to_f32().unwrap(), vec![1.0, -1.0, 0.5, 0.0]);
    }

    #[test]
    fn five_codes_take_two_bytes() {
        let codes = [1, 0, -1, 1, 0];
        let packed = pack_ternary(&codes).unwrap();
        // index0=01, index1=00, index2=10, index3=01 -> 0b01_10_00_01
        assert_eq!(packed, vec![0b0110_0001, 0b0000_0000]);
        assert_eq!(unpack_ternary(&packed, 5).unwrap(), codes);
    }

    /// Scalar reference: pack via base-4 digits, one code at a time.
    fn oracle_pack(codes: &[i8]) -> Vec<u8> {
        let mut out = Vec::new();
        for chunk in codes.chunks(4) {
            let mut byte = 0u32;
            let mut weight = 1u32;
            for &c in chunk {
                let digit = match c {
                    0 => 0,
                    1 => 1,
                    -1 => 2,
                    _ => unreachable!(),
                };
                byte += digit * weight;
                weight *= 4;
            }
            out.push(byte as u8);
        }
        out
    }

    #[test]
    fn pack_matches_oracle_on_all_five_code_sequences() {
        for mut k in 0..3usize.pow(5) {
            let mut codes = [0i8; 5];
            for c in codes.iter_mut() {
                *c = [-1, 0, 1][k % 3];
                k /= 3;
            }
            let packed = pack_ternary(&codes).unwrap();
            assert_eq!(packed, oracle_pack(&codes));
            assert_eq!(unpack_ternary(&packed, 5).unwrap(), codes);
        }
    }

    #[test]
    fn reserved_code_and_padding_rejected() {
        assert!(matches!(unpack_ternary(&[0b11], 1), Err(Error::InvalidTernaryCode { index: 0 })));
        assert!(matches!(unpack_ternary(&[0b0100], 1), Err(Error::NonZeroTernaryPadding)));
        assert!(matches!(pack_ternary(&[2]), Err(Error::InvalidTernaryCode { index: 0 })));
    }

    #[test]
    fn length_mismatch_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.qntz");
        let mut r = TensorRecord::from_f32("w", &[2, 2], &[0.0; 4]);
        r.data.pop();
        assert!(matches!(save_container(&[r], &path), Err(Error::InvalidRecord { .. })));
        assert!(!path.exists());
    }

    #[test]
    fn duplicate_names_rejected() {
        let r = TensorRecord::from_f32("w", &[1], &[0.0]);
        assert!(matches!(encode_container(&[r.clone(), r.clone()]), Err(Error::DuplicateName(n)) if n == "w"));
        // hand-build a container with a duplicate to exercise the decoder path
        let mut bytes = encode_container(std::slice::from_ref(&r)).unwrap();
        let body = bytes[10..].to_vec();
        bytes[6..10].copy_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&body);
        assert!(matches!(decode_container(&bytes), Err(Error::DuplicateName(n)) if n == "w"));
    }

    #[test]
    fn malformed_and_truncated_are_distinct() {
        assert!(matches!(decode_container(b"QNTZ2\0\0\0\0\0"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_container(b"QNTZ1\0\x01"), Err(Error::MalformedHeader(_))));
        let r = TensorRecord::from_f32("weights", &[3], &[1.0, 2.0, 3.0]);
        let bytes = encode_container(&[r]).unwrap();
        match decode_container(&bytes[..bytes.len() - 1]) {
            Err(Error::Truncated { record, .. }) => assert_eq!(record, "weights"),
            other => panic!("expected truncation, got {other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_container(&extra), Err(Error::MalformedHeader(_))));
        let mut bad_dtype = bytes;
        bad_dtype[10 + 2 + 7] = 9;
        assert!(matches!(decode_container(&bad_dtype), Err(Error::UnknownDType { code: 9, .. })));
    }

    #[test]
    fn store_replaces_in_place() {
        let mut s = TensorStore::new();
        s.insert(TensorRecord::from_f32("a", &[1], &[1.0]));
        s.insert(TensorRecord::from_f32("b", &[1], &[2.0]));
        s.insert(TensorRecord::from_f32("a", &[1], &[3.0]));
        assert_eq!(s.len(), 2);
        assert_eq!(s.records()[0].to_f32().unwrap(), vec![3.0]);
        assert!(matches!(s.require("l", "zz"), Err(Error::DanglingTensor { .. })));
    }
}
