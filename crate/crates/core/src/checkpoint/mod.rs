//! Tensor-container checkpoints.
//!
//! Layout: an 8-byte little-endian header length `N`, then `N` bytes of UTF-8
//! JSON mapping tensor names to `{dtype, shape, data_offsets}`, then the flat
//! data region that `data_offsets` index into. An optional `__metadata__`
//! entry holds string-to-string pairs.
//!
//! Tensors are decoded in bounded chunks, so reading a record never holds
//! more than its decoded `f32`/`f64` values plus [`DECODE_CHUNK`] raw bytes.

mod layers;
mod source;
mod synth;
mod writer;

use std::collections::BTreeMap;

use half::{bf16, f16};
use serde_json::Value;

use crate::error::{Error, HeaderError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use layers::{enumerate_layers, LayerTensorMap, LayerTensors, NamingScheme, Role};
pub use source::{ByteSource, FileSource};
pub use synth::{synth_attention_checkpoint, synth_checkpoint, AttentionShape, Suppression};
pub use writer::{write_checkpoint, TensorSpec};

/// Raw bytes decoded per read call.
pub const DECODE_CHUNK: usize = 1 << 20;

/// Header length above which a file is rejected outright.
pub const MAX_HEADER_BYTES: u64 = 100 << 20;

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dtype {
    F16,
    BF16,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::F32 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::F32 => "F32",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            "F32" => Some(Dtype::F32),
            _ => None,
        }
    }

    fn decode_into<T: Scalar>(self, raw: &[u8], out: &mut Vec<T>) {
        match self {
            Dtype::F32 => {
                out.extend(raw.chunks_exact(4).map(|b| T::widen(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))))
            }
            Dtype::F16 => out.extend(raw.chunks_exact(2).map(|b| T::widen(f16::from_le_bytes([b[0], b[1]]).to_f32()))),
            Dtype::BF16 => {
                out.extend(raw.chunks_exact(2).map(|b| T::widen(bf16::from_le_bytes([b[0], b[1]]).to_f32())))
            }
        }
    }

    pub(crate) fn encode_into(self, values: &[f32], out: &mut Vec<u8>) {
        match self {
            Dtype::F32 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F16 => values.iter().for_each(|&v| out.extend_from_slice(&f16::from_f32(v).to_le_bytes())),
            Dtype::BF16 => values.iter().for_each(|&v| out.extend_from_slice(&bf16::from_f32(v).to_le_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// `[begin, end)` relative to the start of the data region.
    pub begin: u64,
    pub end: u64,
}

impl TensorRecord {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.end - self.begin
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointIndex {
    /// Length `N` of the JSON header.
    pub header_bytes: u64,
    pub records: BTreeMap<String, TensorRecord>,
    pub data_region_length: u64,
    pub metadata: BTreeMap<String, String>,
}

impl CheckpointIndex {
    /// Absolute file offset of the data region.
    pub fn data_offset(&self) -> u64 {
        8 + self.header_bytes
    }

    pub fn get(&self, name: &str) -> Result<&TensorRecord> {
        self.records.get(name).ok_or_else(|| Error::Format(format!("tensor {name:?} not in checkpoint")))
    }

    /// Parses the index of a complete in-memory file.
    pub fn from_bytes(file: &[u8]) -> Result<Self, HeaderError> {
        parse_header(file, file.len() as u64)
    }
}

/// Parses and validates the header found at the start of `prefix`.
///
/// `prefix` must contain at least the length word and the header; `file_len`
/// is the size of the whole file, which bounds the data region.
pub fn parse_header(prefix: &[u8], file_len: u64) -> Result<CheckpointIndex, HeaderError> {
    if prefix.len() < 8 || file_len < 8 {
        return Err(HeaderError::TruncatedPrefix(prefix.len().min(file_len as usize)));
    }
    let declared = u64::from_le_bytes(prefix[..8].try_into().expect("8 bytes"));
    let available = (prefix.len() as u64 - 8).min(file_len - 8);
    if declared > available || declared > MAX_HEADER_BYTES {
        return Err(HeaderError::HeaderLength { declared, available });
    }
    let header = &prefix[8..8 + declared as usize];
    let text = std::str::from_utf8(header).map_err(|_| HeaderError::NotUtf8)?;
    let root: Value = serde_json::from_str(text).map_err(|e| HeaderError::NotJson(e.to_string()))?;
    let Value::Object(entries) = root else {
        return Err(HeaderError::NotJson("top level is not an object".into()));
    };

    let data_region_length = file_len - 8 - declared;
    let mut records = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for (name, value) in entries {
        if name == METADATA_KEY {
            metadata = parse_metadata(&value)?;
            continue;
        }
        let record = parse_record(&name, &value)?;
        if record.end > data_region_length {
            return Err(HeaderError::OutOfBounds {
                name,
                begin: record.begin,
                end: record.end,
                len: data_region_length,
            });
        }
        records.insert(name, record);
    }

    let mut by_offset: Vec<&TensorRecord> = records.values().collect();
    by_offset.sort_by_key(|r| (r.begin, r.end));
    for pair in by_offset.windows(2) {
        if pair[0].end > pair[1].begin {
            return Err(HeaderError::Overlap { first: pair[0].name.clone(), second: pair[1].name.clone() });
        }
    }

    Ok(CheckpointIndex { header_bytes: declared, records, data_region_length, metadata })
}

fn parse_metadata(value: &Value) -> Result<BTreeMap<String, String>, HeaderError> {
    let invalid = |reason: &str| HeaderError::InvalidRecord { name: METADATA_KEY.into(), reason: reason.into() };
    let Value::Object(map) = value else {
        return Err(invalid("metadata is not an object"));
    };
    map.iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k.clone(), s.clone())),
            _ => Err(invalid("metadata values must be strings")),
        })
        .collect()
}

fn parse_record(name: &str, value: &Value) -> Result<TensorRecord, HeaderError> {
    let invalid = |reason: String| HeaderError::InvalidRecord { name: name.to_owned(), reason };
    let obj = value.as_object().ok_or_else(|| invalid("entry is not an object".into()))?;

    let dtype_str =
        obj.get("dtype").and_then(Value::as_str).ok_or_else(|| invalid("missing string field `dtype`".into()))?;
    let dtype = Dtype::parse(dtype_str)
        .ok_or_else(|| HeaderError::UnknownDtype { name: name.to_owned(), dtype: dtype_str.to_owned() })?;

    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid("missing array field `shape`".into()))?
        .iter()
        .map(|d| match d.as_u64() {
            Some(d) if d > 0 => usize::try_from(d).map_err(|_| invalid(format!("dimension {d} too large"))),
            _ => Err(invalid(format!("dimension {d} is not a positive integer"))),
        })
        .collect::<Result<Vec<usize>, _>>()?;

    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid("missing array field `data_offsets`".into()))?;
    let [begin, end] = offsets.as_slice() else {
        return Err(invalid("`data_offsets` must have two entries".into()));
    };
    let (Some(begin), Some(end)) = (begin.as_u64(), end.as_u64()) else {
        return Err(invalid("`data_offsets` entries must be non-negative integers".into()));
    };

    let expected = shape
        .iter()
        .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| invalid("shape overflows".into()))?;
    let actual = end.saturating_sub(begin);
    if end < begin || expected != actual {
        return Err(HeaderError::ByteLengthMismatch { name: name.to_owned(), shape, expected, actual });
    }

    Ok(TensorRecord { name: name.to_owned(), dtype, shape, begin, end })
}

/// Reads the length word and header from `source` and parses them.
pub fn read_index(source: &dyn ByteSource) -> Result<CheckpointIndex> {
    let file_len = source.len()?;
    if file_len < 8 {
        return Err(HeaderError::TruncatedPrefix(file_len as usize).into());
    }
    let mut len = [0u8; 8];
    source.read_at(0, &mut len)?;
    let declared = u64::from_le_bytes(len);
    if declared > file_len - 8 || declared > MAX_HEADER_BYTES {
        return Err(HeaderError::HeaderLength { declared, available: file_len - 8 }.into());
    }
    let mut prefix = vec![0u8; 8 + declared as usize];
    source.read_at(0, &mut prefix)?;
    Ok(parse_header(&prefix, file_len)?)
}

/// Decodes every element of `record`, widening to `T`.
pub fn read_elements<T: Scalar>(
    index: &CheckpointIndex,
    record: &TensorRecord,
    source: &dyn ByteSource,
) -> Result<Vec<T>> {
    let total = record.byte_len() as usize;
    let mut out = Vec::with_capacity(record.element_count());
    let chunk_len = DECODE_CHUNK - DECODE_CHUNK % record.dtype.size();
    let mut buf = vec![0u8; chunk_len.min(total)];
    let mut done = 0usize;
    while done < total {
        let n = chunk_len.min(total - done);
        source.read_at(index.data_offset() + record.begin + done as u64, &mut buf[..n])?;
        record.dtype.decode_into(&buf[..n], &mut out);
        done += n;
    }
    Ok(out)
}

/// Reads a rank-2 tensor in its stored orientation.
pub fn read_tensor<T: Scalar>(index: &CheckpointIndex, name: &str, source: &dyn ByteSource) -> Result<Matrix<T>> {
    let record = index.get(name)?;
    let &[rows, cols] = record.shape.as_slice() else {
        return Err(Error::Format(format!("tensor {name:?} has rank {}, expected 2", record.shape.len())));
    };
    Matrix::new(rows, cols, read_elements(index, record, source)?)
}

/// Reads a rank-1 tensor such as a norm gain.
pub fn read_vector<T: Scalar>(index: &CheckpointIndex, name: &str, source: &dyn ByteSource) -> Result<Vec<T>> {
    let record = index.get(name)?;
    if record.shape.len() != 1 {
        return Err(Error::Format(format!("tensor {name:?} has rank {}, expected 1", record.shape.len())));
    }
    read_elements(index, record, source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assemble(header: &str, data: &[u8]) -> Vec<u8> {
        let mut file = (header.len() as u64).to_le_bytes().to_vec();
        file.extend_from_slice(header.as_bytes());
        file.extend_from_slice(data);
        file
    }

    fn f32_bytes(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn hand_assembled_single_tensor() {
        let file =
            assemble(r#"{"a":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#, &f32_bytes(&[1.0, 2.0, 3.0, 4.0]));
        let index = CheckpointIndex::from_bytes(&file).unwrap();
        assert_eq!(index.records.len(), 1);
        let rec = &index.records["a"];
        assert_eq!((rec.begin, rec.end), (0, 16));
        assert_eq!(index.data_region_length, 16);
        let m: Matrix<f32> = read_tensor(&index, "a", &file).unwrap();
        assert_eq!(m, Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    }

    #[test]
    fn byte_length_mismatch_is_reported() {
        let file = assemble(r#"{"a":{"dtype":"F32","shape":[2,2],"data_offsets":[0,15]}}"#, &[0u8; 16]);
        let err = CheckpointIndex::from_bytes(&file).unwrap_err();
        assert!(
            matches!(err, HeaderError::ByteLengthMismatch { ref name, expected: 16, actual: 15, .. } if name == "a")
        );
    }

    #[test]
    fn empty_record_set_and_metadata() {
        let file = assemble(r#"{"__metadata__":{"format":"pt"}}"#, &[]);
        let index = CheckpointIndex::from_bytes(&file).unwrap();
        assert!(index.records.is_empty());
        assert_eq!(index.metadata["format"], "pt");
        let file = assemble("{}", &[]);
        assert!(CheckpointIndex::from_bytes(&file).unwrap().records.is_empty());
    }

    #[test]
    fn distinct_header_errors() {
        assert!(matches!(parse_header(&[1, 2, 3], 3), Err(HeaderError::TruncatedPrefix(3))));

        let mut file = assemble("{}", &[]);
        file[0] = 200;
        assert!(matches!(CheckpointIndex::from_bytes(&file), Err(HeaderError::HeaderLength { .. })));

        let mut file = assemble("{\"\u{e9}\":1}", &[]);
        file[10] = 0xff;
        assert_eq!(CheckpointIndex::from_bytes(&file), Err(HeaderError::NotUtf8));

        let file = assemble("[1,2]", &[]);
        assert!(matches!(CheckpointIndex::from_bytes(&file), Err(HeaderError::NotJson(_))));

        let file = assemble(r#"{"w":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#, &[0]);
        assert!(
            matches!(CheckpointIndex::from_bytes(&file), Err(HeaderError::UnknownDtype { ref dtype, .. }) if dtype == "I8")
        );

        let file = assemble(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
            &[0u8; 12],
        );
        assert!(matches!(CheckpointIndex::from_bytes(&file), Err(HeaderError::Overlap { .. })));

        let file = assemble(r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#, &[0u8; 8]);
        assert!(
            matches!(CheckpointIndex::from_bytes(&file), Err(HeaderError::OutOfBounds { ref name, .. }) if name == "a")
        );

        let file = assemble(r#"{"a":{"dtype":"F32","shape":[0],"data_offsets":[0,0]}}"#, &[]);
        assert!(matches!(CheckpointIndex::from_bytes(&file), Err(HeaderError::InvalidRecord { .. })));
    }

    #[test]
    fn half_precision_decoding() {
        let file = assemble(
            r#"{"h":{"dtype":"F16","shape":[1,2],"data_offsets":[0,4]},"b":{"dtype":"BF16","shape":[2],"data_offsets":[4,8]}}"#,
            &[0x00, 0x3c, 0x00, 0xc0, 0x00, 0xc0, 0x80, 0x3f],
        );
        let index = CheckpointIndex::from_bytes(&file).unwrap();
        let h: Matrix<f32> = read_tensor(&index, "h", &file).unwrap();
        assert_eq!(h.data(), &[1.0, -2.0]);
        let b: Vec<f32> = read_vector(&index, "b", &file).unwrap();
        assert_eq!(b, vec![-2.0, 1.0]);
        assert!(read_tensor::<f32>(&index, "b", &file).is_err());
        assert!(read_vector::<f32>(&index, "h", &file).is_err());
        assert!(read_tensor::<f32>(&index, "missing", &file).is_err());
    }

    #[test]
    fn chunked_decode_spans_many_chunks() {
        let n = DECODE_CHUNK / 2 + 37;
        let values: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let header = format!(r#"{{"v":{{"dtype":"F32","shape":[{n}],"data_offsets":[0,{}]}}}}"#, n * 4);
        let file = assemble(&header, &f32_bytes(&values));
        let index = CheckpointIndex::from_bytes(&file).unwrap();
        let got: Vec<f32> = read_vector(&index, "v", &file).unwrap();
        assert_eq!(got, values);
    }
}
