use std::collections::BTreeMap;
use std::io::Write;

use serde_json::{json, Map, Value};

use super::{Dtype, METADATA_KEY};
use crate::error::{Error, Result};

/// Name, dtype and shape of one tensor to be written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, dtype: Dtype, shape: &[usize]) -> Self {
        Self { name: name.into(), dtype, shape: shape.to_vec() }
    }

    fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Streams a checkpoint to `out`.
///
/// Data offsets follow the order of `specs`. `fill(i, buf)` must leave exactly
/// the elements of `specs[i]` in `buf` (row-major, as `f32`); they are narrowed
/// to the tensor's dtype on write. The header is padded with spaces to a
/// multiple of 8 bytes. Returns the number of bytes written.
pub fn write_checkpoint<W: Write>(
    out: &mut W,
    specs: &[TensorSpec],
    metadata: &BTreeMap<String, String>,
    mut fill: impl FnMut(usize, &mut Vec<f32>) -> Result<()>,
) -> Result<u64> {
    let mut header = Map::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.into(), json!(metadata));
    }
    let mut offset = 0u64;
    for spec in specs {
        if spec.shape.is_empty() || spec.shape.contains(&0) {
            return Err(Error::contract(format!("tensor {:?} has an empty shape", spec.name)));
        }
        let bytes = (spec.elements() * spec.dtype.size()) as u64;
        let prev = header.insert(
            spec.name.clone(),
            json!({
                "dtype": spec.dtype.as_str(),
                "shape": spec.shape,
                "data_offsets": [offset, offset + bytes],
            }),
        );
        if prev.is_some() {
            return Err(Error::contract(format!("duplicate tensor name {:?}", spec.name)));
        }
        offset += bytes;
    }
    let mut text = serde_json::to_string(&Value::Object(header)).expect("header serializes");
    while !text.len().is_multiple_of(8) {
        text.push(' ');
    }
    out.write_all(&(text.len() as u64).to_le_bytes())?;
    out.write_all(text.as_bytes())?;

    let mut values = Vec::new();
    let mut raw = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        values.clear();
        fill(i, &mut values)?;
        if values.len() != spec.elements() {
            return Err(Error::contract(format!(
                "tensor {:?} expects {} values, got {}",
                spec.name,
                spec.elements(),
                values.len()
            )));
        }
        raw.clear();
        spec.dtype.encode_into(&values, &mut raw);
        out.write_all(&raw)?;
    }
    Ok(8 + text.len() as u64 + offset)
}
