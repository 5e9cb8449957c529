//! Binary tensor container: load and save [`TensorMap`]s bit-exactly.
//!
//! Wire layout (little-endian throughout):
//!
//! ```text
//! ┌────────────────┬──────────────────────┬──────────────────────────┐
//! │ header length  │ JSON header          │ raw tensor payload       │
//! │ u64 LE, 8 bytes│ UTF-8, that many     │ concatenated f32 LE      │
//! │                │ bytes                │ buffers, row-major       │
//! └────────────────┴──────────────────────┴──────────────────────────┘
//! ```
//!
//! The JSON header maps each tensor key to
//! `{"dtype": "F32", "shape": [...], "data_offsets": [begin, end]}`, with
//! offsets measured from the end of the header. An optional `"__metadata__"`
//! entry carries a string-to-string map. Only `F32` data is supported.
//!
//! Writing assigns offsets in key-sorted order and serializes the header
//! with sorted keys, so saving the same map twice produces identical bytes.
//! In-memory values are `f64`; saving narrows each value to `f32`, loading
//! widens exactly, so load-then-save round-trips files bit-for-bit.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorMap};

/// Reserved header key for the metadata map.
const METADATA_KEY: &str = "__metadata__";

/// Upper bound on the declared header size; anything larger is treated as
/// a corrupt length field rather than an allocation request.
const MAX_HEADER_BYTES: u64 = 1 << 31;

/// Options controlling validation during load.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Accept NaN/Inf values instead of rejecting the file.
    pub allow_nonfinite: bool,
}

/// Serialize a map to container bytes.
pub fn tensor_map_to_bytes(map: &TensorMap) -> Vec<u8> {
    let mut header = Map::new();
    if !map.metadata().is_empty() {
        let meta: Map<String, Value> = map
            .metadata()
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
    }

    let mut payload: Vec<u8> = Vec::new();
    for (key, tensor) in map.iter() {
        let begin = payload.len();
        for &v in tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        header.insert(
            key.clone(),
            json!({
                "dtype": "F32",
                "shape": tensor.shape(),
                "data_offsets": [begin, payload.len()],
            }),
        );
    }

    // serde_json maps are BTree-backed: header bytes are key-sorted and
    // therefore identical across runs.
    let header_bytes = serde_json::to_string(&Value::Object(header))
        .expect("header serialization cannot fail")
        .into_bytes();

    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out
}

/// Parse container bytes into a map.
pub fn tensor_map_from_bytes(bytes: &[u8], options: &LoadOptions) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(Error::CorruptFile(format!(
            "file is {} bytes, too short for the 8-byte header length",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::CorruptFile(format!(
            "declared header length {header_len} exceeds the {MAX_HEADER_BYTES}-byte cap"
        )));
    }
    let header_len = header_len as usize;
    if bytes.len() - 8 < header_len {
        return Err(Error::CorruptFile(format!(
            "declared header length {header_len} exceeds the {} bytes present",
            bytes.len() - 8
        )));
    }
    let header_str = std::str::from_utf8(&bytes[8..8 + header_len])
        .map_err(|e| Error::Parse(format!("header is not valid UTF-8: {e}")))?;
    let header: Value = serde_json::from_str(header_str)
        .map_err(|e| Error::Parse(format!("header is not valid JSON: {e}")))?;
    let Value::Object(entries) = header else {
        return Err(Error::Parse("header must be a JSON object".into()));
    };
    let payload = &bytes[8 + header_len..];

    let mut map = TensorMap::new();
    for (key, value) in entries {
        if key == METADATA_KEY {
            let Value::Object(meta) = value else {
                return Err(Error::Parse("__metadata__ must be a JSON object".into()));
            };
            for (mk, mv) in meta {
                let Value::String(s) = mv else {
                    return Err(Error::Parse(format!(
                        "__metadata__ value for {mk:?} must be a string"
                    )));
                };
                map.set_metadata(mk, s);
            }
            continue;
        }
        let tensor = parse_tensor_entry(&key, &value, payload, options)?;
        map.insert(key, tensor)?;
    }
    Ok(map)
}

fn parse_tensor_entry(
    key: &str,
    value: &Value,
    payload: &[u8],
    options: &LoadOptions,
) -> Result<Tensor> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Parse(format!("entry for {key:?} must be a JSON object")))?;

    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Parse(format!("entry for {key:?} is missing a string dtype")))?;
    if dtype != "F32" {
        return Err(Error::UnsupportedDtype { key: key.to_string(), found: dtype.to_string() });
    }

    let shape: Vec<usize> = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse(format!("entry for {key:?} is missing a shape array")))?
        .iter()
        .map(|v| {
            v.as_u64()
                .map(|d| d as usize)
                .ok_or_else(|| Error::Parse(format!("non-integer dim in shape of {key:?}")))
        })
        .collect::<Result<_>>()?;
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::Parse(format!(
            "tensor {key:?} has rank {}, only rank 1 and 2 are supported",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Parse(format!("tensor {key:?} has a zero dimension")));
    }

    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse(format!("entry for {key:?} is missing data_offsets")))?;
    let [begin, end] = offsets.as_slice() else {
        return Err(Error::Parse(format!("data_offsets of {key:?} must have exactly two entries")));
    };
    let begin = begin
        .as_u64()
        .ok_or_else(|| Error::Parse(format!("non-integer offset in {key:?}")))? as usize;
    let end = end
        .as_u64()
        .ok_or_else(|| Error::Parse(format!("non-integer offset in {key:?}")))? as usize;

    let count: usize = shape.iter().product();
    if end < begin || end - begin != count * 4 {
        return Err(Error::CorruptFile(format!(
            "tensor {key:?} spans {} bytes but its shape needs {}",
            end.saturating_sub(begin),
            count * 4
        )));
    }
    if end > payload.len() {
        return Err(Error::CorruptFile(format!(
            "tensor {key:?} ends at byte {end} but the payload holds {}",
            payload.len()
        )));
    }

    let mut data = Vec::with_capacity(count);
    for chunk in payload[begin..end].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        if !options.allow_nonfinite && !v.is_finite() {
            return Err(Error::CorruptFile(format!(
                "tensor {key:?} contains a non-finite value (pass allow_nonfinite to accept)"
            )));
        }
        data.push(v);
    }
    match shape[..] {
        [_] => Tensor::vector(data),
        [rows, cols] => Tensor::matrix(rows, cols, data),
        _ => unreachable!("rank validated above"),
    }
}

/// Save a map to `path`. The write is not atomic; callers that need
/// all-or-nothing semantics (the CLI does) write to a temp file and rename.
pub fn save_tensor_map(path: impl AsRef<Path>, map: &TensorMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor_map_to_bytes(map))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a map from `path`, rejecting NaN/Inf values.
pub fn load_tensor_map(path: impl AsRef<Path>) -> Result<TensorMap> {
    load_tensor_map_with(path, &LoadOptions::default())
}

/// Load a map from `path` with explicit validation options.
pub fn load_tensor_map_with(path: impl AsRef<Path>, options: &LoadOptions) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    tensor_map_from_bytes(&bytes, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> TensorMap {
        let mut map = TensorMap::new();
        map.insert("w.b", Tensor::matrix(2, 2, vec![1.0, -2.0, 3.5, 0.25]).unwrap()).unwrap();
        map.insert("w.a", Tensor::vector(vec![0.5, -0.5, 8.0]).unwrap()).unwrap();
        map.set_metadata("source_id", "unit");
        map
    }

    #[test]
    fn round_trip_preserves_values_and_metadata() {
        let map = sample_map();
        let bytes = tensor_map_to_bytes(&map);
        let back = tensor_map_from_bytes(&bytes, &LoadOptions::default()).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.metadata().get("source_id").unwrap(), "unit");
    }

    #[test]
    fn byte_serialization_is_deterministic_and_reload_stable() {
        let map = sample_map();
        let a = tensor_map_to_bytes(&map);
        let b = tensor_map_to_bytes(&map);
        assert_eq!(a, b);
        // load ∘ save is the identity on container bytes
        let reloaded = tensor_map_from_bytes(&a, &LoadOptions::default()).unwrap();
        assert_eq!(tensor_map_to_bytes(&reloaded), a);
    }

    #[test]
    fn header_layout_matches_wire_format() {
        let bytes = tensor_map_to_bytes(&sample_map());
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: Value =
            serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        assert_eq!(header["w.a"]["dtype"], "F32");
        assert_eq!(header["w.a"]["shape"], json!([3]));
        // "w.a" sorts before "w.b", so it owns the first payload bytes.
        assert_eq!(header["w.a"]["data_offsets"], json!([0, 12]));
        assert_eq!(header["w.b"]["data_offsets"], json!([12, 28]));
        assert_eq!(header["__metadata__"]["source_id"], "unit");
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let bytes = tensor_map_to_bytes(&sample_map());
        let cut = &bytes[..bytes.len() - 4];
        let err = tensor_map_from_bytes(cut, &LoadOptions::default()).unwrap_err();
        assert_eq!(err.code(), "CorruptFile");
    }

    #[test]
    fn oversized_header_length_is_corrupt() {
        let mut bytes = tensor_map_to_bytes(&sample_map());
        let huge = (bytes.len() as u64) * 10;
        bytes[..8].copy_from_slice(&huge.to_le_bytes());
        let err = tensor_map_from_bytes(&bytes, &LoadOptions::default()).unwrap_err();
        assert_eq!(err.code(), "CorruptFile");
    }

    #[test]
    fn malformed_json_header_is_parse_error() {
        let mut bytes = Vec::new();
        let header = b"{not json";
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        let err = tensor_map_from_bytes(&bytes, &LoadOptions::default()).unwrap_err();
        assert_eq!(err.code(), "ParseError");
    }

    #[test]
    fn unsupported_dtype_is_reported_with_the_found_name() {
        let header = br#"{"x":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        let err = tensor_map_from_bytes(&bytes, &LoadOptions::default()).unwrap_err();
        assert_eq!(err.code(), "UnsupportedDtype");
        assert!(err.to_string().contains("F64"));
    }

    #[test]
    fn nonfinite_values_need_the_override() {
        let mut map = TensorMap::new();
        map.insert("x", Tensor::vector(vec![f64::NAN, 1.0]).unwrap()).unwrap();
        let bytes = tensor_map_to_bytes(&map);
        assert!(tensor_map_from_bytes(&bytes, &LoadOptions::default()).is_err());
        let opts = LoadOptions { allow_nonfinite: true };
        let back = tensor_map_from_bytes(&bytes, &opts).unwrap();
        assert!(back.get("x").unwrap().data()[0].is_nan());
    }

    #[test]
    fn empty_map_round_trips() {
        let map = TensorMap::new();
        let bytes = tensor_map_to_bytes(&map);
        let back = tensor_map_from_bytes(&bytes, &LoadOptions::default()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.bin");
        let map = sample_map();
        save_tensor_map(&path, &map).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_tensor_map(&path).unwrap();
        save_tensor_map(&path, &loaded).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }
}
