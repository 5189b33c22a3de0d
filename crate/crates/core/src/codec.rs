//! Shared float32 binary format.
//!
//! A block is a 16-byte header followed by little-endian `f32` values:
//!
//! | bytes  | content                         |
//! |--------|---------------------------------|
//! | 0..4   | magic `SCLT`                    |
//! | 4..8   | format version, `u32` LE (1)    |
//! | 8..16  | value count, `u64` LE           |
//!
//! Artifacts that carry metadata (channel stats, mapper checkpoints) use a
//! framed layout: a `u64` LE byte length, that many bytes of JSON header, then
//! one or more blocks back to back.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{EditError, Result};

pub const MAGIC: &[u8; 4] = b"SCLT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Encodes values as one block. Values are narrowed to `f32`.
pub fn encode_block(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    write_block(&mut out, values);
    out
}

fn write_block(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Decodes a single block that must span the whole buffer.
pub fn decode_block(bytes: &[u8]) -> Result<Vec<f64>> {
    let (values, used) = read_block(bytes)?;
    if used != bytes.len() {
        return Err(EditError::Format(format!(
            "{} trailing bytes after block",
            bytes.len() - used
        )));
    }
    Ok(values)
}

/// Reads one block from the front of `bytes`, returning the values and the
/// number of bytes consumed.
pub fn read_block(bytes: &[u8]) -> Result<(Vec<f64>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(EditError::Format(format!(
            "block header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(EditError::Format("bad magic, expected SCLT".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(EditError::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let count = usize::try_from(count)
        .map_err(|_| EditError::Format(format!("value count {count} too large")))?;
    let end = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| EditError::Format("value count overflows".into()))?;
    if bytes.len() < end {
        return Err(EditError::Format(format!(
            "block declares {count} values but only {} bytes follow the header",
            bytes.len() - HEADER_LEN
        )));
    }
    let values = bytes[HEADER_LEN..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((values, end))
}

/// Encodes a JSON header followed by blocks.
pub fn encode_framed<H: Serialize>(header: &H, blocks: &[&[f64]]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for block in blocks {
        write_block(&mut out, block);
    }
    Ok(out)
}

/// Decodes a framed artifact, requiring exactly `block_count` blocks.
pub fn decode_framed<H: DeserializeOwned>(
    bytes: &[u8],
    block_count: usize,
) -> Result<(H, Vec<Vec<f64>>)> {
    if bytes.len() < 8 {
        return Err(EditError::Format("framed artifact truncated".into()));
    }
    let json_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let json_end = 8usize
        .checked_add(json_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| EditError::Format("framed header truncated".into()))?;
    let header = serde_json::from_slice(&bytes[8..json_end])?;
    let mut offset = json_end;
    let mut blocks = Vec::with_capacity(block_count);
    for _ in 0..block_count {
        let (values, used) = read_block(&bytes[offset..])?;
        blocks.push(values);
        offset += used;
    }
    if offset != bytes.len() {
        return Err(EditError::Format(format!(
            "{} trailing bytes after {block_count} blocks",
            bytes.len() - offset
        )));
    }
    Ok((header, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode_block(&[1.0, -2.5]);
        assert_eq!(&bytes[0..4], b"SCLT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn rejects_corrupt_blocks() {
        let mut bytes = encode_block(&[1.0, 2.0, 3.0]);
        assert!(decode_block(&bytes[..10]).is_err());
        assert!(decode_block(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_block(&bytes).is_err());
        let mut v2 = encode_block(&[1.0]);
        v2[4] = 2;
        assert!(decode_block(&v2).is_err());
        let mut extra = encode_block(&[1.0]);
        extra.push(0);
        assert!(decode_block(&extra).is_err());
    }

    #[test]
    fn framed_round_trip() {
        let header = serde_json::json!({"kind": "test", "n": 3});
        let bytes = encode_framed(&header, &[&[1.0, 2.0], &[0.5]]).unwrap();
        let (h, blocks): (serde_json::Value, _) = decode_framed(&bytes, 2).unwrap();
        assert_eq!(h, header);
        assert_eq!(blocks, vec![vec![1.0, 2.0], vec![0.5]]);
        assert!(decode_framed::<serde_json::Value>(&bytes, 1).is_err());
        assert!(decode_framed::<serde_json::Value>(&bytes, 3).is_err());
    }

    proptest! {
        #[test]
        fn f32_values_round_trip_exactly(values in prop::collection::vec(-1e6f32..1e6f32, 0..64)) {
            let wide: Vec<f64> = values.iter().map(|v| *v as f64).collect();
            let back = decode_block(&encode_block(&wide)).unwrap();
            prop_assert_eq!(back, wide);
        }
    }
}
