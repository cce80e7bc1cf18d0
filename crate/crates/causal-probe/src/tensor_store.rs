//! Named-tensor archive: the container shared by encoder weight files and
//! training checkpoints.
//!
//! Layout: magic `CPTS`, version u16, u32 manifest length, JSON manifest
//! (name / dtype / shape / offset / len per tensor, offsets relative to the
//! data section), then the concatenated raw little-endian f64 data.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CPTS";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: usize,
    /// Element count.
    len: usize,
}

/// Serialize tensors to bytes. Entries are laid out in name order, so equal
/// maps produce identical bytes.
pub fn tensors_to_bytes(tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, tensor) in tensors {
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor {name}")));
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.len(),
        });
        offset += tensor.len();
    }
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut out =
        Vec::with_capacity(4 + 2 + 4 + manifest_json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for tensor in tensors.values() {
        for v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse an archive produced by [`tensors_to_bytes`].
pub fn tensors_from_bytes(bytes: &[u8]) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let need = |offset: usize, n: usize, what: &str| -> Result<()> {
        if offset + n > bytes.len() {
            Err(Error::Parse {
                offset,
                message: format!("truncated while reading {what}"),
            })
        } else {
            Ok(())
        }
    };
    need(0, 6, "header")?;
    if &bytes[0..4] != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {:?}", &bytes[0..4]),
        });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    need(6, 4, "manifest length")?;
    let manifest_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    need(10, manifest_len, "manifest")?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(&bytes[10..10 + manifest_len]).map_err(|e| Error::Parse {
            offset: 10,
            message: format!("manifest JSON: {e}"),
        })?;
    let data_start = 10 + manifest_len;
    let data = &bytes[data_start..];
    if !data.len().is_multiple_of(8) {
        return Err(Error::Parse {
            offset: data_start,
            message: "data section is not a whole number of f64 values".into(),
        });
    }
    let total_elems = data.len() / 8;

    let mut out = BTreeMap::new();
    let mut expected_offset = 0usize;
    for entry in &manifest {
        if entry.dtype != "f64" {
            return Err(Error::Parse {
                offset: data_start,
                message: format!("tensor {}: unsupported dtype {}", entry.name, entry.dtype),
            });
        }
        let shape_elems: usize = entry.shape.iter().product();
        if shape_elems != entry.len || entry.offset != expected_offset {
            return Err(Error::Parse {
                offset: data_start,
                message: format!("tensor {}: inconsistent manifest entry", entry.name),
            });
        }
        if entry.offset + entry.len > total_elems {
            return Err(Error::Parse {
                offset: data_start + entry.offset * 8,
                message: format!("tensor {}: data truncated", entry.name),
            });
        }
        let mut values = Vec::with_capacity(entry.len);
        for k in 0..entry.len {
            let at = (entry.offset + k) * 8;
            values.push(f64::from_le_bytes(data[at..at + 8].try_into().unwrap()));
        }
        let tensor = ArrayD::from_shape_vec(entry.shape.clone(), values).map_err(|e| {
            Error::Parse {
                offset: data_start,
                message: format!("tensor {}: {e}", entry.name),
            }
        })?;
        if out.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::Parse {
                offset: 10,
                message: format!("duplicate tensor name {}", entry.name),
            });
        }
        expected_offset += entry.len;
    }
    if expected_offset != total_elems {
        return Err(Error::Parse {
            offset: data_start + expected_offset * 8,
            message: "trailing data after last tensor".into(),
        });
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let bytes = tensors_to_bytes(tensors)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let bytes = std::fs::read(path)?;
    tensors_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, ArrayD<f64>> {
        let mut map = BTreeMap::new();
        map.insert(
            "encoder.embed.w".to_string(),
            ArrayD::from_shape_vec(vec![2, 3], vec![1.0, -2.5, 0.25, 1e-300, 3.7, -0.0]).unwrap(),
        );
        map.insert("scalar".to_string(), ArrayD::from_elem(vec![1], 42.0));
        map.insert(
            "zeros".to_string(),
            ArrayD::zeros(vec![4, 1, 2]),
        );
        map
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let map = sample();
        let bytes = tensors_to_bytes(&map).unwrap();
        let back = tensors_from_bytes(&bytes).unwrap();
        assert_eq!(map.len(), back.len());
        for (name, tensor) in &map {
            let got = &back[name];
            assert_eq!(tensor.shape(), got.shape());
            for (a, b) in tensor.iter().zip(got.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // Deterministic layout: serializing again gives identical bytes.
        assert_eq!(bytes, tensors_to_bytes(&back).unwrap());
    }

    #[test]
    fn truncation_and_corruption_are_parse_errors() {
        let bytes = tensors_to_bytes(&sample()).unwrap();
        for cut in [0, 3, 8, 12, bytes.len() - 5] {
            assert!(matches!(
                tensors_from_bytes(&bytes[..cut]),
                Err(Error::Parse { .. }) | Err(Error::VersionMismatch { .. })
            ));
        }
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(tensors_from_bytes(&bad_magic).is_err());
    }

    #[test]
    fn non_finite_tensors_are_rejected_on_write() {
        let mut map = BTreeMap::new();
        map.insert("bad".to_string(), ArrayD::from_elem(vec![2], f64::NAN));
        assert!(matches!(tensors_to_bytes(&map), Err(Error::NonFinite(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.cpts");
        let map = sample();
        write_tensors(&path, &map).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(map, back);
    }
}
