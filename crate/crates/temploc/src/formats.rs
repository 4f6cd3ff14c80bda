//! On-disk formats: the TALF binary feature file, the dataset annotation
//! JSON, JSON-Lines proposals/detections, checkpoints, and run manifests.
//!
//! TALF layout: magic `TALF`, version u32, T u32, D u32, cells_per_second
//! f64, then T·D little-endian f32 values row-major (cell-major).

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segments::Segment;
use crate::tensor::{FeatureGrid, Real, Tensor};

pub const TALF_MAGIC: &[u8; 4] = b"TALF";
pub const TALF_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TALC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("unsupported version {version} in {file}")]
    UnsupportedVersion { version: u32, file: String },
    #[error("truncated file {0}")]
    Truncated(String),
    #[error("invalid value in {file}: {reason}")]
    Invalid { file: String, reason: String },
    #[error("json error in {file}: {source}")]
    Json { file: String, source: serde_json::Error },
    #[error("checkpoint config digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], file: &str) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|_| FormatError::Truncated(file.to_string()))
}

fn read_u32(r: &mut impl Read, file: &str) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, file)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, file: &str) -> Result<f64, FormatError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, file)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_features<F: Real>(path: &Path, grid: &FeatureGrid<F>) -> Result<(), FormatError> {
    let mut buf = Vec::with_capacity(20 + grid.data.data.len() * 4);
    buf.extend_from_slice(TALF_MAGIC);
    buf.extend_from_slice(&TALF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(grid.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&grid.cells_per_second.to_le_bytes());
    for v in &grid.data.data {
        buf.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_features<F: Real>(path: &Path) -> Result<FeatureGrid<F>, FormatError> {
    let name = path.display().to_string();
    let mut r = io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &name)?;
    if &magic != TALF_MAGIC {
        return Err(FormatError::BadMagic(name));
    }
    let version = read_u32(&mut r, &name)?;
    if version != TALF_VERSION {
        return Err(FormatError::UnsupportedVersion { version, file: name });
    }
    let t = read_u32(&mut r, &name)? as usize;
    let d = read_u32(&mut r, &name)? as usize;
    let cps = read_f64(&mut r, &name)?;
    if t == 0 || d == 0 || !(cps > 0.0) {
        return Err(FormatError::Invalid { file: name, reason: "bad header dimensions".into() });
    }
    let mut data = Vec::with_capacity(t * d);
    let mut b = [0u8; 4];
    for _ in 0..t * d {
        read_exact(&mut r, &mut b, &name)?;
        data.push(F::from_f64(f32::from_le_bytes(b) as f64));
    }
    Ok(FeatureGrid::new(Tensor::from_vec(data, t, d), cps))
}

/// One annotated instance, times in cell units.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InstanceRecord {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    #[serde(rename = "T")]
    pub t_len: usize,
    pub cells_per_second: f64,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Annotations {
    pub videos: Vec<VideoRecord>,
}

/// Converts an annotated time from seconds to cell units.
pub fn seconds_to_cells(seconds: f64, cells_per_second: f64) -> f64 {
    seconds * cells_per_second
}

pub fn cells_to_seconds(cells: f64, cells_per_second: f64) -> f64 {
    cells / cells_per_second
}

pub fn write_annotations(path: &Path, ann: &Annotations) -> Result<(), FormatError> {
    let file = path.display().to_string();
    let json = serde_json::to_string_pretty(ann).map_err(|source| FormatError::Json { file, source })?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Annotations, FormatError> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let ann: Annotations = serde_json::from_str(&text)
        .map_err(|source| FormatError::Json { file: file.clone(), source })?;
    for v in &ann.videos {
        if v.t_len == 0 || !(v.cells_per_second > 0.0) {
            return Err(FormatError::Invalid {
                file,
                reason: format!("video {}: bad header", v.id),
            });
        }
        for inst in &v.instances {
            if !(inst.end > inst.start) || inst.start < 0.0 || inst.end > v.t_len as f64 {
                return Err(FormatError::Invalid {
                    file,
                    reason: format!("video {}: instance {}..{} out of range", v.id, inst.start, inst.end),
                });
            }
            if inst.label == 0 {
                return Err(FormatError::Invalid {
                    file,
                    reason: format!("video {}: label 0 is reserved for background", v.id),
                });
            }
        }
    }
    Ok(ann)
}

impl InstanceRecord {
    pub fn segment(&self) -> Segment {
        Segment::new(self.start, self.end)
    }
}

/// One proposal or detection line in JSONL output.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ItemRecord {
    pub video: String,
    pub start: f64,
    pub end: f64,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

pub fn write_jsonl(path: &Path, items: &[ItemRecord]) -> Result<(), FormatError> {
    let file = path.display().to_string();
    let mut out = fs::File::create(path)?;
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|source| FormatError::Json { file: file.clone(), source })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ItemRecord>, FormatError> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|source| FormatError::Json { file: file.clone(), source }))
        .collect()
}

/// Versioned checkpoint: named f32 parameter arrays plus the config JSON it
/// was trained with and that JSON's digest. Round-trips bit-exactly.
pub fn write_checkpoint<F: Real>(
    path: &Path,
    config_json: &str,
    params: &[(&str, &Tensor<F>)],
) -> Result<(), FormatError> {
    let digest = config_digest(config_json);
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let digest_bytes = digest.as_bytes();
    buf.extend_from_slice(&(digest_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(digest_bytes);
    let cfg_bytes = config_json.as_bytes();
    buf.extend_from_slice(&(cfg_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_bytes);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols as u32).to_le_bytes());
        for v in &tensor.data {
            buf.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub struct Checkpoint<F> {
    pub config_json: String,
    pub digest: String,
    pub params: Vec<(String, Tensor<F>)>,
}

pub fn read_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>, FormatError> {
    let name = path.display().to_string();
    let mut r = io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &name)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic(name));
    }
    let version = read_u32(&mut r, &name)?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion { version, file: name });
    }
    let digest_len = read_u32(&mut r, &name)? as usize;
    let mut digest = vec![0u8; digest_len];
    read_exact(&mut r, &mut digest, &name)?;
    let cfg_len = read_u32(&mut r, &name)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg, &name)?;
    let config_json = String::from_utf8(cfg)
        .map_err(|_| FormatError::Invalid { file: name.clone(), reason: "config not utf-8".into() })?;
    let digest = String::from_utf8(digest)
        .map_err(|_| FormatError::Invalid { file: name.clone(), reason: "digest not utf-8".into() })?;
    let expected = config_digest(&config_json);
    if digest != expected {
        return Err(FormatError::DigestMismatch { expected, found: digest });
    }
    let count = read_u32(&mut r, &name)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, &name)? as usize;
        let mut nb = vec![0u8; name_len];
        read_exact(&mut r, &mut nb, &name)?;
        let pname = String::from_utf8(nb)
            .map_err(|_| FormatError::Invalid { file: name.clone(), reason: "param name not utf-8".into() })?;
        let rows = read_u32(&mut r, &name)? as usize;
        let cols = read_u32(&mut r, &name)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 4];
        for _ in 0..rows * cols {
            read_exact(&mut r, &mut b, &name)?;
            data.push(F::from_f64(f32::from_le_bytes(b) as f64));
        }
        params.push((pname, Tensor::from_vec(data, rows, cols)));
    }
    Ok(Checkpoint { config_json, digest, params })
}

/// Hex SHA-256 of a canonical config JSON string.
pub fn config_digest(config_json: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(config_json.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.talf");
        let grid = FeatureGrid::new(
            Tensor::from_vec(vec![0.5f32, -1.25, 3.0, 0.0, 7.5, -0.125], 3, 2),
            12.5,
        );
        write_features(&path, &grid).unwrap();
        let back: FeatureGrid<f32> = read_features(&path).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn truncated_features_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.talf");
        let grid = FeatureGrid::new(Tensor::from_vec(vec![1.0f32; 8], 4, 2), 1.0);
        write_features(&path, &grid).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_features::<f32>(&path), Err(FormatError::Truncated(_))));
    }

    #[test]
    fn bad_annotation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.json");
        let ann = Annotations {
            videos: vec![VideoRecord {
                id: "v0".into(),
                t_len: 10,
                cells_per_second: 1.0,
                instances: vec![InstanceRecord { start: 5.0, end: 5.0, label: 1 }],
            }],
        };
        fs::write(&path, serde_json::to_string(&ann).unwrap()).unwrap();
        assert!(matches!(read_annotations(&path), Err(FormatError::Invalid { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let w = Tensor::from_vec(vec![0.1f32, -0.2, 0.3, 123.456], 2, 2);
        let b = Tensor::from_vec(vec![1e-30f32, -0.0], 1, 2);
        write_checkpoint(&path, "{\"k\":1}", &[("layer.w", &w), ("layer.b", &b)]).unwrap();
        let ck: Checkpoint<f32> = read_checkpoint(&path).unwrap();
        assert_eq!(ck.config_json, "{\"k\":1}");
        assert_eq!(ck.params[0].1.data, w.data);
        assert_eq!(ck.params[1].1.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
