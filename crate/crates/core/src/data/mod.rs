//! Exam volumes, the on-disk dataset layout and label manifests.
//!
//! Layout: `<root>/<split>/<plane>/<exam_id>.npy` plus `<root>/<split>-<plane>.csv`
//! holding `exam_id,label` rows (a header line is optional on read).

pub mod augment;
pub mod npy;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const DEFAULT_PLANE: &str = "sagittal";

/// One exam: `f` slices of `H × W` intensities in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub exam_id: String,
    pub slices: Tensor,
    pub label: u8,
    pub plane: String,
}

impl Volume {
    pub fn num_slices(&self) -> usize {
        self.slices.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.slices.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.slices.shape()[2]
    }

    pub fn slice(&self, i: usize) -> Tensor {
        self.slices.index_outer(i)
    }

    /// Slice `floor(f/2)`.
    pub fn mid_slice(&self) -> usize {
        self.num_slices() / 2
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Npy {
        path: PathBuf,
        #[source]
        source: npy::NpyError,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed label row {row:?}")]
    BadLabelRow { path: PathBuf, line: usize, row: String },
    #[error("no exams found for split {split:?} under {root}")]
    EmptySplit { root: PathBuf, split: String },
    #[error("exam {exam_id} has shape {actual:?}, expected {expected}×{expected} slices")]
    SliceSize {
        exam_id: String,
        expected: usize,
        actual: Vec<usize>,
    },
}

pub fn split_dir(root: &Path, split: &str, plane: &str) -> PathBuf {
    root.join(split).join(plane)
}

pub fn labels_path(root: &Path, split: &str, plane: &str) -> PathBuf {
    root.join(format!("{split}-{plane}.csv"))
}

pub fn write_labels(path: &Path, rows: &[(String, u8)]) -> Result<(), DataError> {
    let mut text = String::from("exam_id,label\n");
    for (id, label) in rows {
        text.push_str(&format!("{id},{label}\n"));
    }
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, u8)>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("exam_id")) {
            continue;
        }
        let bad = || DataError::BadLabelRow {
            path: path.to_path_buf(),
            line: i + 1,
            row: line.to_string(),
        };
        let (id, label) = line.split_once(',').ok_or_else(bad)?;
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad()),
        };
        rows.push((id.trim().to_string(), label));
    }
    Ok(rows)
}

/// Write volumes and their label manifest for one split.
pub fn write_split(root: &Path, split: &str, volumes: &[Volume]) -> Result<(), DataError> {
    let plane = volumes.first().map_or(DEFAULT_PLANE, |v| v.plane.as_str());
    let dir = split_dir(root, split, plane);
    fs::create_dir_all(&dir).map_err(|source| DataError::Io {
        path: dir.clone(),
        source,
    })?;
    for v in volumes {
        let path = dir.join(format!("{}.npy", v.exam_id));
        npy::write_npy(v, &path).map_err(|source| DataError::Npy { path, source })?;
    }
    let rows: Vec<(String, u8)> = volumes.iter().map(|v| (v.exam_id.clone(), v.label)).collect();
    write_labels(&labels_path(root, split, plane), &rows)
}

/// Load every exam listed in the split's label manifest, in manifest order.
pub fn load_split(root: &Path, split: &str, plane: &str) -> Result<Vec<Volume>, DataError> {
    let manifest = labels_path(root, split, plane);
    if !manifest.exists() {
        return Err(DataError::EmptySplit {
            root: root.to_path_buf(),
            split: split.to_string(),
        });
    }
    let labels: BTreeMap<usize, (String, u8)> = read_labels(&manifest)?.into_iter().enumerate().collect();
    let dir = split_dir(root, split, plane);
    let mut volumes = Vec::with_capacity(labels.len());
    for (id, label) in labels.into_values() {
        let path = dir.join(format!("{id}.npy"));
        let mut v = npy::read_npy(&path).map_err(|source| DataError::Npy { path, source })?;
        v.label = label;
        v.plane = plane.to_string();
        volumes.push(v);
    }
    if volumes.is_empty() {
        return Err(DataError::EmptySplit {
            root: root.to_path_buf(),
            split: split.to_string(),
        });
    }
    Ok(volumes)
}

/// Fail unless every slice is `size × size`.
pub fn check_slice_size(volumes: &[Volume], size: usize) -> Result<(), DataError> {
    for v in volumes {
        if v.height() != size || v.width() != size {
            return Err(DataError::SliceSize {
                exam_id: v.exam_id.clone(),
                expected: size,
                actual: v.slices.shape().to_vec(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let vols: Vec<Volume> = (0..3)
            .map(|i| Volume {
                exam_id: format!("{i:04}"),
                slices: Tensor::from_fn(&[2, 4, 4], |j| ((i * 32 + j) % 17) as f64 / 16.0),
                label: (i % 2) as u8,
                plane: DEFAULT_PLANE.into(),
            })
            .collect();
        write_split(dir.path(), "train", &vols).unwrap();
        let back = load_split(dir.path(), "train", DEFAULT_PLANE).unwrap();
        assert_eq!(back, vols);
        let text = fs::read_to_string(labels_path(dir.path(), "train", DEFAULT_PLANE)).unwrap();
        assert!(text.starts_with("exam_id,label\n0000,0\n"));
    }

    #[test]
    fn headerless_labels_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        fs::write(&p, "0000,0\n0001,1\n").unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![("0000".into(), 0), ("0001".into(), 1)]);
        fs::write(&p, "0000,2\n").unwrap();
        assert!(matches!(read_labels(&p), Err(DataError::BadLabelRow { .. })));
    }

    #[test]
    fn missing_split_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_split(dir.path(), "train", DEFAULT_PLANE),
            Err(DataError::EmptySplit { .. })
        ));
    }
}
