//! Directory of same-shaped input tensors, optionally labeled.
//!
//! `dataset.json` holds `{shape, count, labels?, blob_crc32}`; `dataset.bin`
//! holds the tensors back to back as little-endian `f32` in `(h, w, c)`
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};
use crate::graph::Graph;
use crate::inference::forward;
use crate::tensor::Tensor3;

const MANIFEST: &str = "dataset.json";
const BLOB: &str = "dataset.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Tensor3>,
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    shape: [usize; 3],
    count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
    blob_crc32: u32,
}

impl Dataset {
    pub fn unlabeled(items: Vec<Tensor3>) -> Self {
        Self {
            items,
            labels: None,
        }
    }

    pub fn labeled(items: Vec<Tensor3>, labels: Vec<usize>) -> Result<Self> {
        if items.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} items but {} labels",
                items.len(),
                labels.len()
            )));
        }
        Ok(Self {
            items,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let shape = self.items.first().ok_or(Error::EmptyDataset)?.shape();
        if self.items.iter().any(|t| t.shape() != shape) {
            return Err(Error::Shape("dataset items differ in shape".into()));
        }
        let mut bytes = Vec::with_capacity(self.items.len() * shape.iter().product::<usize>() * 4);
        for t in &self.items {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            shape,
            count: self.items.len(),
            labels: self.labels.clone(),
            blob_crc32: crc32fast::hash(&bytes),
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = dir.join(BLOB);
        fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| LoadError::Malformed(e.to_string()))?;
        let blob = dir.join(BLOB);
        if !blob.is_file() {
            return Err(LoadError::MissingBlob(blob).into());
        }
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        let actual = crc32fast::hash(&bytes);
        if actual != m.blob_crc32 {
            return Err(LoadError::ChecksumMismatch {
                expected: m.blob_crc32,
                actual,
            }
            .into());
        }
        let per = m.shape.iter().product::<usize>();
        if bytes.len() != per * m.count * 4 {
            return Err(LoadError::ShapeInconsistency {
                node: "dataset".into(),
                message: format!(
                    "{} items of {:?} need {} bytes, blob has {}",
                    m.count,
                    m.shape,
                    per * m.count * 4,
                    bytes.len()
                ),
            }
            .into());
        }
        if let Some(l) = &m.labels {
            if l.len() != m.count {
                return Err(LoadError::Malformed(format!(
                    "{} labels for {} items",
                    l.len(),
                    m.count
                ))
                .into());
            }
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let [h, w, c] = m.shape;
        let items = floats
            .chunks_exact(per.max(1))
            .take(m.count)
            .map(|d| Tensor3::new(h, w, c, d.to_vec()))
            .collect::<Result<_>>()?;
        Ok(Self {
            items,
            labels: m.labels,
        })
    }
}

/// Labels each item with the argmax of `graph`'s output (lowest index on
/// ties). Useful when no ground truth exists: accuracy then measures
/// agreement with the unpruned model.
pub fn teacher_labels(graph: &Graph, items: &[Tensor3]) -> Result<Vec<usize>> {
    use rayon::prelude::*;
    items
        .par_iter()
        .map(|x| Ok(argmax(forward(graph, x)?.as_flat())))
        .collect()
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = fixtures::random_inputs([4, 3, 2], 5, 1);
        let d = Dataset::labeled(items, vec![0, 1, 2, 3, 4]).unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);

        let u = Dataset::unlabeled(fixtures::random_inputs([2, 2, 1], 3, 9));
        u.save(dir.path().join("u")).unwrap();
        assert_eq!(Dataset::load(dir.path().join("u")).unwrap(), u);
    }

    #[test]
    fn corrupt_blob_detected() {
        let dir = tempfile::tempdir().unwrap();
        Dataset::unlabeled(fixtures::random_inputs([2, 2, 1], 2, 0))
            .save(dir.path())
            .unwrap();
        let blob = dir.path().join(BLOB);
        let mut b = fs::read(&blob).unwrap();
        b[3] ^= 1;
        fs::write(&blob, b).unwrap();
        assert!(matches!(
            Dataset::load(dir.path()),
            Err(Error::Load(LoadError::ChecksumMismatch { .. }))
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }
}
