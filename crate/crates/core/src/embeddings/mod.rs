//! Image embeddings: the in-memory dataset, the `.mfse` file format and a
//! seeded synthetic generator of clustered embeddings.

mod mfse;
mod synthetic;

use thiserror::Error;

use crate::interpreter::labels::LabelsError;

pub use mfse::{decode, encode, load_embeddings, save_embeddings, MAGIC, VERSION};
pub use synthetic::{synthesize, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Labels(#[from] LabelsError),
    #[error("bad magic bytes {found:02X?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("embedding dim {found} does not match expected dim {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("class {class_id} has no label ({labels} labels known)")]
    UnknownClass { class_id: u32, labels: usize },
    #[error("class {class_id} sample {sample_id}: non-finite value at component {index}")]
    NonFinite {
        class_id: u32,
        sample_id: u32,
        index: usize,
    },
    #[error("class {class_id} sample {sample_id}: zero-norm embedding")]
    ZeroNorm { class_id: u32, sample_id: u32 },
    #[error("class {class_id} sample {sample_id} appears twice")]
    DuplicateSample { class_id: u32, sample_id: u32 },
    #[error("class {0} has no samples")]
    MissingClass(u32),
    #[error("no sample {sample_id} in class {class_id}")]
    OutOfRange { class_id: u32, sample_id: u32 },
    #[error("cannot place {classes} class means {separation} apart in dim {dim}")]
    Placement {
        classes: usize,
        dim: usize,
        separation: f64,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    class_id: u32,
    sample_id: u32,
    vector: Vec<f32>,
}

impl ImageEmbedding {
    pub fn new(class_id: u32, sample_id: u32, vector: Vec<f32>) -> Self {
        Self {
            class_id,
            sample_id,
            vector,
        }
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn sample_id(&self) -> u32 {
        self.sample_id
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }
}

/// Validated, immutable collection of embeddings with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    samples: Vec<ImageEmbedding>,
    labels: Vec<String>,
    by_class: Vec<Vec<usize>>,
}

impl EmbeddingDataset {
    pub fn new(dim: usize, samples: Vec<ImageEmbedding>, labels: Vec<String>) -> Result<Self, DataError> {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];
        for (i, s) in samples.iter().enumerate() {
            if s.vector.len() != dim {
                return Err(DataError::DimMismatch {
                    expected: dim,
                    found: s.vector.len(),
                });
            }
            let (class_id, sample_id) = (s.class_id, s.sample_id);
            if let Some(index) = s.vector.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    class_id,
                    sample_id,
                    index,
                });
            }
            if s.vector.iter().all(|&v| v == 0.0) {
                return Err(DataError::ZeroNorm { class_id, sample_id });
            }
            let bucket = by_class.get_mut(class_id as usize).ok_or(DataError::UnknownClass {
                class_id,
                labels: labels.len(),
            })?;
            bucket.push(i);
        }
        for (class_id, bucket) in by_class.iter_mut().enumerate() {
            if bucket.is_empty() {
                return Err(DataError::MissingClass(class_id as u32));
            }
            bucket.sort_by_key(|&i| samples[i].sample_id);
            if let Some(w) = bucket.windows(2).find(|w| samples[w[0]].sample_id == samples[w[1]].sample_id) {
                return Err(DataError::DuplicateSample {
                    class_id: class_id as u32,
                    sample_id: samples[w[0]].sample_id,
                });
            }
        }
        Ok(Self {
            dim,
            samples,
            labels,
            by_class,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Samples in storage (file) order.
    pub fn samples(&self) -> &[ImageEmbedding] {
        &self.samples
    }

    /// Samples of one class ordered by sample id.
    pub fn class_samples(&self, class_id: u32) -> impl Iterator<Item = &ImageEmbedding> + '_ {
        self.by_class
            .get(class_id as usize)
            .into_iter()
            .flatten()
            .map(|&i| &self.samples[i])
    }

    pub fn class_count(&self, class_id: u32) -> usize {
        self.by_class.get(class_id as usize).map_or(0, Vec::len)
    }

    pub fn get(&self, class_id: u32, sample_id: u32) -> Result<&ImageEmbedding, DataError> {
        let bucket = self
            .by_class
            .get(class_id as usize)
            .ok_or(DataError::OutOfRange { class_id, sample_id })?;
        bucket
            .binary_search_by_key(&sample_id, |&i| self.samples[i].sample_id)
            .map(|pos| &self.samples[bucket[pos]])
            .map_err(|_| DataError::OutOfRange { class_id, sample_id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class {i}")).collect()
    }

    #[test]
    fn get_returns_stored_vectors() {
        let samples = vec![
            ImageEmbedding::new(0, 7, vec![1.0, 2.0]),
            ImageEmbedding::new(0, 3, vec![0.5, 0.0]),
            ImageEmbedding::new(1, 0, vec![0.0, -1.0]),
        ];
        let ds = EmbeddingDataset::new(2, samples, labels(2)).unwrap();
        assert_eq!(ds.get(0, 3).unwrap().vector(), &[0.5, 0.0]);
        assert_eq!(ds.class_samples(0).next().unwrap().sample_id(), 3);
        assert!(std::ptr::eq(ds.get(0, 7).unwrap(), ds.get(0, 7).unwrap()));
        assert!(matches!(ds.get(5, 0), Err(DataError::OutOfRange { .. })));
        assert!(matches!(ds.get(1, 1), Err(DataError::OutOfRange { .. })));
    }

    #[test]
    fn invariants_enforced() {
        let one = |c, s, v: Vec<f32>| vec![ImageEmbedding::new(c, s, v)];
        assert!(matches!(
            EmbeddingDataset::new(2, one(0, 0, vec![1.0]), labels(1)),
            Err(DataError::DimMismatch { expected: 2, found: 1 })
        ));
        assert!(matches!(
            EmbeddingDataset::new(1, one(0, 0, vec![f32::NAN]), labels(1)),
            Err(DataError::NonFinite { .. })
        ));
        assert!(matches!(
            EmbeddingDataset::new(1, one(0, 0, vec![0.0]), labels(1)),
            Err(DataError::ZeroNorm { .. })
        ));
        assert!(matches!(
            EmbeddingDataset::new(1, one(3, 0, vec![1.0]), labels(1)),
            Err(DataError::UnknownClass { class_id: 3, .. })
        ));
        assert!(matches!(
            EmbeddingDataset::new(1, one(0, 0, vec![1.0]), labels(2)),
            Err(DataError::MissingClass(1))
        ));
        let dup = vec![ImageEmbedding::new(0, 1, vec![1.0]), ImageEmbedding::new(0, 1, vec![2.0])];
        assert!(matches!(
            EmbeddingDataset::new(1, dup, labels(1)),
            Err(DataError::DuplicateSample { .. })
        ));
    }
}
