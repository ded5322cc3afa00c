//! `.mfse` little-endian layout: magic `MFSE`, version, dim, record count,
//! then `(class_id u32, sample_id u32, dim × f32)` per record.

use std::fs;
use std::path::Path;

use super::{DataError, EmbeddingDataset, ImageEmbedding};

pub const MAGIC: [u8; 4] = *b"MFSE";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn encode(dataset: &EmbeddingDataset) -> Vec<u8> {
    let dim = dataset.dim();
    let mut out = Vec::with_capacity(HEADER + dataset.len() * (8 + 4 * dim));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    for s in dataset.samples() {
        out.extend_from_slice(&s.class_id().to_le_bytes());
        out.extend_from_slice(&s.sample_id().to_le_bytes());
        for v in s.vector() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

/// Parses `.mfse` bytes against the given labels. With `expected_dim` set, a
/// file of any other dim is rejected.
pub fn decode(bytes: &[u8], labels: Vec<String>, expected_dim: Option<usize>) -> Result<EmbeddingDataset, DataError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(DataError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER {
        return Err(DataError::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let dim = u32_at(bytes, 8) as usize;
    let count = u32_at(bytes, 12) as usize;
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(DataError::DimMismatch { expected, found: dim });
        }
    }
    let record = 8 + 4 * dim;
    let expected = HEADER + count * record;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes(bytes.len() - expected));
    }
    let samples = bytes[HEADER..]
        .chunks_exact(record)
        .map(|r| {
            let vector = r[8..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            ImageEmbedding::new(u32_at(r, 0), u32_at(r, 4), vector)
        })
        .collect();
    EmbeddingDataset::new(dim, samples, labels)
}

pub fn load_embeddings(path: &Path, labels: Vec<String>, expected_dim: Option<usize>) -> Result<EmbeddingDataset, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes, labels, expected_dim)
}

pub fn save_embeddings(path: &Path, dataset: &EmbeddingDataset) -> Result<(), DataError> {
    fs::write(path, encode(dataset)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_sample() -> EmbeddingDataset {
        let s = ImageEmbedding::new(0, 0, vec![0.1, -2.5, 3.0e-8, 7.0]);
        EmbeddingDataset::new(4, vec![s], vec!["a".into()]).unwrap()
    }

    #[test]
    fn single_record_layout() {
        let bytes = encode(&one_sample());
        assert_eq!(&bytes[..4], &[0x4D, 0x46, 0x53, 0x45]);
        assert_eq!(bytes.len(), 16 + 8 + 16);
        let back = decode(&bytes, vec!["a".into()], Some(4)).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back, one_sample());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let good = encode(&one_sample());
        let labels = || vec!["a".to_string()];

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, labels(), None), Err(DataError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad, labels(), None), Err(DataError::UnsupportedVersion(2))));

        assert!(matches!(decode(&good[..good.len() - 1], labels(), None), Err(DataError::Truncated { .. })));
        assert!(matches!(decode(&good[..10], labels(), None), Err(DataError::Truncated { .. })));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long, labels(), None), Err(DataError::TrailingBytes(1))));

        let mut nan = good.clone();
        nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&nan, labels(), None), Err(DataError::NonFinite { .. })));

        let mut unknown = good.clone();
        unknown[16] = 9;
        assert!(matches!(decode(&unknown, labels(), None), Err(DataError::UnknownClass { class_id: 9, .. })));

        assert!(matches!(
            decode(&good, labels(), Some(8)),
            Err(DataError::DimMismatch { expected: 8, found: 4 })
        ));
    }
}
