//! `.mfck` little-endian layout: magic `MFCK`, version, L, D, session,
//! flags (bit 0: anchor present), then Θ, the anchor when present, and Γ,
//! each as `L·D` f32 values.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::TrainingState;
use crate::model::MemoryPrompt;
use crate::numerics::{Real, RealArray};

pub const MAGIC: [u8; 4] = *b"MFCK";
pub const VERSION: u32 = 1;
const HEADER: usize = 24;
const FLAG_ANCHOR: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: bad magic bytes {found:02X?}")]
    BadMagic { found: Vec<u8> },
    #[error("corrupt checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: truncated, expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("corrupt checkpoint: {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("corrupt checkpoint: unknown flag bits {0:#x}")]
    UnknownFlags(u32),
    #[error("corrupt checkpoint: non-finite value at offset {0}")]
    NonFinite(usize),
    #[error("corrupt checkpoint: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub prompt_len: usize,
    pub dim: usize,
    pub session: usize,
    pub theta: Vec<f32>,
    pub anchor: Option<Vec<f32>>,
    pub gamma: Vec<f32>,
}

impl Checkpoint {
    pub fn from_state<T: Real>(state: &TrainingState<T>) -> Self {
        let theta = state.prompt().array();
        let f32s = |a: &RealArray<T>| a.data().iter().map(|v| v.as_f32()).collect::<Vec<_>>();
        Self {
            prompt_len: theta.shape()[0],
            dim: theta.shape()[1],
            session: state.session(),
            theta: f32s(theta),
            anchor: state.anchor().map(f32s),
            gamma: f32s(state.gamma()),
        }
    }

    /// State with the given learned classes; see [`TrainingState::restore`].
    pub fn into_state<T: Real>(self, learned: Vec<u32>) -> Result<TrainingState<T>, super::TrainError> {
        let shape = vec![self.prompt_len, self.dim];
        let array = |v: Vec<f32>| RealArray::new(shape.clone(), v.into_iter().map(|x| T::of(x as f64)).collect());
        let prompt = MemoryPrompt::from_array(array(self.theta)?)?;
        let anchor = self.anchor.map(array).transpose()?;
        TrainingState::restore(prompt, anchor, array(self.gamma)?, self.session, learned)
    }

    pub fn gamma_summary(&self) -> GammaSummary {
        GammaSummary::of(&self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaSummary {
    pub min_abs: f32,
    pub max_abs: f32,
    pub mean_abs: f32,
    /// Smallest `|Γ|` among the top 10% of entries.
    pub top_decile_threshold: f32,
}

impl GammaSummary {
    pub fn of(gamma: &[f32]) -> Self {
        let mut abs: Vec<f32> = gamma.iter().map(|g| g.abs()).collect();
        abs.sort_by(f32::total_cmp);
        if abs.is_empty() {
            return Self {
                min_abs: 0.0,
                max_abs: 0.0,
                mean_abs: 0.0,
                top_decile_threshold: 0.0,
            };
        }
        let n = abs.len();
        let k = (n / 10).max(1);
        Self {
            min_abs: abs[0],
            max_abs: abs[n - 1],
            mean_abs: (abs.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32,
            top_decile_threshold: abs[n - k],
        }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let n = ck.prompt_len * ck.dim;
    let blocks = if ck.anchor.is_some() { 3 } else { 2 };
    let mut out = Vec::with_capacity(HEADER + blocks * n * 4);
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        ck.prompt_len as u32,
        ck.dim as u32,
        ck.session as u32,
        if ck.anchor.is_some() { FLAG_ANCHOR } else { 0 },
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let blocks = [Some(&ck.theta), ck.anchor.as_ref(), Some(&ck.gamma)];
    for block in blocks.into_iter().flatten() {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER {
        return Err(CheckpointError::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let prompt_len = u32_at(bytes, 8) as usize;
    let dim = u32_at(bytes, 12) as usize;
    let session = u32_at(bytes, 16) as usize;
    let flags = u32_at(bytes, 20);
    if flags & !FLAG_ANCHOR != 0 {
        return Err(CheckpointError::UnknownFlags(flags & !FLAG_ANCHOR));
    }
    let has_anchor = flags & FLAG_ANCHOR != 0;
    if has_anchor && session == 0 {
        return Err(CheckpointError::Inconsistent("anchor present before the base session".into()));
    }
    let n = prompt_len * dim;
    let blocks = if has_anchor { 3 } else { 2 };
    let expected = HEADER + blocks * n * 4;
    if bytes.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(CheckpointError::TrailingBytes(bytes.len() - expected));
    }
    let mut values = Vec::with_capacity(blocks * n);
    for (i, c) in bytes[HEADER..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(CheckpointError::NonFinite(HEADER + 4 * i));
        }
        values.push(v);
    }
    let mut blocks = values.chunks_exact(n.max(1)).map(<[f32]>::to_vec);
    let mut next = || if n == 0 { Vec::new() } else { blocks.next().expect("block count checked") };
    let theta = next();
    let anchor = has_anchor.then(&mut next);
    let gamma = next();
    Ok(Checkpoint {
        prompt_len,
        dim,
        session,
        theta,
        anchor,
        gamma,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(ck)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(anchor: bool) -> Checkpoint {
        Checkpoint {
            prompt_len: 2,
            dim: 3,
            session: 4,
            theta: vec![0.1, -0.2, 0.3, 1e-30, 5.0, -6.5],
            anchor: anchor.then(|| vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]),
            gamma: vec![-1.0, 0.5, 0.25, 0.0, 9.0, 1e-7],
        }
    }

    #[test]
    fn round_trips_with_and_without_anchor() {
        for anchor in [true, false] {
            let ck = sample(anchor);
            let bytes = encode_checkpoint(&ck);
            assert_eq!(&bytes[..4], &[0x4D, 0x46, 0x43, 0x4B]);
            assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        }
    }

    #[test]
    fn empty_prompt_round_trips() {
        let ck = Checkpoint {
            prompt_len: 0,
            dim: 8,
            session: 1,
            theta: vec![],
            anchor: Some(vec![]),
            gamma: vec![],
        };
        assert_eq!(decode_checkpoint(&encode_checkpoint(&ck)).unwrap(), ck);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let good = encode_checkpoint(&sample(true));
        let mut bad = good.clone();
        bad[1] = 0;
        assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::BadMagic { .. })));
        assert!(matches!(decode_checkpoint(&good[..good.len() - 2]), Err(CheckpointError::Truncated { .. })));
        let mut flags = good.clone();
        flags[20] = 3;
        assert!(matches!(decode_checkpoint(&flags), Err(CheckpointError::UnknownFlags(2))));
        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(decode_checkpoint(&version), Err(CheckpointError::UnsupportedVersion(9))));
        let mut inf = good.clone();
        inf[24..28].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_checkpoint(&inf), Err(CheckpointError::NonFinite(24))));
    }

    #[test]
    fn gamma_summary_statistics() {
        let s = GammaSummary::of(&[-3.0, 1.0, 0.0, 2.0]);
        assert_eq!((s.min_abs, s.max_abs, s.mean_abs, s.top_decile_threshold), (0.0, 3.0, 1.5, 3.0));
    }
}
