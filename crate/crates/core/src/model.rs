//! The memory prompt and the cosine-similarity classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::interpreter::{tokenize_class_set, FrozenInterpreter, InterpreterConfig, InterpreterError, TokenSequence};
use crate::numerics::{kernels::cosine_similarity, NumericsError, Real, RealArray};

pub const PROMPT_INIT_STD: f64 = 0.02;

/// The trainable `[L×D]` matrix Θ.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPrompt<T> {
    theta: RealArray<T>,
}

impl<T: Real> MemoryPrompt<T> {
    /// Entries drawn from N(0, 0.02²).
    pub fn init(length: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..length * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z * PROMPT_INIT_STD)
            })
            .collect();
        Self {
            theta: RealArray::new(vec![length, dim], data).expect("finite normal draws"),
        }
    }

    pub fn from_array(theta: RealArray<T>) -> Result<Self, NumericsError> {
        if theta.ndim() != 2 {
            return Err(NumericsError::Invalid {
                op: "memory_prompt",
                message: format!("expected [L×D], got {:?}", theta.shape()),
            });
        }
        Ok(Self { theta })
    }

    pub fn array(&self) -> &RealArray<T> {
        &self.theta
    }

    pub fn into_array(self) -> RealArray<T> {
        self.theta
    }

    pub fn length(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.theta.shape()[1]
    }

    /// Replaces the values; the shape may not change.
    pub(crate) fn set(&mut self, theta: RealArray<T>) {
        assert_eq!(theta.shape(), self.theta.shape(), "prompt shape is fixed");
        self.theta = theta;
    }
}

/// Token sequences for every class of a dataset, indexed by class id.
#[derive(Debug, Clone)]
pub struct ClassVocabulary {
    tokens: Vec<TokenSequence>,
}

impl ClassVocabulary {
    pub fn new(
        config: &InterpreterConfig,
        labels: &[String],
        suffix: Option<&str>,
        prompt_len: usize,
    ) -> Result<Self, InterpreterError> {
        Ok(Self {
            tokens: tokenize_class_set(config, labels, suffix, prompt_len)?,
        })
    }

    pub fn tokens(&self, class_id: u32) -> &TokenSequence {
        &self.tokens[class_id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Class-label embeddings of the learned classes, in class-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingBank<T> {
    class_ids: Vec<u32>,
    embeddings: RealArray<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow<T> {
    pub class_ids: Vec<u32>,
    pub similarities: Vec<T>,
}

impl<T: Real> ScoreRow<T> {
    /// Raw argmax; the first (smallest) class id wins ties.
    pub fn best(&self) -> u32 {
        let mut best = 0;
        for (i, &s) in self.similarities.iter().enumerate().skip(1) {
            if s > self.similarities[best] {
                best = i;
            }
        }
        self.class_ids[best]
    }
}

impl<T: Real> ClassEmbeddingBank<T> {
    pub fn build(
        interpreter: &FrozenInterpreter<T>,
        prompt: &MemoryPrompt<T>,
        vocabulary: &ClassVocabulary,
        learned: &[u32],
    ) -> Result<Self, InterpreterError> {
        if learned.is_empty() {
            return Err(InterpreterError::NoLabels);
        }
        let mut class_ids = learned.to_vec();
        class_ids.sort_unstable();
        class_ids.dedup();
        let mut data = Vec::with_capacity(class_ids.len() * interpreter.dim());
        for &c in &class_ids {
            let m = interpreter.interpret(prompt.array(), vocabulary.tokens(c))?;
            data.extend_from_slice(m.data());
        }
        let embeddings = RealArray::new(vec![class_ids.len(), interpreter.dim()], data)?;
        Ok(Self { class_ids, embeddings })
    }

    pub fn from_parts(class_ids: Vec<u32>, embeddings: RealArray<T>) -> Result<Self, NumericsError> {
        if embeddings.ndim() != 2 || embeddings.rows() != class_ids.len() || class_ids.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "bank",
                left: vec![class_ids.len()],
                right: embeddings.shape().to_vec(),
            });
        }
        Ok(Self { class_ids, embeddings })
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn embeddings(&self) -> &RealArray<T> {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn score(&self, image: &[f32]) -> Result<ScoreRow<T>, NumericsError> {
        let d = self.embeddings.cols();
        if image.len() != d {
            return Err(NumericsError::ShapeMismatch {
                op: "score",
                left: vec![image.len()],
                right: vec![d],
            });
        }
        let image = RealArray::vector(image.iter().map(|&v| T::of(v as f64)).collect())?;
        let similarities = (0..self.len())
            .map(|c| {
                let m = RealArray::vector(self.embeddings.row(c).to_vec())?;
                cosine_similarity(&image, &m)
            })
            .collect::<Result<_, _>>()?;
        Ok(ScoreRow {
            class_ids: self.class_ids.clone(),
            similarities,
        })
    }

    pub fn classify(&self, image: &[f32]) -> Result<u32, NumericsError> {
        Ok(self.score(image)?.best())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: &[Vec<f64>]) -> ClassEmbeddingBank<f64> {
        let ids = (0..rows.len() as u32).collect();
        ClassEmbeddingBank::from_parts(ids, RealArray::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn prompt_init_shapes_and_determinism() {
        let p = MemoryPrompt::<f32>::init(16, 512, 4);
        assert_eq!(p.array().shape(), &[16, 512]);
        assert_eq!(p, MemoryPrompt::init(16, 512, 4));
        assert_ne!(p, MemoryPrompt::init(16, 512, 5));
        let empty = MemoryPrompt::<f32>::init(0, 512, 4);
        assert_eq!(empty.length(), 0);
        assert!(empty.array().is_empty());
        let std = (p.array().data().iter().map(|v| (v * v) as f64).sum::<f64>() / 8192.0).sqrt();
        assert!((std - 0.02).abs() < 0.002);
    }

    #[test]
    fn aligned_class_wins() {
        let b = bank(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let row = b.score(&[0.0, 2.0, 0.0]).unwrap();
        assert_eq!(row.similarities[1], 1.0);
        assert_eq!(row.best(), 1);
        let single = bank(&[vec![0.3, -1.0, 2.0]]);
        assert_eq!(single.classify(&[-5.0, 1.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn anti_aligned_others() {
        let mut rows = vec![vec![-1.0, -1.0]; 9];
        rows[7] = vec![1.0, 1.0];
        assert_eq!(bank(&rows).classify(&[0.5, 0.5]).unwrap(), 7);
    }

    #[test]
    fn ties_go_to_smallest_id() {
        let b = bank(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(b.classify(&[1.0, 0.0]).unwrap(), 1);
    }

    #[test]
    fn zero_image_is_an_error() {
        let b = bank(&[vec![1.0, 0.0]]);
        assert!(matches!(b.score(&[0.0, 0.0]), Err(NumericsError::ZeroNorm { .. })));
        assert!(b.score(&[1.0]).is_err());
    }
}
