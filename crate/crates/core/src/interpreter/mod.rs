//! The frozen memory interpreter: a small seeded pre-LN transformer encoder
//! that reads `[prompt rows; label tokens]` and returns one embedding per
//! class label.

pub mod labels;
mod tokenizer;

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::numerics::{NumericsError, Real, RealArray, Tape, Var, LAYER_NORM_EPS};

pub use tokenizer::{tokenize, word_id, words, TokenSequence, PAD_ID, UNKNOWN_ID};

#[derive(Debug, Error)]
pub enum InterpreterError {
    #[error("invalid interpreter config: {0}")]
    InvalidConfig(String),
    #[error("label {0:?} has no words")]
    EmptyLabel(String),
    #[error("sequence of {needed} positions exceeds max_sequence_len {max}")]
    SequenceOverflow { needed: usize, max: usize },
    #[error("prompt has {found} columns but the interpreter dim is {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("no labels given")]
    NoLabels,
    #[error("class {index} ({label:?}): {source}")]
    Class {
        index: usize,
        label: String,
        source: Box<InterpreterError>,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, InterpreterError>;

#[derive(Debug, Clone, PartialEq)]
pub struct InterpreterConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub feed_forward_dim: usize,
    pub vocab_size: usize,
    pub max_sequence_len: usize,
    /// Std of token and positional embeddings.
    pub embedding_std: f64,
    /// Std of every projection matrix. `None` uses `1/sqrt(fan_in)`.
    pub weight_std: Option<f64>,
    pub seed: u64,
}

impl Default for InterpreterConfig {
    fn default() -> Self {
        Self {
            model_dim: 512,
            layers: 2,
            heads: 4,
            feed_forward_dim: 2048,
            vocab_size: 4096,
            max_sequence_len: 64,
            embedding_std: 0.2,
            weight_std: None,
            seed: 0,
        }
    }
}

impl InterpreterConfig {
    pub fn validate(&self, prompt_len: usize) -> Result<()> {
        let fail = |m: String| Err(InterpreterError::InvalidConfig(m));
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return fail(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.feed_forward_dim == 0 {
            return fail("feed_forward_dim must be positive".into());
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        if self.max_sequence_len < prompt_len + 1 {
            return fail(format!(
                "max_sequence_len {} leaves no room for tokens after a prompt of {prompt_len}",
                self.max_sequence_len
            ));
        }
        if !(self.embedding_std >= 0.0 && self.embedding_std.is_finite()) {
            return fail("embedding_std must be finite and nonnegative".into());
        }
        if let Some(std) = self.weight_std {
            if !(std >= 0.0 && std.is_finite()) {
                return fail("weight_std must be finite and nonnegative".into());
            }
        }
        Ok(())
    }

    /// Parameter count implied by the architecture.
    pub fn parameter_count(&self) -> usize {
        let (d, f) = (self.model_dim, self.feed_forward_dim);
        let attention = 4 * (d * d + d);
        let feed_forward = d * f + f + f * d + d;
        let norms = 2 * 2 * d;
        self.vocab_size * d
            + self.max_sequence_len * d
            + self.layers * (attention + feed_forward + norms)
            + 2 * d
            + d * d
    }
}

#[derive(Debug, Clone)]
struct Layer<T> {
    norm1_gain: RealArray<T>,
    norm1_bias: RealArray<T>,
    query: RealArray<T>,
    query_bias: RealArray<T>,
    key: RealArray<T>,
    key_bias: RealArray<T>,
    value: RealArray<T>,
    value_bias: RealArray<T>,
    output: RealArray<T>,
    output_bias: RealArray<T>,
    norm2_gain: RealArray<T>,
    norm2_bias: RealArray<T>,
    expand: RealArray<T>,
    expand_bias: RealArray<T>,
    contract: RealArray<T>,
    contract_bias: RealArray<T>,
}

impl<T: Real> Layer<T> {
    fn arrays(&self) -> [&RealArray<T>; 16] {
        [
            &self.norm1_gain,
            &self.norm1_bias,
            &self.query,
            &self.query_bias,
            &self.key,
            &self.key_bias,
            &self.value,
            &self.value_bias,
            &self.output,
            &self.output_bias,
            &self.norm2_gain,
            &self.norm2_bias,
            &self.expand,
            &self.expand_bias,
            &self.contract,
            &self.contract_bias,
        ]
    }
}

/// Immutable interpreter weights. Every field is private, so nothing can
/// modify them after [`FrozenInterpreter::build`].
#[derive(Debug, Clone)]
pub struct FrozenInterpreter<T> {
    config: InterpreterConfig,
    token_embedding: RealArray<T>,
    positional_embedding: RealArray<T>,
    layers: Vec<Layer<T>>,
    final_gain: RealArray<T>,
    final_bias: RealArray<T>,
    projection: RealArray<T>,
}

struct WeightSource {
    rng: ChaCha8Rng,
}

impl WeightSource {
    fn normal<T: Real>(&mut self, shape: Vec<usize>, std: f64) -> Result<RealArray<T>> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::of(z * std)
            })
            .collect();
        Ok(RealArray::new(shape, data)?)
    }
}

impl<T: Real> FrozenInterpreter<T> {
    /// Draws all weights from a ChaCha8 stream seeded by `config.seed`.
    /// Values are sampled in f64 and rounded, so f32 and f64 builds agree to
    /// f32 precision.
    pub fn build(config: &InterpreterConfig) -> Result<Self> {
        config.validate(0)?;
        let (d, f) = (config.model_dim, config.feed_forward_dim);
        let mut src = WeightSource {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let std_for = |fan_in: usize| config.weight_std.unwrap_or(1.0 / (fan_in as f64).sqrt());
        let ones = || RealArray::filled(vec![d], T::one());
        let zeros = |n: usize| RealArray::zeros(vec![n]);

        let token_embedding = src.normal(vec![config.vocab_size, d], config.embedding_std)?;
        let positional_embedding = src.normal(vec![config.max_sequence_len, d], config.embedding_std)?;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(Layer {
                norm1_gain: ones()?,
                norm1_bias: zeros(d),
                query: src.normal(vec![d, d], std_for(d))?,
                query_bias: zeros(d),
                key: src.normal(vec![d, d], std_for(d))?,
                key_bias: zeros(d),
                value: src.normal(vec![d, d], std_for(d))?,
                value_bias: zeros(d),
                output: src.normal(vec![d, d], std_for(d))?,
                output_bias: zeros(d),
                norm2_gain: ones()?,
                norm2_bias: zeros(d),
                expand: src.normal(vec![d, f], std_for(d))?,
                expand_bias: zeros(f),
                contract: src.normal(vec![f, d], std_for(f))?,
                contract_bias: zeros(d),
            });
        }
        let projection = src.normal(vec![d, d], std_for(d))?;
        Ok(Self {
            config: config.clone(),
            token_embedding,
            positional_embedding,
            layers,
            final_gain: ones()?,
            final_bias: zeros(d),
            projection,
        })
    }

    pub fn config(&self) -> &InterpreterConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.model_dim
    }

    fn arrays(&self) -> Vec<&RealArray<T>> {
        let mut all = vec![&self.token_embedding, &self.positional_embedding];
        for layer in &self.layers {
            all.extend(layer.arrays());
        }
        all.extend([&self.final_gain, &self.final_bias, &self.projection]);
        all
    }

    pub fn parameter_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// FNV-1a over the bit patterns of every weight, in construction order.
    pub fn checksum(&self) -> u64 {
        let mut hasher = FnvHasher::default();
        for array in self.arrays() {
            for v in array.data() {
                hasher.write_u64(v.as_f64().to_bits());
            }
        }
        hasher.finish()
    }

    /// Records the forward pass for one class on `tape`. `prompt` must be an
    /// `[L×D]` node (L may be 0); the result is a `[D]` node.
    pub fn trace<'w>(&'w self, tape: &mut Tape<'w, T>, prompt: Var, tokens: &TokenSequence) -> Result<Var> {
        let d = self.dim();
        let prompt_shape = tape.value(prompt).shape().to_vec();
        let prompt_len = if prompt_shape.len() == 2 { prompt_shape[0] } else { 0 };
        let cols = prompt_shape.last().copied().unwrap_or(0);
        if prompt_shape.len() != 2 || cols != d {
            return Err(InterpreterError::DimMismatch {
                expected: d,
                found: cols,
            });
        }
        let seq = prompt_len + tokens.len();
        if seq > self.config.max_sequence_len {
            return Err(InterpreterError::SequenceOverflow {
                needed: seq,
                max: self.config.max_sequence_len,
            });
        }
        if tokens.is_empty() {
            return Err(InterpreterError::EmptyLabel(String::new()));
        }

        let mut embedded = Vec::with_capacity(tokens.len() * d);
        for &id in tokens.ids() {
            embedded.extend_from_slice(self.token_embedding.row(id as usize));
        }
        let embedded = tape.constant(RealArray::new(vec![tokens.len(), d], embedded)?);
        let positions = self.positional_embedding.data()[..seq * d].to_vec();
        let positions = tape.constant(RealArray::new(vec![seq, d], positions)?);
        let joined = tape.concat_rows(&[prompt, embedded])?;
        let mut x = tape.add(joined, positions)?;

        let eps = T::of(LAYER_NORM_EPS);
        let mask = vec![true; seq];
        for layer in &self.layers {
            let h = tape.layer_norm(x, &layer.norm1_gain, &layer.norm1_bias, eps)?;
            let q = tape.linear(h, &layer.query, Some(&layer.query_bias))?;
            let k = tape.linear(h, &layer.key, Some(&layer.key_bias))?;
            let v = tape.linear(h, &layer.value, Some(&layer.value_bias))?;
            let a = tape.attention(q, k, v, self.config.heads, &mask)?;
            let o = tape.linear(a, &layer.output, Some(&layer.output_bias))?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, &layer.norm2_gain, &layer.norm2_bias, eps)?;
            let e = tape.linear(h, &layer.expand, Some(&layer.expand_bias))?;
            let e = tape.gelu(e)?;
            let c = tape.linear(e, &layer.contract, Some(&layer.contract_bias))?;
            x = tape.add(x, c)?;
        }
        let x = tape.layer_norm(x, &self.final_gain, &self.final_bias, eps)?;
        let last = tape.select_row(x, seq - 1)?;
        Ok(tape.linear(last, &self.projection, None)?)
    }

    /// Untraced forward pass.
    pub fn interpret(&self, prompt: &RealArray<T>, tokens: &TokenSequence) -> Result<RealArray<T>> {
        let mut tape = Tape::new();
        let p = tape.constant(prompt.clone());
        let out = self.trace(&mut tape, p, tokens)?;
        Ok(tape.value(out).clone())
    }
}

/// Joins a label and an optional suffix the way prompts are phrased,
/// e.g. `"Black footed Albatross, a type of bird"`.
pub fn phrase(label: &str, suffix: Option<&str>) -> String {
    match suffix {
        Some(s) if !s.trim().is_empty() => format!("{label}, {s}"),
        _ => label.to_owned(),
    }
}

/// Tokenizes every label (with suffix) after checking they are distinct.
pub fn tokenize_class_set(
    config: &InterpreterConfig,
    labels: &[String],
    suffix: Option<&str>,
    prompt_len: usize,
) -> Result<Vec<TokenSequence>> {
    if labels.is_empty() {
        return Err(InterpreterError::NoLabels);
    }
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(InterpreterError::DuplicateLabel(l.clone()));
        }
    }
    labels
        .iter()
        .enumerate()
        .map(|(index, l)| {
            tokenize(&phrase(l, suffix), config, prompt_len).map_err(|e| InterpreterError::Class {
                index,
                label: l.clone(),
                source: Box::new(e),
            })
        })
        .collect()
}

/// One embedding per label, in label order.
pub fn interpret_class_set<T: Real>(
    interpreter: &FrozenInterpreter<T>,
    prompt: &RealArray<T>,
    labels: &[String],
    suffix: Option<&str>,
) -> Result<Vec<RealArray<T>>> {
    let prompt_len = if prompt.ndim() == 2 { prompt.rows() } else { 0 };
    let tokens = tokenize_class_set(interpreter.config(), labels, suffix, prompt_len)?;
    tokens
        .iter()
        .enumerate()
        .map(|(index, t)| {
            interpreter.interpret(prompt, t).map_err(|e| InterpreterError::Class {
                index,
                label: labels[index].clone(),
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_leaf, DEFAULT_FLOOR, DEFAULT_STEP};
    use crate::numerics::grad;

    fn tiny() -> InterpreterConfig {
        InterpreterConfig {
            model_dim: 16,
            layers: 1,
            heads: 2,
            feed_forward_dim: 64,
            vocab_size: 64,
            max_sequence_len: 8,
            embedding_std: 0.2,
            weight_std: None,
            seed: 3,
        }
    }

    fn prompt(rows: usize, d: usize, seed: u64) -> RealArray<f64> {
        let mut src = WeightSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        src.normal(vec![rows, d], 0.5).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(InterpreterConfig::default().validate(16).is_ok());
        let bad_heads = InterpreterConfig { heads: 3, ..tiny() };
        assert!(FrozenInterpreter::<f64>::build(&bad_heads).is_err());
        let tiny_vocab = InterpreterConfig { vocab_size: 1, ..tiny() };
        assert!(tiny_vocab.validate(0).is_err());
        assert!(tiny().validate(8).is_err());
        assert!(tiny().validate(7).is_ok());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let f = FrozenInterpreter::<f64>::build(&tiny()).unwrap();
        // V·D + S·D + (4(D²+D) + 4D + 2·D·F + F + D) + 2D + D²
        let (v, s, d, ff) = (64, 8, 16, 64);
        let expected = v * d + s * d + (4 * (d * d + d) + 4 * d + 2 * d * ff + ff + d) + 2 * d + d * d;
        assert_eq!(f.parameter_count(), expected);
        assert_eq!(tiny().parameter_count(), expected);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = FrozenInterpreter::<f32>::build(&tiny()).unwrap();
        let b = FrozenInterpreter::<f32>::build(&tiny()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.projection, b.projection);
        let c = FrozenInterpreter::<f32>::build(&InterpreterConfig { seed: 4, ..tiny() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
        assert_ne!(a.projection, c.projection);
    }

    #[test]
    fn empty_prompt_has_no_gradient_pathway() {
        let f = FrozenInterpreter::<f64>::build(&tiny()).unwrap();
        let tokens = tokenize("goldfish", f.config(), 0).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(RealArray::zeros(vec![0, 16]));
        let m = f.trace(&mut tape, p, &tokens).unwrap();
        assert_eq!(tape.value(m).len(), 16);
        let s = tape.sum(m).unwrap();
        assert!(grad(&tape, s, p).unwrap().is_empty());
    }

    #[test]
    fn interpret_is_pure() {
        let f = FrozenInterpreter::<f32>::build(&tiny()).unwrap();
        let p = prompt(2, 16, 1).cast::<f32>().unwrap();
        let tokens = tokenize("class 3", f.config(), 2).unwrap();
        let before = f.checksum();
        let a = f.interpret(&p, &tokens).unwrap();
        let b = f.interpret(&p, &tokens).unwrap();
        assert_eq!(a, b);
        assert_eq!(f.checksum(), before);
    }

    #[test]
    fn directional_derivative_matches_tape() {
        let f = FrozenInterpreter::<f64>::build(&tiny()).unwrap();
        let tokens = tokenize("Black footed Albatross", f.config(), 2).unwrap();
        let weights = prompt(1, 16, 9);
        let report = check_leaf(
            |t, p| {
                let m = f.trace(t, p, &tokens).map_err(|e| match e {
                    InterpreterError::Numerics(n) => n,
                    other => panic!("{other}"),
                })?;
                t.dot_const(m, weights.data())
            },
            |_| {},
            &prompt(2, 16, 7),
            DEFAULT_STEP,
            DEFAULT_FLOOR,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn class_set_order_and_suffix() {
        let f = FrozenInterpreter::<f64>::build(&tiny()).unwrap();
        let p = prompt(2, 16, 1);
        let labels: Vec<String> = ["cat", "dog", "owl"].map(String::from).to_vec();
        let out = interpret_class_set(&f, &p, &labels, None).unwrap();
        let reversed: Vec<String> = labels.iter().rev().cloned().collect();
        let back = interpret_class_set(&f, &p, &reversed, None).unwrap();
        for i in 0..3 {
            assert_eq!(out[i], back[2 - i]);
        }
        let single = interpret_class_set(&f, &p, &labels[..1], None).unwrap();
        assert_eq!(single, vec![out[0].clone()]);

        let with_suffix = tokenize_class_set(f.config(), &["Black footed Albatross".into()], Some("a type of bird"), 0).unwrap();
        let joined = tokenize("Black footed Albatross, a type of bird", f.config(), 0).unwrap();
        assert_eq!(with_suffix[0], joined);

        let dup = vec!["cat".to_string(), "cat".to_string()];
        assert!(matches!(
            interpret_class_set(&f, &p, &dup, None),
            Err(InterpreterError::DuplicateLabel(_))
        ));
        let empty = vec!["cat".to_string(), "--".to_string()];
        assert!(matches!(
            interpret_class_set(&f, &p, &empty, None),
            Err(InterpreterError::Class { index: 1, .. })
        ));
    }

    #[test]
    fn prompt_dim_mismatch_is_reported() {
        let f = FrozenInterpreter::<f64>::build(&tiny()).unwrap();
        let tokens = tokenize("cat", f.config(), 2).unwrap();
        let err = f.interpret(&prompt(2, 8, 1), &tokens).unwrap_err();
        assert!(matches!(err, InterpreterError::DimMismatch { expected: 16, found: 8 }));
    }
}

