//! Session losses, the stimulation rate Γ and the session-by-session
//! training loop.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::embeddings::{DataError, EmbeddingDataset};
use crate::interpreter::{FrozenInterpreter, InterpreterError, TokenSequence};
use crate::model::{ClassVocabulary, MemoryPrompt};
use crate::numerics::{grad, NumericsError, Real, RealArray, Tape, Var};
use crate::seeds::{derive, Stream};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, GammaSummary,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Interpreter(#[from] InterpreterError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty session")]
    EmptySession,
    #[error("class {0} is not part of the current session")]
    LabelOutsideSession(u32),
    #[error("class {0} was already learned in an earlier session")]
    ClassOverlap(u32),
    #[error("class {0} has no training samples in this session")]
    NoSamples(u32),
    #[error("consolidation penalty needs an anchor, which is set after the base session")]
    NoAnchor,
    #[error("non-finite gradient at prompt entry {index} (row {row}, col {col})")]
    NonFiniteGradient { index: usize, row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_base: usize,
    pub epochs_incremental: usize,
    pub penalty_weight: f64,
    /// Inverse temperature applied to cosine scores before the softmax.
    pub logit_scale: f64,
    pub normalize_gamma: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            batch_size: 256,
            epochs_base: 50,
            epochs_incremental: 100,
            penalty_weight: 1.0,
            logit_scale: 1.0,
            normalize_gamma: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.epochs_base == 0 || self.epochs_incremental == 0 {
            return fail("epoch counts must be at least 1");
        }
        if !(self.penalty_weight >= 0.0 && self.penalty_weight.is_finite()) {
            return fail("penalty_weight must be nonnegative");
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return fail("logit_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionMetrics {
    pub session: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub steps: usize,
    /// Sample-weighted mean total loss over the last epoch.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState<T> {
    prompt: MemoryPrompt<T>,
    anchor: Option<RealArray<T>>,
    gamma: RealArray<T>,
    session: usize,
    learned: Vec<u32>,
    history: Vec<SessionMetrics>,
}

impl<T: Real> TrainingState<T> {
    pub fn new(prompt: MemoryPrompt<T>) -> Self {
        let gamma = RealArray::zeros(prompt.array().shape().to_vec());
        Self {
            prompt,
            anchor: None,
            gamma,
            session: 0,
            learned: Vec::new(),
            history: Vec::new(),
        }
    }

    /// Rebuilds a state from its persisted parts. `learned` lists the classes
    /// of every completed session, which checkpoints do not store.
    pub fn restore(
        prompt: MemoryPrompt<T>,
        anchor: Option<RealArray<T>>,
        gamma: RealArray<T>,
        session: usize,
        learned: Vec<u32>,
    ) -> Result<Self> {
        let shape = prompt.array().shape();
        if gamma.shape() != shape || anchor.as_ref().is_some_and(|a| a.shape() != shape) {
            return Err(TrainError::Shape("anchor and gamma must match the prompt".into()));
        }
        if session == 0 && anchor.is_some() {
            return Err(TrainError::Shape("an anchor cannot exist before the base session".into()));
        }
        let mut learned = learned;
        learned.sort_unstable();
        Ok(Self {
            prompt,
            anchor,
            gamma,
            session,
            learned,
            history: Vec::new(),
        })
    }

    pub fn prompt(&self) -> &MemoryPrompt<T> {
        &self.prompt
    }

    pub fn anchor(&self) -> Option<&RealArray<T>> {
        self.anchor.as_ref()
    }

    pub fn gamma(&self) -> &RealArray<T> {
        &self.gamma
    }

    /// Number of completed sessions.
    pub fn session(&self) -> usize {
        self.session
    }

    pub fn learned(&self) -> &[u32] {
        &self.learned
    }

    pub fn history(&self) -> &[SessionMetrics] {
        &self.history
    }
}

/// Per-entry penalty weights `|Γ|`, scaled to unit max when requested.
pub fn penalty_weights<T: Real>(gamma: &RealArray<T>, normalize: bool) -> Vec<T> {
    let mut w: Vec<T> = gamma.data().iter().map(|g| g.abs()).collect();
    let max = gamma.max_abs();
    if normalize && max > T::zero() {
        w.iter_mut().for_each(|v| *v /= max);
    }
    w
}

/// Image vectors of `pairs` as a `[B×D]` array.
pub fn image_matrix<T: Real>(dataset: &EmbeddingDataset, pairs: &[(u32, u32)]) -> Result<RealArray<T>> {
    let mut data = Vec::with_capacity(pairs.len() * dataset.dim());
    for &(c, s) in pairs {
        data.extend(dataset.get(c, s)?.vector().iter().map(|&v| T::of(v as f64)));
    }
    Ok(RealArray::new(vec![pairs.len(), dataset.dim()], data)?)
}

/// Records the embeddings of `classes` under `prompt` as one `[C×D]` node.
pub fn trace_bank<'w, T: Real>(
    tape: &mut Tape<'w, T>,
    interpreter: &'w FrozenInterpreter<T>,
    prompt: Var,
    tokens: &[&TokenSequence],
) -> Result<Var> {
    let rows = tokens
        .iter()
        .map(|t| interpreter.trace(tape, prompt, t))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(tape.concat_rows(&rows)?)
}

/// Mean cross-entropy of `softmax(β·s)` over the whole learned set, with
/// targets given as positions in `learned`.
#[allow(clippy::too_many_arguments)]
pub fn session_cross_entropy<'w, T: Real>(
    tape: &mut Tape<'w, T>,
    interpreter: &'w FrozenInterpreter<T>,
    prompt: Var,
    vocabulary: &ClassVocabulary,
    learned: &[u32],
    session_classes: &[u32],
    images: &RealArray<T>,
    labels: &[u32],
    logit_scale: T,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut targets = Vec::with_capacity(labels.len());
    for &y in labels {
        if !session_classes.contains(&y) {
            return Err(TrainError::LabelOutsideSession(y));
        }
        let pos = learned
            .iter()
            .position(|&c| c == y)
            .ok_or(TrainError::LabelOutsideSession(y))?;
        targets.push(pos);
    }
    let tokens: Vec<&TokenSequence> = learned.iter().map(|&c| vocabulary.tokens(c)).collect();
    let bank = trace_bank(tape, interpreter, prompt, &tokens)?;
    let images = tape.constant(images.clone());
    let scores = tape.cosine_scores(images, bank)?;
    Ok(tape.cross_entropy(scores, &targets, logit_scale)?)
}

/// `(α/|Θ|) Σ w (θ − θ*)²`.
pub fn consolidation_penalty<'w, T: Real>(
    tape: &mut Tape<'w, T>,
    prompt: Var,
    anchor: Option<&RealArray<T>>,
    gamma: &RealArray<T>,
    penalty_weight: T,
    normalize_gamma: bool,
) -> Result<Var> {
    let anchor = anchor.ok_or(TrainError::NoAnchor)?;
    let theta = tape.value(prompt);
    if theta.shape() != anchor.shape() || theta.shape() != gamma.shape() {
        return Err(TrainError::Shape(format!(
            "prompt {:?}, anchor {:?}, gamma {:?}",
            theta.shape(),
            anchor.shape(),
            gamma.shape()
        )));
    }
    let count = theta.len();
    let scale = if count == 0 {
        T::zero()
    } else {
        penalty_weight / T::of(count as f64)
    };
    let weights = penalty_weights(gamma, normalize_gamma);
    Ok(tape.weighted_squared_distance(prompt, anchor.data(), &weights, scale)?)
}

/// Cross-entropy plus, once an anchor exists, the consolidation penalty.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<'w, T: Real>(
    tape: &mut Tape<'w, T>,
    interpreter: &'w FrozenInterpreter<T>,
    prompt: Var,
    state: &TrainingState<T>,
    vocabulary: &ClassVocabulary,
    learned: &[u32],
    session_classes: &[u32],
    images: &RealArray<T>,
    labels: &[u32],
    config: &TrainConfig,
) -> Result<Var> {
    let ce = session_cross_entropy(
        tape,
        interpreter,
        prompt,
        vocabulary,
        learned,
        session_classes,
        images,
        labels,
        T::of(config.logit_scale),
    )?;
    if state.anchor.is_none() {
        return Ok(ce);
    }
    let penalty = consolidation_penalty(
        tape,
        prompt,
        state.anchor.as_ref(),
        &state.gamma,
        T::of(config.penalty_weight),
        config.normalize_gamma,
    )?;
    Ok(tape.add(ce, penalty)?)
}

/// `Θ − γ·∇`.
pub fn sgd_step<T: Real>(theta: &RealArray<T>, gradient: &RealArray<T>, learning_rate: T) -> Result<RealArray<T>> {
    if theta.shape() != gradient.shape() {
        return Err(TrainError::Shape(format!(
            "prompt {:?} vs gradient {:?}",
            theta.shape(),
            gradient.shape()
        )));
    }
    if let Some(index) = gradient.data().iter().position(|g| !g.is_finite()) {
        let cols = theta.cols().max(1);
        return Err(TrainError::NonFiniteGradient {
            index,
            row: index / cols,
            col: index % cols,
        });
    }
    let data = theta
        .data()
        .iter()
        .zip(gradient.data())
        .map(|(&t, &g)| t - learning_rate * g)
        .collect();
    Ok(RealArray::new(theta.shape().to_vec(), data)?)
}

/// Γ = ∇_Θ⟨I, M_c⟩, obtained by a backward sweep from `M_c` with cotangent `I`.
pub fn stimulation_rate<T: Real>(
    interpreter: &FrozenInterpreter<T>,
    prompt: &RealArray<T>,
    image: &[T],
    tokens: &TokenSequence,
) -> Result<RealArray<T>> {
    stimulation_rate_on(&mut Tape::new(), interpreter, prompt, image, tokens)
}

/// As [`stimulation_rate`], recording onto a caller-configured empty tape.
pub fn stimulation_rate_on<'w, T: Real>(
    tape: &mut Tape<'w, T>,
    interpreter: &'w FrozenInterpreter<T>,
    prompt: &RealArray<T>,
    image: &[T],
    tokens: &TokenSequence,
) -> Result<RealArray<T>> {
    if image.len() != interpreter.dim() {
        return Err(TrainError::Shape(format!(
            "image dim {} vs interpreter dim {}",
            image.len(),
            interpreter.dim()
        )));
    }
    let leaf = tape.leaf(prompt.clone());
    let m = interpreter.trace(tape, leaf, tokens)?;
    let cotangent = RealArray::vector(image.to_vec())?;
    let grads = tape.backward(m, &cotangent)?;
    Ok(grads
        .take(leaf)
        .unwrap_or_else(|| RealArray::zeros(prompt.shape().to_vec())))
}

/// Sum of the stimulation rates of each class's first training sample
/// (lowest sample id among `pairs`).
pub fn session_gamma<T: Real>(
    interpreter: &FrozenInterpreter<T>,
    prompt: &RealArray<T>,
    vocabulary: &ClassVocabulary,
    dataset: &EmbeddingDataset,
    classes: &[u32],
    pairs: &[(u32, u32)],
) -> Result<RealArray<T>> {
    let mut total = RealArray::zeros(prompt.shape().to_vec());
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    for c in sorted {
        let first = pairs
            .iter()
            .filter(|(pc, _)| *pc == c)
            .map(|&(_, s)| s)
            .min()
            .ok_or(TrainError::NoSamples(c))?;
        let image: Vec<T> = dataset.get(c, first)?.vector().iter().map(|&v| T::of(v as f64)).collect();
        let rate = stimulation_rate(interpreter, prompt, &image, vocabulary.tokens(c))?;
        total = total.add(&rate)?;
    }
    Ok(total)
}

/// Adds this session's Γ into the accumulated Γ.
pub fn accumulate_gamma<T: Real>(
    state: &mut TrainingState<T>,
    interpreter: &FrozenInterpreter<T>,
    vocabulary: &ClassVocabulary,
    dataset: &EmbeddingDataset,
    classes: &[u32],
    pairs: &[(u32, u32)],
) -> Result<()> {
    let increment = session_gamma(interpreter, state.prompt.array(), vocabulary, dataset, classes, pairs)?;
    state.gamma = state.gamma.add(&increment)?;
    Ok(())
}

/// One session's training input: its new classes and training pairs.
#[derive(Debug, Clone, Copy)]
pub struct SessionInput<'a> {
    pub classes: &'a [u32],
    pub pairs: &'a [(u32, u32)],
}

/// Trains one session: SGD epochs on the total loss, then Γ accumulation,
/// then (after the base session) the anchor snapshot.
pub fn train_session<T: Real>(
    state: &mut TrainingState<T>,
    session: SessionInput<'_>,
    interpreter: &FrozenInterpreter<T>,
    vocabulary: &ClassVocabulary,
    dataset: &EmbeddingDataset,
    config: &TrainConfig,
) -> Result<SessionMetrics> {
    config.validate()?;
    if session.classes.is_empty() || session.pairs.is_empty() {
        return Err(TrainError::EmptySession);
    }
    if let Some(&c) = session.classes.iter().find(|c| state.learned.contains(c)) {
        return Err(TrainError::ClassOverlap(c));
    }
    if let Some(&(c, _)) = session.pairs.iter().find(|(c, _)| !session.classes.contains(c)) {
        return Err(TrainError::LabelOutsideSession(c));
    }
    if let Some(&c) = session.classes.iter().find(|c| !session.pairs.iter().any(|(pc, _)| pc == *c)) {
        return Err(TrainError::NoSamples(c));
    }

    let index = state.session + 1;
    let mut learned = state.learned.clone();
    learned.extend_from_slice(session.classes);
    learned.sort_unstable();

    let epochs = if index == 1 {
        config.epochs_base
    } else {
        config.epochs_incremental
    };
    let lr = T::of(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(config.seed, Stream::Shuffle, index as u64));
    let mut order: Vec<usize> = (0..session.pairs.len()).collect();
    let mut steps = 0;
    let mut last_epoch_loss = 0.0;

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let pairs: Vec<(u32, u32)> = chunk.iter().map(|&i| session.pairs[i]).collect();
            let images = image_matrix::<T>(dataset, &pairs)?;
            let labels: Vec<u32> = pairs.iter().map(|&(c, _)| c).collect();
            let mut tape = Tape::new();
            let leaf = tape.leaf(state.prompt.array().clone());
            let loss = total_loss(
                &mut tape,
                interpreter,
                leaf,
                state,
                vocabulary,
                &learned,
                session.classes,
                &images,
                &labels,
                config,
            )?;
            epoch_loss += tape.value(loss).scalar_value()?.as_f64() * pairs.len() as f64;
            let gradient = grad(&tape, loss, leaf)?;
            let updated = sgd_step(state.prompt.array(), &gradient, lr)?;
            state.prompt.set(updated);
            steps += 1;
        }
        last_epoch_loss = epoch_loss / session.pairs.len() as f64;
    }

    accumulate_gamma(state, interpreter, vocabulary, dataset, session.classes, session.pairs)?;
    if index == 1 {
        state.anchor = Some(state.prompt.array().clone());
    }
    state.session = index;
    state.learned = learned;
    let metrics = SessionMetrics {
        session: index,
        epochs,
        samples_per_epoch: session.pairs.len(),
        steps,
        final_loss: last_epoch_loss,
    };
    state.history.push(metrics.clone());
    Ok(metrics)
}

/// Mean `|θ − θ*|` over the top and bottom deciles of `|Γ|`, returned as
/// `(top, bottom)`. Entries are ranked by `|Γ|` with ties broken by index.
pub fn decile_drift<T: Real>(state: &TrainingState<T>) -> Option<(f64, f64)> {
    let anchor = state.anchor.as_ref()?;
    let theta = state.prompt.array();
    let n = theta.len();
    let k = n / 10;
    if k == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let g = state.gamma.data();
    order.sort_by(|&a, &b| g[a].abs().partial_cmp(&g[b].abs()).unwrap().then(a.cmp(&b)));
    let drift = |i: usize| (theta.data()[i] - anchor.data()[i]).abs().as_f64();
    let bottom = order[..k].iter().map(|&i| drift(i)).sum::<f64>() / k as f64;
    let top = order[n - k..].iter().map(|&i| drift(i)).sum::<f64>() / k as f64;
    Some((top, bottom))
}
