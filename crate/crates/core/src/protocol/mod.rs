//! Session plans, N-way K-shot sampling, union evaluation and the
//! experiment loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::embeddings::EmbeddingDataset;
use crate::interpreter::{FrozenInterpreter, InterpreterError};
use crate::model::{ClassEmbeddingBank, ClassVocabulary, MemoryPrompt};
use crate::numerics::{NumericsError, Real};
use crate::seeds::{derive, Stream};
use crate::training::{train_session, SessionInput, TrainConfig, TrainError, TrainingState};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("plan needs {needed} classes but the dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class_id} has {available} training samples, fewer than {shots} shots")]
    InsufficientSamples {
        class_id: u32,
        available: usize,
        shots: usize,
    },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("session {0} is outside the plan")]
    NoSuchSession(usize),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("train and test data disagree: {0}")]
    SplitMismatch(String),
    #[error("session {session}: {source}")]
    Session { session: usize, source: Box<ProtocolError> },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Interpreter(#[from] InterpreterError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanKind {
    /// 60 base classes, then 8 sessions of 5-way 5-shot.
    CifarLike,
    /// 100 base classes, then 10 sessions of 10-way 5-shot.
    CubLike,
    /// `base` classes, then `sessions` sessions of `ways`-way `shots`-shot.
    /// Without `sessions`, as many as the remaining classes allow.
    Custom {
        ways: usize,
        shots: usize,
        base: usize,
        sessions: Option<usize>,
    },
}

impl PlanKind {
    /// `(base, ways, shots, sessions)` for a dataset of `classes` classes.
    fn shape(self, classes: usize) -> Result<(usize, usize, usize, usize)> {
        Ok(match self {
            PlanKind::CifarLike => (60, 5, 5, 8),
            PlanKind::CubLike => (100, 10, 5, 10),
            PlanKind::Custom {
                ways,
                shots,
                base,
                sessions,
            } => {
                if base == 0 {
                    return Err(ProtocolError::InvalidPlan("base class count must be positive".into()));
                }
                if ways == 0 || shots == 0 {
                    return Err(ProtocolError::InvalidPlan("ways and shots must be positive".into()));
                }
                let sessions = sessions.unwrap_or(classes.saturating_sub(base) / ways);
                (base, ways, shots, sessions)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionPlan {
    pub base: Vec<u32>,
    pub incremental: Vec<Vec<u32>>,
    pub ways: usize,
    pub shots: usize,
}

impl SessionPlan {
    /// Total sessions including the base session.
    pub fn sessions(&self) -> usize {
        1 + self.incremental.len()
    }

    /// New classes of session `t` (1-based), sorted.
    pub fn classes(&self, t: usize) -> Result<&[u32]> {
        match t {
            0 => Err(ProtocolError::NoSuchSession(0)),
            1 => Ok(&self.base),
            _ => self
                .incremental
                .get(t - 2)
                .map(Vec::as_slice)
                .ok_or(ProtocolError::NoSuchSession(t)),
        }
    }

    /// Every class learned by the end of session `t`, sorted.
    pub fn learned(&self, t: usize) -> Result<Vec<u32>> {
        let mut all = Vec::new();
        for s in 1..=t {
            all.extend_from_slice(self.classes(s)?);
        }
        all.sort_unstable();
        Ok(all)
    }
}

/// Splits a seeded shuffle of the class ids into base and incremental
/// sessions, checking every incremental class has enough training samples.
pub fn build_plan(train: &EmbeddingDataset, kind: PlanKind, seed: u64) -> Result<SessionPlan> {
    let classes = train.num_classes();
    let (base, ways, shots, sessions) = kind.shape(classes)?;
    let needed = base + ways * sessions;
    if needed > classes {
        return Err(ProtocolError::InsufficientClasses {
            needed,
            available: classes,
        });
    }
    let mut ids: Vec<u32> = (0..classes as u32).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(seed, Stream::Plan, 0)));
    let sorted = |s: &[u32]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let plan = SessionPlan {
        base: sorted(&ids[..base]),
        incremental: ids[base..needed].chunks(ways).map(sorted).collect(),
        ways,
        shots,
    };
    for &c in plan.incremental.iter().flatten() {
        let available = train.class_count(c);
        if available < shots {
            return Err(ProtocolError::InsufficientSamples {
                class_id: c,
                available,
                shots,
            });
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionData {
    pub session: usize,
    pub classes: Vec<u32>,
    pub learned: Vec<u32>,
    pub train: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
}

/// Training pairs and union test pairs for session `t`.
pub fn session_data(
    plan: &SessionPlan,
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    t: usize,
    seed: u64,
) -> Result<SessionData> {
    let classes = plan.classes(t)?.to_vec();
    let learned = plan.learned(t)?;
    let mut pairs = Vec::new();
    if t == 1 {
        for &c in &classes {
            pairs.extend(train.class_samples(c).map(|s| (c, s.sample_id())));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, Stream::Shots, t as u64));
        for &c in &classes {
            let ids: Vec<u32> = train.class_samples(c).map(|s| s.sample_id()).collect();
            if ids.len() < plan.shots {
                return Err(ProtocolError::InsufficientSamples {
                    class_id: c,
                    available: ids.len(),
                    shots: plan.shots,
                });
            }
            let mut picked: Vec<u32> = index::sample(&mut rng, ids.len(), plan.shots)
                .into_iter()
                .map(|i| ids[i])
                .collect();
            picked.sort_unstable();
            pairs.extend(picked.into_iter().map(|s| (c, s)));
        }
    }
    let mut test_pairs = Vec::new();
    for &c in &learned {
        test_pairs.extend(test.class_samples(c).map(|s| (c, s.sample_id())));
    }
    Ok(SessionData {
        session: t,
        classes,
        learned,
        train: pairs,
        test: test_pairs,
    })
}

/// Evaluation parallelism from `MFSCIL_THREADS` (default 1).
pub fn thread_count() -> usize {
    std::env::var("MFSCIL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Top-1 accuracy of `bank` over `pairs`, split across `threads` workers.
pub fn evaluate<T: Real>(
    bank: &ClassEmbeddingBank<T>,
    test: &EmbeddingDataset,
    pairs: &[(u32, u32)],
    threads: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(ProtocolError::EmptyTestSet);
    }
    let count = |chunk: &[(u32, u32)]| -> Result<usize> {
        let mut correct = 0;
        for &(c, s) in chunk {
            let sample = test.get(c, s).map_err(TrainError::from)?;
            if bank.classify(sample.vector())? == c {
                correct += 1;
            }
        }
        Ok(correct)
    };
    let threads = threads.clamp(1, pairs.len());
    let correct = if threads == 1 {
        count(pairs)?
    } else {
        let chunk = pairs.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = pairs.chunks(chunk).map(|c| scope.spawn(move || count(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok(correct as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub session: usize,
    pub classes: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<SessionResult>,
}

pub const CSV_HEADER: &str = "session,classes,accuracy,loss,seconds";

impl ResultsTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.3}",
                r.session, r.classes, r.accuracy, r.loss, r.seconds
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err("missing results header".into());
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || format!("results line {}: {line:?}", i + 2);
            if f.len() != 5 {
                return Err(bad());
            }
            rows.push(SessionResult {
                session: f[0].parse().map_err(|_| bad())?,
                classes: f[1].parse().map_err(|_| bad())?,
                accuracy: f[2].parse().map_err(|_| bad())?,
                loss: f[3].parse().map_err(|_| bad())?,
                seconds: f[4].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { rows })
    }

    /// Mean accuracy over all sessions.
    pub fn average_accuracy(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.accuracy).sum::<f64>() / self.rows.len() as f64
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.accuracy)
    }
}

/// Everything an experiment needs besides the data.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub plan: PlanKind,
    pub prompt_len: usize,
    pub suffix: Option<String>,
    pub train: TrainConfig,
    pub seed: u64,
    pub threads: usize,
    /// Stop after this many completed sessions.
    pub stop_after: Option<usize>,
    pub record_wall_time: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome<T> {
    pub plan: SessionPlan,
    pub results: ResultsTable,
    pub state: TrainingState<T>,
}

/// Trains and evaluates every session of the plan. With `resume`, sessions
/// already completed by the state are skipped and `prior` supplies their
/// result rows.
pub fn run_experiment<T: Real>(
    experiment: &Experiment,
    interpreter: &FrozenInterpreter<T>,
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    resume: Option<(TrainingState<T>, ResultsTable)>,
    mut on_session: impl FnMut(&SessionResult),
) -> Result<ExperimentOutcome<T>> {
    if train.labels() != test.labels() {
        return Err(ProtocolError::SplitMismatch("label sets differ".into()));
    }
    if train.dim() != test.dim() {
        return Err(ProtocolError::SplitMismatch(format!(
            "train dim {} vs test dim {}",
            train.dim(),
            test.dim()
        )));
    }
    let plan = build_plan(train, experiment.plan, experiment.seed)?;
    let vocabulary = ClassVocabulary::new(
        interpreter.config(),
        train.labels(),
        experiment.suffix.as_deref(),
        experiment.prompt_len,
    )?;
    let mut config = experiment.train.clone();
    config.seed = experiment.seed;

    let (mut state, mut results) = match resume {
        Some((state, prior)) => {
            let done = state.session();
            if done > plan.sessions() {
                return Err(ProtocolError::NoSuchSession(done));
            }
            let rows = prior.rows.into_iter().filter(|r| r.session <= done).collect();
            (state, ResultsTable { rows })
        }
        None => {
            let prompt = MemoryPrompt::init(
                experiment.prompt_len,
                interpreter.dim(),
                derive(experiment.seed, Stream::Prompt, 0),
            );
            (TrainingState::new(prompt), ResultsTable::default())
        }
    };

    let last = experiment.stop_after.unwrap_or(usize::MAX).min(plan.sessions());
    for t in state.session() + 1..=last {
        let annotate = |e: ProtocolError| ProtocolError::Session {
            session: t,
            source: Box::new(e),
        };
        let started = Instant::now();
        let data = session_data(&plan, train, test, t, experiment.seed).map_err(annotate)?;
        let metrics = train_session(
            &mut state,
            SessionInput {
                classes: &data.classes,
                pairs: &data.train,
            },
            interpreter,
            &vocabulary,
            train,
            &config,
        )
        .map_err(|e| annotate(e.into()))?;
        let bank = ClassEmbeddingBank::build(interpreter, state.prompt(), &vocabulary, &data.learned)
            .map_err(|e| annotate(e.into()))?;
        let accuracy = evaluate(&bank, test, &data.test, experiment.threads).map_err(annotate)?;
        let seconds = started.elapsed().as_secs_f64();
        let row = SessionResult {
            session: t,
            classes: data.learned.len(),
            accuracy,
            loss: metrics.final_loss,
            seconds: if experiment.record_wall_time { seconds } else { 0.0 },
        };
        on_session(&SessionResult { seconds, ..row.clone() });
        results.rows.push(row);
    }
    Ok(ExperimentOutcome { plan, results, state })
}
