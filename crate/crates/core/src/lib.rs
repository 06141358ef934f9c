//! Open-book task-oriented dialog engine.
//!
//! Each turn predicts a [`State`] that routes to one of three knowledge
//! sources (the entity database, an explicit search provider, or an
//! implicit language-model provider), acquires knowledge from it and
//! generates a grounded response. The crate also carries the dataset
//! tooling and the full metric suite used to score replays.
//!
//! Module map:
//!
//! - [`dialog`]: turns, annotations, dialogs and live sessions.
//! - [`state`]: the `Database:` / `Explicit:` / `Implicit:` state grammar.
//! - [`knowledge`]: database lookup, provider clients, prompt builders, cache.
//! - [`policy`]: model input serialization and generation backends.
//! - [`engine`]: the per-turn pipeline and batch replay.
//! - [`eval`]: BLEU, Inform, Success, Combined, Accuracy, Query F1, Success Rate.
//! - [`dataset`]: loading, statistics, subset expansion, training/augmentation emitters.

pub mod dataset;
pub mod dialog;
pub mod engine;
pub mod eval;
pub mod knowledge;
pub mod policy;
pub mod state;
mod text;

pub use dialog::{DialogError, DialogExample, GoalAnnotation, Role, Session, Turn, TurnAnnotation};
pub use engine::{Engine, EngineConfig, EngineError, TurnResult};
pub use knowledge::{KnowledgeItem, Provenance};
pub use state::{BeliefState, KnowledgeSource, State, Vocabulary};

/// Exact rational scalar; Query F1 and rate arithmetic are closed over it.
pub type Exact = num_rational::Ratio<i64>;

/// Metric report in double precision, the default for run files.
pub type MetricReport = eval::MetricReport<f64>;
/// Metric report in single precision.
pub type MetricReportF32 = eval::MetricReport<f32>;
