//! Controversial sentence pairs for adjudicating among language models.
//!
//! The crate covers the full stimulus life cycle: building a shared
//! vocabulary and a pool of natural eight-word sentences, scoring sentences
//! under n-gram, unidirectional and bidirectional (masked) language models,
//! selecting controversial natural pairs, synthesizing controversial
//! sentences by constrained hill-climbing, assembling balanced 2AFC stimulus
//! sets, and evaluating model-human alignment.
//!
//! Numeric routines that do not depend on a scorer (ranks, regression,
//! selection, statistics) are generic over [`Real`]; the aliases below pin
//! them to `f64`, which is what every scorer produces.

pub mod bundled;
pub mod corpus;
pub mod evaluation;
pub mod experiment;
pub mod ngram;
pub mod num;
pub mod scoring;
pub mod seed;
pub mod selection;
pub mod synthesis;
pub mod tsv;

pub use num::Real;

/// Natural-log probability as produced by every scorer.
pub type LogProb = f64;
/// Sentence-by-scorer table of log probabilities.
pub type ScoreTable = scoring::ScoreMatrix<f64>;
/// Sentence-by-model table of fractional ranks.
pub type RankTable = scoring::ScoreMatrix<f64>;

/// Online fit of a scorer's log probability from a cheap proxy.
pub type Regression = synthesis::RegressionFit<f64>;
/// Controversial natural-pair assignment problem.
pub type PairAssignment = selection::AssignmentProblem<f64>;
