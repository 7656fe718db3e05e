//! Scorer interface and sentence-probability estimators.
//!
//! A [`LanguageScorer`] exposes the primitive queries a model can answer:
//! next-word log probabilities for left-to-right models, and token-level
//! masked log probabilities for bidirectional ones. Sentence-level
//! estimators (chain sum, permutation-averaged chain, pseudo-log-likelihood)
//! are built on top of those primitives in [`bidirectional`] and selected
//! per [`ScorerHandle`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;
use crate::ngram::NgramModel;
use crate::num::{average_ranks, Real};

pub mod bidirectional;
pub mod remote;
pub mod toy;

pub use bidirectional::{
    completion_logprobs, masked_word_logprob, score_bidirectional, score_pll, BidirectionalScore, MaskedWordScore,
    PositionPermutation, WordSlot, MAX_EXHAUSTIVE_TOKEN_ORDERS, SAMPLED_TOKEN_ORDERS,
};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("scorer '{scorer}' does not support {op}")]
    Capability { scorer: String, op: &'static str },
    #[error("input error: {0}")]
    Input(String),
    #[error("transport error (retryable): {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("scoring aborted after {completed} of {total} steps: {source}")]
    Partial {
        completed: usize,
        total: usize,
        #[source]
        source: Box<ScoreError>,
    },
    #[error("invalid scorer description: {0}")]
    Invalid(String),
}

impl ScoreError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ScoreError::Transport(_) => true,
            ScoreError::Partial { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}

pub type Result<T, E = ScoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Ngram,
    Unidirectional,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcess,
    Remote,
}

/// How a tokenizer marks word boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WhitespaceConvention {
    PrefixSpace,
    SuffixSpace,
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub uni_logprob: bool,
    pub masked_logprob: bool,
    pub masked_topk: bool,
    pub masked_extremes: bool,
}

impl Capabilities {
    pub const UNIDIRECTIONAL: Self = Self { uni_logprob: true, masked_logprob: false, masked_topk: false, masked_extremes: false };
    pub const MASKED: Self = Self { uni_logprob: false, masked_logprob: true, masked_topk: true, masked_extremes: true };
    pub const ALL: Self = Self { uni_logprob: true, masked_logprob: true, masked_topk: true, masked_extremes: true };
}

/// Static description of a scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerInfo {
    pub name: String,
    pub kind: ScorerKind,
    pub transport: Transport,
    pub whitespace_convention: WhitespaceConvention,
    pub capabilities: Capabilities,
    pub token_inventory_size: usize,
}

impl ScorerInfo {
    pub fn validate(&self) -> Result<()> {
        let c = self.capabilities;
        let ok = match self.kind {
            ScorerKind::Ngram | ScorerKind::Unidirectional => c.uni_logprob,
            ScorerKind::Bidirectional => c.masked_logprob && c.masked_topk && c.masked_extremes,
        };
        if ok {
            Ok(())
        } else {
            Err(ScoreError::Invalid(format!("{} scorer '{}' lacks required capabilities", kind_name(self.kind), self.name)))
        }
    }
}

fn kind_name(kind: ScorerKind) -> &'static str {
    match kind {
        ScorerKind::Ngram => "ngram",
        ScorerKind::Unidirectional => "unidirectional",
        ScorerKind::Bidirectional => "bidirectional",
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(kind_name(*self))
    }
}

/// Which token subset a masked slot is normalized over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskClass {
    WholeWord,
    WordInitial,
    WordFinal,
    WordInternal,
    /// The scorer's raw distribution over its whole token inventory.
    Unrestricted,
}

impl MaskClass {
    /// Class of token `index` within a word of `len` tokens.
    pub fn for_token(index: usize, len: usize) -> Self {
        match (len, index) {
            (1, _) => MaskClass::WholeWord,
            (_, 0) => MaskClass::WordInitial,
            (l, i) if i + 1 == l => MaskClass::WordFinal,
            _ => MaskClass::WordInternal,
        }
    }
}

/// Token-level template; `None` is a mask token.
pub type TokenTemplate = Vec<Option<String>>;

/// One masked-slot query: log probability of `token` at `position`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedQuery {
    pub template: TokenTemplate,
    pub position: usize,
    #[serde(alias = "word")]
    pub token: String,
    pub class: MaskClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extremes {
    pub argmax: TokenScore,
    pub argmin: TokenScore,
}

/// Primitive queries a probability model can answer. Methods a model does
/// not support keep their default, which reports a capability error.
pub trait LanguageScorer: Send + Sync {
    fn info(&self) -> &ScorerInfo;

    /// Log probability of each of `words` as the next word after `prefix`.
    fn next_word_logprobs(&self, prefix: &[String], words: &[String]) -> Result<Vec<f64>> {
        let _ = (prefix, words);
        Err(self.unsupported("uni_next_logprob"))
    }

    /// Left-to-right chain sum over the words.
    fn chain_logprob(&self, words: &[String]) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..words.len() {
            total += self.next_word_logprobs(&words[..i], std::slice::from_ref(&words[i]))?[0];
        }
        Ok(total)
    }

    /// Tokens of a single word under the scorer's tokenizer.
    fn tokenize(&self, word: &str) -> Result<Vec<String>> {
        let _ = word;
        Err(self.unsupported("tokenize"))
    }

    fn masked_logprobs(&self, queries: &[MaskedQuery]) -> Result<Vec<f64>> {
        let _ = queries;
        Err(self.unsupported("masked_logprob"))
    }

    fn masked_topk(&self, template: &[Option<String>], position: usize, class: MaskClass, k: usize) -> Result<Vec<TokenScore>> {
        let _ = (template, position, class, k);
        Err(self.unsupported("masked_topk"))
    }

    fn masked_extremes(&self, template: &[Option<String>], position: usize, class: MaskClass) -> Result<Extremes> {
        let _ = (template, position, class);
        Err(self.unsupported("masked_extremes"))
    }

    fn unsupported(&self, op: &'static str) -> ScoreError {
        ScoreError::Capability { scorer: self.info().name.clone(), op }
    }
}

/// Left-to-right sentence log probability for n-gram and unidirectional
/// scorers.
pub fn score_unidirectional(m: &dyn LanguageScorer, words: &[String]) -> Result<f64> {
    match m.info().kind {
        ScorerKind::Ngram | ScorerKind::Unidirectional => m.chain_logprob(words),
        ScorerKind::Bidirectional => Err(m.unsupported("unidirectional chain scoring")),
    }
}

/// Adapter exposing an [`NgramModel`] through the scorer interface.
pub struct NgramScorer {
    info: ScorerInfo,
    model: Arc<NgramModel>,
}

impl NgramScorer {
    pub fn new(name: &str, model: Arc<NgramModel>) -> Self {
        let info = ScorerInfo {
            name: name.to_string(),
            kind: ScorerKind::Ngram,
            transport: Transport::InProcess,
            whitespace_convention: WhitespaceConvention::None,
            capabilities: Capabilities::UNIDIRECTIONAL,
            token_inventory_size: model.vocabulary_size(),
        };
        Self { info, model }
    }

    pub fn model(&self) -> &NgramModel {
        &self.model
    }
}

fn ngram_input(e: crate::ngram::NgramError) -> ScoreError {
    ScoreError::Input(e.to_string())
}

impl LanguageScorer for NgramScorer {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn next_word_logprobs(&self, prefix: &[String], words: &[String]) -> Result<Vec<f64>> {
        words.iter().map(|w| self.model.next_logprob(prefix, w).map_err(ngram_input)).collect()
    }

    fn chain_logprob(&self, words: &[String]) -> Result<f64> {
        self.model.sentence_logprob(words).map_err(ngram_input)
    }

    fn tokenize(&self, word: &str) -> Result<Vec<String>> {
        self.model.continuation_count(word).map_err(ngram_input)?;
        Ok(vec![word.to_string()])
    }
}

/// How a handle turns a scorer into sentence log probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Estimator {
    /// Left-to-right chain (n-gram and unidirectional scorers).
    Chain,
    /// Mean over random word-reveal orders (bidirectional scorers).
    PermutationChain { permutations: usize, seed: u64 },
    /// Sum of one-token-masked log probabilities (bidirectional scorers).
    PseudoLogLikelihood,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::Chain => write!(f, "chain"),
            Estimator::PermutationChain { permutations, seed } => write!(f, "permutation-chain(n={permutations},seed={seed})"),
            Estimator::PseudoLogLikelihood => write!(f, "pll"),
        }
    }
}

/// A named scorer paired with a sentence-level estimator.
///
/// Permutation-chain handles use one permutation set per run (derived from
/// the estimator seed), so repeated evaluations of a sentence agree, and
/// they memoize results.
pub struct ScorerHandle {
    name: String,
    scorer: Arc<dyn LanguageScorer>,
    estimator: Estimator,
    cache: Option<Mutex<HashMap<Vec<String>, f64>>>,
}

impl fmt::Debug for ScorerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScorerHandle").field("name", &self.name).field("estimator", &self.estimator).finish()
    }
}

impl ScorerHandle {
    pub fn new(name: impl Into<String>, scorer: Arc<dyn LanguageScorer>, estimator: Estimator) -> Result<Self> {
        let kind = scorer.info().kind;
        match (kind, estimator) {
            (ScorerKind::Bidirectional, Estimator::Chain) => {
                return Err(ScoreError::Invalid("bidirectional scorers need a masked estimator".into()))
            }
            (ScorerKind::Ngram | ScorerKind::Unidirectional, Estimator::PermutationChain { .. } | Estimator::PseudoLogLikelihood) => {
                return Err(ScoreError::Capability { scorer: scorer.info().name.clone(), op: "masked estimation" })
            }
            (_, Estimator::PermutationChain { permutations: 0, .. }) => {
                return Err(ScoreError::Invalid("permutation count must be positive".into()))
            }
            _ => {}
        }
        let cache = (kind == ScorerKind::Bidirectional).then(|| Mutex::new(HashMap::new()));
        Ok(Self { name: name.into(), scorer, estimator, cache })
    }

    /// Default estimator for the scorer's kind.
    pub fn with_defaults(scorer: Arc<dyn LanguageScorer>, permutations: usize, seed: u64) -> Result<Self> {
        let name = scorer.info().name.clone();
        let estimator = match scorer.info().kind {
            ScorerKind::Bidirectional => Estimator::PermutationChain { permutations, seed },
            _ => Estimator::Chain,
        };
        Self::new(name, scorer, estimator)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn info(&self) -> &ScorerInfo {
        self.scorer.info()
    }

    pub fn kind(&self) -> ScorerKind {
        self.scorer.info().kind
    }

    pub fn estimator(&self) -> Estimator {
        self.estimator
    }

    pub fn scorer(&self) -> &Arc<dyn LanguageScorer> {
        &self.scorer
    }

    pub fn log_prob(&self, words: &[String]) -> Result<f64> {
        if let Some(cache) = &self.cache {
            if let Some(&v) = cache.lock().expect("cache lock").get(words) {
                return Ok(v);
            }
        }
        let v = match self.estimator {
            Estimator::Chain => score_unidirectional(self.scorer.as_ref(), words)?,
            Estimator::PermutationChain { permutations, seed } => {
                score_bidirectional(self.scorer.as_ref(), words, permutations, seed)?.mean_logprob
            }
            Estimator::PseudoLogLikelihood => score_pll(self.scorer.as_ref(), words)?,
        };
        if let Some(cache) = &self.cache {
            cache.lock().expect("cache lock").insert(words.to_vec(), v);
        }
        Ok(v)
    }

    pub fn sentence_logprob(&self, s: &Sentence) -> Result<f64> {
        self.log_prob(&s.words)
    }
}

/// Fractional ranks: least probable 0, most probable 1, ties averaged.
pub fn percentile_rank<T: Real>(scores: &[T]) -> Vec<T> {
    let n = scores.len();
    if n < 2 {
        return vec![T::of(0.5); n];
    }
    let denom = T::of_usize(n - 1);
    average_ranks(scores).into_iter().map(|r| (r - T::one()) / denom).collect()
}

/// Sentence-by-scorer table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix<T> {
    pub sentence_ids: Vec<String>,
    pub scorers: Vec<String>,
    /// Row-major: `values[sentence][scorer]`.
    pub values: Vec<Vec<T>>,
    /// Estimator configuration per scorer column.
    pub provenance: BTreeMap<String, String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl<T: Real> ScoreMatrix<T> {
    pub fn new(sentence_ids: Vec<String>, scorers: Vec<String>, values: Vec<Vec<T>>) -> Result<Self> {
        if values.len() != sentence_ids.len() || values.iter().any(|r| r.len() != scorers.len()) {
            return Err(ScoreError::Input("score matrix shape does not match its labels".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ScoreError::Input("score matrix contains a non-finite value".into()));
        }
        let index = sentence_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self { sentence_ids, scorers, values, provenance: BTreeMap::new(), index })
    }

    fn reindex(&mut self) {
        self.index = self.sentence_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }

    pub fn row_of(&self, sentence_id: &str) -> Option<usize> {
        self.index.get(sentence_id).copied()
    }

    pub fn column_of(&self, scorer: &str) -> Option<usize> {
        self.scorers.iter().position(|s| s == scorer)
    }

    pub fn get(&self, sentence_id: &str, scorer: &str) -> Option<T> {
        Some(self.values[self.row_of(sentence_id)?][self.column_of(scorer)?])
    }

    pub fn column(&self, scorer: &str) -> Option<Vec<T>> {
        let c = self.column_of(scorer)?;
        Some(self.values.iter().map(|r| r[c]).collect())
    }

    /// Per-scorer fractional ranks over all rows.
    pub fn to_ranks(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.scorers.len() {
            let col: Vec<T> = self.values.iter().map(|r| r[c]).collect();
            for (r, v) in percentile_rank(&col).into_iter().enumerate() {
                out.values[r][c] = v;
            }
        }
        out
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (name, prov) in &self.provenance {
            writeln!(out, "#provenance\t{name}\t{prov}")?;
        }
        writeln!(out, "sentence_id\t{}", self.scorers.join("\t"))?;
        for (id, row) in self.sentence_ids.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{}", v.as_f64())).collect();
            writeln!(out, "{id}\t{}", cells.join("\t"))?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self> {
        let bad = |m: String| ScoreError::Input(m);
        let mut provenance = BTreeMap::new();
        let mut header: Option<Vec<String>> = None;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields[0] == "#provenance" && fields.len() >= 3 {
                provenance.insert(fields[1].to_string(), fields[2..].join("\t"));
                continue;
            }
            match &header {
                None => header = Some(fields[1..].iter().map(|s| s.to_string()).collect()),
                Some(h) => {
                    if fields.len() != h.len() + 1 {
                        return Err(bad(format!("line {}: expected {} cells", i + 1, h.len() + 1)));
                    }
                    ids.push(fields[0].to_string());
                    let row = fields[1..]
                        .iter()
                        .map(|c| c.parse::<f64>().map(T::of).map_err(|e| bad(format!("line {}: {e}", i + 1))))
                        .collect::<Result<Vec<T>>>()?;
                    values.push(row);
                }
            }
        }
        let mut m = Self::new(ids, header.unwrap_or_default(), values)?;
        m.provenance = provenance;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| ScoreError::Input(format!("{}: {e}", path.display())))?;
        let mut m = Self::read_tsv(io::BufReader::new(f))?;
        m.reindex();
        Ok(m)
    }
}

/// Scores every sentence under every handle. Sentences are processed in
/// parallel; each cell is a deterministic function of its inputs.
pub fn score_sentences(handles: &[ScorerHandle], sentences: &[Sentence]) -> Result<ScoreMatrix<f64>> {
    let values = sentences
        .par_iter()
        .map(|s| handles.iter().map(|h| h.sentence_logprob(s)).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut m = ScoreMatrix::new(
        sentences.iter().map(|s| s.id.clone()).collect(),
        handles.iter().map(|h| h.name().to_string()).collect(),
        values,
    )?;
    for h in handles {
        m.provenance.insert(h.name().to_string(), h.estimator().to_string());
    }
    Ok(m)
}
