//! Shared vocabulary, natural sentence pool and control sentences.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Number of words in every sentence handled by the toolkit.
pub const SENTENCE_LEN: usize = 8;

const DEFAULT_REPEATABLE: &str = include_str!("../data/repeatable_words.txt");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no lexicon word reaches the minimum rate {min_rate}")]
    EmptyVocabulary { min_rate: f64 },
    #[error("minimum rate must be positive, got {0}")]
    InvalidRate(f64),
    #[error("sentence pool too small: need {required} sentences, have {available}")]
    InsufficientPool { required: usize, available: usize },
    #[error("sentence {0} cannot be scrambled into a different order")]
    Unscramblable(String),
    #[error("invalid sentence {id}: {reason}")]
    InvalidSentence { id: String, reason: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Case normalization used for every membership test.
pub fn normalize_word(word: &str) -> String {
    word.to_lowercase()
}

/// Tokens of a raw corpus line for counting: whitespace split, outer
/// punctuation trimmed, lowercased. Empty tokens are skipped.
pub fn corpus_tokens(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split_whitespace().filter_map(|t| {
        let t = t.trim_matches(|c: char| !c.is_alphanumeric());
        (!t.is_empty()).then(|| normalize_word(t))
    })
}

/// Closed word list with corpus counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    counts: BTreeMap<String, u64>,
    corpus_token_total: u64,
}

impl Vocabulary {
    /// Builds a vocabulary directly from counts; keys are normalized.
    pub fn from_counts<S: AsRef<str>>(counts: impl IntoIterator<Item = (S, u64)>, corpus_token_total: u64) -> Self {
        let counts = counts
            .into_iter()
            .map(|(w, c)| (normalize_word(w.as_ref()), c))
            .collect();
        Self { counts, corpus_token_total }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.counts.contains_key(&normalize_word(word))
    }

    pub fn count(&self, word: &str) -> Option<u64> {
        self.counts.get(&normalize_word(word)).copied()
    }

    /// Words in sorted order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn corpus_token_total(&self) -> u64 {
        self.corpus_token_total
    }

    /// log10 of the word's relative corpus frequency.
    pub fn log10_frequency(&self, word: &str) -> Option<f64> {
        let c = self.count(word)?;
        if c == 0 || self.corpus_token_total == 0 {
            return None;
        }
        Some((c as f64 / self.corpus_token_total as f64).log10())
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "#corpus_token_total\t{}", self.corpus_token_total)?;
        for (w, c) in &self.counts {
            writeln!(out, "{w}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R, origin: &str) -> Result<Self> {
        let mut counts = BTreeMap::new();
        let mut total = None;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let err = |message: String| CorpusError::Parse { path: origin.to_string(), line: i + 1, message };
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let key = fields.next().unwrap_or_default();
            let value = fields.next().ok_or_else(|| err("expected word<TAB>count".into()))?;
            let value: u64 = value.trim().parse().map_err(|e| err(format!("bad count: {e}")))?;
            if key == "#corpus_token_total" {
                total = Some(value);
            } else if !key.starts_with('#') {
                counts.insert(normalize_word(key), value);
            }
        }
        let corpus_token_total = total.unwrap_or_else(|| counts.values().sum());
        Ok(Self { counts, corpus_token_total })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_tsv(f, &path.display().to_string())
    }

    /// Stable content hash of the word list.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for w in self.counts.keys() {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Keeps lexicon words whose corpus rate is at least `min_rate`.
///
/// `corpus` is the token stream; tokens are normalized with
/// [`normalize_word`] before counting.
pub fn build_vocabulary<I, S, L>(corpus: I, lexicon: &[L], min_rate: f64) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
    L: AsRef<str>,
{
    if !(min_rate > 0.0) {
        return Err(CorpusError::InvalidRate(min_rate));
    }
    let wanted: HashSet<String> = lexicon.iter().map(|w| normalize_word(w.as_ref())).collect();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut total: u64 = 0;
    for tok in corpus {
        total += 1;
        let tok = normalize_word(tok.as_ref());
        if wanted.contains(&tok) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if total == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let threshold = min_rate * total as f64;
    // inclusive boundary, tolerant to the rounding of min_rate * total
    let slack = 1e-9 * threshold.max(1.0);
    counts.retain(|_, c| *c > 0 && *c as f64 + slack >= threshold);
    if counts.is_empty() {
        return Err(CorpusError::EmptyVocabulary { min_rate });
    }
    Ok(Vocabulary { counts, corpus_token_total: total })
}

/// Words exempt from the no-repeat rule (determiners, prepositions).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepeatableWords(HashSet<String>);

impl RepeatableWords {
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(normalize_word)
                .collect(),
        )
    }

    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        Self(words.into_iter().map(|w| normalize_word(w.as_ref())).collect())
    }

    pub fn empty() -> Self {
        Self(HashSet::new())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&normalize_word(word))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for RepeatableWords {
    fn default() -> Self {
        Self::parse(DEFAULT_REPEATABLE)
    }
}

/// True if some non-whitelisted word occurs more than once.
pub fn has_forbidden_repeat<S: AsRef<str>>(words: &[S], repeatable: &RepeatableWords) -> bool {
    let mut seen = HashSet::new();
    words.iter().any(|w| {
        let w = normalize_word(w.as_ref());
        !repeatable.contains(&w) && !seen.insert(w)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Natural,
    Synthetic,
    Scrambled,
}

/// An eight-word sentence. Surface forms are kept as given; comparisons
/// go through [`normalize_word`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub words: Vec<String>,
    pub origin: Origin,
}

impl Sentence {
    /// Validated constructor: length, vocabulary membership and the
    /// origin-specific repetition rule.
    pub fn new(
        id: impl Into<String>,
        words: Vec<String>,
        origin: Origin,
        vocab: &Vocabulary,
        repeatable: &RepeatableWords,
    ) -> Result<Self> {
        let s = Self { id: id.into(), words, origin };
        s.validate(vocab, repeatable)?;
        Ok(s)
    }

    /// Constructor without vocabulary checks, for toy models and tests.
    pub fn unchecked(id: impl Into<String>, words: Vec<String>, origin: Origin) -> Self {
        Self { id: id.into(), words, origin }
    }

    pub fn from_text(id: impl Into<String>, text: &str, origin: Origin) -> Self {
        Self::unchecked(id, text.split_whitespace().map(str::to_string).collect(), origin)
    }

    pub fn validate(&self, vocab: &Vocabulary, repeatable: &RepeatableWords) -> Result<()> {
        let bad = |reason: String| Err(CorpusError::InvalidSentence { id: self.id.clone(), reason });
        if self.words.len() != SENTENCE_LEN {
            return bad(format!("{} words", self.words.len()));
        }
        if let Some(w) = self.words.iter().find(|w| !vocab.contains(w)) {
            return bad(format!("'{w}' is not in the vocabulary"));
        }
        match self.origin {
            Origin::Natural if has_forbidden_repeat(&self.words, &RepeatableWords::empty()) => {
                bad("natural sentences need eight distinct words".into())
            }
            Origin::Synthetic if has_forbidden_repeat(&self.words, repeatable) => {
                bad("repeated non-whitelisted word".into())
            }
            _ => Ok(()),
        }
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    /// Lowercased text, the identity used for uniqueness checks.
    pub fn key(&self) -> String {
        normalize_word(&self.text())
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Filtered natural sentences with provenance labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SentencePool {
    pub sentences: Vec<Sentence>,
    pub source_tags: BTreeMap<String, String>,
}

impl SentencePool {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sentence> {
        self.sentences.iter().find(|s| s.id == id)
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for s in &self.sentences {
            writeln!(out, "{}\t{}", s.id, s.text())?;
        }
        Ok(())
    }

    /// Reads `id<TAB>sentence` lines as natural sentences.
    pub fn read_tsv<R: BufRead>(input: R, origin: &str) -> Result<Self> {
        let mut pool = SentencePool::default();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, text) = line.split_once('\t').ok_or_else(|| CorpusError::Parse {
                path: origin.to_string(),
                line: i + 1,
                message: "expected id<TAB>sentence".into(),
            })?;
            pool.source_tags.insert(id.to_string(), format!("{origin}:{}", i + 1));
            pool.sentences.push(Sentence::from_text(id, text, Origin::Natural));
        }
        Ok(pool)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_tsv(f, &path.display().to_string())
    }
}

/// Inappropriate words and phrases; phrases match contiguous words.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Blocklist {
    entries: Vec<Vec<String>>,
}

impl Blocklist {
    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.split_whitespace().map(normalize_word).collect())
            .collect();
        Self { entries }
    }

    pub fn is_blocked(&self, words: &[String]) -> bool {
        let lower: Vec<String> = words.iter().map(|w| normalize_word(w)).collect();
        self.entries
            .iter()
            .any(|phrase| lower.windows(phrase.len()).any(|win| win == phrase.as_slice()))
    }
}

/// Splits a raw line into words: whitespace separated, one terminal
/// `.`, `!` or `?` stripped, and no other punctuation anywhere.
pub fn sentence_words(line: &str) -> Option<Vec<String>> {
    let mut words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
    let last = words.last_mut()?;
    if last.ends_with(['.', '!', '?']) {
        last.pop();
        if last.is_empty() {
            words.pop();
        }
    }
    let clean = words.iter().all(|w| !w.is_empty() && w.chars().all(char::is_alphanumeric));
    clean.then_some(words)
}

/// Keeps lines that are exactly eight distinct in-vocabulary words and
/// not blocklisted. Duplicate sentences (case-insensitive) are kept once.
pub fn filter_sentences<I, S>(raw_lines: I, vocab: &Vocabulary, blocklist: &Blocklist) -> SentencePool
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut pool = SentencePool::default();
    let mut seen = HashSet::new();
    for (lineno, line) in raw_lines.into_iter().enumerate() {
        let Some(words) = sentence_words(line.as_ref()) else { continue };
        if words.len() != SENTENCE_LEN
            || has_forbidden_repeat(&words, &RepeatableWords::empty())
            || !words.iter().all(|w| vocab.contains(w))
            || blocklist.is_blocked(&words)
        {
            continue;
        }
        let s = Sentence::unchecked(format!("nat-{:06}", pool.len()), words, Origin::Natural);
        if !seen.insert(s.key()) {
            continue;
        }
        pool.source_tags.insert(s.id.clone(), format!("line:{}", lineno + 1));
        pool.sentences.push(s);
    }
    pool
}

/// Disjoint random pairs drawn without replacement.
pub fn sample_natural_pairs(pool: &SentencePool, n_pairs: usize, seed: u64) -> Result<Vec<(Sentence, Sentence)>> {
    let required = 2 * n_pairs;
    if pool.len() < required {
        return Err(CorpusError::InsufficientPool { required, available: pool.len() });
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut seed::rng(seed));
    Ok(idx[..required]
        .chunks_exact(2)
        .map(|c| (pool.sentences[c[0]].clone(), pool.sentences[c[1]].clone()))
        .collect())
}

/// Seeded shuffle of the words that differs from the original order.
pub fn scramble_sentence(s: &Sentence, seed: u64) -> Result<Sentence> {
    let first = s.words.first().map(|w| normalize_word(w));
    if s.words.iter().all(|w| Some(normalize_word(w)) == first) {
        return Err(CorpusError::Unscramblable(s.id.clone()));
    }
    let mut rng = seed::rng(seed);
    let mut words = s.words.clone();
    loop {
        words.shuffle(&mut rng);
        let same = words.iter().zip(&s.words).all(|(a, b)| normalize_word(a) == normalize_word(b));
        if !same {
            break;
        }
    }
    Ok(Sentence { id: format!("{}~scrambled", s.id), words, origin: Origin::Scrambled })
}
