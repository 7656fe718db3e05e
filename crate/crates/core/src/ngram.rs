//! Interpolated Kneser-Ney n-gram models (orders 2 to 5) over a closed
//! vocabulary.
//!
//! For a context `c` and word `w`:
//!
//! ```text
//! p(w | c) = max(count(c, w) - D, 0) / total(c) + lambda(c) * p_cont(w)
//! lambda(c) = D * |{w : count(c, w) > 0}| / total(c)
//! p_cont(w) = N1+(. w) / sum_v N1+(. v)
//! ```
//!
//! The full context interpolates directly with `p_cont`; there are no
//! intermediate orders. Unseen contexts fall back to `p_cont`. Contexts are
//! padded with a begin-of-sentence symbol that is not a vocabulary word;
//! there is no end-of-sentence term because every scored string has the
//! same length.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::{corpus_tokens, normalize_word, Vocabulary};

/// Continuation pseudo-count for vocabulary words never seen after any
/// context, so every in-vocabulary sentence gets a finite log probability.
pub const UNSEEN_CONTINUATION: f64 = 0.5;

pub const DEFAULT_DISCOUNT: f64 = 0.75;
pub const MAX_ORDER: usize = 5;

const BOS: u32 = u32::MAX;
const FORMAT_HEADER: &str = "#contstim-ngram\tv1";

#[derive(Debug, Error)]
pub enum NgramError {
    #[error("order must lie between 2 and {MAX_ORDER}, got {0}")]
    BadOrder(usize),
    #[error("discount must lie in (0, 1), got {0}")]
    BadDiscount(f64),
    #[error("no usable training sentence in the corpus")]
    EmptyCorpus,
    #[error("'{0}' is not in the model vocabulary")]
    OutOfVocabulary(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = NgramError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextStats {
    total: u64,
    followers: HashMap<u32, u64>,
}

/// Count accumulator; [`NgramBuilder::build`] freezes it into a model.
#[derive(Debug, Clone)]
pub struct NgramBuilder {
    order: usize,
    discount: f64,
    words: Vec<String>,
    index: HashMap<String, u32>,
    contexts: HashMap<Vec<u32>, ContextStats>,
    bigram_types: HashSet<(u32, u32)>,
    sentences: usize,
}

impl NgramBuilder {
    pub fn new(order: usize, vocab: &Vocabulary, discount: f64) -> Result<Self> {
        if !(2..=MAX_ORDER).contains(&order) {
            return Err(NgramError::BadOrder(order));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(NgramError::BadDiscount(discount));
        }
        let words: Vec<String> = vocab.words().map(str::to_string).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Ok(Self {
            order,
            discount,
            words,
            index,
            contexts: HashMap::new(),
            bigram_types: HashSet::new(),
            sentences: 0,
        })
    }

    /// Adds one sentence; returns false (and counts nothing) if it
    /// contains an out-of-vocabulary token.
    pub fn add_sentence<S: AsRef<str>>(&mut self, tokens: &[S]) -> bool {
        let Some(ids) = tokens
            .iter()
            .map(|t| self.index.get(&normalize_word(t.as_ref())).copied())
            .collect::<Option<Vec<u32>>>()
        else {
            return false;
        };
        if ids.is_empty() {
            return false;
        }
        let mut padded = vec![BOS; self.order - 1];
        padded.extend(ids);
        for win in padded.windows(self.order) {
            let (ctx, w) = win.split_at(self.order - 1);
            self.observe(ctx.to_vec(), w[0]);
        }
        self.sentences += 1;
        true
    }

    /// Records one occurrence of `word` after `context` (BOS given as `None`).
    pub fn add_ngram(&mut self, context: &[Option<&str>], word: &str) -> Result<()> {
        if context.len() != self.order - 1 {
            return Err(NgramError::Format(format!("context must have {} words", self.order - 1)));
        }
        let ctx = context
            .iter()
            .map(|c| match c {
                None => Ok(BOS),
                Some(w) => self.id(w),
            })
            .collect::<Result<Vec<_>>>()?;
        let w = self.id(word)?;
        self.observe(ctx, w);
        Ok(())
    }

    fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(&normalize_word(word))
            .copied()
            .ok_or_else(|| NgramError::OutOfVocabulary(word.to_string()))
    }

    fn observe(&mut self, ctx: Vec<u32>, w: u32) {
        let prev = *ctx.last().expect("order >= 2");
        self.bigram_types.insert((prev, w));
        let stats = self.contexts.entry(ctx).or_default();
        stats.total += 1;
        *stats.followers.entry(w).or_default() += 1;
    }

    pub fn build(self) -> Result<NgramModel> {
        if self.contexts.is_empty() {
            return Err(NgramError::EmptyCorpus);
        }
        let mut continuation = vec![0u64; self.words.len()];
        for &(_, w) in &self.bigram_types {
            continuation[w as usize] += 1;
        }
        Ok(NgramModel::assemble(self.order, self.discount, self.words, self.index, self.contexts, continuation))
    }
}

/// Trained, immutable n-gram model.
#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    discount: f64,
    words: Vec<String>,
    index: HashMap<String, u32>,
    contexts: HashMap<Vec<u32>, ContextStats>,
    continuation: Vec<u64>,
    p_cont: Vec<f64>,
}

impl NgramModel {
    fn assemble(
        order: usize,
        discount: f64,
        words: Vec<String>,
        index: HashMap<String, u32>,
        contexts: HashMap<Vec<u32>, ContextStats>,
        continuation: Vec<u64>,
    ) -> Self {
        let weights: Vec<f64> = continuation
            .iter()
            .map(|&c| if c == 0 { UNSEEN_CONTINUATION } else { c as f64 })
            .collect();
        let z: f64 = weights.iter().sum();
        let p_cont = weights.into_iter().map(|w| w / z).collect();
        Self { order, discount, words, index, contexts, continuation, p_cont }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn vocabulary_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(&normalize_word(word))
            .copied()
            .ok_or_else(|| NgramError::OutOfVocabulary(word.to_string()))
    }

    fn context_ids(&self, context: &[Option<&str>]) -> Result<Vec<u32>> {
        context
            .iter()
            .map(|c| match c {
                None => Ok(BOS),
                Some(w) => self.id(w),
            })
            .collect()
    }

    /// Raw count of `word` after `context`; BOS is `None`.
    pub fn count(&self, context: &[Option<&str>], word: &str) -> Result<u64> {
        let ctx = self.context_ids(context)?;
        let w = self.id(word)?;
        Ok(self.contexts.get(&ctx).and_then(|s| s.followers.get(&w)).copied().unwrap_or(0))
    }

    pub fn context_total(&self, context: &[Option<&str>]) -> Result<u64> {
        let ctx = self.context_ids(context)?;
        Ok(self.contexts.get(&ctx).map_or(0, |s| s.total))
    }

    /// Number of distinct left neighbours (BOS included) of `word`.
    pub fn continuation_count(&self, word: &str) -> Result<u64> {
        Ok(self.continuation[self.id(word)? as usize])
    }

    /// Natural log of the continuation (lowest-order) probability.
    pub fn continuation_logprob(&self, word: &str) -> Result<f64> {
        Ok(self.p_cont[self.id(word)? as usize].ln())
    }

    fn prob_ids(&self, ctx: &[u32], w: u32) -> f64 {
        let base = self.p_cont[w as usize];
        match self.contexts.get(ctx) {
            None => base,
            Some(stats) => {
                let total = stats.total as f64;
                let c = stats.followers.get(&w).copied().unwrap_or(0) as f64;
                let lambda = self.discount * stats.followers.len() as f64 / total;
                (c - self.discount).max(0.0) / total + lambda * base
            }
        }
    }

    /// Natural-log conditional probability; `context` has `order - 1`
    /// entries with `None` standing for the begin-of-sentence pad.
    pub fn conditional_logprob(&self, context: &[Option<&str>], word: &str) -> Result<f64> {
        if context.len() != self.order - 1 {
            return Err(NgramError::Format(format!("context must have {} words", self.order - 1)));
        }
        let ctx = self.context_ids(context)?;
        Ok(self.prob_ids(&ctx, self.id(word)?).ln())
    }

    /// Conditional log probability of `word` following `prefix` (any
    /// length; only the last `order - 1` words matter).
    pub fn next_logprob<S: AsRef<str>>(&self, prefix: &[S], word: &str) -> Result<f64> {
        let ctx = self.padded_context(prefix)?;
        Ok(self.prob_ids(&ctx, self.id(word)?).ln())
    }

    fn padded_context<S: AsRef<str>>(&self, prefix: &[S]) -> Result<Vec<u32>> {
        let k = self.order - 1;
        let mut ctx = vec![BOS; k];
        let tail = &prefix[prefix.len().saturating_sub(k)..];
        let offset = k - tail.len();
        for (i, w) in tail.iter().enumerate() {
            ctx[offset + i] = self.id(w.as_ref())?;
        }
        Ok(ctx)
    }

    /// Sum of left-to-right conditional log probabilities.
    pub fn sentence_logprob<S: AsRef<str>>(&self, words: &[S]) -> Result<f64> {
        let ids = words.iter().map(|w| self.id(w.as_ref())).collect::<Result<Vec<_>>>()?;
        let k = self.order - 1;
        let mut padded = vec![BOS; k];
        padded.extend(ids);
        let mut total = 0.0;
        for win in padded.windows(self.order) {
            total += self.prob_ids(&win[..k], win[k]).ln();
        }
        Ok(total)
    }

    pub fn save<W: Write>(&self, mut out: W, vocab_hash: &str) -> io::Result<()> {
        writeln!(out, "{FORMAT_HEADER}")?;
        writeln!(out, "#order\t{}", self.order)?;
        writeln!(out, "#discount\t{}", self.discount)?;
        writeln!(out, "#vocab_hash\t{vocab_hash}")?;
        for w in &self.words {
            writeln!(out, "V\t{w}")?;
        }
        let name = |id: u32| if id == BOS { "<s>" } else { self.words[id as usize].as_str() };
        let mut ctxs: Vec<_> = self.contexts.iter().collect();
        ctxs.sort_by(|a, b| a.0.cmp(b.0));
        for (ctx, stats) in ctxs {
            let ctx_s: Vec<&str> = ctx.iter().map(|&i| name(i)).collect();
            let mut f: Vec<_> = stats.followers.iter().collect();
            f.sort();
            for (&w, &c) in f {
                writeln!(out, "N\t{}\t{}\t{c}", ctx_s.join(" "), name(w))?;
            }
        }
        for (w, &c) in self.words.iter().zip(&self.continuation) {
            writeln!(out, "C\t{w}\t{c}")?;
        }
        Ok(())
    }

    /// Loads a model written by [`NgramModel::save`]; returns it with the
    /// stored vocabulary hash.
    pub fn load<R: BufRead>(input: R) -> Result<(Self, String)> {
        let mut lines = input.lines();
        let bad = |m: &str| NgramError::Format(m.to_string());
        if lines.next().transpose()?.as_deref() != Some(FORMAT_HEADER) {
            return Err(bad("missing or unsupported header"));
        }
        let mut order = None;
        let mut discount = None;
        let mut vocab_hash = String::new();
        let mut words = Vec::new();
        let mut ngrams = Vec::new();
        let mut cont = HashMap::new();
        for line in lines {
            let line = line?;
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["#order", v] => order = Some(v.parse::<usize>().map_err(|_| bad("order"))?),
                ["#discount", v] => discount = Some(v.parse::<f64>().map_err(|_| bad("discount"))?),
                ["#vocab_hash", v] => vocab_hash = v.to_string(),
                ["V", w] => words.push(w.to_string()),
                ["N", ctx, w, c] => ngrams.push((ctx.to_string(), w.to_string(), c.parse::<u64>().map_err(|_| bad("count"))?)),
                ["C", w, c] => {
                    cont.insert(w.to_string(), c.parse::<u64>().map_err(|_| bad("continuation"))?);
                }
                [""] => {}
                _ => return Err(bad(&format!("unexpected line '{line}'"))),
            }
        }
        let order = order.ok_or_else(|| bad("order missing"))?;
        let discount = discount.ok_or_else(|| bad("discount missing"))?;
        let index: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let lookup = |w: &str| -> Result<u32> {
            if w == "<s>" {
                Ok(BOS)
            } else {
                index.get(w).copied().ok_or_else(|| NgramError::OutOfVocabulary(w.to_string()))
            }
        };
        let mut contexts: HashMap<Vec<u32>, ContextStats> = HashMap::new();
        for (ctx, w, c) in ngrams {
            let ctx = ctx.split(' ').map(lookup).collect::<Result<Vec<_>>>()?;
            let stats = contexts.entry(ctx).or_default();
            stats.total += c;
            stats.followers.insert(lookup(&w)?, c);
        }
        let continuation = words.iter().map(|w| cont.get(w).copied().unwrap_or(0)).collect();
        Ok((Self::assemble(order, discount, words, index, contexts, continuation), vocab_hash))
    }

    pub fn load_path(path: &Path) -> Result<(Self, String)> {
        Self::load(io::BufReader::new(std::fs::File::open(path)?))
    }

    #[cfg(test)]
    fn context_tables_consistent(&self) -> bool {
        self.contexts.values().all(|s| s.followers.values().sum::<u64>() == s.total)
    }
}

/// Trains on corpus lines (one sentence per line). Lines with a token
/// outside `vocab` are skipped.
pub fn train_ngram<I, S>(corpus: I, order: usize, vocab: &Vocabulary, discount: f64) -> Result<NgramModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut builder = NgramBuilder::new(order, vocab, discount)?;
    let mut kept = 0usize;
    let mut skipped = 0usize;
    for line in corpus {
        let tokens: Vec<String> = corpus_tokens(line.as_ref()).collect();
        if tokens.is_empty() {
            continue;
        }
        if builder.add_sentence(&tokens) {
            kept += 1;
        } else {
            skipped += 1;
        }
    }
    log::debug!("trained order-{order} model on {kept} sentences ({skipped} skipped)");
    builder.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vocab(words: &str) -> Vocabulary {
        Vocabulary::from_counts(words.split_whitespace().map(|w| (w, 1)), 1)
    }

    #[test]
    fn bigram_counts_by_hand() {
        let m = train_ngram(["a b a b"], 2, &vocab("a b"), 0.75).unwrap();
        assert_eq!(m.count(&[Some("a")], "b").unwrap(), 2);
        assert_eq!(m.count(&[Some("b")], "a").unwrap(), 1);
        assert_eq!(m.count(&[None], "a").unwrap(), 1);
        assert_eq!(m.count(&[None], "b").unwrap(), 0);
        assert!(m.context_tables_consistent());
    }

    #[test]
    fn trigram_counts_by_hand() {
        let m = train_ngram(["a b a b"], 3, &vocab("a b"), 0.75).unwrap();
        assert_eq!(m.count(&[None, Some("a")], "b").unwrap(), 1);
        assert_eq!(m.count(&[Some("a"), Some("b")], "a").unwrap(), 1);
        assert_eq!(m.count(&[Some("b"), Some("a")], "b").unwrap(), 1);
        assert_eq!(m.count(&[None, None], "a").unwrap(), 1);
    }

    #[test]
    fn kneser_ney_by_hand() {
        // corpus "a b a c": bigrams <s>a, ab, ba, ac
        // continuation: a <- {<s>, b} = 2, b <- {a} = 1, c <- {a} = 1; sum 4
        // context a: total 2, followers {b, c}; lambda = 0.75 * 2 / 2 = 0.75
        // p(b|a) = (1 - 0.75) / 2 + 0.75 * 1/4 = 0.125 + 0.1875 = 0.3125
        // p(a|a) = 0 + 0.75 * 2/4 = 0.375
        // p(c|a) = 0.3125
        let m = train_ngram(["a b a c"], 2, &vocab("a b c"), 0.75).unwrap();
        assert_abs_diff_eq!(m.conditional_logprob(&[Some("a")], "b").unwrap().exp(), 0.3125, epsilon = 1e-15);
        assert_abs_diff_eq!(m.conditional_logprob(&[Some("a")], "a").unwrap().exp(), 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(m.conditional_logprob(&[Some("a")], "c").unwrap().exp(), 0.3125, epsilon = 1e-15);
        // unseen context c backs off to continuation distribution
        assert_abs_diff_eq!(m.conditional_logprob(&[Some("c")], "a").unwrap().exp(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.conditional_logprob(&[Some("c")], "b").unwrap().exp(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn out_of_vocabulary_word_is_an_error() {
        let m = train_ngram(["a b a c"], 2, &vocab("a b c"), 0.75).unwrap();
        assert!(matches!(m.conditional_logprob(&[Some("a")], "zzz"), Err(NgramError::OutOfVocabulary(_))));
    }

    #[test]
    fn rejects_bad_parameters() {
        let v = vocab("a b");
        assert!(matches!(train_ngram(["a b"], 6, &v, 0.75), Err(NgramError::BadOrder(6))));
        assert!(matches!(train_ngram(["a b"], 1, &v, 0.75), Err(NgramError::BadOrder(1))));
        assert!(matches!(train_ngram(["a b"], 2, &v, 1.0), Err(NgramError::BadDiscount(_))));
        let empty: [&str; 0] = [];
        assert!(matches!(train_ngram(empty, 2, &v, 0.75), Err(NgramError::EmptyCorpus)));
        assert!(matches!(train_ngram(["x y"], 2, &v, 0.75), Err(NgramError::EmptyCorpus)));
    }

    #[test]
    fn unseen_vocabulary_word_still_finite() {
        let m = train_ngram(["a b a b"], 2, &vocab("a b z"), 0.75).unwrap();
        assert_eq!(m.continuation_count("z").unwrap(), 0);
        assert!(m.sentence_logprob(&["z", "z", "a"]).unwrap().is_finite());
    }

    #[test]
    fn sentence_logprob_is_chain_sum() {
        let m = train_ngram(["a b a c", "c b a"], 3, &vocab("a b c"), 0.75).unwrap();
        let s = ["b", "a", "c", "c"];
        let manual = m.conditional_logprob(&[None, None], "b").unwrap()
            + m.conditional_logprob(&[None, Some("b")], "a").unwrap()
            + m.conditional_logprob(&[Some("b"), Some("a")], "c").unwrap()
            + m.conditional_logprob(&[Some("a"), Some("c")], "c").unwrap();
        assert_abs_diff_eq!(m.sentence_logprob(&s).unwrap(), manual, epsilon = 1e-12);
    }

    #[test]
    fn orders_agree_on_degenerate_corpus() {
        let v = vocab("a b c d e f g h");
        let line = ["a b c d e f g h"];
        let m2 = train_ngram(line, 2, &v, 0.75).unwrap();
        let m3 = train_ngram(line, 3, &v, 0.75).unwrap();
        let s = ["a", "b", "c", "d", "e", "f", "g", "h"];
        assert_eq!(m2.sentence_logprob(&s).unwrap(), m3.sentence_logprob(&s).unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let m = train_ngram(["a b a c", "c b a"], 3, &vocab("a b c"), 0.6).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf, "abc123").unwrap();
        let (loaded, hash) = NgramModel::load(&buf[..]).unwrap();
        assert_eq!(hash, "abc123");
        assert_eq!(loaded.order(), 3);
        for s in [["a", "b", "c"], ["c", "c", "c"], ["b", "a", "b"]] {
            assert_eq!(loaded.sentence_logprob(&s).unwrap(), m.sentence_logprob(&s).unwrap());
        }
    }
}
