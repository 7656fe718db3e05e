//! The small synthetic corpus shipped with the crate. It backs the demo
//! pipeline configuration and the test suites.

use crate::corpus::{self, Blocklist, RepeatableWords, SentencePool, Vocabulary};
use crate::ngram::{self, NgramModel};

pub const MINI_CORPUS: &str = include_str!("../data/mini_corpus.txt");
/// Held-out lines from the same generator, used as the natural pool.
pub const MINI_POOL: &str = include_str!("../data/mini_pool.txt");
pub const LEXICON: &str = include_str!("../data/lexicon.txt");
pub const REPEATABLE_WORDS: &str = include_str!("../data/repeatable_words.txt");
pub const BLOCKLIST: &str = include_str!("../data/blocklist.txt");

/// Rate threshold that keeps the bundled lexicon words the generator uses.
pub const MIN_RATE: f64 = 1e-5;

pub fn lexicon() -> Vec<&'static str> {
    LEXICON.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

pub fn vocabulary() -> Vocabulary {
    let tokens = MINI_CORPUS.lines().flat_map(corpus::corpus_tokens);
    corpus::build_vocabulary(tokens, &lexicon(), MIN_RATE).expect("bundled corpus yields a vocabulary")
}

pub fn repeatable_words() -> RepeatableWords {
    RepeatableWords::parse(REPEATABLE_WORDS)
}

pub fn pool(vocab: &Vocabulary) -> SentencePool {
    corpus::filter_sentences(MINI_POOL.lines(), vocab, &Blocklist::parse(BLOCKLIST))
}

pub fn ngram_model(order: usize, vocab: &Vocabulary) -> NgramModel {
    ngram::train_ngram(MINI_CORPUS.lines(), order, vocab, ngram::DEFAULT_DISCOUNT).expect("bundled corpus trains")
}
