//! Sentence log probabilities from masked (bidirectional) scorers.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LanguageScorer, MaskClass, MaskedQuery, Result, ScoreError, ScorerKind, TokenTemplate};
use crate::seed;

/// Words with at most this many tokens have all token orders enumerated.
pub const MAX_EXHAUSTIVE_TOKEN_ORDERS: usize = 4;
/// Number of token orders sampled for longer words.
pub const SAMPLED_TOKEN_ORDERS: usize = 24;

/// A word-level template slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WordSlot {
    Word(String),
    /// A hidden word occupying the given number of mask tokens.
    Mask(usize),
}

/// A visiting order over word positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionPermutation {
    order: Vec<usize>,
}

impl PositionPermutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &p in &order {
            if p >= order.len() || std::mem::replace(&mut seen[p], true) {
                return Err(ScoreError::Input(format!("{order:?} is not a permutation")));
            }
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `n` permutations of `len` positions drawn from `seed`. The same
    /// seed always yields the same set, whatever the sentence.
    pub fn set(len: usize, n: usize, seed: u64) -> Vec<Self> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|_| {
                let mut order: Vec<usize> = (0..len).collect();
                order.shuffle(&mut rng);
                Self { order }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidirectionalScore {
    pub mean_logprob: f64,
    pub per_permutation_logprobs: Vec<f64>,
    pub coefficient_of_variation: f64,
    pub permutation_seed: u64,
    /// Words whose token orders were sampled rather than enumerated.
    pub sampled_token_orders: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedWordScore {
    pub logprob: f64,
    pub token_orders: usize,
    pub sampled: bool,
}

/// Tokenizer results memoized for the duration of one estimator call.
struct Tokens<'a> {
    m: &'a dyn LanguageScorer,
    cache: HashMap<String, Vec<String>>,
}

impl<'a> Tokens<'a> {
    fn new(m: &'a dyn LanguageScorer) -> Self {
        Self { m, cache: HashMap::new() }
    }

    fn get(&mut self, word: &str) -> Result<&[String]> {
        if !self.cache.contains_key(word) {
            let toks = self.m.tokenize(word)?;
            if toks.is_empty() {
                return Err(ScoreError::Input(format!("'{word}' tokenizes to nothing")));
            }
            self.cache.insert(word.to_string(), toks);
        }
        Ok(&self.cache[word])
    }
}

/// Queries for one masked word; the result is the mean over token orders
/// of the per-order chain sums.
struct WordPlan {
    queries: Vec<MaskedQuery>,
    tokens: usize,
    orders: usize,
    sampled: bool,
}

impl WordPlan {
    fn combine(&self, logprobs: &[f64]) -> f64 {
        debug_assert_eq!(logprobs.len(), self.tokens * self.orders);
        let total: f64 = logprobs.chunks(self.tokens).map(|c| c.iter().sum::<f64>()).sum();
        total / self.orders as f64
    }
}

fn token_orders(k: usize, word: &str) -> (Vec<Vec<usize>>, bool) {
    if k <= MAX_EXHAUSTIVE_TOKEN_ORDERS {
        let mut all = Vec::new();
        permutations(&mut (0..k).collect(), 0, &mut all);
        return (all, false);
    }
    let mut rng = seed::rng(seed::derive_str(0x746f_6b65_6e73, word));
    let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(SAMPLED_TOKEN_ORDERS);
    while chosen.len() < SAMPLED_TOKEN_ORDERS {
        let mut o: Vec<usize> = (0..k).collect();
        o.shuffle(&mut rng);
        if !chosen.contains(&o) {
            chosen.push(o);
        }
    }
    (chosen, true)
}

fn permutations(items: &mut Vec<usize>, start: usize, out: &mut Vec<Vec<usize>>) {
    if start == items.len() {
        out.push(items.clone());
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permutations(items, start + 1, out);
        items.swap(start, i);
    }
}

fn plan_word(tokens: &mut Tokens<'_>, context: &[WordSlot], position: usize, word: &str) -> Result<WordPlan> {
    match context.get(position) {
        Some(WordSlot::Mask(_)) => {}
        Some(WordSlot::Word(_)) => return Err(ScoreError::Input(format!("slot {position} is not masked"))),
        None => return Err(ScoreError::Input(format!("slot {position} is out of range"))),
    }
    let mut template: TokenTemplate = Vec::new();
    let mut start = 0;
    for (i, slot) in context.iter().enumerate() {
        match slot {
            WordSlot::Word(w) => template.extend(tokens.get(w)?.iter().cloned().map(Some)),
            WordSlot::Mask(n) if i != position => template.extend(std::iter::repeat_n(None, *n)),
            WordSlot::Mask(_) => {
                start = template.len();
                let k = tokens.get(word)?.len();
                template.extend(std::iter::repeat_n(None, k));
            }
        }
    }
    let pieces = tokens.get(word)?.to_vec();
    let k = pieces.len();
    let (orders, sampled) = token_orders(k, word);
    let mut queries = Vec::with_capacity(orders.len() * k);
    for order in &orders {
        let mut t = template.clone();
        for &j in order {
            queries.push(MaskedQuery {
                template: t.clone(),
                position: start + j,
                token: pieces[j].clone(),
                class: MaskClass::for_token(j, k),
            });
            t[start + j] = Some(pieces[j].clone());
        }
    }
    Ok(WordPlan { queries, tokens: k, orders: orders.len(), sampled })
}

fn require_bidirectional(m: &dyn LanguageScorer) -> Result<()> {
    if m.info().kind == ScorerKind::Bidirectional {
        Ok(())
    } else {
        Err(m.unsupported("masked word scoring"))
    }
}

/// Log probability of `word` filling the masked slot `position`.
///
/// Each token is scored under the distribution of its word-boundary class.
/// Multi-token words average the chain sums over token reveal orders.
pub fn masked_word_logprob(m: &dyn LanguageScorer, context: &[WordSlot], position: usize, word: &str) -> Result<MaskedWordScore> {
    require_bidirectional(m)?;
    let mut tokens = Tokens::new(m);
    let plan = plan_word(&mut tokens, context, position, word)?;
    let lps = m.masked_logprobs(&plan.queries)?;
    Ok(MaskedWordScore { logprob: plan.combine(&lps), token_orders: plan.orders, sampled: plan.sampled })
}

/// Masked log probability of every candidate at `position` with all other
/// words of `words` revealed, in one batched request.
pub fn completion_logprobs(m: &dyn LanguageScorer, words: &[String], position: usize, candidates: &[String]) -> Result<Vec<f64>> {
    require_bidirectional(m)?;
    let mut tokens = Tokens::new(m);
    let mut context: Vec<WordSlot> = words.iter().map(|w| WordSlot::Word(w.clone())).collect();
    context[position] = WordSlot::Mask(1);
    let plans = candidates
        .iter()
        .map(|c| plan_word(&mut tokens, &context, position, c))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<MaskedQuery> = plans.iter().flat_map(|p| p.queries.iter().cloned()).collect();
    let lps = m.masked_logprobs(&batch)?;
    let mut offset = 0;
    Ok(plans
        .iter()
        .map(|p| {
            let n = p.queries.len();
            let v = p.combine(&lps[offset..offset + n]);
            offset += n;
            v
        })
        .collect())
}

/// Permutation-averaged chain estimate of the sentence log probability.
///
/// Every permutation starts from the fully masked sentence and reveals the
/// true words in permutation order. The queries of one permutation are
/// sent as a single batch.
pub fn score_bidirectional(m: &dyn LanguageScorer, words: &[String], n_permutations: usize, seed: u64) -> Result<BidirectionalScore> {
    require_bidirectional(m)?;
    if n_permutations == 0 {
        return Err(ScoreError::Input("at least one permutation is required".into()));
    }
    let mut tokens = Tokens::new(m);
    let mut sampled = Vec::new();
    for w in words {
        if tokens.get(w)?.len() > MAX_EXHAUSTIVE_TOKEN_ORDERS && !sampled.contains(w) {
            sampled.push(w.clone());
        }
    }
    let perms = PositionPermutation::set(words.len(), n_permutations, seed);
    let mut sums = Vec::with_capacity(n_permutations);
    for (done, perm) in perms.iter().enumerate() {
        let mut context: Vec<WordSlot> = Vec::with_capacity(words.len());
        for w in words {
            context.push(WordSlot::Mask(tokens.get(w)?.len()));
        }
        let mut plans = Vec::with_capacity(words.len());
        for &p in perm.order() {
            plans.push(plan_word(&mut tokens, &context, p, &words[p])?);
            context[p] = WordSlot::Word(words[p].clone());
        }
        let batch: Vec<MaskedQuery> = plans.iter().flat_map(|p| p.queries.iter().cloned()).collect();
        let lps = m.masked_logprobs(&batch).map_err(|e| ScoreError::Partial {
            completed: done,
            total: n_permutations,
            source: Box::new(e),
        })?;
        let mut offset = 0;
        let mut sum = 0.0;
        for plan in &plans {
            let n = plan.queries.len();
            sum += plan.combine(&lps[offset..offset + n]);
            offset += n;
        }
        sums.push(sum);
    }
    let n = sums.len() as f64;
    let mean = sums.iter().sum::<f64>() / n;
    let var = sums.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let cv = if mean == 0.0 { 0.0 } else { var.sqrt() / mean.abs() };
    if !sampled.is_empty() {
        log::warn!("token orders sampled for long words: {}", sampled.join(", "));
    }
    Ok(BidirectionalScore {
        mean_logprob: mean,
        per_permutation_logprobs: sums,
        coefficient_of_variation: cv,
        permutation_seed: seed,
        sampled_token_orders: sampled,
    })
}

/// Pseudo-log-likelihood: each token scored with only itself masked,
/// under the scorer's unrestricted token distribution.
pub fn score_pll(m: &dyn LanguageScorer, words: &[String]) -> Result<f64> {
    require_bidirectional(m)?;
    let mut tokens = Tokens::new(m);
    let mut full: TokenTemplate = Vec::new();
    for w in words {
        full.extend(tokens.get(w)?.iter().cloned().map(Some));
    }
    let queries: Vec<MaskedQuery> = (0..full.len())
        .map(|i| {
            let mut t = full.clone();
            let token = t[i].take().expect("every token is revealed");
            MaskedQuery { template: t, position: i, token, class: MaskClass::Unrestricted }
        })
        .collect();
    Ok(m.masked_logprobs(&queries)?.into_iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_validation() {
        assert!(PositionPermutation::new(vec![2, 0, 1]).is_ok());
        assert!(PositionPermutation::new(vec![0, 0, 1]).is_err());
        assert!(PositionPermutation::new(vec![0, 3, 1]).is_err());
    }

    #[test]
    fn permutation_sets_are_seeded_bijections() {
        let a = PositionPermutation::set(8, 100, 7);
        assert_eq!(a, PositionPermutation::set(8, 100, 7));
        assert_ne!(a, PositionPermutation::set(8, 100, 8));
        for p in &a {
            assert!(PositionPermutation::new(p.order().to_vec()).is_ok());
        }
    }

    #[test]
    fn token_order_counts() {
        assert_eq!(token_orders(1, "x").0.len(), 1);
        assert_eq!(token_orders(3, "x").0.len(), 6);
        assert_eq!(token_orders(4, "x").0.len(), 24);
        let (orders, sampled) = token_orders(6, "x");
        assert!(sampled);
        assert_eq!(orders.len(), SAMPLED_TOKEN_ORDERS);
        let mut dedup = orders.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), SAMPLED_TOKEN_ORDERS);
    }
}
