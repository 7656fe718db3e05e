//! In-process toy scorers with exactly known conditionals.
//!
//! They stand in for neural models in tests and desk-scale runs: a scorer
//! backed by an explicit joint distribution (coherent conditionals), a
//! deliberately incoherent one, an explicit conditional table, a
//! bidirectional scorer assembled from a bigram model's local conditionals,
//! and a word-piece scorer whose multi-token words are glued together.

use std::collections::HashMap;
use std::sync::Arc;

use super::{
    Capabilities, Extremes, LanguageScorer, MaskClass, MaskedQuery, Result, ScoreError, ScorerInfo, ScorerKind, TokenScore,
    Transport, WhitespaceConvention,
};
use crate::ngram::NgramModel;
use crate::seed;

fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    for l in logits.iter_mut() {
        *l -= z;
    }
}

fn unit_hash(parts: &[u64]) -> f64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h = seed::derive(h, p);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn info(name: &str, kind: ScorerKind, capabilities: Capabilities, convention: WhitespaceConvention, size: usize) -> ScorerInfo {
    ScorerInfo {
        name: name.to_string(),
        kind,
        transport: Transport::InProcess,
        whitespace_convention: convention,
        capabilities,
        token_inventory_size: size,
    }
}

fn top_k(words: &[String], dist: &[(usize, f64)], k: usize) -> Vec<TokenScore> {
    let mut v = dist.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(i, lp)| TokenScore { token: words[i].clone(), logprob: lp }).collect()
}

fn extremes(words: &[String], dist: &[(usize, f64)]) -> Result<Extremes> {
    let all = top_k(words, dist, dist.len());
    match (all.first(), all.last()) {
        (Some(a), Some(b)) => Ok(Extremes { argmax: a.clone(), argmin: b.clone() }),
        _ => Err(ScoreError::Input("empty token class".into())),
    }
}

/// A distribution over single-token words at one slot given the revealed
/// slots. Implementors need not be normalized; [`WordLevelScorer`]
/// renormalizes.
pub trait WordModel: Send + Sync {
    fn words(&self) -> &[String];
    fn index_of(&self, word: &str) -> Option<usize>;
    /// Required template length, if the model only handles one length.
    fn sentence_len(&self) -> Option<usize> {
        None
    }
    /// Unnormalized log weights of every word at `position`.
    fn logits(&self, revealed: &[Option<usize>], position: usize) -> Vec<f64>;
}

/// Scorer over a [`WordModel`] where every word is one token, so only the
/// whole-word class (and the unrestricted one, which coincides) is
/// non-empty.
pub struct WordLevelScorer<M> {
    info: ScorerInfo,
    model: M,
}

impl<M: WordModel> WordLevelScorer<M> {
    pub fn new(name: &str, kind: ScorerKind, model: M) -> Self {
        let caps = match kind {
            ScorerKind::Bidirectional => Capabilities::MASKED,
            _ => Capabilities::ALL,
        };
        let n = model.words().len();
        Self { info: info(name, kind, caps, WhitespaceConvention::PrefixSpace, n), model }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    fn encode(&self, template: &[Option<String>], position: usize) -> Result<Vec<Option<usize>>> {
        if let Some(len) = self.model.sentence_len() {
            if template.len() != len {
                return Err(ScoreError::Input(format!("template has {} slots, model expects {len}", template.len())));
            }
        }
        if position >= template.len() || template[position].is_some() {
            return Err(ScoreError::Input(format!("slot {position} is not a mask")));
        }
        template
            .iter()
            .map(|t| match t {
                None => Ok(None),
                Some(w) => self.lookup(w).map(Some),
            })
            .collect()
    }

    fn lookup(&self, w: &str) -> Result<usize> {
        self.model
            .index_of(w)
            .ok_or_else(|| ScoreError::Input(format!("'{w}' is not in the token inventory of '{}'", self.info.name)))
    }

    fn distribution(&self, revealed: &[Option<usize>], position: usize, class: MaskClass) -> Result<Vec<f64>> {
        match class {
            MaskClass::WholeWord | MaskClass::Unrestricted => {
                let mut l = self.model.logits(revealed, position);
                log_softmax(&mut l);
                Ok(l)
            }
            other => Err(ScoreError::Input(format!("{other:?} class is empty for a single-token inventory"))),
        }
    }

    fn indexed(&self, template: &[Option<String>], position: usize, class: MaskClass) -> Result<Vec<(usize, f64)>> {
        let revealed = self.encode(template, position)?;
        Ok(self.distribution(&revealed, position, class)?.into_iter().enumerate().collect())
    }
}

impl<M: WordModel> LanguageScorer for WordLevelScorer<M> {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn next_word_logprobs(&self, prefix: &[String], words: &[String]) -> Result<Vec<f64>> {
        if !self.info.capabilities.uni_logprob {
            return Err(self.unsupported("uni_next_logprob"));
        }
        let len = self.model.sentence_len().unwrap_or(prefix.len() + 1);
        if prefix.len() >= len {
            return Err(ScoreError::Input("prefix fills the whole sentence".into()));
        }
        let mut revealed = vec![None; len];
        for (i, w) in prefix.iter().enumerate() {
            revealed[i] = Some(self.lookup(w)?);
        }
        let dist = self.distribution(&revealed, prefix.len(), MaskClass::WholeWord)?;
        words.iter().map(|w| Ok(dist[self.lookup(w)?])).collect()
    }

    fn tokenize(&self, word: &str) -> Result<Vec<String>> {
        self.lookup(word)?;
        Ok(vec![word.to_string()])
    }

    fn masked_logprobs(&self, queries: &[MaskedQuery]) -> Result<Vec<f64>> {
        let mut memo: HashMap<(Vec<Option<usize>>, usize, MaskClass), Vec<f64>> = HashMap::new();
        queries
            .iter()
            .map(|q| {
                let revealed = self.encode(&q.template, q.position)?;
                let token = self.lookup(&q.token)?;
                let key = (revealed, q.position, q.class);
                if !memo.contains_key(&key) {
                    let d = self.distribution(&key.0, q.position, q.class)?;
                    memo.insert(key.clone(), d);
                }
                Ok(memo[&key][token])
            })
            .collect()
    }

    fn masked_topk(&self, template: &[Option<String>], position: usize, class: MaskClass, k: usize) -> Result<Vec<TokenScore>> {
        Ok(top_k(self.model.words(), &self.indexed(template, position, class)?, k))
    }

    fn masked_extremes(&self, template: &[Option<String>], position: usize, class: MaskClass) -> Result<Extremes> {
        extremes(self.model.words(), &self.indexed(template, position, class)?)
    }
}

fn word_index(words: &[String]) -> HashMap<String, usize> {
    words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect()
}

/// Explicit joint distribution over all `V^len` sentences. Conditionals
/// are exact marginals of the joint, so every chain factorization agrees.
pub struct ExplicitJoint {
    words: Vec<String>,
    index: HashMap<String, usize>,
    len: usize,
    probs: Vec<f64>,
}

impl ExplicitJoint {
    /// Joint proportional to `weight(word indices)`; weights must be
    /// positive.
    pub fn new(words: Vec<String>, len: usize, weight: impl Fn(&[usize]) -> f64) -> Self {
        let v = words.len();
        let total = v.pow(len as u32);
        let mut digits = vec![0usize; len];
        let mut probs = Vec::with_capacity(total);
        for code in 0..total {
            decode(code, v, &mut digits);
            let w = weight(&digits);
            assert!(w > 0.0 && w.is_finite(), "joint weights must be positive");
            probs.push(w);
        }
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        Self { index: word_index(&words), words, len, probs }
    }

    /// Seeded random joint with weights spread over roughly `e^spread`.
    pub fn random(words: Vec<String>, len: usize, spread: f64, seed: u64) -> Self {
        Self::new(words, len, |d| {
            let parts: Vec<u64> = std::iter::once(seed).chain(d.iter().map(|&x| x as u64)).collect();
            (spread * unit_hash(&parts)).exp()
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn joint_logprob(&self, words: &[String]) -> Result<f64> {
        if words.len() != self.len {
            return Err(ScoreError::Input(format!("expected {} words", self.len)));
        }
        let v = self.words.len();
        let mut code = 0;
        for w in words {
            let i = self.index.get(w).ok_or_else(|| ScoreError::Input(format!("unknown word '{w}'")))?;
            code = code * v + i;
        }
        Ok(self.probs[code].ln())
    }
}

fn decode(mut code: usize, v: usize, digits: &mut [usize]) {
    for d in digits.iter_mut().rev() {
        *d = code % v;
        code /= v;
    }
}

impl WordModel for ExplicitJoint {
    fn words(&self) -> &[String] {
        &self.words
    }

    fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    fn sentence_len(&self) -> Option<usize> {
        Some(self.len)
    }

    fn logits(&self, revealed: &[Option<usize>], position: usize) -> Vec<f64> {
        // Enumerate only the free slots (the queried slot is always free),
        // stepping the sentence code like an odometer.
        let v = self.words.len();
        let stride = |i: usize| v.pow((self.len - 1 - i) as u32);
        let free: Vec<usize> = (0..self.len).filter(|&i| i == position || revealed[i].is_none()).collect();
        let mut code: usize = revealed.iter().enumerate().filter(|&(i, _)| i != position).map(|(i, r)| r.unwrap_or(0) * stride(i)).sum();
        let pos_stride = stride(position);
        let strides: Vec<usize> = free.iter().map(|&i| stride(i)).collect();
        let mut digits = vec![0usize; free.len()];
        let mut mass = vec![0.0; v];
        'outer: loop {
            mass[(code / pos_stride) % v] += self.probs[code];
            for k in (0..free.len()).rev() {
                if digits[k] + 1 < v {
                    digits[k] += 1;
                    code += strides[k];
                    continue 'outer;
                }
                code -= digits[k] * strides[k];
                digits[k] = 0;
            }
            break;
        }
        mass.into_iter().map(f64::ln).collect()
    }
}

/// Conditionals drawn independently per (slot, revealed context) from a
/// hash, so no single joint distribution produces them.
pub struct Incoherent {
    words: Vec<String>,
    index: HashMap<String, usize>,
    spread: f64,
    seed: u64,
}

impl Incoherent {
    pub fn new(words: Vec<String>, spread: f64, seed: u64) -> Self {
        Self { index: word_index(&words), words, spread, seed }
    }
}

impl WordModel for Incoherent {
    fn words(&self) -> &[String] {
        &self.words
    }

    fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    fn logits(&self, revealed: &[Option<usize>], position: usize) -> Vec<f64> {
        let mut ctx = vec![self.seed, position as u64];
        for (i, r) in revealed.iter().enumerate() {
            if let Some(x) = r {
                ctx.push(((i as u64) << 32) | *x as u64);
            }
        }
        (0..self.words.len())
            .map(|w| {
                let mut parts = ctx.clone();
                parts.push(u64::MAX - w as u64);
                self.spread * unit_hash(&parts)
            })
            .collect()
    }
}

/// Bidirectional scorer assembled from a bigram model: the weight of `w`
/// at a slot is `p(w | left) * p(right | w)` for whichever neighbours are
/// revealed, with the continuation distribution standing in for a hidden
/// left neighbour.
pub struct BigramNeighbourhood {
    model: Arc<NgramModel>,
    index: HashMap<String, usize>,
    /// `transitions[left][w]`; row `V` is the begin-of-sentence context.
    transitions: Vec<Vec<f64>>,
    continuation: Vec<f64>,
}

impl BigramNeighbourhood {
    pub fn new(model: Arc<NgramModel>) -> Result<Self> {
        if model.order() != 2 {
            return Err(ScoreError::Input("the neighbourhood scorer needs a 2-gram model".into()));
        }
        let words = model.words().to_vec();
        let err = |e: crate::ngram::NgramError| ScoreError::Input(e.to_string());
        let mut transitions = Vec::with_capacity(words.len() + 1);
        for left in &words {
            let row = words.iter().map(|w| model.next_logprob(&[left.as_str()], w)).collect::<Result<Vec<_>, _>>().map_err(err)?;
            transitions.push(row);
        }
        let empty: [&str; 0] = [];
        transitions.push(words.iter().map(|w| model.next_logprob(&empty, w)).collect::<Result<Vec<_>, _>>().map_err(err)?);
        let continuation = words.iter().map(|w| model.continuation_logprob(w)).collect::<Result<Vec<_>, _>>().map_err(err)?;
        Ok(Self { index: word_index(&words), model, transitions, continuation })
    }
}

impl WordModel for BigramNeighbourhood {
    fn words(&self) -> &[String] {
        self.model.words()
    }

    fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(&crate::corpus::normalize_word(word)).copied()
    }

    fn logits(&self, revealed: &[Option<usize>], position: usize) -> Vec<f64> {
        let v = self.continuation.len();
        let left: &[f64] = if position == 0 {
            &self.transitions[v]
        } else {
            match revealed[position - 1] {
                Some(l) => &self.transitions[l],
                None => &self.continuation,
            }
        };
        let right = revealed.get(position + 1).copied().flatten();
        (0..v).map(|w| left[w] + right.map_or(0.0, |r| self.transitions[w][r])).collect()
    }
}

pub type JointToyScorer = WordLevelScorer<ExplicitJoint>;
pub type IncoherentToyScorer = WordLevelScorer<Incoherent>;
pub type NeighbourhoodScorer = WordLevelScorer<BigramNeighbourhood>;

/// Unidirectional scorer defined by an explicit bigram conditional table.
pub struct ConditionalTableScorer {
    info: ScorerInfo,
    words: Vec<String>,
    index: HashMap<String, usize>,
    /// `rows[prev][w]` log probabilities; row `V` is the sentence start.
    rows: Vec<Vec<f64>>,
}

impl ConditionalTableScorer {
    /// Each row is `weight(prev, w)` normalized over `w`.
    pub fn new(name: &str, words: Vec<String>, weight: impl Fn(Option<&str>, &str) -> f64) -> Self {
        let mut rows = Vec::with_capacity(words.len() + 1);
        for prev in words.iter().map(|w| Some(w.as_str())).chain(std::iter::once(None)) {
            let mut row: Vec<f64> = words.iter().map(|w| weight(prev, w).ln()).collect();
            log_softmax(&mut row);
            rows.push(row);
        }
        let n = words.len();
        Self {
            info: info(name, ScorerKind::Unidirectional, Capabilities::UNIDIRECTIONAL, WhitespaceConvention::PrefixSpace, n),
            index: word_index(&words),
            words,
            rows,
        }
    }

    pub fn conditional(&self, prev: Option<&str>, w: &str) -> Result<f64> {
        let row = match prev {
            None => self.words.len(),
            Some(p) => self.lookup(p)?,
        };
        Ok(self.rows[row][self.lookup(w)?])
    }

    fn lookup(&self, w: &str) -> Result<usize> {
        self.index.get(w).copied().ok_or_else(|| ScoreError::Input(format!("'{w}' is not in the table")))
    }
}

impl LanguageScorer for ConditionalTableScorer {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn next_word_logprobs(&self, prefix: &[String], words: &[String]) -> Result<Vec<f64>> {
        let prev = prefix.last().map(String::as_str);
        words.iter().map(|w| self.conditional(prev, w)).collect()
    }

    fn tokenize(&self, word: &str) -> Result<Vec<String>> {
        self.lookup(word)?;
        Ok(vec![word.to_string()])
    }
}

/// Word-piece scorer. Continuation pieces carry a `##` prefix, so a slot
/// that starts a word is normalized over unmarked tokens and a slot inside
/// a word over `##` tokens. Adjacent pieces of the same word reinforce each
/// other by `glue`, which makes a piece nearly certain once its neighbour
/// piece is visible.
pub struct MultiTokenToyScorer {
    info: ScorerInfo,
    vocabulary: Vec<String>,
    pieces: HashMap<String, Vec<String>>,
    tokens: Vec<String>,
    token_index: HashMap<String, usize>,
    bias: Vec<f64>,
    /// Ordered pairs of token ids that occur adjacently inside a word.
    bonds: HashMap<(usize, usize), ()>,
    glue: f64,
    compat: f64,
    seed: u64,
}

pub const CONTINUATION_MARK: &str = "##";

impl MultiTokenToyScorer {
    /// `words` maps each vocabulary word to its pieces and a log bias that
    /// is added to its first piece.
    pub fn new(name: &str, words: &[(String, Vec<String>, f64)], glue: f64, compat: f64, seed: u64) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::new();
        let mut token_index = HashMap::new();
        let mut bias: Vec<f64> = Vec::new();
        let mut bonds = HashMap::new();
        let mut pieces = HashMap::new();
        for (word, ps, b) in words {
            if ps.is_empty() || ps[0].starts_with(CONTINUATION_MARK) || ps[1..].iter().any(|p| !p.starts_with(CONTINUATION_MARK)) {
                return Err(ScoreError::Input(format!("malformed pieces for '{word}'")));
            }
            let mut ids = Vec::with_capacity(ps.len());
            for (j, p) in ps.iter().enumerate() {
                let id = *token_index.entry(p.clone()).or_insert_with(|| {
                    tokens.push(p.clone());
                    bias.push(0.0);
                    tokens.len() - 1
                });
                if j == 0 {
                    bias[id] = *b;
                }
                ids.push(id);
            }
            for w in ids.windows(2) {
                bonds.insert((w[0], w[1]), ());
            }
            pieces.insert(word.clone(), ps.clone());
        }
        let n = tokens.len();
        Ok(Self {
            info: info(name, ScorerKind::Bidirectional, Capabilities::MASKED, WhitespaceConvention::None, n),
            vocabulary: words.iter().map(|w| w.0.clone()).collect(),
            pieces,
            tokens,
            token_index,
            bias,
            bonds,
            glue,
            compat,
            seed,
        })
    }

    /// A seeded toy inventory: `single` one-piece words plus `multi`
    /// words of two or three pieces whose first pieces are rare.
    pub fn generated(name: &str, single: usize, multi: usize, seed: u64) -> Result<Self> {
        let mut words = Vec::new();
        for i in 0..single {
            words.push((format!("w{i}"), vec![format!("w{i}")], 0.0));
        }
        for i in 0..multi {
            let k = if i % 5 == 4 { 3 } else { 2 };
            let mut ps = vec![format!("m{i}")];
            for j in 1..k {
                ps.push(format!("{CONTINUATION_MARK}m{i}p{j}"));
            }
            words.push((ps.concat().replace(CONTINUATION_MARK, ""), ps, -2.0));
        }
        Self::new(name, &words, 8.0, 0.5, seed)
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn token_count(&self, word: &str) -> Option<usize> {
        self.pieces.get(word).map(Vec::len)
    }

    fn in_class(&self, token: usize, class: MaskClass) -> bool {
        let cont = self.tokens[token].starts_with(CONTINUATION_MARK);
        match class {
            MaskClass::WholeWord | MaskClass::WordInitial => !cont,
            MaskClass::WordFinal | MaskClass::WordInternal => cont,
            MaskClass::Unrestricted => true,
        }
    }

    fn distribution(&self, revealed: &[Option<usize>], position: usize, class: MaskClass) -> Vec<(usize, f64)> {
        let left = position.checked_sub(1).and_then(|i| revealed[i]);
        let right = revealed.get(position + 1).copied().flatten();
        let mut ids = Vec::new();
        let mut logits = Vec::new();
        for t in (0..self.tokens.len()).filter(|&t| self.in_class(t, class)) {
            let mut l = self.bias[t];
            if let Some(a) = left {
                if self.bonds.contains_key(&(a, t)) {
                    l += self.glue;
                } else {
                    l += self.compat * (unit_hash(&[self.seed, a as u64, t as u64]) - 0.5);
                }
            }
            if let Some(b) = right {
                if self.bonds.contains_key(&(t, b)) {
                    l += self.glue;
                }
            }
            ids.push(t);
            logits.push(l);
        }
        log_softmax(&mut logits);
        ids.into_iter().zip(logits).collect()
    }

    fn encode(&self, template: &[Option<String>], position: usize) -> Result<Vec<Option<usize>>> {
        if position >= template.len() || template[position].is_some() {
            return Err(ScoreError::Input(format!("slot {position} is not a mask")));
        }
        template.iter().map(|t| t.as_ref().map(|s| self.token(s)).transpose()).collect()
    }

    fn token(&self, s: &str) -> Result<usize> {
        self.token_index.get(s).copied().ok_or_else(|| ScoreError::Input(format!("unknown token '{s}'")))
    }
}

impl LanguageScorer for MultiTokenToyScorer {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn tokenize(&self, word: &str) -> Result<Vec<String>> {
        self.pieces.get(word).cloned().ok_or_else(|| ScoreError::Input(format!("'{word}' cannot be tokenized")))
    }

    fn masked_logprobs(&self, queries: &[MaskedQuery]) -> Result<Vec<f64>> {
        queries
            .iter()
            .map(|q| {
                let revealed = self.encode(&q.template, q.position)?;
                let t = self.token(&q.token)?;
                self.distribution(&revealed, q.position, q.class)
                    .into_iter()
                    .find(|(id, _)| *id == t)
                    .map(|(_, lp)| lp)
                    .ok_or_else(|| ScoreError::Input(format!("'{}' is outside the {:?} class", q.token, q.class)))
            })
            .collect()
    }

    fn masked_topk(&self, template: &[Option<String>], position: usize, class: MaskClass, k: usize) -> Result<Vec<TokenScore>> {
        let revealed = self.encode(template, position)?;
        Ok(top_k(&self.tokens, &self.distribution(&revealed, position, class), k))
    }

    fn masked_extremes(&self, template: &[Option<String>], position: usize, class: MaskClass) -> Result<Extremes> {
        let revealed = self.encode(template, position)?;
        extremes(&self.tokens, &self.distribution(&revealed, position, class))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn explicit_joint_is_normalized() {
        let j = ExplicitJoint::random(words(3), 4, 2.0, 1);
        let total: f64 = j.probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_table_rows_normalize() {
        let t = ConditionalTableScorer::new("t", words(4), |p, w| 1.0 + p.map_or(0.0, |p| p.len() as f64) + w.len() as f64);
        for prev in [None, Some("t1")] {
            let s: f64 = words(4).iter().map(|w| t.conditional(prev, w).unwrap().exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_token_glue_makes_second_piece_nearly_certain() {
        let m = MultiTokenToyScorer::generated("mt", 10, 4, 3).unwrap();
        let toks = m.tokenize("m0m0p1").unwrap();
        assert_eq!(toks, vec!["m0".to_string(), "##m0p1".to_string()]);
        let q = MaskedQuery { template: vec![Some("m0".into()), None], position: 1, token: "##m0p1".into(), class: MaskClass::WordFinal };
        let lp = m.masked_logprobs(&[q]).unwrap()[0];
        assert!(lp > -0.01, "{lp}");
    }
}
