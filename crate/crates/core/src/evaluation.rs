//! Model-human alignment statistics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Discrete, Normal, StudentsT};
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::experiment::{apply_quality_filter, Choice, Condition, Session, SessionState, StimulusSet, Trial};
use crate::num::{mean, pearson, sample_std, signed_ranks, total_cmp, Real};
use crate::scoring::ScoreMatrix;
use crate::tsv::Table;

#[derive(Debug, Error, PartialEq)]
pub enum EvaluationError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("missing score for sentence '{sentence}' under '{model}'")]
    MissingScore { sentence: String, model: String },
    #[error("participants answered different trial lists")]
    UnequalTrials,
    #[error("not enough data: {0}")]
    NotEnoughData(String),
}

pub type Result<T, E = EvaluationError> = std::result::Result<T, E>;

/// Six-point rating centred on zero; positive favours the right sentence.
pub fn likert(choice: Choice, confidence: u8) -> f64 {
    let magnitude = confidence.clamp(1, 3) as f64 - 0.5;
    match choice {
        Choice::Left => -magnitude,
        Choice::Right => magnitude,
    }
}

/// 1 when the model prefers the chosen side, 0 when it prefers the other,
/// 0.5 on a tie. `log_ratio` is `log p(right) - log p(left)`.
pub fn agreement<T: Real>(log_ratio: T, choice: Choice) -> T {
    if log_ratio == T::zero() {
        T::of(0.5)
    } else if (log_ratio > T::zero()) == (choice == Choice::Right) {
        T::one()
    } else {
        T::zero()
    }
}

/// Mean agreement over trials.
pub fn binarized_accuracy<T: Real>(log_ratios: &[T], choices: &[Choice]) -> Result<T> {
    if log_ratios.len() != choices.len() {
        return Err(EvaluationError::LengthMismatch(log_ratios.len(), choices.len()));
    }
    if choices.is_empty() {
        return Err(EvaluationError::NotEnoughData("no trials".into()));
    }
    Ok(log_ratios.iter().zip(choices).map(|(&lr, &c)| agreement(lr, c)).sum::<T>() / T::of_usize(choices.len()))
}

fn majority_credit(right: usize, left: usize, choice: Choice) -> f64 {
    match right.cmp(&left) {
        std::cmp::Ordering::Equal => 0.5,
        std::cmp::Ordering::Greater => (choice == Choice::Right) as u8 as f64,
        std::cmp::Ordering::Less => (choice == Choice::Left) as u8 as f64,
    }
}

/// Per-participant noise-ceiling bounds for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCeiling {
    pub lower: f64,
    pub upper: f64,
    pub per_participant: Vec<(f64, f64)>,
}

/// `choices[participant][trial]`. The lower bound predicts each participant
/// from the majority of the others, the upper bound from the majority of
/// everyone including them; tied majorities earn 0.5.
pub fn noise_ceiling(choices: &[Vec<Choice>]) -> Result<NoiseCeiling> {
    let n = choices.len();
    if n < 2 {
        return Err(EvaluationError::NotEnoughData("a noise ceiling needs at least two participants".into()));
    }
    let trials = choices[0].len();
    if choices.iter().any(|c| c.len() != trials) || trials == 0 {
        return Err(EvaluationError::UnequalTrials);
    }
    let rights: Vec<usize> = (0..trials).map(|t| choices.iter().filter(|c| c[t] == Choice::Right).count()).collect();
    let per: Vec<(f64, f64)> = choices
        .iter()
        .map(|mine| {
            let (mut lo, mut hi) = (0.0, 0.0);
            for t in 0..trials {
                let self_right = (mine[t] == Choice::Right) as usize;
                let (or, ol) = (rights[t] - self_right, n - 1 - (rights[t] - self_right));
                lo += majority_credit(or, ol, mine[t]);
                hi += majority_credit(rights[t], n - rights[t], mine[t]);
            }
            (lo / trials as f64, hi / trials as f64)
        })
        .collect();
    Ok(NoiseCeiling {
        lower: per.iter().map(|p| p.0).sum::<f64>() / n as f64,
        upper: per.iter().map(|p| p.1).sum::<f64>() / n as f64,
        per_participant: per,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)` over the non-zero differences.
    pub statistic: f64,
    pub p_value: f64,
    pub n_used: usize,
    pub exact: bool,
    /// Every difference was zero.
    pub degenerate: bool,
}

/// Largest sample size handled by the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped and ties share average ranks. Up to 25 pairs the exact null
/// distribution of the (doubled, hence integral) rank sum is enumerated.
pub fn wilcoxon_signed_rank<T: Real>(x: &[T], y: &[T]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(EvaluationError::LengthMismatch(x.len(), y.len()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| (a - b).as_f64()).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult { statistic: 0.0, p_value: 1.0, n_used: 0, exact: true, degenerate: true });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = crate::num::average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let stat = w_plus.min(total - w_plus);
    if n <= WILCOXON_EXACT_MAX {
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        // counts[s] = number of sign patterns whose doubled W+ equals s.
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let target = (stat * 2.0).round() as usize;
        let tail: f64 = counts[..=target].iter().sum();
        let p = (2.0 * tail / 2f64.powi(n as i32)).min(1.0);
        return Ok(WilcoxonResult { statistic: stat, p_value: p, n_used: n, exact: true, degenerate: false });
    }
    // Normal approximation with tie correction and continuity correction.
    let nf = n as f64;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let mu = nf * (nf + 1.0) / 4.0;
    let sigma = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0).sqrt();
    let z = ((stat - mu).abs() - 0.5).max(0.0) / sigma;
    let p = (2.0 * (1.0 - Normal::standard().cdf(z))).min(1.0);
    Ok(WilcoxonResult { statistic: stat, p_value: p, n_used: n, exact: false, degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhResult {
    pub rejected: Vec<bool>,
    pub adjusted: Vec<f64>,
    /// Largest `k q / m` met by `p_(k)`, or 0 when nothing is rejected.
    pub threshold: f64,
}

/// Benjamini-Hochberg step-up procedure at level `q`.
pub fn bh_fdr<T: Real>(pvalues: &[T], q: f64) -> BhResult {
    let m = pvalues.len();
    let p: Vec<f64> = pvalues.iter().map(|v| v.as_f64()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut k = 0;
    for (rank, &i) in order.iter().enumerate() {
        if p[i] <= (rank + 1) as f64 * q / m as f64 {
            k = rank + 1;
        }
    }
    let mut rejected = vec![false; m];
    for &i in &order[..k] {
        rejected[i] = true;
    }
    let mut adjusted = vec![1.0; m];
    let mut running: f64 = 1.0;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (rank + 1) as f64).min(1.0);
        adjusted[i] = running;
    }
    BhResult { rejected, adjusted, threshold: if k == 0 { 0.0 } else { k as f64 * q / m as f64 } }
}

/// Expected signed-rank cosine similarity under random tie-breaking:
/// `sum(rm_i * rh_i) / sum_{k=1..n} k^2` with average-rank signed ranks.
pub fn signed_rank_cosine<T: Real>(model: &[T], human: &[T]) -> Result<T> {
    if model.len() != human.len() {
        return Err(EvaluationError::LengthMismatch(model.len(), human.len()));
    }
    if model.is_empty() {
        return Err(EvaluationError::NotEnoughData("no trials".into()));
    }
    let rm = signed_ranks(model);
    let rh = signed_ranks(human);
    let dot: T = rm.iter().zip(&rh).map(|(&a, &b)| a * b).sum();
    Ok(dot / sum_squares::<T>(model.len()))
}

fn sum_squares<T: Real>(n: usize) -> T {
    let n = T::of_usize(n);
    n * (n + T::one()) * (T::of(2.0) * n + T::one()) / T::of(6.0)
}

/// Similarity noise ceiling from each participant's centred ratings.
/// Participant `h`'s signed-rank vector (scaled by `1/sqrt(sum k^2)`) is
/// compared with the normalized mean signed-rank vector of the others
/// (lower) or of everyone (upper).
pub fn similarity_noise_ceiling<T: Real>(ratings: &[Vec<T>]) -> Result<(T, T)> {
    let p = ratings.len();
    if p < 2 {
        return Err(EvaluationError::NotEnoughData("at least two participants".into()));
    }
    let n = ratings[0].len();
    if n == 0 || ratings.iter().any(|r| r.len() != n) {
        return Err(EvaluationError::UnequalTrials);
    }
    let ranks: Vec<Vec<T>> = ratings.iter().map(|r| signed_ranks(r)).collect();
    let scale = sum_squares::<T>(n).sqrt();
    let total: Vec<T> = (0..n).map(|i| ranks.iter().map(|r| r[i]).sum()).collect();
    let cos_with = |mine: &[T], reference: &[T]| -> T {
        let norm = reference.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            return T::zero();
        }
        mine.iter().zip(reference).map(|(&a, &b)| a * b).sum::<T>() / (scale * norm)
    };
    let (mut lo, mut hi) = (T::zero(), T::zero());
    for r in &ranks {
        let others: Vec<T> = total.iter().zip(r).map(|(&t, &x)| t - x).collect();
        lo = lo + cos_with(r, &others);
        hi = hi + cos_with(r, &total);
    }
    let pf = T::of_usize(p);
    Ok((lo / pf, hi / pf))
}

fn direction<T: Real>(v: T) -> i8 {
    if v > T::zero() {
        1
    } else if v < T::zero() {
        -1
    } else {
        0
    }
}

/// Fraction of pairs on which two models order the pair the same way.
/// `log_ratios[model][pair]`; a tie on one side counts 0.5, on both 1.
pub fn agreement_matrix<T: Real>(log_ratios: &[Vec<T>]) -> Result<Vec<Vec<f64>>> {
    let m = log_ratios.len();
    let n = log_ratios.first().map_or(0, Vec::len);
    if n == 0 || log_ratios.iter().any(|r| r.len() != n) {
        return Err(EvaluationError::NotEnoughData("agreement needs equally long, non-empty rows".into()));
    }
    let mut out = vec![vec![1.0; m]; m];
    for a in 0..m {
        for b in a + 1..m {
            let s: f64 = (0..n)
                .map(|i| {
                    let (da, db) = (direction(log_ratios[a][i]), direction(log_ratios[b][i]));
                    match (da, db) {
                        (0, 0) => 1.0,
                        (0, _) | (_, 0) => 0.5,
                        _ if da == db => 1.0,
                        _ => 0.0,
                    }
                })
                .sum();
            out[a][b] = s / n as f64;
            out[b][a] = out[a][b];
        }
    }
    Ok(out)
}

/// Exact two-sided binomial test of `k` successes in `n` against 0.5.
pub fn binomial_two_sided(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    let lo = k.min(n - k);
    if 2 * lo == n {
        return 1.0;
    }
    (2.0 * b.cdf(lo)).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCountBias {
    pub model: String,
    pub accepted_more: usize,
    pub equal: usize,
    pub rejected_more: usize,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub significant: bool,
    pub degenerate: bool,
}

/// Per model: do the sentences it prefers have more tokens than those it
/// rejects? `counts[model]` lists `(accepted tokens, rejected tokens)`
/// per pair. Ties are excluded from the exact binomial test, and p values
/// are FDR-adjusted across models.
pub fn token_count_bias_test(counts: &[(String, Vec<(usize, usize)>)], q: f64) -> Vec<TokenCountBias> {
    let mut rows: Vec<TokenCountBias> = counts
        .iter()
        .map(|(model, pairs)| {
            let more = pairs.iter().filter(|(a, r)| a > r).count();
            let equal = pairs.iter().filter(|(a, r)| a == r).count();
            let less = pairs.len() - more - equal;
            let n = (more + less) as u64;
            TokenCountBias {
                model: model.clone(),
                accepted_more: more,
                equal,
                rejected_more: less,
                p_value: binomial_two_sided(more as u64, n),
                p_adjusted: 1.0,
                significant: false,
                degenerate: n == 0,
            }
        })
        .collect();
    let bh = bh_fdr(&rows.iter().map(|r| r.p_value).collect::<Vec<_>>(), q);
    for (i, r) in rows.iter_mut().enumerate() {
        r.p_adjusted = bh.adjusted[i];
        r.significant = bh.rejected[i];
    }
    rows
}

/// Two-sided paired t test; returns `(t, p)`. Identical samples give
/// `(0, 1)`.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(EvaluationError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvaluationError::NotEnoughData("a paired t test needs two pairs".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let m = mean(&d);
    let sd = sample_std(&d);
    if m == 0.0 {
        return Ok((0.0, 1.0));
    }
    if sd == 0.0 {
        return Ok((m.signum() * f64::INFINITY, 0.0));
    }
    let n = d.len() as f64;
    let t = m / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid t distribution");
    Ok((t, (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)))
}

/// Word vectors read from a "word v1 ... vd" text table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Embeddings {
    vectors: HashMap<String, Vec<f64>>,
}

impl Embeddings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let Some(word) = it.next() else { continue };
            let v: Vec<f64> = it
                .map(|x| x.parse::<f64>().map_err(|e| EvaluationError::NotEnoughData(format!("embedding line {}: {e}", i + 1))))
                .collect::<Result<_>>()?;
            if *dim.get_or_insert(v.len()) != v.len() || v.is_empty() {
                return Err(EvaluationError::NotEnoughData(format!("embedding line {} has the wrong dimension", i + 1)));
            }
            vectors.insert(crate::corpus::normalize_word(word), v);
        }
        Ok(Self { vectors })
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(&crate::corpus::normalize_word(word)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Mean Pearson correlation over all pairs of embedded words, or `None`
/// with fewer than two embedded words.
pub fn semantic_coherence(words: &[String], emb: &Embeddings) -> Option<f64> {
    let vs: Vec<&[f64]> = words.iter().filter_map(|w| emb.get(w)).collect();
    if vs.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            total += pearson(vs[i], vs[j]);
            n += 1;
        }
    }
    Some(total / n as f64)
}

/// Mean log10 relative corpus frequency of the words.
pub fn mean_log_frequency(words: &[String], vocab: &Vocabulary) -> Option<f64> {
    let f: Vec<f64> = words.iter().filter_map(|w| vocab.log10_frequency(w)).collect();
    (!f.is_empty()).then(|| mean(&f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feature {
    SemanticCoherence,
    LogFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBias {
    pub model: String,
    pub feature: Feature,
    pub n_pairs: usize,
    pub mean_model_delta: f64,
    pub mean_human_delta: f64,
    pub t: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub significant: bool,
}

/// Input to the feature-bias analysis: one sentence pair with each judge's
/// preference (`Some(true)` = first sentence, `None` = tie).
#[derive(Debug, Clone, PartialEq)]
pub struct JudgedPair {
    pub first: Vec<String>,
    pub second: Vec<String>,
    pub human_prefers_first: Option<bool>,
    pub model_prefers_first: BTreeMap<String, Option<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBiasReport {
    pub rows: Vec<FeatureBias>,
    /// Sentences skipped for having fewer than two embedded words.
    pub excluded_sentences: usize,
    pub embedding_coverage: f64,
}

/// Does a model's preference lean toward a sentence feature more than the
/// human majority's does? For each pair, the feature difference between the
/// preferred and the rejected sentence is computed per judge, and model and
/// human differences are compared with a paired t test; p values are
/// FDR-adjusted across models per feature.
pub fn linguistic_feature_bias(pairs: &[JudgedPair], emb: Option<&Embeddings>, vocab: &Vocabulary, q: f64) -> FeatureBiasReport {
    let models: Vec<String> = pairs.first().map(|p| p.model_prefers_first.keys().cloned().collect()).unwrap_or_default();
    let mut excluded = 0;
    let mut covered = 0usize;
    let mut seen = 0usize;
    let mut features: Vec<(Feature, Vec<Option<(f64, f64)>>)> = Vec::new();
    if let Some(emb) = emb {
        let vals = pairs
            .iter()
            .map(|p| {
                for w in p.first.iter().chain(&p.second) {
                    seen += 1;
                    covered += emb.get(w).is_some() as usize;
                }
                let a = semantic_coherence(&p.first, emb);
                let b = semantic_coherence(&p.second, emb);
                excluded += a.is_none() as usize + b.is_none() as usize;
                a.zip(b)
            })
            .collect();
        features.push((Feature::SemanticCoherence, vals));
    }
    features.push((
        Feature::LogFrequency,
        pairs.iter().map(|p| mean_log_frequency(&p.first, vocab).zip(mean_log_frequency(&p.second, vocab))).collect(),
    ));
    let delta = |v: (f64, f64), first: bool| if first { v.0 - v.1 } else { v.1 - v.0 };
    let mut rows = Vec::new();
    for (feature, vals) in &features {
        let mut block = Vec::new();
        for m in &models {
            let (mut md, mut hd) = (Vec::new(), Vec::new());
            for (p, v) in pairs.iter().zip(vals) {
                if let (Some(v), Some(Some(mf)), Some(hf)) = (v, p.model_prefers_first.get(m), p.human_prefers_first) {
                    md.push(delta(*v, *mf));
                    hd.push(delta(*v, hf));
                }
            }
            let (t, pv) = paired_t_test(&md, &hd).unwrap_or((0.0, 1.0));
            block.push(FeatureBias {
                model: m.clone(),
                feature: *feature,
                n_pairs: md.len(),
                mean_model_delta: if md.is_empty() { 0.0 } else { mean(&md) },
                mean_human_delta: if hd.is_empty() { 0.0 } else { mean(&hd) },
                t,
                p_value: pv,
                p_adjusted: 1.0,
                significant: false,
            });
        }
        let bh = bh_fdr(&block.iter().map(|b| b.p_value).collect::<Vec<_>>(), q);
        for (i, b) in block.iter_mut().enumerate() {
            b.p_adjusted = bh.adjusted[i];
            b.significant = bh.rejected[i];
        }
        rows.extend(block);
    }
    FeatureBiasReport { rows, excluded_sentences: excluded, embedding_coverage: if seen == 0 { 0.0 } else { covered as f64 / seen as f64 } }
}

/// One participant's answers, keyed by trial id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantData {
    pub session_id: String,
    pub participant: String,
    pub answers: HashMap<String, (Choice, u8)>,
}

/// A stimulus set with the participants who completed it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupData {
    pub set: StimulusSet,
    pub participants: Vec<ParticipantData>,
}

/// Which trials enter a model's evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialSelection {
    /// Every non-control trial.
    All,
    /// Targeted trials that include the model, plus random natural pairs.
    TargetedOrRandom,
    /// Trials of one condition (targeted ones only when they include the
    /// model).
    Condition(Condition),
}

fn selected(t: &Trial, model: &str, sel: TrialSelection) -> bool {
    match sel {
        TrialSelection::All => t.condition != Condition::ControlScrambled,
        TrialSelection::TargetedOrRandom => t.condition == Condition::NaturalRandom || (t.condition.is_targeted() && t.targets(model)),
        TrialSelection::Condition(c) => t.condition == c && (!c.is_targeted() || t.targets(model)),
    }
}

fn log_ratio(scores: &ScoreMatrix<f64>, t: &Trial, model: &str) -> Result<f64> {
    let get = |id: &str| {
        scores.get(id, model).ok_or_else(|| EvaluationError::MissingScore { sentence: id.to_string(), model: model.to_string() })
    };
    Ok(get(&t.right.id)? - get(&t.left.id)?)
}

/// Group-mean accuracy of `model` on the trials chosen by `filter`, or
/// `None` when the group has no such trials.
pub fn group_accuracy(g: &GroupData, scores: &ScoreMatrix<f64>, model: &str, filter: impl Fn(&Trial) -> bool) -> Result<Option<f64>> {
    let trials: Vec<&Trial> = g.set.trials.iter().filter(|t| filter(t)).collect();
    if trials.is_empty() || g.participants.is_empty() {
        return Ok(None);
    }
    let lrs = trials.iter().map(|t| log_ratio(scores, t, model)).collect::<Result<Vec<_>>>()?;
    let mut accs = Vec::new();
    for p in &g.participants {
        let choices: Vec<Choice> = trials
            .iter()
            .map(|t| p.answers.get(&t.id).map(|a| a.0).ok_or(EvaluationError::UnequalTrials))
            .collect::<Result<_>>()?;
        accs.push(binarized_accuracy(&lrs, &choices)?);
    }
    Ok(Some(mean(&accs)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub model_a: String,
    pub model_b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub significant: bool,
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAccuracy {
    pub model: String,
    pub selection: String,
    /// One entry per group (1-based group index).
    pub per_group: Vec<(usize, f64)>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCeiling {
    pub group: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub model: String,
    pub per_group: Vec<(usize, f64)>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub models: Vec<String>,
    pub sessions_used: usize,
    pub sessions_excluded: usize,
    pub accuracy: Vec<ModelAccuracy>,
    pub noise_ceiling: Vec<GroupCeiling>,
    pub noise_ceiling_mean: (f64, f64),
    /// For each model pair, both models' accuracy on the trials that
    /// target exactly that pair, compared across groups.
    pub pairwise_targeted: Vec<PairwiseTest>,
    /// All models compared on every non-control trial.
    pub pairwise_overall: Vec<PairwiseTest>,
    pub similarity: Vec<Similarity>,
    pub similarity_ceiling: (f64, f64),
    pub agreement: Vec<Vec<f64>>,
    pub agreement_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub fdr_q: f64,
    pub apply_quality_filter: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { fdr_q: 0.05, apply_quality_filter: true }
    }
}

/// Groups completed sessions by stimulus set, optionally dropping sessions
/// that fail the control-trial filter. Returns the groups and the number
/// of excluded sessions.
pub fn collect_groups(sets: &[StimulusSet], sessions: &[Session], quality_filter: bool) -> (Vec<GroupData>, usize) {
    let mut excluded = 0;
    let mut groups = Vec::new();
    for set in sets {
        let mut participants = Vec::new();
        for s in sessions.iter().filter(|s| s.set == set.group) {
            let complete = s.responses.len() == set.trials.len() && s.state != SessionState::Rejected;
            let passes = !quality_filter || apply_quality_filter(set, &s.responses).is_ok_and(|v| v.accept);
            if complete && passes {
                participants.push(ParticipantData {
                    session_id: s.id.clone(),
                    participant: s.participant.clone(),
                    answers: s.responses.iter().map(|r| (r.trial_id.clone(), (r.choice, r.confidence))).collect(),
                });
            } else {
                excluded += 1;
            }
        }
        groups.push(GroupData { set: set.clone(), participants });
    }
    (groups, excluded)
}

fn pairwise(per_model: &[(String, Vec<(usize, f64)>)], pairs: &[(usize, usize)], q: f64) -> Result<Vec<PairwiseTest>> {
    let mut out = Vec::new();
    for &(a, b) in pairs {
        let bmap: HashMap<usize, f64> = per_model[b].1.iter().copied().collect();
        let (mut xa, mut xb) = (Vec::new(), Vec::new());
        for &(g, v) in &per_model[a].1 {
            if let Some(&w) = bmap.get(&g) {
                xa.push(v);
                xb.push(w);
            }
        }
        if xa.is_empty() {
            continue;
        }
        let w = wilcoxon_signed_rank(&xa, &xb)?;
        out.push(PairwiseTest {
            model_a: per_model[a].0.clone(),
            model_b: per_model[b].0.clone(),
            mean_a: mean(&xa),
            mean_b: mean(&xb),
            statistic: w.statistic,
            p_value: w.p_value,
            p_adjusted: 1.0,
            significant: false,
            groups: xa.len(),
        });
    }
    let bh = bh_fdr(&out.iter().map(|t| t.p_value).collect::<Vec<_>>(), q);
    for (i, t) in out.iter_mut().enumerate() {
        t.p_adjusted = bh.adjusted[i];
        t.significant = bh.rejected[i];
    }
    Ok(out)
}

/// The full model-human alignment report.
pub fn evaluate(groups: &[GroupData], scores: &ScoreMatrix<f64>, models: &[String], excluded: usize, cfg: &EvaluationConfig) -> Result<EvaluationReport> {
    let mut accuracy = Vec::new();
    let mut overall: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    let selections: Vec<(String, TrialSelection)> = std::iter::once(("all".to_string(), TrialSelection::All))
        .chain(std::iter::once(("targeted-or-random".to_string(), TrialSelection::TargetedOrRandom)))
        .chain(Condition::ALL.iter().filter(|c| **c != Condition::ControlScrambled).map(|c| (c.name().to_string(), TrialSelection::Condition(*c))))
        .collect();
    for m in models {
        for (label, sel) in &selections {
            let mut per_group = Vec::new();
            for g in groups {
                if let Some(a) = group_accuracy(g, scores, m, |t| selected(t, m, *sel))? {
                    per_group.push((g.set.group, a));
                }
            }
            if per_group.is_empty() {
                continue;
            }
            let vals: Vec<f64> = per_group.iter().map(|p| p.1).collect();
            if *sel == TrialSelection::All {
                overall.push((m.clone(), per_group.clone()));
            }
            accuracy.push(ModelAccuracy { model: m.clone(), selection: label.clone(), mean: mean(&vals), per_group });
        }
    }

    let mut noise = Vec::new();
    let mut ratings_by_group = Vec::new();
    for g in groups {
        let trials: Vec<&Trial> = g.set.trials.iter().filter(|t| t.condition != Condition::ControlScrambled).collect();
        if g.participants.len() < 2 || trials.is_empty() {
            continue;
        }
        let choices: Vec<Vec<Choice>> = g.participants.iter().map(|p| trials.iter().map(|t| p.answers[&t.id].0).collect()).collect();
        let nc = noise_ceiling(&choices)?;
        noise.push(GroupCeiling { group: g.set.group, lower: nc.lower, upper: nc.upper });
        let ratings: Vec<Vec<f64>> = g
            .participants
            .iter()
            .map(|p| trials.iter().map(|t| { let (c, k) = p.answers[&t.id]; likert(c, k) }).collect())
            .collect();
        ratings_by_group.push((g, trials, ratings));
    }
    let nc_mean = if noise.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (mean(&noise.iter().map(|n| n.lower).collect::<Vec<_>>()), mean(&noise.iter().map(|n| n.upper).collect::<Vec<_>>()))
    };

    // Targeted comparisons: trials aimed at exactly the pair.
    let mut targeted_pairs: Vec<(String, String)> = Vec::new();
    for g in groups {
        for t in &g.set.trials {
            if let Some((a, b)) = &t.targeted_models {
                let key = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
                if !targeted_pairs.contains(&key) && models.contains(a) && models.contains(b) {
                    targeted_pairs.push(key);
                }
            }
        }
    }
    targeted_pairs.sort();
    let mut targeted_series = Vec::new();
    let mut targeted_index = Vec::new();
    for (a, b) in &targeted_pairs {
        let on_pair = |t: &Trial| t.targeted_models.as_ref().is_some_and(|(x, y)| (x == a && y == b) || (x == b && y == a));
        let mut sa = Vec::new();
        let mut sb = Vec::new();
        for g in groups {
            if let (Some(x), Some(y)) = (group_accuracy(g, scores, a, on_pair)?, group_accuracy(g, scores, b, on_pair)?) {
                sa.push((g.set.group, x));
                sb.push((g.set.group, y));
            }
        }
        targeted_index.push((targeted_series.len(), targeted_series.len() + 1));
        targeted_series.push((a.clone(), sa));
        targeted_series.push((b.clone(), sb));
    }
    let pairwise_targeted = pairwise(&targeted_series, &targeted_index, cfg.fdr_q)?;
    let all_pairs: Vec<(usize, usize)> = (0..overall.len()).flat_map(|a| (a + 1..overall.len()).map(move |b| (a, b))).collect();
    let pairwise_overall = pairwise(&overall, &all_pairs, cfg.fdr_q)?;

    let mut similarity = Vec::new();
    for m in models {
        let mut per_group = Vec::new();
        for (g, trials, ratings) in &ratings_by_group {
            let lrs = trials.iter().map(|t| log_ratio(scores, t, m)).collect::<Result<Vec<_>>>()?;
            let sims = ratings.iter().map(|r| signed_rank_cosine(&lrs, r)).collect::<Result<Vec<_>>>()?;
            per_group.push((g.set.group, mean(&sims)));
        }
        if !per_group.is_empty() {
            let vals: Vec<f64> = per_group.iter().map(|p| p.1).collect();
            similarity.push(Similarity { model: m.clone(), mean: mean(&vals), per_group });
        }
    }
    let mut sim_lo = Vec::new();
    let mut sim_hi = Vec::new();
    for (_, _, ratings) in &ratings_by_group {
        let (lo, hi) = similarity_noise_ceiling(ratings)?;
        sim_lo.push(lo);
        sim_hi.push(hi);
    }
    let similarity_ceiling = if sim_lo.is_empty() { (f64::NAN, f64::NAN) } else { (mean(&sim_lo), mean(&sim_hi)) };

    let all_trials: Vec<&Trial> = groups.iter().flat_map(|g| g.set.trials.iter()).filter(|t| t.condition != Condition::ControlScrambled).collect();
    let lr_rows = models
        .iter()
        .map(|m| all_trials.iter().map(|t| log_ratio(scores, t, m)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let agreement = if all_trials.is_empty() { Vec::new() } else { agreement_matrix(&lr_rows)? };
    let off: Vec<f64> = (0..agreement.len()).flat_map(|a| (0..agreement.len()).filter(move |&b| b != a).map(move |b| (a, b))).map(|(a, b)| agreement[a][b]).collect();

    Ok(EvaluationReport {
        models: models.to_vec(),
        sessions_used: groups.iter().map(|g| g.participants.len()).sum(),
        sessions_excluded: excluded,
        accuracy,
        noise_ceiling: noise,
        noise_ceiling_mean: nc_mean,
        pairwise_targeted,
        pairwise_overall,
        similarity,
        similarity_ceiling,
        agreement_mean: if off.is_empty() { f64::NAN } else { mean(&off) },
        agreement,
    })
}

impl EvaluationReport {
    /// Figure-analog tables, one per file.
    pub fn tables(&self) -> Vec<(&'static str, Table)> {
        let mut acc = Table::new(&["model", "selection", "group", "accuracy"]);
        for a in &self.accuracy {
            for (g, v) in &a.per_group {
                acc.push([a.model.clone(), a.selection.clone(), g.to_string(), v.to_string()]);
            }
        }
        let mut nc = Table::new(&["group", "lower", "upper"]);
        for n in &self.noise_ceiling {
            nc.push([n.group.to_string(), n.lower.to_string(), n.upper.to_string()]);
        }
        let pw = |rows: &[PairwiseTest]| {
            let mut t = Table::new(&["model_a", "model_b", "mean_a", "mean_b", "statistic", "p", "p_adjusted", "significant", "groups"]);
            for r in rows {
                t.push([
                    r.model_a.clone(),
                    r.model_b.clone(),
                    r.mean_a.to_string(),
                    r.mean_b.to_string(),
                    r.statistic.to_string(),
                    r.p_value.to_string(),
                    r.p_adjusted.to_string(),
                    r.significant.to_string(),
                    r.groups.to_string(),
                ]);
            }
            t
        };
        let mut sim = Table::new(&["model", "group", "signed_rank_cosine"]);
        for s in &self.similarity {
            for (g, v) in &s.per_group {
                sim.push([s.model.clone(), g.to_string(), v.to_string()]);
            }
        }
        let mut header = vec!["model".to_string()];
        header.extend(self.models.iter().cloned());
        let mut agr = Table::new(&header);
        for (m, row) in self.models.iter().zip(&self.agreement) {
            agr.push(std::iter::once(m.clone()).chain(row.iter().map(|v| v.to_string())));
        }
        vec![
            ("accuracy.tsv", acc),
            ("noise_ceiling.tsv", nc),
            ("pairwise_targeted.tsv", pw(&self.pairwise_targeted)),
            ("pairwise_overall.tsv", pw(&self.pairwise_overall)),
            ("similarity.tsv", sim),
            ("agreement.tsv", agr),
        ]
    }

    pub fn mean_accuracy(&self, model: &str, selection: &str) -> Option<f64> {
        self.accuracy.iter().find(|a| a.model == model && a.selection == selection).map(|a| a.mean)
    }
}

/// Sorted copy, for order-independent comparisons in reports.
pub fn sorted<T: Real>(v: &[T]) -> Vec<T> {
    let mut s = v.to_vec();
    s.sort_by(total_cmp);
    s
}

/// Probability that a uniformly guessing participant fails the control
/// filter: `1 - P(at least 11 of 12 correct)`.
pub fn guessing_rejection_probability(total: u64, pass: u64) -> f64 {
    let b = Binomial::new(0.5, total).expect("valid binomial");
    let accept: f64 = (pass..=total).map(|k| b.pmf(k)).sum();
    1.0 - accept
}
