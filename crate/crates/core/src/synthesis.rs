//! Synthetic controversial sentences by constrained hill-climbing.
//!
//! Starting from a natural sentence `n`, single-word replacements are
//! accepted when they strictly lower `log p(s | reject)` while keeping
//! `log p(s | accept) >= log p(n | accept)`. How candidate replacements are
//! found depends on the models involved:
//!
//! * n-gram models are cheap, so every legal word is scored exactly;
//! * unidirectional models restrict the sweep to words whose conditional
//!   log probability after the prefix clears a threshold;
//! * bidirectional models rank candidates with a linear regression from the
//!   masked completion log probability to the sentence log probability and
//!   only score the most promising ones.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_word, Origin, RepeatableWords, Sentence};
use crate::num::{mean, Real};
use crate::scoring::{completion_logprobs, ScoreError, ScorerHandle, ScorerKind};
use crate::seed;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("scoring failed after {visits} visits: {source}")]
    Scoring {
        visits: usize,
        trace: Vec<TraceStep>,
        #[source]
        source: ScoreError,
    },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

pub type Result<T, E = SynthesisError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub max_consecutive_failures: usize,
    pub bidirectional_search_budget: usize,
    pub unidirectional_candidate_floor: usize,
    pub unidirectional_logprob_threshold: f64,
    pub threshold_relax_step: f64,
    /// Score every legal word exactly, whatever the model kinds.
    pub force_exhaustive: bool,
    /// Hard cap on visited positions, as a guard against pathological
    /// scorers.
    pub max_visits: usize,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            max_consecutive_failures: 8,
            bidirectional_search_budget: 5,
            unidirectional_candidate_floor: 10,
            unidirectional_logprob_threshold: -10.0,
            threshold_relax_step: 5.0,
            force_exhaustive: false,
            max_visits: 10_000,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthesisError::Config(m.to_string()));
        if self.max_consecutive_failures == 0 || self.bidirectional_search_budget == 0 || self.unidirectional_candidate_floor == 0 {
            return bad("counts must be positive");
        }
        if self.unidirectional_logprob_threshold > 0.0 {
            return bad("threshold must not be positive");
        }
        if self.threshold_relax_step <= 0.0 {
            return bad("relaxation step must be positive");
        }
        Ok(())
    }
}

/// Least-squares line through `(completion logprob, sentence logprob)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit<T> {
    pub beta1: T,
    pub beta0: T,
    pub observations: Vec<(T, T)>,
}

impl<T: Real> RegressionFit<T> {
    pub fn new(observations: Vec<(T, T)>) -> Self {
        let mut f = Self { beta1: T::one(), beta0: T::zero(), observations };
        f.refit();
        f
    }

    pub fn observe(&mut self, x: T, y: T) {
        self.observations.push((x, y));
        self.refit();
    }

    /// Ordinary least squares; with fewer than two distinct x values the
    /// slope is 1 and the line passes through the mean point.
    pub fn refit(&mut self) {
        if self.observations.is_empty() {
            return;
        }
        let xs: Vec<T> = self.observations.iter().map(|o| o.0).collect();
        let ys: Vec<T> = self.observations.iter().map(|o| o.1).collect();
        let (mx, my) = (mean(&xs), mean(&ys));
        let sxx: T = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
        let sxy: T = xs.iter().zip(&ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
        self.beta1 = if sxx > T::zero() { sxy / sxx } else { T::one() };
        self.beta0 = my - self.beta1 * mx;
    }

    pub fn predict(&self, x: T) -> T {
        self.beta1 * x + self.beta0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Exhaustive,
    ThresholdPruned,
    RegressionGuided,
}

/// One visited position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub visit: usize,
    pub position: usize,
    pub previous_word: String,
    /// Replacement word when the move was accepted.
    pub new_word: Option<String>,
    /// Objective and constraint values after the visit.
    pub objective: f64,
    pub constraint: f64,
    pub candidates: usize,
    pub true_evaluations: usize,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub sentence: Sentence,
    pub objective: f64,
    pub constraint: f64,
    /// `log p(n | accept)`, the constraint's lower bound.
    pub bound: f64,
    pub start_objective: f64,
    pub trace: Vec<TraceStep>,
}

/// Words that may replace position `position` of `words`: vocabulary words
/// other than the current one that do not create a forbidden repetition.
pub fn legal_replacements(words: &[String], position: usize, vocab: &[String], repeatable: &RepeatableWords) -> Vec<String> {
    let current = normalize_word(&words[position]);
    let others: Vec<String> = words.iter().enumerate().filter(|(i, _)| *i != position).map(|(_, w)| normalize_word(w)).collect();
    vocab
        .iter()
        .filter(|w| {
            let n = normalize_word(w);
            n != current && (repeatable.contains(&n) || !others.contains(&n))
        })
        .cloned()
        .collect()
}

fn replaced(words: &[String], position: usize, w: &str) -> Vec<String> {
    let mut v = words.to_vec();
    v[position] = w.to_string();
    v
}

/// Exact sentence log probability of every legal replacement.
pub fn enumerate_replacements(
    m: &ScorerHandle,
    words: &[String],
    position: usize,
    vocab: &[String],
    repeatable: &RepeatableWords,
) -> Result<Vec<(String, f64)>> {
    legal_replacements(words, position, vocab, repeatable)
        .into_par_iter()
        .map(|w| {
            let lp = m.log_prob(&replaced(words, position, &w))?;
            Ok((w, lp))
        })
        .collect()
}

/// Legal replacements whose next-word log probability after the prefix is
/// at least the threshold, relaxing the threshold until the floor is met.
/// Returns the surviving words and the threshold that admitted them.
pub fn threshold_pruned_candidates(
    m: &ScorerHandle,
    words: &[String],
    position: usize,
    legal: &[String],
    cfg: &SynthesisConfig,
) -> Result<(Vec<String>, f64)> {
    if m.kind() != ScorerKind::Unidirectional && m.kind() != ScorerKind::Ngram {
        return Err(ScoreError::Capability { scorer: m.name().to_string(), op: "next-word pruning" }.into());
    }
    let lps = m.scorer().next_word_logprobs(&words[..position], legal)?;
    let floor = cfg.unidirectional_candidate_floor.min(legal.len());
    let mut t = cfg.unidirectional_logprob_threshold;
    loop {
        let kept: Vec<String> = legal.iter().zip(&lps).filter(|(_, &lp)| lp >= t).map(|(w, _)| w.clone()).collect();
        if kept.len() >= floor {
            return Ok((kept, t));
        }
        t -= cfg.threshold_relax_step;
    }
}

/// Threshold-pruned candidates with their exact sentence log probability.
pub fn threshold_pruned_replacements(
    m: &ScorerHandle,
    words: &[String],
    position: usize,
    vocab: &[String],
    repeatable: &RepeatableWords,
    cfg: &SynthesisConfig,
) -> Result<Vec<(String, f64)>> {
    let legal = legal_replacements(words, position, vocab, repeatable);
    let (kept, _) = threshold_pruned_candidates(m, words, position, &legal, cfg)?;
    kept.into_iter().map(|w| Ok((w.clone(), m.log_prob(&replaced(words, position, &w))?))).collect()
}

/// The two models of one synthesis run.
pub struct Objective<'a> {
    pub reject: &'a ScorerHandle,
    pub accept: &'a ScorerHandle,
    pub bound: f64,
}

impl Objective<'_> {
    fn eval(&self, words: &[String]) -> Result<(f64, f64), ScoreError> {
        Ok((self.reject.log_prob(words)?, self.accept.log_prob(words)?))
    }

    fn is_bidirectional(&self) -> bool {
        self.reject.kind() == ScorerKind::Bidirectional || self.accept.kind() == ScorerKind::Bidirectional
    }

    fn strategy(&self, cfg: &SynthesisConfig) -> Strategy {
        if cfg.force_exhaustive {
            Strategy::Exhaustive
        } else if self.is_bidirectional() {
            Strategy::RegressionGuided
        } else if self.reject.kind() == ScorerKind::Unidirectional || self.accept.kind() == ScorerKind::Unidirectional {
            Strategy::ThresholdPruned
        } else {
            Strategy::Exhaustive
        }
    }
}

/// Outcome of searching one position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Accepted word with its objective and constraint values.
    pub accepted: Option<(String, f64, f64)>,
    pub candidates: usize,
    pub true_evaluations: usize,
}

/// Best feasible, strictly improving candidate among exactly scored ones.
fn best_exact(obj: &Objective<'_>, words: &[String], position: usize, candidates: &[String], current: f64) -> Result<StepOutcome> {
    let scored = candidates
        .par_iter()
        .map(|w| obj.eval(&replaced(words, position, w)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, &(o, c)) in scored.iter().enumerate() {
        if c >= obj.bound && o < current && best.is_none_or(|(_, bo, _)| o < bo) {
            best = Some((i, o, c));
        }
    }
    Ok(StepOutcome {
        accepted: best.map(|(i, o, c)| (candidates[i].clone(), o, c)),
        candidates: candidates.len(),
        true_evaluations: candidates.len(),
    })
}

/// Regression-guided search at one position (at least one bidirectional
/// model). Non-bidirectional models are scored exactly for every
/// candidate; bidirectional ones are predicted from their completion log
/// probabilities by a per-model line fitted on truly scored sentences.
pub fn regression_guided_replacement(
    obj: &Objective<'_>,
    words: &[String],
    position: usize,
    legal: &[String],
    current: (f64, f64),
    cfg: &SynthesisConfig,
) -> Result<StepOutcome> {
    if legal.is_empty() {
        return Ok(StepOutcome { accepted: None, candidates: 0, true_evaluations: 0 });
    }
    let current_word = words[position].clone();
    let handles = [obj.reject, obj.accept];
    // Per model: either exact values or (completion logprobs, fit).
    enum Side {
        Exact(Vec<f64>),
        Predicted { x: Vec<f64>, fit: RegressionFit<f64> },
    }
    let mut sides = Vec::with_capacity(2);
    for (k, h) in handles.iter().enumerate() {
        if h.kind() == ScorerKind::Bidirectional {
            let mut all = legal.to_vec();
            all.push(current_word.clone());
            let mut x = completion_logprobs(h.scorer().as_ref(), words, position, &all)?;
            let x_current = x.pop().expect("current word scored");
            let y_current = if k == 0 { current.0 } else { current.1 };
            sides.push(Side::Predicted { x, fit: RegressionFit::new(vec![(x_current, y_current)]) });
        } else {
            let ys = legal.par_iter().map(|w| h.log_prob(&replaced(words, position, w))).collect::<Result<Vec<_>, _>>()?;
            sides.push(Side::Exact(ys));
        }
    }
    let mut known: HashMap<usize, (f64, f64)> = HashMap::new();
    let observe = |sides: &mut Vec<Side>, i: usize, vals: (f64, f64)| {
        for (k, side) in sides.iter_mut().enumerate() {
            if let Side::Predicted { x, fit, .. } = side {
                fit.observe(x[i], if k == 0 { vals.0 } else { vals.1 });
            }
        }
    };
    // Anchor points: argmax and argmin completion of each bidirectional model.
    let mut anchors = Vec::new();
    for side in &sides {
        if let Side::Predicted { x, .. } = side {
            let by = |better: fn(f64, f64) -> bool| {
                (0..x.len()).fold(0, |b, i| if better(x[i], x[b]) { i } else { b })
            };
            anchors.push(by(|a, b| a > b));
            anchors.push(by(|a, b| a < b));
        }
    }
    for i in anchors {
        if let std::collections::hash_map::Entry::Vacant(e) = known.entry(i) {
            let vals = obj.eval(&replaced(words, position, &legal[i]))?;
            e.insert(vals);
            observe(&mut sides, i, vals);
        }
    }
    let predict = |sides: &[Side], i: usize, k: usize| match &sides[k] {
        Side::Exact(v) => v[i],
        Side::Predicted { x, fit, .. } => fit.predict(x[i]),
    };
    let improving = |&(o, c): &(f64, f64)| c >= obj.bound && o < current.0;
    let mut failures = 0;
    let mut evaluations = 0;
    loop {
        // A truly scored anchor may already be an improving move.
        let best_known = known.iter().filter(|(_, v)| improving(v)).min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(b.0)));
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..legal.len() {
            if known.contains_key(&i) {
                continue;
            }
            let (o, c) = (predict(&sides, i, 0), predict(&sides, i, 1));
            if c >= obj.bound && o < current.0 && pick.is_none_or(|(_, bo)| o < bo) {
                pick = Some((i, o));
            }
        }
        if let Some((&i, &(o, c))) = best_known {
            if pick.is_none_or(|(_, po)| o <= po) {
                return Ok(StepOutcome { accepted: Some((legal[i].clone(), o, c)), candidates: legal.len(), true_evaluations: evaluations });
            }
        }
        let Some((i, _)) = pick else {
            return Ok(StepOutcome { accepted: None, candidates: legal.len(), true_evaluations: evaluations });
        };
        let vals = obj.eval(&replaced(words, position, &legal[i]))?;
        evaluations += 1;
        if improving(&vals) {
            return Ok(StepOutcome {
                accepted: Some((legal[i].clone(), vals.0, vals.1)),
                candidates: legal.len(),
                true_evaluations: evaluations,
            });
        }
        known.insert(i, vals);
        observe(&mut sides, i, vals);
        failures += 1;
        if failures >= cfg.bidirectional_search_budget {
            return Ok(StepOutcome { accepted: None, candidates: legal.len(), true_evaluations: evaluations });
        }
    }
}

/// Position visiting order: every position is visited once per round, in
/// a freshly shuffled order each round.
pub struct BalancedPositions {
    len: usize,
    rng: rand_chacha::ChaCha8Rng,
    round: Vec<usize>,
}

impl BalancedPositions {
    pub fn new(len: usize, seed: u64) -> Self {
        Self { len, rng: seed::rng(seed), round: Vec::new() }
    }
}

impl Iterator for BalancedPositions {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.round.is_empty() {
            self.round = (0..self.len).collect();
            self.round.shuffle(&mut self.rng);
        }
        self.round.pop()
    }
}

/// Hill-climbs from `n` to lower `log p(s | reject)` while keeping
/// `log p(s | accept)` at or above its value for `n`.
pub fn synthesize_sentence(
    n: &Sentence,
    accept: &ScorerHandle,
    reject: &ScorerHandle,
    vocab: &[String],
    repeatable: &RepeatableWords,
    cfg: &SynthesisConfig,
    id: &str,
) -> Result<SynthesisResult> {
    cfg.validate()?;
    let bound = accept.log_prob(&n.words)?;
    let obj = Objective { reject, accept, bound };
    let strategy = obj.strategy(cfg);
    let mut words = n.words.clone();
    let start_objective = reject.log_prob(&words)?;
    let (mut cur_o, mut cur_c) = (start_objective, bound);
    let mut trace = Vec::new();
    let mut failures = 0;
    // Positions that failed since the last accepted move. A failure run
    // straddling two shuffled rounds can revisit a position before seeing
    // all of them, so the run only ends once it has covered
    // min(len, max_consecutive_failures) distinct positions.
    let mut failed_at = vec![false; words.len()];
    let must_cover = words.len().min(cfg.max_consecutive_failures);
    let positions = BalancedPositions::new(words.len(), cfg.seed);
    for (visit, position) in positions.enumerate() {
        let covered = failed_at.iter().filter(|&&f| f).count();
        if (failures >= cfg.max_consecutive_failures && covered >= must_cover) || visit >= cfg.max_visits {
            break;
        }
        let wrap = |source: SynthesisError, trace: &Vec<TraceStep>| match source {
            SynthesisError::Score(source) => SynthesisError::Scoring { visits: visit, trace: trace.clone(), source },
            other => other,
        };
        let legal = legal_replacements(&words, position, vocab, repeatable);
        let outcome = match strategy {
            Strategy::Exhaustive => best_exact(&obj, &words, position, &legal, cur_o),
            Strategy::ThresholdPruned => {
                let mut pool: Vec<String> = Vec::new();
                let mut run = || -> Result<StepOutcome> {
                    for h in [reject, accept] {
                        if h.kind() == ScorerKind::Unidirectional {
                            for w in threshold_pruned_candidates(h, &words, position, &legal, cfg)?.0 {
                                if !pool.contains(&w) {
                                    pool.push(w);
                                }
                            }
                        }
                    }
                    best_exact(&obj, &words, position, &pool, cur_o)
                };
                run()
            }
            Strategy::RegressionGuided => regression_guided_replacement(&obj, &words, position, &legal, (cur_o, cur_c), cfg),
        }
        .map_err(|e| wrap(e, &trace))?;
        let previous_word = words[position].clone();
        let new_word = match outcome.accepted {
            Some((w, o, c)) => {
                debug_assert!(o < cur_o && c >= bound);
                words[position] = w.clone();
                cur_o = o;
                cur_c = c;
                failures = 0;
                failed_at.iter_mut().for_each(|f| *f = false);
                Some(w)
            }
            None => {
                failures += 1;
                failed_at[position] = true;
                None
            }
        };
        trace.push(TraceStep {
            visit,
            position,
            previous_word,
            new_word,
            objective: cur_o,
            constraint: cur_c,
            candidates: outcome.candidates,
            true_evaluations: outcome.true_evaluations,
            strategy,
        });
    }
    let origin = if words == n.words { n.origin } else { Origin::Synthetic };
    Ok(SynthesisResult {
        sentence: Sentence::unchecked(id, words, origin),
        objective: cur_o,
        constraint: cur_c,
        bound,
        start_objective,
        trace,
    })
}

/// The six log probabilities of a triplet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletScores {
    pub n_m1: f64,
    pub n_m2: f64,
    pub s1_m1: f64,
    pub s1_m2: f64,
    pub s2_m1: f64,
    pub s2_m2: f64,
}

/// A natural sentence with two synthetic derivatives: `s1` lowers the
/// probability under `m1` while `m2` accepts it, and `s2` the reverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub n: Sentence,
    pub s1: Sentence,
    pub s2: Sentence,
    pub m1: String,
    pub m2: String,
    pub scores: TripletScores,
    pub seed: u64,
    pub trace1: Vec<TraceStep>,
    pub trace2: Vec<TraceStep>,
}

impl Triplet {
    /// Sum of the two models' log-probability drops from `n`.
    pub fn controversiality(&self) -> f64 {
        controversiality(&self.scores)
    }

    /// Accept constraints and never-worse objectives.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let s = &self.scores;
        if s.s1_m2 < s.n_m2 || s.s2_m1 < s.n_m1 {
            return Err(format!("triplet {}: accept constraint violated", self.n.id));
        }
        if s.s1_m1 > s.n_m1 || s.s2_m2 > s.n_m2 {
            return Err(format!("triplet {}: objective worse than the natural start", self.n.id));
        }
        Ok(())
    }
}

pub fn controversiality(s: &TripletScores) -> f64 {
    (s.n_m1 - s.s1_m1) + (s.n_m2 - s.s2_m2)
}

/// Synthesizes both derivatives of `n` for the model pair.
pub fn generate_triplet(
    n: &Sentence,
    m1: &ScorerHandle,
    m2: &ScorerHandle,
    vocab: &[String],
    repeatable: &RepeatableWords,
    cfg: &SynthesisConfig,
) -> Result<Triplet> {
    let base = seed::derive_str(cfg.seed, &format!("{}|{}|{}", n.id, m1.name(), m2.name()));
    let cfg1 = SynthesisConfig { seed: seed::derive(base, 1), ..cfg.clone() };
    let cfg2 = SynthesisConfig { seed: seed::derive(base, 2), ..cfg.clone() };
    let id = |k: u8| format!("{}~{}-{}~s{k}", n.id, m1.name(), m2.name());
    let r1 = synthesize_sentence(n, m2, m1, vocab, repeatable, &cfg1, &id(1))?;
    let r2 = synthesize_sentence(n, m1, m2, vocab, repeatable, &cfg2, &id(2))?;
    let scores = TripletScores {
        n_m1: r2.bound,
        n_m2: r1.bound,
        s1_m1: r1.objective,
        s1_m2: r1.constraint,
        s2_m1: r2.constraint,
        s2_m2: r2.objective,
    };
    Ok(Triplet {
        n: n.clone(),
        s1: r1.sentence,
        s2: r2.sentence,
        m1: m1.name().to_string(),
        m2: m2.name().to_string(),
        scores,
        seed: base,
        trace1: r1.trace,
        trace2: r2.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regression_degenerate_fit() {
        let mut f = RegressionFit::new(vec![(-2.0, -30.0)]);
        assert_eq!((f.beta1, f.beta0), (1.0, -28.0));
        f.observe(-2.0, -34.0);
        assert_eq!((f.beta1, f.beta0), (1.0, -30.0));
        f.observe(-4.0, -40.0);
        assert!(f.beta1 > 0.0);
    }

    #[test]
    fn regression_exact_line() {
        let f = RegressionFit::new(vec![(1.0f32, 5.0), (2.0, 7.0), (4.0, 11.0)]);
        assert!((f.beta1 - 2.0).abs() < 1e-6 && (f.beta0 - 3.0).abs() < 1e-6);
    }

    #[test]
    fn controversiality_arithmetic() {
        let s = TripletScores { n_m1: -50.0, s1_m1: -70.0, n_m2: -60.0, s2_m2: -75.0, s1_m2: -60.0, s2_m1: -50.0 };
        assert_eq!(controversiality(&s), 35.0);
    }

    #[test]
    fn balanced_positions_rounds() {
        let visits: Vec<usize> = BalancedPositions::new(8, 3).take(80).collect();
        for round in visits.chunks(8) {
            let mut r = round.to_vec();
            r.sort();
            assert_eq!(r, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn legal_replacements_respect_repetition() {
        let words: Vec<String> = "the cat saw the dog".split(' ').map(String::from).collect();
        let vocab: Vec<String> = ["the", "cat", "dog", "bird"].iter().map(|s| s.to_string()).collect();
        let rep = RepeatableWords::new(["the"]);
        assert_eq!(legal_replacements(&words, 1, &vocab, &rep), vec!["the".to_string(), "bird".to_string()]);
        assert_eq!(legal_replacements(&words, 1, &vocab, &RepeatableWords::empty()), vec!["bird".to_string()]);
    }
}
