mod support;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use contstim_core::bundled;
use contstim_core::corpus::{Origin, RepeatableWords, Sentence};
use contstim_core::ngram::NgramModel;
use contstim_core::scoring::toy::ConditionalTableScorer;
use contstim_core::scoring::*;
use contstim_core::synthesis::*;
use contstim_core::synthesis::Strategy;
type Result<T, E = ScoreError> = std::result::Result<T, E>;
use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles;

struct Mini {
    vocab: Vec<String>,
    repeatable: RepeatableWords,
    naturals: Vec<Sentence>,
    bigram: Arc<NgramModel>,
    trigram: Arc<NgramModel>,
}

fn mini() -> Mini {
    let v = bundled::vocabulary();
    let pool = bundled::pool(&v);
    Mini {
        vocab: v.words().map(str::to_string).collect(),
        repeatable: bundled::repeatable_words(),
        naturals: pool.sentences,
        bigram: Arc::new(bundled::ngram_model(2, &v)),
        trigram: Arc::new(bundled::ngram_model(3, &v)),
    }
}

fn handle(name: &str, m: &Arc<NgramModel>) -> ScorerHandle {
    ScorerHandle::with_defaults(Arc::new(NgramScorer::new(name, m.clone())), 1, 0).unwrap()
}

/// Direct conditional-probability sum with explicit begin-of-sentence pads.
fn oracle_score(m: &NgramModel, words: &[String]) -> f64 {
    let k = m.order() - 1;
    let mut total = 0.0;
    for i in 0..words.len() {
        let ctx: Vec<Option<&str>> = (0..k).map(|j| (i + j).checked_sub(k).map(|p| words[p].as_str())).collect();
        total += m.conditional_logprob(&ctx, &words[i]).unwrap();
    }
    total
}

fn words(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn accepted_moves_match_the_exhaustive_oracle() {
    let m = mini();
    let (h2, h3) = (handle("2gram", &m.bigram), handle("3gram", &m.trigram));
    let rep = |w: &str| m.repeatable.contains(w);
    let s2 = |w: &[String]| oracle_score(&m.bigram, w);
    let s3 = |w: &[String]| oracle_score(&m.trigram, w);
    let cfg = SynthesisConfig { seed: 17, ..SynthesisConfig::default() };
    let mut positive = 0;
    let picks: Vec<&Sentence> = m.naturals.iter().step_by(m.naturals.len() / 12).take(12).collect();
    for n in &picks {
        let t = generate_triplet(n, &h2, &h3, &m.vocab, &m.repeatable, &cfg).unwrap();
        t.check_invariants().unwrap();
        assert!(t.trace1.iter().all(|s| s.strategy == Strategy::Exhaustive));
        // s1 lowers the 2-gram score under the 3-gram constraint.
        let end1 = oracles::replay_trace(&n.words, &t.trace1, &m.vocab, &rep, &s2, &s3).unwrap();
        let end2 = oracles::replay_trace(&n.words, &t.trace2, &m.vocab, &rep, &s3, &s2).unwrap();
        assert_eq!(end1, t.s1.words);
        assert_eq!(end2, t.s2.words);
        assert!((t.scores.s1_m1 - s2(&t.s1.words)).abs() < 1e-9);
        assert!((t.scores.s2_m2 - s3(&t.s2.words)).abs() < 1e-9);
        assert!(t.controversiality() >= 0.0);
        if t.controversiality() > 0.0 {
            positive += 1;
        }
        // Exhaustive search ends at a local optimum.
        for (start, s, rej, acc) in [(&n.words, &t.s1.words, &s2 as &dyn Fn(&[String]) -> f64, &s3 as &dyn Fn(&[String]) -> f64), (&n.words, &t.s2.words, &s3, &s2)] {
            let bound = acc(start);
            for p in 0..8 {
                assert!(oracles::best_move(s, p, &m.vocab, &rep, rej, acc, bound).is_none(), "improving move left at position {p}");
            }
        }
    }
    assert!(positive >= picks.len() * 9 / 10);
}

#[test]
fn positions_stay_balanced_along_the_trace() {
    let m = mini();
    let (h2, h3) = (handle("2gram", &m.bigram), handle("3gram", &m.trigram));
    for seed in 0..4 {
        let cfg = SynthesisConfig { seed, ..SynthesisConfig::default() };
        let r = synthesize_sentence(&m.naturals[seed as usize], &h3, &h2, &m.vocab, &m.repeatable, &cfg, "x").unwrap();
        let mut counts = [0usize; 8];
        for step in &r.trace {
            counts[step.position] += 1;
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        let objectives: Vec<f64> = r.trace.iter().filter(|s| s.new_word.is_some()).map(|s| s.objective).collect();
        assert!(objectives.windows(2).all(|w| w[1] < w[0]));
        assert!(r.trace.iter().all(|s| s.constraint >= r.bound));
        assert!(r.objective <= r.start_objective);
        // Ends on a failure run covering every position.
        let tail: std::collections::HashSet<usize> =
            r.trace.iter().rev().take_while(|s| s.new_word.is_none()).map(|s| s.position).collect();
        assert_eq!(tail.len(), 8);
    }
}

#[test]
fn identical_models_leave_the_sentence_unchanged() {
    let m = mini();
    let h = handle("2gram", &m.bigram);
    let n = &m.naturals[3];
    let r = synthesize_sentence(n, &h, &h, &m.vocab, &m.repeatable, &SynthesisConfig::default(), "same").unwrap();
    assert_eq!(r.sentence.words, n.words);
    assert_eq!(r.sentence.origin, Origin::Natural);
    assert!(r.trace.iter().all(|s| s.new_word.is_none()));
    assert_eq!(r.trace.len(), 8);
}

#[test]
fn triplets_are_seed_deterministic() {
    let m = mini();
    let (h2, h3) = (handle("2gram", &m.bigram), handle("3gram", &m.trigram));
    let n = &m.naturals[10];
    let mut seeds = std::collections::HashSet::new();
    for seed in 0..10 {
        let cfg = SynthesisConfig { seed, ..SynthesisConfig::default() };
        let a = generate_triplet(n, &h2, &h3, &m.vocab, &m.repeatable, &cfg).unwrap();
        let b = generate_triplet(n, &h2, &h3, &m.vocab, &m.repeatable, &cfg).unwrap();
        assert_eq!(a, b);
        a.check_invariants().unwrap();
        seeds.insert(a.seed);
    }
    assert_eq!(seeds.len(), 10);
}

#[test]
fn enumeration_counts_and_best_candidate() {
    let m = mini();
    let h = handle("3gram", &m.trigram);
    let n = &m.naturals[0];
    let no_repeats = RepeatableWords::empty();
    for p in 0..8 {
        let cands = enumerate_replacements(&h, &n.words, p, &m.vocab, &no_repeats).unwrap();
        // The eight words are distinct: the seven others are excluded, and
        // so is the current one.
        assert_eq!(cands.len(), m.vocab.len() - 8);
        let best = cands.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        let mut loop_best = (String::new(), f64::NEG_INFINITY);
        for w in &m.vocab {
            if n.words.contains(w) {
                continue;
            }
            let mut s = n.words.clone();
            s[p] = w.clone();
            let lp = oracle_score(&m.trigram, &s);
            if lp > loop_best.1 {
                loop_best = (w.clone(), lp);
            }
        }
        assert!((best.1 - loop_best.1).abs() < 1e-9);
    }
}

#[test]
fn repeatable_words_are_still_offered() {
    let s = words(&["the", "cat", "saw", "the", "dog", "near", "the", "tree"]);
    let vocab = words(&["the", "cat", "saw", "dog", "near", "tree", "bird"]);
    let legal = legal_replacements(&s, 1, &vocab, &RepeatableWords::new(["the"]));
    assert_eq!(legal, words(&["the", "bird"]));
}

fn table_scorer(n: usize, weight: impl Fn(usize) -> f64) -> (Vec<String>, ScorerHandle) {
    let vocab: Vec<String> = (0..n).map(|i| format!("t{i:02}")).collect();
    let s = ConditionalTableScorer::new("table", vocab.clone(), |_, w| weight(w[1..].parse().unwrap()));
    (vocab, ScorerHandle::with_defaults(Arc::new(s), 1, 0).unwrap())
}

#[test]
fn threshold_relaxes_until_the_floor_is_met() {
    // Three likely words; the rest sit near log p = -12.
    let (vocab, h) = table_scorer(30, |i| if i < 3 { 1.0 } else { 3.0 * (-12f64).exp() });
    let s: Vec<String> = vocab[20..28].to_vec();
    let legal = legal_replacements(&s, 4, &vocab, &RepeatableWords::empty());
    let cfg = SynthesisConfig::default();
    let lps = h.scorer().next_word_logprobs(&s[..4], &legal).unwrap();
    assert_eq!(lps.iter().filter(|&&lp| lp >= -10.0).count(), 3);
    let (kept, t) = threshold_pruned_candidates(&h, &s, 4, &legal, &cfg).unwrap();
    assert_eq!(t, -15.0);
    assert!(kept.len() >= 10);
}

#[test]
fn uniform_model_passes_everything_at_the_first_threshold() {
    let (vocab, h) = table_scorer(40, |_| 1.0);
    let s: Vec<String> = vocab[..8].to_vec();
    let legal = legal_replacements(&s, 0, &vocab, &RepeatableWords::empty());
    let (kept, t) = threshold_pruned_candidates(&h, &s, 0, &legal, &SynthesisConfig::default()).unwrap();
    assert_eq!((kept, t), (legal, -10.0));
}

#[test]
fn pruned_candidates_are_a_subset_with_identical_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w: Vec<f64> = (0..60).map(|_| (-rng.gen_range(0.0..20.0f64)).exp()).collect();
    let (vocab, h) = table_scorer(60, |i| w[i]);
    let s: Vec<String> = vocab[30..38].to_vec();
    let cfg = SynthesisConfig { unidirectional_candidate_floor: 15, ..SynthesisConfig::default() };
    for p in 0..8 {
        let pruned = threshold_pruned_replacements(&h, &s, p, &vocab, &RepeatableWords::empty(), &cfg).unwrap();
        let full = enumerate_replacements(&h, &s, p, &vocab, &RepeatableWords::empty()).unwrap();
        assert!(pruned.len() >= 15 && pruned.len() <= full.len());
        for (w, lp) in &pruned {
            let (_, f) = full.iter().find(|(fw, _)| fw == w).unwrap();
            assert_eq!(lp, f);
        }
    }
}

#[test]
fn pruning_requires_a_left_to_right_model() {
    let joint = contstim_core::scoring::toy::JointToyScorer::new(
        "joint",
        ScorerKind::Bidirectional,
        contstim_core::scoring::toy::ExplicitJoint::random(words(&["a", "b"]), 2, 1.0, 0),
    );
    let h = ScorerHandle::with_defaults(Arc::new(joint), 2, 0).unwrap();
    let s = words(&["a", "b"]);
    let err = threshold_pruned_candidates(&h, &s, 0, &words(&["b"]), &SynthesisConfig::default()).unwrap_err();
    assert!(matches!(err, SynthesisError::Score(ScoreError::Capability { .. })));
}

/// Bidirectional stub with a hand-set link between masked completion and
/// sentence scores. A one-mask query for token `t` returns `g[t]` plus
/// `k[r]` for every revealed token `r`, so for the word at one position
/// the completion score is `g[w] + const` and the pseudo-log-likelihood
/// is `g[w] + (L - 1) k[w] + const`.
struct Linked {
    info: ScorerInfo,
    g: Vec<f64>,
    k: Vec<f64>,
}

impl Linked {
    /// Completion scores `x` and target sentence scores `y` per word.
    fn new(x: &[f64], y: &[f64], len: usize) -> Self {
        let k = x.iter().zip(y).map(|(x, y)| (y - x) / (len - 1) as f64 - 10.0).collect();
        let info = ScorerInfo {
            name: "linked".into(),
            kind: ScorerKind::Bidirectional,
            transport: Transport::InProcess,
            whitespace_convention: WhitespaceConvention::None,
            capabilities: Capabilities::MASKED,
            token_inventory_size: x.len(),
        };
        Self { info, g: x.iter().map(|v| v - 30.0).collect(), k }
    }

    fn id(&self, w: &str) -> Result<usize, ScoreError> {
        w.strip_prefix('t').and_then(|d| d.parse().ok()).filter(|&i: &usize| i < self.g.len()).ok_or_else(|| ScoreError::Input(w.into()))
    }
}

impl LanguageScorer for Linked {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn tokenize(&self, word: &str) -> Result<Vec<String>, ScoreError> {
        self.id(word)?;
        Ok(vec![word.to_string()])
    }

    fn masked_logprobs(&self, queries: &[MaskedQuery]) -> Result<Vec<f64>, ScoreError> {
        queries
            .iter()
            .map(|q| {
                let mut v = self.g[self.id(&q.token)?];
                for r in q.template.iter().flatten() {
                    v += self.k[self.id(r)?];
                }
                Ok(v)
            })
            .collect()
    }
}

fn linked_handle(x: &[f64], y: &[f64]) -> ScorerHandle {
    ScorerHandle::new("linked", Arc::new(Linked::new(x, y, 8)), Estimator::PseudoLogLikelihood).unwrap()
}

#[test]
fn affine_regression_finds_the_best_candidate_at_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let v = 40;
    let x: Vec<f64> = (0..v).map(|_| rng.gen_range(-15.0..-1.0)).collect();
    let y: Vec<f64> = x.iter().map(|x| 2.0 * x - 5.0).collect();
    let reject = linked_handle(&x, &y);
    let weights: Vec<f64> = (0..v).map(|_| rng.gen_range(0.1..1.0)).collect();
    let (vocab, accept) = table_scorer(v, |i| weights[i]);
    let s: Vec<String> = vocab[10..18].to_vec();
    let bound = accept.log_prob(&s).unwrap();
    let obj = Objective { reject: &reject, accept: &accept, bound };
    let current = (reject.log_prob(&s).unwrap(), bound);
    let rep = |_: &str| false;
    let rj = |w: &[String]| reject.log_prob(w).unwrap();
    let ac = |w: &[String]| accept.log_prob(w).unwrap();
    let mut hits = 0;
    for p in 0..8 {
        let legal = legal_replacements(&s, p, &vocab, &RepeatableWords::empty());
        let out = regression_guided_replacement(&obj, &s, p, &legal, current, &SynthesisConfig::default()).unwrap();
        let best = oracles::best_move(&s, p, &vocab, &rep, &rj, &ac, bound);
        match (&out.accepted, &best) {
            (Some((w, o, _)), Some((bw, bo))) => {
                assert_eq!(w, bw);
                assert!((o - bo).abs() < 1e-9);
                assert!(out.true_evaluations <= 1);
                hits += 1;
            }
            (None, None) => {}
            other => panic!("position {p}: {other:?}"),
        }
    }
    assert!(hits > 0);
}

#[test]
fn misleading_regression_gives_up_after_the_budget() {
    // One far-off word with a terrible sentence score drags the fitted
    // line steeply downwards, so the cluster of high-completion words keeps
    // looking like an improvement; none of them is.
    let v = 40;
    let mut x: Vec<f64> = (0..v).map(|i| -3.0 + (i as f64) / (v - 1) as f64).collect();
    let mut y = vec![0.5; v];
    x[0] = -20.0;
    y[0] = 100.0;
    let cur = 20;
    x[cur] = -10.0;
    y[cur] = 0.0;
    let reject = linked_handle(&x, &y);
    let (vocab, accept) = table_scorer(v, |_| 1.0);
    let mut s: Vec<String> = (0..8).map(|i| vocab[30 + i].clone()).collect();
    s[3] = vocab[cur].clone();
    let bound = accept.log_prob(&s).unwrap();
    let obj = Objective { reject: &reject, accept: &accept, bound };
    let current = (reject.log_prob(&s).unwrap(), bound);
    let legal = legal_replacements(&s, 3, &vocab, &RepeatableWords::empty());
    let rj = |w: &[String]| reject.log_prob(w).unwrap();
    let ac = |w: &[String]| accept.log_prob(w).unwrap();
    assert!(oracles::best_move(&s, 3, &vocab, &|_| false, &rj, &ac, bound).is_none());
    let cfg = SynthesisConfig::default();
    let out = regression_guided_replacement(&obj, &s, 3, &legal, current, &cfg).unwrap();
    assert_eq!(out.accepted, None);
    assert_eq!(out.true_evaluations, cfg.bidirectional_search_budget);
}

#[test]
fn regression_path_accepts_only_true_improvements() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = 30;
    let x: Vec<f64> = (0..v).map(|_| rng.gen_range(-15.0..-1.0)).collect();
    let y: Vec<f64> = x.iter().map(|x| x + rng.gen_range(-3.0..3.0)).collect();
    let reject = linked_handle(&x, &y);
    let (vocab, accept) = table_scorer(v, |i| 1.0 + i as f64);
    let n = Sentence::unchecked("n", vocab[5..13].to_vec(), Origin::Natural);
    let r = synthesize_sentence(&n, &accept, &reject, &vocab, &RepeatableWords::empty(), &SynthesisConfig::default(), "s").unwrap();
    assert!(r.trace.iter().all(|s| s.strategy == Strategy::RegressionGuided));
    let mut last = r.start_objective;
    for step in r.trace.iter().filter(|s| s.new_word.is_some()) {
        assert!(step.objective < last && step.constraint >= r.bound);
        last = step.objective;
    }
    assert!((reject.log_prob(&r.sentence.words).unwrap() - r.objective).abs() < 1e-9);
}

/// Unidirectional wrapper that fails once a call budget is spent.
struct Flaky {
    inner: NgramScorer,
    left: AtomicUsize,
}

impl LanguageScorer for Flaky {
    fn info(&self) -> &ScorerInfo {
        self.inner.info()
    }

    fn next_word_logprobs(&self, prefix: &[String], words: &[String]) -> Result<Vec<f64>, ScoreError> {
        if self.left.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_err() {
            return Err(ScoreError::Transport("connection reset".into()));
        }
        self.inner.next_word_logprobs(prefix, words)
    }
}

#[test]
fn scorer_failure_aborts_with_the_trace_so_far() {
    let m = mini();
    let flaky = Flaky { inner: NgramScorer::new("flaky", m.bigram.clone()), left: AtomicUsize::new(20_000) };
    let reject = ScorerHandle::with_defaults(Arc::new(flaky), 1, 0).unwrap();
    let accept = handle("3gram", &m.trigram);
    let cfg = SynthesisConfig { force_exhaustive: true, ..SynthesisConfig::default() };
    match synthesize_sentence(&m.naturals[1], &accept, &reject, &m.vocab, &m.repeatable, &cfg, "x") {
        Err(SynthesisError::Scoring { visits, trace, source }) => {
            assert_eq!(trace.len(), visits);
            assert!(visits > 0);
            assert!(source.is_retryable());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        SynthesisConfig { max_consecutive_failures: 0, ..SynthesisConfig::default() },
        SynthesisConfig { unidirectional_logprob_threshold: 1.0, ..SynthesisConfig::default() },
        SynthesisConfig { threshold_relax_step: 0.0, ..SynthesisConfig::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(SynthesisError::Config(_))));
    }
}

proptest! {
    #[test]
    fn controversiality_identity_and_monotonicity(n1 in -80.0..-10.0f64, n2 in -80.0..-10.0f64, d1 in 0.0..30.0f64, d2 in 0.0..30.0f64, e in 0.01..5.0f64) {
        let same = TripletScores { n_m1: n1, n_m2: n2, s1_m1: n1, s1_m2: n2, s2_m1: n1, s2_m2: n2 };
        prop_assert_eq!(controversiality(&same), 0.0);
        let s = TripletScores { s1_m1: n1 - d1, s2_m2: n2 - d2, ..same };
        prop_assert!((controversiality(&s) - (d1 + d2)).abs() < 1e-9);
        let lower = TripletScores { s1_m1: s.s1_m1 - e, ..s };
        prop_assert!(controversiality(&lower) > controversiality(&s));
    }

    #[test]
    fn balanced_order_prefixes(len in 1usize..12, seed in any::<u64>()) {
        let mut counts = vec![0usize; len];
        for p in BalancedPositions::new(len, seed).take(len * 5 + 3) {
            counts[p] += 1;
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }
}
