use std::sync::Arc;
use std::time::Instant;

use contstim_core::bundled;
use contstim_core::scoring::toy::{ConditionalTableScorer, ExplicitJoint, Incoherent, MultiTokenToyScorer, WordLevelScorer, WordModel};
use contstim_core::scoring::{
    masked_word_logprob, percentile_rank, score_bidirectional, score_pll, score_unidirectional, Estimator, LanguageScorer, MaskClass,
    MaskedQuery, NgramScorer, PositionPermutation, ScoreError, ScorerHandle, ScorerKind, WordSlot,
};
use proptest::prelude::*;

fn words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Chain sum for one reveal order by direct single-slot queries.
fn chain_by_hand(m: &dyn LanguageScorer, sentence: &[String], order: &[usize]) -> f64 {
    let mut template: Vec<Option<String>> = vec![None; sentence.len()];
    let mut total = 0.0;
    for &p in order {
        let q = MaskedQuery { template: template.clone(), position: p, token: sentence[p].clone(), class: MaskClass::WholeWord };
        total += m.masked_logprobs(&[q]).unwrap()[0];
        template[p] = Some(sentence[p].clone());
    }
    total
}

#[test]
fn permutation_chains_of_a_coherent_joint_equal_the_joint() {
    let started = Instant::now();
    let joint = ExplicitJoint::random(words(4), 8, 3.0, 11);
    let m = WordLevelScorer::new("joint", ScorerKind::Bidirectional, joint);
    for s in [[0, 1, 2, 3, 0, 1, 2, 3], [3, 3, 3, 3, 3, 3, 3, 3], [2, 0, 1, 1, 3, 0, 2, 2]] {
        let sentence: Vec<String> = s.iter().map(|&i| format!("t{i}")).collect();
        let truth = m.model().joint_logprob(&sentence).unwrap();
        let r = score_bidirectional(&m, &sentence, 100, 5).unwrap();
        assert_eq!(r.per_permutation_logprobs.len(), 100);
        for v in &r.per_permutation_logprobs {
            assert!((v - truth).abs() < 1e-9, "{v} vs {truth}");
        }
        assert!((r.mean_logprob - truth).abs() < 1e-9);
        assert!(r.coefficient_of_variation < 1e-12);
    }
    assert!(started.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn unidirectional_and_bidirectional_agree_on_one_joint() {
    let uni = WordLevelScorer::new("u", ScorerKind::Unidirectional, ExplicitJoint::random(words(3), 5, 2.0, 4));
    let bi = WordLevelScorer::new("b", ScorerKind::Bidirectional, ExplicitJoint::random(words(3), 5, 2.0, 4));
    for code in 0..3usize.pow(5) {
        let s: Vec<String> = (0..5).map(|i| format!("t{}", (code / 3usize.pow(i)) % 3)).collect();
        let a = score_unidirectional(&uni, &s).unwrap();
        let b = score_bidirectional(&bi, &s, 7, 1).unwrap().mean_logprob;
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn incoherent_scorer_matches_exhaustive_three_slot_oracle() {
    let m = WordLevelScorer::new("incoherent", ScorerKind::Bidirectional, Incoherent::new(words(3), 4.0, 9));
    let s = strings(&["t0", "t2", "t1"]);
    let all = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let exact: Vec<f64> = all.iter().map(|o| chain_by_hand(&m, &s, o)).collect();
    let spread = exact.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - exact.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread > 1e-3, "incoherent chains should disagree");
    let oracle_mean = exact.iter().sum::<f64>() / 6.0;

    let n = 2000;
    let r = score_bidirectional(&m, &s, n, 21).unwrap();
    // Each sampled permutation reproduces its own hand-computed chain.
    for (p, v) in PositionPermutation::set(3, n, 21).iter().zip(&r.per_permutation_logprobs) {
        assert!((chain_by_hand(&m, &s, p.order()) - v).abs() < 1e-12);
    }
    let mean = r.mean_logprob;
    let sd = (r.per_permutation_logprobs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    assert!((mean - oracle_mean).abs() <= 3.0 * sd / (n as f64).sqrt(), "{mean} vs {oracle_mean}");
    assert!(r.coefficient_of_variation > 0.0);
}

#[test]
fn bidirectional_scores_are_seed_deterministic() {
    let m = MultiTokenToyScorer::generated("mt", 12, 5, 2).unwrap();
    let s = strings(&["w0", "m0m0p1", "w3", "w4", "m4m4p1m4p2", "w5", "w6", "w7"]);
    let a = score_bidirectional(&m, &s, 20, 99).unwrap();
    let b = score_bidirectional(&m, &s, 20, 99).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.per_permutation_logprobs, score_bidirectional(&m, &s, 20, 100).unwrap().per_permutation_logprobs);
}

struct Uniform(Vec<String>);

impl WordModel for Uniform {
    fn words(&self) -> &[String] {
        &self.0
    }
    fn index_of(&self, word: &str) -> Option<usize> {
        self.0.iter().position(|w| w == word)
    }
    fn logits(&self, _: &[Option<usize>], _: usize) -> Vec<f64> {
        vec![0.0; self.0.len()]
    }
}

#[test]
fn uniform_conditionals_give_minus_log_v() {
    let m = WordLevelScorer::new("uniform", ScorerKind::Bidirectional, Uniform(words(7)));
    let ctx = vec![WordSlot::Word("t1".into()), WordSlot::Mask(1), WordSlot::Word("t2".into())];
    let r = masked_word_logprob(&m, &ctx, 1, "t5").unwrap();
    assert!((r.logprob + 7f64.ln()).abs() < 1e-12);
}

#[test]
fn two_token_word_averages_both_reveal_orders() {
    let m = MultiTokenToyScorer::generated("mt", 10, 3, 5).unwrap();
    let ctx = vec![WordSlot::Word("w1".into()), WordSlot::Mask(1), WordSlot::Word("w2".into())];
    let r = masked_word_logprob(&m, &ctx, 1, "m1m1p1").unwrap();
    assert_eq!(r.token_orders, 2);
    let q = |t: Vec<Option<&str>>, pos: usize, tok: &str, class| MaskedQuery {
        template: t.into_iter().map(|x| x.map(str::to_string)).collect(),
        position: pos,
        token: tok.into(),
        class,
    };
    let lp = |x: MaskedQuery| m.masked_logprobs(&[x]).unwrap()[0];
    let forward = lp(q(vec![Some("w1"), None, None, Some("w2")], 1, "m1", MaskClass::WordInitial))
        + lp(q(vec![Some("w1"), Some("m1"), None, Some("w2")], 2, "##m1p1", MaskClass::WordFinal));
    let backward = lp(q(vec![Some("w1"), None, None, Some("w2")], 2, "##m1p1", MaskClass::WordFinal))
        + lp(q(vec![Some("w1"), None, Some("##m1p1"), Some("w2")], 1, "m1", MaskClass::WordInitial));
    assert!((r.logprob - 0.5 * (forward + backward)).abs() < 1e-12);
}

#[test]
fn every_mask_class_normalizes() {
    let m = MultiTokenToyScorer::generated("mt", 15, 6, 8).unwrap();
    let templates: Vec<Vec<Option<String>>> = vec![
        vec![None, None, None],
        vec![Some("w1".into()), None, Some("##m2p1".into())],
        vec![Some("m3".into()), None, None, Some("w0".into())],
    ];
    for t in &templates {
        for class in [MaskClass::WholeWord, MaskClass::WordInitial, MaskClass::WordFinal, MaskClass::WordInternal, MaskClass::Unrestricted] {
            let all = m.masked_topk(t, 1, class, usize::MAX).unwrap();
            let z: f64 = all.iter().map(|s| s.logprob.exp()).sum();
            assert!((z - 1.0).abs() < 1e-6, "{class:?}: {z}");
        }
    }
    // whole-word normalization through the word-level entry point
    let joint = WordLevelScorer::new("j", ScorerKind::Bidirectional, ExplicitJoint::random(words(5), 4, 2.0, 3));
    let ctx = vec![WordSlot::Word("t1".into()), WordSlot::Mask(1), WordSlot::Mask(1), WordSlot::Word("t0".into())];
    let z: f64 = words(5).iter().map(|w| masked_word_logprob(&joint, &ctx, 2, w).unwrap().logprob.exp()).sum();
    assert!((z - 1.0).abs() < 1e-6);
}

#[test]
fn pll_matches_one_mask_at_a_time_loop() {
    let m = MultiTokenToyScorer::generated("mt", 12, 5, 4).unwrap();
    let s = strings(&["w0", "m0m0p1", "w3", "w4", "m4m4p1m4p2", "w5", "w6", "w7"]);
    let tokens: Vec<String> = s.iter().flat_map(|w| m.tokenize(w).unwrap()).collect();
    let mut oracle = 0.0;
    for i in 0..tokens.len() {
        let template: Vec<Option<String>> = tokens.iter().enumerate().map(|(j, t)| (j != i).then(|| t.clone())).collect();
        let q = MaskedQuery { template, position: i, token: tokens[i].clone(), class: MaskClass::Unrestricted };
        oracle += m.masked_logprobs(&[q]).unwrap()[0];
    }
    assert!((score_pll(&m, &s).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn glued_pieces_contribute_almost_nothing_to_pll() {
    let m = MultiTokenToyScorer::generated("mt", 12, 5, 4).unwrap();
    let with_multi = strings(&["w0", "m0m0p1", "w3", "w4", "w8", "w5", "w6", "w7"]);
    let tokens: Vec<String> = with_multi.iter().flat_map(|w| m.tokenize(w).unwrap()).collect();
    for i in [1, 2] {
        let template: Vec<Option<String>> = tokens.iter().enumerate().map(|(j, t)| (j != i).then(|| t.clone())).collect();
        let q = MaskedQuery { template, position: i, token: tokens[i].clone(), class: MaskClass::Unrestricted };
        let lp = m.masked_logprobs(&[q]).unwrap()[0];
        assert!(lp > -0.2, "piece {i}: {lp}");
    }
}

#[test]
fn pll_equals_joint_for_independent_words() {
    let weights = [[1.0, 2.0, 3.0], [5.0, 1.0, 1.0], [1.0, 1.0, 4.0], [2.0, 3.0, 1.0]];
    let joint = ExplicitJoint::new(words(3), 4, |d| d.iter().enumerate().map(|(i, &w)| weights[i][w]).product());
    let m = WordLevelScorer::new("indep", ScorerKind::Bidirectional, joint);
    let s = strings(&["t2", "t0", "t2", "t1"]);
    assert!((score_pll(&m, &s).unwrap() - m.model().joint_logprob(&s).unwrap()).abs() < 1e-9);

    let coupled = WordLevelScorer::new("coupled", ScorerKind::Bidirectional, ExplicitJoint::random(words(3), 4, 3.0, 2));
    assert!((score_pll(&coupled, &s).unwrap() - coupled.model().joint_logprob(&s).unwrap()).abs() > 1e-6);
}

#[test]
fn ngram_handle_delegates_to_the_model() {
    let v = bundled::vocabulary();
    let model = Arc::new(bundled::ngram_model(2, &v));
    let h = ScorerHandle::with_defaults(Arc::new(NgramScorer::new("2gram", model.clone())), 10, 0).unwrap();
    for s in bundled::pool(&v).sentences.iter().take(50) {
        assert_eq!(h.sentence_logprob(s).unwrap(), model.sentence_logprob(&s.words).unwrap());
    }
    let masked = h.scorer().masked_logprobs(&[]);
    assert!(matches!(masked, Err(ScoreError::Capability { .. })));
    assert!(ScorerHandle::new("x", h.scorer().clone(), Estimator::PseudoLogLikelihood).is_err());
}

#[test]
fn conditional_table_chain_is_hand_summed() {
    let t = ConditionalTableScorer::new("table", words(4), |p, w| 1.0 + (p.map_or(0, |p| p.len()) * 3 + w.as_bytes()[1] as usize % 5) as f64);
    let s = strings(&["t1", "t3", "t0", "t0", "t2"]);
    let mut manual = t.conditional(None, "t1").unwrap();
    for w in s.windows(2) {
        manual += t.conditional(Some(&w[0]), &w[1]).unwrap();
    }
    assert!((score_unidirectional(&t, &s).unwrap() - manual).abs() < 1e-12);
    // a better final word keeps its advantage in the sentence score
    let (a, b) = (t.conditional(Some("t0"), "t2").unwrap(), t.conditional(Some("t0"), "t3").unwrap());
    assert_ne!(a, b);
    let (better, worse) = if a > b { ("t2", "t3") } else { ("t3", "t2") };
    let (mut hi, mut lo) = (s.clone(), s.clone());
    hi[4] = better.into();
    lo[4] = worse.into();
    assert!(score_unidirectional(&t, &hi).unwrap() > score_unidirectional(&t, &lo).unwrap());
}

proptest! {
    #[test]
    fn percentile_rank_ignores_monotone_transforms(xs in prop::collection::vec(-50.0f64..0.0, 1..60)) {
        let r = percentile_rank(&xs);
        let exp: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let affine: Vec<f64> = xs.iter().map(|x| 3.0 * x + 2.0).collect();
        let cube: Vec<f64> = xs.iter().map(|x| x.powi(3)).collect();
        prop_assert_eq!(&percentile_rank(&exp), &r);
        prop_assert_eq!(&percentile_rank(&affine), &r);
        prop_assert_eq!(&percentile_rank(&cube), &r);
        prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
