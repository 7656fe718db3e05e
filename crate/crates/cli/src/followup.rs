//! Chain versus pseudo-log-likelihood on a word-piece scorer.
//!
//! Both estimators score the same toy masked model. Pairs of random
//! sentences on which the two disagree are judged by simulated raters, and
//! the summary reports how often each estimator sides with them and how
//! many multi-piece words each estimator's preferred sentence contains.
//! PLL over-credits multi-piece words because each piece is scored with
//! its sibling pieces visible.

use std::collections::HashMap;

use anyhow::{ensure, Result};
use contstim_core::corpus::{Origin, Sentence, SENTENCE_LEN};
use contstim_core::evaluation::{binomial_two_sided, token_count_bias_test, wilcoxon_signed_rank, TokenCountBias};
use contstim_core::experiment::{Choice, Condition, LogRecord, StimulusSet, Trial};
use contstim_core::scoring::toy::MultiTokenToyScorer;
use contstim_core::scoring::{Estimator, LanguageScorer, ScorerHandle};
use contstim_core::seed;
use contstim_core::tsv::Table;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FollowupConfig, SimulationConfig};
use crate::stages::simulate_responses;

pub const CHAIN: &str = "chain";
pub const PLL: &str = "pll";
/// Candidate sentences drawn per requested pair.
const CANDIDATES_PER_PAIR: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowupPair {
    /// Preferred by PLL.
    pub s1: Sentence,
    /// Preferred by the permutation chain.
    pub s2: Sentence,
    pub s1_chain: f64,
    pub s1_pll: f64,
    pub s2_chain: f64,
    pub s2_pll: f64,
    pub s1_multi_piece: usize,
    pub s2_multi_piece: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorAgreement {
    pub estimator: String,
    /// Mean over raters of the fraction of trials where the rater chose
    /// the estimator's preferred sentence.
    pub mean_accuracy: f64,
    pub per_rater: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowupSummary {
    pub candidates: usize,
    pub pairs: usize,
    pub mean_multi_piece_pll_preferred: f64,
    pub mean_multi_piece_chain_preferred: f64,
    /// Pairs where the PLL-preferred sentence has more, equal and fewer
    /// multi-piece words than the chain-preferred one.
    pub pll_more: usize,
    pub equal: usize,
    pub pll_fewer: usize,
    pub multi_piece_p: f64,
    pub token_count_bias: Vec<TokenCountBias>,
    pub agreement: Vec<EstimatorAgreement>,
    /// Paired test of per-rater chain versus PLL accuracy.
    pub chain_vs_pll_p: f64,
    pub raters: usize,
}

#[derive(Debug, Clone)]
pub struct FollowupResult {
    pub summary: FollowupSummary,
    pub pairs: Vec<FollowupPair>,
    pub set: StimulusSet,
    pub log: Vec<u8>,
}

impl FollowupResult {
    pub fn files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut t = Table::new(&["s1_pll_preferred", "s2_chain_preferred", "s1_chain", "s1_pll", "s2_chain", "s2_pll", "s1_multi", "s2_multi"]);
        for p in &self.pairs {
            t.push([
                p.s1.text(),
                p.s2.text(),
                p.s1_chain.to_string(),
                p.s1_pll.to_string(),
                p.s2_chain.to_string(),
                p.s2_pll.to_string(),
                p.s1_multi_piece.to_string(),
                p.s2_multi_piece.to_string(),
            ]);
        }
        let mut summary = serde_json::to_vec_pretty(&self.summary)?;
        summary.push(b'\n');
        let mut set = serde_json::to_vec_pretty(&self.set)?;
        set.push(b'\n');
        Ok(vec![
            ("followup/summary.json".into(), summary),
            ("followup/pairs.tsv".into(), t.to_bytes()),
            ("followup/set.json".into(), set),
            ("followup/responses.jsonl".into(), self.log.clone()),
        ])
    }
}

/// Raters judge by the permutation-chain estimate with many more reveal
/// orders than the compared estimator, under an independent seed; they
/// stand in for judges who read whole words left to right.
pub fn run_pll_followup(cfg: &FollowupConfig, sim: &SimulationConfig, base_seed: u64) -> Result<FollowupResult> {
    ensure!(cfg.single_piece_words >= SENTENCE_LEN, "the toy vocabulary needs at least {SENTENCE_LEN} single-piece words");
    let toy = MultiTokenToyScorer::generated("wordpiece-toy", cfg.single_piece_words, cfg.multi_piece_words, seed::derive_str(base_seed, "toy"))?;
    let words = toy.vocabulary().to_vec();
    let pieces: HashMap<String, usize> = words.iter().map(|w| (w.clone(), toy.token_count(w).unwrap_or(1))).collect();
    let scorer: std::sync::Arc<dyn LanguageScorer> = std::sync::Arc::new(toy);
    let chain =
        ScorerHandle::new(CHAIN, scorer.clone(), Estimator::PermutationChain { permutations: cfg.permutations, seed: seed::derive_str(base_seed, CHAIN) })?;
    let pll = ScorerHandle::new(PLL, scorer.clone(), Estimator::PseudoLogLikelihood)?;
    let rater = ScorerHandle::new(
        "rater",
        scorer,
        Estimator::PermutationChain { permutations: 4 * cfg.permutations, seed: seed::derive_str(base_seed, "rater") },
    )?;

    let mut rng = seed::rng(seed::derive_str(base_seed, "sentences"));
    let n_cand = CANDIDATES_PER_PAIR * cfg.n_pairs;
    let candidates: Vec<Sentence> = (0..n_cand)
        .map(|i| {
            let ws: Vec<String> = words.choose_multiple(&mut rng, SENTENCE_LEN).cloned().collect();
            Sentence::unchecked(format!("fu-{i:05}"), ws, Origin::Natural)
        })
        .collect();
    let scores: Vec<(f64, f64)> = candidates
        .par_iter()
        .map(|s| Ok((chain.log_prob(&s.words)?, pll.log_prob(&s.words)?)))
        .collect::<Result<_>>()?;

    // Greedy pairing: each sentence in order of PLL surplus takes the
    // unused partner that splits the estimators by the widest margin.
    let mut order: Vec<usize> = (0..n_cand).collect();
    order.sort_by(|&a, &b| (scores[b].1 - scores[b].0).total_cmp(&(scores[a].1 - scores[a].0)).then(a.cmp(&b)));
    let mut used = vec![false; n_cand];
    let mut chosen = Vec::new();
    for &a in &order {
        if chosen.len() == cfg.n_pairs {
            break;
        }
        if used[a] {
            continue;
        }
        let best = (0..n_cand)
            .filter(|&b| b != a && !used[b] && scores[a].1 > scores[b].1 && scores[b].0 > scores[a].0)
            .max_by(|&x, &y| {
                let m = |b: usize| (scores[a].1 - scores[b].1) + (scores[b].0 - scores[a].0);
                m(x).total_cmp(&m(y)).then(y.cmp(&x))
            });
        if let Some(b) = best {
            used[a] = true;
            used[b] = true;
            chosen.push((a, b));
        }
    }
    ensure!(!chosen.is_empty(), "no sentence pair splits the chain and PLL estimators");
    let multi = |s: &Sentence| s.words.iter().filter(|w| pieces[*w] > 1).count();
    let pairs: Vec<FollowupPair> = chosen
        .iter()
        .map(|&(a, b)| FollowupPair {
            s1: candidates[a].clone(),
            s2: candidates[b].clone(),
            s1_chain: scores[a].0,
            s1_pll: scores[a].1,
            s2_chain: scores[b].0,
            s2_pll: scores[b].1,
            s1_multi_piece: multi(&candidates[a]),
            s2_multi_piece: multi(&candidates[b]),
        })
        .collect();

    let mut trial_rng = seed::rng(seed::derive_str(base_seed, "trials"));
    let trials: Vec<Trial> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (left, right) = if trial_rng.gen::<bool>() { (p.s2.clone(), p.s1.clone()) } else { (p.s1.clone(), p.s2.clone()) };
            Trial {
                id: format!("fu-t{:03}", i + 1),
                left,
                right,
                condition: Condition::NaturalControversial,
                targeted_models: Some((CHAIN.into(), PLL.into())),
                triplet_ref: None,
            }
        })
        .collect();
    let set = StimulusSet { group: 1, trials };
    let judge = |s: &Sentence| Ok(rater.log_prob(&s.words)?);
    let log = simulate_responses(std::slice::from_ref(&set), &judge, sim, seed::derive_str(base_seed, "raters"))?;

    let pll_first: HashMap<&str, bool> = set.trials.iter().zip(&pairs).map(|(t, p)| (t.id.as_str(), t.left.id == p.s1.id)).collect();
    let mut per_rater: HashMap<String, (usize, usize)> = HashMap::new();
    for line in log.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
        if let LogRecord::Response(r) = serde_json::from_slice(line)? {
            let e = per_rater.entry(r.session_id.clone()).or_default();
            e.1 += 1;
            if (r.choice == Choice::Left) == pll_first[r.trial_id.as_str()] {
                e.0 += 1;
            }
        }
    }
    let mut ids: Vec<&String> = per_rater.keys().collect();
    ids.sort();
    let pll_acc: Vec<f64> = ids.iter().map(|id| per_rater[*id].0 as f64 / per_rater[*id].1 as f64).collect();
    let chain_acc: Vec<f64> = pll_acc.iter().map(|a| 1.0 - a).collect();
    let chain_vs_pll_p = wilcoxon_signed_rank(&chain_acc, &pll_acc).map_or(1.0, |w| w.p_value);

    let (mut more, mut equal, mut fewer) = (0, 0, 0);
    for p in &pairs {
        match p.s1_multi_piece.cmp(&p.s2_multi_piece) {
            std::cmp::Ordering::Greater => more += 1,
            std::cmp::Ordering::Equal => equal += 1,
            std::cmp::Ordering::Less => fewer += 1,
        }
    }
    let n = pairs.len() as f64;
    let tokens = |s: &Sentence| s.words.iter().map(|w| pieces[w]).sum::<usize>();
    let bias = token_count_bias_test(
        &[
            (PLL.to_string(), pairs.iter().map(|p| (tokens(&p.s1), tokens(&p.s2))).collect()),
            (CHAIN.to_string(), pairs.iter().map(|p| (tokens(&p.s2), tokens(&p.s1))).collect()),
        ],
        0.05,
    );
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let summary = FollowupSummary {
        candidates: n_cand,
        pairs: pairs.len(),
        mean_multi_piece_pll_preferred: pairs.iter().map(|p| p.s1_multi_piece as f64).sum::<f64>() / n,
        mean_multi_piece_chain_preferred: pairs.iter().map(|p| p.s2_multi_piece as f64).sum::<f64>() / n,
        pll_more: more,
        equal,
        pll_fewer: fewer,
        multi_piece_p: binomial_two_sided(more as u64, (more + fewer) as u64),
        token_count_bias: bias,
        agreement: vec![
            EstimatorAgreement { estimator: CHAIN.into(), mean_accuracy: mean(&chain_acc), per_rater: chain_acc },
            EstimatorAgreement { estimator: PLL.into(), mean_accuracy: mean(&pll_acc), per_rater: pll_acc },
        ],
        chain_vs_pll_p,
        raters: ids.len(),
    };
    Ok(FollowupResult { summary, pairs, set, log })
}
