//! Stage bodies shared by the standalone subcommands and `run`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use anyhow::{anyhow, bail, ensure, Context, Result};
use contstim_core::corpus::{has_forbidden_repeat, Origin, RepeatableWords, Sentence, SentencePool, Vocabulary};
use contstim_core::evaluation::{
    self, collect_groups, linguistic_feature_bias, token_count_bias_test, EvaluationConfig, EvaluationReport, FeatureBiasReport,
    JudgedPair, TokenCountBias,
};
use contstim_core::experiment::{Choice, Condition, LogRecord, Materials, NaturalPair, Response, Session, StimulusSet};
use contstim_core::scoring::{ScoreMatrix, ScorerHandle};
use contstim_core::selection::{
    self, audit_selection, equal_frequency_bins, prune_candidates, select_controversial_pairs, select_triplets_stratified,
    ControversialPairSelection, SolverBudget, StratifiedItem,
};
use contstim_core::synthesis::{generate_triplet, SynthesisConfig, Triplet};
use contstim_core::tsv::Table;
use contstim_core::{seed, PairAssignment};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SimulationConfig;

/// Controversial natural pairs for every model pair, over the pruned
/// pool.
pub fn select_natural(
    pool: &SentencePool,
    ranks: &ScoreMatrix<f64>,
    model_pairs: &[(String, String)],
    per_pair: usize,
    repeatable: &RepeatableWords,
) -> Result<ControversialPairSelection> {
    let models: Vec<String> = ranks.scorers.clone();
    let col = |m: &str| models.iter().position(|x| x == m).ok_or_else(|| anyhow!("no scores for model '{m}'"));
    let pairs = model_pairs.iter().map(|(a, b)| Ok((col(a)?, col(b)?))).collect::<Result<Vec<_>>>()?;
    let rank_of = |s: &Sentence| ranks.row_of(&s.id).map(|r| ranks.values[r].clone());
    let candidates = prune_candidates(&pool.sentences, rank_of, repeatable);
    log::info!("{} of {} pool sentences split the models", candidates.len(), pool.len());
    let rows = candidates.iter().map(|id| ranks.values[ranks.row_of(id).expect("pruned from the matrix")].clone()).collect();
    let problem = PairAssignment::new(candidates, models, rows, &pairs, per_pair)?;
    let sel = select_controversial_pairs(&problem, SolverBudget::default())?;
    audit_selection(&problem, &sel)?;
    Ok(sel)
}

pub fn selection_table(sel: &ControversialPairSelection) -> Table {
    let mut t = Table::new(&["trial", "sentence1", "sentence2", "model1", "model2"]);
    for p in &sel.trials {
        t.push([p.trial.to_string(), p.sentence1.clone(), p.sentence2.clone(), p.model1.clone(), p.model2.clone()]);
    }
    t
}

pub fn read_selection_table(t: &Table) -> Result<Vec<selection::SelectedPair>> {
    let c = |n: &str| t.column(n).ok_or_else(|| anyhow!("selection table lacks column '{n}'"));
    let (tr, s1, s2, m1, m2) = (c("trial")?, c("sentence1")?, c("sentence2")?, c("model1")?, c("model2")?);
    t.rows
        .iter()
        .map(|r| {
            Ok(selection::SelectedPair {
                trial: r[tr].parse().context("trial index")?,
                sentence1: r[s1].clone(),
                sentence2: r[s2].clone(),
                model1: r[m1].clone(),
                model2: r[m2].clone(),
            })
        })
        .collect()
}

/// Pool sentences reserved for the remaining stimulus roles, disjoint
/// from each other and from the controversial pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NaturalAllocation {
    pub random_pairs: Vec<(String, String)>,
    pub control_sources: Vec<String>,
    /// Synthesis starting sentences per model pair, keyed `m1|m2`.
    pub synthesis_starts: BTreeMap<String, Vec<String>>,
}

pub fn pair_key(m1: &str, m2: &str) -> String {
    format!("{m1}|{m2}")
}

pub fn allocate_naturals(
    pool: &SentencePool,
    used: &HashSet<String>,
    random_pairs: usize,
    controls: usize,
    starts_per_pair: usize,
    model_pairs: &[(String, String)],
    repeatable: &RepeatableWords,
    seed: u64,
) -> Result<NaturalAllocation> {
    let used_keys: HashSet<String> = used.iter().filter_map(|id| pool.get(id)).map(Sentence::key).collect();
    let mut free: Vec<&Sentence> = pool
        .sentences
        .iter()
        .filter(|s| !used.contains(&s.id) && !used_keys.contains(&s.key()) && !has_forbidden_repeat(&s.words, repeatable))
        .collect();
    free.sort_by(|a, b| a.id.cmp(&b.id));
    free.shuffle(&mut seed::rng(seed::derive_str(seed, "allocate-naturals")));
    let need = 2 * random_pairs + controls + starts_per_pair * model_pairs.len();
    if free.len() < need {
        bail!("the pool has {} unused sentences, {need} are needed for random pairs, controls and synthesis starts", free.len());
    }
    let mut it = free.into_iter().map(|s| s.id.clone());
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
    let pairs = take(2 * random_pairs);
    let control_sources = take(controls);
    let mut synthesis_starts = BTreeMap::new();
    for (a, b) in model_pairs {
        synthesis_starts.insert(pair_key(a, b), take(starts_per_pair));
    }
    Ok(NaturalAllocation { random_pairs: pairs.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect(), control_sources, synthesis_starts })
}

/// Synthesizes one candidate triplet per starting sentence, in parallel.
/// Each triplet is seeded from its own identity, so the result does not
/// depend on scheduling.
pub fn synthesize_candidates(
    starts: &[Sentence],
    m1: &ScorerHandle,
    m2: &ScorerHandle,
    vocab: &[String],
    repeatable: &RepeatableWords,
    cfg: &SynthesisConfig,
) -> Result<Vec<Triplet>> {
    starts
        .par_iter()
        .map(|n| generate_triplet(n, m1, m2, vocab, repeatable, cfg).with_context(|| format!("synthesizing from {}", n.id)))
        .collect()
}

/// Keeps `k` triplets covering every decile of the natural sentence's
/// probability under both models, maximizing total controversiality.
/// Only triplets whose two derivatives both lowered their target score
/// (so neither equals the start) and differ from each other are eligible.
pub fn select_stratified(all: &[Triplet], k: usize) -> Result<Vec<Triplet>> {
    let candidates: Vec<&Triplet> = all
        .iter()
        .filter(|t| t.scores.s1_m1 < t.scores.n_m1 && t.scores.s2_m2 < t.scores.n_m2 && t.s1.key() != t.s2.key())
        .collect();
    if candidates.len() < all.len() {
        log::info!("{} of {} triplets have an unchanged or duplicate derivative", all.len() - candidates.len(), all.len());
    }
    ensure!(candidates.len() >= k, "{} usable candidate triplets, {k} needed", candidates.len());
    let ids: Vec<String> = candidates.iter().map(|t| t.n.id.clone()).collect();
    let d1 = equal_frequency_bins(&ids, &candidates.iter().map(|t| t.scores.n_m1).collect::<Vec<_>>(), k);
    let d2 = equal_frequency_bins(&ids, &candidates.iter().map(|t| t.scores.n_m2).collect::<Vec<_>>(), k);
    let items: Vec<StratifiedItem<f64>> =
        candidates.iter().enumerate().map(|(i, t)| StratifiedItem { controversiality: t.controversiality(), decile1: d1[i], decile2: d2[i] }).collect();
    let picked = select_triplets_stratified(&items, k)?;
    Ok(picked.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Assembles stimulus materials from the selected pieces.
pub fn assemble_materials(
    pool: &SentencePool,
    model_pairs: &[(String, String)],
    natural: &[selection::SelectedPair],
    alloc: &NaturalAllocation,
    triplets: Vec<Triplet>,
) -> Result<Materials> {
    let get = |id: &str| pool.get(id).cloned().ok_or_else(|| anyhow!("sentence {id} is not in the pool"));
    Ok(Materials {
        model_pairs: model_pairs.to_vec(),
        controversial_pairs: natural
            .iter()
            .map(|p| {
                Ok(NaturalPair { model1: p.model1.clone(), model2: p.model2.clone(), sentence1: get(&p.sentence1)?, sentence2: get(&p.sentence2)? })
            })
            .collect::<Result<_>>()?,
        triplets,
        random_pairs: alloc.random_pairs.iter().map(|(a, b)| Ok((get(a)?, get(b)?))).collect::<Result<_>>()?,
        control_sources: alloc.control_sources.iter().map(|id| get(id)).collect::<Result<_>>()?,
    })
}

/// Every distinct sentence shown in the sets, by id.
pub fn stimulus_sentences(sets: &[StimulusSet]) -> Result<Vec<Sentence>> {
    let mut by_id: BTreeMap<String, Sentence> = BTreeMap::new();
    for t in sets.iter().flat_map(|s| &s.trials) {
        for s in [&t.left, &t.right] {
            if let Some(prev) = by_id.get(&s.id) {
                ensure!(prev.words == s.words, "sentence id {} names two different sentences", s.id);
            } else {
                by_id.insert(s.id.clone(), s.clone());
            }
        }
    }
    Ok(by_id.into_values().collect())
}

/// Token counts per sentence under each scorer's tokenizer, as a
/// sentence-by-scorer table.
pub fn token_counts(handles: &[ScorerHandle], sentences: &[Sentence]) -> Result<ScoreMatrix<f64>> {
    let mut cache: Vec<HashMap<String, usize>> = vec![HashMap::new(); handles.len()];
    let mut values = Vec::with_capacity(sentences.len());
    for s in sentences {
        let mut row = Vec::with_capacity(handles.len());
        for (h, cache) in handles.iter().zip(&mut cache) {
            let mut n = 0;
            for w in &s.words {
                n += match cache.get(w) {
                    Some(&k) => k,
                    None => {
                        let k = h.scorer().tokenize(w)?.len();
                        cache.insert(w.clone(), k);
                        k
                    }
                };
            }
            row.push(n as f64);
        }
        values.push(row);
    }
    Ok(ScoreMatrix::new(sentences.iter().map(|s| s.id.clone()).collect(), handles.iter().map(|h| h.name().to_string()).collect(), values)?)
}

/// Simulated participants judging with an oracle model: the right
/// sentence wins with probability `sigmoid(log ratio / temperature)` and
/// confidence grows with the size of the log ratio. Sessions get
/// deterministic ids and timestamps, so the log is byte-reproducible.
pub fn simulate_responses(
    sets: &[StimulusSet],
    oracle: &dyn Fn(&Sentence) -> Result<f64>,
    sim: &SimulationConfig,
    base_seed: u64,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut line = |rec: &LogRecord| -> Result<()> {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    let mut memo: HashMap<&str, f64> = HashMap::new();
    for set in sets {
        for t in &set.trials {
            for s in [&t.left, &t.right] {
                if !memo.contains_key(s.id.as_str()) {
                    memo.insert(&s.id, oracle(s)?);
                }
            }
        }
    }
    for set in sets {
        for p in 0..sim.participants_per_group {
            let id = format!("sim-g{:02}-p{:02}", set.group, p + 1);
            let mut rng = seed::rng(seed::derive_str(base_seed, &id));
            line(&LogRecord::SessionCreated { session_id: id.clone(), participant: format!("simulated-{:02}", p + 1), set: set.group, created_ms: 0 })?;
            line(&LogRecord::SessionStarted { session_id: id.clone() })?;
            for (k, t) in set.trials.iter().enumerate() {
                let lr = memo[t.right.id.as_str()] - memo[t.left.id.as_str()];
                let p_right = if sim.temperature == 0.0 {
                    if lr == 0.0 {
                        0.5
                    } else {
                        (lr > 0.0) as u8 as f64
                    }
                } else {
                    1.0 / (1.0 + (-lr / sim.temperature).exp())
                };
                let choice = if rng.gen::<f64>() < p_right { Choice::Right } else { Choice::Left };
                let strength = lr.abs() / sim.temperature.max(1e-9);
                let confidence = if strength < 1.0 { 1 } else if strength < 3.0 { 2 } else { 3 };
                line(&LogRecord::Response(Response {
                    session_id: id.clone(),
                    trial_id: t.id.clone(),
                    choice,
                    confidence,
                    elapsed_ms: 4000,
                    timestamp: 5000 * (k as u64 + 1),
                }))?;
            }
        }
    }
    Ok(out)
}

/// Everything the evaluate stage reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub alignment: EvaluationReport,
    pub token_count_bias: Vec<TokenCountBias>,
    pub feature_bias: FeatureBiasReport,
    /// How the feature-bias numbers should be read.
    pub feature_bias_note: String,
}

pub const FEATURE_BIAS_NOTE: &str = "Feature preference is the per-pair difference preferred minus rejected sentence; \
model and human-majority differences are compared with a paired t test. Per-sentence feature values are not tested.";

/// The alignment report plus the token-count and feature-bias analyses.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_all(
    sets: &[StimulusSet],
    sessions: &[Session],
    scores: &ScoreMatrix<f64>,
    tokens: Option<&ScoreMatrix<f64>>,
    vocab: &Vocabulary,
    embeddings: Option<&evaluation::Embeddings>,
    fdr_q: f64,
    quality_filter: bool,
) -> Result<FullReport> {
    let models = scores.scorers.clone();
    let (groups, excluded) = collect_groups(sets, sessions, quality_filter);
    let cfg = EvaluationConfig { fdr_q, apply_quality_filter: quality_filter };
    let alignment = evaluation::evaluate(&groups, scores, &models, excluded, &cfg)?;

    let score = |id: &str, m: &str| scores.get(id, m).ok_or_else(|| anyhow!("no score for {id} under {m}"));
    let mut counts = Vec::new();
    if let Some(tok) = tokens {
        for m in &models {
            let mut pairs = Vec::new();
            for t in sets.iter().flat_map(|s| &s.trials) {
                let synthetic = matches!(t.condition, Condition::NaturalVsSyntheticA | Condition::NaturalVsSyntheticB | Condition::SyntheticVsSynthetic);
                if !synthetic || !t.targets(m) {
                    continue;
                }
                let (l, r) = (score(&t.left.id, m)?, score(&t.right.id, m)?);
                if l == r {
                    continue;
                }
                let (acc, rej) = if r > l { (&t.right, &t.left) } else { (&t.left, &t.right) };
                let n = |id: &str| tok.get(id, m).map(|v| v as usize).ok_or_else(|| anyhow!("no token count for {id} under {m}"));
                pairs.push((n(&acc.id)?, n(&rej.id)?));
            }
            counts.push((m.clone(), pairs));
        }
    }
    let token_count_bias = token_count_bias_test(&counts, fdr_q);

    let mut judged = Vec::new();
    for g in &groups {
        if g.participants.is_empty() {
            continue;
        }
        for t in g.set.trials.iter().filter(|t| t.condition != Condition::ControlScrambled) {
            let right = g.participants.iter().filter(|p| p.answers.get(&t.id).is_some_and(|a| a.0 == Choice::Right)).count();
            let left = g.participants.len() - right;
            let human = match right.cmp(&left) {
                std::cmp::Ordering::Equal => None,
                o => Some(o == std::cmp::Ordering::Less),
            };
            let mut prefs = BTreeMap::new();
            for m in &models {
                let lr = score(&t.right.id, m)? - score(&t.left.id, m)?;
                prefs.insert(m.clone(), if lr == 0.0 { None } else { Some(lr < 0.0) });
            }
            judged.push(JudgedPair { first: t.left.words.clone(), second: t.right.words.clone(), human_prefers_first: human, model_prefers_first: prefs });
        }
    }
    let feature_bias = linguistic_feature_bias(&judged, embeddings, vocab, fdr_q);
    Ok(FullReport { alignment, token_count_bias, feature_bias, feature_bias_note: FEATURE_BIAS_NOTE.into() })
}

/// The report's files: `report.json` plus one TSV per table.
pub fn report_files(r: &FullReport) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    let mut json = serde_json::to_vec_pretty(r)?;
    json.push(b'\n');
    files.push(("report.json".to_string(), json));
    for (name, t) in r.alignment.tables() {
        files.push((name.to_string(), t.to_bytes()));
    }
    let mut tb = Table::new(&["model", "accepted_more", "equal", "rejected_more", "p", "p_adjusted", "significant", "degenerate"]);
    for b in &r.token_count_bias {
        tb.push([
            b.model.clone(),
            b.accepted_more.to_string(),
            b.equal.to_string(),
            b.rejected_more.to_string(),
            b.p_value.to_string(),
            b.p_adjusted.to_string(),
            b.significant.to_string(),
            b.degenerate.to_string(),
        ]);
    }
    files.push(("token_count_bias.tsv".to_string(), tb.to_bytes()));
    let mut fb = Table::new(&["model", "feature", "n_pairs", "mean_model_delta", "mean_human_delta", "t", "p", "p_adjusted", "significant"]);
    for b in &r.feature_bias.rows {
        let feature = serde_json::to_value(b.feature)?.as_str().unwrap_or_default().to_string();
        fb.push([
            b.model.clone(),
            feature,
            b.n_pairs.to_string(),
            b.mean_model_delta.to_string(),
            b.mean_human_delta.to_string(),
            b.t.to_string(),
            b.p_value.to_string(),
            b.p_adjusted.to_string(),
            b.significant.to_string(),
        ]);
    }
    files.push(("feature_bias.tsv".to_string(), fb.to_bytes()));
    Ok(files)
}

/// Natural sentences by id, for turning selection ids back into sentences.
pub fn pool_index(pool: &SentencePool) -> HashMap<&str, &Sentence> {
    pool.sentences.iter().map(|s| (s.id.as_str(), s)).collect()
}

pub fn sentences_by_id(pool: &SentencePool, ids: &[String]) -> Result<Vec<Sentence>> {
    let idx = pool_index(pool);
    ids.iter().map(|id| idx.get(id.as_str()).map(|s| (*s).clone()).ok_or_else(|| anyhow!("sentence {id} is not in the pool"))).collect()
}

/// Scrambled controls must not collide with natural ids.
pub fn check_origins(sets: &[StimulusSet]) -> Result<()> {
    for t in sets.iter().flat_map(|s| &s.trials) {
        if t.condition == Condition::ControlScrambled {
            ensure!(
                (t.left.origin == Origin::Scrambled) != (t.right.origin == Origin::Scrambled),
                "control trial {} needs exactly one scrambled side",
                t.id
            );
        }
    }
    Ok(())
}
