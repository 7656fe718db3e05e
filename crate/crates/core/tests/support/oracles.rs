//! Brute-force reference solvers shared by the integration and acceptance
//! tests. They share no code with the library's solvers.

#![allow(dead_code)]

use contstim_core::selection::{AssignmentProblem, StratifiedItem};
use rand::Rng;

/// Optimum of the pair-assignment problem by enumerating every injective
/// slot assignment over feasible candidates.
pub fn pairs_exhaustive(p: &AssignmentProblem<f64>) -> Option<f64> {
    let lists: Vec<Vec<(usize, f64)>> = slot_options(p, usize::MAX);
    enumerate(&lists, p.candidates.len())
}

/// Same optimum, enumerating only each slot's `slots` cheapest feasible
/// candidates. Exact by an exchange argument: a slot holding anything
/// outside its cheapest `slots` options leaves one of those options unused
/// by the other `slots - 1` slots, and swapping it in never costs more.
pub fn pairs_reduced(p: &AssignmentProblem<f64>) -> Option<f64> {
    let lists = slot_options(p, 2 * p.trials.len());
    enumerate(&lists, p.candidates.len())
}

fn slot_options(p: &AssignmentProblem<f64>, keep: usize) -> Vec<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for &(m1, m2) in &p.trials {
        for (cost_model, accept_model) in [(m1, m2), (m2, m1)] {
            let mut v: Vec<(usize, f64)> = (0..p.candidates.len())
                .filter(|&c| p.ranks[c][accept_model] >= 0.5)
                .map(|c| (c, p.ranks[c][cost_model]))
                .collect();
            v.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            v.truncate(keep);
            out.push(v);
        }
    }
    out
}

fn enumerate(lists: &[Vec<(usize, f64)>], n: usize) -> Option<f64> {
    fn rec(lists: &[Vec<(usize, f64)>], used: &mut [bool], acc: f64, best: &mut Option<f64>) {
        let Some((first, rest)) = lists.split_first() else {
            if best.is_none_or(|b| acc < b) {
                *best = Some(acc);
            }
            return;
        };
        for &(c, x) in first {
            if !used[c] {
                used[c] = true;
                rec(rest, used, acc + x, best);
                used[c] = false;
            }
        }
    }
    let mut best = None;
    rec(lists, &mut vec![false; n], 0.0, &mut best);
    best
}

/// Fractional ranks for `n` candidates under `m` models: each column is a
/// random permutation of `(i + 0.5) / n`, so exactly half sit at or above
/// the median.
pub fn random_ranks<R: Rng>(rng: &mut R, n: usize, m: usize) -> Vec<Vec<f64>> {
    use rand::seq::SliceRandom;
    let mut ranks = vec![vec![0.0; m]; n];
    for j in 0..m {
        let mut col: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        col.shuffle(rng);
        for i in 0..n {
            ranks[i][j] = col[i];
        }
    }
    ranks
}

/// Best total controversiality over all selections that take one item per
/// model-1 decile with model-2 deciles all distinct.
pub fn stratified_exhaustive(items: &[StratifiedItem<f64>], k: usize) -> Option<f64> {
    let groups: Vec<Vec<usize>> = (0..k).map(|d| (0..items.len()).filter(|&i| items[i].decile1 == d).collect()).collect();
    fn rec(items: &[StratifiedItem<f64>], groups: &[Vec<usize>], d: usize, used2: &mut Vec<bool>, acc: f64, best: &mut Option<f64>) {
        if d == groups.len() {
            if best.is_none_or(|b| acc > b) {
                *best = Some(acc);
            }
            return;
        }
        for &i in &groups[d] {
            let d2 = items[i].decile2;
            if !used2[d2] {
                used2[d2] = true;
                rec(items, groups, d + 1, used2, acc + items[i].controversiality, best);
                used2[d2] = false;
            }
        }
    }
    let mut best = None;
    rec(items, &groups, 0, &mut vec![false; k], 0.0, &mut best);
    best
}

/// `n` items over `k` deciles; the first `k` form a random perfect matching
/// so the instance is always feasible.
pub fn random_stratified<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<StratifiedItem<f64>> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);
    let mut items: Vec<StratifiedItem<f64>> =
        (0..k).map(|d| StratifiedItem { controversiality: rng.gen_range(0.0..10.0), decile1: d, decile2: perm[d] }).collect();
    while items.len() < n {
        items.push(StratifiedItem { controversiality: rng.gen_range(0.0..10.0), decile1: rng.gen_range(0..k), decile2: rng.gen_range(0..k) });
    }
    items.shuffle(rng);
    items
}

/// Words that may replace `words[position]`: different from the current
/// word and not repeating another non-repeatable word of the sentence,
/// comparing case-insensitively.
pub fn legal_words(words: &[String], position: usize, vocab: &[String], repeatable: &dyn Fn(&str) -> bool) -> Vec<String> {
    let mut out = Vec::new();
    for w in vocab {
        let same = |a: &str| a.to_lowercase() == w.to_lowercase();
        if same(&words[position]) {
            continue;
        }
        let clash = (0..words.len()).any(|j| j != position && same(&words[j]));
        if !clash || repeatable(w) {
            out.push(w.clone());
        }
    }
    out
}

/// Best strictly improving, feasible single-word change at `position`:
/// `(word, objective)`.
pub fn best_move(
    words: &[String],
    position: usize,
    vocab: &[String],
    repeatable: &dyn Fn(&str) -> bool,
    reject: &dyn Fn(&[String]) -> f64,
    accept: &dyn Fn(&[String]) -> f64,
    bound: f64,
) -> Option<(String, f64)> {
    let current = reject(words);
    let mut best: Option<(String, f64)> = None;
    for w in legal_words(words, position, vocab, repeatable) {
        let mut s = words.to_vec();
        s[position] = w.clone();
        let (o, c) = (reject(&s), accept(&s));
        if c >= bound && o < current && best.as_ref().is_none_or(|b| o < b.1) {
            best = Some((w, o));
        }
    }
    best
}

/// Replays a synthesis trace from `start`, checking every visit against an
/// exhaustive sweep: accepted moves must reach the best feasible objective
/// at that step, and rejected visits must have no improving feasible move.
/// Returns the final words.
#[allow(clippy::too_many_arguments)]
pub fn replay_trace(
    start: &[String],
    trace: &[contstim_core::synthesis::TraceStep],
    vocab: &[String],
    repeatable: &dyn Fn(&str) -> bool,
    reject: &dyn Fn(&[String]) -> f64,
    accept: &dyn Fn(&[String]) -> f64,
) -> Result<Vec<String>, String> {
    let bound = accept(start);
    let mut words = start.to_vec();
    let mut last = reject(start);
    for step in trace {
        if step.previous_word != words[step.position] {
            return Err(format!("visit {}: trace and replay disagree on the current word", step.visit));
        }
        let best = best_move(&words, step.position, vocab, repeatable, reject, accept, bound);
        match (&step.new_word, best) {
            (Some(w), Some((_, best_o))) => {
                words[step.position] = w.clone();
                let (o, c) = (reject(&words), accept(&words));
                if (o - best_o).abs() > 1e-9 {
                    return Err(format!("visit {}: accepted objective {o}, best available {best_o}", step.visit));
                }
                if !(o < last) || c < bound {
                    return Err(format!("visit {}: move is not a strict feasible improvement", step.visit));
                }
                if (step.objective - o).abs() > 1e-9 || (step.constraint - c).abs() > 1e-9 {
                    return Err(format!("visit {}: recorded scores differ from the oracle", step.visit));
                }
                last = o;
            }
            (None, None) => {}
            (Some(w), None) => return Err(format!("visit {}: accepted '{w}' but no improving move exists", step.visit)),
            (None, Some((w, o))) => return Err(format!("visit {}: missed improving move '{w}' ({o})", step.visit)),
        }
    }
    Ok(words)
}
