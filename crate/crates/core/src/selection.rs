//! Controversial natural-pair selection and stratified triplet selection.
//!
//! Pair selection assigns sentences to trial slots. Trial `j` targets the
//! model pair `(m1_j, m2_j)` and has two slots:
//!
//! * slot 1 takes a sentence with `r(s | m2_j) >= 0.5` at cost `r(s | m1_j)`;
//! * slot 2 takes a sentence with `r(s | m1_j) >= 0.5` at cost `r(s | m2_j)`.
//!
//! Every sentence fills at most one slot and the total cost is minimized.
//! Small instances are solved exactly by depth-first branch and bound;
//! large ones by a greedy assignment refined with replacement and swap
//! moves.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{has_forbidden_repeat, RepeatableWords, Sentence};
use crate::num::{total_cmp, Real};

const EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("rank matrix: {0}")]
    BadRanks(String),
    #[error("no feasible assignment: trial {trial} ({model1} vs {model2}) cannot be filled")]
    Infeasible { trial: usize, model1: String, model2: String },
    #[error("decile coverage is infeasible; empty deciles for model 1: {empty1:?}, model 2: {empty2:?}")]
    EmptyDeciles { empty1: Vec<usize>, empty2: Vec<usize> },
    #[error("no selection places one natural sentence in every decile of both models")]
    NoDecileMatching,
    #[error("selection violates constraint: {0}")]
    Audit(String),
}

pub type Result<T, E = SelectionError> = std::result::Result<T, E>;

/// True iff some model ranks the sentence below the median and another at
/// or above it.
pub fn is_split<T: Real>(row: &[T]) -> bool {
    let half = T::of(0.5);
    row.iter().any(|&r| r < half) && row.iter().any(|&r| r >= half)
}

/// Sentences worth considering for controversial pairs.
pub fn prune_candidates<T: Real>(
    sentences: &[Sentence],
    rank_of: impl Fn(&Sentence) -> Option<Vec<T>>,
    repeatable: &RepeatableWords,
) -> Vec<String> {
    sentences
        .iter()
        .filter(|s| !has_forbidden_repeat(&s.words, repeatable))
        .filter(|s| rank_of(s).is_some_and(|row| is_split(&row)))
        .map(|s| s.id.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimality {
    ProvenOptimal,
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverBudget {
    /// Instances with at most this many candidates are solved exactly.
    pub exact_threshold: usize,
    /// Branch-and-bound node limit; exceeding it downgrades the result to
    /// heuristic.
    pub max_nodes: u64,
}

impl Default for SolverBudget {
    fn default() -> Self {
        Self { exact_threshold: 60, max_nodes: 20_000_000 }
    }
}

/// Rank matrix plus the model pair targeted by each trial.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentProblem<T> {
    pub candidates: Vec<String>,
    pub models: Vec<String>,
    /// `ranks[candidate][model]`.
    pub ranks: Vec<Vec<T>>,
    /// `(m1, m2)` model indices per trial.
    pub trials: Vec<(usize, usize)>,
}

impl<T: Real> AssignmentProblem<T> {
    /// `per_pair_count` trials for each listed model pair.
    pub fn new(
        candidates: Vec<String>,
        models: Vec<String>,
        ranks: Vec<Vec<T>>,
        model_pairs: &[(usize, usize)],
        per_pair_count: usize,
    ) -> Result<Self> {
        if ranks.len() != candidates.len() || ranks.iter().any(|r| r.len() != models.len()) {
            return Err(SelectionError::BadRanks("shape does not match labels".into()));
        }
        if ranks.iter().flatten().any(|&r| !(r >= T::zero() && r <= T::one())) {
            return Err(SelectionError::BadRanks("ranks must lie in [0, 1]".into()));
        }
        if model_pairs.iter().any(|&(a, b)| a >= models.len() || b >= models.len() || a == b) {
            return Err(SelectionError::BadRanks("invalid model pair".into()));
        }
        let trials = model_pairs.iter().flat_map(|&p| std::iter::repeat_n(p, per_pair_count)).collect();
        Ok(Self { candidates, models, ranks, trials })
    }

    fn slot_model(&self, slot: usize) -> (usize, usize) {
        let (m1, m2) = self.trials[slot / 2];
        if slot.is_multiple_of(2) {
            (m1, m2)
        } else {
            (m2, m1)
        }
    }

    /// Cost of `cand` in `slot`, or `None` when infeasible.
    pub fn slot_cost(&self, slot: usize, cand: usize) -> Option<T> {
        let (cost_model, accept_model) = self.slot_model(slot);
        let row = &self.ranks[cand];
        (row[accept_model] >= T::of(0.5)).then_some(row[cost_model])
    }

    pub fn slot_count(&self) -> usize {
        2 * self.trials.len()
    }

    /// Feasible candidates per slot, cheapest first.
    fn feasible_lists(&self) -> Vec<Vec<(usize, T)>> {
        (0..self.slot_count())
            .map(|slot| {
                let mut v: Vec<(usize, T)> =
                    (0..self.candidates.len()).filter_map(|c| self.slot_cost(slot, c).map(|x| (c, x))).collect();
                v.sort_by(|a, b| total_cmp(&a.1, &b.1).then(a.0.cmp(&b.0)));
                v
            })
            .collect()
    }

    fn objective(&self, assignment: &[usize]) -> T {
        assignment.iter().enumerate().map(|(s, &c)| self.slot_cost(s, c).expect("feasible assignment")).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedPair {
    pub trial: usize,
    pub sentence1: String,
    pub sentence2: String,
    pub model1: String,
    pub model2: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControversialPairSelection {
    pub trials: Vec<SelectedPair>,
    pub objective_value: f64,
    pub optimality: Optimality,
}

/// Kuhn augmenting-path matching of slots to candidates; returns the first
/// slot that cannot be matched, or the full matching.
fn feasibility_matching<T>(lists: &[Vec<(usize, T)>], n_cands: usize) -> std::result::Result<Vec<usize>, usize> {
    let mut owner: Vec<Option<usize>> = vec![None; n_cands];
    let mut assigned = vec![usize::MAX; lists.len()];
    fn augment<T>(slot: usize, lists: &[Vec<(usize, T)>], owner: &mut [Option<usize>], assigned: &mut [usize], seen: &mut [bool]) -> bool {
        for &(c, _) in &lists[slot] {
            if seen[c] {
                continue;
            }
            seen[c] = true;
            if owner[c].is_none() || augment(owner[c].unwrap(), lists, owner, assigned, seen) {
                owner[c] = Some(slot);
                assigned[slot] = c;
                return true;
            }
        }
        false
    }
    for slot in 0..lists.len() {
        let mut seen = vec![false; n_cands];
        if !augment(slot, lists, &mut owner, &mut assigned, &mut seen) {
            return Err(slot);
        }
    }
    Ok(assigned)
}

fn greedy<T: Real>(p: &AssignmentProblem<T>, lists: &[Vec<(usize, T)>]) -> Vec<usize> {
    let mut triples: Vec<(T, usize, usize)> =
        lists.iter().enumerate().flat_map(|(s, l)| l.iter().map(move |&(c, x)| (x, s, c))).collect();
    triples.sort_by(|a, b| total_cmp(&a.0, &b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assigned = vec![usize::MAX; lists.len()];
    let mut used = vec![false; p.candidates.len()];
    for (_, s, c) in triples {
        if assigned[s] == usize::MAX && !used[c] {
            assigned[s] = c;
            used[c] = true;
        }
    }
    if assigned.contains(&usize::MAX) {
        // Greedy painted itself into a corner; restart from a complete
        // matching and let local search lower the cost.
        if let Ok(m) = feasibility_matching(lists, p.candidates.len()) {
            return m;
        }
    }
    assigned
}

/// Replacement and pairwise swap moves until neither improves.
fn improve<T: Real>(p: &AssignmentProblem<T>, lists: &[Vec<(usize, T)>], assignment: &mut [usize]) {
    let eps = T::of(EPS);
    let mut used: HashSet<usize> = assignment.iter().copied().collect();
    loop {
        let mut changed = false;
        for s in 0..assignment.len() {
            let cur = p.slot_cost(s, assignment[s]).expect("feasible");
            if let Some(&(c, x)) = lists[s].iter().find(|(c, _)| !used.contains(c)) {
                if x < cur - eps {
                    used.remove(&assignment[s]);
                    used.insert(c);
                    assignment[s] = c;
                    changed = true;
                }
            }
        }
        for a in 0..assignment.len() {
            for b in a + 1..assignment.len() {
                let (ca, cb) = (assignment[a], assignment[b]);
                if let (Some(x), Some(y)) = (p.slot_cost(a, cb), p.slot_cost(b, ca)) {
                    let before = p.slot_cost(a, ca).expect("feasible") + p.slot_cost(b, cb).expect("feasible");
                    if x + y < before - eps {
                        assignment.swap(a, b);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return;
        }
    }
}

struct Search<'a, T> {
    lists: &'a [Vec<(usize, T)>],
    order: Vec<usize>,
    used: Vec<bool>,
    current: Vec<usize>,
    best: Vec<usize>,
    best_cost: T,
    nodes: u64,
    max_nodes: u64,
}

impl<T: Real> Search<'_, T> {
    /// Sum over the remaining slots of their cheapest unused candidate.
    fn bound(&self, depth: usize) -> Option<T> {
        let mut total = T::zero();
        for &s in &self.order[depth..] {
            total = total + self.lists[s].iter().find(|(c, _)| !self.used[*c])?.1;
        }
        Some(total)
    }

    fn dfs(&mut self, depth: usize, cost: T) {
        self.nodes += 1;
        if self.nodes > self.max_nodes {
            return;
        }
        if depth == self.order.len() {
            if cost < self.best_cost - T::of(EPS) {
                self.best_cost = cost;
                self.best = self.current.clone();
            }
            return;
        }
        match self.bound(depth) {
            Some(b) if cost + b < self.best_cost - T::of(EPS) => {}
            _ => return,
        }
        let s = self.order[depth];
        for i in 0..self.lists[s].len() {
            let (c, x) = self.lists[s][i];
            if self.used[c] {
                continue;
            }
            if cost + x >= self.best_cost - T::of(EPS) {
                break;
            }
            self.used[c] = true;
            self.current[s] = c;
            self.dfs(depth + 1, cost + x);
            self.used[c] = false;
        }
    }
}

/// Minimum-cost assignment of candidates to trial slots.
pub fn select_controversial_pairs<T: Real>(p: &AssignmentProblem<T>, budget: SolverBudget) -> Result<ControversialPairSelection> {
    let lists = p.feasible_lists();
    if let Err(slot) = feasibility_matching(&lists, p.candidates.len()) {
        let (m1, m2) = p.trials[slot / 2];
        return Err(SelectionError::Infeasible { trial: slot / 2, model1: p.models[m1].clone(), model2: p.models[m2].clone() });
    }
    let mut assignment = greedy(p, &lists);
    improve(p, &lists, &mut assignment);
    let mut optimality = Optimality::Heuristic;
    if p.candidates.len() <= budget.exact_threshold {
        let mut order: Vec<usize> = (0..lists.len()).collect();
        order.sort_by_key(|&s| (lists[s].len(), s));
        let mut search = Search {
            lists: &lists,
            order,
            used: vec![false; p.candidates.len()],
            current: vec![usize::MAX; lists.len()],
            best: assignment.clone(),
            best_cost: p.objective(&assignment) + T::of(1e-9),
            nodes: 0,
            max_nodes: budget.max_nodes,
        };
        search.dfs(0, T::zero());
        let exhausted = search.nodes <= search.max_nodes;
        if p.objective(&search.best) <= p.objective(&assignment) {
            assignment = search.best;
        }
        if exhausted {
            optimality = Optimality::ProvenOptimal;
        } else {
            log::warn!("branch and bound hit its node limit; returning the best assignment found");
        }
    }
    let selection = ControversialPairSelection {
        trials: (0..p.trials.len())
            .map(|j| {
                let (m1, m2) = p.trials[j];
                SelectedPair {
                    trial: j,
                    sentence1: p.candidates[assignment[2 * j]].clone(),
                    sentence2: p.candidates[assignment[2 * j + 1]].clone(),
                    model1: p.models[m1].clone(),
                    model2: p.models[m2].clone(),
                }
            })
            .collect(),
        objective_value: p.objective(&assignment).as_f64(),
        optimality,
    };
    audit_selection(p, &selection)?;
    Ok(selection)
}

/// Re-checks a selection against the raw ranks.
pub fn audit_selection<T: Real>(p: &AssignmentProblem<T>, sel: &ControversialPairSelection) -> Result<()> {
    let index = |id: &str| p.candidates.iter().position(|c| c == id).ok_or_else(|| SelectionError::Audit(format!("unknown sentence {id}")));
    let mut seen = HashSet::new();
    let half = T::of(0.5);
    for t in &sel.trials {
        let (m1, m2) = p.trials[t.trial];
        let (a, b) = (index(&t.sentence1)?, index(&t.sentence2)?);
        if p.ranks[a][m2] < half || p.ranks[b][m1] < half {
            return Err(SelectionError::Audit(format!("trial {} breaks a median constraint", t.trial)));
        }
        if !seen.insert(a) || !seen.insert(b) {
            return Err(SelectionError::Audit(format!("trial {} reuses a sentence", t.trial)));
        }
    }
    Ok(())
}

/// Equal-frequency bins over `values`, ties broken by `ids`; bin 0 holds
/// the lowest values.
pub fn equal_frequency_bins<T: Real>(ids: &[String], values: &[T], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| total_cmp(&values[a], &values[b]).then_with(|| ids[a].cmp(&ids[b])));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / n;
    }
    out
}

/// One candidate triplet for stratified selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratifiedItem<T> {
    pub controversiality: T,
    pub decile1: usize,
    pub decile2: usize,
}

/// Picks `k` items maximizing total controversiality such that the
/// selected items cover each of the `k` deciles exactly once under both
/// models. Returns item indices ordered by model-1 decile.
pub fn select_triplets_stratified<T: Real>(items: &[StratifiedItem<T>], k: usize) -> Result<Vec<usize>> {
    let mut by_d1: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut has_d2 = vec![false; k];
    for (i, it) in items.iter().enumerate() {
        if it.decile1 >= k || it.decile2 >= k {
            return Err(SelectionError::BadRanks(format!("decile index out of range in item {i}")));
        }
        by_d1[it.decile1].push(i);
        has_d2[it.decile2] = true;
    }
    let empty1: Vec<usize> = (0..k).filter(|&d| by_d1[d].is_empty()).collect();
    let empty2: Vec<usize> = (0..k).filter(|&d| !has_d2[d]).collect();
    if !empty1.is_empty() || !empty2.is_empty() {
        return Err(SelectionError::EmptyDeciles { empty1, empty2 });
    }
    for list in &mut by_d1 {
        list.sort_by(|&a, &b| total_cmp(&items[b].controversiality, &items[a].controversiality).then(a.cmp(&b)));
    }
    // Rows with fewer options first prune earlier.
    let mut rows: Vec<usize> = (0..k).collect();
    rows.sort_by_key(|&d| (by_d1[d].len(), d));
    let suffix_max: Vec<T> = {
        let mut v = vec![T::zero(); k + 1];
        for i in (0..k).rev() {
            v[i] = v[i + 1] + items[by_d1[rows[i]][0]].controversiality;
        }
        v
    };
    struct St<'a, T> {
        items: &'a [StratifiedItem<T>],
        by_d1: &'a [Vec<usize>],
        rows: &'a [usize],
        suffix_max: &'a [T],
        used2: Vec<bool>,
        current: Vec<usize>,
        best: Option<(T, Vec<usize>)>,
    }
    impl<T: Real> St<'_, T> {
        fn dfs(&mut self, depth: usize, total: T) {
            if depth == self.rows.len() {
                if self.best.as_ref().is_none_or(|(b, _)| total > *b + T::of(EPS)) {
                    self.best = Some((total, self.current.clone()));
                }
                return;
            }
            if let Some((b, _)) = &self.best {
                if total + self.suffix_max[depth] <= *b + T::of(EPS) {
                    return;
                }
            }
            for &i in &self.by_d1[self.rows[depth]] {
                let d2 = self.items[i].decile2;
                if self.used2[d2] {
                    continue;
                }
                self.used2[d2] = true;
                self.current.push(i);
                self.dfs(depth + 1, total + self.items[i].controversiality);
                self.current.pop();
                self.used2[d2] = false;
            }
        }
    }
    let mut st = St { items, by_d1: &by_d1, rows: &rows, suffix_max: &suffix_max, used2: vec![false; k], current: Vec::new(), best: None };
    st.dfs(0, T::zero());
    let (_, mut chosen) = st.best.ok_or(SelectionError::NoDecileMatching)?;
    chosen.sort_by_key(|&i| items[i].decile1);
    Ok(chosen)
}
