mod support;

use std::collections::HashSet;
use std::time::Instant;

use contstim_core::corpus::{Origin, RepeatableWords, Sentence};
use contstim_core::selection::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles;

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize, models: usize, pairs: &[(usize, usize)], per_pair: usize) -> AssignmentProblem<f64> {
    let ranks = oracles::random_ranks(rng, n, models);
    AssignmentProblem::new(labels("s", n), labels("m", models), ranks, pairs, per_pair).unwrap()
}

fn check_against_oracle(p: &AssignmentProblem<f64>, oracle: Option<f64>) {
    match (select_controversial_pairs(p, SolverBudget::default()), oracle) {
        (Ok(sel), Some(best)) => {
            assert!((sel.objective_value - best).abs() < 1e-9, "solver {} vs brute force {best}", sel.objective_value);
            assert_eq!(sel.optimality, Optimality::ProvenOptimal);
            audit_selection(p, &sel).unwrap();
        }
        (Err(SelectionError::Infeasible { .. }), None) => {}
        (got, want) => panic!("solver {got:?}, brute force {want:?}"),
    }
}

#[test]
fn reduced_oracle_agrees_with_full_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let n = rng.gen_range(4..=9);
        let p = random_problem(&mut rng, n, 3, &[(0, 1), (1, 2), (0, 2)], 1);
        assert_eq!(oracles::pairs_exhaustive(&p).map(|x| (x * 1e9).round()), oracles::pairs_reduced(&p).map(|x| (x * 1e9).round()));
    }
}

#[test]
fn exact_solver_matches_brute_force_on_random_instances() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..60 {
        let n = rng.gen_range(10..=30);
        let trials = rng.gen_range(1..=3);
        let models = rng.gen_range(2..=4);
        let pairs: Vec<(usize, usize)> = (0..trials)
            .map(|_| {
                let a = rng.gen_range(0..models);
                let b = (a + rng.gen_range(1..models)) % models;
                (a, b)
            })
            .collect();
        let p = random_problem(&mut rng, n, models, &pairs, 1);
        let oracle = if n <= 14 { oracles::pairs_exhaustive(&p) } else { oracles::pairs_reduced(&p) };
        assert!(oracle.is_some(), "case {case} should be feasible with balanced ranks");
        check_against_oracle(&p, oracle);
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn ties_at_the_median_count_as_accepted() {
    // Ranks on a coarse grid put many candidates exactly at 0.5.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let n = rng.gen_range(6..=12);
        let ranks: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.gen_range(0..=4) as f64 / 4.0).collect()).collect();
        let p = AssignmentProblem::new(labels("s", n), labels("m", 2), ranks, &[(0, 1)], 2).unwrap();
        check_against_oracle(&p, oracles::pairs_exhaustive(&p));
    }
}

#[test]
fn heuristic_path_is_feasible_and_never_beats_the_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let budget = SolverBudget { exact_threshold: 0, ..SolverBudget::default() };
    for _ in 0..20 {
        let p = random_problem(&mut rng, 24, 3, &[(0, 1), (1, 2), (2, 0)], 1);
        let sel = select_controversial_pairs(&p, budget).unwrap();
        assert_eq!(sel.optimality, Optimality::Heuristic);
        audit_selection(&p, &sel).unwrap();
        assert!(sel.objective_value >= oracles::pairs_reduced(&p).unwrap() - 1e-9);
    }
}

#[test]
fn node_limit_downgrades_to_heuristic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_problem(&mut rng, 30, 3, &[(0, 1), (1, 2), (2, 0)], 1);
    let sel = select_controversial_pairs(&p, SolverBudget { exact_threshold: 60, max_nodes: 3 }).unwrap();
    assert_eq!(sel.optimality, Optimality::Heuristic);
    audit_selection(&p, &sel).unwrap();
}

#[test]
fn audit_rejects_tampered_selections() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_problem(&mut rng, 20, 2, &[(0, 1)], 2);
    let sel = select_controversial_pairs(&p, SolverBudget::default()).unwrap();
    let mut dup = sel.clone();
    dup.trials[1].sentence1 = dup.trials[0].sentence1.clone();
    assert!(matches!(audit_selection(&p, &dup), Err(SelectionError::Audit(_))));
    let mut swapped = sel.clone();
    let t0 = &mut swapped.trials[0];
    std::mem::swap(&mut t0.sentence1, &mut t0.sentence2);
    // Swapping the two sides breaks both cross constraints unless a
    // sentence sits above the median under both models.
    let idx = |id: &str| p.candidates.iter().position(|c| c == id).unwrap();
    let (a, b) = (idx(&sel.trials[0].sentence1), idx(&sel.trials[0].sentence2));
    if p.ranks[a][0] < 0.5 || p.ranks[b][1] < 0.5 {
        assert!(audit_selection(&p, &swapped).is_err());
    }
}

#[test]
fn paper_shape_instance_satisfies_constraints() {
    // 9 models give 36 pairs; 10 trials each is 720 sentences.
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let models = 9;
    let pairs: Vec<(usize, usize)> = (0..models).flat_map(|a| (a + 1..models).map(move |b| (a, b))).collect();
    assert_eq!(pairs.len(), 36);
    let p = random_problem(&mut rng, 2000, models, &pairs, 10);
    assert_eq!(p.trials.len(), 360);
    let sel = select_controversial_pairs(&p, SolverBudget::default()).unwrap();
    assert_eq!(sel.optimality, Optimality::Heuristic);
    let mut seen = HashSet::new();
    for t in &sel.trials {
        let (m1, m2) = p.trials[t.trial];
        let (a, b) = (p.candidates.iter().position(|c| *c == t.sentence1).unwrap(), p.candidates.iter().position(|c| *c == t.sentence2).unwrap());
        assert!(p.ranks[a][m2] >= 0.5 && p.ranks[b][m1] >= 0.5);
        assert!(seen.insert(a) && seen.insert(b));
    }
    assert_eq!(seen.len(), 720);
}

#[test]
fn infeasibility_is_reported_before_search() {
    // Every candidate is below the median under model 1, so nothing can
    // fill slot 2 of a (0, 1) trial.
    let ranks = vec![vec![0.1, 0.9], vec![0.2, 0.7], vec![0.3, 0.6]];
    let p = AssignmentProblem::new(labels("s", 3), labels("m", 2), ranks, &[(0, 1)], 1).unwrap();
    assert!(matches!(select_controversial_pairs(&p, SolverBudget::default()), Err(SelectionError::Infeasible { trial: 0, .. })));
    // Enough feasible candidates per slot, but not enough distinct ones.
    let ranks = vec![vec![0.6, 0.6], vec![0.1, 0.9], vec![0.9, 0.1]];
    let p = AssignmentProblem::new(labels("s", 3), labels("m", 2), ranks, &[(0, 1)], 2).unwrap();
    assert!(matches!(select_controversial_pairs(&p, SolverBudget::default()), Err(SelectionError::Infeasible { .. })));
}

#[test]
fn problem_validation() {
    assert!(AssignmentProblem::new(labels("s", 1), labels("m", 2), vec![vec![0.5, 1.5]], &[(0, 1)], 1).is_err());
    assert!(AssignmentProblem::new(labels("s", 1), labels("m", 2), vec![vec![0.5, 0.5]], &[(0, 0)], 1).is_err());
    assert!(AssignmentProblem::new(labels("s", 1), labels("m", 2), vec![vec![0.5, 0.5]], &[(0, 2)], 1).is_err());
    assert!(AssignmentProblem::new(labels("s", 2), labels("m", 2), vec![vec![0.5, 0.5]], &[(0, 1)], 1).is_err());
}

#[test]
fn prune_candidates_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let words = labels("w", 12);
    let repeatable = RepeatableWords::new(["w0"]);
    let sentences: Vec<Sentence> = (0..100)
        .map(|i| Sentence { id: format!("n{i}"), words: (0..8).map(|_| words[rng.gen_range(0..12)].clone()).collect(), origin: Origin::Natural })
        .collect();
    let ranks: Vec<Vec<f64>> = (0..100).map(|_| (0..3).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect()).collect();
    let kept = prune_candidates(&sentences, |s| s.id[1..].parse::<usize>().ok().map(|i| ranks[i].clone()), &repeatable);

    let mut expect = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        let mut split = false;
        for a in 0..3 {
            for b in 0..3 {
                if ranks[i][a] < 0.5 && ranks[i][b] >= 0.5 {
                    split = true;
                }
            }
        }
        let mut repeat = false;
        for x in 0..8 {
            for y in x + 1..8 {
                if s.words[x] == s.words[y] && s.words[x] != "w0" {
                    repeat = true;
                }
            }
        }
        if split && !repeat {
            expect.push(s.id.clone());
        }
    }
    assert_eq!(kept, expect);
}

#[test]
fn prune_candidates_drops_unranked_sentences() {
    let s = Sentence { id: "x".into(), words: labels("w", 8), origin: Origin::Natural };
    assert!(prune_candidates::<f64>(&[s], |_| None, &RepeatableWords::default()).is_empty());
}

#[test]
fn stratified_selection_matches_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..25 {
        let items = oracles::random_stratified(&mut rng, 30, 10);
        let chosen = select_triplets_stratified(&items, 10).unwrap();
        let total: f64 = chosen.iter().map(|&i| items[i].controversiality).sum();
        let best = oracles::stratified_exhaustive(&items, 10).unwrap();
        assert!((total - best).abs() < 1e-9, "{total} vs {best}");
        let d1: HashSet<usize> = chosen.iter().map(|&i| items[i].decile1).collect();
        let d2: HashSet<usize> = chosen.iter().map(|&i| items[i].decile2).collect();
        assert_eq!((d1.len(), d2.len()), (10, 10));
        assert!(chosen.windows(2).all(|w| items[w[0]].decile1 < items[w[1]].decile1));
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn stratified_selection_handles_the_full_hundred() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let items = oracles::random_stratified(&mut rng, 100, 10);
    let a = select_triplets_stratified(&items, 10).unwrap();
    assert_eq!(a, select_triplets_stratified(&items, 10).unwrap());
    assert_eq!(a.len(), 10);
}

#[test]
fn stratified_without_a_matching_is_an_error() {
    // Both deciles nonempty on each side, but every item shares model-2
    // decile 0, so no perfect matching exists.
    let items = [StratifiedItem { controversiality: 1.0, decile1: 0, decile2: 0 },
        StratifiedItem { controversiality: 1.0, decile1: 1, decile2: 0 },
        StratifiedItem { controversiality: 1.0, decile1: 0, decile2: 1 }];
    assert_eq!(select_triplets_stratified(&items[..2], 2), Err(SelectionError::EmptyDeciles { empty1: vec![], empty2: vec![1] }));
    let items = vec![
        StratifiedItem { controversiality: 1.0, decile1: 0, decile2: 0 },
        StratifiedItem { controversiality: 1.0, decile1: 0, decile2: 1 },
        StratifiedItem { controversiality: 1.0, decile1: 1, decile2: 0 },
        StratifiedItem { controversiality: 1.0, decile1: 1, decile2: 0 },
    ];
    assert!(select_triplets_stratified(&items, 2).is_ok());
    let items = vec![
        StratifiedItem { controversiality: 1.0, decile1: 0, decile2: 0 },
        StratifiedItem { controversiality: 1.0, decile1: 1, decile2: 0 },
        StratifiedItem { controversiality: 1.0, decile1: 2, decile2: 1 },
        StratifiedItem { controversiality: 1.0, decile1: 2, decile2: 2 },
    ];
    assert_eq!(select_triplets_stratified(&items, 3), Err(SelectionError::NoDecileMatching));
}

#[test]
fn decile_bins_are_equal_frequency() {
    let ids = labels("s", 95);
    let values: Vec<f64> = (0..95).map(|i| ((i * 37) % 95) as f64).collect();
    let bins = equal_frequency_bins(&ids, &values, 10);
    for d in 0..10 {
        let c = bins.iter().filter(|&&b| b == d).count();
        assert!((9..=10).contains(&c), "decile {d} holds {c}");
    }
    for i in 0..95 {
        for j in 0..95 {
            if values[i] < values[j] {
                assert!(bins[i] <= bins[j]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exact_path_is_optimal_on_small_instances(seed in any::<u64>(), n in 10usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, n, 3, &[(0, 1), (1, 2)], 1);
        check_against_oracle(&p, oracles::pairs_exhaustive(&p));
    }

    #[test]
    fn heuristic_never_worse_than_greedy_init(seed in any::<u64>()) {
        // Greedy initialization: repeatedly take the globally cheapest
        // (slot, candidate) pair among free slots and unused candidates.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 40, 3, &[(0, 1), (1, 2), (2, 0)], 2);
        let mut used = [false; 40];
        let mut filled = vec![false; p.slot_count()];
        let mut greedy = 0.0;
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for s in (0..p.slot_count()).filter(|&s| !filled[s]) {
                for c in (0..40).filter(|&c| !used[c]) {
                    if let Some(x) = p.slot_cost(s, c) {
                        if best.is_none_or(|b| x < b.0) {
                            best = Some((x, s, c));
                        }
                    }
                }
            }
            let Some((x, s, c)) = best else { break };
            filled[s] = true;
            used[c] = true;
            greedy += x;
        }
        let ok = filled.iter().all(|&f| f);
        let sel = select_controversial_pairs(&p, SolverBudget { exact_threshold: 0, ..SolverBudget::default() }).unwrap();
        if ok {
            prop_assert!(sel.objective_value <= greedy + 1e-9);
        }
    }
}
