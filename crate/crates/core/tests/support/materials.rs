//! Paper-shape stimulus materials built from placeholder sentences: nine
//! models, 36 model pairs, ten pairs and ten triplets per model pair.

#![allow(dead_code)]

use contstim_core::corpus::{Origin, Sentence};
use contstim_core::experiment::{Materials, NaturalPair};
use contstim_core::synthesis::{Triplet, TripletScores};

pub fn sentence(tag: &str, origin: Origin) -> Sentence {
    let words = (0..8).map(|i| format!("{tag}w{i}")).collect();
    Sentence::unchecked(tag, words, origin)
}

pub fn model_pairs(models: usize) -> Vec<(String, String)> {
    (0..models).flat_map(|a| (a + 1..models).map(move |b| (format!("m{a}"), format!("m{b}")))).collect()
}

pub fn paper_shape(groups: usize) -> Materials {
    let model_pairs = model_pairs(9);
    let mut m = Materials { model_pairs: model_pairs.clone(), ..Materials::default() };
    for (p, (m1, m2)) in model_pairs.iter().enumerate() {
        for j in 0..groups {
            m.controversial_pairs.push(NaturalPair {
                model1: m1.clone(),
                model2: m2.clone(),
                sentence1: sentence(&format!("cp{p}x{j}a"), Origin::Natural),
                sentence2: sentence(&format!("cp{p}x{j}b"), Origin::Natural),
            });
            let n = sentence(&format!("tn{p}x{j}"), Origin::Natural);
            m.triplets.push(Triplet {
                s1: sentence(&format!("ts{p}x{j}a"), Origin::Synthetic),
                s2: sentence(&format!("ts{p}x{j}b"), Origin::Synthetic),
                n,
                m1: m1.clone(),
                m2: m2.clone(),
                scores: TripletScores { n_m1: -50.0, n_m2: -50.0, s1_m1: -60.0, s1_m2: -50.0, s2_m1: -50.0, s2_m2: -60.0 },
                seed: j as u64,
                trace1: Vec::new(),
                trace2: Vec::new(),
            });
        }
    }
    for k in 0..9 * groups {
        m.random_pairs.push((sentence(&format!("ra{k}"), Origin::Natural), sentence(&format!("rb{k}"), Origin::Natural)));
    }
    for k in 0..12 * groups {
        m.control_sources.push(sentence(&format!("cs{k}"), Origin::Natural));
    }
    m
}
