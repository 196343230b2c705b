mod common;

use std::collections::BTreeSet;

use common::*;
use serde_json::Value;
use svpo::env::{ActionId, Env};
use svpo::mcts::{Forest, SearchTree};
use svpo::pairs::{extract_pairs, label_correct, PairCounts};

#[test]
fn extraction_matches_brute_force_on_fixture_forests() {
    let mut nonempty = 0;
    let mut kinds = BTreeSet::new();
    for (mut forest, q) in oracle::fixture_forests() {
        label_correct(&mut forest);
        let dump: Value = serde_json::from_str(&forest.to_json().unwrap()).unwrap();
        let env = Env::default();
        let reloaded = Forest::from_json(&forest.to_json().unwrap(), &Env { max_depth: 8 }, &q).unwrap();
        for counts in [
            PairCounts::default(),
            PairCounts {
                n_sibling: 1,
                n_cousin: 3,
                n_terminal: 2,
            },
        ] {
            for seed in [0, 17] {
                let got = oracle::rows_of(&forest, counts, seed);
                assert_eq!(got, oracle::enumerate(&dump, counts, seed), "question {}", q.id);
                assert_eq!(got, oracle::rows_of(&reloaded, counts, seed));
                nonempty += usize::from(!got.is_empty());
                kinds.extend(got.iter().map(|r| r.4));
                for row in &got {
                    let w: Vec<ActionId> = row.0.iter().map(|&a| ActionId(a)).collect();
                    assert!(env.replay(&q, &w).is_ok());
                }
            }
        }
    }
    assert!(nonempty >= 40, "{nonempty}");
    assert_eq!(kinds.len(), 3);
}

#[test]
fn all_correct_forest_has_no_pairs() {
    let env = Env::default();
    let q = question(0, 2, &[0, 1, 7, 9], &[1, 7]);
    let mut t = SearchTree::new(&env, &q);
    let a = t.add_child(&env, &q, 0, ActionId(1), 0.5).unwrap();
    let b = t.add_child(&env, &q, a, ActionId(7), 0.5).unwrap();
    let c = t.add_child(&env, &q, b, ActionId(10), 0.5).unwrap();
    t.backup(c, 1.0);
    let mut f = Forest::new(0);
    f.trees.push(t);
    label_correct(&mut f);
    assert!(extract_pairs(&f, PairCounts::default(), 0).unwrap().is_empty());
    let dump: Value = serde_json::from_str(&f.to_json().unwrap()).unwrap();
    assert!(oracle::enumerate(&dump, PairCounts::default(), 0).is_empty());
}
