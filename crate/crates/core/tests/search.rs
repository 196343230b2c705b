mod common;

use common::*;
use rand::Rng;
use svpo::env::Env;
use svpo::mcts::{build_forest, SearchConfig};
use svpo::pairs::label_correct;

#[test]
fn bookkeeping_matches_backup_log() {
    let env = Env::default();
    let mut r = rng(11);
    for i in 0..50u64 {
        let q = random_question(&mut r, i);
        let params = random_params(&env, 8, 0.5, r.gen());
        let config = SearchConfig {
            max_simulations: r.gen_range(1..80),
            max_trees: 3,
            ..SearchConfig::default()
        };
        let mut forest = build_forest(&q, &params, &config, r.gen()).unwrap();
        label_correct(&mut forest);
        for tree in &forest.trees {
            assert!(!tree.backup_log.is_empty());
            assert!(tree::replay_error(tree) < 1e-9);
            tree::check_structure(tree);
        }
    }
}

#[test]
fn one_step_answer_is_found() {
    let env = Env::default();
    // truth = start + 1, reachable by one op then an exact answer
    let q = question(0, 4, &[0, 1, 5, 7], &[0]);
    let params = random_params(&env, 8, 0.1, 3);
    let config = SearchConfig {
        max_trees: 1,
        ..SearchConfig::default()
    };
    let forest = build_forest(&q, &params, &config, 0).unwrap();
    assert!(forest.trees[0].correct_solutions().count() >= 1);
    assert!(solvable(&q, env.max_depth));
}

#[test]
fn forest_respects_tree_budget() {
    let env = Env::default();
    let mut r = rng(4);
    for i in 0..10u64 {
        let q = random_question(&mut r, i);
        let params = random_params(&env, 8, 0.5, i);
        let forest = build_forest(&q, &params, &SearchConfig::default(), 5).unwrap();
        assert!(forest.trees.len() <= 10);
        assert!(forest.trees.len() == 10 || forest.distinct_correct().len() >= 4);
        assert_eq!(forest, build_forest(&q, &params, &SearchConfig::default(), 5).unwrap());
    }
}
