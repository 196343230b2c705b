//! Brute-force reading of the pair construction rule over forest dumps.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use svpo::env::{ActionId, Env, Question};
use svpo::mcts::{build_forest, Forest, SearchConfig, SearchTree};
use svpo::pairs::{classify, extract_pairs, selection_key, PairCounts, PairKind};

use super::*;

/// A pair as the oracle sees it: winner, loser, their Q values and kind.
pub type Row = (Vec<u8>, Vec<u8>, f64, f64, PairKind);

struct Node {
    parent: Option<usize>,
    steps: Vec<u8>,
    q: f64,
    terminal: bool,
    correct: bool,
}

/// Reads a tree from the forest dump and recomputes paths and correctness.
fn read_tree(tree: &Value) -> Vec<Node> {
    let raw = tree["nodes"].as_array().unwrap();
    let mut nodes: Vec<Node> = Vec::new();
    for (i, n) in raw.iter().enumerate() {
        assert_eq!(n["id"].as_u64().unwrap() as usize, i);
        let parent = n["parent"].as_u64().map(|p| p as usize);
        let steps = match parent {
            Some(p) => {
                let mut s = nodes[p].steps.clone();
                s.push(n["action"].as_u64().unwrap() as u8);
                s
            }
            None => Vec::new(),
        };
        nodes.push(Node {
            parent,
            steps,
            q: n["Q"].as_f64().unwrap(),
            terminal: n["terminal"].as_bool().unwrap(),
            correct: false,
        });
    }
    let winners: Vec<usize> = raw
        .iter()
        .enumerate()
        .filter(|(_, n)| n["terminal"].as_bool().unwrap() && n["reward"].as_i64() == Some(1))
        .map(|(i, _)| i)
        .collect();
    for i in 0..nodes.len() {
        let prefix = nodes[i].steps.clone();
        nodes[i].correct = winners.iter().any(|&w| nodes[w].steps.starts_with(&prefix) && is_descendant(&nodes, w, i));
    }
    nodes
}

fn is_descendant(nodes: &[Node], mut n: usize, anc: usize) -> bool {
    loop {
        if n == anc {
            return true;
        }
        match nodes[n].parent {
            Some(p) => n = p,
            None => return false,
        }
    }
}

/// Brute-force reading of the pair construction rule over the JSON dump.
pub fn enumerate(forest: &Value, counts: PairCounts, seed: u64) -> Vec<Row> {
    let qid = forest["question_id"].as_u64().unwrap();
    let trees: Vec<Vec<Node>> = forest["trees"].as_array().unwrap().iter().map(read_tree).collect();
    let mut correct_prefixes: HashSet<Vec<u8>> = HashSet::new();
    for t in &trees {
        for n in t.iter().filter(|n| n.terminal && n.correct) {
            for k in 0..=n.steps.len() {
                correct_prefixes.insert(n.steps[..k].to_vec());
            }
        }
    }
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut rows = Vec::new();
    let negative = |used: &HashSet<(usize, usize)>, t: usize, i: usize| {
        let n = &trees[t][i];
        n.parent.is_some() && !n.correct && !used.contains(&(t, i)) && !correct_prefixes.contains(&n.steps)
    };
    let choose = |mut c: Vec<(usize, usize)>, k: usize| {
        c.sort_by_key(|&(t, i)| (selection_key(seed, qid, t, i), t, i));
        c.into_iter().take(k).collect::<Vec<_>>()
    };
    for t in 0..trees.len() {
        let tree = &trees[t];
        if !tree[0].correct {
            continue;
        }
        let mut n = 0;
        while !tree[n].terminal {
            let kids: Vec<usize> = (0..tree.len()).filter(|&c| tree[c].parent == Some(n)).collect();
            let mut best: Option<usize> = None;
            for &c in &kids {
                if tree[c].correct && best.map_or(true, |b| tree[c].q > tree[b].q) {
                    best = Some(c);
                }
            }
            let Some(w) = best else { break };
            let level = tree[w].steps.len();
            let mut level_losers = Vec::new();

            let sib = choose(kids.iter().filter(|&&c| negative(&used, t, c)).map(|&c| (t, c)).collect(), counts.n_sibling);
            used.extend(sib.iter().copied());
            level_losers.extend(sib);

            let cous = choose(
                (0..tree.len())
                    .filter(|&c| tree[c].steps.len() == level && tree[c].parent != Some(n) && negative(&used, t, c))
                    .map(|c| (t, c))
                    .collect(),
                counts.n_cousin,
            );
            used.extend(cous.iter().copied());
            level_losers.extend(cous);

            let term = choose(
                (0..tree.len())
                    .filter(|&c| tree[c].terminal && tree[c].steps.len() != level && negative(&used, t, c))
                    .map(|c| (t, c))
                    .collect(),
                counts.n_terminal,
            );
            used.extend(term.iter().copied());
            level_losers.extend(term);

            if level_losers.is_empty() {
                let others: Vec<(usize, usize)> = (0..trees.len())
                    .filter(|&u| u != t)
                    .flat_map(|u| (0..trees[u].len()).map(move |i| (u, i)))
                    .collect();
                let same_prefix: Vec<_> = others
                    .iter()
                    .copied()
                    .filter(|&(u, i)| {
                        let s = &trees[u][i].steps;
                        s.len() == level && s[..level - 1] == tree[n].steps[..] && negative(&used, u, i)
                    })
                    .collect();
                let same_level: Vec<_> = others
                    .iter()
                    .copied()
                    .filter(|&(u, i)| trees[u][i].steps.len() == level && negative(&used, u, i))
                    .collect();
                let other_depth: Vec<_> = others
                    .iter()
                    .copied()
                    .filter(|&(u, i)| trees[u][i].terminal && trees[u][i].steps.len() != level && negative(&used, u, i))
                    .collect();
                if let Some(tier) = [same_prefix, same_level, other_depth].into_iter().find(|v| !v.is_empty()) {
                    let pick = choose(tier, 1);
                    used.extend(pick.iter().copied());
                    level_losers.extend(pick);
                }
            }
            for (u, i) in level_losers {
                let wn = &tree[w];
                let ln = &trees[u][i];
                let kind = if wn.steps.len() != ln.steps.len() {
                    PairKind::Terminal
                } else if wn.steps[..level - 1] == ln.steps[..level - 1] {
                    PairKind::Sibling
                } else {
                    PairKind::Cousin
                };
                rows.push((wn.steps.clone(), ln.steps.clone(), wn.q, ln.q, kind));
            }
            n = w;
        }
    }
    rows
}

pub fn rows_of(forest: &Forest, counts: PairCounts, seed: u64) -> Vec<Row> {
    extract_pairs(forest, counts, seed)
        .unwrap()
        .into_iter()
        .map(|p| {
            assert_eq!(p.kind, classify(&p.winner, &p.loser));
            (
                p.winner.iter().map(|a| a.0).collect(),
                p.loser.iter().map(|a| a.0).collect(),
                p.q_w,
                p.q_l,
                p.kind,
            )
        })
        .collect()
}

/// Grows a tree by random legal steps from random existing nodes, then
/// backs up every terminal's reward and a 0 for every other leaf.
fn grown_tree(env: &Env, q: &Question, r: &mut ChaCha8Rng, size: usize, chain_first: bool) -> SearchTree {
    let mut t = SearchTree::new(env, q);
    if chain_first {
        let mut n = 0;
        for &id in q.spec.chain.iter().chain(&[ActionId(10)]) {
            n = t.add_child(env, q, n, id, 0.2).unwrap();
        }
    }
    let mut attempts = 0;
    while t.len() < size && attempts < 10 * size {
        attempts += 1;
        let parent = r.gen_range(0..t.len());
        let node = t.node(parent);
        if node.terminal || node.state.is_answered() {
            continue;
        }
        let acts = env.legal_actions(q, &node.state).unwrap();
        let a = acts[r.gen_range(0..acts.len())].id;
        if t.child_with_action(parent, a).is_none() {
            t.add_child(env, q, parent, a, 0.2).unwrap();
        }
    }
    let leaves: Vec<usize> = (0..t.len()).filter(|&i| (0..t.len()).all(|c| t.node(c).parent != Some(i))).collect();
    for _ in 0..2 {
        for &l in &leaves {
            let v = t.node(l).reward.map_or(0.0, |x| x.value());
            t.backup(l, v);
        }
    }
    t
}

pub fn fixture_forests() -> Vec<(Forest, Question)> {
    let env = Env { max_depth: 5 };
    let mut out = Vec::new();
    let mut r = rng(2024);
    for i in 0..12u64 {
        let q = random_question(&mut r, i);
        let mut f = Forest::new(q.id);
        let n_trees = 1 + (i as usize % 3);
        for k in 0..n_trees {
            let size = r.gen_range(4..30);
            f.trees.push(grown_tree(&env, &q, &mut r, size, (i + k as u64) % 4 != 3));
        }
        out.push((f, q));
    }
    let search_env = Env::default();
    for i in 12..20u64 {
        let q = random_question(&mut r, i);
        let params = random_params(&search_env, 8, 0.5, i);
        let config = SearchConfig {
            max_simulations: 10 + 5 * i as usize,
            max_trees: 1 + i as usize % 4,
            ..SearchConfig::default()
        };
        out.push((build_forest(&q, &params, &config, i).unwrap(), q));
    }
    out
}

