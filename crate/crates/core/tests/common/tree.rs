//! Replay-log checks of search statistics.

use svpo::mcts::SearchTree;

fn ancestors_or_self(tree: &SearchTree, mut n: usize) -> Vec<usize> {
    let mut out = vec![n];
    while let Some(p) = tree.nodes[n].parent {
        out.push(p);
        n = p;
    }
    out
}

/// Per node: visit count, sum, min and max of every value backed up through it.
fn replay(tree: &SearchTree) -> Vec<(u32, f64, f64, f64)> {
    let mut acc = vec![(0u32, 0.0, f64::INFINITY, f64::NEG_INFINITY); tree.nodes.len()];
    for &(leaf, v) in &tree.backup_log {
        for a in ancestors_or_self(tree, leaf) {
            let e = &mut acc[a];
            e.0 += 1;
            e.1 += v;
            e.2 = e.2.min(v);
            e.3 = e.3.max(v);
        }
    }
    acc
}

/// Largest `|Q*N - sum of backed values|` over the tree; infinite when a
/// visit count disagrees with the log.
pub fn replay_error(tree: &SearchTree) -> f64 {
    replay(tree)
        .iter()
        .zip(&tree.nodes)
        .map(|(&(n, sum, _, _), node)| {
            if n != node.visits {
                f64::INFINITY
            } else {
                (node.q * node.visits as f64 - sum).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Visit conservation, Q within the range of backed values, and no positive
/// Q without a correct terminal below. Needs labels.
pub fn check_structure(tree: &SearchTree) {
    let log = replay(tree);
    for n in &tree.nodes {
        let child_visits: u32 = tree.nodes.iter().filter(|c| c.parent == Some(n.id)).map(|c| c.visits).sum();
        assert!(n.visits >= child_visits);
        let (_, _, lo, hi) = log[n.id];
        if n.visits > 0 {
            assert!(n.q >= lo - 1e-12 && n.q <= hi + 1e-12);
        }
        if !n.correct {
            assert!(n.q <= 0.0, "node {} has Q {} without a correct terminal below", n.id, n.q);
        }
        if let Some(r) = n.reward {
            assert!(n.terminal);
            if n.visits > 0 {
                assert_eq!(n.q, r.value());
            }
        }
    }
}
