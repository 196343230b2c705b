//! Step-level preference pairs, value targets and SFT solutions extracted
//! from labeled search forests.
//!
//! Pair construction walks each tree top-down along the highest-Q correct
//! child. At every level the winner prefix is paired against non-correct
//! siblings, same-level cousins and terminal nodes at other depths. Random
//! choices are made by ranking candidates with a keyed hash of
//! `(seed, question, tree, node)`, which draws without replacement and is
//! reproducible from the dumped forest alone.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::env::{ActionId, Reward, Solution};
use crate::error::{Error, Result};
use crate::mcts::{Forest, NodeId, SearchTree};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Sibling,
    Cousin,
    Terminal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub question_id: u64,
    pub winner: Vec<ActionId>,
    pub loser: Vec<ActionId>,
    pub kind: PairKind,
    pub q_w: f64,
    pub q_l: f64,
    /// 1-based depth of the first step where the prefixes differ.
    pub level: usize,
}

impl PreferencePair {
    pub fn new(question_id: u64, winner: Vec<ActionId>, loser: Vec<ActionId>, q_w: f64, q_l: f64) -> Self {
        let kind = classify(&winner, &loser);
        let level = common_prefix(&winner, &loser) + 1;
        PreferencePair {
            question_id,
            winner,
            loser,
            kind,
            q_w,
            q_l,
            level,
        }
    }
}

fn common_prefix(a: &[ActionId], b: &[ActionId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Kind from the shape of the two prefixes: equal length sharing all but the
/// last step is a sibling pair, other equal-length pairs are cousins, and
/// unequal lengths are terminal pairs.
pub fn classify(winner: &[ActionId], loser: &[ActionId]) -> PairKind {
    if winner.len() != loser.len() {
        PairKind::Terminal
    } else if common_prefix(winner, loser) + 1 == winner.len() {
        PairKind::Sibling
    } else {
        PairKind::Cousin
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTarget {
    pub question_id: u64,
    pub prefix: Vec<ActionId>,
    pub target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub n_sibling: usize,
    pub n_cousin: usize,
    pub n_terminal: usize,
}

impl Default for PairCounts {
    fn default() -> Self {
        PairCounts {
            n_sibling: 2,
            n_cousin: 1,
            n_terminal: 1,
        }
    }
}

/// Marks every node with a correct terminal in its subtree (itself included).
pub fn label_correct(forest: &mut Forest) {
    for tree in &mut forest.trees {
        for n in &mut tree.nodes {
            n.correct = false;
        }
        for i in 0..tree.nodes.len() {
            if tree.nodes[i].terminal && tree.nodes[i].reward == Some(Reward::Correct) {
                let mut cur = Some(i);
                while let Some(id) = cur {
                    tree.nodes[id].correct = true;
                    cur = tree.nodes[id].parent;
                }
            }
        }
    }
    forest.labeled = true;
}

/// Ranking key used for every random choice during pair extraction.
pub fn selection_key(rng_seed: u64, question_id: u64, tree: usize, node: NodeId) -> u64 {
    seed::derive(seed::derive(rng_seed, seed::tags::PAIRS, question_id), tree as u64, node as u64)
}

struct Extractor<'a> {
    forest: &'a Forest,
    counts: PairCounts,
    rng_seed: u64,
    used: HashSet<(usize, NodeId)>,
    /// Every prefix of every correct solution anywhere in the forest.
    correct_prefixes: HashSet<Vec<ActionId>>,
    out: Vec<PreferencePair>,
}

impl Extractor<'_> {
    fn is_negative(&self, t: usize, n: NodeId) -> bool {
        let node = &self.forest.trees[t].nodes[n];
        node.parent.is_some()
            && !node.correct
            && !self.used.contains(&(t, n))
            && !self.correct_prefixes.contains(node.steps())
    }

    /// Up to `k` candidates with the smallest selection keys.
    fn pick(&self, mut cands: Vec<(usize, NodeId)>, k: usize) -> Vec<(usize, NodeId)> {
        let qid = self.forest.question_id;
        cands.sort_by_key(|&(t, n)| (selection_key(self.rng_seed, qid, t, n), t, n));
        cands.truncate(k);
        cands
    }

    fn emit(&mut self, t: usize, winner: NodeId, losers: &[(usize, NodeId)]) {
        let w = &self.forest.trees[t].nodes[winner];
        for &(lt, l) in losers {
            let loser = &self.forest.trees[lt].nodes[l];
            self.used.insert((lt, l));
            self.out.push(PreferencePair::new(
                self.forest.question_id,
                w.steps().to_vec(),
                loser.steps().to_vec(),
                w.q,
                loser.q,
            ));
        }
    }

    fn walk(&mut self, t: usize) {
        let forest = self.forest;
        let tree: &SearchTree = &forest.trees[t];
        if !tree.root().correct {
            return;
        }
        let mut n = 0;
        while !tree.nodes[n].terminal {
            let mut best: Option<NodeId> = None;
            for &c in &tree.nodes[n].children {
                if tree.nodes[c].correct && best.map_or(true, |b| tree.nodes[c].q > tree.nodes[b].q) {
                    best = Some(c);
                }
            }
            let Some(nw) = best else { break };
            let level = tree.nodes[nw].depth();

            let siblings: Vec<_> = tree.nodes[n]
                .children
                .iter()
                .filter(|&&c| self.is_negative(t, c))
                .map(|&c| (t, c))
                .collect();
            let siblings = self.pick(siblings, self.counts.n_sibling);
            self.emit(t, nw, &siblings);

            let cousins: Vec<_> = tree
                .nodes
                .iter()
                .filter(|c| c.depth() == level && c.parent != Some(n) && self.is_negative(t, c.id))
                .map(|c| (t, c.id))
                .collect();
            let cousins = self.pick(cousins, self.counts.n_cousin);
            self.emit(t, nw, &cousins);

            let terminals: Vec<_> = tree
                .nodes
                .iter()
                .filter(|c| c.terminal && c.depth() != level && self.is_negative(t, c.id))
                .map(|c| (t, c.id))
                .collect();
            let terminals = self.pick(terminals, self.counts.n_terminal);
            self.emit(t, nw, &terminals);

            if siblings.is_empty() && cousins.is_empty() && terminals.is_empty() {
                let fallback = self.cross_tree(t, n, level);
                self.emit(t, nw, &fallback);
            }
            n = nw;
        }
    }

    /// One loser from the other trees of the forest: a node extending the same
    /// prefix first, then any same-level node, then a terminal at another depth.
    fn cross_tree(&self, t: usize, n: NodeId, level: usize) -> Vec<(usize, NodeId)> {
        let forest = self.forest;
        let parent_steps = forest.trees[t].nodes[n].steps();
        let others = || {
            forest
                .trees
                .iter()
                .enumerate()
                .filter(move |&(u, _)| u != t)
                .flat_map(|(u, tree)| tree.nodes.iter().map(move |node| (u, node)))
        };
        let tiers: [Vec<(usize, NodeId)>; 3] = [
            others()
                .filter(|(u, node)| {
                    node.depth() == level
                        && node.steps()[..level - 1] == *parent_steps
                        && self.is_negative(*u, node.id)
                })
                .map(|(u, node)| (u, node.id))
                .collect(),
            others()
                .filter(|(u, node)| node.depth() == level && self.is_negative(*u, node.id))
                .map(|(u, node)| (u, node.id))
                .collect(),
            others()
                .filter(|(u, node)| node.terminal && node.depth() != level && self.is_negative(*u, node.id))
                .map(|(u, node)| (u, node.id))
                .collect(),
        ];
        tiers
            .into_iter()
            .find(|tier| !tier.is_empty())
            .map(|tier| self.pick(tier, 1))
            .unwrap_or_default()
    }
}

/// Step-level preference pairs for one labeled forest. A loser node is used
/// at most once per question.
pub fn extract_pairs(forest: &Forest, counts: PairCounts, rng_seed: u64) -> Result<Vec<PreferencePair>> {
    if !forest.labeled {
        return Err(Error::UnlabeledForest(forest.question_id));
    }
    let correct_prefixes = forest
        .distinct_correct()
        .into_iter()
        .flat_map(|s| (0..=s.len()).map(move |k| s[..k].to_vec()))
        .collect();
    let mut ex = Extractor {
        forest,
        counts,
        rng_seed,
        used: HashSet::new(),
        correct_prefixes,
        out: Vec::new(),
    };
    for t in 0..forest.trees.len() {
        ex.walk(t);
    }
    Ok(ex.out)
}

/// Regression targets for every visited non-root node: the reward for
/// answered states, the Q-value otherwise.
pub fn extract_value_targets(forest: &Forest) -> Vec<ValueTarget> {
    forest
        .trees
        .iter()
        .flat_map(|tree| tree.nodes.iter().skip(1))
        .filter(|n| n.visits >= 1)
        .map(|n| ValueTarget {
            question_id: forest.question_id,
            prefix: n.steps().to_vec(),
            target: match n.reward {
                Some(r) if n.state.is_answered() => r.value(),
                _ => n.q,
            },
        })
        .collect()
}

/// Up to `k` distinct correct complete solutions, highest mean path Q first.
pub fn extract_sft_solutions(forest: &Forest, k: usize) -> Result<Vec<Solution>> {
    if !forest.labeled {
        return Err(Error::UnlabeledForest(forest.question_id));
    }
    let mut scored: Vec<(f64, Vec<ActionId>)> = Vec::new();
    let mut seen = BTreeSet::new();
    for tree in &forest.trees {
        for leaf in tree.correct_solutions() {
            if !seen.insert(leaf.steps().to_vec()) {
                continue;
            }
            let mut sum = 0.0;
            let mut cur = leaf.id;
            while let Some(p) = tree.nodes[cur].parent {
                sum += tree.nodes[cur].q;
                cur = p;
            }
            scored.push((sum / leaf.depth() as f64, leaf.steps().to_vec()));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(_, steps)| Solution {
            question_id: forest.question_id,
            steps,
        })
        .collect())
}

/// Positive and negative example counts of a pair set: distinct winner
/// prefixes and distinct loser prefixes per question.
pub fn example_counts(pairs: &[PreferencePair]) -> (usize, usize) {
    let winners: HashSet<(u64, &[ActionId])> = pairs.iter().map(|p| (p.question_id, &p.winner[..])).collect();
    let losers: HashSet<(u64, &[ActionId])> = pairs.iter().map(|p| (p.question_id, &p.loser[..])).collect();
    (winners.len(), losers.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Difficulty, Env, Question, QuestionSpec};
    use crate::mcts::SearchTree;

    fn question() -> Question {
        Question::new(
            5,
            QuestionSpec {
                start: 2,
                menu: vec![ActionId(0), ActionId(1), ActionId(7), ActionId(8)],
                chain: vec![ActionId(7), ActionId(0)],
            },
            Difficulty::Easy,
        )
    }

    /// root -> {*2 (correct path), +1, +2}; *2 -> {+1 -> answer (correct), answer (wrong)}
    fn small_forest() -> Forest {
        let env = Env::default();
        let q = question();
        let mut t = SearchTree::new(&env, &q);
        let a = t.add_child(&env, &q, 0, ActionId(7), 0.25).unwrap();
        let b = t.add_child(&env, &q, 0, ActionId(0), 0.25).unwrap();
        let c = t.add_child(&env, &q, 0, ActionId(1), 0.25).unwrap();
        let a1 = t.add_child(&env, &q, a, ActionId(0), 0.2).unwrap();
        let a2 = t.add_child(&env, &q, a, ActionId(10), 0.2).unwrap();
        let win = t.add_child(&env, &q, a1, ActionId(10), 0.2).unwrap();
        let b1 = t.add_child(&env, &q, b, ActionId(10), 0.2).unwrap();
        for (n, v) in [(win, 1.0), (a2, -1.0), (b1, -1.0), (c, 0.0)] {
            t.backup(n, v);
        }
        let mut f = Forest::new(q.id);
        f.trees.push(t);
        f
    }

    #[test]
    fn labels_follow_correct_terminals() {
        let mut f = small_forest();
        label_correct(&mut f);
        let correct: Vec<NodeId> = f.trees[0].nodes.iter().filter(|n| n.correct).map(|n| n.id).collect();
        assert_eq!(correct, vec![0, 1, 4, 6]);
        let again = {
            let mut g = f.clone();
            label_correct(&mut g);
            g
        };
        assert_eq!(f, again);
    }

    #[test]
    fn all_wrong_tree_has_no_labels_or_pairs() {
        let env = Env::default();
        let q = question();
        let mut t = SearchTree::new(&env, &q);
        let a = t.add_child(&env, &q, 0, ActionId(0), 0.25).unwrap();
        let b = t.add_child(&env, &q, a, ActionId(10), 0.25).unwrap();
        t.backup(b, -1.0);
        let mut f = Forest::new(q.id);
        f.trees.push(t);
        assert!(matches!(extract_pairs(&f, PairCounts::default(), 0), Err(Error::UnlabeledForest(5))));
        label_correct(&mut f);
        assert!(f.trees[0].nodes.iter().all(|n| !n.correct));
        assert!(extract_pairs(&f, PairCounts::default(), 0).unwrap().is_empty());
    }

    #[test]
    fn small_forest_pairs() {
        let mut f = small_forest();
        label_correct(&mut f);
        let pairs = extract_pairs(&f, PairCounts::default(), 3).unwrap();
        let ids = |v: &[u8]| v.iter().map(|&i| ActionId(i)).collect::<Vec<_>>();
        // level 1: winner [*2]; siblings [+1], [+2]; no cousins at depth 1 outside
        // the root's children; terminal [+1, answer] at depth 2.
        let level1: Vec<_> = pairs.iter().filter(|p| p.winner == ids(&[7])).collect();
        assert_eq!(level1.len(), 3);
        assert_eq!(level1.iter().filter(|p| p.kind == PairKind::Sibling).count(), 2);
        assert_eq!(level1.iter().filter(|p| p.kind == PairKind::Terminal).count(), 1);
        // level 2: winner [*2, +1]; whichever depth-2 wrong answer was not used
        // at level 1 is paired here (sibling if it hangs off *2, cousin if off +1).
        let used = &level1.iter().find(|p| p.kind == PairKind::Terminal).unwrap().loser;
        let level2: Vec<_> = pairs.iter().filter(|p| p.winner == ids(&[7, 0])).collect();
        assert_eq!(level2.len(), 1);
        assert_ne!(&level2[0].loser, used);
        let expected_kind = if level2[0].loser == ids(&[7, 10]) {
            PairKind::Sibling
        } else {
            assert_eq!(level2[0].loser, ids(&[0, 10]));
            PairKind::Cousin
        };
        assert_eq!(level2[0].kind, expected_kind);
        // level 3 has no unused negatives left
        assert_eq!(pairs.len(), 4);
        for p in &pairs {
            assert!(p.q_w >= p.q_l);
        }
    }

    #[test]
    fn every_correct_path_gives_nothing() {
        let env = Env::default();
        let q = question();
        let mut t = SearchTree::new(&env, &q);
        let a = t.add_child(&env, &q, 0, ActionId(7), 0.25).unwrap();
        let b = t.add_child(&env, &q, a, ActionId(0), 0.25).unwrap();
        let c = t.add_child(&env, &q, b, ActionId(10), 0.25).unwrap();
        t.backup(c, 1.0);
        let mut f = Forest::new(q.id);
        f.trees.push(t);
        label_correct(&mut f);
        assert!(extract_pairs(&f, PairCounts::default(), 0).unwrap().is_empty());
    }

    #[test]
    fn value_targets() {
        let mut f = small_forest();
        label_correct(&mut f);
        let targets = extract_value_targets(&f);
        // unvisited nodes are skipped: a1 is visited via the winning leaf
        assert!(targets.iter().all(|t| (-1.0..=1.0).contains(&t.target)));
        let win = targets.iter().find(|t| t.prefix.len() == 3).unwrap();
        assert_eq!(win.target, 1.0);
        let c = targets.iter().find(|t| t.prefix == vec![ActionId(1)]).unwrap();
        assert_eq!(c.target, 0.0);
        let mut g = f.clone();
        g.trees[0].nodes[3].q = 0.25;
        let t = extract_value_targets(&g);
        assert_eq!(t.iter().find(|t| t.prefix == vec![ActionId(1)]).unwrap().target, 0.25);
    }

    #[test]
    fn sft_solutions() {
        let mut f = small_forest();
        label_correct(&mut f);
        let sols = extract_sft_solutions(&f, 4).unwrap();
        assert_eq!(sols.len(), 1);
        assert_eq!(sols[0].steps, vec![ActionId(7), ActionId(0), ActionId(10)]);
        let env = Env::default();
        assert!(env.outcome(&question(), &sols[0].steps).unwrap().is_correct());
    }

    #[test]
    fn classification() {
        let ids = |v: &[u8]| v.iter().map(|&i| ActionId(i)).collect::<Vec<_>>();
        assert_eq!(classify(&ids(&[1, 2]), &ids(&[1, 3])), PairKind::Sibling);
        assert_eq!(classify(&ids(&[1, 2]), &ids(&[0, 2])), PairKind::Cousin);
        assert_eq!(classify(&ids(&[1, 2]), &ids(&[1, 2, 10])), PairKind::Terminal);
        assert_eq!(classify(&ids(&[1]), &ids(&[2])), PairKind::Sibling);
    }
}
