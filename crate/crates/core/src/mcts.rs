//! Monte Carlo tree search used to annotate step-level Q-values.
//!
//! Each simulation selects a leaf by PUCT, expands it with up to
//! `n_children` distinct sampled steps, evaluates every new child with a
//! one-step rollout (value is the terminal reward when a terminal step is
//! reached, 0 otherwise) and backs the value up to the root with an exact
//! running mean.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionId, Env, Question, Reward, State};
use crate::error::{Error, Result};
use crate::policyval::PolicyValueParams;
use crate::seed;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub c_puct: f64,
    pub temperature: f64,
    pub max_depth: usize,
    pub n_children: usize,
    pub max_simulations: usize,
    pub max_trees: usize,
    pub target_correct: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            c_puct: 1.25,
            temperature: 0.8,
            max_depth: 8,
            n_children: 5,
            max_simulations: 60,
            max_trees: 10,
            target_correct: 4,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_puct > 0.0 && self.c_puct.is_finite()) {
            return Err(Error::Config(format!("c_puct must be > 0, got {}", self.c_puct)));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.5) {
            return Err(Error::Config(format!(
                "temperature must be in (0, 1.5], got {}",
                self.temperature
            )));
        }
        if self.max_depth == 0 || self.n_children == 0 || self.max_trees == 0 {
            return Err(Error::Config("max_depth, n_children and max_trees must be >= 1".into()));
        }
        Ok(())
    }

    pub fn env(&self) -> Env {
        Env {
            max_depth: self.max_depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub action: Option<ActionId>,
    #[serde(rename = "N")]
    pub visits: u32,
    #[serde(rename = "Q")]
    pub q: f64,
    pub prior: f64,
    pub terminal: bool,
    pub reward: Option<Reward>,
    pub correct: bool,
    /// Leaf evaluation assigned when the node was created.
    pub value_est: f64,
    pub expanded: bool,
    #[serde(skip)]
    pub children: Vec<NodeId>,
    #[serde(skip)]
    pub state: State,
}

impl TreeNode {
    pub fn depth(&self) -> usize {
        self.state.depth
    }

    pub fn steps(&self) -> &[ActionId] {
        &self.state.steps
    }
}

/// One search tree in a node arena. Node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub nodes: Vec<TreeNode>,
    /// Every `(node, value)` passed to [`SearchTree::backup`], in order.
    #[serde(skip)]
    pub backup_log: Vec<(NodeId, f64)>,
}

impl SearchTree {
    pub fn new(env: &Env, question: &Question) -> Self {
        SearchTree {
            nodes: vec![TreeNode {
                id: 0,
                parent: None,
                action: None,
                visits: 0,
                q: 0.0,
                prior: 1.0,
                terminal: false,
                reward: None,
                correct: false,
                value_est: 0.0,
                expanded: false,
                children: Vec::new(),
                state: env.root(question),
            }],
            backup_log: Vec::new(),
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn child_with_action(&self, parent: NodeId, action: ActionId) -> Option<NodeId> {
        self.nodes[parent]
            .children
            .iter()
            .copied()
            .find(|&c| self.nodes[c].action == Some(action))
    }

    /// Appends a child. Terminal status and reward follow from the action and
    /// the depth limit: answering yields the answer's reward, and reaching
    /// `max_depth` without answering is an incorrect terminal.
    pub fn add_child(
        &mut self,
        env: &Env,
        question: &Question,
        parent: NodeId,
        action: ActionId,
        prior: f64,
    ) -> Result<NodeId> {
        let parent_state = &self.nodes[parent].state;
        let state = env.transition(question, parent_state, action)?;
        let reward = if state.is_answered() {
            Some(env.terminal_reward(question, parent_state, action)?)
        } else if state.depth >= env.max_depth {
            Some(Reward::Incorrect)
        } else {
            None
        };
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            id,
            parent: Some(parent),
            action: Some(action),
            visits: 0,
            q: 0.0,
            prior,
            terminal: reward.is_some(),
            reward,
            correct: false,
            value_est: reward.map_or(0.0, Reward::value),
            expanded: false,
            children: Vec::new(),
            state,
        });
        self.nodes[parent].children.push(id);
        Ok(id)
    }

    pub fn puct_score(&self, parent: NodeId, child: NodeId, c_puct: f64) -> f64 {
        let p = &self.nodes[parent];
        let c = &self.nodes[child];
        c.q + c_puct * c.prior * (p.visits as f64).sqrt() / (1.0 + c.visits as f64)
    }

    /// Walks from the root by PUCT until reaching a node that has not been
    /// expanded. Ties go to the lowest child index.
    pub fn select(&self, c_puct: f64) -> NodeId {
        let mut n = 0;
        while self.nodes[n].expanded && !self.nodes[n].children.is_empty() {
            let children = &self.nodes[n].children;
            let mut best = children[0];
            let mut best_score = self.puct_score(n, best, c_puct);
            for &c in &children[1..] {
                let s = self.puct_score(n, c, c_puct);
                if s > best_score {
                    best = c;
                    best_score = s;
                }
            }
            n = best;
        }
        n
    }

    /// Expands `node` and returns the `(node, value)` pairs to back up.
    ///
    /// Up to `n_children` distinct steps are sampled at the configured
    /// temperature. A sampled step that already exists as a child (kept from
    /// an earlier rollout) is reused without re-evaluation. Each new
    /// non-terminal child gets a one-step rollout: a terminal rollout step is
    /// kept as a grandchild and backs up its reward, otherwise the child backs
    /// up 0.
    pub fn expand_and_evaluate(
        &mut self,
        env: &Env,
        question: &Question,
        node: NodeId,
        params: &PolicyValueParams,
        config: &SearchConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(NodeId, f64)>> {
        let n = &self.nodes[node];
        if n.terminal {
            return Err(Error::TerminalNode(node));
        }
        if n.expanded {
            return Err(Error::AlreadyExpanded(node));
        }
        if n.state.depth >= env.max_depth {
            return Err(Error::DepthExceeded {
                depth: n.state.depth,
                max_depth: env.max_depth,
            });
        }
        let dist = params.step_distribution(env, question, &self.nodes[node].state)?;
        let picks = dist.sample_distinct(config.temperature, config.n_children, rng);
        let mut out = Vec::with_capacity(picks.len());
        for i in picks {
            let action = dist.actions[i].id;
            if self.child_with_action(node, action).is_some() {
                continue;
            }
            let child = self.add_child(env, question, node, action, dist.logprobs[i].exp())?;
            if self.nodes[child].terminal {
                out.push((child, self.nodes[child].value_est));
                continue;
            }
            let rollout = params.step_distribution(env, question, &self.nodes[child].state)?;
            let r = rollout.sample_distinct(config.temperature, 1, rng)[0];
            let step = rollout.actions[r];
            if step.is_terminal() {
                let leaf = self.add_child(env, question, child, step.id, rollout.logprobs[r].exp())?;
                let value = self.nodes[leaf].value_est;
                self.nodes[child].value_est = value;
                out.push((leaf, value));
            } else {
                out.push((child, 0.0));
            }
        }
        self.nodes[node].expanded = true;
        Ok(out)
    }

    /// Running-mean update of N and Q on every node from `node` to the root.
    pub fn backup(&mut self, node: NodeId, value: f64) {
        self.backup_log.push((node, value));
        let mut cur = Some(node);
        while let Some(id) = cur {
            let n = &mut self.nodes[id];
            n.visits += 1;
            n.q += (value - n.q) / n.visits as f64;
            cur = n.parent;
        }
    }

    /// One select / expand-and-evaluate / backup round.
    pub fn simulate(
        &mut self,
        env: &Env,
        question: &Question,
        params: &PolicyValueParams,
        config: &SearchConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let leaf = self.select(config.c_puct);
        if self.nodes[leaf].terminal {
            let v = self.nodes[leaf].value_est;
            self.backup(leaf, v);
            return Ok(());
        }
        for (n, v) in self.expand_and_evaluate(env, question, leaf, params, config, rng)? {
            self.backup(n, v);
        }
        Ok(())
    }

    pub fn correct_solutions(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes
            .iter()
            .filter(|n| n.terminal && n.reward == Some(Reward::Correct))
    }

    /// Rebuilds child lists and replays node states after deserialization.
    fn restore(&mut self, env: &Env, question: &Question) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].id != i {
                return Err(Error::Shape(format!("node at index {i} has id {}", self.nodes[i].id)));
            }
            self.nodes[i].children.clear();
            let state = match (self.nodes[i].parent, self.nodes[i].action) {
                (None, None) => env.root(question),
                (Some(p), Some(a)) if p < i => {
                    self.nodes[p].children.push(i);
                    env.transition(question, &self.nodes[p].state, a)?
                }
                _ => return Err(Error::Shape(format!("node {i} has an inconsistent parent link"))),
            };
            self.nodes[i].state = state;
        }
        Ok(())
    }
}

/// All trees built for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub question_id: u64,
    pub labeled: bool,
    pub trees: Vec<SearchTree>,
}

impl Forest {
    pub fn new(question_id: u64) -> Self {
        Forest {
            question_id,
            labeled: false,
            trees: Vec::new(),
        }
    }

    /// Distinct complete correct step sequences across all trees.
    pub fn distinct_correct(&self) -> BTreeSet<Vec<ActionId>> {
        self.trees
            .iter()
            .flat_map(|t| t.correct_solutions().map(|n| n.state.steps.clone()))
            .collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.trees.iter().map(SearchTree::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str, env: &Env, question: &Question) -> Result<Self> {
        let mut forest: Forest = serde_json::from_str(json)?;
        if forest.question_id != question.id {
            return Err(Error::UnknownQuestion(forest.question_id));
        }
        for tree in &mut forest.trees {
            tree.restore(env, question)?;
        }
        Ok(forest)
    }
}

/// Builds trees until `target_correct` distinct correct solutions exist or
/// `max_trees` trees have been built. Tree `t` draws from the seed stream
/// `(rng_seed, question, t)`.
pub fn build_forest(
    question: &Question,
    params: &PolicyValueParams,
    config: &SearchConfig,
    rng_seed: u64,
) -> Result<Forest> {
    config.validate()?;
    let env = config.env();
    let mut forest = Forest::new(question.id);
    let qseed = seed::derive(rng_seed, seed::tags::QUESTION, question.id);
    while forest.trees.len() < config.max_trees {
        let mut rng = seed::rng(qseed, seed::tags::TREE, forest.trees.len() as u64);
        let mut tree = SearchTree::new(&env, question);
        for _ in 0..config.max_simulations {
            tree.simulate(&env, question, params, config, &mut rng)?;
        }
        forest.trees.push(tree);
        if forest.distinct_correct().len() >= config.target_correct {
            break;
        }
    }
    Ok(forest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Difficulty, QuestionSpec};
    use rand::SeedableRng;

    fn question() -> Question {
        Question::new(
            3,
            QuestionSpec {
                start: 2,
                menu: vec![ActionId(0), ActionId(1), ActionId(7), ActionId(8)],
                chain: vec![ActionId(7), ActionId(0)],
            },
            Difficulty::Easy,
        )
    }

    fn params(env: &Env) -> PolicyValueParams {
        PolicyValueParams::init(env, 8, 0.3, 1)
    }

    #[test]
    fn pure_q_argmax_without_exploration() {
        let env = Env::default();
        let q = question();
        let mut t = SearchTree::new(&env, &q);
        let a = t.add_child(&env, &q, 0, ActionId(0), 0.5).unwrap();
        let b = t.add_child(&env, &q, 0, ActionId(1), 0.5).unwrap();
        t.nodes[0].expanded = true;
        t.backup(a, 0.5);
        t.backup(b, -0.2);
        assert_eq!(t.select(1e-12), a);
        let mut t2 = t.clone();
        // swap Q so the second child wins
        t2.nodes[a].q = -0.2;
        t2.nodes[b].q = 0.5;
        assert_eq!(t2.select(1e-12), b);
    }

    #[test]
    fn prior_breaks_equal_q() {
        let env = Env::default();
        let q = question();
        let mut t = SearchTree::new(&env, &q);
        t.add_child(&env, &q, 0, ActionId(0), 0.3).unwrap();
        let hi = t.add_child(&env, &q, 0, ActionId(1), 0.7).unwrap();
        t.nodes[0].expanded = true;
        t.nodes[0].visits = 4;
        assert_eq!(t.select(1.25), hi);
    }

    #[test]
    fn unvisited_child_gets_the_bonus() {
        let env = Env::default();
        let q = question();
        let mut t = SearchTree::new(&env, &q);
        let a = t.add_child(&env, &q, 0, ActionId(0), 0.5).unwrap();
        let b = t.add_child(&env, &q, 0, ActionId(1), 0.5).unwrap();
        t.nodes[0].expanded = true;
        t.nodes[0].visits = 10;
        t.nodes[a].visits = 10;
        let sa = t.puct_score(0, a, 1.25);
        let sb = t.puct_score(0, b, 1.25);
        assert!((sa - 1.25 * 0.5 * 10f64.sqrt() / 11.0).abs() < 1e-12);
        assert!((sb - 1.25 * 0.5 * 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.select(1.25), b);
    }

    #[test]
    fn running_mean_updates() {
        let env = Env::default();
        let q = question();
        let mut t = SearchTree::new(&env, &q);
        let a = t.add_child(&env, &q, 0, ActionId(0), 0.5).unwrap();
        t.backup(a, 1.0);
        assert_eq!((t.nodes[a].visits, t.nodes[a].q), (1, 1.0));
        t.backup(a, 0.0);
        assert_eq!((t.nodes[a].visits, t.nodes[a].q), (2, 0.5));
        t.backup(a, -1.0);
        assert_eq!(t.nodes[a].visits, 3);
        assert!(t.nodes[a].q.abs() < 1e-15);
        assert_eq!(t.nodes[0].visits, 3);
    }

    #[test]
    fn terminal_children_are_scored_by_reward() {
        let env = Env::default();
        let q = question();
        let mut t = SearchTree::new(&env, &q);
        let a = t.add_child(&env, &q, 0, ActionId(7), 0.25).unwrap();
        let a = t.add_child(&env, &q, a, ActionId(0), 0.25).unwrap();
        let good = t.add_child(&env, &q, a, ActionId(10), 0.1).unwrap();
        let bad = t.add_child(&env, &q, a, ActionId(11), 0.1).unwrap();
        assert_eq!(t.nodes[good].reward, Some(Reward::Correct));
        assert_eq!(t.nodes[good].value_est, 1.0);
        assert_eq!(t.nodes[bad].value_est, -1.0);
    }

    #[test]
    fn depth_cutoff_is_incorrect_terminal() {
        let env = Env { max_depth: 2 };
        let q = question();
        let mut t = SearchTree::new(&env, &q);
        let a = t.add_child(&env, &q, 0, ActionId(0), 0.25).unwrap();
        let b = t.add_child(&env, &q, a, ActionId(0), 0.25).unwrap();
        assert!(t.nodes[b].terminal);
        assert_eq!(t.nodes[b].reward, Some(Reward::Incorrect));
    }

    #[test]
    fn expansion_caps_and_errors() {
        let env = Env::default();
        let q = question();
        let p = params(&env);
        let config = SearchConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = SearchTree::new(&env, &q);
        // four menu operations at the root, n_children = 5
        let evals = t.expand_and_evaluate(&env, &q, 0, &p, &config, &mut rng).unwrap();
        assert_eq!(t.nodes[0].children.len(), 4);
        assert_eq!(evals.len(), 4);
        for (n, v) in &evals {
            let node = &t.nodes[*n];
            if node.terminal {
                assert_eq!(*v, node.reward.unwrap().value());
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(matches!(
            t.expand_and_evaluate(&env, &q, 0, &p, &config, &mut rng),
            Err(Error::AlreadyExpanded(0))
        ));
        let leaf = t.add_child(&env, &q, t.nodes[0].children[0], ActionId(10), 0.1).unwrap();
        assert!(matches!(
            t.expand_and_evaluate(&env, &q, leaf, &p, &config, &mut rng),
            Err(Error::TerminalNode(_))
        ));
    }

    #[test]
    fn forest_is_deterministic_and_bounded() {
        let q = question();
        let config = SearchConfig::default();
        let p = params(&config.env());
        let a = build_forest(&q, &p, &config, 17).unwrap();
        let b = build_forest(&q, &p, &config, 17).unwrap();
        assert_eq!(a, b);
        assert!(a.trees.len() <= 10);
        assert!(!a.distinct_correct().is_empty());
    }

    #[test]
    fn forest_json_round_trip() {
        let q = question();
        let config = SearchConfig {
            max_simulations: 20,
            max_trees: 2,
            ..SearchConfig::default()
        };
        let env = config.env();
        let p = params(&env);
        let mut f = build_forest(&q, &p, &config, 2).unwrap();
        let json = f.to_json().unwrap();
        let back = Forest::from_json(&json, &env, &q).unwrap();
        for t in &mut f.trees {
            t.backup_log.clear();
        }
        assert_eq!(f, back);
        assert_eq!(back.to_json().unwrap(), json);
    }
}
