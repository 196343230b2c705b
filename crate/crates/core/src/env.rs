//! Synthetic multi-step arithmetic environment.
//!
//! A question starts from a small integer and offers a menu of arithmetic
//! operations. A hidden chain drawn from the menu defines the ground-truth
//! answer; the target value is part of the question. A solution is a sequence
//! of intermediate steps (operations applied to the scratch value) closed by
//! one terminal step that proposes an answer relative to the scratch value.
//! Transitions are deterministic and a wrong step poisons every descendant.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_MAX_DEPTH: usize = 8;

/// Index into the fixed step vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u8);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Add(i64),
    Sub(i64),
    Mul(i64),
}

impl Op {
    pub fn apply(self, x: i64) -> i64 {
        match self {
            Op::Add(c) => x.saturating_add(c),
            Op::Sub(c) => x.saturating_sub(c),
            Op::Mul(c) => x.saturating_mul(c),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Add(c) => write!(f, "+{c}"),
            Op::Sub(c) => write!(f, "-{c}"),
            Op::Mul(c) => write!(f, "*{c}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionKind {
    Intermediate,
    Terminal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Payload {
    Op(Op),
    /// Proposes `scratch + offset` as the final answer.
    Answer { offset: i64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Action {
    pub id: ActionId,
    pub payload: Payload,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self.payload {
            Payload::Op(_) => ActionKind::Intermediate,
            Payload::Answer { .. } => ActionKind::Terminal,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.kind() == ActionKind::Terminal
    }

    pub fn proposed_answer(&self, scratch: i64) -> Option<i64> {
        match self.payload {
            Payload::Answer { offset } => Some(scratch.saturating_add(offset)),
            Payload::Op(_) => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.payload {
            Payload::Op(op) => write!(f, "{op}"),
            Payload::Answer { offset: 0 } => write!(f, "answer"),
            Payload::Answer { offset } => write!(f, "answer{offset:+}"),
        }
    }
}

const fn op(id: u8, op: Op) -> Action {
    Action {
        id: ActionId(id),
        payload: Payload::Op(op),
    }
}

const fn answer(id: u8, offset: i64) -> Action {
    Action {
        id: ActionId(id),
        payload: Payload::Answer { offset },
    }
}

/// Intermediate operations first, then the terminal answer family
/// (exact answer plus off-by-one distractors).
pub const VOCAB: [Action; 13] = [
    op(0, Op::Add(1)),
    op(1, Op::Add(2)),
    op(2, Op::Add(3)),
    op(3, Op::Add(5)),
    op(4, Op::Sub(1)),
    op(5, Op::Sub(2)),
    op(6, Op::Sub(3)),
    op(7, Op::Mul(2)),
    op(8, Op::Mul(3)),
    op(9, Op::Mul(4)),
    answer(10, 0),
    answer(11, 1),
    answer(12, -1),
];

pub const VOCAB_SIZE: usize = VOCAB.len();
pub const N_OPS: usize = 10;
pub const MENU_SIZE: usize = 4;

pub fn action(id: ActionId) -> Result<Action> {
    VOCAB.get(id.index()).copied().ok_or(Error::IllegalAction(id))
}

fn terminal_actions() -> impl Iterator<Item = Action> {
    VOCAB[N_OPS..].iter().copied()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    /// Total solution length (intermediate steps plus the answer step).
    pub fn step_range(self) -> (usize, usize) {
        match self {
            Difficulty::Easy => (2, 3),
            Difficulty::Medium => (4, 5),
            Difficulty::Hard => (6, 8),
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Config(format!("unknown difficulty {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub start: i64,
    /// Operations offered by this question, sorted by action id.
    pub menu: Vec<ActionId>,
    /// Reference operation chain; every entry is in `menu`.
    pub chain: Vec<ActionId>,
}

impl QuestionSpec {
    /// Ground truth: the start value pushed through the chain.
    pub fn evaluate(&self) -> i64 {
        self.chain.iter().fold(self.start, |acc, id| match VOCAB[id.index()].payload {
            Payload::Op(op) => op.apply(acc),
            Payload::Answer { .. } => acc,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: u64,
    pub spec: QuestionSpec,
    pub truth: i64,
    pub difficulty: Difficulty,
}

impl Question {
    pub fn new(id: u64, spec: QuestionSpec, difficulty: Difficulty) -> Self {
        let truth = spec.evaluate();
        Question {
            id,
            spec,
            truth,
            difficulty,
        }
    }

    pub fn offers(&self, id: ActionId) -> bool {
        self.spec.menu.contains(&id)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub question_id: u64,
    pub steps: Vec<ActionId>,
    pub scratch: i64,
    pub depth: usize,
}

impl State {
    pub fn last_action(&self) -> Option<Action> {
        self.steps.last().map(|id| VOCAB[id.index()])
    }

    /// True once a terminal (answer) step has been taken.
    pub fn is_answered(&self) -> bool {
        self.last_action().is_some_and(|a| a.is_terminal())
    }
}

/// A step sequence proposed for a question.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Solution {
    pub question_id: u64,
    pub steps: Vec<ActionId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Reward {
    Correct,
    Incorrect,
}

impl Reward {
    pub fn value(self) -> f64 {
        match self {
            Reward::Correct => 1.0,
            Reward::Incorrect => -1.0,
        }
    }

    pub fn is_correct(self) -> bool {
        self == Reward::Correct
    }
}

impl From<Reward> for i8 {
    fn from(r: Reward) -> i8 {
        match r {
            Reward::Correct => 1,
            Reward::Incorrect => -1,
        }
    }
}

impl TryFrom<i8> for Reward {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Reward::Correct),
            -1 => Ok(Reward::Incorrect),
            other => Err(format!("reward must be -1 or 1, got {other}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Env {
    pub max_depth: usize,
}

impl Default for Env {
    fn default() -> Self {
        Env {
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

impl Env {
    pub fn root(&self, question: &Question) -> State {
        State {
            question_id: question.id,
            steps: Vec::new(),
            scratch: question.spec.start,
            depth: 0,
        }
    }

    /// Menu operations in id order, followed by the answer family once at
    /// least one operation has been applied.
    pub fn legal_actions(&self, question: &Question, state: &State) -> Result<Vec<Action>> {
        self.check_open(state)?;
        let mut out: Vec<Action> = question.spec.menu.iter().map(|id| VOCAB[id.index()]).collect();
        if state.depth >= 1 {
            out.extend(terminal_actions());
        }
        Ok(out)
    }

    pub fn is_legal(&self, question: &Question, state: &State, id: ActionId) -> bool {
        if self.check_open(state).is_err() {
            return false;
        }
        match VOCAB.get(id.index()) {
            Some(a) if a.is_terminal() => state.depth >= 1,
            Some(_) => question.offers(id),
            None => false,
        }
    }

    fn check_open(&self, state: &State) -> Result<()> {
        if state.is_answered() {
            return Err(Error::AlreadyAnswered);
        }
        if state.depth >= self.max_depth {
            return Err(Error::DepthExceeded {
                depth: state.depth,
                max_depth: self.max_depth,
            });
        }
        Ok(())
    }

    pub fn transition(&self, question: &Question, state: &State, id: ActionId) -> Result<State> {
        self.check_open(state)?;
        if !self.is_legal(question, state, id) {
            return Err(Error::IllegalAction(id));
        }
        let scratch = match VOCAB[id.index()].payload {
            Payload::Op(op) => op.apply(state.scratch),
            Payload::Answer { .. } => state.scratch,
        };
        let mut steps = Vec::with_capacity(state.steps.len() + 1);
        steps.extend_from_slice(&state.steps);
        steps.push(id);
        Ok(State {
            question_id: state.question_id,
            steps,
            scratch,
            depth: state.depth + 1,
        })
    }

    pub fn terminal_reward(&self, question: &Question, state: &State, id: ActionId) -> Result<Reward> {
        let action = action(id)?;
        let proposed = action.proposed_answer(state.scratch).ok_or(Error::NotTerminal(id))?;
        Ok(if proposed == question.truth {
            Reward::Correct
        } else {
            Reward::Incorrect
        })
    }

    /// Replays a step sequence from the root.
    pub fn replay(&self, question: &Question, steps: &[ActionId]) -> Result<State> {
        let mut state = self.root(question);
        for &id in steps {
            state = self.transition(question, &state, id)?;
        }
        Ok(state)
    }

    /// Reward of a complete solution: the terminal reward if it ends with an
    /// answer step, otherwise incorrect (ran out of depth or stopped early).
    pub fn outcome(&self, question: &Question, steps: &[ActionId]) -> Result<Reward> {
        let Some((&last, prefix)) = steps.split_last() else {
            return Ok(Reward::Incorrect);
        };
        if !VOCAB.get(last.index()).is_some_and(|a| a.is_terminal()) {
            self.replay(question, steps)?;
            return Ok(Reward::Incorrect);
        }
        let before = self.replay(question, prefix)?;
        self.transition(question, &before, last)?;
        self.terminal_reward(question, &before, last)
    }
}

/// Deterministic synthetic corpus. Question ids are `0..n`.
pub fn gen_dataset(seed: u64, n: usize, difficulty: Difficulty) -> Result<Vec<Question>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let tag = match difficulty {
        Difficulty::Easy => 1,
        Difficulty::Medium => 2,
        Difficulty::Hard => 3,
    };
    let mut rng = seed::rng(seed, seed::tags::DATASET, tag);
    let (lo, hi) = difficulty.step_range();
    let questions = (0..n as u64)
        .map(|id| {
            let start = rng.gen_range(1..=9);
            let mut menu: Vec<ActionId> = sample(&mut rng, N_OPS, MENU_SIZE)
                .into_iter()
                .map(|i| ActionId(i as u8))
                .collect();
            menu.sort_unstable();
            let n_ops = rng.gen_range(lo..=hi) - 1;
            let chain = (0..n_ops).map(|_| menu[rng.gen_range(0..menu.len())]).collect();
            Question::new(id, QuestionSpec { start, menu, chain }, difficulty)
        })
        .collect();
    Ok(questions)
}
