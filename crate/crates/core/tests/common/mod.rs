#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svpo::env::{ActionId, Difficulty, Env, Question, QuestionSpec};
use svpo::pairs::PreferencePair;
use svpo::policyval::PolicyValueParams;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ids(v: &[u8]) -> Vec<ActionId> {
    v.iter().map(|&i| ActionId(i)).collect()
}

pub fn question(id: u64, start: i64, menu: &[u8], chain: &[u8]) -> Question {
    Question::new(
        id,
        QuestionSpec {
            start,
            menu: ids(menu),
            chain: ids(chain),
        },
        Difficulty::Medium,
    )
}

/// Hand-written semantics of the step vocabulary.
pub fn reference_op(id: u8, x: i64) -> Option<i64> {
    Some(match id {
        0 => x + 1,
        1 => x + 2,
        2 => x + 3,
        3 => x + 5,
        4 => x - 1,
        5 => x - 2,
        6 => x - 3,
        7 => x * 2,
        8 => x * 3,
        9 => x * 4,
        _ => return None,
    })
}

/// Offset of an answer step, `None` for operations.
pub fn reference_answer(id: u8) -> Option<i64> {
    match id {
        10 => Some(0),
        11 => Some(1),
        12 => Some(-1),
        _ => None,
    }
}

/// Exhaustive search for any correct step sequence within `max_depth` steps.
pub fn solvable(q: &Question, max_depth: usize) -> bool {
    fn go(q: &Question, x: i64, depth: usize, max_depth: usize) -> bool {
        if depth >= 1 && depth < max_depth && (10..=12).any(|a| x + reference_answer(a).unwrap() == q.truth) {
            return true;
        }
        if depth + 1 >= max_depth {
            return false;
        }
        q.spec
            .menu
            .iter()
            .any(|id| go(q, reference_op(id.0, x).unwrap(), depth + 1, max_depth))
    }
    go(q, q.spec.start, 0, max_depth)
}

/// Every weight uniform in `[-scale, scale)`.
pub fn random_params(env: &Env, h: usize, scale: f64, seed: u64) -> PolicyValueParams {
    let mut p = PolicyValueParams::for_env(env, h);
    let mut r = rng(seed);
    for w in p.iter_mut() {
        *w = r.gen_range(-scale..scale);
    }
    p
}

pub fn random_question(r: &mut ChaCha8Rng, id: u64) -> Question {
    let mut menu: Vec<u8> = rand::seq::index::sample(r, 10, 4).into_iter().map(|i| i as u8).collect();
    menu.sort_unstable();
    let n = r.gen_range(1..=4);
    let chain: Vec<u8> = (0..n).map(|_| menu[r.gen_range(0..4)]).collect();
    question(id, r.gen_range(1..=9), &menu, &chain)
}

/// A random legal prefix of length `1..=max_depth`; it may end in an answer.
pub fn random_prefix(env: &Env, q: &Question, r: &mut ChaCha8Rng) -> Vec<ActionId> {
    let len = r.gen_range(1..=env.max_depth);
    let mut state = env.root(q);
    while state.steps.len() < len && !state.is_answered() {
        let acts = env.legal_actions(q, &state).unwrap();
        let a = acts[r.gen_range(0..acts.len())];
        state = env.transition(q, &state, a.id).unwrap();
    }
    state.steps
}

pub fn random_pair(env: &Env, q: &Question, r: &mut ChaCha8Rng) -> PreferencePair {
    let w = random_prefix(env, q, r);
    let mut l = random_prefix(env, q, r);
    while l == w {
        l = random_prefix(env, q, r);
    }
    PreferencePair::new(q.id, w, l, r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))
}

pub mod grad;
pub mod oracle;
pub mod tree;
