//! Shared-trunk policy and value model.
//!
//! `features -> tanh(W_shared) -> { policy logits (W_policy), tanh(w_value) }`.
//! The policy is a softmax over the legal actions only. The value head is a
//! single linear unit with a tanh activation evaluated on the state reached
//! after a whole step. All gradients are written out by hand.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionId, Env, Payload, Question, State, N_OPS, VOCAB, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_HIDDEN: usize = 32;

/// Temperatures at or below this collapse sampling to argmax with lowest-index
/// tie-breaking (the zero-temperature limit).
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

const DIFF_BUCKETS: usize = 17;
const SCRATCH_BUCKETS: usize = 8;

/// Dense feature encoding of a (question, state) pair. Every block except the
/// bias is a one-hot.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    fn nonzero(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().copied().enumerate().filter(|&(_, v)| v != 0.0)
    }
}

/// Layout of the feature blocks for a given depth limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Featurizer {
    pub max_depth: usize,
}

impl Featurizer {
    pub fn new(env: &Env) -> Self {
        Featurizer {
            max_depth: env.max_depth,
        }
    }

    pub fn depth_offset(&self) -> usize {
        1
    }

    pub fn last_action_offset(&self) -> usize {
        self.depth_offset() + self.max_depth + 1
    }

    pub fn menu_offset(&self) -> usize {
        self.last_action_offset() + VOCAB_SIZE
    }

    pub fn diff_offset(&self) -> usize {
        self.menu_offset() + N_OPS
    }

    pub fn scratch_offset(&self) -> usize {
        self.diff_offset() + DIFF_BUCKETS
    }

    /// Per menu op, the distance bucket after applying it once.
    pub fn lookahead_offset(&self) -> usize {
        self.scratch_offset() + SCRATCH_BUCKETS
    }

    pub fn dim(&self) -> usize {
        self.lookahead_offset() + N_OPS * DIFF_BUCKETS
    }

    pub fn encode(&self, question: &Question, state: &State) -> FeatureVector {
        let mut values = vec![0.0; self.dim()];
        values[0] = 1.0;
        values[self.depth_offset() + state.depth.min(self.max_depth)] = 1.0;
        if let Some(last) = state.steps.last() {
            values[self.last_action_offset() + last.index()] = 1.0;
        }
        for id in &question.spec.menu {
            values[self.menu_offset() + id.index()] = 1.0;
        }
        // an answered state is measured by the answer it claims
        let current = state
            .last_action()
            .and_then(|a| a.proposed_answer(state.scratch))
            .unwrap_or(state.scratch);
        values[self.diff_offset() + diff_bucket(question.truth - current)] = 1.0;
        values[self.scratch_offset() + scratch_bucket(state.scratch)] = 1.0;
        if !state.is_answered() {
            for id in &question.spec.menu {
                if let Payload::Op(op) = VOCAB[id.index()].payload {
                    let bucket = diff_bucket(question.truth - op.apply(state.scratch));
                    values[self.lookahead_offset() + id.index() * DIFF_BUCKETS + bucket] = 1.0;
                }
            }
        }
        FeatureVector { values }
    }
}

fn diff_bucket(diff: i64) -> usize {
    match diff {
        i64::MIN..=-81 => 0,
        -80..=-41 => 1,
        -40..=-21 => 2,
        -20..=-11 => 3,
        -10..=-6 => 4,
        -5..=-3 => 5,
        -2 => 6,
        -1 => 7,
        0 => 8,
        1 => 9,
        2 => 10,
        3..=5 => 11,
        6..=10 => 12,
        11..=20 => 13,
        21..=40 => 14,
        41..=80 => 15,
        _ => 16,
    }
}

fn scratch_bucket(scratch: i64) -> usize {
    match scratch {
        i64::MIN..=0 => 0,
        1..=3 => 1,
        4..=6 => 2,
        7..=9 => 3,
        10..=19 => 4,
        20..=49 => 5,
        50..=99 => 6,
        _ => 7,
    }
}

pub fn features(env: &Env, question: &Question, state: &State) -> FeatureVector {
    Featurizer::new(env).encode(question, state)
}

/// Model weights. Layouts are row-major: `w_shared[i * h + j]`,
/// `w_policy[j * vocab + a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyValueParams {
    pub d: usize,
    pub h: usize,
    pub vocab: usize,
    pub w_shared: Vec<f64>,
    pub w_policy: Vec<f64>,
    pub w_value: Vec<f64>,
}

/// Same shapes as [`PolicyValueParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w_shared: Vec<f64>,
    pub w_policy: Vec<f64>,
    pub w_value: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &PolicyValueParams) -> Self {
        Gradients {
            w_shared: vec![0.0; params.w_shared.len()],
            w_policy: vec![0.0; params.w_policy.len()],
            w_value: vec![0.0; params.w_value.len()],
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        axpy(&mut self.w_shared, &other.w_shared, scale);
        axpy(&mut self.w_policy, &other.w_policy, scale);
        axpy(&mut self.w_value, &other.w_value, scale);
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.iter_mut() {
            *v *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w_shared.iter().chain(&self.w_policy).chain(&self.w_value)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w_shared
            .iter_mut()
            .chain(self.w_policy.iter_mut())
            .chain(self.w_value.iter_mut())
    }

    /// Flat view in the same order as [`PolicyValueParams::get_flat`].
    pub fn get_flat(&self, k: usize) -> f64 {
        *self.iter().nth(k).expect("flat index in range")
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Intermediate activations for one state.
struct Trunk {
    x: FeatureVector,
    hidden: Vec<f64>,
}

/// Legal actions with their log-probabilities under the policy.
#[derive(Clone, Debug)]
pub struct StepDistribution {
    pub actions: Vec<Action>,
    pub logits: Vec<f64>,
    pub logprobs: Vec<f64>,
}

impl StepDistribution {
    pub fn logprob_of(&self, id: ActionId) -> Option<f64> {
        self.actions.iter().position(|a| a.id == id).map(|i| self.logprobs[i])
    }

    /// Index of the highest logit, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// Draws `k` distinct action indices from softmax(logits / temperature)
    /// without replacement (Gumbel top-k). Below [`GREEDY_TEMPERATURE`] the
    /// ordering is by logit, lowest index first on ties.
    pub fn sample_distinct<R: Rng + ?Sized>(&self, temperature: f64, k: usize, rng: &mut R) -> Vec<usize> {
        let n = self.logits.len();
        let mut order: Vec<usize> = (0..n).collect();
        if temperature <= GREEDY_TEMPERATURE {
            order.sort_by(|&a, &b| self.logits[b].total_cmp(&self.logits[a]).then(a.cmp(&b)));
        } else {
            let keys: Vec<f64> = self
                .logits
                .iter()
                .map(|&l| {
                    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    l / temperature - (-u.ln()).ln()
                })
                .collect();
            order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
        }
        order.truncate(k.min(n));
        order
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl PolicyValueParams {
    pub fn zeros(d: usize, h: usize, vocab: usize) -> Self {
        PolicyValueParams {
            d,
            h,
            vocab,
            w_shared: vec![0.0; d * h],
            w_policy: vec![0.0; h * vocab],
            w_value: vec![0.0; h],
        }
    }

    /// Random trunk, zero heads: the initial policy is uniform over legal
    /// actions and the initial value is 0 everywhere.
    pub fn init(env: &Env, h: usize, scale: f64, seed: u64) -> Self {
        let d = Featurizer::new(env).dim();
        let mut p = Self::zeros(d, h, VOCAB_SIZE);
        let mut rng = seed::rng(seed, seed::tags::INIT, 0);
        for w in &mut p.w_shared {
            *w = rng.gen_range(-scale..scale);
        }
        p
    }

    pub fn for_env(env: &Env, h: usize) -> Self {
        Self::zeros(Featurizer::new(env).dim(), h, VOCAB_SIZE)
    }

    pub fn n_params(&self) -> usize {
        self.w_shared.len() + self.w_policy.len() + self.w_value.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w_shared.iter().chain(&self.w_policy).chain(&self.w_value)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w_shared
            .iter_mut()
            .chain(self.w_policy.iter_mut())
            .chain(self.w_value.iter_mut())
    }

    pub fn get_flat(&self, k: usize) -> f64 {
        *self.iter().nth(k).expect("flat index in range")
    }

    pub fn set_flat(&mut self, k: usize, v: f64) {
        *self.iter_mut().nth(k).expect("flat index in range") = v;
    }

    /// Flat index range covered by the value head.
    pub fn value_head_range(&self) -> std::ops::Range<usize> {
        let start = self.w_shared.len() + self.w_policy.len();
        start..start + self.w_value.len()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// `self -= lr * grads`.
    pub fn apply(&mut self, grads: &Gradients, lr: f64) {
        axpy(&mut self.w_shared, &grads.w_shared, -lr);
        axpy(&mut self.w_policy, &grads.w_policy, -lr);
        axpy(&mut self.w_value, &grads.w_value, -lr);
    }

    /// Bitwise fingerprint of all weights.
    pub fn fingerprint(&self) -> u64 {
        self.iter().fold(seed::splitmix64(self.n_params() as u64), |acc, v| {
            seed::splitmix64(acc ^ v.to_bits())
        })
    }

    fn check_shape(&self, x: &FeatureVector) -> Result<()> {
        if x.dim() != self.d {
            return Err(Error::Shape(format!("features have dim {}, params expect {}", x.dim(), self.d)));
        }
        Ok(())
    }

    fn trunk(&self, env: &Env, question: &Question, state: &State) -> Result<Trunk> {
        let x = features(env, question, state);
        self.check_shape(&x)?;
        let h = self.h;
        let mut z = vec![0.0; h];
        for (i, xi) in x.nonzero() {
            axpy(&mut z, &self.w_shared[i * h..(i + 1) * h], xi);
        }
        let hidden = z.into_iter().map(f64::tanh).collect();
        Ok(Trunk { x, hidden })
    }

    fn logit(&self, hidden: &[f64], a: usize) -> f64 {
        hidden
            .iter()
            .enumerate()
            .map(|(j, hj)| hj * self.w_policy[j * self.vocab + a])
            .sum()
    }

    fn value_from(&self, hidden: &[f64]) -> f64 {
        hidden.iter().zip(&self.w_value).map(|(a, b)| a * b).sum::<f64>().tanh()
    }

    fn distribution_from(&self, trunk: &Trunk, actions: Vec<Action>) -> StepDistribution {
        let logits: Vec<f64> = actions.iter().map(|a| self.logit(&trunk.hidden, a.id.index())).collect();
        let logprobs = log_softmax(&logits);
        StepDistribution {
            actions,
            logits,
            logprobs,
        }
    }

    pub fn step_distribution(&self, env: &Env, question: &Question, state: &State) -> Result<StepDistribution> {
        let actions = env.legal_actions(question, state)?;
        let trunk = self.trunk(env, question, state)?;
        Ok(self.distribution_from(&trunk, actions))
    }

    pub fn step_logprob(&self, env: &Env, question: &Question, state: &State, id: ActionId) -> Result<f64> {
        let dist = self.step_distribution(env, question, state)?;
        dist.logprob_of(id).ok_or(Error::IllegalAction(id))
    }

    pub fn seq_logprob(&self, env: &Env, question: &Question, steps: &[ActionId]) -> Result<f64> {
        let mut state = env.root(question);
        let mut total = 0.0;
        for &id in steps {
            total += self
                .step_logprob(env, question, &state, id)
                .map_err(|e| Error::illegal_prefix(question.id, e))?;
            state = env
                .transition(question, &state, id)
                .map_err(|e| Error::illegal_prefix(question.id, e))?;
        }
        Ok(total)
    }

    pub fn value(&self, env: &Env, question: &Question, state: &State) -> Result<f64> {
        let trunk = self.trunk(env, question, state)?;
        Ok(self.value_from(&trunk.hidden))
    }

    /// Value of the state reached by replaying `steps`.
    pub fn prefix_value(&self, env: &Env, question: &Question, steps: &[ActionId]) -> Result<f64> {
        let state = env.replay(question, steps).map_err(|e| Error::illegal_prefix(question.id, e))?;
        self.value(env, question, &state)
    }

    pub fn sample_step<R: Rng + ?Sized>(
        &self,
        env: &Env,
        question: &Question,
        state: &State,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Action> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        let dist = self.step_distribution(env, question, state)?;
        let i = dist.sample_distinct(temperature, 1, rng)[0];
        Ok(dist.actions[i])
    }

    /// Backpropagates `g_hidden` (gradient w.r.t. the tanh outputs) into the trunk.
    fn backprop_trunk(&self, trunk: &Trunk, g_hidden: &[f64], grads: &mut Gradients) {
        let h = self.h;
        let g_z: Vec<f64> = g_hidden
            .iter()
            .zip(&trunk.hidden)
            .map(|(g, hj)| g * (1.0 - hj * hj))
            .collect();
        for (i, xi) in trunk.x.nonzero() {
            axpy(&mut grads.w_shared[i * h..(i + 1) * h], &g_z, xi);
        }
    }

    /// Adds `scale * d seq_logprob(steps) / d params` into `grads`.
    pub fn accumulate_seq_logprob_grad(
        &self,
        env: &Env,
        question: &Question,
        steps: &[ActionId],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        let wrap = |e| Error::illegal_prefix(question.id, e);
        let mut state = env.root(question);
        let v = self.vocab;
        let mut g_hidden = vec![0.0; self.h];
        for &id in steps {
            let actions = env.legal_actions(question, &state).map_err(wrap)?;
            let trunk = self.trunk(env, question, &state)?;
            let dist = self.distribution_from(&trunk, actions);
            let taken = dist
                .actions
                .iter()
                .position(|a| a.id == id)
                .ok_or_else(|| wrap(Error::IllegalAction(id)))?;
            g_hidden.iter_mut().for_each(|g| *g = 0.0);
            for (k, (a, lp)) in dist.actions.iter().zip(&dist.logprobs).enumerate() {
                let indicator = if k == taken { 1.0 } else { 0.0 };
                let g_logit = scale * (indicator - lp.exp());
                let col = a.id.index();
                for j in 0..self.h {
                    grads.w_policy[j * v + col] += trunk.hidden[j] * g_logit;
                    g_hidden[j] += self.w_policy[j * v + col] * g_logit;
                }
            }
            self.backprop_trunk(&trunk, &g_hidden, grads);
            state = env.transition(question, &state, id).map_err(wrap)?;
        }
        Ok(())
    }

    /// Adds `scale * d value(state) / d params` into `grads`; returns the value.
    pub fn accumulate_value_grad(
        &self,
        env: &Env,
        question: &Question,
        state: &State,
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<f64> {
        let trunk = self.trunk(env, question, state)?;
        let value = self.value_from(&trunk.hidden);
        let g_pre = scale * (1.0 - value * value);
        let g_hidden: Vec<f64> = self.w_value.iter().map(|w| w * g_pre).collect();
        axpy(&mut grads.w_value, &trunk.hidden, g_pre);
        self.backprop_trunk(&trunk, &g_hidden, grads);
        Ok(value)
    }

    /// Gradients of `seq_logprob(steps)` and of `value(state after steps)`.
    pub fn grads_logprob_and_value(
        &self,
        env: &Env,
        question: &Question,
        steps: &[ActionId],
    ) -> Result<(Gradients, Gradients)> {
        let mut g_lp = Gradients::zeros_like(self);
        self.accumulate_seq_logprob_grad(env, question, steps, 1.0, &mut g_lp)?;
        let state = env.replay(question, steps).map_err(|e| Error::illegal_prefix(question.id, e))?;
        let mut g_v = Gradients::zeros_like(self);
        self.accumulate_value_grad(env, question, &state, 1.0, &mut g_v)?;
        Ok((g_lp, g_v))
    }

    /// Hidden activations for a state, exposed for tests and diagnostics.
    pub fn hidden(&self, env: &Env, question: &Question, state: &State) -> Result<Vec<f64>> {
        Ok(self.trunk(env, question, state)?.hidden)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_shared.len() != self.d * self.h
            || self.w_policy.len() != self.h * self.vocab
            || self.w_value.len() != self.h
        {
            return Err(Error::Shape(format!(
                "weights do not match header d={} h={} vocab={}",
                self.d, self.h, self.vocab
            )));
        }
        if self.vocab != VOCAB_SIZE {
            return Err(Error::Shape(format!("vocab {} != {}", self.vocab, VOCAB_SIZE)));
        }
        Ok(())
    }
}
