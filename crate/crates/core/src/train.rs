//! Training objectives and the gradient-descent loop.
//!
//! Pretraining minimizes `sft + w_mse_pretrain * mse` over correct solutions
//! and search value targets. The preference stage minimizes, per pair,
//!
//! ```text
//! dpo    = -log sigmoid(dr_pi)
//! margin = max(0, gamma - dr_phi)
//! reg    = (dr_pi - sg[dr_phi])^2
//! ```
//!
//! plus SFT and MSE terms on the winner prefix, where `dr_pi` is the
//! beta-scaled policy/reference log-ratio difference and `dr_phi` the value
//! head difference. Every term is averaged over the batch before weighting.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{Env, Question, Solution};
use crate::error::{Error, Result};
use crate::pairs::{PreferencePair, ValueTarget};
use crate::policyval::{Gradients, PolicyValueParams};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Svpo,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Svpo => "svpo",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub gamma: f64,
    pub w_margin: f64,
    pub w_mse: f64,
    pub w_reg: f64,
    pub w_sft: f64,
    /// MSE weight used by the pretraining objective.
    pub w_mse_pretrain: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub stage: Stage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.1,
            gamma: 0.5,
            w_margin: 0.25,
            w_mse: 0.25,
            w_reg: 0.001,
            w_sft: 5.0,
            w_mse_pretrain: 0.01,
            lr: 5e-2,
            batch_size: 32,
            epochs: 4,
            stage: Stage::Svpo,
        }
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            epochs: 30,
            stage: Stage::Pretrain,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        let weights = [self.w_margin, self.w_mse, self.w_reg, self.w_sft, self.w_mse_pretrain, self.lr];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights and lr must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> TermWeights {
        match self.stage {
            Stage::Svpo => TermWeights {
                dpo: 1.0,
                margin: self.w_margin,
                reg: self.w_reg,
                sft: self.w_sft,
                mse: self.w_mse,
            },
            Stage::Pretrain => TermWeights {
                dpo: 0.0,
                margin: 0.0,
                reg: 0.0,
                sft: 1.0,
                mse: self.w_mse_pretrain,
            },
        }
    }
}

/// Per-term loss weights. Setting one weight to 1 and the rest to 0 isolates
/// a single term and its gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub dpo: f64,
    pub margin: f64,
    pub reg: f64,
    pub sft: f64,
    pub mse: f64,
}

impl TermWeights {
    pub fn only(term: Term) -> Self {
        let mut w = TermWeights {
            dpo: 0.0,
            margin: 0.0,
            reg: 0.0,
            sft: 0.0,
            mse: 0.0,
        };
        *w.get_mut(term) = 1.0;
        w
    }

    fn get_mut(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::Dpo => &mut self.dpo,
            Term::Margin => &mut self.margin,
            Term::Reg => &mut self.reg,
            Term::Sft => &mut self.sft,
            Term::Mse => &mut self.mse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Dpo,
    Margin,
    Reg,
    Sft,
    Mse,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Dpo, Term::Margin, Term::Reg, Term::Sft, Term::Mse];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dpo: f64,
    pub margin: f64,
    pub reg: f64,
    pub sft: f64,
    pub mse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn term(&self, term: Term) -> f64 {
        match term {
            Term::Dpo => self.dpo,
            Term::Margin => self.margin,
            Term::Reg => self.reg,
            Term::Sft => self.sft,
            Term::Mse => self.mse,
        }
    }

    pub fn weighted_total(&self, w: &TermWeights) -> f64 {
        w.dpo * self.dpo + w.margin * self.margin + w.reg * self.reg + w.sft * self.sft + w.mse * self.mse
    }

    fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.dpo += s * other.dpo;
        self.margin += s * other.margin;
        self.reg += s * other.reg;
        self.sft += s * other.sft;
        self.mse += s * other.mse;
    }
}

/// `-log sigmoid(x)` without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Question lookup by id.
#[derive(Clone, Debug, Default)]
pub struct QuestionIndex {
    by_id: HashMap<u64, Question>,
}

impl QuestionIndex {
    pub fn new(questions: &[Question]) -> Self {
        QuestionIndex {
            by_id: questions.iter().map(|q| (q.id, q.clone())).collect(),
        }
    }

    pub fn get(&self, id: u64) -> Result<&Question> {
        self.by_id.get(&id).ok_or(Error::UnknownQuestion(id))
    }
}

/// Reference-policy log-probabilities of a pair's two prefixes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefLogprobs {
    pub winner: f64,
    pub loser: f64,
}

impl RefLogprobs {
    pub fn compute(ref_params: &PolicyValueParams, env: &Env, question: &Question, pair: &PreferencePair) -> Result<Self> {
        Ok(RefLogprobs {
            winner: ref_params.seq_logprob(env, question, &pair.winner)?,
            loser: ref_params.seq_logprob(env, question, &pair.loser)?,
        })
    }
}

/// `beta * [(log pi(w) - log pi'(w)) - (log pi(l) - log pi'(l))]`.
pub fn implicit_reward_diff(
    params: &PolicyValueParams,
    ref_params: &PolicyValueParams,
    env: &Env,
    question: &Question,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    let r = RefLogprobs::compute(ref_params, env, question, pair)?;
    let lw = params.seq_logprob(env, question, &pair.winner)?;
    let ll = params.seq_logprob(env, question, &pair.loser)?;
    Ok(beta * ((lw - r.winner) - (ll - r.loser)))
}

/// `V(winner state) - V(loser state)`.
pub fn value_diff(params: &PolicyValueParams, env: &Env, question: &Question, pair: &PreferencePair) -> Result<f64> {
    Ok(params.prefix_value(env, question, &pair.winner)? - params.prefix_value(env, question, &pair.loser)?)
}

/// Loss terms of one pair. When `grads` is given, adds
/// `scale * d(weighted total)/d params` into it. The reg term treats the
/// value difference as a constant.
#[allow(clippy::too_many_arguments)]
pub fn svpo_example(
    params: &PolicyValueParams,
    env: &Env,
    question: &Question,
    pair: &PreferencePair,
    refs: RefLogprobs,
    beta: f64,
    gamma: f64,
    weights: &TermWeights,
    grads: Option<(&mut Gradients, f64)>,
) -> Result<(LossBreakdown, f64)> {
    let lw = params.seq_logprob(env, question, &pair.winner)?;
    let ll = params.seq_logprob(env, question, &pair.loser)?;
    let sw = env
        .replay(question, &pair.winner)
        .map_err(|e| Error::illegal_prefix(question.id, e))?;
    let sl = env.replay(question, &pair.loser).map_err(|e| Error::illegal_prefix(question.id, e))?;
    let vw = params.value(env, question, &sw)?;
    let vl = params.value(env, question, &sl)?;

    let dr_pi = beta * ((lw - refs.winner) - (ll - refs.loser));
    let dr_phi = vw - vl;
    let hinge = gamma - dr_phi;
    let mut loss = LossBreakdown {
        dpo: neg_log_sigmoid(dr_pi),
        margin: hinge.max(0.0),
        reg: (dr_pi - dr_phi).powi(2),
        sft: -lw,
        mse: (vw - pair.q_w).powi(2),
        total: 0.0,
    };
    loss.total = loss.weighted_total(weights);

    if let Some((grads, scale)) = grads {
        // d/d dr_pi from dpo and reg; the margin hinge uses subgradient 0 at the kink
        let g_dr_pi = weights.dpo * -sigmoid(-dr_pi) + weights.reg * 2.0 * (dr_pi - dr_phi);
        let g_dr_phi = if hinge > 0.0 { -weights.margin } else { 0.0 };
        let c_lw = scale * (beta * g_dr_pi - weights.sft);
        let c_ll = scale * (-beta * g_dr_pi);
        let c_vw = scale * (g_dr_phi + weights.mse * 2.0 * (vw - pair.q_w));
        let c_vl = scale * (-g_dr_phi);
        if c_lw != 0.0 {
            params.accumulate_seq_logprob_grad(env, question, &pair.winner, c_lw, grads)?;
        }
        if c_ll != 0.0 {
            params.accumulate_seq_logprob_grad(env, question, &pair.loser, c_ll, grads)?;
        }
        if c_vw != 0.0 {
            params.accumulate_value_grad(env, question, &sw, c_vw, grads)?;
        }
        if c_vl != 0.0 {
            params.accumulate_value_grad(env, question, &sl, c_vl, grads)?;
        }
    }
    Ok((loss, dr_pi))
}

/// Preference-stage loss of a single pair with the configured weights.
pub fn svpo_loss(
    params: &PolicyValueParams,
    ref_params: &PolicyValueParams,
    env: &Env,
    question: &Question,
    pair: &PreferencePair,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if config.stage != Stage::Svpo {
        return Err(Error::Config("svpo_loss requires stage = svpo".into()));
    }
    let refs = RefLogprobs::compute(ref_params, env, question, pair)?;
    let (loss, _) = svpo_example(params, env, question, pair, refs, config.beta, config.gamma, &config.weights(), None)?;
    Ok(loss)
}

/// Batch pretraining loss: mean SFT negative log-likelihood over solutions
/// plus the weighted mean squared value error over targets.
pub fn pretrain_loss(
    params: &PolicyValueParams,
    env: &Env,
    questions: &QuestionIndex,
    sft_batch: &[Solution],
    value_targets: &[ValueTarget],
    weights: &TermWeights,
    grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    if sft_batch.is_empty() && value_targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut loss = LossBreakdown::default();
    let mut grads = grads;
    if !sft_batch.is_empty() {
        let s = 1.0 / sft_batch.len() as f64;
        for sol in sft_batch {
            let q = questions.get(sol.question_id)?;
            loss.sft -= s * params.seq_logprob(env, q, &sol.steps)?;
            if let Some(g) = grads.as_deref_mut() {
                if weights.sft != 0.0 {
                    params.accumulate_seq_logprob_grad(env, q, &sol.steps, -s * weights.sft, g)?;
                }
            }
        }
    }
    if !value_targets.is_empty() {
        let s = 1.0 / value_targets.len() as f64;
        for t in value_targets {
            let q = questions.get(t.question_id)?;
            let state = env.replay(q, &t.prefix).map_err(|e| Error::illegal_prefix(q.id, e))?;
            let v = params.value(env, q, &state)?;
            loss.mse += s * (v - t.target).powi(2);
            if let Some(g) = grads.as_deref_mut() {
                if weights.mse != 0.0 {
                    params.accumulate_value_grad(env, q, &state, s * weights.mse * 2.0 * (v - t.target), g)?;
                }
            }
        }
    }
    loss.total = loss.weighted_total(weights);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: PolicyValueParams,
    /// Frozen reference policy of the preference stage.
    pub ref_params: Option<PolicyValueParams>,
    pub step: usize,
    pub epoch: usize,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        c.params.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: Stage,
    pub dpo: f64,
    pub margin: f64,
    pub reg: f64,
    pub sft: f64,
    pub mse: f64,
    pub total: f64,
    pub grad_norm: f64,
    #[serde(skip)]
    pub max_abs_implicit: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<StepLog>,
}

impl TrainRun {
    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.log {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean of a loss term over the steps of each epoch.
    pub fn epoch_means(&self, term: Term) -> Vec<f64> {
        let per_epoch = self.log.len() / self.checkpoints.len().max(1);
        self.log
            .chunks(per_epoch.max(1))
            .map(|c| c.iter().map(|r| r.loss().term(term)).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

impl StepLog {
    pub fn loss(&self) -> LossBreakdown {
        LossBreakdown {
            dpo: self.dpo,
            margin: self.margin,
            reg: self.reg,
            sft: self.sft,
            mse: self.mse,
            total: self.total,
        }
    }
}

/// Training inputs for one stage.
pub enum TrainData<'a> {
    Pretrain {
        solutions: &'a [Solution],
        value_targets: &'a [ValueTarget],
    },
    Svpo {
        pairs: &'a [PreferencePair],
        /// Pretrain checkpoint: initial weights and frozen reference.
        init: Option<&'a Checkpoint>,
    },
}

fn shuffled(n: usize, seed_value: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed_value, seed::tags::SHUFFLE, epoch as u64));
    idx
}

/// Mini-batch gradient descent with a constant learning rate. Batches are
/// reshuffled every epoch from the seed; one checkpoint is emitted per epoch.
pub fn train_loop(
    env: &Env,
    questions: &QuestionIndex,
    init: &PolicyValueParams,
    data: TrainData<'_>,
    config: &TrainConfig,
    rng_seed: u64,
) -> Result<TrainRun> {
    config.validate()?;
    match data {
        TrainData::Pretrain {
            solutions,
            value_targets,
        } => pretrain_run(env, questions, init, solutions, value_targets, config, rng_seed),
        TrainData::Svpo { pairs, init } => {
            let init = init.ok_or(Error::MissingCheckpoint)?;
            svpo_run(env, questions, init, pairs, config, rng_seed)
        }
    }
}

fn pretrain_run(
    env: &Env,
    questions: &QuestionIndex,
    init: &PolicyValueParams,
    solutions: &[Solution],
    value_targets: &[ValueTarget],
    config: &TrainConfig,
    rng_seed: u64,
) -> Result<TrainRun> {
    if solutions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let config = TrainConfig {
        stage: Stage::Pretrain,
        ..config.clone()
    };
    let weights = config.weights();
    let mut params = init.clone();
    let mut run = TrainRun {
        checkpoints: Vec::new(),
        log: Vec::new(),
    };
    let n_batches = solutions.len().div_ceil(config.batch_size);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = shuffled(solutions.len(), rng_seed, epoch);
        let vorder = shuffled(value_targets.len(), rng_seed ^ 0x5eed, epoch);
        let vchunk = value_targets.len().div_ceil(n_batches).max(1);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Solution> = chunk.iter().map(|&i| solutions[i].clone()).collect();
            let vbatch: Vec<ValueTarget> = vorder
                .iter()
                .skip(b * vchunk)
                .take(vchunk)
                .map(|&i| value_targets[i].clone())
                .collect();
            let mut grads = Gradients::zeros_like(&params);
            let loss = pretrain_loss(&params, env, questions, &batch, &vbatch, &weights, Some(&mut grads))?;
            run.log.push(StepLog {
                step,
                stage: Stage::Pretrain,
                dpo: loss.dpo,
                margin: loss.margin,
                reg: loss.reg,
                sft: loss.sft,
                mse: loss.mse,
                total: loss.total,
                grad_norm: grads.norm(),
                max_abs_implicit: 0.0,
            });
            if config.lr != 0.0 {
                params.apply(&grads, config.lr);
            }
            step += 1;
        }
        run.checkpoints.push(Checkpoint {
            params: params.clone(),
            ref_params: None,
            step,
            epoch: epoch + 1,
            config: config.clone(),
        });
    }
    Ok(run)
}

fn svpo_run(
    env: &Env,
    questions: &QuestionIndex,
    init: &Checkpoint,
    pairs: &[PreferencePair],
    config: &TrainConfig,
    rng_seed: u64,
) -> Result<TrainRun> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let config = TrainConfig {
        stage: Stage::Svpo,
        ..config.clone()
    };
    let weights = config.weights();
    let ref_params = init.params.clone();
    let refs = pairs
        .iter()
        .map(|p| RefLogprobs::compute(&ref_params, env, questions.get(p.question_id)?, p))
        .collect::<Result<Vec<_>>>()?;
    let mut params = init.params.clone();
    let mut run = TrainRun {
        checkpoints: Vec::new(),
        log: Vec::new(),
    };
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = shuffled(pairs.len(), rng_seed, epoch);
        for chunk in order.chunks(config.batch_size) {
            let s = 1.0 / chunk.len() as f64;
            let mut grads = Gradients::zeros_like(&params);
            let mut mean = LossBreakdown::default();
            let mut max_abs: f64 = 0.0;
            for &i in chunk {
                let pair = &pairs[i];
                let q = questions.get(pair.question_id)?;
                let (loss, dr_pi) = svpo_example(
                    &params,
                    env,
                    q,
                    pair,
                    refs[i],
                    config.beta,
                    config.gamma,
                    &weights,
                    Some((&mut grads, s)),
                )?;
                mean.add_scaled(&loss, s);
                max_abs = max_abs.max(dr_pi.abs());
            }
            mean.total = mean.weighted_total(&weights);
            run.log.push(StepLog {
                step,
                stage: Stage::Svpo,
                dpo: mean.dpo,
                margin: mean.margin,
                reg: mean.reg,
                sft: mean.sft,
                mse: mean.mse,
                total: mean.total,
                grad_norm: grads.norm(),
                max_abs_implicit: max_abs,
            });
            if config.lr != 0.0 {
                params.apply(&grads, config.lr);
            }
            step += 1;
        }
        run.checkpoints.push(Checkpoint {
            params: params.clone(),
            ref_params: Some(ref_params.clone()),
            step,
            epoch: epoch + 1,
            config: config.clone(),
        });
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ActionId, Difficulty, QuestionSpec};

    fn question() -> Question {
        Question::new(
            7,
            QuestionSpec {
                start: 3,
                menu: vec![ActionId(0), ActionId(1), ActionId(7), ActionId(8)],
                chain: vec![ActionId(7), ActionId(1)],
            },
            Difficulty::Easy,
        )
    }

    fn pair() -> PreferencePair {
        PreferencePair::new(7, vec![ActionId(7), ActionId(1)], vec![ActionId(7), ActionId(0)], 0.5, -0.5)
    }

    #[test]
    fn identical_models_have_zero_implicit_diff() {
        let env = Env::default();
        let p = PolicyValueParams::init(&env, 8, 0.5, 2);
        let d = implicit_reward_diff(&p, &p, &env, &question(), &pair(), 0.1).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn zero_diffs_give_ln2_and_gamma() {
        let env = Env::default();
        let p = PolicyValueParams::for_env(&env, 4);
        let loss = svpo_loss(&p, &p, &env, &question(), &pair(), &TrainConfig::default()).unwrap();
        assert!((loss.dpo - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(loss.margin, 0.5);
        assert_eq!(loss.reg, 0.0);
        let w = TrainConfig::default().weights();
        assert!((loss.total - loss.weighted_total(&w)).abs() < 1e-12);
    }

    #[test]
    fn numerics() {
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
        assert!(neg_log_sigmoid(800.0) >= 0.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }

    #[test]
    fn degenerate_pair_has_zero_value_diff() {
        let env = Env::default();
        let p = PolicyValueParams::init(&env, 8, 0.5, 2);
        let mut same = pair();
        same.loser = same.winner.clone();
        assert_eq!(value_diff(&p, &env, &question(), &same).unwrap(), 0.0);
    }

    #[test]
    fn svpo_needs_checkpoint_and_stage() {
        let env = Env::default();
        let qs = QuestionIndex::new(&[question()]);
        let p = PolicyValueParams::for_env(&env, 4);
        let pairs = [pair()];
        let r = train_loop(
            &env,
            &qs,
            &p,
            TrainData::Svpo { pairs: &pairs, init: None },
            &TrainConfig::default(),
            0,
        );
        assert!(matches!(r, Err(Error::MissingCheckpoint)));
        assert!(svpo_loss(&p, &p, &env, &question(), &pair(), &TrainConfig::pretrain()).is_err());
    }

    #[test]
    fn empty_pretrain_batch() {
        let env = Env::default();
        let qs = QuestionIndex::new(&[question()]);
        let p = PolicyValueParams::for_env(&env, 4);
        let w = TrainConfig::pretrain().weights();
        assert!(matches!(pretrain_loss(&p, &env, &qs, &[], &[], &w, None), Err(Error::EmptyBatch)));
    }
}
