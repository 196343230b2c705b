//! Decoding: greedy on the policy alone, and value-guided step-level beam
//! search (SBS) where whole steps are the beam unit.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{action, ActionId, Env, Question, Reward, Solution};
use crate::error::{Error, Result};
use crate::policyval::{PolicyValueParams, GREEDY_TEMPERATURE};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SBSConfig {
    /// Beams retained per level.
    pub b1: usize,
    /// Candidate next steps sampled per beam.
    pub b2: usize,
    pub temperature: f64,
    pub max_depth: usize,
}

impl Default for SBSConfig {
    fn default() -> Self {
        SBSConfig {
            b1: 1,
            b2: 5,
            temperature: 0.8,
            max_depth: crate::env::DEFAULT_MAX_DEPTH,
        }
    }
}

impl SBSConfig {
    pub fn with_b1(b1: usize) -> Self {
        SBSConfig {
            b1,
            ..SBSConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b1 == 0 || self.b2 == 0 {
            return Err(Error::Config("b1 and b2 must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.max_depth == 0 {
            return Err(Error::Config("max_depth must be >= 1".into()));
        }
        Ok(())
    }

    fn env(&self) -> Env {
        Env {
            max_depth: self.max_depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamCandidate {
    pub prefix: Vec<ActionId>,
    pub logprob: f64,
    pub value_score: f64,
    pub finished: bool,
    pub reward: Option<Reward>,
}

impl BeamCandidate {
    fn root() -> Self {
        BeamCandidate {
            prefix: Vec::new(),
            logprob: 0.0,
            value_score: 0.0,
            finished: false,
            reward: None,
        }
    }
}

/// Higher score first, then higher logprob, then lower index.
fn rank(a: (usize, &BeamCandidate), b: (usize, &BeamCandidate)) -> Ordering {
    b.1.value_score
        .total_cmp(&a.1.value_score)
        .then(b.1.logprob.total_cmp(&a.1.logprob))
        .then(a.0.cmp(&b.0))
}

/// Per-level bookkeeping of one SBS run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelTrace {
    pub live_in: usize,
    pub evaluated: usize,
    /// Every extension scored at this level.
    pub candidates: Vec<Vec<ActionId>>,
    pub retained: Vec<Vec<ActionId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub solution: Solution,
    pub logprob: f64,
    pub score: f64,
    pub reward: Reward,
    pub predicted: Option<i64>,
}

impl Decoded {
    fn from_steps(env: &Env, question: &Question, steps: Vec<ActionId>, logprob: f64, score: f64) -> Result<Self> {
        let reward = env.outcome(question, &steps)?;
        let predicted = match steps.split_last() {
            Some((&last, prefix)) => {
                let before = env.replay(question, prefix)?;
                action(last)?.proposed_answer(before.scratch)
            }
            None => None,
        };
        Ok(Decoded {
            solution: Solution {
                question_id: question.id,
                steps,
            },
            logprob,
            score,
            reward,
            predicted,
        })
    }
}

/// Takes the argmax-probability legal step until a terminal step or the
/// depth limit.
pub fn greedy_decode(params: &PolicyValueParams, env: &Env, question: &Question) -> Result<Decoded> {
    let mut state = env.root(question);
    let mut logprob = 0.0;
    while !state.is_answered() && state.depth < env.max_depth {
        let dist = params.step_distribution(env, question, &state)?;
        let i = dist.argmax();
        logprob += dist.logprobs[i];
        state = env.transition(question, &state, dist.actions[i].id)?;
    }
    let score = logprob;
    Decoded::from_steps(env, question, state.steps, logprob, score)
}

/// Step-level beam search. Each level samples `b2` distinct steps per live
/// beam and scores every extension by the value head, including finished
/// extensions, whose answered state the value head rates without access to
/// the reward. The top `b1`
/// extensions are kept, finished ones are parked, and the best parked or
/// live candidate is returned.
pub fn sbs(params: &PolicyValueParams, question: &Question, config: &SBSConfig, rng_seed: u64) -> Result<Decoded> {
    sbs_traced(params, question, config, rng_seed).map(|(d, _)| d)
}

pub fn sbs_traced(
    params: &PolicyValueParams,
    question: &Question,
    config: &SBSConfig,
    rng_seed: u64,
) -> Result<(Decoded, Vec<LevelTrace>)> {
    config.validate()?;
    let env = config.env();
    let mut rng = seed::rng(rng_seed, seed::tags::SBS, question.id);
    let temperature = config.temperature.max(GREEDY_TEMPERATURE);
    let mut live = vec![BeamCandidate::root()];
    let mut parked: Vec<BeamCandidate> = Vec::new();
    let mut trace = Vec::new();

    while !live.is_empty() {
        let mut level = LevelTrace {
            live_in: live.len(),
            ..LevelTrace::default()
        };
        let mut extensions = Vec::with_capacity(live.len() * config.b2);
        for beam in &live {
            let state = env.replay(question, &beam.prefix)?;
            let dist = params.step_distribution(&env, question, &state)?;
            for i in dist.sample_distinct(temperature, config.b2, &mut rng) {
                let a = dist.actions[i];
                let next = env.transition(question, &state, a.id)?;
                let mut prefix = beam.prefix.clone();
                prefix.push(a.id);
                let logprob = beam.logprob + dist.logprobs[i];
                let value_score = params.value(&env, question, &next)?;
                let cand = if a.is_terminal() {
                    BeamCandidate {
                        prefix,
                        logprob,
                        value_score,
                        finished: true,
                        reward: Some(env.terminal_reward(question, &state, a.id)?),
                    }
                } else if next.depth >= env.max_depth {
                    // out of depth without answering: scored by its known reward
                    BeamCandidate {
                        prefix,
                        logprob,
                        value_score: Reward::Incorrect.value(),
                        finished: true,
                        reward: Some(Reward::Incorrect),
                    }
                } else {
                    BeamCandidate {
                        prefix,
                        logprob,
                        value_score,
                        finished: false,
                        reward: None,
                    }
                };
                extensions.push(cand);
            }
        }
        level.evaluated = extensions.len();
        level.candidates = extensions.iter().map(|c| c.prefix.clone()).collect();
        let mut order: Vec<usize> = (0..extensions.len()).collect();
        order.sort_by(|&a, &b| rank((a, &extensions[a]), (b, &extensions[b])));
        order.truncate(config.b1);
        live = Vec::with_capacity(config.b1);
        for i in order {
            let c = extensions[i].clone();
            level.retained.push(c.prefix.clone());
            if c.finished {
                parked.push(c);
            } else {
                live.push(c);
            }
        }
        trace.push(level);
    }

    let best = parked
        .iter()
        .enumerate()
        .min_by(|a, b| rank(*a, *b))
        .map(|(_, c)| c.clone())
        .expect("search parks at least one candidate");
    let decoded = Decoded::from_steps(&env, question, best.prefix, best.logprob, best.value_score)?;
    Ok((decoded, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Greedy,
    Sbs,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Greedy => "greedy",
            Mode::Sbs => "sbs",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Mode::Greedy),
            "sbs" => Ok(Mode::Sbs),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

pub fn decode(
    params: &PolicyValueParams,
    question: &Question,
    mode: Mode,
    config: &SBSConfig,
    rng_seed: u64,
) -> Result<Decoded> {
    match mode {
        Mode::Greedy => greedy_decode(params, &config.env(), question),
        Mode::Sbs => sbs(params, question, config, rng_seed),
    }
}

/// One line of the inference output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub question_id: u64,
    pub mode: Mode,
    pub b1: usize,
    pub b2: usize,
    pub steps: Vec<ActionId>,
    pub predicted: Option<i64>,
    pub truth: i64,
    pub correct: bool,
    pub score: f64,
}

impl InferenceRecord {
    pub fn new(question: &Question, mode: Mode, config: &SBSConfig, decoded: &Decoded) -> Self {
        let (b1, b2) = match mode {
            Mode::Greedy => (1, 1),
            Mode::Sbs => (config.b1, config.b2),
        };
        InferenceRecord {
            question_id: question.id,
            mode,
            b1,
            b2,
            steps: decoded.solution.steps.clone(),
            predicted: decoded.predicted,
            truth: question.truth,
            correct: decoded.reward.is_correct(),
            score: decoded.score,
        }
    }
}
