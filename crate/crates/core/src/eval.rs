//! Accuracy and preference win-rate metrics.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::env::{Env, Question};
use crate::error::{Error, Result};
use crate::infer::{decode, Decoded, Mode, SBSConfig};
use crate::mcts::{build_forest, SearchConfig};
use crate::pairs::{extract_pairs, label_correct, PairCounts, PreferencePair};
use crate::policyval::PolicyValueParams;
use crate::train::{implicit_reward_diff, value_diff, QuestionIndex};

/// Decodes every question and returns the fraction answered correctly
/// together with the decodes.
pub fn accuracy_with(
    params: &PolicyValueParams,
    questions: &[Question],
    mode: Mode,
    config: &SBSConfig,
    rng_seed: u64,
) -> Result<(f64, Vec<Decoded>)> {
    if questions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let decoded = questions
        .iter()
        .map(|q| decode(params, q, mode, config, rng_seed))
        .collect::<Result<Vec<_>>>()?;
    let correct = decoded.iter().filter(|d| d.reward.is_correct()).count();
    Ok((correct as f64 / questions.len() as f64, decoded))
}

pub fn accuracy(
    params: &PolicyValueParams,
    questions: &[Question],
    mode: Mode,
    config: &SBSConfig,
    rng_seed: u64,
) -> Result<f64> {
    accuracy_with(params, questions, mode, config, rng_seed).map(|(a, _)| a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub implicit_acc: f64,
    pub explicit_acc: f64,
    pub n_pairs: usize,
    pub split: Split,
}

/// 1 for a positive difference, 0.5 for a tie, 0 otherwise.
pub fn win_credit(diff: f64) -> f64 {
    if diff > 0.0 {
        1.0
    } else if diff == 0.0 {
        0.5
    } else {
        0.0
    }
}

/// How often the implicit reward difference and the value difference rank
/// each pair's winner above its loser.
pub fn win_rate(
    params: &PolicyValueParams,
    ref_params: &PolicyValueParams,
    env: &Env,
    questions: &QuestionIndex,
    pairs: &[PreferencePair],
    beta: f64,
    split: Split,
) -> Result<WinRateReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut imp, mut exp) = (0.0, 0.0);
    for p in pairs {
        let q = questions.get(p.question_id)?;
        imp += win_credit(implicit_reward_diff(params, ref_params, env, q, p, beta)?);
        exp += win_credit(value_diff(params, env, q, p)?);
    }
    let n = pairs.len() as f64;
    Ok(WinRateReport {
        implicit_acc: imp / n,
        explicit_acc: exp / n,
        n_pairs: pairs.len(),
        split,
    })
}

/// Annotates held-out questions with MCTS under `params` and extracts their
/// pairs. Question ids must not appear in `train_ids`.
pub fn build_heldout_pairs(
    params: &PolicyValueParams,
    test_questions: &[Question],
    train_ids: &HashSet<u64>,
    search: &SearchConfig,
    counts: PairCounts,
    rng_seed: u64,
) -> Result<Vec<PreferencePair>> {
    if let Some(q) = test_questions.iter().find(|q| train_ids.contains(&q.id)) {
        return Err(Error::Overlap(q.id));
    }
    let mut out = Vec::new();
    for q in test_questions {
        let mut forest = build_forest(q, params, search, rng_seed)?;
        label_correct(&mut forest);
        out.extend(extract_pairs(&forest, counts, rng_seed)?);
    }
    Ok(out)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Rounds to 4 decimal places for summaries.
pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ActionId, Difficulty, QuestionSpec};

    fn question(id: u64) -> Question {
        Question::new(
            id,
            QuestionSpec {
                start: 2,
                menu: vec![ActionId(0), ActionId(1), ActionId(7), ActionId(8)],
                chain: vec![ActionId(8)],
            },
            Difficulty::Easy,
        )
    }

    #[test]
    fn identical_models_tie_everywhere() {
        let env = Env::default();
        let p = PolicyValueParams::init(&env, 8, 0.5, 1);
        let q = question(0);
        let idx = QuestionIndex::new(&[q]);
        let pairs = vec![PreferencePair::new(
            0,
            vec![ActionId(8), ActionId(10)],
            vec![ActionId(7), ActionId(10)],
            1.0,
            -1.0,
        )];
        let r = win_rate(&p, &p, &env, &idx, &pairs, 0.1, Split::Train).unwrap();
        assert_eq!(r.implicit_acc, 0.5);
        assert_eq!(r.n_pairs, 1);
    }

    #[test]
    fn overlap_rejected() {
        let env = Env::default();
        let p = PolicyValueParams::for_env(&env, 4);
        let ids: HashSet<u64> = [3].into();
        let r = build_heldout_pairs(&p, &[question(3)], &ids, &SearchConfig::default(), PairCounts::default(), 0);
        assert!(matches!(r, Err(Error::Overlap(3))));
    }

    #[test]
    fn empty_inputs() {
        let env = Env::default();
        let p = PolicyValueParams::for_env(&env, 4);
        assert!(matches!(
            accuracy(&p, &[], Mode::Greedy, &SBSConfig::default(), 0),
            Err(Error::EmptyDataset)
        ));
        let idx = QuestionIndex::default();
        assert!(matches!(
            win_rate(&p, &p, &env, &idx, &[], 0.1, Split::Heldout),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn stats() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(round4(0.123_456), 0.1235);
        assert_eq!(win_credit(0.0), 0.5);
    }
}
