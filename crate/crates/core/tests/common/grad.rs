//! Finite-difference and stop-gradient checks of the loss terms.

use rand::Rng;
use svpo::env::{Env, Question};
use svpo::pairs::PreferencePair;
use svpo::policyval::{Gradients, PolicyValueParams};
use svpo::train::{svpo_example, value_diff, RefLogprobs, Term, TermWeights};

use super::*;

const EPS: f64 = 1e-5;

/// Loss of one term. The reg term is evaluated with the value difference
/// held at `frozen_dr_phi`, the constant its gradient is taken against.
fn term_loss(
    p: &PolicyValueParams,
    env: &Env,
    q: &Question,
    pair: &PreferencePair,
    refs: RefLogprobs,
    gamma: f64,
    term: Term,
    frozen_dr_phi: f64,
) -> f64 {
    let (l, dr_pi) = svpo_example(p, env, q, pair, refs, 0.1, gamma, &TermWeights::only(term), None).unwrap();
    match term {
        Term::Reg => (dr_pi - frozen_dr_phi).powi(2),
        _ => l.term(term),
    }
}

/// Compares analytic and central-difference gradients of one loss term on
/// random coordinates. Returns the worst relative error over coordinates
/// whose gradient is not negligible.
pub fn worst_relative_error(draw: u64, term: Term) -> f64 {
    let env = Env::default();
    let mut r = rng(draw.wrapping_mul(7919) + term as u64);
    let q = random_question(&mut r, 0);
    let params = random_params(&env, 6, 0.4, r.gen());
    let reference = random_params(&env, 6, 0.4, r.gen());
    let mut pair = random_pair(&env, &q, &mut r);
    while value_diff(&params, &env, &q, &pair).unwrap() == 0.0 {
        pair = random_pair(&env, &q, &mut r);
    }
    let refs = RefLogprobs::compute(&reference, &env, &q, &pair).unwrap();
    // keep the hinge active and away from its kink
    let gamma = 2.5;
    let dr_phi = value_diff(&params, &env, &q, &pair).unwrap();
    let mut g = Gradients::zeros_like(&params);
    svpo_example(&params, &env, &q, &pair, refs, 0.1, gamma, &TermWeights::only(term), Some((&mut g, 1.0))).unwrap();
    let flat_g: Vec<f64> = g.iter().copied().collect();
    let mut worst: f64 = 0.0;
    let candidates: Vec<usize> = (0..flat_g.len()).filter(|&k| flat_g[k].abs() > 1e-6).collect();
    assert!(!candidates.is_empty(), "{term:?} gradient vanished");
    for _ in 0..20 {
        let k = candidates[r.gen_range(0..candidates.len())];
        let mut p = params.clone();
        let x = p.get_flat(k);
        p.set_flat(k, x + EPS);
        let up = term_loss(&p, &env, &q, &pair, refs, gamma, term, dr_phi);
        p.set_flat(k, x - EPS);
        let down = term_loss(&p, &env, &q, &pair, refs, gamma, term, dr_phi);
        let numeric = (up - down) / (2.0 * EPS);
        let analytic = flat_g[k];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
    }
    worst
}

/// For one random pair: whether the reg gradient on the value head is
/// exactly zero, and whether reg itself moves when the value head moves.
pub fn reg_stop_gradient(draw: u64) -> (bool, bool) {
    let env = Env::default();
    let mut r = rng(1000 + draw);
    let q = random_question(&mut r, 0);
    let params = random_params(&env, 6, 0.4, r.gen());
    let reference = random_params(&env, 6, 0.4, r.gen());
    let mut pair = random_pair(&env, &q, &mut r);
    while value_diff(&params, &env, &q, &pair).unwrap() == 0.0 {
        // distinct prefixes can reach states with identical features
        pair = random_pair(&env, &q, &mut r);
    }
    let refs = RefLogprobs::compute(&reference, &env, &q, &pair).unwrap();
    let w = TermWeights::only(Term::Reg);
    let mut g = Gradients::zeros_like(&params);
    let (before, _) = svpo_example(&params, &env, &q, &pair, refs, 0.1, 0.5, &w, Some((&mut g, 1.0))).unwrap();
    let mut moved = params.clone();
    for v in &mut moved.w_value {
        *v += r.gen_range(-0.3..0.3);
    }
    let (after, _) = svpo_example(&moved, &env, &q, &pair, refs, 0.1, 0.5, &w, None).unwrap();
    (g.w_value.iter().all(|&x| x == 0.0), before.reg != after.reg)
}
