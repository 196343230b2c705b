//! WebAssembly bindings behind `www/index.html`. Every entry point returns a
//! JSON string.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use svpo::config::ExperimentConfig;
use svpo::env::{ActionId, Difficulty, Question, QuestionSpec, VOCAB};
use svpo::infer::{greedy_decode, sbs, SBSConfig};
use svpo::mcts::{build_forest, SearchConfig};
use svpo::pairs::{extract_pairs, label_correct, PairCounts};
use svpo::pipeline::{run_pipeline, Corpus};
use svpo::policyval::PolicyValueParams;
use svpo::train::neg_log_sigmoid;

/// Action ids 0..OPS are arithmetic operations, the rest are answers.
const OPS: u8 = 10;

fn render(steps: &[ActionId]) -> String {
    steps.iter().map(|a| VOCAB[a.index()].to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_ids(text: &str) -> Result<Vec<ActionId>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u8>().map(ActionId).map_err(|_| format!("not an action id: {s:?}")))
        .collect()
}

/// Per-pair loss terms as the implicit reward difference sweeps over
/// `[-4, 4]`, for a fixed value difference and margin.
pub fn loss_curve_value(gamma: f64, dr_phi: f64, points: usize) -> Value {
    let points = points.max(2);
    let xs: Vec<f64> = (0..points).map(|i| -4.0 + 8.0 * i as f64 / (points - 1) as f64).collect();
    json!({
        "x": xs,
        "dpo": xs.iter().map(|&x| neg_log_sigmoid(x)).collect::<Vec<_>>(),
        "reg": xs.iter().map(|&x| (x - dr_phi).powi(2)).collect::<Vec<_>>(),
        "margin": (gamma - dr_phi).max(0.0),
    })
}

pub fn search_value(start: i64, menu: &str, chain: &str, simulations: usize, trees: usize, seed: u64) -> Result<Value, String> {
    let mut menu = parse_ids(menu)?;
    menu.sort();
    menu.dedup();
    let chain = parse_ids(chain)?;
    if menu.is_empty() || menu.iter().any(|a| a.0 >= OPS) {
        return Err(format!("menu entries must be operation ids below {OPS}"));
    }
    if let Some(a) = chain.iter().find(|a| !menu.contains(a)) {
        return Err(format!("chain step {a} is not on the menu"));
    }
    let question = Question::new(0, QuestionSpec { start, menu, chain }, Difficulty::Medium);
    let config = SearchConfig {
        max_simulations: simulations,
        max_trees: trees,
        ..SearchConfig::default()
    };
    config.validate().map_err(|e| e.to_string())?;
    let params = PolicyValueParams::init(&config.env(), 16, 0.3, seed);
    let mut forest = build_forest(&question, &params, &config, seed).map_err(|e| e.to_string())?;
    label_correct(&mut forest);
    let pairs = extract_pairs(&forest, PairCounts::default(), seed).map_err(|e| e.to_string())?;
    let trees: Vec<Value> = forest
        .trees
        .iter()
        .map(|t| {
            let children: Vec<Value> = t.root().children.iter().map(|&c| {
                let n = t.node(c);
                json!({ "step": render(n.action.as_slice()), "N": n.visits, "Q": n.q, "correct": n.correct })
            }).collect();
            json!({
                "nodes": t.len(),
                "solutions": t.correct_solutions().map(|n| render(t.node(n.id).steps())).collect::<Vec<_>>(),
                "root_children": children,
            })
        })
        .collect();
    Ok(json!({
        "truth": question.truth,
        "trees": trees,
        "pairs": pairs.iter().map(|p| json!({
            "winner": render(&p.winner),
            "loser": render(&p.loser),
            "q_w": p.q_w,
            "q_l": p.q_l,
        })).collect::<Vec<_>>(),
    }))
}

pub fn train_and_decode_value(seed: u64, n_train: usize) -> Result<Value, String> {
    let mut config = ExperimentConfig {
        seed,
        n_train,
        n_test: 20,
        ..ExperimentConfig::default()
    };
    for (k, v) in [
        ("pretrain.epochs", "20"),
        ("svpo.epochs", "5"),
        ("svpo.beta", "1"),
        ("svpo.w_sft", "0"),
        ("svpo.w_margin", "1"),
        ("search.max_simulations", "40"),
    ] {
        config.set(k, v).map_err(|e| e.to_string())?;
    }
    config.validate().map_err(|e| e.to_string())?;
    let bundle = run_pipeline(&config, None).map_err(|e| e.to_string())?;
    let params = &bundle.svpo.checkpoint.params;
    let corpus = Corpus::generate(&config).map_err(|e| e.to_string())?;
    let env = config.env();
    let beam = SBSConfig::with_b1(3);
    let mut rows = Vec::new();
    for q in &corpus.test {
        let g = greedy_decode(params, &env, q).map_err(|e| e.to_string())?;
        let s = sbs(params, q, &beam, seed ^ q.id).map_err(|e| e.to_string())?;
        rows.push(json!({
            "start": q.spec.start,
            "menu": render(&q.spec.menu),
            "truth": q.truth,
            "greedy": render(&g.solution.steps),
            "greedy_correct": g.predicted == Some(q.truth),
            "sbs": render(&s.solution.steps),
            "sbs_correct": s.predicted == Some(q.truth),
        }));
    }
    Ok(json!({ "summary": bundle.summary, "questions": rows }))
}

#[wasm_bindgen]
pub fn loss_curve(gamma: f64, dr_phi: f64, points: usize) -> String {
    loss_curve_value(gamma, dr_phi, points).to_string()
}

#[wasm_bindgen]
pub fn search(start: i32, menu: &str, chain: &str, simulations: usize, trees: usize, seed: u32) -> Result<String, JsError> {
    search_value(start.into(), menu, chain, simulations, trees, seed.into())
        .map(|v| v.to_string())
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn train_and_decode(seed: u32, n_train: usize) -> Result<String, JsError> {
    train_and_decode_value(seed.into(), n_train)
        .map(|v| v.to_string())
        .map_err(|e| JsError::new(&e))
}
