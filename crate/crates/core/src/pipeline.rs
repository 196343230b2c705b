//! End-to-end experiment driver: corpus, annotation, pretraining, preference
//! training arms, decoding and reports.
//!
//! [`Prepared`] holds everything shared between arms of one seed (corpus,
//! forests, pair data, pretrain checkpoints and held-out pairs), so
//! ablations and sweeps only repeat the preference stage and evaluation.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig};
use crate::env::{gen_dataset, Env, Question, Solution};
use crate::error::{Error, Result};
use crate::eval::{accuracy_with, build_heldout_pairs, mean_std, round4, win_rate, Split, WinRateReport};
use crate::infer::{InferenceRecord, Mode, SBSConfig};
use crate::io::{write_json, write_jsonl};
use crate::mcts::{build_forest, Forest};
use crate::pairs::{
    example_counts, extract_pairs, extract_sft_solutions, extract_value_targets, label_correct, PairKind,
    PreferencePair, ValueTarget,
};
use crate::policyval::PolicyValueParams;
use crate::seed;
use crate::train::{train_loop, Checkpoint, QuestionIndex, StepLog, TrainConfig, TrainData, TrainRun};

pub const SUMMARY_VERSION: u32 = 1;

/// Artifact file names inside the output directory.
pub mod files {
    pub const CONFIG: &str = "config.txt";
    pub const TRAIN: &str = "train.jsonl";
    pub const TEST: &str = "test.jsonl";
    pub const INIT: &str = "init.json";
    pub const BOOTSTRAP_FORESTS: &str = "bootstrap_forests.jsonl";
    pub const FORESTS: &str = "forests.jsonl";
    pub const PAIRS: &str = "pairs.jsonl";
    pub const VALUE_TARGETS: &str = "value_targets.jsonl";
    pub const SFT: &str = "sft.jsonl";
    pub const HELDOUT_PAIRS: &str = "heldout_pairs.jsonl";
    pub const PRETRAIN_CKPT: &str = "pretrain.ckpt.json";
    pub const SVPO_CKPT: &str = "svpo.ckpt.json";
    pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
    pub const SVPO_LOG: &str = "svpo_log.csv";
    pub const INFER_GREEDY: &str = "infer_greedy.jsonl";
    pub const INFER_SBS: &str = "infer_sbs.jsonl";
    pub const EVAL: &str = "eval.json";
    pub const SUMMARY: &str = "summary.json";
    pub const ABLATE: &str = "ablate.json";
    pub const ABLATE_CSV: &str = "ablate.csv";
    pub const SWEEP: &str = "sweep.json";
    pub const SWEEP_CSV: &str = "sweep.csv";
}

/// Seeds for each randomized stage, derived from the experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSeeds {
    pub init: u64,
    pub bootstrap: u64,
    pub annotate: u64,
    pub heldout: u64,
    pub pairs: u64,
    pub pretrain: u64,
    pub svpo: u64,
    pub sbs: u64,
}

impl StageSeeds {
    pub fn new(s: u64) -> Self {
        StageSeeds {
            init: seed::derive(s, seed::tags::INIT, 0),
            bootstrap: seed::derive(s, seed::tags::TREE, 0),
            annotate: seed::derive(s, seed::tags::TREE, 2),
            heldout: seed::derive(s, seed::tags::TREE, 1),
            pairs: seed::derive(s, seed::tags::PAIRS, 0),
            pretrain: seed::derive(s, seed::tags::SHUFFLE, 0),
            svpo: seed::derive(s, seed::tags::SHUFFLE, 1),
            sbs: seed::derive(s, seed::tags::SBS, 0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Question>,
    pub test: Vec<Question>,
    pub index: QuestionIndex,
}

impl Corpus {
    /// Generates `n_train + n_test` questions and splits them by id.
    pub fn generate(config: &ExperimentConfig) -> Result<Self> {
        let all = gen_dataset(config.data_seed, config.n_train + config.n_test, config.difficulty)?;
        Ok(Self::from_split(all[..config.n_train].to_vec(), all[config.n_train..].to_vec()))
    }

    pub fn from_split(train: Vec<Question>, test: Vec<Question>) -> Self {
        let mut all = train.clone();
        all.extend(test.iter().cloned());
        Corpus {
            index: QuestionIndex::new(&all),
            train,
            test,
        }
    }

    pub fn train_ids(&self) -> HashSet<u64> {
        self.train.iter().map(|q| q.id).collect()
    }
}

/// Search output for a question set and the training data derived from it.
#[derive(Clone, Debug)]
pub struct Annotation {
    pub forests: Vec<Forest>,
    pub pairs: Vec<PreferencePair>,
    pub value_targets: Vec<ValueTarget>,
    pub sft: Vec<Solution>,
}

/// Builds and labels one forest per question with `params` guiding search.
pub fn annotate(
    questions: &[Question],
    params: &PolicyValueParams,
    config: &ExperimentConfig,
    rng_seed: u64,
) -> Result<Vec<Forest>> {
    questions
        .iter()
        .map(|q| {
            let mut f = build_forest(q, params, &config.search, rng_seed)?;
            label_correct(&mut f);
            Ok(f)
        })
        .collect()
}

pub fn extract_training_data(forests: Vec<Forest>, config: &ExperimentConfig) -> Result<Annotation> {
    let seeds = StageSeeds::new(config.seed);
    let mut pairs = Vec::new();
    let mut value_targets = Vec::new();
    let mut sft = Vec::new();
    for f in &forests {
        pairs.extend(extract_pairs(f, config.counts, seeds.pairs)?);
        value_targets.extend(extract_value_targets(f));
        sft.extend(extract_sft_solutions(f, config.sft_per_question)?);
    }
    Ok(Annotation {
        forests,
        pairs,
        value_targets,
        sft,
    })
}

/// Terminal-kind pairs whose winner is a complete solution.
pub fn solution_level_pairs(pairs: &[PreferencePair], env: &Env, index: &QuestionIndex) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for p in pairs {
        if p.kind != PairKind::Terminal {
            continue;
        }
        let q = index.get(p.question_id)?;
        if env.replay(q, &p.winner).map_err(|e| Error::illegal_prefix(q.id, e))?.is_answered() {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn pretrain(
    init: &PolicyValueParams,
    bootstrap: &Annotation,
    corpus: &Corpus,
    config: &ExperimentConfig,
    train_config: &TrainConfig,
) -> Result<TrainRun> {
    train_loop(
        &config.env(),
        &corpus.index,
        init,
        TrainData::Pretrain {
            solutions: &bootstrap.sft,
            value_targets: &bootstrap.value_targets,
        },
        train_config,
        StageSeeds::new(config.seed).pretrain,
    )
    .map_err(|e| e.in_stage("pretrain"))
}

/// Everything the arms of one experiment seed share.
///
/// Search runs twice on the training questions: once under the initial
/// policy (`bootstrap`, supplying solutions and value targets for
/// pretraining) and once under the pretrained policy (`annotation`,
/// supplying the preference pairs).
pub struct Prepared {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
    pub init: PolicyValueParams,
    pub bootstrap: Annotation,
    pub annotation: Annotation,
    pub heldout_pairs: Vec<PreferencePair>,
    pretrained: BTreeMap<bool, TrainRun>,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let env = config.env();
        let seeds = StageSeeds::new(config.seed);
        let corpus = Corpus::generate(config).map_err(|e| e.in_stage("gen"))?;
        let init = PolicyValueParams::init(&env, config.hidden, config.init_scale, seeds.init);
        let forests = annotate(&corpus.train, &init, config, seeds.bootstrap).map_err(|e| e.in_stage("annotate"))?;
        let bootstrap = extract_training_data(forests, config).map_err(|e| e.in_stage("pairs"))?;
        let mut p = Prepared {
            config: config.clone(),
            corpus,
            init,
            bootstrap,
            annotation: Annotation {
                forests: Vec::new(),
                pairs: Vec::new(),
                value_targets: Vec::new(),
                sft: Vec::new(),
            },
            heldout_pairs: Vec::new(),
            pretrained: BTreeMap::new(),
        };
        let sft_params = p.pretrained(Ablation::FULL)?.last().ok_or(Error::MissingCheckpoint)?.params.clone();
        let forests =
            annotate(&p.corpus.train, &sft_params, config, seeds.annotate).map_err(|e| e.in_stage("annotate"))?;
        p.annotation = extract_training_data(forests, config).map_err(|e| e.in_stage("pairs"))?;
        p.heldout_pairs = build_heldout_pairs(
            &sft_params,
            &p.corpus.test,
            &p.corpus.train_ids(),
            &config.search,
            config.counts,
            seeds.heldout,
        )
        .map_err(|e| e.in_stage("eval"))?;
        Ok(p)
    }

    /// Pretraining run for an arm; only `no_mse` changes the pretrain objective.
    pub fn pretrained(&mut self, ablation: Ablation) -> Result<&TrainRun> {
        let key = ablation.no_mse;
        if !self.pretrained.contains_key(&key) {
            let cfg = Ablation {
                no_mse: key,
                ..Ablation::FULL
            }
            .apply(&self.config.pretrain);
            let run = pretrain(&self.init, &self.bootstrap, &self.corpus, &self.config, &cfg)?;
            self.pretrained.insert(key, run);
        }
        Ok(&self.pretrained[&key])
    }

    pub fn pretrain_checkpoint(&mut self, ablation: Ablation) -> Result<Checkpoint> {
        self.pretrained(ablation)?.last().cloned().ok_or(Error::MissingCheckpoint)
    }

    pub fn arm_pairs(&self, ablation: Ablation) -> Result<Vec<PreferencePair>> {
        if ablation.solution_level_only {
            solution_level_pairs(&self.annotation.pairs, &self.config.env(), &self.corpus.index)
        } else {
            Ok(self.annotation.pairs.clone())
        }
    }

    /// Trains one preference arm from the matching pretrain checkpoint.
    pub fn train_arm(&mut self, arm: &ArmSpec) -> Result<TrainRun> {
        let init = self.pretrain_checkpoint(arm.ablation)?;
        let pairs = self.arm_pairs(arm.ablation)?;
        train_loop(
            &self.config.env(),
            &self.corpus.index,
            &init.params,
            TrainData::Svpo {
                pairs: &pairs,
                init: Some(&init),
            },
            &arm.train_config(),
            StageSeeds::new(self.config.seed).svpo,
        )
        .map_err(|e| e.in_stage("svpo"))
    }

    pub fn evaluate(&self, params: &PolicyValueParams, ref_params: &PolicyValueParams, beta: f64) -> Result<ArmEval> {
        evaluate(
            &self.config,
            &self.corpus,
            &self.annotation.pairs,
            &self.heldout_pairs,
            params,
            ref_params,
            beta,
        )
    }

    /// The supervised baseline: the pretrain checkpoint decoded as is.
    pub fn run_sft(&mut self) -> Result<ArmOutcome> {
        let ckpt = self.pretrain_checkpoint(Ablation::FULL)?;
        let eval = self.evaluate(&ckpt.params, &ckpt.params, self.config.svpo.beta)?;
        Ok(ArmOutcome {
            name: "sft".into(),
            checkpoint: ckpt,
            eval,
            log: Vec::new(),
            n_pairs: 0,
        })
    }

    pub fn run_arm(&mut self, arm: &ArmSpec) -> Result<ArmOutcome> {
        let run = self.train_arm(arm)?;
        let ckpt = run.last().cloned().ok_or(Error::MissingCheckpoint)?;
        let ref_params = ckpt.ref_params.clone().ok_or(Error::MissingCheckpoint)?;
        let eval = self
            .evaluate(&ckpt.params, &ref_params, arm.svpo.beta)
            .map_err(|e| e.in_stage("eval"))?;
        Ok(ArmOutcome {
            name: arm.name.clone(),
            checkpoint: ckpt,
            eval,
            n_pairs: self.arm_pairs(arm.ablation)?.len(),
            log: run.log,
        })
    }

    pub fn summary_stats(&self) -> AnnotationStats {
        let (n_positive, n_negative) = example_counts(&self.annotation.pairs);
        let solved = self
            .annotation
            .forests
            .iter()
            .filter(|f| !f.distinct_correct().is_empty())
            .count();
        AnnotationStats {
            n_questions: self.annotation.forests.len(),
            n_solved: solved,
            n_trees: self.annotation.forests.iter().map(|f| f.trees.len()).sum(),
            n_nodes: self.annotation.forests.iter().map(|f| f.n_nodes()).sum(),
            n_pairs: self.annotation.pairs.len(),
            n_positive,
            n_negative,
            n_bootstrap_solved: self
                .bootstrap
                .forests
                .iter()
                .filter(|f| !f.distinct_correct().is_empty())
                .count(),
            n_value_targets: self.bootstrap.value_targets.len(),
            n_sft: self.bootstrap.sft.len(),
            n_heldout_pairs: self.heldout_pairs.len(),
        }
    }
}

/// One preference-training arm: ablation flags over a base config.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmSpec {
    pub name: String,
    pub ablation: Ablation,
    pub svpo: TrainConfig,
}

impl ArmSpec {
    pub fn new(ablation: Ablation, svpo: &TrainConfig) -> Self {
        ArmSpec {
            name: ablation.name(),
            ablation,
            svpo: svpo.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        self.ablation.apply(&self.svpo)
    }

    /// Arms of the loss ablation study.
    pub fn ablation_set(svpo: &TrainConfig) -> Vec<ArmSpec> {
        let flags = [
            Ablation::FULL,
            Ablation {
                no_margin: true,
                ..Ablation::FULL
            },
            Ablation {
                no_mse: true,
                ..Ablation::FULL
            },
            Ablation {
                no_reg: true,
                ..Ablation::FULL
            },
            Ablation {
                solution_level_only: true,
                ..Ablation::FULL
            },
        ];
        flags.iter().map(|a| ArmSpec::new(*a, svpo)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub greedy: f64,
    pub sbs_b1: f64,
    pub sbs_b3: f64,
    /// SBS with the configured beam settings.
    pub sbs: f64,
}

impl Accuracy {
    fn rounded(&self) -> Self {
        Accuracy {
            greedy: round4(self.greedy),
            sbs_b1: round4(self.sbs_b1),
            sbs_b3: round4(self.sbs_b3),
            sbs: round4(self.sbs),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ArmEval {
    pub accuracy: Accuracy,
    pub win_train: Option<WinRateReport>,
    pub win_heldout: Option<WinRateReport>,
    pub greedy_records: Vec<InferenceRecord>,
    pub sbs_records: Vec<InferenceRecord>,
}

#[derive(Clone, Debug)]
pub struct ArmOutcome {
    pub name: String,
    pub checkpoint: Checkpoint,
    pub eval: ArmEval,
    pub log: Vec<StepLog>,
    pub n_pairs: usize,
}

impl ArmOutcome {
    pub fn report(&self) -> ArmReport {
        let rw = |w: &Option<WinRateReport>| {
            w.map(|w| WinRateReport {
                implicit_acc: round4(w.implicit_acc),
                explicit_acc: round4(w.explicit_acc),
                ..w
            })
        };
        ArmReport {
            name: self.name.clone(),
            n_pairs: self.n_pairs,
            accuracy: self.eval.accuracy.rounded(),
            win_train: rw(&self.eval.win_train),
            win_heldout: rw(&self.eval.win_heldout),
            max_abs_implicit: round4(self.log.iter().map(|l| l.max_abs_implicit).fold(0.0, f64::max)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub n_pairs: usize,
    pub accuracy: Accuracy,
    pub win_train: Option<WinRateReport>,
    pub win_heldout: Option<WinRateReport>,
    /// Largest |implicit reward difference| seen in any training batch.
    pub max_abs_implicit: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub n_questions: usize,
    pub n_solved: usize,
    pub n_trees: usize,
    pub n_nodes: usize,
    pub n_pairs: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_bootstrap_solved: usize,
    pub n_value_targets: usize,
    pub n_sft: usize,
    pub n_heldout_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub seed: u64,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub annotation: AnnotationStats,
    pub arms: Vec<ArmReport>,
    pub artifacts: Vec<String>,
}

/// Output of [`run_pipeline`].
pub struct ReportBundle {
    pub summary: Summary,
    pub sft: ArmOutcome,
    pub svpo: ArmOutcome,
}

pub fn write_log_csv(path: &Path, rows: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Decodes the test split in every mode and scores both preference models
/// on the training and held-out pairs. Empty pair sets give no win rate.
pub fn evaluate(
    config: &ExperimentConfig,
    corpus: &Corpus,
    train_pairs: &[PreferencePair],
    heldout_pairs: &[PreferencePair],
    params: &PolicyValueParams,
    ref_params: &PolicyValueParams,
    beta: f64,
) -> Result<ArmEval> {
    let sbs = &config.sbs;
    let seed = StageSeeds::new(config.seed).sbs;
    let test = &corpus.test;
    let (greedy, greedy_dec) = accuracy_with(params, test, Mode::Greedy, sbs, seed)?;
    let sbs1 = SBSConfig { b1: 1, ..*sbs };
    let sbs3 = SBSConfig { b1: 3, ..*sbs };
    let (sbs_b1, _) = accuracy_with(params, test, Mode::Sbs, &sbs1, seed)?;
    let (sbs_b3, _) = accuracy_with(params, test, Mode::Sbs, &sbs3, seed)?;
    let (sbs_cfg, sbs_dec) = accuracy_with(params, test, Mode::Sbs, sbs, seed)?;
    let env = config.env();
    let rate = |pairs: &[PreferencePair], split| {
        if pairs.is_empty() {
            Ok(None)
        } else {
            win_rate(params, ref_params, &env, &corpus.index, pairs, beta, split).map(Some)
        }
    };
    let records = |mode, dec: &[crate::infer::Decoded]| {
        test.iter()
            .zip(dec)
            .map(|(q, d)| InferenceRecord::new(q, mode, sbs, d))
            .collect::<Vec<_>>()
    };
    Ok(ArmEval {
        accuracy: Accuracy {
            greedy,
            sbs_b1,
            sbs_b3,
            sbs: sbs_cfg,
        },
        win_train: rate(train_pairs, Split::Train)?,
        win_heldout: rate(heldout_pairs, Split::Heldout)?,
        greedy_records: records(Mode::Greedy, &greedy_dec),
        sbs_records: records(Mode::Sbs, &sbs_dec),
    })
}

/// Runs every stage for one seed and, when `out` is given, writes all
/// artifacts and `summary.json` there.
pub fn run_pipeline(config: &ExperimentConfig, out: Option<&Path>) -> Result<ReportBundle> {
    let mut prep = Prepared::new(config)?;
    let sft = prep.run_sft()?;
    let svpo = prep.run_arm(&ArmSpec::new(config.ablation, &config.svpo))?;
    let pretrain_log = prep.pretrained(config.ablation)?.log.clone();

    let mut artifacts = Vec::new();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut put = |name: &str| -> std::path::PathBuf {
            artifacts.push(name.to_string());
            dir.join(name)
        };
        std::fs::write(put(files::CONFIG), config.to_flat())?;
        write_jsonl(&put(files::TRAIN), &prep.corpus.train)?;
        write_jsonl(&put(files::TEST), &prep.corpus.test)?;
        prep.init.save_json(&put(files::INIT))?;
        write_forests(&put(files::BOOTSTRAP_FORESTS), &prep.bootstrap.forests)?;
        write_jsonl(&put(files::VALUE_TARGETS), &prep.bootstrap.value_targets)?;
        write_jsonl(&put(files::SFT), &prep.bootstrap.sft)?;
        write_forests(&put(files::FORESTS), &prep.annotation.forests)?;
        write_jsonl(&put(files::PAIRS), &prep.annotation.pairs)?;
        write_jsonl(&put(files::HELDOUT_PAIRS), &prep.heldout_pairs)?;
        prep.pretrain_checkpoint(config.ablation)?.save_json(&put(files::PRETRAIN_CKPT))?;
        svpo.checkpoint.save_json(&put(files::SVPO_CKPT))?;
        write_log_csv(&put(files::PRETRAIN_LOG), &pretrain_log)?;
        write_log_csv(&put(files::SVPO_LOG), &svpo.log)?;
        write_jsonl(&put(files::INFER_GREEDY), &svpo.eval.greedy_records)?;
        write_jsonl(&put(files::INFER_SBS), &svpo.eval.sbs_records)?;
        artifacts.push(files::SUMMARY.to_string());
    }
    let summary = Summary {
        version: SUMMARY_VERSION,
        seed: config.seed,
        data_seed: config.data_seed,
        n_train: prep.corpus.train.len(),
        n_test: prep.corpus.test.len(),
        annotation: prep.summary_stats(),
        arms: vec![sft.report(), svpo.report()],
        artifacts,
    };
    if let Some(dir) = out {
        write_json(&dir.join(files::SUMMARY), &summary)?;
    }
    Ok(ReportBundle { summary, sft, svpo })
}

pub fn write_forests(path: &Path, forests: &[Forest]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for f in forests {
        w.write_all(f.to_json()?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_forests(path: &Path, env: &Env, index: &QuestionIndex) -> Result<Vec<Forest>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let id = serde_json::from_str::<serde_json::Value>(line)?["question_id"]
                .as_u64()
                .ok_or_else(|| Error::Shape("forest without question_id".into()))?;
            Forest::from_json(line, env, index.get(id)?)
        })
        .collect()
}

/// Per-arm mean and standard deviation of a metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        MeanStd {
            mean: round4(mean),
            std: round4(std),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmAggregate {
    pub name: String,
    pub greedy: MeanStd,
    pub sbs_b1: MeanStd,
    pub sbs_b3: MeanStd,
    pub explicit_train: Option<MeanStd>,
    pub explicit_heldout: Option<MeanStd>,
    pub implicit_train: Option<MeanStd>,
    pub implicit_heldout: Option<MeanStd>,
}

impl ArmAggregate {
    pub fn of(name: &str, reports: &[&ArmReport]) -> Self {
        let col = |f: &dyn Fn(&ArmReport) -> f64| MeanStd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
        let win = |f: &dyn Fn(&ArmReport) -> Option<f64>| {
            let xs: Option<Vec<f64>> = reports.iter().map(|r| f(r)).collect();
            xs.map(|xs| MeanStd::of(&xs))
        };
        ArmAggregate {
            name: name.to_string(),
            greedy: col(&|r| r.accuracy.greedy),
            sbs_b1: col(&|r| r.accuracy.sbs_b1),
            sbs_b3: col(&|r| r.accuracy.sbs_b3),
            explicit_train: win(&|r| r.win_train.map(|w| w.explicit_acc)),
            explicit_heldout: win(&|r| r.win_heldout.map(|w| w.explicit_acc)),
            implicit_train: win(&|r| r.win_train.map(|w| w.implicit_acc)),
            implicit_heldout: win(&|r| r.win_heldout.map(|w| w.implicit_acc)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub annotation: AnnotationStats,
    pub arms: Vec<ArmReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub version: u32,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    pub aggregate: Vec<ArmAggregate>,
}

impl MultiSeedReport {
    pub fn arm(&self, name: &str) -> Option<&ArmAggregate> {
        self.aggregate.iter().find(|a| a.name == name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["seed", "arm", "greedy", "sbs_b1", "sbs_b3", "explicit_train", "explicit_heldout", "implicit_train", "implicit_heldout"])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for run in &self.runs {
            for a in &run.arms {
                w.write_record([
                    run.seed.to_string(),
                    a.name.clone(),
                    a.accuracy.greedy.to_string(),
                    a.accuracy.sbs_b1.to_string(),
                    a.accuracy.sbs_b3.to_string(),
                    opt(a.win_train.map(|w| w.explicit_acc)),
                    opt(a.win_heldout.map(|w| w.explicit_acc)),
                    opt(a.win_train.map(|w| w.implicit_acc)),
                    opt(a.win_heldout.map(|w| w.implicit_acc)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `arms` (plus the supervised baseline) for each seed, sharing the
/// per-seed preparation.
pub fn run_arms(config: &ExperimentConfig, seeds: &[u64], arms: &[ArmSpec]) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut runs = Vec::new();
    for &s in seeds {
        let cfg = ExperimentConfig {
            seed: s,
            ..config.clone()
        };
        let mut prep = Prepared::new(&cfg)?;
        let mut reports = vec![prep.run_sft()?.report()];
        for arm in arms {
            reports.push(prep.run_arm(arm)?.report());
        }
        runs.push(SeedRun {
            seed: s,
            annotation: prep.summary_stats(),
            arms: reports,
        });
    }
    let names: Vec<String> = runs[0].arms.iter().map(|a| a.name.clone()).collect();
    let aggregate = names
        .iter()
        .map(|n| {
            let rs: Vec<&ArmReport> = runs.iter().flat_map(|r| r.arms.iter().filter(|a| &a.name == n)).collect();
            ArmAggregate::of(n, &rs)
        })
        .collect();
    Ok(MultiSeedReport {
        version: SUMMARY_VERSION,
        seeds: seeds.to_vec(),
        runs,
        aggregate,
    })
}

pub fn seed_range(start: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| start + i).collect()
}

pub fn ablate(config: &ExperimentConfig, seeds: &[u64]) -> Result<MultiSeedReport> {
    run_arms(config, seeds, &ArmSpec::ablation_set(&config.svpo))
}

/// Sweeps one preference-stage key (for example `svpo.gamma`) over values.
/// Arms are named `key=value`.
pub fn sweep(config: &ExperimentConfig, key: &str, values: &[String], seeds: &[u64]) -> Result<MultiSeedReport> {
    if !key.starts_with("svpo.") {
        return Err(Error::Config(format!("sweep key must be an svpo.* key, got {key:?}")));
    }
    let mut arms = Vec::new();
    for v in values {
        let mut c = config.clone();
        c.set(key, v)?;
        c.validate()?;
        arms.push(ArmSpec {
            name: format!("{key}={v}"),
            ablation: config.ablation,
            svpo: c.svpo,
        });
    }
    run_arms(config, seeds, &arms)
}
