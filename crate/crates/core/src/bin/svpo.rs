use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use svpo::config::ExperimentConfig;
use svpo::env::{Question, Solution};
use svpo::eval::{build_heldout_pairs, WinRateReport};
use svpo::infer::{decode, InferenceRecord, Mode};
use svpo::io::{read_jsonl, write_json, write_jsonl};
use svpo::pairs::{PreferencePair, ValueTarget};
use svpo::pipeline::{
    ablate, annotate, evaluate, extract_training_data, files, read_forests, run_pipeline, seed_range,
    solution_level_pairs, sweep, write_forests, write_log_csv, Accuracy, ArmSpec, Corpus, MultiSeedReport,
    StageSeeds,
};
use svpo::policyval::PolicyValueParams;
use svpo::train::{train_loop, Checkpoint, TrainData};
use svpo::{Error, Result};

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config override, repeatable: `--set svpo.gamma=0.25`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Round {
    /// Search under the initial parameters; feeds pretraining.
    Bootstrap,
    /// Search under the pretrained policy; feeds preference training.
    Policy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and test question sets.
    Gen,
    /// Build and label one search forest per training question.
    Annotate {
        #[arg(long, value_enum, default_value = "bootstrap")]
        round: Round,
        /// Guide parameters for the policy round (defaults to the pretrain checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Extract pairs, value targets and solutions from the forests on disk.
    Pairs,
    /// Supervised pretraining on solutions and value targets.
    Pretrain,
    /// Preference training from the pretrain checkpoint.
    Svpo,
    /// Decode the test questions.
    Infer {
        #[arg(long, value_enum, default_value = "greedy")]
        mode: ModeArg,
        /// Defaults to the svpo checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy and win rates of a checkpoint.
    Eval {
        /// Defaults to the svpo checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Loss ablations averaged over seeds.
    Ablate {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Sweep one `svpo.*` key over values, averaged over seeds.
    Sweep {
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Every stage end to end.
    Pipeline,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Greedy,
    Sbs,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Greedy => Mode::Greedy,
            ModeArg::Sbs => Mode::Sbs,
        }
    }
}

/// Step-level value preference optimization on synthetic arithmetic tasks.
#[derive(Parser, Debug)]
#[command(name = "svpo", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli.common).and_then(|config| run(&cli.command, &config, &cli.common.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run(command: &Command, config: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let stage = |name: &'static str| move |e: Error| e.in_stage(name);
    match command {
        Command::Gen => {
            let corpus = Corpus::generate(config).map_err(stage("gen"))?;
            std::fs::write(out.join(files::CONFIG), config.to_flat())?;
            write_jsonl(&out.join(files::TRAIN), &corpus.train)?;
            write_jsonl(&out.join(files::TEST), &corpus.test)?;
            println!("{} train, {} test questions", corpus.train.len(), corpus.test.len());
        }
        Command::Annotate { round, checkpoint } => {
            let corpus = load_corpus(out)?;
            let seeds = StageSeeds::new(config.seed);
            let (params, name, rng) = match round {
                Round::Bootstrap => {
                    let init = PolicyValueParams::init(&config.env(), config.hidden, config.init_scale, seeds.init);
                    init.save_json(&out.join(files::INIT))?;
                    (init, files::BOOTSTRAP_FORESTS, seeds.bootstrap)
                }
                Round::Policy => {
                    let path = checkpoint.clone().unwrap_or_else(|| out.join(files::PRETRAIN_CKPT));
                    (Checkpoint::load_json(&path)?.params, files::FORESTS, seeds.annotate)
                }
            };
            let forests = annotate(&corpus.train, &params, config, rng).map_err(stage("annotate"))?;
            let solved = forests.iter().filter(|f| !f.distinct_correct().is_empty()).count();
            write_forests(&out.join(name), &forests)?;
            println!("{name}: {} forests, {solved} solved", forests.len());
        }
        Command::Pairs => {
            let corpus = load_corpus(out)?;
            let env = config.env();
            let mut found = false;
            let boot = out.join(files::BOOTSTRAP_FORESTS);
            if boot.exists() {
                found = true;
                let forests = read_forests(&boot, &env, &corpus.index)?;
                let a = extract_training_data(forests, config).map_err(stage("pairs"))?;
                write_jsonl(&out.join(files::VALUE_TARGETS), &a.value_targets)?;
                write_jsonl(&out.join(files::SFT), &a.sft)?;
                println!("{} value targets, {} solutions", a.value_targets.len(), a.sft.len());
            }
            let policy = out.join(files::FORESTS);
            if policy.exists() {
                found = true;
                let forests = read_forests(&policy, &env, &corpus.index)?;
                let a = extract_training_data(forests, config).map_err(stage("pairs"))?;
                write_jsonl(&out.join(files::PAIRS), &a.pairs)?;
                println!("{} pairs", a.pairs.len());
            }
            let ckpt = out.join(files::PRETRAIN_CKPT);
            if ckpt.exists() {
                let params = Checkpoint::load_json(&ckpt)?.params;
                let seeds = StageSeeds::new(config.seed);
                let heldout = build_heldout_pairs(
                    &params,
                    &corpus.test,
                    &corpus.train_ids(),
                    &config.search,
                    config.counts,
                    seeds.heldout,
                )
                .map_err(stage("pairs"))?;
                write_jsonl(&out.join(files::HELDOUT_PAIRS), &heldout)?;
                println!("{} held-out pairs", heldout.len());
            }
            if !found {
                return Err(Error::read(&boot, std::io::ErrorKind::NotFound.into()).in_stage("pairs"));
            }
        }
        Command::Pretrain => {
            let corpus = load_corpus(out)?;
            let init: PolicyValueParams = PolicyValueParams::load_json(&out.join(files::INIT))?;
            let solutions: Vec<Solution> = read_jsonl(&out.join(files::SFT))?;
            let value_targets: Vec<ValueTarget> = read_jsonl(&out.join(files::VALUE_TARGETS))?;
            let run = train_loop(
                &config.env(),
                &corpus.index,
                &init,
                TrainData::Pretrain {
                    solutions: &solutions,
                    value_targets: &value_targets,
                },
                &config.pretrain_effective(),
                StageSeeds::new(config.seed).pretrain,
            )
            .map_err(stage("pretrain"))?;
            let last = run.last().ok_or(Error::MissingCheckpoint)?;
            last.save_json(&out.join(files::PRETRAIN_CKPT))?;
            write_log_csv(&out.join(files::PRETRAIN_LOG), &run.log)?;
            print_last_step(&run.log);
        }
        Command::Svpo => {
            let corpus = load_corpus(out)?;
            let init = Checkpoint::load_json(&out.join(files::PRETRAIN_CKPT))?;
            let mut pairs: Vec<PreferencePair> = read_jsonl(&out.join(files::PAIRS))?;
            if config.ablation.solution_level_only {
                pairs = solution_level_pairs(&pairs, &config.env(), &corpus.index)?;
            }
            let arm = ArmSpec::new(config.ablation, &config.svpo);
            let run = train_loop(
                &config.env(),
                &corpus.index,
                &init.params,
                TrainData::Svpo {
                    pairs: &pairs,
                    init: Some(&init),
                },
                &arm.train_config(),
                StageSeeds::new(config.seed).svpo,
            )
            .map_err(stage("svpo"))?;
            let last = run.last().ok_or(Error::MissingCheckpoint)?;
            last.save_json(&out.join(files::SVPO_CKPT))?;
            write_log_csv(&out.join(files::SVPO_LOG), &run.log)?;
            print_last_step(&run.log);
        }
        Command::Infer { mode, checkpoint } => {
            let test: Vec<Question> = read_jsonl(&out.join(files::TEST))?;
            let ckpt = load_checkpoint(out, checkpoint.as_deref())?;
            let mode = Mode::from(*mode);
            let seed = StageSeeds::new(config.seed).sbs;
            let mut records = Vec::with_capacity(test.len());
            for q in &test {
                let d = decode(&ckpt.params, q, mode, &config.sbs, seed).map_err(stage("infer"))?;
                records.push(InferenceRecord::new(q, mode, &config.sbs, &d));
            }
            let name = match mode {
                Mode::Greedy => files::INFER_GREEDY,
                Mode::Sbs => files::INFER_SBS,
            };
            write_jsonl(&out.join(name), &records)?;
            let correct = records.iter().filter(|r| r.correct).count();
            println!("{mode}: {correct}/{} correct", records.len());
        }
        Command::Eval { checkpoint } => {
            let corpus = load_corpus(out)?;
            let ckpt = load_checkpoint(out, checkpoint.as_deref())?;
            let ref_params = ckpt.ref_params.clone().unwrap_or_else(|| ckpt.params.clone());
            let train_pairs: Vec<PreferencePair> = read_optional(&out.join(files::PAIRS))?;
            let heldout: Vec<PreferencePair> = read_optional(&out.join(files::HELDOUT_PAIRS))?;
            let ev = evaluate(
                config,
                &corpus,
                &train_pairs,
                &heldout,
                &ckpt.params,
                &ref_params,
                config.svpo.beta,
            )
            .map_err(stage("eval"))?;
            let report = EvalReport {
                accuracy: ev.accuracy,
                win_train: ev.win_train,
                win_heldout: ev.win_heldout,
            };
            write_json(&out.join(files::EVAL), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { seeds } => {
            let report = ablate(config, &seed_range(config.seed, *seeds))?;
            write_multi(out, files::ABLATE, files::ABLATE_CSV, &report)?;
        }
        Command::Sweep { key, values, seeds } => {
            let report = sweep(config, key, values, &seed_range(config.seed, *seeds))?;
            write_multi(out, files::SWEEP, files::SWEEP_CSV, &report)?;
        }
        Command::Pipeline => {
            let bundle = run_pipeline(config, Some(out))?;
            for arm in &bundle.summary.arms {
                print_accuracy(&arm.name, &arm.accuracy);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    accuracy: Accuracy,
    win_train: Option<WinRateReport>,
    win_heldout: Option<WinRateReport>,
}

fn load_corpus(out: &Path) -> Result<Corpus> {
    let train: Vec<Question> = read_jsonl(&out.join(files::TRAIN))?;
    let test: Vec<Question> = read_jsonl(&out.join(files::TEST))?;
    Ok(Corpus::from_split(train, test))
}

fn load_checkpoint(out: &Path, explicit: Option<&Path>) -> Result<Checkpoint> {
    match explicit {
        Some(p) => Checkpoint::load_json(p),
        None => Checkpoint::load_json(&out.join(files::SVPO_CKPT)),
    }
}

fn read_optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if path.exists() {
        read_jsonl(path)
    } else {
        Ok(Vec::new())
    }
}

fn write_multi(out: &Path, json: &str, csv: &str, report: &MultiSeedReport) -> Result<()> {
    write_json(&out.join(json), report)?;
    report.write_csv(&out.join(csv))?;
    for a in &report.aggregate {
        println!(
            "{:<24} greedy {:.4}±{:.4}  sbs_b1 {:.4}±{:.4}  sbs_b3 {:.4}±{:.4}",
            a.name, a.greedy.mean, a.greedy.std, a.sbs_b1.mean, a.sbs_b1.std, a.sbs_b3.mean, a.sbs_b3.std
        );
    }
    Ok(())
}

fn print_last_step(log: &[svpo::train::StepLog]) {
    if let Some(l) = log.last() {
        println!("step {} total {:.6} grad_norm {:.6}", l.step, l.total, l.grad_norm);
    }
}

fn print_accuracy(name: &str, a: &Accuracy) {
    println!(
        "{name:<8} greedy {:.4}  sbs_b1 {:.4}  sbs_b3 {:.4}  sbs {:.4}",
        a.greedy, a.sbs_b1, a.sbs_b3, a.sbs
    );
}
