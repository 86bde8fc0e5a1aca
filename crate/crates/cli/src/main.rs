use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mcqa_core::bench::{estimate_cost, pilot_append_experiment, run_benchmark, BenchConfig};
use mcqa_core::checkpoint::{load_checkpoint, save_checkpoint};
use mcqa_core::config::{load_config, RunConfig};
use mcqa_core::data::{
    generate_synthetic, load_dataset, synthetic_splits, synthetic_vocab, write_dataset, Vocab,
};
use mcqa_core::gradcheck::{grad_check, GradCheckConfig};
use mcqa_core::model::{accuracy, ModelBundle, ModelOptions, Scheme};
use mcqa_core::pooling::PoolingKind;
use mcqa_core::train::train;
use mcqa_core::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "mcqa", version, about = "Train, evaluate and benchmark multiple-choice QA encoding schemes")]
struct Cli {
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Encoding scheme: 1anp, nanp or na1p.
    #[arg(long, default_value = "1anp")]
    scheme: Scheme,
    /// Pooling operator: cls, max, mean, attentive or layerwise-cls.
    #[arg(long, default_value = "max")]
    pooling: PoolingKind,
    /// Gated answer interaction; single-pass scheme only.
    #[arg(long, value_enum, default_value = "off")]
    gate: Switch,
    /// Feed the question vector alongside each answer vector to the scorer.
    #[arg(long, value_enum, default_value = "on")]
    qa_concat: Switch,
}

impl ModelArgs {
    fn options(&self, run: &RunConfig) -> ModelOptions {
        ModelOptions {
            scheme: self.scheme,
            pooling: self.pooling,
            gate: self.gate.on(),
            gate_heads: run.gate_heads,
            concat_question: self.qa_concat.on(),
            ..ModelOptions::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic key/lock train, dev and test splits as JSONL.
    Synth {
        /// Directory receiving train.jsonl, dev.jsonl and test.jsonl.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        dev: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 5)]
        answers: usize,
        #[arg(long, default_value_t = 6)]
        question_len: usize,
        #[arg(long, default_value_t = 2)]
        answer_len: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Evaluated once with the best dev model.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed for initialization and shuffling.
        #[arg(long)]
        seed: Option<u64>,
        /// Where the trained checkpoint is written.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Report accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare throughput and maximum batch size across schemes.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 48)]
        question_len: usize,
        #[arg(long, default_value_t = 8)]
        answer_len: usize,
        #[arg(long, default_value_t = 5)]
        answers: usize,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Accuracy of a multi-pass checkpoint as distractors are appended to each pass.
    Pilot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        k_max: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Finite-difference gradient check in double precision.
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Analytic token and attention cost of each scheme.
    Cost {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        question_len: usize,
        /// Comma-separated candidate lengths.
        #[arg(long, value_delimiter = ',', required = true)]
        answer_lens: Vec<usize>,
    },
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), load_config)
}

fn to_value(value: &impl serde::Serialize) -> Result<Value> {
    serde_json::to_value(value).map_err(|e| Error::Config(e.to_string()))
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Pilot { .. } => "pilot",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Cost { .. } => "cost",
        }
    }
}

fn environment() -> Value {
    json!({
        "version": env!("CARGO_PKG_VERSION"),
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "available_parallelism": std::thread::available_parallelism().map_or(1, |n| n.get()),
    })
}

fn run(command: Command) -> Result<Value> {
    match command {
        Command::Synth {
            dir,
            train,
            dev,
            test,
            answers,
            question_len,
            answer_len,
            seed,
        } => {
            let splits = synthetic_splits([train, dev, test], answers, question_len, answer_len, seed)?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let vocab = synthetic_vocab();
            for (name, set) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
                write_dataset(dir.join(format!("{name}.jsonl")), set, &vocab)?;
            }
            Ok(json!({
                "config": {
                    "dir": dir, "train": train, "dev": dev, "test": test, "answers": answers,
                    "question_len": question_len, "answer_len": answer_len, "seed": seed,
                },
            }))
        }
        Command::Train {
            model,
            data,
            dev,
            test,
            config,
            seed,
            checkpoint,
        } => {
            let mut run = run_config(config.as_deref())?;
            if let Some(s) = seed {
                run.train.seed = s;
            }
            let (train_set, vocab) = load_dataset(&data, None)?;
            let dev_set = match &dev {
                Some(p) => load_dataset(p, Some(&vocab))?.0,
                None => Vec::new(),
            };
            let test_set = match &test {
                Some(p) => Some(load_dataset(p, Some(&vocab))?.0),
                None => None,
            };
            let options = model.options(&run);
            let bundle = ModelBundle::<f32>::init(run.encoder, vocab.len(), options, run.train.seed)?;
            let num_params = bundle.num_params();
            let outcome = train(bundle, &train_set, &dev_set, &run.train)?;
            let test_accuracy = test_set.as_deref().map(|t| accuracy(&outcome.model, t)).transpose()?;
            save_checkpoint(&checkpoint, &outcome.model, Some(&vocab))?;
            Ok(json!({
                "config": to_value(&run)?,
                "options": to_value(&options)?,
                "checkpoint": checkpoint,
                "metrics": {
                    "num_params": num_params,
                    "best_epoch": outcome.best_epoch,
                    "best_dev_accuracy": outcome.best_dev_accuracy,
                    "test_accuracy": test_accuracy,
                    "history": to_value(&outcome.history)?,
                },
            }))
        }
        Command::Eval { checkpoint, data } => {
            let (bundle, vocab) = load_checkpoint(&checkpoint)?;
            let vocab = require_vocab(vocab)?;
            let (set, _) = load_dataset(&data, Some(&vocab))?;
            Ok(json!({
                "config": to_value(bundle.config())?,
                "options": to_value(&bundle.options)?,
                "metrics": { "instances": set.len(), "accuracy": accuracy(&bundle, &set)? },
            }))
        }
        Command::Bench {
            config,
            question_len,
            answer_len,
            answers,
            instances,
            repetitions,
            workers,
            seed,
        } => {
            let run = run_config(config.as_deref())?;
            let vocab = synthetic_vocab().len();
            let inst = generate_synthetic(1, answers, question_len, answer_len, seed)?.remove(0);
            let models = Scheme::ALL
                .iter()
                .map(|&scheme| {
                    let opts = ModelOptions {
                        scheme,
                        gate: scheme == Scheme::SinglePass,
                        gate_heads: run.gate_heads,
                        ..ModelOptions::default()
                    };
                    ModelBundle::<f32>::init(run.encoder, vocab, opts, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let bench = BenchConfig {
                instances,
                memory_budget_bytes: run.memory_budget_bytes,
                repetitions,
                workers,
            };
            let reports = run_benchmark(&models.iter().collect::<Vec<_>>(), &inst, &bench)?;
            Ok(json!({
                "config": to_value(&run)?,
                "bench": to_value(&bench)?,
                "workload": { "question_len": question_len, "answer_len": answer_len, "answers": answers },
                "metrics": to_value(&reports)?,
            }))
        }
        Command::Pilot {
            checkpoint,
            data,
            k_max,
            seed,
        } => {
            let (bundle, vocab) = load_checkpoint(&checkpoint)?;
            let vocab = require_vocab(vocab)?;
            let (set, _) = load_dataset(&data, Some(&vocab))?;
            Ok(json!({
                "config": to_value(bundle.config())?,
                "options": to_value(&bundle.options)?,
                "k_max": k_max,
                "seed": seed,
                "metrics": to_value(&pilot_append_experiment(&bundle, &set, k_max, seed)?)?,
            }))
        }
        Command::Gradcheck {
            model,
            config,
            seed,
            samples,
        } => {
            let mut run = run_config(config.as_deref())?;
            run.encoder.dropout = 0.0;
            let vocab = synthetic_vocab().len();
            let options = model.options(&run);
            let bundle = ModelBundle::<f64>::init(run.encoder, vocab, options, seed)?;
            let inst = generate_synthetic(1, 5, 6, 2, seed)?.remove(0);
            let cfg = GradCheckConfig {
                samples,
                seed,
                ..GradCheckConfig::default()
            };
            Ok(json!({
                "config": to_value(&run)?,
                "options": to_value(&options)?,
                "gradcheck": to_value(&cfg)?,
                "metrics": to_value(&grad_check(&bundle, &inst, &cfg)?)?,
            }))
        }
        Command::Cost {
            config,
            question_len,
            answer_lens,
        } => {
            let run = run_config(config.as_deref())?;
            let costs = Scheme::ALL
                .iter()
                .map(|&s| estimate_cost(question_len, &answer_lens, s, &run.encoder))
                .collect::<Result<Vec<_>>>()?;
            Ok(json!({
                "config": to_value(&run.encoder)?,
                "workload": { "question_len": question_len, "answer_lens": answer_lens },
                "metrics": to_value(&costs)?,
            }))
        }
    }
}

fn require_vocab(vocab: Option<Vocab>) -> Result<Vocab> {
    vocab.ok_or_else(|| Error::Config("checkpoint carries no vocabulary".into()))
}

fn emit(cli: Cli) -> Result<()> {
    let command = cli.command.name();
    let mut report = run(cli.command)?;
    if let Value::Object(map) = &mut report {
        map.insert("command".into(), command.into());
        map.insert("environment".into(), environment());
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))? + "\n";
    match cli.out {
        Some(path) => std::fs::write(&path, text).map_err(|e| Error::io(&path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match emit(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
