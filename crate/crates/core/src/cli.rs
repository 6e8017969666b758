//! Command-line surface: configuration resolution and the subcommands.
//!
//! Configuration is the desk preset, overlaid by an optional JSON file,
//! overlaid by `--set key=value` pairs with dotted keys (`model.k=8`).
//! Unknown keys are rejected at every level.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::data::{build_dataset, load_vocab, read_image, Batcher, Split};
use crate::embeddings::{patchify, tokenize, Modality};
use crate::error::{Error, Result};
use crate::evaluation::{
    finetune_classifier, heldout_metrics, itc_embed_images, itc_embed_texts, retrieval_corpus, retrieval_reports,
    run_ablation, AblationData, RetrievalMode, TaskData, TaskMode, TASK_TEST_STREAM, TASK_TRAIN_STREAM,
};
use crate::model::Model;
use crate::numerics::{Precision, Real};
use crate::objectives::Objectives;
use crate::training::{load_model, pretrain, Checkpoint, RngState, TrainConfig, Trainer};
use crate::verify::{run_suite, DEFAULT_POINTS, DEFAULT_TOLERANCE};

/// File written into every output directory.
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "ptunifier", version, about = "Prompt-unified vision-language pre-training at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file; missing keys take desk defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of every random choice; overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override one config value, e.g. `--set model.k=8`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Upper bound on side workers.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic image-caption dataset.
    GenData,
    /// Pretrain a model on the dataset's train split.
    Pretrain {
        /// Continue from this checkpoint with its stored configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a classifier head on a downstream task.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        /// Portion of the task's training set to use.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Zero-shot retrieval plus held-out pretraining metrics.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fine-tune with ITC on the train split for this many steps first.
        #[arg(long, default_value_t = 0)]
        finetune_steps: u64,
    },
    /// Run the objective ablation grid.
    Ablate,
    /// Show the prompt-pool selections made for some inputs.
    InspectPrompts {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `.ptimg` image path or a caption; repeatable.
        #[arg(long, required = true)]
        input: Vec<String>,
    },
    /// Run the finite-difference gradient verification suite.
    GradCheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    ImageOnly,
    TextOnly,
    Multimodal,
}

impl From<Task> for TaskMode {
    fn from(t: Task) -> Self {
        match t {
            Task::ImageOnly => TaskMode::ImageOnly,
            Task::TextOnly => TaskMode::TextOnly,
            Task::Multimodal => TaskMode::Multimodal,
        }
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::EvalRetrieval { .. } => "eval-retrieval",
            Command::Ablate => "ablate",
            Command::InspectPrompts { .. } => "inspect-prompts",
            Command::GradCheck => "grad-check",
        }
    }
}

/// Desk defaults, overlaid by `path` and then by `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::default())?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        merge(&mut value, file, "")?;
    }
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        // Bare words such as `f64` or `data/x` are taken as strings.
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key, v)?;
    }
    let config: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::UnknownKey(path)),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut slot = root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) => m.get_mut(part).ok_or_else(|| Error::UnknownKey(key.to_string()))?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        };
    }
    if slot.is_object() && !v.is_object() {
        return Err(Error::Config(format!("`{key}` is a section; give a JSON object")));
    }
    merge(slot, v, key)
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code: 0 on success, 1 on a runtime failure, 2 on a usage
/// or configuration error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let config = match resolve(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match execute(&cli, config) {
        Ok(code) => code,
        Err(e @ (Error::Config(_) | Error::UnknownKey(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(common: &CommonArgs) -> Result<TrainConfig> {
    let mut config = load_config(common.config.as_deref(), &common.set)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(w) = common.workers {
        config.workers = w;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

/// Creates `dir` and writes the resolved configuration into it.
fn prepare_out(dir: &Path, config: &TrainConfig, command: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = serde_json::to_string_pretty(&json!({
        "config": config,
        "seed": config.seed,
        "command": command,
    }))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn write_jsonl<S: serde::Serialize>(path: &Path, items: impl IntoIterator<Item = S>) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(&item)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let c = Checkpoint::load(path)?;
    let p = c.config.get("precision").cloned().unwrap_or(Value::Null);
    serde_json::from_value(p).map_err(|e| Error::Format(format!("checkpoint precision: {e}")))
}

fn execute(cli: &Cli, config: TrainConfig) -> Result<i32> {
    let name = cli.command.name();
    let precision = match &cli.command {
        Command::Finetune { checkpoint, .. }
        | Command::EvalRetrieval { checkpoint, .. }
        | Command::InspectPrompts { checkpoint, .. } => checkpoint_precision(checkpoint)?,
        _ => config.precision,
    };
    if !matches!(cli.command, Command::GradCheck) {
        eprintln!("{}", serde_json::to_string_pretty(&json!({ "command": name, "config": &config }))?);
    }
    match precision {
        Precision::F32 => execute_typed::<f32>(cli, config),
        Precision::F64 => execute_typed::<f64>(cli, config),
    }
}

fn execute_typed<T: Real>(cli: &Cli, mut config: TrainConfig) -> Result<i32> {
    let name = cli.command.name();
    match &cli.command {
        Command::GenData => {
            let dir = cli.common.out.clone().unwrap_or_else(|| PathBuf::from(&config.data.dir));
            config.data.dir = dir.to_string_lossy().into_owned();
            let d = &config.data;
            let info = build_dataset(d.total(), d.rho, config.seed, &dir, &d.fractions(), d.max_vocab)?;
            prepare_out(&dir, &config, name)?;
            println!("{}", serde_json::to_string(&info)?);
        }
        Command::Pretrain { resume } => {
            let dir = out_dir(cli, "pretrain");
            let report = pretrain::<T>(&config, &dir, resume.as_deref())?;
            let stored = match resume {
                Some(_) => load_model::<T>(&report.checkpoint)?.0,
                None => config,
            };
            prepare_out(&dir, &stored, name)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Finetune {
            checkpoint,
            task,
            fraction,
        } => {
            if !(*fraction > 0.0 && *fraction <= 1.0) {
                return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
            }
            let (_, model) = load_model::<T>(checkpoint)?;
            let dir = out_dir(cli, "finetune");
            let vocab = load_vocab(Path::new(&config.data.dir))?;
            let mode = TaskMode::from(*task);
            let (train, test) = match mode {
                TaskMode::Multimodal => {
                    let ev = &config.eval;
                    let gen = |n, stream| TaskData::generate(n, ev.vqa_rho, config.seed, stream, &vocab, &model.config, mode);
                    (gen(ev.vqa_train, TASK_TRAIN_STREAM)?, gen(ev.vqa_test, TASK_TEST_STREAM)?)
                }
                _ => {
                    let data = Path::new(&config.data.dir);
                    let train = Split::load(data, "train")?;
                    let test = Split::load(data, &config.eval.split)?;
                    (
                        TaskData::from_split(&train, &vocab, &model.config, mode)?,
                        TaskData::from_split(&test, &vocab, &model.config, mode)?,
                    )
                }
            };
            let n = ((train.len() as f64 * fraction).ceil() as usize).clamp(1, train.len().max(1));
            let idx: Vec<usize> = (0..n).collect();
            let train = TaskData {
                mode,
                grids: idx.iter().map(|&i| train.grids[i].clone()).collect(),
                tokens: idx.iter().map(|&i| train.tokens[i].clone()).collect(),
                labels: idx.iter().map(|&i| train.labels[i]).collect(),
            };
            let outcome = finetune_classifier(&model, &train, &test, &config.eval, config.seed)?;
            prepare_out(&dir, &config, name)?;
            let rng = RngState::capture(&ChaCha8Rng::seed_from_u64(config.seed));
            let mut head = Checkpoint::new(serde_json::to_value(&config)?, rng, outcome.report.steps);
            for id in outcome.head.store.ids() {
                head.put(&outcome.head.store.meta(id).name, outcome.head.store.value(id));
            }
            head.save(&dir.join("head.ptck"))?;
            write_jsonl(&dir.join("finetune.jsonl"), [&outcome.report])?;
            println!("{}", serde_json::to_string(&outcome.report)?);
        }
        Command::EvalRetrieval {
            checkpoint,
            finetune_steps,
        } => {
            let (ckpt_config, mut model) = load_model::<T>(checkpoint)?;
            let dir = out_dir(cli, "eval");
            let data = Path::new(&config.data.dir);
            let vocab = load_vocab(data)?;
            if vocab.len() != model.config.vocab_size {
                return Err(Error::Config("dataset vocabulary differs from the checkpoint".into()));
            }
            let mode = if *finetune_steps > 0 {
                let mut cfg = ckpt_config.clone();
                cfg.seed = config.seed;
                cfg.total_steps = *finetune_steps;
                cfg.objectives = Objectives {
                    mlm: false,
                    itm: false,
                    itc: true,
                };
                let train = Split::load(data, "train")?;
                let mut trainer = Trainer::with_model(cfg, model)?;
                trainer.fit(&train, &Batcher::for_model(&vocab, &ckpt_config.model), |_, _| Ok(()))?;
                model = trainer.model;
                RetrievalMode::FineTuned
            } else {
                RetrievalMode::ZeroShot
            };
            let split = Split::load(data, &config.eval.split)?;
            let (grids, texts) = retrieval_corpus(&split, &vocab, &model.config, config.eval.retrieval_n)?;
            let zv = itc_embed_images(&model, &grids)?;
            let zl = itc_embed_texts(&model, &texts)?;
            let reports = retrieval_reports(&zv, &zl, &config.eval.ks, mode)?;
            let mut heldout_cfg = ckpt_config;
            heldout_cfg.batch_size = config.batch_size;
            heldout_cfg.mask_rate = config.mask_rate;
            let heldout = heldout_metrics(&model, &heldout_cfg, &split, &vocab, config.seed)?;
            prepare_out(&dir, &config, name)?;
            write_jsonl(&dir.join("retrieval.jsonl"), &reports)?;
            write_jsonl(&dir.join("heldout.jsonl"), [&heldout])?;
            for r in &reports {
                println!("{}", serde_json::to_string(r)?);
            }
            println!("{}", serde_json::to_string(&heldout)?);
        }
        Command::Ablate => {
            let dir = out_dir(cli, "ablate");
            let data = Path::new(&config.data.dir);
            let vocab = load_vocab(data)?;
            config.model.vocab_size = vocab.len();
            let train = Split::load(data, "train")?;
            let test = Split::load(data, &config.eval.split)?;
            prepare_out(&dir, &config, name)?;
            let report = run_ablation::<T>(
                &config,
                AblationData {
                    train: &train,
                    test: &test,
                    vocab: &vocab,
                },
                |row| eprintln!("{}", serde_json::to_string(row).unwrap_or_default()),
            )?;
            let mut lines: Vec<Value> = report.rows.iter().map(|r| json!({ "row": r })).collect();
            lines.extend(report.verdicts.iter().map(|v| json!({ "verdict": v })));
            lines.push(json!({ "config": &config, "seed": config.seed, "seconds": report.seconds }));
            write_jsonl(&dir.join("ablation.jsonl"), &lines)?;
            let table = report.table();
            let path = dir.join("ablation.txt");
            fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
            print!("{table}");
        }
        Command::InspectPrompts { checkpoint, input } => {
            let (_, model) = load_model::<T>(checkpoint)?;
            let vocab = load_vocab(Path::new(&config.data.dir))?;
            let mut out = std::io::stdout().lock();
            for line in inspect_prompts(&model, &vocab, input)? {
                writeln!(out, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io("stdout", e))?;
            }
        }
        Command::GradCheck => {
            let reports = run_suite(DEFAULT_POINTS, config.seed, DEFAULT_TOLERANCE)?;
            let failed = reports.iter().filter(|r| !r.passed).count();
            for r in &reports {
                println!(
                    "{} {:<28} max_rel_err {:.3e}",
                    if r.passed { "ok  " } else { "FAIL" },
                    r.op_name,
                    r.max_rel_err
                );
            }
            println!("{} checks, {failed} failed, tolerance {:e}", reports.len(), DEFAULT_TOLERANCE);
            if let Some(dir) = &cli.common.out {
                prepare_out(dir, &config, name)?;
                write_jsonl(&dir.join("grad_check.jsonl"), &reports)?;
            }
            return Ok(i32::from(failed > 0));
        }
    }
    Ok(0)
}

/// One JSON object per input: the selection made on the prompted side.
/// Inputs ending in `.ptimg` are read as images, anything else as text.
pub fn inspect_prompts<T: Real>(model: &Model<T>, vocab: &crate::embeddings::Vocabulary, inputs: &[String]) -> Result<Vec<Value>> {
    let mut model = model.clone();
    let mut lines = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut g = crate::numerics::Graph::new();
        let is_image = input.ends_with(".ptimg");
        let x = if is_image {
            let grid = patchify(&read_image(Path::new(input))?, model.config.patch_size)?;
            let v = model.embed_images(&mut g, &[grid])?;
            model.unify(&mut g, Some(v), None)?
        } else {
            let t = tokenize(input, vocab, model.config.max_text_len)?;
            let l = model.embed_texts(&mut g, &[t])?;
            model.unify(&mut g, None, Some(l))?
        };
        let side = if is_image { Modality::Language } else { Modality::Vision };
        let sel = x.selections.into_iter().next().flatten().ok_or_else(|| {
            Error::Config("inspect-prompts needs a model in pool prompt mode".into())
        })?;
        lines.push(json!({
            "sample_id": input,
            "side": side.name(),
            "indices": sel.indices,
            "scores": sel.scores,
        }));
    }
    Ok(lines)
}
