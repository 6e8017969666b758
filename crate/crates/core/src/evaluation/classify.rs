use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::retrieval::{first_sentence, EVAL_CHUNK};
use crate::data::{generate_pair, Color, Labels, Shape, Split, QUESTION};
use crate::embeddings::{patchify, tokenize, PatchGrid, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::objectives::{cls_pair, MlpHead};
use crate::params::{ParamId, ParamStore};
use crate::prompts::unify_input;
use crate::training::{clip_grad_norm, AdamW, AdamWHyper, EvalConfig};

const CLASSIFIER: &str = "classifier";

/// Downstream classification task: which inputs are present and what is
/// predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Image alone, predict its shape.
    ImageOnly,
    /// Caption alone, predict the color it names.
    TextOnly,
    /// Image with caption and the question `what shape ?`, predict the
    /// image's shape.
    Multimodal,
}

impl TaskMode {
    pub const ALL: [TaskMode; 3] = [TaskMode::ImageOnly, TaskMode::TextOnly, TaskMode::Multimodal];

    pub fn name(self) -> &'static str {
        match self {
            TaskMode::ImageOnly => "image_only",
            TaskMode::TextOnly => "text_only",
            TaskMode::Multimodal => "multimodal",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            TaskMode::TextOnly => Color::ALL.len(),
            _ => Shape::ALL.len(),
        }
    }

    fn label(self, image: &Labels, text: &Labels) -> usize {
        match self {
            TaskMode::TextOnly => text.color.index(),
            _ => image.shape.index(),
        }
    }

    fn uses_image(self) -> bool {
        self != TaskMode::TextOnly
    }

    fn uses_text(self) -> bool {
        self != TaskMode::ImageOnly
    }
}

/// Model inputs and class labels of one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub mode: TaskMode,
    pub grids: Vec<PatchGrid>,
    pub tokens: Vec<TokenSequence>,
    pub labels: Vec<usize>,
}

/// The caption sentence, shortened so the question always fits in the
/// multimodal case.
fn task_text(sentence: &str, mode: TaskMode, max_len: usize) -> String {
    if mode != TaskMode::Multimodal {
        return sentence.to_string();
    }
    let q = QUESTION.split_whitespace().count();
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let keep = words.len().min(max_len.saturating_sub(q));
    format!("{} {QUESTION}", words[..keep].join(" "))
}

impl TaskData {
    fn build(
        mode: TaskMode,
        items: impl Iterator<Item = (PatchGrid, String, usize)>,
        vocab: &Vocabulary,
        config: &ModelConfig,
    ) -> Result<Self> {
        let mut data = TaskData {
            mode,
            grids: Vec::new(),
            tokens: Vec::new(),
            labels: Vec::new(),
        };
        for (grid, sentence, label) in items {
            let text = task_text(&sentence, mode, config.max_text_len);
            data.tokens.push(tokenize(&text, vocab, config.max_text_len)?);
            data.grids.push(grid);
            data.labels.push(label);
        }
        Ok(data)
    }

    /// Records of a split, each with the first sentence of its caption.
    pub fn from_split(split: &Split, vocab: &Vocabulary, config: &ModelConfig, mode: TaskMode) -> Result<Self> {
        let grids = split
            .images
            .iter()
            .map(|img| patchify(img, config.patch_size))
            .collect::<Result<Vec<_>>>()?;
        let items = grids
            .into_iter()
            .zip(&split.records)
            .map(|(g, r)| (g, first_sentence(&r.text), mode.label(&r.labels, &r.labels)));
        Self::build(mode, items, vocab, config)
    }

    /// `n` fresh scenes whose captions are truthful with probability `rho`,
    /// drawn from `seed` on generator stream `stream`.
    pub fn generate(
        n: usize,
        rho: f64,
        seed: u64,
        stream: u64,
        vocab: &Vocabulary,
        config: &ModelConfig,
        mode: TaskMode,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let p = generate_pair(&mut rng, rho);
            let grid = patchify(&p.image, config.patch_size)?;
            items.push((grid, first_sentence(&p.text), mode.label(&p.labels, &p.text_labels)));
        }
        Self::build(mode, items.into_iter(), vocab, config)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The same items under another task mode.
    pub fn with_mode(&self, mode: TaskMode, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::invalid("one label per item required"));
        }
        Ok(Self {
            mode,
            grids: self.grids.clone(),
            tokens: self.tokens.clone(),
            labels,
        })
    }
}

/// Both CLS rows after the backbone, concatenated (`N × 2D`), with the
/// absent side prompt-filled according to the task mode.
pub fn task_features<T: Real>(model: &Model<T>, data: &TaskData) -> Result<Tensor<T>> {
    let mut bank = model.prompts.clone();
    let mut rows = Vec::new();
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let mut g = Graph::new();
        let f = features_in_graph(&mut g, model, &mut bank, data, start..end)?;
        rows.extend_from_slice(g.value(f).data());
        start = end;
    }
    Tensor::new(rows, &[n, 2 * model.config.d_model])
}

fn features_in_graph<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    bank: &mut crate::prompts::PromptBank,
    data: &TaskData,
    range: std::ops::Range<usize>,
) -> Result<Var> {
    let v = match data.mode.uses_image() {
        true => Some(model.embed_images(g, &data.grids[range.clone()])?),
        false => None,
    };
    let l = match data.mode.uses_text() {
        true => Some(model.embed_texts(g, &data.tokens[range])?),
        false => None,
    };
    let x = unify_input(g, &model.store, bank, &model.embeddings, v, l)?;
    let out = model.forward(g, &x)?;
    let (zv, zl) = cls_pair(g, &out)?;
    g.concat_cols(zv, zl)
}

/// Randomly initialized two-layer perceptron over concatenated CLS rows.
#[derive(Clone, Debug)]
pub struct ClassifierHead<T> {
    pub mode: TaskMode,
    pub classes: usize,
    pub store: ParamStore<T>,
    pub head: MlpHead,
}

impl<T: Real> ClassifierHead<T> {
    pub fn new(mode: TaskMode, d_model: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let head = new_head(&mut store, mode, d_model, seed)?;
        Ok(Self {
            mode,
            classes: mode.num_classes(),
            store,
            head,
        })
    }

    /// Class scores for a batch of features.
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let y = self.head.forward(&mut g, &self.store, x)?;
        Ok(g.value(y).clone())
    }

    /// Highest-scoring class per row, ties to the lower index.
    pub fn predict(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }
}

fn new_head<T: Real>(store: &mut ParamStore<T>, mode: TaskMode, d: usize, seed: u64) -> Result<MlpHead> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    MlpHead::new(store, CLASSIFIER, [2 * d, d, mode.num_classes()], &mut rng)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    predicted.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub mode: TaskMode,
    pub classes: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub steps: u64,
    pub backbone_lr: f64,
    pub final_loss: Option<f64>,
    pub accuracy: f64,
}

pub struct FinetuneOutcome<T> {
    pub head: ClassifierHead<T>,
    /// The fine-tuned copy of the backbone, when its learning rate is
    /// positive.
    pub model: Option<Model<T>>,
    pub report: FinetuneReport,
}

/// Minibatch index lists: shuffled passes over `0..n`, one batch per step.
fn minibatches(n: usize, batch: usize, steps: u64, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let batch = batch.clamp(1, n);
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        if order.len() < batch {
            let mut pass: Vec<usize> = (0..n).collect();
            pass.shuffle(rng);
            order.extend(pass);
        }
        out.push(order.drain(..batch).collect());
    }
    out
}

/// Trains a classifier head on `train` and reports accuracy on `test`.
/// With `backbone_lr == 0` the features are computed once from the frozen
/// model; otherwise a copy of the model is trained jointly with the head.
pub fn finetune_classifier<T: Real>(
    model: &Model<T>,
    train: &TaskData,
    test: &TaskData,
    config: &EvalConfig,
    seed: u64,
) -> Result<FinetuneOutcome<T>> {
    if train.mode != test.mode {
        return Err(Error::invalid("train and test data belong to different tasks"));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("fine-tuning needs labelled train and test items"));
    }
    let mode = train.mode;
    let classes = mode.num_classes();
    if let Some(&bad) = train.labels.iter().chain(&test.labels).find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} outside the {classes} classes of {}", mode.name())));
    }
    let (head, tuned, final_loss) = if config.finetune_backbone_lr > 0.0 {
        train_jointly(model, train, config, seed)?
    } else {
        let features = task_features(model, train)?;
        let (head, loss) = fit_head(train, &features, model.config.d_model, config, seed)?;
        (head, None, loss)
    };
    let features = task_features(tuned.as_ref().unwrap_or(model), test)?;
    let acc = accuracy(&head.predict(&features)?, &test.labels);
    Ok(FinetuneOutcome {
        head,
        model: tuned,
        report: FinetuneReport {
            mode,
            classes,
            train_n: train.len(),
            test_n: test.len(),
            steps: config.finetune_steps,
            backbone_lr: config.finetune_backbone_lr,
            final_loss,
            accuracy: acc,
        },
    })
}

fn loss_value<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).to_f64()[0]
}

fn batches_for(n: usize, config: &EvalConfig, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(12);
    minibatches(n, config.finetune_batch, config.finetune_steps, &mut rng)
}

/// Trains a fresh head on precomputed features; only `train.labels` is
/// read from `train`.
pub(crate) fn fit_head<T: Real>(
    train: &TaskData,
    features: &Tensor<T>,
    d_model: usize,
    config: &EvalConfig,
    seed: u64,
) -> Result<(ClassifierHead<T>, Option<f64>)> {
    if features.rows() != train.labels.len() {
        return Err(Error::shape("fit_head", format!("{} feature rows for {} labels", features.rows(), train.labels.len())));
    }
    let batches = batches_for(train.labels.len(), config, seed);
    let mut head = ClassifierHead::new(train.mode, d_model, seed)?;
    let mut optim = AdamW::new(&head.store, AdamWHyper::default());
    let mut last = None;
    for idx in &batches {
        let mut g = Graph::new();
        let all = g.constant(features.clone());
        let x = g.gather_rows(all, idx)?;
        let logits = head.head.forward(&mut g, &head.store, x)?;
        let targets: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let loss = g.cross_entropy(logits, &targets)?;
        last = Some(loss_value(&g, loss));
        g.backward(loss)?;
        let mut grads = head.store.collect_grads(&g);
        clip_grad_norm(&mut grads, 1.0);
        optim.step(&mut head.store, &grads, |_| config.finetune_lr)?;
    }
    Ok((head, last))
}

fn train_jointly<T: Real>(
    model: &Model<T>,
    train: &TaskData,
    config: &EvalConfig,
    seed: u64,
) -> Result<(ClassifierHead<T>, Option<Model<T>>, Option<f64>)> {
    let batches = batches_for(train.len(), config, seed);
    let mut work = model.clone();
    let mlp = new_head(&mut work.store, train.mode, model.config.d_model, seed)?;
    let mut optim = AdamW::new(&work.store, AdamWHyper::default());
    let mut bank = model.prompts.clone();
    let mut last = None;
    for idx in &batches {
        let sub = TaskData {
            mode: train.mode,
            grids: idx.iter().map(|&i| train.grids[i].clone()).collect(),
            tokens: idx.iter().map(|&i| train.tokens[i].clone()).collect(),
            labels: idx.iter().map(|&i| train.labels[i]).collect(),
        };
        let mut g = Graph::new();
        let x = features_in_graph(&mut g, &work, &mut bank, &sub, 0..sub.len())?;
        let logits = mlp.forward(&mut g, &work.store, x)?;
        let loss = g.cross_entropy(logits, &sub.labels)?;
        last = Some(loss_value(&g, loss));
        g.backward(loss)?;
        let mut grads = work.store.collect_grads(&g);
        clip_grad_norm(&mut grads, 1.0);
        optim.step(&mut work.store, &grads, |meta| {
            if meta.name.starts_with(CLASSIFIER) {
                config.finetune_lr
            } else {
                config.finetune_backbone_lr
            }
        })?;
    }
    let mut head = ClassifierHead::new(train.mode, model.config.d_model, seed)?;
    let mut tuned = model.clone();
    copy_by_name(&work.store, &mut head.store)?;
    copy_by_name(&work.store, &mut tuned.store)?;
    Ok((head, Some(tuned), last))
}

/// Overwrites every parameter of `to` with the same-named one of `from`.
fn copy_by_name<T: Real>(from: &ParamStore<T>, to: &mut ParamStore<T>) -> Result<()> {
    let names: BTreeMap<String, ParamId> = to.sorted().map(|(n, id)| (n.to_string(), id)).collect();
    for (name, id) in names {
        let v = from
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` missing")))?;
        *to.value_mut(id) = v.clone();
    }
    Ok(())
}
