use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::optim::{clip_grad_norm, AdamW, AdamWHyper};
use super::schedule::lr_schedule;
use crate::data::{batches_per_epoch, epoch_order, load_vocab, Batch, BatchMode, Batcher, Split};
use crate::embeddings::Modality;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::objectives::{
    apply_mlm_mask, cls_pair, combined_loss, itc_loss, itm_logits, make_itm_batch, mlm_loss, LossBundle, MlmOutput,
};
use crate::params::ParamGroup;

/// Offset separating the data-shuffle seed from the model seed.
const SHUFFLE_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ptck";

/// Graph nodes and values of one forward pass over a batch.
pub struct ForwardOut {
    pub total: Var,
    pub bundle: LossBundle,
    pub mlm: Option<MlmOutput>,
    /// ITM logits with their labels.
    pub itm: Option<(Var, Vec<bool>)>,
}

/// Builds every enabled objective for `batch` on `g`:
/// MLM on masked pairs, ITM on in-batch positives and negatives, and ITC
/// on image-only and text-only passes. Encoder outputs are shared.
pub fn forward_losses<T: Real>(
    model: &mut Model<T>,
    g: &mut Graph<T>,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardOut> {
    let n = batch.len();
    let obj = cfg.objectives;
    let weights = cfg.effective_weights();
    let v_emb = model.embed_images(g, &batch.grids)?;
    let ev = model.backbone.encode(g, &model.store, &v_emb)?;

    let mlm = if obj.mlm {
        let mut masked = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for t in &batch.tokens {
            let e = apply_mlm_mask(t, cfg.mask_rate, model.config.vocab_size, rng)?;
            masked.push(e.masked);
            targets.push(e.targets);
        }
        let l = model.embed_texts(g, &masked)?;
        let el = model.backbone.encode(g, &model.store, &l)?;
        let out = model.backbone.fuse(g, &model.store, &ev, &el)?;
        Some(mlm_loss(g, &model.store, &model.mlm_head, &out.zl, &targets)?)
    } else {
        None
    };

    let mut itm = None;
    let mut itc = None;
    if obj.itm || obj.itc {
        let l_emb = model.embed_texts(g, &batch.tokens)?;
        let el = model.backbone.encode(g, &model.store, &l_emb)?;
        if obj.itm {
            let b = make_itm_batch(n, rng)?;
            let vi: Vec<usize> = b.pairs.iter().map(|p| p.0).collect();
            let li: Vec<usize> = b.pairs.iter().map(|p| p.1).collect();
            let v = ev.select(g, &vi)?;
            let l = el.select(g, &li)?;
            let out = model.backbone.fuse(g, &model.store, &v, &l)?;
            let (zv, zl) = cls_pair(g, &out)?;
            let logits = itm_logits(g, &model.store, &model.itm_head, zv, zl)?;
            let targets: Vec<usize> = b.labels.iter().map(|&l| l as usize).collect();
            let loss = g.cross_entropy(logits, &targets)?;
            itm = Some((loss, logits, b.labels));
        }
        if obj.itc {
            let img = model.unify(g, Some(v_emb.clone()), None)?;
            let lp = model.backbone.encode(g, &model.store, &img.language)?;
            let out = model.backbone.fuse(g, &model.store, &ev, &lp)?;
            let zv = model.itc_project(g, &out, Modality::Vision)?;
            let txt = model.unify(g, None, Some(l_emb))?;
            let vp = model.backbone.encode(g, &model.store, &txt.vision)?;
            let out = model.backbone.fuse(g, &model.store, &vp, &el)?;
            let zl = model.itc_project(g, &out, Modality::Language)?;
            itc = Some(itc_loss(g, zv, zl, cfg.tau)?);
        }
    }
    let mlm_var = mlm.as_ref().map(|m| m.loss);
    let (total, bundle) = combined_loss(g, mlm_var, itm.as_ref().map(|i| i.0), itc, weights)?;
    Ok(ForwardOut {
        total,
        bundle,
        mlm,
        itm: itm.map(|(_, logits, labels)| (logits, labels)),
    })
}

/// One metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_mlm: Option<f64>,
    pub loss_itm: Option<f64>,
    pub loss_itc: Option<f64>,
    pub lr_backbone: f64,
    pub lr_heads: f64,
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optim: AdamW<T>,
    /// Completed steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        Self::with_model(config, model)
    }

    /// Continues training `model` under `config` from step 0.
    pub fn with_model(config: TrainConfig, model: Model<T>) -> Result<Self> {
        config.validate()?;
        if model.config != config.model {
            return Err(Error::Config("model does not match the training configuration".into()));
        }
        let optim = AdamW::new(&model.store, hyper(&config));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            model,
            optim,
            step: 0,
            rng,
        })
    }

    /// Learning rates `(backbone, heads)` applied by update number `step + 1`.
    pub fn lrs(&self, step: u64) -> Result<(f64, f64)> {
        let c = &self.config;
        let s = (step + 1).min(c.total_steps);
        Ok((
            lr_schedule(s, c.total_steps, c.peak_lr_backbone, c.warmup_frac)?,
            lr_schedule(s, c.total_steps, c.peak_lr_heads, c.warmup_frac)?,
        ))
    }

    /// Forward, backward, clipping and one AdamW update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBundle> {
        let mut g = Graph::new();
        let out = forward_losses(&mut self.model, &mut g, batch, &self.config, &mut self.rng)?;
        if !out.bundle.total.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite loss at step {}: {:?}",
                self.step + 1,
                out.bundle
            )));
        }
        if g.requires_grad(out.total) {
            g.backward(out.total)?;
        }
        let mut grads = self.model.store.collect_grads(&g);
        clip_grad_norm(&mut grads, self.config.grad_clip);
        let (lr_b, lr_h) = self.lrs(self.step)?;
        self.optim.step(&mut self.model.store, &grads, |meta| match meta.group {
            ParamGroup::Backbone => lr_b,
            ParamGroup::Head => lr_h,
        })?;
        self.step += 1;
        Ok(out.bundle)
    }

    /// The training batch for the current step: a per-epoch shuffle drawn
    /// from the seed, sentences sampled with the trainer's generator.
    pub fn next_batch(&mut self, split: &Split, batcher: &Batcher) -> Result<Batch> {
        let bs = self.config.batch_size;
        let per_epoch = batches_per_epoch(split.len(), bs, BatchMode::Train);
        if per_epoch == 0 {
            return Err(Error::invalid(format!(
                "split `{}` has {} records, fewer than one batch of {bs}",
                split.name,
                split.len()
            )));
        }
        let epoch = self.step / per_epoch as u64;
        let offset = (self.step % per_epoch as u64) as usize;
        let order = epoch_order(split.len(), self.config.seed.wrapping_add(SHUFFLE_SEED_OFFSET), epoch);
        batcher.make(split, &order[offset * bs..(offset + 1) * bs], &mut self.rng)
    }

    /// Trains until `total_steps`, calling `hook` after every step with the
    /// metrics record when one is due.
    pub fn fit(
        &mut self,
        split: &Split,
        batcher: &Batcher,
        mut hook: impl FnMut(&Self, Option<&MetricRecord>) -> Result<()>,
    ) -> Result<Option<LossBundle>> {
        let mut last = None;
        while self.step < self.config.total_steps {
            let batch = self.next_batch(split, batcher)?;
            let (lr_backbone, lr_heads) = self.lrs(self.step)?;
            let bundle = self.train_step(&batch)?;
            last = Some(bundle);
            let record = (self.step % self.config.log_every == 0).then(|| MetricRecord {
                step: self.step,
                loss_total: bundle.total,
                loss_mlm: bundle.mlm,
                loss_itm: bundle.itm,
                loss_itc: bundle.itc,
                lr_backbone,
                lr_heads,
            });
            hook(self, record.as_ref())?;
        }
        Ok(last)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(serde_json::to_value(&self.config)?, RngState::capture(&self.rng), self.step);
        write_model(&mut c, &self.model);
        for (name, id) in self.model.store.sorted() {
            let m = &self.optim.moments[id.0];
            c.put(&format!("optim.m.{name}"), &m.m);
            c.put(&format!("optim.v.{name}"), &m.v);
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut t = Self::new(config)?;
        read_model(c, &mut t.model)?;
        for (name, id) in t.model.store.sorted() {
            let m = &mut t.optim.moments[id.0];
            m.m = expect_shape(c.get(&format!("optim.m.{name}"))?, m.m.shape(), name)?;
            m.v = expect_shape(c.get(&format!("optim.v.{name}"))?, m.v.shape(), name)?;
        }
        t.optim.t = c.step;
        t.step = c.step;
        t.rng = c.rng_state.restore()?;
        Ok(t)
    }
}

fn hyper(c: &TrainConfig) -> AdamWHyper {
    AdamWHyper {
        weight_decay: c.weight_decay,
        ..AdamWHyper::default()
    }
}

fn expect_shape<T: Real>(t: Tensor<T>, shape: &[usize], name: &str) -> Result<Tensor<T>> {
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "tensor `{name}` has shape {:?}, model expects {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

fn counts_name(pool: &str) -> String {
    format!("counts.{pool}")
}

/// Stores every parameter under its name and the pool selection counters
/// as `counts.<pool name>`.
pub fn write_model<T: Real>(c: &mut Checkpoint, model: &Model<T>) {
    for (name, id) in model.store.sorted() {
        c.put(name, model.store.value(id));
    }
    for m in [Modality::Vision, Modality::Language] {
        if let Some(p) = model.prompts.pool(m) {
            let counts: Vec<f64> = p.selection_counts.iter().map(|&x| x as f64).collect();
            let n = counts.len();
            c.put(&counts_name(&model.store.meta(p.param).name), &Tensor::new(counts, &[n]).expect("non-empty"));
        }
    }
}

/// Overwrites the parameters and counters of `model` from `c`.
pub fn read_model<T: Real>(c: &Checkpoint, model: &mut Model<T>) -> Result<()> {
    let names: Vec<(String, _)> = model.store.sorted().map(|(n, id)| (n.to_string(), id)).collect();
    for (name, id) in names {
        let t = expect_shape(c.get::<T>(&name)?, model.store.value(id).shape(), &name)?;
        *model.store.value_mut(id) = t;
    }
    for m in [Modality::Vision, Modality::Language] {
        let Some(param) = model.prompts.pool(m).map(|p| p.param) else { continue };
        let name = counts_name(&model.store.meta(param).name);
        let counts = c.get::<f64>(&name)?;
        let pool = match m {
            Modality::Vision => model.prompts.vision_pool.as_mut(),
            Modality::Language => model.prompts.language_pool.as_mut(),
        }
        .expect("pool present");
        if counts.numel() != pool.selection_counts.len() {
            return Err(Error::Format(format!("`{name}` has {} entries", counts.numel())));
        }
        pool.selection_counts = counts.data().iter().map(|&x| x as u64).collect();
    }
    Ok(())
}

/// Training configuration and model stored in a checkpoint file.
pub fn load_model<T: Real>(path: &Path) -> Result<(TrainConfig, Model<T>)> {
    let c = Checkpoint::load(path)?;
    let config: TrainConfig =
        serde_json::from_value(c.config.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = Model::new(config.model.clone(), config.seed)?;
    read_model(&c, &mut model)?;
    Ok((config, model))
}

/// Summary of a [`pretrain`] run.
#[derive(Clone, Debug, Serialize)]
pub struct PretrainReport {
    pub steps: u64,
    pub last: Option<LossBundle>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub seconds: f64,
}

/// Sets the model vocabulary size from the dataset vocabulary.
pub fn resolve_vocab(config: &mut TrainConfig) -> Result<crate::embeddings::Vocabulary> {
    let vocab = load_vocab(Path::new(&config.data.dir))?;
    config.model.vocab_size = vocab.len();
    Ok(vocab)
}

fn metrics_header(config: &TrainConfig) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::json!({
        "config": config,
        "seed": config.seed,
    }))?)
}

/// Runs a full pretraining job writing `metrics.jsonl`, optional periodic
/// checkpoints and the final `checkpoint.ptck` into `out_dir`. With
/// `resume`, training continues from that checkpoint using its stored
/// configuration, and metrics after its step are rewritten.
pub fn pretrain<T: Real>(config: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<PretrainReport> {
    let start = Instant::now();
    let (mut trainer, vocab) = match resume {
        Some(path) => {
            let t = Trainer::<T>::from_checkpoint(&Checkpoint::load(path)?)?;
            let vocab = load_vocab(Path::new(&t.config.data.dir))?;
            if vocab.len() != t.config.model.vocab_size {
                return Err(Error::Config("dataset vocabulary differs from the checkpoint".into()));
            }
            (t, vocab)
        }
        None => {
            let mut config = config.clone();
            let vocab = resolve_vocab(&mut config)?;
            (Trainer::<T>::new(config)?, vocab)
        }
    };
    let split = Split::load(Path::new(&trainer.config.data.dir), "train")?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let ckpt_path = out_dir.join(FINAL_CHECKPOINT);
    let mut created = vec![metrics_path.clone(), ckpt_path.clone()];

    let result = (|| -> Result<Option<LossBundle>> {
        let mut lines = vec![metrics_header(&trainer.config)?];
        if resume.is_some() && metrics_path.exists() {
            let f = fs::File::open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            lines.clear();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&metrics_path, e))?;
                let keep = i == 0
                    || serde_json::from_str::<MetricRecord>(&line).map(|r| r.step <= trainer.step).unwrap_or(false);
                if keep {
                    lines.push(line);
                }
            }
        }
        let mut file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        for l in &lines {
            writeln!(file, "{l}").map_err(|e| Error::io(&metrics_path, e))?;
        }
        let batcher = Batcher::for_model(&vocab, &trainer.config.model);
        let every = trainer.config.checkpoint_every;
        let last = trainer.fit(&split, &batcher, |t, record| {
            if let Some(r) = record {
                writeln!(file, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&metrics_path, e))?;
            }
            if every > 0 && t.step % every == 0 && t.step < t.config.total_steps {
                let p = out_dir.join(format!("checkpoint-{}.ptck", t.step));
                t.checkpoint()?.save(&p)?;
                created.push(p);
            }
            Ok(())
        })?;
        file.flush().map_err(|e| Error::io(&metrics_path, e))?;
        trainer.checkpoint()?.save(&ckpt_path)?;
        Ok(last)
    })();
    match result {
        Ok(last) => Ok(PretrainReport {
            steps: trainer.step,
            last,
            checkpoint: ckpt_path,
            metrics: metrics_path,
            seconds: start.elapsed().as_secs_f64(),
        }),
        Err(e) => {
            if resume.is_none() {
                for p in &created {
                    let _ = fs::remove_file(p);
                }
            }
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_dataset;
    use crate::model::ModelConfig;
    use crate::objectives::Objectives;

    fn tiny(dir: &Path) -> TrainConfig {
        build_dataset(24, 1.0, 3, dir, &[0.75, 0.125, 0.125], 128).unwrap();
        let mut c = TrainConfig {
            total_steps: 4,
            batch_size: 4,
            log_every: 1,
            precision: crate::numerics::Precision::F64,
            model: ModelConfig {
                d_model: 16,
                heads: 2,
                layers_vision: 1,
                layers_language: 1,
                layers_fusion: 1,
                itc_dim: 8,
                pool_size: 8,
                k: 2,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        c.data.dir = dir.to_string_lossy().into_owned();
        resolve_vocab(&mut c).unwrap();
        c
    }

    fn batch(t: &mut Trainer<f64>) -> Batch {
        let dir = t.config.data.dir.clone();
        let split = Split::load(Path::new(&dir), "train").unwrap();
        let vocab = load_vocab(Path::new(&dir)).unwrap();
        let b = Batcher::for_model(&vocab, &t.config.model);
        t.next_batch(&split, &b).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(dir.path());
        c.peak_lr_backbone = 0.0;
        c.peak_lr_heads = 0.0;
        let mut t = Trainer::<f64>::new(c).unwrap();
        let before = t.model.store.clone();
        let b = batch(&mut t);
        let l = t.train_step(&b).unwrap();
        assert!(l.mlm.is_some() && l.itm.is_some() && l.itc.is_some());
        for (name, id) in before.sorted() {
            let (x, y) = (before.value(id).data(), t.model.store.value(id).data());
            assert!(x.iter().zip(y).all(|(a, b)| a.to_bits() == b.to_bits()), "{name} moved");
        }
    }

    #[test]
    fn disabled_objectives_are_absent_from_the_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(dir.path());
        c.objectives = Objectives { mlm: true, itm: false, itc: false };
        let mut t = Trainer::<f64>::new(c).unwrap();
        let b = batch(&mut t);
        let l = t.train_step(&b).unwrap();
        assert!(l.mlm.is_some() && l.itm.is_none() && l.itc.is_none());
        assert_eq!(l.total, l.mlm.unwrap());
    }

    #[test]
    fn parameter_groups_get_their_own_rates() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(dir.path());
        c.peak_lr_backbone = 0.0;
        let mut t = Trainer::<f64>::new(c).unwrap();
        let before = t.model.store.clone();
        let b = batch(&mut t);
        t.train_step(&b).unwrap();
        let mut head_moved = false;
        for (name, id) in before.sorted() {
            let same = before.value(id).data() == t.model.store.value(id).data();
            match before.meta(id).group {
                ParamGroup::Backbone => assert!(same, "{name} moved"),
                ParamGroup::Head => head_moved |= !same,
            }
        }
        assert!(head_moved);
    }

    #[test]
    fn unselected_pool_entries_do_not_move() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let mut t = Trainer::<f64>::new(c).unwrap();
        let pool = t.model.prompts.pool(Modality::Vision).unwrap().param;
        let before = t.model.store.value(pool).clone();
        let b = batch(&mut t);
        t.train_step(&b).unwrap();
        let counts = &t.model.prompts.pool(Modality::Vision).unwrap().selection_counts;
        let after = t.model.store.value(pool);
        assert!(counts.iter().any(|&c| c == 0));
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                assert_eq!(before.row(i), after.row(i));
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let full = pretrain::<f64>(&c, &dir.path().join("a"), None).unwrap();
        let again = pretrain::<f64>(&c, &dir.path().join("b"), None).unwrap();
        let read = |p: &Path| fs::read_to_string(p).unwrap();
        assert_eq!(read(&full.metrics), read(&again.metrics));
        assert_eq!(fs::read(&full.checkpoint).unwrap(), fs::read(&again.checkpoint).unwrap());
        assert_eq!(read(&full.metrics).lines().count(), 5);

        let mut half = c.clone();
        half.checkpoint_every = 2;
        let out = dir.path().join("c");
        pretrain::<f64>(&half, &out, None).unwrap();
        let mid = out.join("checkpoint-2.ptck");
        assert!(mid.exists());
        fs::remove_file(out.join(FINAL_CHECKPOINT)).unwrap();
        let resumed = pretrain::<f64>(&half, &out, Some(&mid)).unwrap();
        assert_eq!(resumed.steps, 4);
        let ck = |p: &Path| {
            let mut c = Checkpoint::load(p).unwrap();
            c.config = serde_json::Value::Null;
            c
        };
        assert_eq!(ck(&resumed.checkpoint), ck(&full.checkpoint));
        let metrics = |p: &Path| read(p).lines().skip(1).map(String::from).collect::<Vec<_>>();
        assert_eq!(metrics(&resumed.metrics), metrics(&full.metrics));
    }
}
