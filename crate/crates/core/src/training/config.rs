use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Precision;
use crate::objectives::{LossWeights, Objectives};

/// Where the dataset lives and how `gen-data` builds it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub rho: f64,
    pub max_vocab: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: "data".into(),
            train: 4096,
            val: 256,
            test: 256,
            rho: 1.0,
            max_vocab: 128,
        }
    }
}

impl DataConfig {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn fractions(&self) -> Vec<f64> {
        let n = self.total() as f64;
        [self.train, self.val, self.test].iter().map(|&x| x as f64 / n).collect()
    }
}

/// Downstream evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out split used for retrieval and held-out losses.
    pub split: String,
    pub retrieval_n: usize,
    pub ks: Vec<usize>,
    pub finetune_steps: u64,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    /// Learning rate of the backbone while fine-tuning; 0 keeps it frozen.
    pub finetune_backbone_lr: f64,
    /// Caption-image correlation of the answer-classification data.
    pub vqa_rho: f64,
    pub vqa_train: usize,
    pub vqa_test: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            retrieval_n: 256,
            ks: vec![1, 5, 10],
            finetune_steps: 300,
            finetune_batch: 32,
            finetune_lr: 1e-3,
            finetune_backbone_lr: 0.0,
            vqa_rho: 0.0,
            vqa_train: 1024,
            vqa_test: 512,
        }
    }
}

/// The objective-ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    pub configs: Vec<Objectives>,
    pub pretrain_steps: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let set = |mlm, itm, itc| Objectives { mlm, itm, itc };
        Self {
            seeds: vec![0, 1, 2],
            fractions: vec![0.1, 1.0],
            configs: vec![set(true, true, false), set(false, false, true), set(true, true, true)],
            pretrain_steps: 800,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub warmup_frac: f64,
    pub peak_lr_backbone: f64,
    pub peak_lr_heads: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub tau: f64,
    pub grad_clip: f64,
    pub log_every: u64,
    /// Write `checkpoint-<step>.ptck` every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub precision: Precision,
    pub workers: usize,
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub objectives: Objectives,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 3000,
            warmup_frac: 0.1,
            peak_lr_backbone: 1e-4,
            peak_lr_heads: 3e-4,
            weight_decay: 0.01,
            batch_size: 32,
            mask_rate: 0.15,
            tau: 0.07,
            grad_clip: 1.0,
            log_every: 50,
            checkpoint_every: 0,
            precision: Precision::F32,
            workers: 1,
            model: ModelConfig::default(),
            loss_weights: LossWeights::default(),
            objectives: Objectives::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Loss weights with disabled objectives zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let w = self.loss_weights;
        let o = self.objectives;
        LossWeights {
            mlm: if o.mlm { w.mlm } else { 0.0 },
            itm: if o.itm { w.itm } else { 0.0 },
            itc: if o.itc { w.itc } else { 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 1)", self.warmup_frac));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if (self.objectives.itm || self.objectives.itc) && self.batch_size < 2 {
            return bad("batch_size must be at least 2 with ITM or ITC enabled".into());
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        if self.tau <= 0.0 {
            return bad(format!("tau {} must be positive", self.tau));
        }
        for (name, x) in [
            ("peak_lr_backbone", self.peak_lr_backbone),
            ("peak_lr_heads", self.peak_lr_heads),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        for (name, x) in [("mlm", self.loss_weights.mlm), ("itm", self.loss_weights.itm), ("itc", self.loss_weights.itc)] {
            if !(x >= 0.0 && x.is_finite()) {
                return bad(format!("loss weight {name} must be non-negative"));
            }
        }
        self.model.validate()
    }
}
