use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Batcher, Split};
use crate::embeddings::Vocabulary;
use crate::error::Result;
use crate::model::Model;
use crate::numerics::{Graph, Real};
use crate::objectives::Objectives;
use crate::training::{forward_losses, TrainConfig};

/// Pretraining losses measured on unseen pairs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeldOutReport {
    pub n: usize,
    /// Mean cross-entropy over all masked positions.
    pub mlm_loss: f64,
    pub mlm_targets: usize,
    pub itm_accuracy: f64,
    pub itm_pairs: usize,
}

/// MLM loss and ITM accuracy of `model` over `split`, in order and in
/// batches of the configured size. Masks, sentences and negatives come
/// from `seed`.
pub fn heldout_metrics<T: Real>(
    model: &Model<T>,
    config: &TrainConfig,
    split: &Split,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<HeldOutReport> {
    let mut cfg = config.clone();
    cfg.objectives = Objectives {
        mlm: true,
        itm: true,
        itc: false,
    };
    let mut model = model.clone();
    let batcher = Batcher::for_model(vocab, &model.config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..split.len()).collect();
    let (mut mlm_sum, mut mlm_n, mut itm_hits, mut itm_n) = (0.0, 0, 0, 0);
    for chunk in idx.chunks(cfg.batch_size.max(2)) {
        if chunk.len() < 2 {
            continue;
        }
        let batch = batcher.make(split, chunk, &mut rng)?;
        let mut g = Graph::new();
        let out = forward_losses(&mut model, &mut g, &batch, &cfg, &mut rng)?;
        if let Some(m) = &out.mlm {
            if !m.empty {
                mlm_sum += out.bundle.mlm.unwrap_or(0.0) * m.targets.len() as f64;
                mlm_n += m.targets.len();
            }
        }
        if let Some((logits, labels)) = &out.itm {
            let l = g.value(*logits);
            for (r, &label) in labels.iter().enumerate() {
                let row = l.row(r);
                itm_hits += usize::from((row[1] > row[0]) == label);
            }
            itm_n += labels.len();
        }
    }
    Ok(HeldOutReport {
        n: split.len(),
        mlm_loss: if mlm_n > 0 { mlm_sum / mlm_n as f64 } else { f64::NAN },
        mlm_targets: mlm_n,
        itm_accuracy: if itm_n > 0 { itm_hits as f64 / itm_n as f64 } else { f64::NAN },
        itm_pairs: itm_n,
    })
}
