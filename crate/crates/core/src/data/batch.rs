use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{sample_sentence, Split};
use super::scene::Labels;
use crate::embeddings::{patchify, tokenize, PatchGrid, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled; a final short batch is dropped.
    Train,
    /// In manifest order; a final short batch is kept.
    Eval,
}

/// Record order for `epoch`: a shuffle seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn batches_per_epoch(n: usize, batch_size: usize, mode: BatchMode) -> usize {
    match mode {
        BatchMode::Train => n / batch_size,
        BatchMode::Eval => n.div_ceil(batch_size),
    }
}

/// Model-ready inputs for a group of records.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub grids: Vec<PatchGrid>,
    pub tokens: Vec<TokenSequence>,
    /// The sentence each token sequence was built from.
    pub sentences: Vec<String>,
    pub labels: Vec<Labels>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Batch settings shared by training and evaluation.
#[derive(Clone, Debug)]
pub struct Batcher<'a> {
    pub vocab: &'a Vocabulary,
    pub patch_size: usize,
    /// Content-token budget, excluding `[CLS]` and `[SEP]`.
    pub max_len: usize,
}

impl<'a> Batcher<'a> {
    pub fn for_model(vocab: &'a Vocabulary, config: &ModelConfig) -> Self {
        Self {
            vocab,
            patch_size: config.patch_size,
            max_len: config.max_text_len,
        }
    }

    /// Samples one sentence per record with `rng`, tokenizes, patchifies.
    pub fn make(&self, split: &Split, idx: &[usize], rng: &mut impl Rng) -> Result<Batch> {
        let mut sentences = Vec::with_capacity(idx.len());
        for &i in idx {
            sentences.push(sample_sentence(&split.records[i].text, rng)?);
        }
        self.make_with_text(split, idx, sentences)
    }

    /// Same as [`Batcher::make`] with given texts.
    pub fn make_with_text(&self, split: &Split, idx: &[usize], sentences: Vec<String>) -> Result<Batch> {
        let tokens = sentences
            .iter()
            .map(|s| tokenize(s, self.vocab, self.max_len))
            .collect::<Result<Vec<_>>>()?;
        let grids = idx
            .iter()
            .map(|&i| patchify(&split.images[i], self.patch_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            indices: idx.to_vec(),
            grids,
            tokens,
            sentences,
            labels: idx.iter().map(|&i| split.records[i].labels).collect(),
        })
    }
}

/// Iterates the batches of one epoch.
pub struct BatchIterator<'a, R> {
    split: &'a Split,
    batcher: Batcher<'a>,
    order: Vec<usize>,
    batch_size: usize,
    count: usize,
    next: usize,
    rng: &'a mut R,
}

impl<'a, R: Rng> BatchIterator<'a, R> {
    pub fn new(
        split: &'a Split,
        batcher: Batcher<'a>,
        batch_size: usize,
        mode: BatchMode,
        seed: u64,
        epoch: u64,
        rng: &'a mut R,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if split.is_empty() {
            return Err(Error::invalid(format!("split `{}` is empty", split.name)));
        }
        let order = match mode {
            BatchMode::Train => epoch_order(split.len(), seed, epoch),
            BatchMode::Eval => (0..split.len()).collect(),
        };
        Ok(Self {
            split,
            batcher,
            count: batches_per_epoch(split.len(), batch_size, mode),
            order,
            batch_size,
            next: 0,
            rng,
        })
    }
}

impl<R: Rng> Iterator for BatchIterator<'_, R> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let start = self.next * self.batch_size;
        let end = (start + self.batch_size).min(self.order.len());
        self.next += 1;
        Some(self.batcher.make(self.split, &self.order[start..end], self.rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::Record;
    use crate::data::scene::generate_pair;
    use crate::embeddings::build_vocab;

    fn split(n: usize) -> Split {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs: Vec<_> = (0..n).map(|_| generate_pair(&mut rng, 1.0)).collect();
        let records = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| Record {
                id: i.to_string(),
                image: String::new(),
                text: p.text.clone(),
                labels: p.labels,
            })
            .collect();
        Split::from_parts("train", records, pairs.into_iter().map(|p| p.image).collect()).unwrap()
    }

    #[test]
    fn batch_counts_and_replay() {
        let s = split(100);
        let vocab = build_vocab(s.records.iter().map(|r| r.text.as_str()), 200).unwrap();
        let batcher = Batcher {
            vocab: &vocab,
            patch_size: 8,
            max_len: 16,
        };
        let run = |mode, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            BatchIterator::new(&s, batcher.clone(), 32, mode, seed, 0, &mut rng)
                .unwrap()
                .map(|b| b.unwrap())
                .map(|b| (b.indices, b.sentences))
                .collect::<Vec<_>>()
        };
        let train = run(BatchMode::Train, 7);
        assert_eq!(train.len(), 3);
        assert!(train.iter().all(|b| b.0.len() == 32));
        assert_eq!(train, run(BatchMode::Train, 7));
        assert_ne!(train, run(BatchMode::Train, 8));
        let eval = run(BatchMode::Eval, 7);
        assert_eq!(eval.iter().map(|b| b.0.len()).collect::<Vec<_>>(), vec![32, 32, 32, 4]);
        assert_ne!(epoch_order(100, 7, 0), epoch_order(100, 7, 1));

        let empty = Split::from_parts("x", vec![], vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(BatchIterator::new(&empty, batcher.clone(), 4, BatchMode::Eval, 0, 0, &mut rng).is_err());
    }
}
