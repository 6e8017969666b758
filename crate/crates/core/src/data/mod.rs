//! Procedural image-caption data: scene rendering, caption templates, the
//! on-disk dataset layout, and batching.
//!
//! A dataset directory holds `dataset.json`, `vocab.txt`, and one directory
//! per split with `manifest.jsonl` and an `images/` folder of `.ptimg`
//! files.

mod batch;
mod dataset;
mod scene;

pub use batch::{batches_per_epoch, epoch_order, Batch, BatchIterator, BatchMode, Batcher};
pub use dataset::{
    build_dataset, decode_image, load_vocab, max_sentence_tokens, read_image, read_manifest, sample_sentence,
    split_sizes, write_image, write_manifest, DatasetInfo, Record, Split, IMAGE_MAGIC, INFO_FILE, MANIFEST_FILE,
    SPLIT_NAMES, VOCAB_FILE,
};
pub use scene::{
    all_sentences, caption, decode_labels, generate_pair, num_templates, render, sentence, Background, Color,
    GeneratedPair, Labels, Quadrant, SceneSpec, Shape, CHANNELS, IMAGE_SIZE, NUM_CLASSES, QUESTION,
};
