use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{all_sentences, generate_pair, Labels, QUESTION};
use crate::embeddings::{build_vocab, Image, Vocabulary, MIN_TEXT_TOKENS};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 8] = b"PTIMG001";
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const INFO_FILE: &str = "dataset.json";

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(20 + img.data.len() * 4);
    bytes.extend_from_slice(IMAGE_MAGIC);
    for d in [img.height, img.width, img.channels] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in &img.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Truncated(m) => Error::Truncated(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 8 || &bytes[..8] != IMAGE_MAGIC {
        return Err(Error::Format("bad image magic".into()));
    }
    if bytes.len() < 20 {
        return Err(Error::Truncated("image header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h * w * c;
    if bytes.len() != 20 + 4 * n {
        return Err(Error::Truncated(format!(
            "image declares {h}x{w}x{c} but carries {} bytes of pixels",
            bytes.len() - 20
        )));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Image::new(h, w, c, data)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    /// Relative to the split directory.
    pub image: String,
    pub text: String,
    pub labels: Labels,
}

/// Summary written next to the splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub n: usize,
    pub rho: f64,
    pub seed: u64,
    pub fractions: Vec<f64>,
    pub splits: Vec<(String, usize)>,
    pub vocab_size: usize,
}

/// Record counts per split: cumulative fractions rounded to the nearest
/// record.
pub fn split_sizes(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    if fractions.is_empty() || fractions.len() > SPLIT_NAMES.len() {
        return Err(Error::invalid(format!(
            "expected 1 to {} split fractions, got {}",
            SPLIT_NAMES.len(),
            fractions.len()
        )));
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::invalid("split fractions must lie in [0, 1]"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {total}, expected 1")));
    }
    let mut sizes = Vec::with_capacity(fractions.len());
    let (mut acc, mut prev) = (0.0, 0);
    for (i, f) in fractions.iter().enumerate() {
        acc += f;
        let end = if i + 1 == fractions.len() { n } else { (acc * n as f64).round() as usize };
        sizes.push(end - prev);
        prev = end;
    }
    Ok(sizes)
}

/// Generates `n` pairs and writes them as `train`/`val`/`test` splits
/// (as many as `fractions` has entries) under `out_dir`, plus a vocabulary
/// built from the training captions.
pub fn build_dataset(
    n: usize,
    rho: f64,
    seed: u64,
    out_dir: &Path,
    fractions: &[f64],
    max_vocab: usize,
) -> Result<DatasetInfo> {
    if n == 0 {
        return Err(Error::invalid("build_dataset: n must be positive"));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("correlation {rho} outside [0, 1]")));
    }
    let sizes = split_sizes(n, fractions)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut index = 0;
    let mut splits = Vec::new();
    let mut train_texts = Vec::new();
    for (name, &size) in SPLIT_NAMES.iter().zip(&sizes) {
        let dir = out_dir.join(name);
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut records = Vec::with_capacity(size);
        for _ in 0..size {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let pair = generate_pair(&mut rng, rho);
            let id = format!("{index:06}");
            let rel = format!("images/{id}.ptimg");
            write_image(&dir.join(&rel), &pair.image)?;
            if pair.text.split_whitespace().count() < MIN_TEXT_TOKENS {
                return Err(Error::invalid(format!("caption of record {id} is too short")));
            }
            if *name == "train" {
                train_texts.push(pair.text.clone());
            }
            records.push(Record {
                id,
                image: rel,
                text: pair.text,
                labels: pair.labels,
            });
            index += 1;
        }
        write_manifest(&dir.join(MANIFEST_FILE), &records)?;
        splits.push((name.to_string(), size));
    }
    let corpus = train_texts.iter().map(String::as_str).chain(std::iter::once(QUESTION));
    let vocab = build_vocab(corpus, max_vocab)?;
    vocab.save(&out_dir.join(VOCAB_FILE))?;
    let info = DatasetInfo {
        n,
        rho,
        seed,
        fractions: fractions.to_vec(),
        splits,
        vocab_size: vocab.len(),
    };
    let path = out_dir.join(INFO_FILE);
    fs::write(&path, serde_json::to_string_pretty(&info)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(info)
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

/// A split held in memory.
#[derive(Clone, Debug)]
pub struct Split {
    pub name: String,
    pub dir: PathBuf,
    pub records: Vec<Record>,
    pub images: Vec<Image>,
}

impl Split {
    pub fn load(dataset_dir: &Path, name: &str) -> Result<Self> {
        let dir = dataset_dir.join(name);
        let records = read_manifest(&dir.join(MANIFEST_FILE))?;
        let images = records
            .iter()
            .map(|r| read_image(&dir.join(&r.image)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.into(),
            dir,
            records,
            images,
        })
    }

    pub fn from_parts(name: &str, records: Vec<Record>, images: Vec<Image>) -> Result<Self> {
        if records.len() != images.len() {
            return Err(Error::invalid("split needs one image per record"));
        }
        Ok(Self {
            name: name.into(),
            dir: PathBuf::new(),
            records,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The first `⌈fraction · len⌉` records (at least one).
    pub fn fraction(&self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("data fraction {fraction} outside (0, 1]")));
        }
        let n = ((self.len() as f64 * fraction).ceil() as usize).clamp(1, self.len());
        Ok(Self {
            name: self.name.clone(),
            dir: self.dir.clone(),
            records: self.records[..n].to_vec(),
            images: self.images[..n].to_vec(),
        })
    }

    /// Records `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            dir: self.dir.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }
}

pub fn load_vocab(dataset_dir: &Path) -> Result<Vocabulary> {
    Vocabulary::load(&dataset_dir.join(VOCAB_FILE))
}

/// Longest template sentence in tokens.
pub fn max_sentence_tokens() -> usize {
    all_sentences().map(|s| s.split_whitespace().count()).max().unwrap_or(0)
}

/// A uniformly chosen sentence of `text`, re-terminated with ` .`.
pub fn sample_sentence(text: &str, rng: &mut impl Rng) -> Result<String> {
    let sentences: Vec<&str> = text.split('.').map(str::trim).filter(|s| !s.is_empty()).collect();
    if sentences.is_empty() {
        return Err(Error::invalid("sample_sentence: text has no sentences"));
    }
    let pick = if sentences.len() == 1 { 0 } else { rng.random_range(0..sentences.len()) };
    Ok(format!("{} .", sentences[pick]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{decode_labels, num_templates};

    #[test]
    fn split_size_examples() {
        assert_eq!(split_sizes(100, &[0.8, 0.1, 0.1]).unwrap(), vec![80, 10, 10]);
        assert_eq!(split_sizes(7, &[1.0]).unwrap(), vec![7]);
        assert!(split_sizes(100, &[0.5, 0.2]).is_err());
        assert!(split_sizes(100, &[0.5, 0.2, 0.2, 0.1]).is_err());
    }

    #[test]
    fn dataset_roundtrip_and_replay() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let info = build_dataset(100, 1.0, 9, a.path(), &[0.8, 0.1, 0.1], 200).unwrap();
        build_dataset(100, 1.0, 9, b.path(), &[0.8, 0.1, 0.1], 200).unwrap();
        assert_eq!(info.splits.iter().map(|s| s.1).collect::<Vec<_>>(), vec![80, 10, 10]);
        for name in SPLIT_NAMES {
            let m = |d: &Path| fs::read(d.join(name).join(MANIFEST_FILE)).unwrap();
            assert_eq!(m(a.path()), m(b.path()));
        }
        let mut ids = std::collections::HashSet::new();
        for name in SPLIT_NAMES {
            let split = Split::load(a.path(), name).unwrap();
            for (r, img) in split.records.iter().zip(&split.images) {
                assert!(ids.insert(r.id.clone()), "duplicate id {}", r.id);
                assert!(r.text.split_whitespace().count() >= MIN_TEXT_TOKENS);
                assert_eq!(decode_labels(img), Some(r.labels));
            }
        }
        let vocab = load_vocab(a.path()).unwrap();
        assert!(vocab.id("what").is_some() && vocab.id("?").is_some());
    }

    #[test]
    fn image_format_errors() {
        let img = Image::new(2, 1, 3, vec![0.5; 6]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ptimg");
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
        let mut bytes = fs::read(&path).unwrap();
        assert!(matches!(decode_image(&bytes[..bytes.len() - 4]), Err(Error::Truncated(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_image(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn sentence_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_sentence("a red circle .", &mut rng).unwrap(), "a red circle .");
        let text = "one a . two b . three c .";
        let pick = |seed| sample_sentence(text, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(pick(5), pick(5));
        let seen: std::collections::HashSet<String> = (0..50).map(pick).collect();
        assert_eq!(seen.len(), 3);
        assert!(sample_sentence("", &mut rng).is_err());
        assert!(sample_sentence(" . . ", &mut rng).is_err());
    }

    #[test]
    fn template_vocabulary_is_small() {
        let corpus: Vec<String> = all_sentences().collect();
        let vocab = build_vocab(corpus.iter().map(String::as_str).chain([QUESTION]), 1000).unwrap();
        assert!((110..=130).contains(&vocab.len()), "{} words over {} templates", vocab.len(), num_templates());
        assert!(max_sentence_tokens() <= 16);
    }
}
