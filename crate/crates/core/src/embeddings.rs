//! Tokenization, patch extraction, and the per-modality embedding sequences
//! fed to the backbone.
//!
//! A text becomes `[CLS] t1 .. tn [SEP]`, looked up in a token table and
//! summed with learned position embeddings. An image is cut into `P×P`
//! patches in row-major order, each flattened channel-last and linearly
//! projected; a learned `[CLS]` vector is prepended and position embeddings
//! are added.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const MASK: u32 = 2;
pub const PAD: u32 = 3;
pub const UNK: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

/// Minimum number of whitespace tokens in an accepted text.
pub const MIN_TEXT_TOKENS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::invalid(
                "vocabulary must start with [CLS] [SEP] [MASK] [PAD] [UNK]",
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(s.lines().map(str::to_owned).collect())
    }
}

/// Whitespace vocabulary ranked by frequency, ties broken lexicographically,
/// truncated to `max_size` entries including the five specials.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocabulary> {
    if max_size < SPECIAL_TOKENS.len() {
        return Err(Error::invalid(format!(
            "vocabulary size {max_size} cannot hold the {} special tokens",
            SPECIAL_TOKENS.len()
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for tok in text.split_whitespace() {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::invalid("build_vocab: empty corpus"));
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !SPECIAL_TOKENS.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t.to_owned()))
        .take(max_size)
        .collect();
    Vocabulary::from_tokens(tokens)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub maskable: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of content tokens between `[CLS]` and `[SEP]`.
    pub fn content_len(&self) -> usize {
        self.ids.len().saturating_sub(2)
    }
}

/// `[CLS] ids.. [SEP]`. Texts with more than `max_len` tokens keep their
/// first `max_len - 1` tokens.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() < MIN_TEXT_TOKENS {
        return Err(Error::invalid(format!(
            "text has {} tokens, at least {MIN_TEXT_TOKENS} required: {text:?}",
            words.len()
        )));
    }
    if max_len < 2 {
        return Err(Error::invalid("tokenize: max_len must be at least 2"));
    }
    let keep = if words.len() > max_len { max_len - 1 } else { words.len() };
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS);
    ids.extend(words[..keep].iter().map(|w| vocab.id(w).unwrap_or(UNK)));
    ids.push(SEP);
    let mut maskable = vec![true; ids.len()];
    maskable[0] = false;
    *maskable.last_mut().expect("non-empty") = false;
    Ok(TokenSequence { ids, maskable })
}

/// Content tokens of a sequence, specials stripped.
pub fn detokenize(tokens: &TokenSequence, vocab: &Vocabulary) -> Vec<String> {
    tokens
        .ids
        .iter()
        .filter(|&&id| !matches!(id, CLS | SEP | PAD))
        .map(|&id| vocab.token(id).unwrap_or("[UNK]").to_owned())
        .collect()
}

/// Image stored channel-last, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let at = (y * self.width + x) * self.channels;
        &mut self.data[at..at + self.channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `grid_h * grid_w` rows of `patch_len` values.
    pub patches: Vec<f32>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_len: usize,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches[i * self.patch_len..(i + 1) * self.patch_len]
    }
}

/// Cuts an image into non-overlapping `patch×patch` tiles, top-left to
/// bottom-right, each flattened channel-last.
pub fn patchify(image: &Image, patch: usize) -> Result<PatchGrid> {
    let (h, w, c) = (image.height, image.width, image.channels);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patchify",
            format!("patch size {patch} does not divide image {h}x{w} (H={h}, W={w}, P={patch})"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let patch_len = patch * patch * c;
    let mut patches = Vec::with_capacity(gh * gw * patch_len);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = (py * patch + y) * w + px * patch;
                patches.extend_from_slice(&image.data[row * c..(row + patch) * c]);
            }
        }
    }
    Ok(PatchGrid {
        patches,
        grid_h: gh,
        grid_w: gw,
        patch_len,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Cls,
    Real,
    Sep,
    Prompt,
    Pad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Language,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Language => "language",
        }
    }
}

/// A batch of embedding sequences of one modality, padded to a common
/// length and stored as `batch * len` rows of width `D` on a graph.
#[derive(Clone, Debug)]
pub struct EmbeddingSequence {
    pub rows: Var,
    pub batch: usize,
    pub len: usize,
    /// Per sample, `len` labels; padding positions are [`Provenance::Pad`].
    pub provenance: Vec<Vec<Provenance>>,
    pub modality: Modality,
}

impl EmbeddingSequence {
    /// Unpadded length of sample `b`.
    pub fn length(&self, b: usize) -> usize {
        self.provenance[b]
            .iter()
            .filter(|&&p| p != Provenance::Pad)
            .count()
    }

    /// `true` at padded positions, for use as an attention key mask.
    pub fn key_mask(&self) -> Option<Vec<bool>> {
        let mask: Vec<bool> = self
            .provenance
            .iter()
            .flatten()
            .map(|&p| p == Provenance::Pad)
            .collect();
        mask.iter().any(|&m| m).then_some(mask)
    }

    /// Same layout with new row values (e.g. after an encoder stack).
    pub fn with_rows(&self, rows: Var) -> Self {
        Self {
            rows,
            ..self.clone()
        }
    }

    /// Row indices of the samples `idx`, in order, for use with
    /// [`Graph::gather_rows`].
    pub fn sample_rows(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter()
            .flat_map(|&b| b * self.len..(b + 1) * self.len)
            .collect()
    }

    /// Sub-batch of the samples `idx` (repeats allowed).
    pub fn select<T: Real>(&self, g: &mut Graph<T>, idx: &[usize]) -> Result<Self> {
        let rows = g.gather_rows(self.rows, &self.sample_rows(idx))?;
        Ok(Self {
            rows,
            batch: idx.len(),
            len: self.len,
            provenance: idx.iter().map(|&b| self.provenance[b].clone()).collect(),
            modality: self.modality,
        })
    }

    /// Values of sample `b` (including padding rows).
    pub fn sample_values<'g, T: Real>(&self, g: &'g Graph<T>, b: usize) -> &'g [T] {
        let d = g.value(self.rows).cols();
        &g.value(self.rows).data()[b * self.len * d..(b + 1) * self.len * d]
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmbeddingConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Content tokens kept by [`tokenize`].
    pub max_text_len: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl EmbeddingConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Rows of the text position table.
    pub fn text_positions(&self) -> usize {
        self.max_text_len + 2
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub config: EmbeddingConfig,
    pub token: ParamId,
    pub text_pos: ParamId,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub vision_cls: ParamId,
    pub vision_pos: ParamId,
}

impl EmbeddingParams {
    pub fn new<T: Real>(
        config: EmbeddingConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.image_size % config.patch_size != 0 {
            return Err(Error::invalid(format!(
                "patch size {} does not divide image size {}",
                config.patch_size, config.image_size
            )));
        }
        let d = config.d_model;
        let bb = ParamGroup::Backbone;
        let w = ParamKind::Weight;
        let token = store.normal("embed.text.token", &[config.vocab_size, d], 0.02, bb, w, rng)?;
        let text_pos = store.normal("embed.text.position", &[config.text_positions(), d], 0.02, bb, w, rng)?;
        let patch_w = store.normal("embed.vision.patch.weight", &[config.patch_len(), d], 0.02, bb, w, rng)?;
        let patch_b = store.zeros("embed.vision.patch.bias", &[d], bb)?;
        let vision_cls = store.normal("embed.vision.cls", &[d], 0.02, bb, w, rng)?;
        let vision_pos = store.normal("embed.vision.position", &[config.num_patches() + 1, d], 0.02, bb, w, rng)?;
        let params = Self {
            config,
            token,
            text_pos,
            patch_w,
            patch_b,
            vision_cls,
            vision_pos,
        };
        for table in [params.text_pos, params.vision_pos] {
            if !rows_distinct(store.value(table)) {
                return Err(Error::invalid("position embedding rows are not distinct"));
            }
        }
        Ok(params)
    }
}

/// Whether no two rows of a matrix are equal.
pub fn rows_distinct<T: Real>(t: &Tensor<T>) -> bool {
    let rows: Vec<&[T]> = (0..t.rows()).map(|r| t.row(r)).collect();
    (0..rows.len()).all(|i| (i + 1..rows.len()).all(|j| rows[i] != rows[j]))
}

/// Token lookup plus position embeddings for a batch of texts, padded with
/// `[PAD]` to the longest sequence.
pub fn embed_text<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &EmbeddingParams,
    texts: &[TokenSequence],
) -> Result<EmbeddingSequence> {
    if texts.is_empty() {
        return Err(Error::invalid("embed_text: empty batch"));
    }
    let cfg = &params.config;
    let len = texts.iter().map(TokenSequence::len).max().unwrap_or(0);
    if len > cfg.text_positions() {
        return Err(Error::invalid(format!(
            "embed_text: sequence length {len} exceeds {}",
            cfg.text_positions()
        )));
    }
    let mut ids = Vec::with_capacity(texts.len() * len);
    let mut provenance = Vec::with_capacity(texts.len());
    for t in texts {
        if let Some(&bad) = t.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "embed_text: token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        ids.extend(t.ids.iter().map(|&i| i as usize));
        ids.extend(std::iter::repeat_n(PAD as usize, len - t.len()));
        let mut p = vec![Provenance::Real; len];
        p[0] = Provenance::Cls;
        p[t.len() - 1] = Provenance::Sep;
        p[t.len()..].fill(Provenance::Pad);
        provenance.push(p);
    }
    let positions: Vec<usize> = (0..texts.len()).flat_map(|_| 0..len).collect();
    let table = store.bind(g, params.token);
    let pos_table = store.bind(g, params.text_pos);
    let tok = g.gather_rows(table, &ids)?;
    let pos = g.gather_rows(pos_table, &positions)?;
    let rows = g.add(tok, pos)?;
    Ok(EmbeddingSequence {
        rows,
        batch: texts.len(),
        len,
        provenance,
        modality: Modality::Language,
    })
}

/// Patch projection, `[CLS]` prepend, and position embeddings for a batch of
/// patch grids.
pub fn embed_image<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &EmbeddingParams,
    grids: &[PatchGrid],
) -> Result<EmbeddingSequence> {
    if grids.is_empty() {
        return Err(Error::invalid("embed_image: empty batch"));
    }
    let cfg = &params.config;
    let n = grids[0].num_patches();
    for grid in grids {
        if grid.patch_len != cfg.patch_len() {
            return Err(Error::shape(
                "embed_image",
                format!(
                    "patch length {} does not match projection input {}",
                    grid.patch_len,
                    cfg.patch_len()
                ),
            ));
        }
        if grid.num_patches() != cfg.num_patches() {
            return Err(Error::shape(
                "embed_image",
                format!("{} patches, expected {}", grid.num_patches(), cfg.num_patches()),
            ));
        }
    }
    let b = grids.len();
    let mut flat = Vec::with_capacity(b * n * cfg.patch_len());
    for grid in grids {
        flat.extend(grid.patches.iter().map(|&x| T::from_f32(x).expect("f32 converts")));
    }
    let patches = g.constant(Tensor::new(flat, &[b * n, cfg.patch_len()])?);
    let w = store.bind(g, params.patch_w);
    let bias = store.bind(g, params.patch_b);
    let proj = g.linear(patches, w, bias)?;
    let cls = store.bind(g, params.vision_cls);
    let cls = g.reshape(cls, &[1, cfg.d_model])?;
    let stacked = g.concat_rows(&[cls, proj])?;
    let order: Vec<usize> = (0..b)
        .flat_map(|s| std::iter::once(0).chain((0..n).map(move |p| 1 + s * n + p)))
        .collect();
    let tokens = g.gather_rows(stacked, &order)?;
    let pos_table = store.bind(g, params.vision_pos);
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..n + 1).collect();
    let pos = g.gather_rows(pos_table, &positions)?;
    let rows = g.add(tokens, pos)?;
    let mut prov = vec![Provenance::Real; n + 1];
    prov[0] = Provenance::Cls;
    Ok(EmbeddingSequence {
        rows,
        batch: b,
        len: n + 1,
        provenance: vec![prov; b],
        modality: Modality::Vision,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn vocab() -> Vocabulary {
        build_vocab(["red circle here", "red square there"], 100).unwrap()
    }

    fn desk_config(vocab_size: usize) -> EmbeddingConfig {
        EmbeddingConfig {
            vocab_size,
            d_model: 8,
            max_text_len: 6,
            image_size: 32,
            channels: 3,
            patch_size: 8,
        }
    }

    #[test]
    fn vocab_is_frequency_ranked() {
        let v = build_vocab(["red circle red"], 100).unwrap();
        assert_eq!(&v.tokens()[..5], &SPECIAL_TOKENS);
        assert!(v.id("red").unwrap() < v.id("circle").unwrap());
        let v = build_vocab(["b a c a b a"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(5), Some("a"));
        // Ties by lexicographic order.
        let v = build_vocab(["zeta alpha"], 10).unwrap();
        assert_eq!(v.id("alpha"), Some(5));
        assert!(build_vocab([""], 10).is_err());
        assert!(build_vocab(Vec::<&str>::new(), 10).is_err());
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[CLS]\n[SEP]\n[MASK]\n[PAD]\n[UNK]\n"));
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        let t = tokenize("red circle here", &v, 16).unwrap();
        let id = |w| v.id(w).unwrap();
        assert_eq!(t.ids, vec![CLS, id("red"), id("circle"), id("here"), SEP]);
        assert_eq!(t.maskable, vec![false, true, true, true, false]);
        let t = tokenize("red banana here", &v, 16).unwrap();
        assert_eq!(t.ids[2], UNK);
        assert!(tokenize("hi there", &v, 16).is_err());
        // Over-long: keep max_len - 1 content tokens, then [SEP].
        let t = tokenize("red red red red red", &v, 4).unwrap();
        assert_eq!(t.ids.len(), 5);
        assert_eq!(*t.ids.last().unwrap(), SEP);
        assert_eq!(t.content_len(), 3);
    }

    #[test]
    fn detokenize_strips_specials() {
        let v = vocab();
        let t = tokenize("red circle there", &v, 16).unwrap();
        assert_eq!(detokenize(&t, &v), vec!["red", "circle", "there"]);
    }

    #[test]
    fn patchify_examples() {
        let img = Image::zeros(32, 32, 3);
        let grid = patchify(&img, 8).unwrap();
        assert_eq!((grid.num_patches(), grid.patch_len), (16, 192));
        let big = Image::zeros(288, 288, 3);
        assert_eq!(patchify(&big, 16).unwrap().num_patches(), 324);
        let bad = Image::zeros(30, 32, 3);
        let msg = patchify(&bad, 8).unwrap_err().to_string();
        assert!(msg.contains("H=30") && msg.contains("W=32") && msg.contains("P=8"), "{msg}");
    }

    #[test]
    fn patchify_order_is_row_major_channel_last() {
        let mut img = Image::zeros(4, 4, 2);
        for y in 0..4 {
            for x in 0..4 {
                let p = img.pixel_mut(y, x);
                p[0] = (y * 4 + x) as f32;
                p[1] = -((y * 4 + x) as f32);
            }
        }
        let grid = patchify(&img, 2).unwrap();
        // Patch 1 is the top-right tile: pixels (0,2),(0,3),(1,2),(1,3).
        assert_eq!(grid.patch(1), &[2., -2., 3., -3., 6., -6., 7., -7.]);
    }

    #[test]
    fn embedding_lengths_and_additivity() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let params = EmbeddingParams::new(desk_config(v.len()), &mut store, &mut rng).unwrap();
        *store.value_mut(params.token) = Tensor::zeros(&[v.len(), 8]);
        let mut g = Graph::new();
        let t = tokenize("red circle here", &v, 6).unwrap();
        let seq = embed_text(&mut g, &store, &params, std::slice::from_ref(&t)).unwrap();
        assert_eq!(seq.len, 5);
        let pos = store.value(params.text_pos);
        assert_eq!(g.value(seq.rows).data(), &pos.data()[..5 * 8]);
        assert_eq!(seq.provenance[0][0], Provenance::Cls);
        assert_eq!(seq.provenance[0][4], Provenance::Sep);

        let bad = TokenSequence {
            ids: vec![CLS, v.len() as u32, SEP],
            maskable: vec![false, true, false],
        };
        assert!(embed_text(&mut g, &store, &params, &[bad]).is_err());
    }

    #[test]
    fn image_embedding_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let params = EmbeddingParams::new(desk_config(10), &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let grid = patchify(&Image::zeros(32, 32, 3), 8).unwrap();
        let seq = embed_image(&mut g, &store, &params, &[grid.clone(), grid]).unwrap();
        assert_eq!((seq.batch, seq.len), (2, 17));
        let out = g.value(seq.rows);
        let pos = store.value(params.vision_pos);
        let cls = store.value(params.vision_cls);
        for r in 1..17 {
            assert_eq!(out.row(17 + r), pos.row(r));
        }
        for j in 0..8 {
            assert_eq!(out.row(0)[j], pos.row(0)[j] + cls.data()[j]);
        }
        assert_eq!(seq.provenance[1].iter().filter(|&&p| p == Provenance::Cls).count(), 1);
        assert!(!seq.provenance[1].contains(&Provenance::Sep));

        let wrong = patchify(&Image::zeros(28, 28, 3), 7).unwrap();
        assert_eq!(wrong.patch_len, 147);
        assert!(embed_image(&mut g, &store, &params, &[wrong]).is_err());
    }

    #[test]
    fn swapping_distinct_patches_changes_the_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let params = EmbeddingParams::new(desk_config(10), &mut store, &mut rng).unwrap();
        assert!(rows_distinct(store.value(params.vision_pos)));
        let mut img = Image::zeros(32, 32, 3);
        img.pixel_mut(0, 0)[0] = 1.0;
        let mut swapped = Image::zeros(32, 32, 3);
        swapped.pixel_mut(0, 8)[0] = 1.0;
        let mut g = Graph::new();
        let a = embed_image(&mut g, &store, &params, &[patchify(&img, 8).unwrap()]).unwrap();
        let b = embed_image(&mut g, &store, &params, &[patchify(&swapped, 8).unwrap()]).unwrap();
        assert_ne!(g.value(a.rows), g.value(b.rows));
    }
}
