use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::embeddings::{patchify, tokenize, PatchGrid, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Graph, Real, Tensor};
use crate::prompts::unify_input;

/// Items embedded per graph.
pub(crate) const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    I2t,
    T2i,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    ZeroShot,
    FineTuned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub recall_at: BTreeMap<usize, f64>,
    #[serde(rename = "N")]
    pub n: usize,
    pub mode: RetrievalMode,
}

/// Rank of the true column `i` within `row`: the number of columns scoring
/// higher, plus equal-scoring columns with a lower index.
fn true_rank(row: &[f64], i: usize) -> usize {
    let s = row[i];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < i))
        .count()
}

fn check_scores(scores: &Tensor<f64>) -> Result<usize> {
    if scores.rank() != 2 || scores.rows() != scores.cols() || scores.rows() == 0 {
        return Err(Error::shape("recall_at_k", format!("scores must be square and non-empty, got {:?}", scores.shape())));
    }
    if scores.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("recall_at_k: scores must be finite"));
    }
    Ok(scores.rows())
}

/// Fraction of rows whose diagonal entry ranks within the top `k`, ties
/// going to the lower column index.
pub fn recall_at_k(scores: &Tensor<f64>, k: usize) -> Result<f64> {
    Ok(recall_curve(scores, &[k])?[&k])
}

/// [`recall_at_k`] for several cut-offs with one ranking pass.
pub fn recall_curve(scores: &Tensor<f64>, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = check_scores(scores)?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::invalid(format!("recall cut-off {k} outside 1..={n}")));
    }
    let ranks: Vec<usize> = (0..n).map(|i| true_rank(scores.row(i), i)).collect();
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64))
        .collect())
}

fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(out, &[c, r]).expect("sizes agree")
}

/// `a · bᵀ`.
pub(crate) fn similarity(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, m, d) = (a.rows(), b.rows(), a.cols());
    let mut out = vec![0.0; n * m];
    f64::gemm(n, d, m, a.data(), false, b.data(), true, &mut out, false);
    Tensor::new(out, &[n, m]).expect("sizes agree")
}

fn stack(parts: Vec<Vec<f64>>, cols: usize) -> Result<Tensor<f64>> {
    let data: Vec<f64> = parts.into_iter().flatten().collect();
    let rows = data.len() / cols.max(1);
    Tensor::new(data, &[rows, cols])
}

/// Contrastive embeddings of images presented alone, one row each.
pub fn itc_embed_images<T: Real>(model: &Model<T>, grids: &[PatchGrid]) -> Result<Tensor<f64>> {
    let mut bank = model.prompts.clone();
    let mut parts = Vec::new();
    for chunk in grids.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let v = model.embed_images(&mut g, chunk)?;
        let x = unify_input(&mut g, &model.store, &mut bank, &model.embeddings, Some(v), None)?;
        let z = model.itc_embed(&mut g, &x)?;
        parts.push(g.value(z).to_f64());
    }
    stack(parts, model.config.itc_dim)
}

/// Contrastive embeddings of texts presented alone, one row each.
pub fn itc_embed_texts<T: Real>(model: &Model<T>, texts: &[TokenSequence]) -> Result<Tensor<f64>> {
    let mut bank = model.prompts.clone();
    let mut parts = Vec::new();
    for chunk in texts.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let l = model.embed_texts(&mut g, chunk)?;
        let x = unify_input(&mut g, &model.store, &mut bank, &model.embeddings, None, Some(l))?;
        let z = model.itc_embed(&mut g, &x)?;
        parts.push(g.value(z).to_f64());
    }
    stack(parts, model.config.itc_dim)
}

/// Image-to-text and text-to-image reports for image `i` paired with
/// text `i`, from contrastive embeddings.
pub fn retrieval_reports(
    zv: &Tensor<f64>,
    zl: &Tensor<f64>,
    ks: &[usize],
    mode: RetrievalMode,
) -> Result<[RetrievalReport; 2]> {
    if zv.rows() != zl.rows() {
        return Err(Error::invalid(format!("{} images but {} texts", zv.rows(), zl.rows())));
    }
    let s = similarity(zv, zl);
    let n = zv.rows();
    Ok([
        RetrievalReport {
            direction: Direction::I2t,
            recall_at: recall_curve(&s, ks)?,
            n,
            mode,
        },
        RetrievalReport {
            direction: Direction::T2i,
            recall_at: recall_curve(&transpose(&s), ks)?,
            n,
            mode,
        },
    ])
}

/// Ranks all texts for every image and vice versa with the contrastive
/// pathway of `model`, without any fine-tuning.
pub fn zero_shot_retrieve<T: Real>(
    model: &Model<T>,
    images: &[PatchGrid],
    texts: &[TokenSequence],
    ks: &[usize],
) -> Result<[RetrievalReport; 2]> {
    if images.len() != texts.len() {
        return Err(Error::invalid(format!("{} images but {} texts", images.len(), texts.len())));
    }
    if images.is_empty() {
        return Err(Error::invalid("retrieval corpus is empty"));
    }
    let zv = itc_embed_images(model, images)?;
    let zl = itc_embed_texts(model, texts)?;
    retrieval_reports(&zv, &zl, ks, RetrievalMode::ZeroShot)
}

/// First sentence of a caption, terminated with ` .`.
pub fn first_sentence(text: &str) -> String {
    let s = text.split('.').map(str::trim).find(|s| !s.is_empty()).unwrap_or("");
    format!("{s} .")
}

/// The first `n` records of `split` as a retrieval corpus, each text being
/// the first sentence of its caption.
pub fn retrieval_corpus(
    split: &Split,
    vocab: &Vocabulary,
    config: &ModelConfig,
    n: usize,
) -> Result<(Vec<PatchGrid>, Vec<TokenSequence>)> {
    let n = n.min(split.len());
    let grids = split.images[..n]
        .iter()
        .map(|img| patchify(img, config.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let texts = split.records[..n]
        .iter()
        .map(|r| tokenize(&first_sentence(&r.text), vocab, config.max_text_len))
        .collect::<Result<Vec<_>>>()?;
    Ok((grids, texts))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn oracle(scores: &Tensor<f64>, k: usize) -> f64 {
        let n = scores.rows();
        let mut hits = 0;
        for i in 0..n {
            let row = scores.row(i);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            if order[..k].contains(&i) {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn recall_examples() {
        let eye = Tensor::<f64>::eye(5);
        assert_eq!(recall_at_k(&eye, 1).unwrap(), 1.0);
        let mut off = vec![0.0; 9];
        for i in 0..3 {
            off[i * 3 + (i + 1) % 3] = 1.0;
        }
        assert_eq!(recall_at_k(&Tensor::new(off, &[3, 3]).unwrap(), 1).unwrap(), 0.0);
        let flat = Tensor::new(vec![0.5; 64], &[8, 8]).unwrap();
        for k in 1..=8 {
            assert_eq!(recall_at_k(&flat, k).unwrap(), k as f64 / 8.0);
        }
        assert!(recall_at_k(&flat, 9).is_err());
        assert!(recall_at_k(&flat, 0).is_err());
    }

    #[test]
    fn recall_matches_the_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let n = rng.random_range(1..12);
            // Few distinct values so that ties are common.
            let data = (0..n * n).map(|_| rng.random_range(0..4) as f64).collect();
            let s = Tensor::new(data, &[n, n]).unwrap();
            let k = rng.random_range(1..=n);
            assert_eq!(recall_at_k(&s, k).unwrap(), oracle(&s, k));
        }
    }

    proptest! {
        #[test]
        fn recall_is_monotone_and_complete(n in 1usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::new((0..n * n).map(|_| rng.random::<f64>()).collect(), &[n, n]).unwrap();
            let ks: Vec<usize> = (1..=n).collect();
            let curve = recall_curve(&s, &ks).unwrap();
            let values: Vec<f64> = curve.values().copied().collect();
            prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(curve[&n], 1.0);
        }

        #[test]
        fn reports_are_invariant_to_joint_permutation(n in 2usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let zv = Tensor::new((0..n * 3).map(|_| rng.random::<f64>()).collect(), &[n, 3]).unwrap();
            let zl = Tensor::new((0..n * 3).map(|_| rng.random::<f64>()).collect(), &[n, 3]).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            let p = |t: &Tensor<f64>| {
                Tensor::new(perm.iter().flat_map(|&i| t.row(i).to_vec()).collect(), &[n, 3]).unwrap()
            };
            let a = retrieval_reports(&zv, &zl, &[1, n], RetrievalMode::ZeroShot).unwrap();
            let b = retrieval_reports(&p(&zv), &p(&zl), &[1, n], RetrievalMode::ZeroShot).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn duplicated_pairs_are_retrieved() {
        let zv = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0], &[4, 2]).unwrap();
        let [i2t, t2i] = retrieval_reports(&zv, &zv, &[1, 5, 10].map(|k: usize| k.min(4)), RetrievalMode::ZeroShot).unwrap();
        assert_eq!(i2t.recall_at[&1], 1.0);
        assert_eq!(t2i.recall_at[&1], 1.0);
        assert_eq!(i2t.direction, Direction::I2t);
    }

    #[test]
    fn first_sentence_of_a_caption() {
        assert_eq!(first_sentence("a red circle . a blue square ."), "a red circle .");
        assert_eq!(first_sentence("a red circle"), "a red circle .");
    }
}
