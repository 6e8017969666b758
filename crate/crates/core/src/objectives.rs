//! Pretraining objectives: masked language modeling (MLM), image-text
//! matching (ITM), and image-text contrast (ITC).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{apply_dense, BackboneOutput, INIT_STD};
use crate::embeddings::{Modality, Provenance, TokenSequence, MASK, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};

/// Maximum deviation from unit norm accepted by [`itc_loss`].
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mlm: f64,
    pub itm: f64,
    pub itc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mlm: 1.0,
            itm: 1.0,
            itc: 1.0,
        }
    }
}

/// Which objectives a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objectives {
    pub mlm: bool,
    pub itm: bool,
    pub itc: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Self {
            mlm: true,
            itm: true,
            itc: true,
        }
    }
}

impl Objectives {
    /// Short label such as `MLM+ITM`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.mlm, "MLM"), (self.itm, "ITM"), (self.itc, "ITC")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|&(_, n)| n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// A masked copy of one text with its prediction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmEntry {
    pub masked: TokenSequence,
    /// `(position, original id)` pairs in position order.
    pub targets: Vec<(usize, u32)>,
}

/// Selects each maskable position with probability `rate`; a selected
/// position becomes `[MASK]` (80%), a random non-special id (10%), or stays
/// as is (10%).
pub fn apply_mlm_mask(
    tokens: &TokenSequence,
    rate: f64,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<MlmEntry> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("mask rate {rate} outside [0, 1]")));
    }
    let first_regular = SPECIAL_TOKENS.len() as u32;
    if vocab_size as u32 <= first_regular {
        return Err(Error::invalid("vocabulary has no regular tokens"));
    }
    let mut masked = tokens.clone();
    let mut targets = Vec::new();
    for (pos, &maskable) in tokens.maskable.iter().enumerate() {
        if !maskable || !rng.random_bool(rate) {
            continue;
        }
        targets.push((pos, tokens.ids[pos]));
        let r: f64 = rng.random();
        if r < 0.8 {
            masked.ids[pos] = MASK;
        } else if r < 0.9 {
            masked.ids[pos] = rng.random_range(first_regular..vocab_size as u32);
        }
    }
    Ok(MlmEntry { masked, targets })
}

fn mlp<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    dims: [usize; 3],
    rng: &mut impl Rng,
) -> Result<[(ParamId, ParamId); 2]> {
    let head = ParamGroup::Head;
    let layer = |store: &mut ParamStore<T>, part: &str, i: usize, o: usize, rng: &mut _| -> Result<_> {
        let w = store.normal(&format!("{name}.{part}.weight"), &[i, o], INIT_STD, head, ParamKind::Weight, rng)?;
        let b = store.zeros(&format!("{name}.{part}.bias"), &[o], head)?;
        Ok((w, b))
    };
    Ok([
        layer(store, "hidden", dims[0], dims[1], rng)?,
        layer(store, "out", dims[1], dims[2], rng)?,
    ])
}

/// Two-layer perceptron `in → hidden → GELU → out`.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
}

impl MlpHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [hidden, out] = mlp(store, name, dims, rng)?;
        Ok(Self { hidden, out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = apply_dense(g, store, x, self.hidden)?;
        let h = g.gelu(h)?;
        apply_dense(g, store, h, self.out)
    }
}

/// Per-side projections to the contrastive space.
#[derive(Clone, Debug)]
pub struct ItcHead {
    pub vision: ParamId,
    pub language: ParamId,
}

impl ItcHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, d: usize, itc_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let head = ParamGroup::Head;
        let w = ParamKind::Weight;
        Ok(Self {
            vision: store.normal("heads.itc.vision.weight", &[d, itc_dim], INIT_STD, head, w, rng)?,
            language: store.normal("heads.itc.language.weight", &[d, itc_dim], INIT_STD, head, w, rng)?,
        })
    }

    /// Projects `cls` rows of one side and normalizes them to unit length.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, cls: Var, side: Modality) -> Result<Var> {
        let w = store.bind(
            g,
            match side {
                Modality::Vision => self.vision,
                Modality::Language => self.language,
            },
        );
        let z = g.matmul(cls, w)?;
        g.l2_normalize_rows(z)
    }
}

/// Output of [`mlm_loss`]. When no position was masked, `loss` is a zero
/// constant and `empty` is set.
#[derive(Clone, Debug)]
pub struct MlmOutput {
    pub loss: Var,
    pub logits: Option<Var>,
    pub targets: Vec<usize>,
    pub empty: bool,
}

/// Mean cross-entropy of the MLM head at the target positions of `zl`.
/// `targets[b]` lists `(position, true id)` for sample `b`.
pub fn mlm_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &MlpHead,
    zl: &crate::embeddings::EmbeddingSequence,
    targets: &[Vec<(usize, u32)>],
) -> Result<MlmOutput> {
    if targets.len() != zl.batch {
        return Err(Error::shape(
            "mlm_loss",
            format!("{} target lists for {} sequences", targets.len(), zl.batch),
        ));
    }
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for (b, t) in targets.iter().enumerate() {
        for &(pos, id) in t {
            if pos >= zl.len || zl.provenance[b][pos] == Provenance::Pad {
                return Err(Error::invalid(format!(
                    "mlm_loss: target position {pos} out of range for sample {b} of length {}",
                    zl.length(b)
                )));
            }
            rows.push(b * zl.len + pos);
            ids.push(id as usize);
        }
    }
    if rows.is_empty() {
        let loss = g.constant(Tensor::scalar(T::zero()));
        return Ok(MlmOutput {
            loss,
            logits: None,
            targets: ids,
            empty: true,
        });
    }
    let x = g.gather_rows(zl.rows, &rows)?;
    let logits = head.forward(g, store, x)?;
    let loss = g.cross_entropy(logits, &ids)?;
    Ok(MlmOutput {
        loss,
        logits: Some(logits),
        targets: ids,
        empty: false,
    })
}

/// Matched and mismatched `(image, text)` index pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItmBatch {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<bool>,
}

/// Every image of an `n`-pair batch with its own text and with a uniformly
/// drawn different text, in shuffled order.
pub fn make_itm_batch(n: usize, rng: &mut impl Rng) -> Result<ItmBatch> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "make_itm_batch: need at least 2 pairs for negatives, got {n}"
        )));
    }
    let mut items: Vec<((usize, usize), bool)> = Vec::with_capacity(2 * n);
    for i in 0..n {
        items.push(((i, i), true));
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        items.push(((i, j), false));
    }
    items.shuffle(rng);
    Ok(ItmBatch {
        pairs: items.iter().map(|&(p, _)| p).collect(),
        labels: items.iter().map(|&(_, l)| l).collect(),
    })
}

/// ITM logits `N × 2` (column 1 = match) from the concatenated CLS rows.
pub fn itm_logits<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &MlpHead,
    zv_cls: Var,
    zl_cls: Var,
) -> Result<Var> {
    let x = g.concat_cols(zv_cls, zl_cls)?;
    head.forward(g, store, x)
}

/// Mean cross-entropy of the ITM head against the match labels.
pub fn itm_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &MlpHead,
    zv_cls: Var,
    zl_cls: Var,
    labels: &[bool],
) -> Result<Var> {
    let n = g.value(zv_cls).rows();
    if n != labels.len() || g.value(zl_cls).rows() != n {
        return Err(Error::shape(
            "itm_loss",
            format!(
                "{n} vision and {} language rows for {} labels",
                g.value(zl_cls).rows(),
                labels.len()
            ),
        ));
    }
    let logits = itm_logits(g, store, head, zv_cls, zl_cls)?;
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    g.cross_entropy(logits, &targets)
}

/// Both CLS rows of a backbone output.
pub fn cls_pair<T: Real>(g: &mut Graph<T>, out: &BackboneOutput) -> Result<(Var, Var)> {
    Ok((out.zv_cls(g)?, out.zl_cls(g)?))
}

/// Temperature-scaled similarity matrix and both softmax directions,
/// computed outside the graph for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct ItcSimilarity {
    pub s: Tensor<f64>,
    pub tau: f64,
    /// Row-wise softmax of `s`.
    pub p_i2t: Tensor<f64>,
    /// Column-wise softmax of `s`, stored so that column `j` sums to one.
    pub p_t2i: Tensor<f64>,
}

pub fn itc_similarity(zv: &Tensor<f64>, zl: &Tensor<f64>, tau: f64) -> Result<ItcSimilarity> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let (n, d) = (zv.rows(), zv.cols());
    if zl.shape() != zv.shape() {
        return Err(Error::shape("itc_similarity", format!("{:?} vs {:?}", zv.shape(), zl.shape())));
    }
    let mut s = vec![0.0; n * n];
    f64::gemm(n, d, n, zv.data(), false, zl.data(), true, &mut s, false);
    s.iter_mut().for_each(|x| *x /= tau);
    let softmax = |xs: Vec<f64>| -> Vec<f64> {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    };
    let mut p_i2t = vec![0.0; n * n];
    let mut p_t2i = vec![0.0; n * n];
    for i in 0..n {
        p_i2t[i * n..(i + 1) * n].copy_from_slice(&softmax(s[i * n..(i + 1) * n].to_vec()));
        let col = softmax((0..n).map(|r| s[r * n + i]).collect());
        for (r, p) in col.into_iter().enumerate() {
            p_t2i[r * n + i] = p;
        }
    }
    Ok(ItcSimilarity {
        s: Tensor::new(s, &[n, n])?,
        tau,
        p_i2t: Tensor::new(p_i2t, &[n, n])?,
        p_t2i: Tensor::new(p_t2i, &[n, n])?,
    })
}

/// Symmetric contrastive loss over `N` matched rows:
/// `½·CE(zv zlᵀ/τ, I) + ½·CE(zl zvᵀ/τ, I)`, each a mean over pairs.
pub fn itc_loss<T: Real>(g: &mut Graph<T>, zv: Var, zl: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    if g.shape(zv) != g.shape(zl) || g.value(zv).rank() != 2 {
        return Err(Error::shape(
            "itc_loss",
            format!("{:?} vs {:?}", g.shape(zv), g.shape(zl)),
        ));
    }
    for v in [zv, zl] {
        let t = g.value(v);
        for r in 0..t.rows() {
            let norm = t.row(r).iter().map(|x| x.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!("itc_loss: row {r} has norm {norm}, expected 1")));
            }
        }
    }
    let n = g.value(zv).rows();
    let zl_t = g.transpose(zl)?;
    let s = g.matmul(zv, zl_t)?;
    let s = g.scale(s, T::from_f64_lossy(1.0 / tau))?;
    let targets: Vec<usize> = (0..n).collect();
    let i2t = g.cross_entropy(s, &targets)?;
    let s_t = g.transpose(s)?;
    let t2i = g.cross_entropy(s_t, &targets)?;
    let both = g.add(i2t, t2i)?;
    g.scale(both, T::from_f64_lossy(0.5))
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBundle {
    pub mlm: Option<f64>,
    pub itm: Option<f64>,
    pub itc: Option<f64>,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBundle {
    /// `Σ weight · loss` over the present components.
    pub fn combine(mlm: Option<f64>, itm: Option<f64>, itc: Option<f64>, weights: LossWeights) -> Result<Self> {
        let mut total = 0.0;
        for (name, loss, w) in [("mlm", mlm, weights.mlm), ("itm", itm, weights.itm), ("itc", itc, weights.itc)] {
            match loss {
                Some(l) => total += w * l,
                None if w > 0.0 => {
                    return Err(Error::invalid(format!("positive weight on absent {name} loss")))
                }
                None => {}
            }
        }
        Ok(Self {
            mlm,
            itm,
            itc,
            weights,
            total,
        })
    }
}

/// Weighted sum of the present loss nodes together with their values.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    mlm: Option<Var>,
    itm: Option<Var>,
    itc: Option<Var>,
    weights: LossWeights,
) -> Result<(Var, LossBundle)> {
    let value = |g: &Graph<T>, v: Option<Var>| v.map(|v| g.value(v).data()[0].to_f64().unwrap_or(f64::NAN));
    let bundle = LossBundle::combine(value(g, mlm), value(g, itm), value(g, itc), weights)?;
    let mut total: Option<Var> = None;
    for (v, w) in [(mlm, weights.mlm), (itm, weights.itm), (itc, weights.itc)] {
        let Some(v) = v else { continue };
        if w == 0.0 {
            continue;
        }
        let term = g.scale(v, T::from_f64_lossy(w))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    let bundle = LossBundle {
        total: g.value(total).data()[0].to_f64().unwrap_or(f64::NAN),
        ..bundle
    };
    Ok((total, bundle))
}
