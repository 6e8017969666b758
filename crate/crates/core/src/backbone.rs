//! Transformer backbone: one encoder stack per modality, then a single
//! fusion stack over the concatenation of both sides.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingSequence, Modality, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{AttentionSpec, Graph, Real, Var};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::prompts::UnifiedInput;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers_vision: usize,
    pub layers_language: usize,
    pub layers_fusion: usize,
    pub ffn_mult: f64,
    pub max_vision_len: usize,
    pub max_language_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers_vision: 2,
            layers_language: 2,
            layers_fusion: 2,
            ffn_mult: 4.0,
            max_vision_len: 17,
            max_language_len: 18,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers_vision == 0 || self.layers_language == 0 || self.layers_fusion == 0 {
            return Err(Error::invalid("every stack needs at least one layer"));
        }
        if self.ffn_width() == 0 {
            return Err(Error::invalid("ffn_mult gives an empty feed-forward layer"));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        (self.ffn_mult * self.d_model as f64).round().max(0.0) as usize
    }
}

/// Parameters of one pre-norm block.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1: (ParamId, ParamId),
    pub wq: (ParamId, ParamId),
    pub wk: (ParamId, ParamId),
    pub wv: (ParamId, ParamId),
    pub wo: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ffn1: (ParamId, ParamId),
    pub ffn2: (ParamId, ParamId),
}

fn dense<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: [usize; 2],
    group: ParamGroup,
    rng: &mut impl Rng,
) -> Result<(ParamId, ParamId)> {
    let w = store.normal(&format!("{name}.weight"), &shape, INIT_STD, group, ParamKind::Weight, rng)?;
    let b = store.zeros(&format!("{name}.bias"), &[shape[1]], group)?;
    Ok((w, b))
}

pub(crate) fn norm<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    d: usize,
    group: ParamGroup,
) -> Result<(ParamId, ParamId)> {
    let gain = store.ones(&format!("{name}.gain"), &[d], group)?;
    let bias = store.zeros(&format!("{name}.bias"), &[d], group)?;
    Ok((gain, bias))
}

impl LayerParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        ffn: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: norm(store, &format!("{prefix}.ln1"), d, group)?,
            wq: dense(store, &format!("{prefix}.attn.q"), [d, d], group, rng)?,
            wk: dense(store, &format!("{prefix}.attn.k"), [d, d], group, rng)?,
            wv: dense(store, &format!("{prefix}.attn.v"), [d, d], group, rng)?,
            wo: dense(store, &format!("{prefix}.attn.out"), [d, d], group, rng)?,
            ln2: norm(store, &format!("{prefix}.ln2"), d, group)?,
            ffn1: dense(store, &format!("{prefix}.ffn.in"), [d, ffn], group, rng)?,
            ffn2: dense(store, &format!("{prefix}.ffn.out"), [ffn, d], group, rng)?,
        })
    }
}

pub(crate) fn apply_dense<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    (w, b): (ParamId, ParamId),
) -> Result<Var> {
    let w = store.bind(g, w);
    let b = store.bind(g, b);
    g.linear(x, w, b)
}

pub(crate) fn apply_norm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    (gain, bias): (ParamId, ParamId),
) -> Result<Var> {
    let gain = store.bind(g, gain);
    let bias = store.bind(g, bias);
    g.layer_norm(x, gain, bias, T::from_f64_lossy(LN_EPS))
}

#[allow(clippy::too_many_arguments)]
/// One pre-norm block over `batch` sequences of `len` rows each:
/// `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
pub fn transformer_layer<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    layer: &LayerParams,
    x: Var,
    heads: usize,
    batch: usize,
    len: usize,
    key_mask: Option<Vec<bool>>,
) -> Result<Var> {
    let d = store.value(layer.ln1.0).numel();
    if g.value(x).cols() != d || g.value(x).rows() != batch * len {
        return Err(Error::shape(
            "transformer_layer",
            format!("input {:?} for {batch} x {len} rows of width {d}", g.shape(x)),
        ));
    }
    let h = apply_norm(g, store, x, layer.ln1)?;
    let q = apply_dense(g, store, h, layer.wq)?;
    let k = apply_dense(g, store, h, layer.wk)?;
    let v = apply_dense(g, store, h, layer.wv)?;
    let spec = AttentionSpec {
        batch,
        heads,
        q_len: len,
        k_len: len,
        key_mask,
    };
    let a = g.attention(q, k, v, spec)?;
    let a = apply_dense(g, store, a, layer.wo)?;
    let x = g.add(x, a)?;
    let h = apply_norm(g, store, x, layer.ln2)?;
    let f = apply_dense(g, store, h, layer.ffn1)?;
    let f = g.gelu(f)?;
    let f = apply_dense(g, store, f, layer.ffn2)?;
    g.add(x, f)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub vision: Vec<LayerParams>,
    pub language: Vec<LayerParams>,
    pub fusion: Vec<LayerParams>,
    pub type_vision: ParamId,
    pub type_language: ParamId,
    pub ln_f: (ParamId, ParamId),
}

/// Backbone outputs laid out like the inputs (same batch, lengths and
/// provenance). Rows at padded positions carry no meaning.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub zv: EmbeddingSequence,
    pub zl: EmbeddingSequence,
}

impl BackboneOutput {
    /// Row 0 of every vision sequence, `batch × D`.
    pub fn zv_cls<T: Real>(&self, g: &mut Graph<T>) -> Result<Var> {
        cls_rows(g, &self.zv)
    }

    /// Row 0 of every language sequence, `batch × D`.
    pub fn zl_cls<T: Real>(&self, g: &mut Graph<T>) -> Result<Var> {
        cls_rows(g, &self.zl)
    }
}

pub fn cls_rows<T: Real>(g: &mut Graph<T>, seq: &EmbeddingSequence) -> Result<Var> {
    let idx: Vec<usize> = (0..seq.batch).map(|b| b * seq.len).collect();
    g.gather_rows(seq.rows, &idx)
}

impl Backbone {
    /// Encoder stacks go in the backbone learning-rate group; the fusion
    /// stack, type embeddings and final norm in the head group.
    pub fn new<T: Real>(config: BackboneConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, ffn) = (config.d_model, config.ffn_width());
        let stack = |store: &mut ParamStore<T>, prefix: &str, n: usize, group, rng: &mut _| {
            (0..n)
                .map(|i| LayerParams::new(store, &format!("{prefix}.layer{i}"), d, ffn, group, rng))
                .collect::<Result<Vec<_>>>()
        };
        let vision = stack(store, "encoder.vision", config.layers_vision, ParamGroup::Backbone, rng)?;
        let language = stack(store, "encoder.language", config.layers_language, ParamGroup::Backbone, rng)?;
        let fusion = stack(store, "fusion", config.layers_fusion, ParamGroup::Head, rng)?;
        let head = ParamGroup::Head;
        let type_vision = store.normal("fusion.type.vision", &[d], INIT_STD, head, ParamKind::Weight, rng)?;
        let type_language = store.normal("fusion.type.language", &[d], INIT_STD, head, ParamKind::Weight, rng)?;
        let ln_f = norm(store, "fusion.ln_f", d, head)?;
        Ok(Self {
            config,
            vision,
            language,
            fusion,
            type_vision,
            type_language,
            ln_f,
        })
    }

    fn max_len(&self, m: Modality) -> usize {
        match m {
            Modality::Vision => self.config.max_vision_len,
            Modality::Language => self.config.max_language_len,
        }
    }

    /// Runs the encoder stack of the sequence's modality.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seq: &EmbeddingSequence,
    ) -> Result<EmbeddingSequence> {
        let longest = (0..seq.batch).map(|b| seq.length(b)).max().unwrap_or(0);
        if longest > self.max_len(seq.modality) {
            return Err(Error::invalid(format!(
                "{} sequence of length {longest} exceeds maximum {}",
                seq.modality.name(),
                self.max_len(seq.modality)
            )));
        }
        let layers = match seq.modality {
            Modality::Vision => &self.vision,
            Modality::Language => &self.language,
        };
        let mask = seq.key_mask();
        let mut x = seq.rows;
        for layer in layers {
            x = transformer_layer(g, store, layer, x, self.config.heads, seq.batch, seq.len, mask.clone())?;
        }
        Ok(seq.with_rows(x))
    }

    /// Fusion stack over the per-sample concatenation of the unpadded rows
    /// of both encoded sides, split back into the input layouts.
    pub fn fuse<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        zv: &EmbeddingSequence,
        zl: &EmbeddingSequence,
    ) -> Result<BackboneOutput> {
        if zv.batch != zl.batch {
            return Err(Error::shape(
                "fuse",
                format!("{} vision vs {} language sequences", zv.batch, zl.batch),
            ));
        }
        let batch = zv.batch;
        let tv = store.bind(g, self.type_vision);
        let tl = store.bind(g, self.type_language);
        let v = g.add_row(zv.rows, tv)?;
        let l = g.add_row(zl.rows, tl)?;
        let both = g.concat_rows(&[v, l])?;
        let l_offset = batch * zv.len;

        let live = |seq: &EmbeddingSequence, b: usize| -> Vec<usize> {
            (0..seq.len)
                .filter(|&i| seq.provenance[b][i] != Provenance::Pad)
                .collect()
        };
        let lens: Vec<usize> = (0..batch).map(|b| zv.length(b) + zl.length(b)).collect();
        let fused_len = lens.iter().copied().max().unwrap_or(0);
        let mut order = Vec::with_capacity(batch * fused_len);
        let mut mask = Vec::with_capacity(batch * fused_len);
        // Fused row of each input position, for splitting back.
        let mut back_v = vec![0; batch * zv.len];
        let mut back_l = vec![0; batch * zl.len];
        for b in 0..batch {
            let base = b * fused_len;
            let mut slot = 0;
            back_v[b * zv.len..(b + 1) * zv.len].fill(base);
            for i in live(zv, b) {
                order.push(b * zv.len + i);
                back_v[b * zv.len + i] = base + slot;
                slot += 1;
            }
            back_l[b * zl.len..(b + 1) * zl.len].fill(base);
            for i in live(zl, b) {
                order.push(l_offset + b * zl.len + i);
                back_l[b * zl.len + i] = base + slot;
                slot += 1;
            }
            mask.extend(std::iter::repeat_n(false, slot));
            // Padding repeats the sample's first row; it is masked as a key
            // and its outputs are never read.
            order.extend(std::iter::repeat_n(b * zv.len, fused_len - slot));
            mask.extend(std::iter::repeat_n(true, fused_len - slot));
        }
        let mut x = g.gather_rows(both, &order)?;
        let mask = mask.iter().any(|&m| m).then_some(mask);
        for layer in &self.fusion {
            x = transformer_layer(g, store, layer, x, self.config.heads, batch, fused_len, mask.clone())?;
        }
        let x = apply_norm(g, store, x, self.ln_f)?;
        let rows_v = g.gather_rows(x, &back_v)?;
        let rows_l = g.gather_rows(x, &back_l)?;
        Ok(BackboneOutput {
            zv: zv.with_rows(rows_v),
            zl: zl.with_rows(rows_l),
        })
    }

    /// Both encoder stacks followed by the fusion stack.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: &UnifiedInput,
    ) -> Result<BackboneOutput> {
        let v = self.encode(g, store, &x.vision)?;
        let l = self.encode(g, store, &x.language)?;
        self.fuse(g, store, &v, &l)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::embeddings::{embed_image, patchify, EmbeddingConfig, EmbeddingParams, Image};
    use crate::numerics::Tensor;
    use crate::prompts::{unify_input, InputCase, PoolingMode, PromptBank, PromptConfig, PromptMode};

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            d_model: 8,
            heads: 2,
            layers_vision: 1,
            layers_language: 1,
            layers_fusion: 1,
            ffn_mult: 2.0,
            max_vision_len: 17,
            max_language_len: 10,
        }
    }

    fn random_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor<f64> {
        Tensor::new((0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect(), &[rows, d]).unwrap()
    }

    fn seq(g: &mut Graph<f64>, t: Tensor<f64>, lens: &[usize], len: usize, m: Modality) -> EmbeddingSequence {
        let provenance = lens
            .iter()
            .map(|&n| {
                let mut p = vec![Provenance::Real; len];
                p[0] = Provenance::Cls;
                p[n..].fill(Provenance::Pad);
                p
            })
            .collect();
        EmbeddingSequence {
            rows: g.constant(t),
            batch: lens.len(),
            len,
            provenance,
            modality: m,
        }
    }

    #[test]
    fn config_validation() {
        assert!(small_config().validate().is_ok());
        let mut c = small_config();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.layers_fusion = 0;
        assert!(c.validate().is_err());
        // Paper-scale shapes are constructible.
        let big = BackboneConfig {
            d_model: 768,
            heads: 12,
            layers_vision: 12,
            layers_language: 12,
            layers_fusion: 6,
            ..BackboneConfig::default()
        };
        assert!(big.validate().is_ok());
        assert_eq!(big.ffn_width(), 3072);
    }

    #[test]
    fn layer_preserves_shape_and_zeroed_outputs_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let layer = LayerParams::new(&mut store, "l", 8, 16, ParamGroup::Head, &mut rng).unwrap();
        for len in [1, 3, 7] {
            let mut g = Graph::new();
            let x = g.constant(random_rows(&mut rng, 2 * len, 8));
            let y = transformer_layer(&mut g, &store, &layer, x, 2, 2, len, None).unwrap();
            assert_eq!(g.shape(y), g.shape(x));
        }
        for id in [layer.wo.0, layer.wo.1, layer.ffn2.0, layer.ffn2.1] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(random_rows(&mut rng, 10, 8));
        let y = transformer_layer(&mut g, &store, &layer, x, 2, 2, 5, None).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let bad = g.constant(random_rows(&mut rng, 10, 6));
        assert!(transformer_layer(&mut g, &store, &layer, bad, 2, 2, 5, None).is_err());
    }

    #[test]
    fn masked_positions_do_not_affect_live_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(small_config(), &mut store, &mut rng).unwrap();
        let v = random_rows(&mut rng, 2 * 5, 8);
        let l = random_rows(&mut rng, 2 * 6, 8);
        let run = |l: Tensor<f64>| {
            let mut g = Graph::new();
            let vs = seq(&mut g, v.clone(), &[5, 5], 5, Modality::Vision);
            let ls = seq(&mut g, l, &[6, 3], 6, Modality::Language);
            let v = bb.encode(&mut g, &store, &vs).unwrap();
            let l = bb.encode(&mut g, &store, &ls).unwrap();
            let out = bb.fuse(&mut g, &store, &v, &l).unwrap();
            (g.value(out.zv.rows).clone(), g.value(out.zl.rows).clone())
        };
        let (v0, l0) = run(l.clone());
        let mut l2 = l.clone();
        // Sample 1 has 3 live rows out of 6; scramble rows 3..6.
        for x in &mut l2.data_mut()[(6 + 3) * 8..12 * 8] {
            *x = rng.random_range(-5.0..5.0);
        }
        let (v1, l1) = run(l2);
        assert_eq!(v0, v1);
        assert_eq!(&l0.data()[..(6 + 3) * 8], &l1.data()[..(6 + 3) * 8]);
    }

    proptest! {
        #[test]
        fn single_head_attention_rows_are_convex_combinations(
            seed in 0u64..10_000,
            q_len in 1usize..5,
            k_len in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f64>::new();
            let q = g.constant(random_rows(&mut rng, q_len, 4));
            let k = g.constant(random_rows(&mut rng, k_len, 4));
            let vt = random_rows(&mut rng, k_len, 3);
            let mask: Vec<bool> = (0..k_len).map(|j| j > 0 && rng.random_bool(0.3)).collect();
            let v = g.constant(vt.clone());
            let out = g.attention(q, k, v, AttentionSpec::single(q_len, k_len, Some(mask.clone()))).unwrap();
            for r in 0..q_len {
                for c in 0..3 {
                    let live = (0..k_len).filter(|&j| !mask[j]).map(|j| vt.row(j)[c]);
                    let lo = live.clone().fold(f64::INFINITY, f64::min);
                    let hi = live.fold(f64::NEG_INFINITY, f64::max);
                    let x = g.value(out).row(r)[c];
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }
    }

    fn prompt_model(seed: u64) -> (ParamStore<f64>, EmbeddingParams, PromptBank, Backbone) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = EmbeddingParams::new(
            EmbeddingConfig {
                vocab_size: 12,
                d_model: 8,
                max_text_len: 8,
                image_size: 16,
                channels: 3,
                patch_size: 4,
            },
            &mut store,
            &mut rng,
        )
        .unwrap();
        let bank = PromptBank::new(
            PromptConfig {
                k: 4,
                pool_size: 12,
                mode: PromptMode::Pool,
                pooling: PoolingMode::Average,
            },
            8,
            &mut store,
            &mut rng,
        )
        .unwrap();
        let bb = Backbone::new(small_config(), &mut store, &mut rng).unwrap();
        (store, emb, bank, bb)
    }

    fn image(rng: &mut ChaCha8Rng) -> Image {
        Image::new(16, 16, 3, (0..768).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shapes_and_determinism() {
        let (store, emb, mut bank, bb) = prompt_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = patchify(&image(&mut rng), 4).unwrap();
        let run = |bank: &mut PromptBank| {
            let mut g = Graph::new();
            let v = embed_image(&mut g, &store, &emb, std::slice::from_ref(&grid)).unwrap();
            let u = unify_input(&mut g, &store, bank, &emb, Some(v), None).unwrap();
            assert_eq!(u.case, InputCase::ImageOnly);
            let out = bb.forward(&mut g, &store, &u).unwrap();
            assert_eq!((out.zv.len, out.zl.len), (17, 5));
            let cls = out.zv_cls(&mut g).unwrap();
            assert_eq!(g.value(cls).data(), &g.value(out.zv.rows).data()[..8]);
            g.value(out.zl.rows).clone()
        };
        assert_eq!(run(&mut bank), run(&mut bank));

        let mut g = Graph::new();
        let vs = seq(&mut g, random_rows(&mut rng, 17, 8), &[17], 17, Modality::Vision);
        let ls = seq(&mut g, random_rows(&mut rng, 5, 8), &[5], 5, Modality::Language);
        let u = unify_input(&mut g, &store, &mut bank, &emb, Some(vs), Some(ls)).unwrap();
        let out = bb.forward(&mut g, &store, &u).unwrap();
        assert_eq!((out.zv.len, out.zl.len), (17, 5));
        let long = seq(&mut g, random_rows(&mut rng, 11, 8), &[11], 11, Modality::Language);
        assert!(bb.encode(&mut g, &store, &long).is_err());
    }

    #[test]
    fn selected_prompts_receive_gradient() {
        let mut hits = 0;
        for seed in 0..20 {
            let (store, emb, mut bank, bb) = prompt_model(100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let grid = patchify(&image(&mut rng), 4).unwrap();
            let v = embed_image(&mut g, &store, &emb, &[grid]).unwrap();
            let u = unify_input(&mut g, &store, &mut bank, &emb, Some(v), None).unwrap();
            let out = bb.forward(&mut g, &store, &u).unwrap();
            let w = g.constant(random_rows(&mut rng, 5, 8));
            let loss = g.dot(out.zl.rows, w).unwrap();
            g.backward(loss).unwrap();
            let grads = store.collect_grads(&g);
            let pool = bank.language_pool.as_ref().unwrap().param;
            let sel = &u.selections[0].as_ref().unwrap().indices;
            if sel.iter().all(|&i| grads[&pool].row(i).iter().any(|&x| x != 0.0)) {
                hits += 1;
            }
        }
        assert!(hits >= 19, "{hits} of 20");
    }
}
