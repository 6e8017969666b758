//! The full pretraining model: embeddings, prompts, backbone and heads over
//! one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput};
use crate::embeddings::{
    embed_image, embed_text, EmbeddingConfig, EmbeddingParams, EmbeddingSequence, Modality, PatchGrid,
    TokenSequence,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};
use crate::objectives::{ItcHead, MlpHead};
use crate::params::ParamStore;
use crate::prompts::{unify_input, InputCase, PromptBank, PromptConfig, UnifiedInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers_vision: usize,
    pub layers_language: usize,
    pub layers_fusion: usize,
    pub ffn_mult: f64,
    /// Content tokens per caption, excluding `[CLS]` and `[SEP]`.
    pub max_text_len: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub itc_dim: usize,
    pub k: usize,
    pub pool_size: usize,
    pub prompt_mode: crate::prompts::PromptMode,
    pub pooling: crate::prompts::PoolingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 64,
            heads: 4,
            layers_vision: 2,
            layers_language: 2,
            layers_fusion: 2,
            ffn_mult: 4.0,
            max_text_len: 16,
            image_size: 32,
            channels: 3,
            patch_size: 8,
            itc_dim: 64,
            k: 4,
            pool_size: 64,
            prompt_mode: Default::default(),
            pooling: Default::default(),
        }
    }
}

impl ModelConfig {
    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            max_text_len: self.max_text_len,
            image_size: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        let e = self.embedding();
        BackboneConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers_vision: self.layers_vision,
            layers_language: self.layers_language,
            layers_fusion: self.layers_fusion,
            ffn_mult: self.ffn_mult,
            max_vision_len: (e.num_patches() + 1).max(self.k + 1),
            max_language_len: e.text_positions().max(self.k + 1),
        }
    }

    pub fn prompts(&self) -> PromptConfig {
        PromptConfig {
            k: self.k,
            pool_size: self.pool_size,
            mode: self.prompt_mode,
            pooling: self.pooling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.vocab_size <= crate::embeddings::SPECIAL_TOKENS.len() {
            return Err(Error::Config("vocab_size leaves no regular tokens".into()));
        }
        if self.itc_dim == 0 || self.k == 0 {
            return Err(Error::Config("itc_dim and k must be positive".into()));
        }
        if self.max_text_len < crate::embeddings::MIN_TEXT_TOKENS {
            return Err(Error::Config("max_text_len too small".into()));
        }
        self.backbone().validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embeddings: EmbeddingParams,
    pub prompts: PromptBank,
    pub backbone: Backbone,
    pub mlm_head: MlpHead,
    pub itm_head: MlpHead,
    pub itc_head: ItcHead,
}

impl<T: Real> Model<T> {
    /// Parameters are drawn in a fixed order from a generator seeded with
    /// `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embeddings = EmbeddingParams::new(config.embedding(), &mut store, &mut rng)?;
        let prompts = PromptBank::new(config.prompts(), d, &mut store, &mut rng)?;
        let backbone = Backbone::new(config.backbone(), &mut store, &mut rng)?;
        let mlm_head = MlpHead::new(&mut store, "heads.mlm", [d, d, config.vocab_size], &mut rng)?;
        let itm_head = MlpHead::new(&mut store, "heads.itm", [2 * d, d, 2], &mut rng)?;
        let itc_head = ItcHead::new(&mut store, d, config.itc_dim, &mut rng)?;
        Ok(Self {
            config,
            store,
            embeddings,
            prompts,
            backbone,
            mlm_head,
            itm_head,
            itc_head,
        })
    }

    pub fn embed_images(&self, g: &mut Graph<T>, grids: &[PatchGrid]) -> Result<EmbeddingSequence> {
        embed_image(g, &self.store, &self.embeddings, grids)
    }

    pub fn embed_texts(&self, g: &mut Graph<T>, texts: &[TokenSequence]) -> Result<EmbeddingSequence> {
        embed_text(g, &self.store, &self.embeddings, texts)
    }

    /// Prompt-fills whichever side is absent.
    pub fn unify(
        &mut self,
        g: &mut Graph<T>,
        vision: Option<EmbeddingSequence>,
        language: Option<EmbeddingSequence>,
    ) -> Result<UnifiedInput> {
        unify_input(g, &self.store, &mut self.prompts, &self.embeddings, vision, language)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: &UnifiedInput) -> Result<BackboneOutput> {
        self.backbone.forward(g, &self.store, x)
    }

    /// Contrastive embedding of a single-modality input: own-side CLS after
    /// the backbone, projected and normalized.
    pub fn itc_embed(&self, g: &mut Graph<T>, x: &UnifiedInput) -> Result<Var> {
        let side = match x.case {
            InputCase::ImageOnly => Modality::Vision,
            InputCase::TextOnly => Modality::Language,
            InputCase::Pair => {
                return Err(Error::invalid("itc_embed requires a single-modality input"));
            }
        };
        let out = self.forward(g, x)?;
        self.itc_project(g, &out, side)
    }

    /// Projected, normalized CLS rows of one side of a backbone output.
    pub fn itc_project(&self, g: &mut Graph<T>, out: &BackboneOutput, side: Modality) -> Result<Var> {
        let cls = match side {
            Modality::Vision => out.zv_cls(g)?,
            Modality::Language => out.zl_cls(g)?,
        };
        self.itc_head.embed(g, &self.store, cls, side)
    }

    /// Selection counters of both pools, vision first.
    pub fn selection_counts(&self) -> Vec<(Modality, &[u64])> {
        [Modality::Vision, Modality::Language]
            .into_iter()
            .filter_map(|m| self.prompts.pool(m).map(|p| (m, p.selection_counts.as_slice())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::embeddings::{build_vocab, patchify, tokenize, Image};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            heads: 2,
            layers_vision: 1,
            layers_language: 1,
            layers_fusion: 1,
            max_text_len: 6,
            image_size: 8,
            patch_size: 4,
            itc_dim: 4,
            pool_size: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn construction_is_seeded() {
        let a = Model::<f32>::new(tiny(), 3).unwrap();
        let b = Model::<f32>::new(tiny(), 3).unwrap();
        let c = Model::<f32>::new(tiny(), 4).unwrap();
        for (name, id) in a.store.sorted() {
            assert_eq!(a.store.value(id), b.store.get(name).unwrap());
        }
        let tok = a.store.id("embed.text.token").unwrap();
        assert_ne!(a.store.value(tok), c.store.value(tok));
        assert!(Model::<f32>::new(ModelConfig { patch_size: 3, ..tiny() }, 0).is_err());
    }

    #[test]
    fn itc_embeddings_are_unit_and_reject_pairs() {
        let mut m = Model::<f64>::new(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image::new(8, 8, 3, (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let vocab = build_vocab(["red circle left"], 12).unwrap();
        let text = tokenize("red circle left", &vocab, 6).unwrap();
        let mut g = Graph::new();
        let v = m.embed_images(&mut g, &[patchify(&img, 4).unwrap()]).unwrap();
        let l = m.embed_texts(&mut g, &[text]).unwrap();
        for u in [
            m.unify(&mut g, Some(v.clone()), None).unwrap(),
            m.unify(&mut g, None, Some(l.clone())).unwrap(),
        ] {
            let z = m.itc_embed(&mut g, &u).unwrap();
            let norm: f64 = g.value(z).data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            let again = m.itc_embed(&mut g, &u).unwrap();
            assert_eq!(g.value(z), g.value(again));
        }
        let pair = m.unify(&mut g, Some(v), Some(l)).unwrap();
        assert!(m.itc_embed(&mut g, &pair).is_err());
    }
}
