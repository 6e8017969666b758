//! Prompts that stand in for a missing modality.
//!
//! Every input is turned into a `(vision, language)` pair of sequences. A
//! missing side is replaced by its `[CLS]` embedding followed by `k` prompt
//! vectors, either a fixed learnable block (static mode) or the `k` entries
//! of that modality's prompt pool with the highest dot product against a
//! pooled query of the side that is present (pool mode).
//!
//! Selection is a hard top-k: the chosen indices are constants of the
//! graph, and gradients reach only the selected pool rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingParams, EmbeddingSequence, Modality, Provenance, CLS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    #[default]
    Average,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Static,
    #[default]
    Pool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Prompts per filled side.
    pub k: usize,
    pub pool_size: usize,
    pub mode: PromptMode,
    pub pooling: PoolingMode,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            k: 4,
            pool_size: 64,
            mode: PromptMode::Pool,
            pooling: PoolingMode::Average,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptSelection {
    /// Pool rows, best first.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub query: Vec<f64>,
}

/// Pooled summary of the `Real` positions of sample `b`.
pub fn pool_query<T: Real>(
    g: &Graph<T>,
    seq: &EmbeddingSequence,
    b: usize,
    mode: PoolingMode,
) -> Result<Vec<T>> {
    let d = g.value(seq.rows).cols();
    let values = seq.sample_values(g, b);
    let rows: Vec<&[T]> = seq.provenance[b]
        .iter()
        .enumerate()
        .filter(|(_, &p)| p == Provenance::Real)
        .map(|(i, _)| &values[i * d..(i + 1) * d])
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!(
            "pool_query: sample {b} has no real positions"
        )));
    }
    let mut q = rows[0].to_vec();
    for r in &rows[1..] {
        for (acc, &x) in q.iter_mut().zip(*r) {
            *acc = match mode {
                PoolingMode::Average => *acc + x,
                PoolingMode::Max => acc.max(x),
            };
        }
    }
    if mode == PoolingMode::Average {
        let n = T::from_usize(rows.len()).expect("count converts");
        q.iter_mut().for_each(|x| *x = *x / n);
    }
    Ok(q)
}

/// Top-`k` rows of `entries` by `w · query`, descending, ties to the lower
/// index.
pub fn select_top_k<T: Real>(entries: &Tensor<T>, query: &[T], k: usize) -> Result<PromptSelection> {
    let (n, d) = (entries.rows(), entries.cols());
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "select_prompts: k = {k} must be in 1..={n}"
        )));
    }
    if query.len() != d {
        return Err(Error::shape(
            "select_prompts",
            format!("query of length {} for pool width {d}", query.len()),
        ));
    }
    if query.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("select_prompts: non-finite query"));
    }
    let mut scored: Vec<(T, usize)> = (0..n)
        .map(|i| {
            let s = entries
                .row(i)
                .iter()
                .zip(query)
                .fold(T::zero(), |acc, (&w, &q)| acc + w * q);
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores").then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(PromptSelection {
        indices: scored.iter().map(|&(_, i)| i).collect(),
        scores: scored.iter().map(|&(s, _)| s.to_f64().unwrap_or(f64::NAN)).collect(),
        query: query.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
    })
}

/// Learnable bank of candidate prompts for one modality.
#[derive(Clone, Debug)]
pub struct PromptPool {
    pub param: ParamId,
    pub modality: Modality,
    pub selection_counts: Vec<u64>,
}

impl PromptPool {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        modality: Modality,
        size: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("prompt pool size must be positive"));
        }
        let name = format!("prompts.{}.pool", modality.name());
        let param = store.normal(
            &name,
            &[size, d],
            PROMPT_INIT_STD,
            ParamGroup::Head,
            ParamKind::PromptPool,
            rng,
        )?;
        Ok(Self {
            param,
            modality,
            selection_counts: vec![0; size],
        })
    }

    pub fn size(&self) -> usize {
        self.selection_counts.len()
    }

    /// [`select_top_k`] against the current pool values; bumps the counters
    /// of the chosen entries.
    pub fn select<T: Real>(
        &mut self,
        store: &ParamStore<T>,
        query: &[T],
        k: usize,
    ) -> Result<PromptSelection> {
        let sel = select_top_k(store.value(self.param), query, k)?;
        for &i in &sel.indices {
            self.selection_counts[i] += 1;
        }
        Ok(sel)
    }
}

/// A `k × d` block of learnable prompts shared by every input.
pub fn make_static_prompts<T: Real>(
    store: &mut ParamStore<T>,
    modality: Modality,
    k: usize,
    d: usize,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    if k == 0 {
        return Err(Error::invalid("make_static_prompts: k must be positive"));
    }
    let name = format!("prompts.{}.static", modality.name());
    store.normal(
        &name,
        &[k, d],
        PROMPT_INIT_STD,
        ParamGroup::Head,
        ParamKind::PromptPool,
        rng,
    )
}

/// Prompt parameters for both modalities.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub config: PromptConfig,
    pub vision_pool: Option<PromptPool>,
    pub language_pool: Option<PromptPool>,
    pub vision_static: Option<ParamId>,
    pub language_static: Option<ParamId>,
}

impl PromptBank {
    pub fn new<T: Real>(
        config: PromptConfig,
        d: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::invalid("prompt count k must be positive"));
        }
        let mut bank = Self {
            config: config.clone(),
            vision_pool: None,
            language_pool: None,
            vision_static: None,
            language_static: None,
        };
        match config.mode {
            PromptMode::Pool => {
                if config.k > config.pool_size {
                    return Err(Error::invalid(format!(
                        "k = {} exceeds pool size {}",
                        config.k, config.pool_size
                    )));
                }
                bank.vision_pool = Some(PromptPool::new(store, Modality::Vision, config.pool_size, d, rng)?);
                bank.language_pool = Some(PromptPool::new(store, Modality::Language, config.pool_size, d, rng)?);
            }
            PromptMode::Static => {
                bank.vision_static = Some(make_static_prompts(store, Modality::Vision, config.k, d, rng)?);
                bank.language_static = Some(make_static_prompts(store, Modality::Language, config.k, d, rng)?);
            }
        }
        Ok(bank)
    }

    pub fn pool(&self, modality: Modality) -> Option<&PromptPool> {
        match modality {
            Modality::Vision => self.vision_pool.as_ref(),
            Modality::Language => self.language_pool.as_ref(),
        }
    }

    fn pool_mut(&mut self, modality: Modality) -> Option<&mut PromptPool> {
        match modality {
            Modality::Vision => self.vision_pool.as_mut(),
            Modality::Language => self.language_pool.as_mut(),
        }
    }

    fn static_block(&self, modality: Modality) -> Option<ParamId> {
        match modality {
            Modality::Vision => self.vision_static,
            Modality::Language => self.language_static,
        }
    }

    /// Prompt-filled sequences of modality `missing` for every sample of
    /// `present`, plus the selection made for each sample in pool mode.
    pub fn fill<T: Real>(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        emb: &EmbeddingParams,
        present: &EmbeddingSequence,
        missing: Modality,
    ) -> Result<(EmbeddingSequence, Vec<Option<PromptSelection>>)> {
        let k = self.config.k;
        let d = emb.config.d_model;
        let cls = cls_row(g, store, emb, missing)?;
        let mut selections = Vec::with_capacity(present.batch);
        let block = match self.config.mode {
            PromptMode::Static => {
                let id = self
                    .static_block(missing)
                    .ok_or_else(|| Error::invalid("static prompts not initialized"))?;
                selections.resize(present.batch, None);
                store.bind(g, id)
            }
            PromptMode::Pool => {
                let pooling = self.config.pooling;
                let mut queries = Vec::with_capacity(present.batch);
                for b in 0..present.batch {
                    queries.push(pool_query(g, present, b, pooling)?);
                }
                let pool = self
                    .pool_mut(missing)
                    .ok_or_else(|| Error::invalid("prompt pool not initialized"))?;
                for q in &queries {
                    selections.push(Some(pool.select(store, q, k)?));
                }
                store.bind(g, pool.param)
            }
        };
        let stacked = g.concat_rows(&[cls, block])?;
        let mut order = Vec::with_capacity(present.batch * (k + 1));
        for sel in &selections {
            order.push(0);
            match sel {
                Some(s) => order.extend(s.indices.iter().map(|&i| i + 1)),
                None => order.extend(1..=k),
            }
        }
        let rows = g.gather_rows(stacked, &order)?;
        debug_assert_eq!(g.value(rows).cols(), d);
        let mut prov = vec![Provenance::Prompt; k + 1];
        prov[0] = Provenance::Cls;
        Ok((
            EmbeddingSequence {
                rows,
                batch: present.batch,
                len: k + 1,
                provenance: vec![prov; present.batch],
                modality: missing,
            },
            selections,
        ))
    }
}

/// The `[CLS]` row a real sequence of `modality` would start with
/// (class embedding plus position 0).
fn cls_row<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    emb: &EmbeddingParams,
    modality: Modality,
) -> Result<Var> {
    let d = emb.config.d_model;
    let (cls, pos) = match modality {
        Modality::Language => {
            let table = store.bind(g, emb.token);
            (g.gather_rows(table, &[CLS as usize])?, emb.text_pos)
        }
        Modality::Vision => {
            let v = store.bind(g, emb.vision_cls);
            (g.reshape(v, &[1, d])?, emb.vision_pos)
        }
    };
    let pos = store.bind(g, pos);
    let pos0 = g.gather_rows(pos, &[0])?;
    g.add(cls, pos0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputCase {
    ImageOnly,
    TextOnly,
    Pair,
}

/// Model input after prompt filling.
#[derive(Clone, Debug)]
pub struct UnifiedInput {
    pub vision: EmbeddingSequence,
    pub language: EmbeddingSequence,
    pub case: InputCase,
    /// Per sample, the pool selection used for the filled side.
    pub selections: Vec<Option<PromptSelection>>,
}

/// Completes a possibly one-sided input into a `(vision, language)` pair.
pub fn unify_input<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bank: &mut PromptBank,
    emb: &EmbeddingParams,
    vision: Option<EmbeddingSequence>,
    language: Option<EmbeddingSequence>,
) -> Result<UnifiedInput> {
    match (vision, language) {
        (Some(v), Some(l)) => {
            if v.batch != l.batch {
                return Err(Error::shape(
                    "unify_input",
                    format!("{} images vs {} texts", v.batch, l.batch),
                ));
            }
            let n = v.batch;
            Ok(UnifiedInput {
                vision: v,
                language: l,
                case: InputCase::Pair,
                selections: vec![None; n],
            })
        }
        (Some(v), None) => {
            let (l, selections) = bank.fill(g, store, emb, &v, Modality::Language)?;
            Ok(UnifiedInput {
                vision: v,
                language: l,
                case: InputCase::ImageOnly,
                selections,
            })
        }
        (None, Some(l)) => {
            let (v, selections) = bank.fill(g, store, emb, &l, Modality::Vision)?;
            Ok(UnifiedInput {
                vision: v,
                language: l,
                case: InputCase::TextOnly,
                selections,
            })
        }
        (None, None) => Err(Error::invalid("unify_input: both modalities absent")),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::embeddings::{embed_image, embed_text, patchify, tokenize, build_vocab, EmbeddingConfig, Image};

    fn pool(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(rows.concat(), &[rows.len(), d]).unwrap()
    }

    /// Scores every entry, sorts, takes k.
    fn brute_force(entries: &Tensor<f64>, q: &[f64], k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..entries.rows())
            .map(|i| (entries.row(i).iter().zip(q).fold(0.0, |a, (w, x)| a + w * x), i))
            .collect();
        // Stable sort on descending score keeps lower indices first on ties.
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn selection_examples() {
        let p = pool(&[&[1., 0.], &[0., 1.], &[-1., 0.], &[0.6, 0.8]]);
        let s = select_top_k(&p, &[1., 0.], 2).unwrap();
        assert_eq!(s.indices, vec![0, 3]);
        assert_eq!(s.scores, vec![1.0, 0.6]);
        assert_eq!(select_top_k(&p, &[2., 0.], 2).unwrap().indices, vec![0, 3]);
        let tied = pool(&[&[1., 0.], &[1., 0.]]);
        assert_eq!(select_top_k(&tied, &[1., 0.], 1).unwrap().indices, vec![0]);
        assert!(select_top_k(&p, &[1., 0.], 5).is_err());
        assert!(select_top_k(&p, &[1., 0.], 0).is_err());
    }

    #[test]
    fn selection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let d = rng.random_range(1..9);
            let k = rng.random_range(1..=n);
            // Coarse grid values make ties common.
            let data = (0..n * d).map(|_| rng.random_range(-3..4) as f64 * 0.5).collect();
            let entries = Tensor::new(data, &[n, d]).unwrap();
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-3..4) as f64).collect();
            assert_eq!(select_top_k(&entries, &q, k).unwrap().indices, brute_force(&entries, &q, k));
        }
    }

    proptest! {
        #[test]
        fn positive_scaling_preserves_selection(
            data in prop::collection::vec(-1.0f64..1.0, 32),
            q in prop::collection::vec(-1.0f64..1.0, 4),
            c in 0.01f64..100.0,
            k in 1usize..8,
        ) {
            let entries = Tensor::new(data, &[8, 4]).unwrap();
            let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
            let a = select_top_k(&entries, &q, k).unwrap();
            let b = select_top_k(&entries, &scaled, k).unwrap();
            prop_assert_eq!(a.indices, b.indices);
        }

        #[test]
        fn selection_is_permutation_equivariant(
            data in prop::collection::vec(-1.0f64..1.0, 24),
            q in prop::collection::vec(-1.0f64..1.0, 3),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..8).collect();
            for i in (1..8).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let entries = Tensor::new(data.clone(), &[8, 3]).unwrap();
            // Row perm[i] of the permuted pool is row i of the original.
            let mut permuted = vec![0.0; 24];
            for i in 0..8 {
                permuted[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(&data[i * 3..i * 3 + 3]);
            }
            let permuted = Tensor::new(permuted, &[8, 3]).unwrap();
            let a = select_top_k(&entries, &q, 3).unwrap();
            let b = select_top_k(&permuted, &q, 3).unwrap();
            let mapped: Vec<usize> = a.indices.iter().map(|&i| perm[i]).collect();
            prop_assert_eq!(mapped, b.indices);
        }
    }

    fn seq_from_rows(g: &mut Graph<f64>, rows: &[f64], prov: Vec<Provenance>) -> EmbeddingSequence {
        let d = rows.len() / prov.len();
        let v = g.constant(Tensor::new(rows.to_vec(), &[prov.len(), d]).unwrap());
        EmbeddingSequence {
            rows: v,
            batch: 1,
            len: prov.len(),
            provenance: vec![prov],
            modality: Modality::Vision,
        }
    }

    #[test]
    fn pooling_examples() {
        use Provenance::*;
        let mut g = Graph::new();
        let s = seq_from_rows(&mut g, &[9., 9., 1., 3., 3., 1., 7., 7.], vec![Cls, Real, Real, Sep]);
        assert_eq!(pool_query(&g, &s, 0, PoolingMode::Average).unwrap(), vec![2., 2.]);
        assert_eq!(pool_query(&g, &s, 0, PoolingMode::Max).unwrap(), vec![3., 3.]);
        let one = seq_from_rows(&mut g, &[9., 9., 4., -1.], vec![Cls, Real]);
        for mode in [PoolingMode::Average, PoolingMode::Max] {
            assert_eq!(pool_query(&g, &one, 0, mode).unwrap(), vec![4., -1.]);
        }
        let none = seq_from_rows(&mut g, &[9., 9.], vec![Cls]);
        assert!(pool_query(&g, &none, 0, PoolingMode::Average).is_err());
    }

    #[test]
    fn static_prompts_are_seeded() {
        let make = || {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let id = make_static_prompts(&mut store, Modality::Vision, 4, 64, &mut rng).unwrap();
            assert_eq!(store.value(id).shape(), &[4, 64]);
            store.value(id).clone()
        };
        assert_eq!(make(), make());
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_static_prompts(&mut store, Modality::Vision, 0, 64, &mut rng).is_err());
    }

    struct Fixture {
        store: ParamStore<f64>,
        emb: EmbeddingParams,
        bank: PromptBank,
    }

    fn fixture(mode: PromptMode) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let emb = EmbeddingParams::new(
            EmbeddingConfig {
                vocab_size: 12,
                d_model: 8,
                max_text_len: 8,
                image_size: 16,
                channels: 3,
                patch_size: 8,
            },
            &mut store,
            &mut rng,
        )
        .unwrap();
        let config = PromptConfig {
            k: 4,
            pool_size: 10,
            mode,
            pooling: PoolingMode::Average,
        };
        let bank = PromptBank::new(config, 8, &mut store, &mut rng).unwrap();
        Fixture { store, emb, bank }
    }

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(16, 16, 3, (0..768).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn unify_cases() {
        let mut f = fixture(PromptMode::Pool);
        let vocab = build_vocab(["a b c d e f"], 12).unwrap();
        let mut g = Graph::new();
        let grids = vec![patchify(&image(1), 8).unwrap(), patchify(&image(2), 8).unwrap()];
        let v = embed_image(&mut g, &f.store, &f.emb, &grids).unwrap();
        let texts = vec![
            tokenize("a b c", &vocab, 8).unwrap(),
            tokenize("d e f a", &vocab, 8).unwrap(),
        ];
        let l = embed_text(&mut g, &f.store, &f.emb, &texts).unwrap();

        let pair = unify_input(&mut g, &f.store, &mut f.bank, &f.emb, Some(v.clone()), Some(l.clone())).unwrap();
        assert_eq!(pair.case, InputCase::Pair);
        assert_eq!(pair.vision.rows, v.rows);
        assert_eq!(pair.language.rows, l.rows);
        assert!(pair.vision.provenance.iter().chain(&pair.language.provenance).flatten().all(|&p| p != Provenance::Prompt));

        let img = unify_input(&mut g, &f.store, &mut f.bank, &f.emb, Some(v.clone()), None).unwrap();
        assert_eq!(img.case, InputCase::ImageOnly);
        assert_eq!(img.language.len, 5);
        let pool = f.store.value(f.bank.language_pool.as_ref().unwrap().param).clone();
        for b in 0..2 {
            assert!(img.language.provenance[b][1..].iter().all(|&p| p == Provenance::Prompt));
            let q = pool_query(&g, &v, b, PoolingMode::Average).unwrap();
            let expect = brute_force(&pool, &q, 4);
            let sel = img.selections[b].as_ref().unwrap();
            assert_eq!(sel.indices, expect);
            // Prompt rows are the selected pool rows, in selection order.
            let rows = img.language.sample_values(&g, b);
            for (slot, &i) in expect.iter().enumerate() {
                assert_eq!(&rows[(slot + 1) * 8..(slot + 2) * 8], pool.row(i));
            }
        }
        let counts = &f.bank.language_pool.as_ref().unwrap().selection_counts;
        assert_eq!(counts.iter().sum::<u64>(), 8);

        let txt = unify_input(&mut g, &f.store, &mut f.bank, &f.emb, None, Some(l)).unwrap();
        assert_eq!(txt.case, InputCase::TextOnly);
        assert_eq!(txt.vision.len, 5);
        assert_eq!(txt.vision.modality, Modality::Vision);

        assert!(unify_input::<f64>(&mut g, &f.store, &mut f.bank, &f.emb, None, None).is_err());
    }

    #[test]
    fn static_mode_uses_the_same_block_for_every_input() {
        let mut f = fixture(PromptMode::Static);
        let mut g = Graph::new();
        let grids = vec![patchify(&image(3), 8).unwrap(), patchify(&image(4), 8).unwrap()];
        let v = embed_image(&mut g, &f.store, &f.emb, &grids).unwrap();
        let u = unify_input(&mut g, &f.store, &mut f.bank, &f.emb, Some(v), None).unwrap();
        assert_eq!(u.language.len, 5);
        assert!(u.selections.iter().all(Option::is_none));
        assert_eq!(u.language.sample_values(&g, 0), u.language.sample_values(&g, 1));
    }

    #[test]
    fn gradients_reach_only_selected_entries() {
        let mut f = fixture(PromptMode::Pool);
        let mut g = Graph::new();
        let v = embed_image(&mut g, &f.store, &f.emb, &[patchify(&image(9), 8).unwrap()]).unwrap();
        let u = unify_input(&mut g, &f.store, &mut f.bank, &f.emb, Some(v), None).unwrap();
        let loss = g.sum(u.language.rows).unwrap();
        g.backward(loss).unwrap();
        let pool_id = f.bank.language_pool.as_ref().unwrap().param;
        let grads = f.store.collect_grads(&g);
        let gp = &grads[&pool_id];
        let chosen = &u.selections[0].as_ref().unwrap().indices;
        for i in 0..10 {
            let nonzero = gp.row(i).iter().any(|&x| x != 0.0);
            assert_eq!(nonzero, chosen.contains(&i), "entry {i}");
        }
    }
}
