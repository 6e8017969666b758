//! Finite-difference verification suite behind the `grad-check` command:
//! every differentiable primitive plus the objective compositions, each at
//! several random points in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{transformer_layer, LayerParams};
use crate::embeddings::{EmbeddingSequence, Modality, Provenance};
use crate::error::Result;
use crate::numerics::{grad_check, AttentionSpec, GradReport, Graph, Tensor, Var};
use crate::objectives::{combined_loss, itc_loss, itm_loss, mlm_loss, ItcHead, LossWeights, MlpHead};
use crate::params::{ParamGroup, ParamStore};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_POINTS: usize = 5;

pub type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A function of some input tensors whose gradient is checked.
pub struct GradCase {
    pub name: &'static str,
    pub build: Builder,
    pub shapes: Vec<Vec<usize>>,
}

fn case(name: &'static str, shapes: Vec<Vec<usize>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        build: Box::new(build),
        shapes,
    }
}

pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        case("matmul", vec![vec![3, 4], vec![4, 2]], |g, x| g.matmul(x[0], x[1])),
        case("transpose", vec![vec![3, 2]], |g, x| g.transpose(x[0])),
        case("add", vec![vec![2, 3], vec![2, 3]], |g, x| g.add(x[0], x[1])),
        case("sub", vec![vec![2, 3], vec![2, 3]], |g, x| g.sub(x[0], x[1])),
        case("mul", vec![vec![2, 3], vec![2, 3]], |g, x| g.mul(x[0], x[1])),
        case("add_row", vec![vec![3, 4], vec![4]], |g, x| g.add_row(x[0], x[1])),
        case("scale", vec![vec![5]], |g, x| g.scale(x[0], -1.7)),
        case("gelu", vec![vec![2, 5]], |g, x| g.gelu(x[0])),
        case("exp", vec![vec![4]], |g, x| g.exp(x[0])),
        // Through exp so that the argument stays positive.
        case("log", vec![vec![4]], |g, x| {
            let e = g.exp(x[0])?;
            g.log(e)
        }),
        case("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, x| {
            g.layer_norm(x[0], x[1], x[2], 1e-5)
        }),
        case("softmax", vec![vec![2, 5]], |g, x| g.softmax(x[0], 1)),
        case("softmax_axis0", vec![vec![3, 2, 2]], |g, x| g.softmax(x[0], 0)),
        case("attention", vec![vec![6, 4], vec![8, 4], vec![8, 6]], |g, x| {
            let spec = AttentionSpec {
                batch: 2,
                heads: 2,
                q_len: 3,
                k_len: 4,
                key_mask: Some(vec![false, false, true, false, false, true, true, false]),
            };
            g.attention(x[0], x[1], x[2], spec)
        }),
        case("cross_entropy", vec![vec![3, 5]], |g, x| g.cross_entropy(x[0], &[2, 0, 4])),
        case("gather_rows", vec![vec![4, 3]], |g, x| g.gather_rows(x[0], &[1, 1, 0, 3])),
        case("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, x| g.concat_rows(&[x[0], x[1], x[0]])),
        case("concat_cols", vec![vec![2, 3], vec![2, 1]], |g, x| g.concat_cols(x[0], x[1])),
        case("l2_normalize_rows", vec![vec![3, 4]], |g, x| g.l2_normalize_rows(x[0])),
        case("sum", vec![vec![2, 2]], |g, x| g.sum(x[0])),
        case("mean", vec![vec![2, 3]], |g, x| g.mean(x[0])),
        case("dot", vec![vec![2, 3], vec![2, 3]], |g, x| g.dot(x[0], x[1])),
        case("reshape", vec![vec![2, 3]], |g, x| g.reshape(x[0], &[3, 2])),
        case("linear", vec![vec![3, 4], vec![4, 2], vec![2]], |g, x| g.linear(x[0], x[1], x[2])),
    ]
}

const D: usize = 4;
const VOCAB: usize = 7;
const TAU: f64 = 0.07;

fn sequence(rows: Var, batch: usize, len: usize) -> EmbeddingSequence {
    EmbeddingSequence {
        rows,
        batch,
        len,
        provenance: vec![vec![Provenance::Real; len]; batch],
        modality: Modality::Language,
    }
}

/// Heads and a layer with fixed random weights; checks differentiate with
/// respect to the representations fed into them.
struct Fixture {
    store: ParamStore<f64>,
    mlm: MlpHead,
    itm: MlpHead,
    itc: ItcHead,
    layer: LayerParams,
}

fn fixture() -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let mlm = MlpHead::new(&mut store, "mlm", [D, D, VOCAB], &mut rng)?;
    let itm = MlpHead::new(&mut store, "itm", [2 * D, D, 2], &mut rng)?;
    let itc = ItcHead::new(&mut store, D, 3, &mut rng)?;
    let layer = LayerParams::new(&mut store, "layer", D, 2 * D, ParamGroup::Backbone, &mut rng)?;
    // Larger weights than the training initialization so that the checks
    // see curvature.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for w in store.value_mut(id).data_mut() {
            *w += rng.random_range(-0.5..0.5);
        }
    }
    Ok(Fixture {
        store,
        mlm,
        itm,
        itc,
        layer,
    })
}

fn mlm_targets() -> Vec<Vec<(usize, u32)>> {
    vec![vec![(1, 3)], vec![(0, 5), (2, 1)]]
}

const ITM_LABELS: [bool; 4] = [true, false, false, true];

/// The objectives and the transformer layer as the model builds them.
pub fn loss_cases() -> Result<Vec<GradCase>> {
    let f = std::rc::Rc::new(fixture()?);
    let mut out = Vec::new();

    let fx = f.clone();
    out.push(case("mlm_loss", vec![vec![6, D]], move |g, x| {
        let zl = sequence(x[0], 2, 3);
        Ok(mlm_loss(g, &fx.store, &fx.mlm, &zl, &mlm_targets())?.loss)
    }));
    out.push(case(
        "mlm_head_composition",
        vec![vec![6, D], vec![D, D], vec![D], vec![D, VOCAB], vec![VOCAB]],
        |g, x| {
            let rows = g.gather_rows(x[0], &[1, 3, 5])?;
            let h = g.linear(rows, x[1], x[2])?;
            let h = g.gelu(h)?;
            let logits = g.linear(h, x[3], x[4])?;
            g.cross_entropy(logits, &[3, 5, 1])
        },
    ));
    let fx = f.clone();
    out.push(case("itm_loss", vec![vec![4, D], vec![4, D]], move |g, x| {
        itm_loss(g, &fx.store, &fx.itm, x[0], x[1], &ITM_LABELS)
    }));
    out.push(case("itc_loss", vec![vec![4, 3], vec![4, 3]], |g, x| {
        let zv = g.l2_normalize_rows(x[0])?;
        let zl = g.l2_normalize_rows(x[1])?;
        itc_loss(g, zv, zl, TAU)
    }));
    let fx = f.clone();
    out.push(case("itc_head_composition", vec![vec![4, D], vec![4, D]], move |g, x| {
        let zv = fx.itc.embed(g, &fx.store, x[0], Modality::Vision)?;
        let zl = fx.itc.embed(g, &fx.store, x[1], Modality::Language)?;
        itc_loss(g, zv, zl, TAU)
    }));
    let fx = f.clone();
    out.push(case(
        "combined_loss",
        vec![vec![6, D], vec![2, D], vec![2, D]],
        move |g, x| {
            let zl = sequence(x[0], 2, 3);
            let mlm = mlm_loss(g, &fx.store, &fx.mlm, &zl, &mlm_targets())?.loss;
            let itm = itm_loss(g, &fx.store, &fx.itm, x[1], x[2], &[true, false])?;
            let zv = fx.itc.embed(g, &fx.store, x[1], Modality::Vision)?;
            let zt = fx.itc.embed(g, &fx.store, x[2], Modality::Language)?;
            let itc = itc_loss(g, zv, zt, TAU)?;
            let weights = LossWeights {
                mlm: 1.0,
                itm: 0.5,
                itc: 2.0,
            };
            Ok(combined_loss(g, Some(mlm), Some(itm), Some(itc), weights)?.0)
        },
    ));
    let fx = f;
    out.push(case("transformer_layer", vec![vec![6, D]], move |g, x| {
        let mask = Some(vec![false, false, false, false, false, true]);
        transformer_layer(g, &fx.store, &fx.layer, x[0], 2, 2, 3, mask)
    }));
    Ok(out)
}

/// Runs every case at `points` random inputs drawn from `seed`. Report
/// names carry the point index, as in `gelu#2`.
pub fn run_suite(points: usize, seed: u64, tolerance: f64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for case in primitive_cases().into_iter().chain(loss_cases()?) {
        for p in 0..points {
            let inputs = case
                .shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), s)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut r = grad_check(case.name, &case.build, &inputs, tolerance)?;
            r.op_name = format!("{}#{p}", case.name);
            reports.push(r);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_compositions_pass() {
        let reports = run_suite(2, 3, DEFAULT_TOLERANCE).unwrap();
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
        assert!(reports.iter().any(|r| r.op_name == "combined_loss#1"));
    }
}
