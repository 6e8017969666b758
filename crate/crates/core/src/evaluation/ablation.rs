use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use super::classify::{task_features, ClassifierHead, TaskData, TaskMode};
use super::retrieval::{itc_embed_images, itc_embed_texts, retrieval_corpus, retrieval_reports, RetrievalMode};
use crate::data::{Batcher, Split};
use crate::embeddings::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Real, Tensor};
use crate::objectives::Objectives;
use crate::training::{TrainConfig, Trainer};

/// Generator streams of the downstream task sets.
pub const TASK_TRAIN_STREAM: u64 = 101;
pub const TASK_TEST_STREAM: u64 = 102;

/// Results of one (objective set, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    /// 1-based position of the objective set in the grid.
    pub id: usize,
    pub objectives: Objectives,
    pub label: String,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub i2t_r1: f64,
    pub t2i_r1: f64,
    /// Mean of both retrieval directions.
    pub r1: f64,
    /// Image-only accuracy per data fraction.
    pub image_acc: Vec<f64>,
    /// Multimodal accuracy per data fraction.
    pub vqa_acc: Vec<f64>,
    pub seconds: f64,
}

impl AblationRow {
    pub fn mean_vqa(&self) -> f64 {
        self.vqa_acc.iter().sum::<f64>() / self.vqa_acc.len().max(1) as f64
    }
}

/// A pairwise ordering claim checked per seed and decided by majority.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub claim: String,
    pub per_seed: Vec<bool>,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub fractions: Vec<f64>,
    pub configs: Vec<Objectives>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub verdicts: Vec<Verdict>,
    pub seconds: f64,
}

pub const ITC_RETRIEVAL: &str = "itc_improves_retrieval";
pub const FUSION_VQA: &str = "fusion_objectives_improve_vqa";

/// Data shared by every run of the grid.
pub struct AblationData<'a> {
    pub train: &'a Split,
    pub test: &'a Split,
    pub vocab: &'a Vocabulary,
}

fn majority(per_seed: &[bool]) -> bool {
    2 * per_seed.iter().filter(|&&x| x).count() > per_seed.len()
}

/// For each seed, whether every row of `better` beats every row of `worse`
/// on `metric`. `None` when either group is empty.
fn ordering(
    rows: &[AblationRow],
    seeds: &[u64],
    better: impl Fn(&Objectives) -> bool,
    worse: impl Fn(&Objectives) -> bool,
    metric: impl Fn(&AblationRow) -> f64,
) -> Option<Vec<bool>> {
    let mut out = Vec::new();
    for &s in seeds {
        let of = |f: &dyn Fn(&Objectives) -> bool| -> Vec<f64> {
            rows.iter().filter(|r| r.seed == s && f(&r.objectives)).map(&metric).collect()
        };
        let (b, w) = (of(&better), of(&worse));
        if b.is_empty() || w.is_empty() {
            return None;
        }
        let lo = b.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.push(lo > hi);
    }
    Some(out)
}

fn verdicts(rows: &[AblationRow], seeds: &[u64]) -> Vec<Verdict> {
    let mut out = Vec::new();
    if let Some(per_seed) = ordering(rows, seeds, |o| o.itc, |o| !o.itc, |r| r.r1) {
        out.push(Verdict {
            name: ITC_RETRIEVAL.into(),
            claim: "objective sets with ITC beat those without on zero-shot Recall@1".into(),
            holds: majority(&per_seed),
            per_seed,
        });
    }
    let fusion = |o: &Objectives| o.mlm && o.itm;
    let itc_only = |o: &Objectives| o.itc && !o.mlm && !o.itm;
    if let Some(per_seed) = ordering(rows, seeds, fusion, itc_only, AblationRow::mean_vqa) {
        out.push(Verdict {
            name: FUSION_VQA.into(),
            claim: "objective sets with MLM and ITM beat ITC alone on multimodal accuracy".into(),
            holds: majority(&per_seed),
            per_seed,
        });
    }
    out
}

fn head_accuracy<T: Real>(
    model: &Model<T>,
    train: (&TaskData, &Tensor<T>),
    test: (&TaskData, &Tensor<T>),
    n: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let sub = TaskData {
        mode: train.0.mode,
        grids: Vec::new(),
        tokens: Vec::new(),
        labels: train.0.labels[..n].to_vec(),
    };
    let d2 = train.1.cols();
    let feats = Tensor::new(train.1.data()[..n * d2].to_vec(), &[n, d2])?;
    let head: ClassifierHead<T> = super::classify::fit_head(&sub, &feats, model.config.d_model, &config.eval, seed)?.0;
    Ok(super::classify::accuracy(&head.predict(test.1)?, &test.0.labels))
}

/// Pretrains every objective set of `base.ablation` under every seed for
/// `pretrain_steps`, then measures zero-shot Recall@1 on the test split
/// and frozen-feature image-only and multimodal accuracy for each
/// fine-tuning data fraction. `progress` sees each row as it completes.
pub fn run_ablation<T: Real>(
    base: &TrainConfig,
    data: AblationData,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let grid = &base.ablation;
    if grid.configs.len() < 2 {
        return Err(Error::Config("an ablation needs at least two objective sets".into()));
    }
    if grid.seeds.is_empty() || grid.fractions.is_empty() {
        return Err(Error::Config("an ablation needs seeds and data fractions".into()));
    }
    if let Some(f) = grid.fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config(format!("data fraction {f} outside (0, 1]")));
    }
    let start = Instant::now();
    let mc = &base.model;
    let (grids, texts) = retrieval_corpus(data.test, data.vocab, mc, base.eval.retrieval_n)?;
    let ev = &base.eval;
    let vqa_train = TaskData::generate(ev.vqa_train, ev.vqa_rho, base.seed, TASK_TRAIN_STREAM, data.vocab, mc, TaskMode::Multimodal)?;
    let vqa_test = TaskData::generate(ev.vqa_test, ev.vqa_rho, base.seed, TASK_TEST_STREAM, data.vocab, mc, TaskMode::Multimodal)?;
    // Same scenes, shape label, caption withheld.
    let ic_train = vqa_train.with_mode(TaskMode::ImageOnly, vqa_train.labels.clone())?;
    let ic_test = vqa_test.with_mode(TaskMode::ImageOnly, vqa_test.labels.clone())?;
    let batcher = Batcher::for_model(data.vocab, mc);

    let mut rows = Vec::new();
    for &seed in &grid.seeds {
        for (ci, &objectives) in grid.configs.iter().enumerate() {
            let t0 = Instant::now();
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.objectives = objectives;
            cfg.total_steps = grid.pretrain_steps;
            let mut trainer = Trainer::<T>::new(cfg.clone())?;
            let last = trainer.fit(data.train, &batcher, |_, _| Ok(()))?;
            let model = trainer.model;

            let zv = itc_embed_images(&model, &grids)?;
            let zl = itc_embed_texts(&model, &texts)?;
            let [i2t, t2i] = retrieval_reports(&zv, &zl, &[1], RetrievalMode::ZeroShot)?;

            let mut image_acc = Vec::new();
            let mut vqa_acc = Vec::new();
            for (acc, tr, te) in [(&mut image_acc, &ic_train, &ic_test), (&mut vqa_acc, &vqa_train, &vqa_test)] {
                let ftr = task_features(&model, tr)?;
                let fte = task_features(&model, te)?;
                for &f in &grid.fractions {
                    let n = ((tr.len() as f64 * f).ceil() as usize).clamp(1, tr.len());
                    acc.push(head_accuracy(&model, (tr, &ftr), (te, &fte), n, &cfg, seed)?);
                }
            }
            let row = AblationRow {
                id: ci + 1,
                objectives,
                label: objectives.label(),
                seed,
                final_loss: last.map(|l| l.total),
                i2t_r1: i2t.recall_at[&1],
                t2i_r1: t2i.recall_at[&1],
                r1: 0.5 * (i2t.recall_at[&1] + t2i.recall_at[&1]),
                image_acc,
                vqa_acc,
                seconds: t0.elapsed().as_secs_f64(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    let verdicts = verdicts(&rows, &grid.seeds);
    Ok(AblationReport {
        fractions: grid.fractions.clone(),
        configs: grid.configs.clone(),
        seeds: grid.seeds.clone(),
        rows,
        verdicts,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn pct(f: f64) -> String {
    let p = f * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}%", p.round())
    } else {
        format!("{p}%")
    }
}

impl AblationReport {
    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    /// Seed-averaged metrics per objective set as an aligned text table,
    /// followed by the verdicts.
    pub fn table(&self) -> String {
        let mut header = vec!["ID".to_string(), "MLM".into(), "ITM".into(), "ITC".into()];
        header.extend(self.fractions.iter().map(|&f| format!("IC {}", pct(f))));
        header.extend(["R@1 i2t".to_string(), "R@1 t2i".into()]);
        header.extend(self.fractions.iter().map(|&f| format!("VQA {}", pct(f))));
        let mut lines = vec![header];
        for (ci, o) in self.configs.iter().enumerate() {
            let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.id == ci + 1).collect();
            let mean = |f: &dyn Fn(&AblationRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len().max(1) as f64;
            let mark = |b: bool| if b { "x" } else { "" }.to_string();
            let mut line = vec![(ci + 1).to_string(), mark(o.mlm), mark(o.itm), mark(o.itc)];
            for i in 0..self.fractions.len() {
                line.push(format!("{:.3}", mean(&|r| r.image_acc[i])));
            }
            line.push(format!("{:.3}", mean(&|r| r.i2t_r1)));
            line.push(format!("{:.3}", mean(&|r| r.t2i_r1)));
            for i in 0..self.fractions.len() {
                line.push(format!("{:.3}", mean(&|r| r.vqa_acc[i])));
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(s, &w)| format!("{s:>w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        let _ = writeln!(out, "\nmeans over seeds {:?}", self.seeds);
        for v in &self.verdicts {
            let wins = v.per_seed.iter().filter(|&&x| x).count();
            let verdict = if v.holds { "holds" } else { "fails" };
            let _ = writeln!(out, "{}: {verdict} ({wins}/{} seeds): {}", v.name, v.per_seed.len(), v.claim);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: usize, o: Objectives, seed: u64, r1: f64, vqa: f64) -> AblationRow {
        AblationRow {
            id,
            objectives: o,
            label: o.label(),
            seed,
            final_loss: None,
            i2t_r1: r1,
            t2i_r1: r1,
            r1,
            image_acc: vec![0.5],
            vqa_acc: vec![vqa],
            seconds: 0.0,
        }
    }

    #[test]
    fn verdicts_follow_the_majority_of_seeds() {
        let set = |mlm, itm, itc| Objectives { mlm, itm, itc };
        let (fusion, itc, all) = (set(true, true, false), set(false, false, true), set(true, true, true));
        let mut rows = Vec::new();
        for (seed, itc_r1, itc_vqa) in [(0, 0.5, 0.3), (1, 0.4, 0.9), (2, 0.01, 0.3)] {
            rows.push(row(1, fusion, seed, 0.02, 0.8));
            rows.push(row(2, itc, seed, itc_r1, itc_vqa));
            rows.push(row(3, all, seed, 0.6, 0.85));
        }
        let v = verdicts(&rows, &[0, 1, 2]);
        assert_eq!(v[0].name, ITC_RETRIEVAL);
        assert_eq!(v[0].per_seed, vec![true, true, false]);
        assert!(v[0].holds);
        assert_eq!(v[1].per_seed, vec![true, false, true]);
        assert!(v[1].holds);
        let report = AblationReport {
            fractions: vec![1.0],
            configs: vec![fusion, itc, all],
            seeds: vec![0, 1, 2],
            rows,
            verdicts: v,
            seconds: 0.0,
        };
        let table = report.table();
        assert!(table.lines().next().unwrap().contains("VQA 100%"));
        assert_eq!(table.lines().filter(|l| l.trim_start().starts_with(['1', '2', '3'])).count(), 3);
    }

    #[test]
    fn verdicts_need_both_groups() {
        let set = |mlm, itm, itc| Objectives { mlm, itm, itc };
        let rows = vec![row(1, set(true, false, false), 0, 0.1, 0.2), row(2, set(true, true, false), 0, 0.1, 0.3)];
        assert!(verdicts(&rows, &[0]).is_empty());
    }
}
