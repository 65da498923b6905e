//! Multi-stage training: supervised pretraining, contrastive pseudo learning,
//! then clustering-based iterative fine-tuning. Every stage works in place on
//! a model and returns per-epoch logs.

mod config;
mod report;

use std::path::Path;

use crate::cluster::{semisup_kmeans, ClusterState, KMeansConfig};
use crate::data::{BatchSampler, Dataset, Protocol, SamplerMode, SplitKind};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_predictions, hungarian, EvalResult};
use crate::model::{pool_local, Checkpoint, ExtractorConfig, Model, ModelConfig, StageTag};
use crate::objective::{loss_ce, regularizer, total_loss, Components, PairingMode, Prior, PseudoMode};
use crate::pairing::{loss_glv, loss_gr, select_pairs, PairStats, SimilarityTables};
use crate::pseudo::{hard_pseudo_baseline, lambda_histogram, loss_csp, soft_pseudo_labels, DrawKey};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};

pub use config::{Ablation, StageConfig};
pub use report::{RunReport, StageRow};

/// Rows per inference chunk.
const INFER_CHUNK: usize = 256;

/// Sampler streams, one per consumer of the run seed.
const STREAM_STAGE1: u64 = 1;
const STREAM_STAGE2: u64 = 2;
const STREAM_STAGE3: u64 = 3;
const STREAM_UPPER: u64 = 4;
const STREAM_KMEANS: u64 = 5;

/// Per-epoch means of every loss term plus diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: f64,
    pub ce: f64,
    pub pairing: f64,
    pub pseudo: f64,
    pub reg: f64,
    pub pairs: PairStats,
    pub lambda_hist: [usize; 10],
}

impl EpochLog {
    fn add(&mut self, s: &StepLosses) {
        self.steps += 1;
        self.loss += s.total;
        self.ce += s.ce;
        self.pairing += s.pairing;
        self.pseudo += s.pseudo;
        self.reg += s.reg;
    }

    fn finish(mut self) -> Self {
        let n = self.steps.max(1) as f64;
        for v in [&mut self.loss, &mut self.ce, &mut self.pairing, &mut self.pseudo, &mut self.reg] {
            *v /= n;
        }
        self
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct StepLosses {
    total: f64,
    ce: f64,
    pairing: f64,
    pseudo: f64,
    reg: f64,
}

/// A fresh model with one head per benchmark class.
pub fn init_model(ds: &Dataset, seed: u64) -> Result<Model<f32>> {
    let extractor = ExtractorConfig {
        input_size: ds.spec.image_size,
        ..ExtractorConfig::default()
    };
    Ok(Model::init(ModelConfig::new(extractor, ds.num_classes())?, seed))
}

/// The label prior: uniform, or proportional to per-class counts when real
/// classes are oversampled.
pub fn prior_for(ds: &Dataset) -> Result<Prior> {
    match ds.spec.protocol {
        Protocol::P1 => Ok(Prior::uniform(ds.num_classes())),
        Protocol::P2 => {
            let counts: Vec<usize> = ds
                .classes
                .iter()
                .map(|c| ds.spec.count(c, SplitKind::Unlabeled))
                .collect();
            Prior::from_counts(&counts)
        }
    }
}

fn read32(g: &Graph<f32>, v: crate::tensor::Var) -> Tensor<f64> {
    g.value(v).cast()
}

/// One optimizer step on the cross-entropy of `labels` (the whole batch).
fn supervised_step(model: &mut Model<f32>, adam: &mut Adam<f32>, x: Tensor<f32>, labels: &[usize]) -> Result<StepLosses> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let xv = g.constant(x);
    let out = model.forward(&mut g, &bound, xv)?;
    let ce = loss_ce(&mut g, out.probs, labels)?;
    let value = g.value(ce).data()[0] as f64;
    apply(model, adam, &mut g, &bound, ce)?;
    Ok(StepLosses {
        total: value,
        ce: value,
        ..StepLosses::default()
    })
}

fn apply(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    g: &mut Graph<f32>,
    bound: &crate::model::BoundModel,
    loss: crate::tensor::Var,
) -> Result<()> {
    let mut grads = g.backward(loss)?;
    let gs: Vec<Option<Tensor<f32>>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    let refs: Vec<Option<&Tensor<f32>>> = gs.iter().map(Option::as_ref).collect();
    adam.step(model.params_mut(), &refs)?;
    Ok(())
}

fn adam_for(model: &Model<f32>, cfg: &StageConfig) -> Adam<f32> {
    Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params(),
    )
}

fn labels_of(split: &crate::data::Split, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| split.labels[i] as usize).collect()
}

/// Stage 1: `t1` epochs of cross-entropy on labeled-only batches.
pub fn stage1_pretrain(model: &mut Model<f32>, ds: &Dataset, cfg: &StageConfig) -> Result<Vec<EpochLog>> {
    if ds.labeled.is_empty() {
        return Err(Error::Invalid("pretraining needs a labeled split".into()));
    }
    let sampler = BatchSampler::new(
        ds.labeled.len(),
        0,
        cfg.batch_size,
        SamplerMode::LabeledOnly,
        cfg.seed,
        STREAM_STAGE1,
    )?;
    let mut adam = adam_for(model, cfg);
    let mut logs = Vec::new();
    for e in 0..cfg.t1 {
        adam.set_lr(cfg.lr_at(e));
        let mut log = EpochLog {
            stage: StageTag::Pretrain.to_string(),
            epoch: e,
            lr: cfg.lr_at(e),
            ..EpochLog::default()
        };
        for b in sampler.epoch(e) {
            let s = supervised_step(model, &mut adam, ds.labeled.gather(&b.labeled), &labels_of(&ds.labeled, &b.labeled))?;
            log.add(&s);
        }
        logs.push(log.finish());
    }
    Ok(logs)
}

fn mixed_sampler(ds: &Dataset, cfg: &StageConfig, unlabeled_len: usize, stream: u64) -> Result<BatchSampler> {
    let mode = if unlabeled_len == 0 {
        SamplerMode::LabeledOnly
    } else {
        SamplerMode::HalfAndHalf
    };
    BatchSampler::new(ds.labeled.len(), unlabeled_len, cfg.batch_size, mode, cfg.seed, stream)
}

/// Pair selection on one half-labeled batch, without training.
fn batch_pairs(
    model: &Model<f32>,
    ds: &Dataset,
    cfg: &StageConfig,
    lab: &[usize],
    unl: &[usize],
    key: [u64; 2],
) -> Result<(PairStats, crate::pairing::PairAssignment)> {
    let x = concat_batch(ds, lab, unl)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let xv = g.constant(x);
    let out = model.forward(&mut g, &bound, xv)?;
    let local = pool_local(&mut g, out.feature_map, cfg.q)?;
    let tables = SimilarityTables::new(&read32(&g, out.global), &read32(&g, local))?;
    let (labels, truth) = batch_labels(ds, lab, unl);
    let pairs = select_pairs(&labels, &tables, &mut rng::stream(cfg.seed, &[0x9A1, key[0], key[1]]));
    let mut stats = PairStats::default();
    stats.record(&pairs, &truth, |c| ds.is_novel(c));
    Ok((stats, pairs))
}

fn concat_batch(ds: &Dataset, lab: &[usize], unl: &[usize]) -> Result<Tensor<f32>> {
    let a = ds.labeled.gather(lab);
    let b = ds.unlabeled.gather(unl);
    let mut shape = a.shape().to_vec();
    shape[0] += unl.len();
    let mut data = a.into_data();
    data.extend_from_slice(b.data());
    Ok(Tensor::new(shape, data)?)
}

/// `Some(label)` for labeled rows, plus the ground truth of every row.
fn batch_labels(ds: &Dataset, lab: &[usize], unl: &[usize]) -> (Vec<Option<usize>>, Vec<usize>) {
    let known = labels_of(&ds.labeled, lab);
    let hidden = labels_of(&ds.unlabeled, unl);
    let labels = known.iter().map(|&y| Some(y)).chain(hidden.iter().map(|_| None)).collect();
    (labels, known.into_iter().chain(hidden).collect())
}

/// Pair statistics of one full epoch of half-labeled batches under the current
/// model, with no parameter updates.
pub fn measure_pairs(model: &Model<f32>, ds: &Dataset, cfg: &StageConfig) -> Result<PairStats> {
    let sampler = mixed_sampler(ds, cfg, ds.unlabeled.len(), STREAM_STAGE2)?;
    let mut total = PairStats::default();
    for (i, b) in sampler.epoch(0).iter().enumerate() {
        let (s, _) = batch_pairs(model, ds, cfg, &b.labeled, &b.unlabeled, [u64::MAX, i as u64])?;
        total.merge(&s);
    }
    Ok(total)
}

/// Stage 2: `t2` epochs of the full objective on half-labeled batches. An epoch
/// is one pass over the labeled pool.
pub fn stage2_cpl(model: &mut Model<f32>, ds: &Dataset, cfg: &StageConfig) -> Result<Vec<EpochLog>> {
    let w = cfg.weights;
    let prior = prior_for(ds)?;
    let sampler = mixed_sampler(ds, cfg, ds.unlabeled.len(), STREAM_STAGE2)?;
    let mut adam = adam_for(model, cfg);
    let mut logs = Vec::new();
    let mut iteration = 0u64;
    for e in 0..cfg.t2 {
        adam.set_lr(cfg.lr_at(e));
        let mut log = EpochLog {
            stage: StageTag::Cpl.to_string(),
            epoch: e,
            lr: cfg.lr_at(e),
            ..EpochLog::default()
        };
        for (bi, b) in sampler.epoch(e).iter().enumerate() {
            let (lab, unl) = (&b.labeled, &b.unlabeled);
            let n = lab.len();
            let x = concat_batch(ds, lab, unl)?;
            let (labels, truth) = batch_labels(ds, lab, unl);
            let known: Vec<usize> = labels[..n].iter().map(|y| y.expect("labeled row")).collect();

            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let xv = g.constant(x);
            let out = model.forward(&mut g, &bound, xv)?;
            let p_l = g.slice_rows(out.probs, 0, n)?;
            let ce = loss_ce(&mut g, p_l, &known)?;

            let pairing = if w.pairing == PairingMode::None {
                None
            } else {
                let local = pool_local(&mut g, out.feature_map, cfg.q)?;
                let tables = SimilarityTables::new(&read32(&g, out.global), &read32(&g, local))?;
                let mut prng = rng::stream(cfg.seed, &[0x9A1, e as u64, bi as u64]);
                let pairs = select_pairs(&labels, &tables, &mut prng);
                log.pairs.record(&pairs, &truth, |c| ds.is_novel(c));
                Some(match w.pairing {
                    PairingMode::Gr => loss_gr(&mut g, out.probs, &pairs.global_top1()?)?,
                    _ => loss_glv(&mut g, out.probs, &pairs)?,
                })
            };

            let pseudo = if w.pseudo == PseudoMode::None || unl.is_empty() {
                None
            } else {
                let p_u = g.slice_rows(out.probs, n, unl.len())?;
                let values = read32(&g, p_u);
                let labels = match w.pseudo {
                    PseudoMode::Hard => hard_pseudo_baseline(&values, cfg.hard_threshold)?,
                    _ => {
                        let key = DrawKey {
                            seed: cfg.seed,
                            stage: 2,
                            iteration,
                            resample: cfg.resample_pseudo,
                        };
                        soft_pseudo_labels(&values, unl, cfg.tau, key)?
                    }
                };
                for (h, c) in log.lambda_hist.iter_mut().zip(lambda_histogram(&labels)) {
                    *h += c;
                }
                Some(loss_csp(&mut g, p_u, &labels)?)
            };

            let reg = if unl.is_empty() {
                None
            } else {
                Some(regularizer(&mut g, out.probs, &prior)?)
            };
            let parts = Components { ce, pairing, pseudo, reg };
            let total = total_loss(&mut g, parts, &w)?;
            let val = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| g.value(v).data()[0] as f64);
            let s = StepLosses {
                total: val(Some(total)),
                ce: val(Some(ce)),
                pairing: val(pairing),
                pseudo: val(pseudo),
                reg: val(reg),
            };
            apply(model, &mut adam, &mut g, &bound, total)?;
            log.add(&s);
            iteration += 1;
        }
        logs.push(log.finish());
    }
    Ok(logs)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cluster pseudo-labels of the unlabeled split, aligned to classifier heads.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    /// One head per unlabeled sample; `None` when its cluster has no head.
    pub heads: Vec<Option<usize>>,
    pub clustering: ClusterState,
}

/// Clusters stage-2 features of the training pool and maps clusters onto heads.
/// Known clusters keep their class head; the other clusters are matched to the
/// remaining heads by the Hungarian algorithm on cluster-vs-argmax counts.
pub fn cluster_pseudo_labels(model: &Model<f32>, ds: &Dataset, cfg: &StageConfig) -> Result<PseudoLabelSet> {
    let c = ds.num_classes();
    let known = ds.known_classes();
    let n_known = known.len();
    if known.iter().enumerate().any(|(i, &k)| i != k) {
        return Err(Error::Invalid("known classes must occupy the first class ids".into()));
    }
    let (fl, _) = model.infer(&ds.labeled.images, INFER_CHUNK)?;
    let (fu, pu) = model.infer(&ds.unlabeled.images, INFER_CHUNK)?;
    let d = fl.shape()[1];
    let kcfg = KMeansConfig {
        k: if cfg.kmeans_k == 0 { c } else { cfg.kmeans_k },
        tol: cfg.kmeans_tol,
        max_iter: cfg.kmeans_max_iter,
    };
    let labels = labels_of(&ds.labeled, &(0..ds.labeled.len()).collect::<Vec<_>>());
    let mut krng = rng::stream(cfg.seed, &[STREAM_KMEANS]);
    let st = semisup_kmeans(fl.data(), &labels, fu.data(), d, n_known, &kcfg, &mut krng)?;
    let k = st.centroids.len() / d;

    // clusters n_known..k against heads n_known..c
    let (extra_clusters, extra_heads) = (k - n_known, c - n_known);
    let size = extra_clusters.max(extra_heads);
    let mut counts = vec![vec![0i64; size]; size];
    for (i, &a) in st.unlabeled_assignments.iter().enumerate() {
        let h = argmax(&pu.data()[i * c..(i + 1) * c]);
        if a >= n_known && h >= n_known {
            counts[a - n_known][h - n_known] += 1;
        }
    }
    let matched = hungarian(&counts);
    let heads = st
        .unlabeled_assignments
        .iter()
        .map(|&a| {
            if a < n_known {
                Some(a)
            } else {
                let h = matched[a - n_known];
                (h < extra_heads).then_some(h + n_known)
            }
        })
        .collect();
    Ok(PseudoLabelSet { heads, clustering: st })
}

/// Stage 3: fine-tune `t3` epochs with cross-entropy on labeled data plus
/// cluster pseudo-labeled data, in half-and-half batches.
pub fn stage3_iterative(model: &mut Model<f32>, ds: &Dataset, cfg: &StageConfig) -> Result<(Vec<EpochLog>, PseudoLabelSet)> {
    let pseudo = if ds.unlabeled.is_empty() {
        PseudoLabelSet {
            heads: Vec::new(),
            clustering: ClusterState {
                centroids: Vec::new(),
                labeled_assignments: Vec::new(),
                unlabeled_assignments: Vec::new(),
                history: Vec::new(),
                converged: true,
            },
        }
    } else {
        cluster_pseudo_labels(model, ds, cfg)?
    };
    let pool: Vec<usize> = (0..pseudo.heads.len()).filter(|&i| pseudo.heads[i].is_some()).collect();
    let sampler = mixed_sampler(ds, cfg, pool.len(), STREAM_STAGE3)?;
    let mut adam = adam_for(model, cfg);
    let mut logs = Vec::new();
    for e in 0..cfg.t3 {
        adam.set_lr(cfg.lr_at(e));
        let mut log = EpochLog {
            stage: StageTag::Iterative.to_string(),
            epoch: e,
            lr: cfg.lr_at(e),
            ..EpochLog::default()
        };
        for b in sampler.epoch(e) {
            let unl: Vec<usize> = b.unlabeled.iter().map(|&i| pool[i]).collect();
            let x = concat_batch(ds, &b.labeled, &unl)?;
            let mut labels = labels_of(&ds.labeled, &b.labeled);
            labels.extend(unl.iter().map(|&i| pseudo.heads[i].expect("pooled samples have heads")));
            log.add(&supervised_step(model, &mut adam, x, &labels)?);
        }
        logs.push(log.finish());
    }
    Ok((logs, pseudo))
}

/// Reference model trained from scratch with every training label revealed,
/// `upper_epochs` epochs of half-and-half batches.
pub fn upper_bound(ds: &Dataset, cfg: &StageConfig) -> Result<(Model<f32>, Vec<EpochLog>)> {
    let mut model = init_model(ds, cfg.seed)?;
    let sampler = mixed_sampler(ds, cfg, ds.unlabeled.len(), STREAM_UPPER)?;
    let mut adam = adam_for(&model, cfg);
    let mut logs = Vec::new();
    for e in 0..cfg.upper_epochs {
        adam.set_lr(cfg.lr_at(e));
        let mut log = EpochLog {
            stage: StageTag::UpperBound.to_string(),
            epoch: e,
            lr: cfg.lr_at(e),
            ..EpochLog::default()
        };
        for b in sampler.epoch(e) {
            let x = concat_batch(ds, &b.labeled, &b.unlabeled)?;
            let (_, truth) = batch_labels(ds, &b.labeled, &b.unlabeled);
            log.add(&supervised_step(&mut model, &mut adam, x, &truth)?);
        }
        logs.push(log.finish());
    }
    Ok((model, logs))
}

/// Test-split metrics from argmax predictions.
pub fn evaluate(model: &Model<f32>, ds: &Dataset) -> Result<EvalResult> {
    let (_, probs) = model.infer(&ds.test.images, INFER_CHUNK)?;
    let c = ds.num_classes();
    let pred: Vec<usize> = probs.data().chunks(c).map(argmax).collect();
    let truth: Vec<usize> = ds.test.labels.iter().map(|&l| l as usize).collect();
    let novel: Vec<bool> = truth.iter().map(|&t| ds.is_novel(t)).collect();
    let real = ds.real_classes();
    let is_real: Vec<bool> = truth.iter().map(|t| real.contains(t)).collect();
    let with_auc = ds.spec.protocol == Protocol::P2 && is_real.iter().any(|&r| r) && is_real.iter().any(|&r| !r);
    let real_args = with_auc.then(|| (probs.data(), c, real.as_slice(), is_real.as_slice()));
    evaluate_predictions(&pred, &truth, &novel, real_args)
}

/// Which stages a run executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    One,
    Two,
    Three,
    All,
}

impl std::str::FromStr for StageSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(StageSelection::One),
            "2" => Ok(StageSelection::Two),
            "3" => Ok(StageSelection::Three),
            "all" => Ok(StageSelection::All),
            other => Err(Error::Config(format!("unknown stage `{other}`; use 1, 2, 3 or all"))),
        }
    }
}

/// Refuses checkpoints from the wrong point of the pipeline.
pub fn check_resume(wanted: StageSelection, ckpt: &Checkpoint, cfg: &StageConfig) -> Result<()> {
    let ok = match wanted {
        StageSelection::One | StageSelection::All => ckpt.stage == StageTag::Init,
        StageSelection::Two => {
            ckpt.stage == StageTag::Pretrain || (cfg.stage2_from_scratch && ckpt.stage == StageTag::Init)
        }
        StageSelection::Three => ckpt.stage == StageTag::Cpl,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::IncompatibleCheckpoint(format!(
            "a {} checkpoint cannot start stage {wanted:?}",
            ckpt.stage
        )))
    }
}

/// Runs the selected stages, writing one checkpoint per finished stage into
/// `out`, and returns the report. Without `resume`, stages 2 and 3 start from
/// a fresh model only when the config allows it.
pub fn run(
    ds: &Dataset,
    cfg: &StageConfig,
    stages: StageSelection,
    resume: Option<Checkpoint>,
    out: Option<&Path>,
) -> Result<RunReport> {
    cfg.validate()?;
    let start = match resume {
        Some(ck) => {
            check_resume(stages, &ck, cfg)?;
            ck
        }
        None => {
            let model = init_model(ds, cfg.seed)?;
            let ck = Checkpoint {
                stage: StageTag::Init,
                model,
            };
            if stages != StageSelection::One && stages != StageSelection::All && !cfg.stage2_from_scratch {
                return Err(Error::Config(format!(
                    "stage {stages:?} needs --resume with an earlier checkpoint (or stage2_from_scratch = true)"
                )));
            }
            if stages == StageSelection::Three {
                return Err(Error::Config("stage 3 needs a stage-2 checkpoint".into()));
            }
            ck
        }
    };
    let mut report = RunReport::new(cfg, ds);
    let mut model = start.model;
    let save = |tag: StageTag, model: &Model<f32>| -> Result<()> {
        if let Some(dir) = out {
            let ck = Checkpoint {
                stage: tag,
                model: model.clone(),
            };
            crate::model::save_checkpoint(&dir.join(format!("{tag}.ckpt")), &ck)?;
        }
        Ok(())
    };
    if matches!(stages, StageSelection::One | StageSelection::All) {
        report.logs.extend(stage1_pretrain(&mut model, ds, cfg)?);
        save(StageTag::Pretrain, &model)?;
        report.rows.push(StageRow::new("S1-Pretrain", evaluate(&model, ds)?));
        if cfg.weights.pairing != PairingMode::None && !ds.unlabeled.is_empty() {
            report.vote_check = Some(measure_pairs(&model, ds, cfg)?);
        }
    }
    if matches!(stages, StageSelection::Two | StageSelection::All) {
        report.logs.extend(stage2_cpl(&mut model, ds, cfg)?);
        save(StageTag::Cpl, &model)?;
        report.rows.push(StageRow::new("S2-CPL", evaluate(&model, ds)?));
    }
    if matches!(stages, StageSelection::Three | StageSelection::All) {
        let (logs, pseudo) = stage3_iterative(&mut model, ds, cfg)?;
        report.logs.extend(logs);
        report.kmeans = Some(report::KMeansSummary::of(&pseudo.clustering));
        if let Some(dir) = out {
            let labels: Vec<u32> = pseudo.heads.iter().map(|h| h.map_or(u32::MAX, |h| h as u32)).collect();
            crate::data::save_labels(&dir.join("pseudo.labels.bin"), &labels)?;
        }
        save(StageTag::Iterative, &model)?;
        report.rows.push(StageRow::new("S3-IL", evaluate(&model, ds)?));
    }
    if stages == StageSelection::All && cfg.upper_epochs > 0 {
        let (upper, logs) = upper_bound(ds, cfg)?;
        report.logs.extend(logs);
        save(StageTag::UpperBound, &upper)?;
        report.rows.push(StageRow::new("Upper", evaluate(&upper, ds)?));
    }
    Ok(report)
}
