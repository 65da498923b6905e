//! Global/local similarity, global-local voting and the pairwise losses.
//!
//! Pair selection works on detached `f64` copies of the features; the losses
//! take live probabilities so gradients reach both members of every pair.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var, EPS};

/// Pairwise tables of one batch, row-major `B×B`.
#[derive(Clone, Debug)]
pub struct SimilarityTables {
    pub batch: usize,
    pub s_global: Vec<f64>,
    pub s_local: Vec<f64>,
    /// `B×q²`, rows sum to one.
    pub weights: Vec<f64>,
    /// Patch pairs whose cosine was taken as 0 because one side had zero norm.
    pub zero_patch_pairs: usize,
}

impl SimilarityTables {
    pub fn new(global: &Tensor<f64>, local: &Tensor<f64>) -> Result<Self> {
        let s_global = global_similarity(global)?;
        let weights = spatial_weights(local)?;
        let (s_local, zero_patch_pairs) = local_similarity(local, &weights)?;
        Ok(Self {
            batch: global.shape()[0],
            s_global,
            s_local,
            weights,
            zero_patch_pairs,
        })
    }

    pub fn global(&self, i: usize, j: usize) -> f64 {
        self.s_global[i * self.batch + j]
    }

    pub fn local(&self, i: usize, j: usize) -> f64 {
        self.s_local[i * self.batch + j]
    }
}

fn dims2(t: &Tensor<f64>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, d] => Ok((b, d)),
        ref s => Err(Error::Invalid(format!("{what} must be [B, d], got {s:?}"))),
    }
}

fn dims4(t: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, d, q, q2] if q == q2 => Ok((b, d, q * q)),
        ref s => Err(Error::Invalid(format!("local features must be [B, d, q, q], got {s:?}"))),
    }
}

/// Cosine similarity of global features, `[B, d] → B×B`.
pub fn global_similarity(global: &Tensor<f64>) -> Result<Vec<f64>> {
    let (b, d) = dims2(global, "global features")?;
    let x = global.data();
    let mut norms = Vec::with_capacity(b);
    for i in 0..b {
        let n = x[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= EPS {
            return Err(Error::Invalid(format!("sample {i} has a zero-norm global feature")));
        }
        norms.push(n);
    }
    let mut s = vec![0.0; b * b];
    for i in 0..b {
        for j in i..b {
            let dot: f64 = (0..d).map(|k| x[i * d + k] * x[j * d + k]).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            s[i * b + j] = c;
            s[j * b + i] = c;
        }
    }
    for i in 0..b {
        s[i * b + i] = 1.0;
    }
    Ok(s)
}

/// Patch vector `k` of sample `i` from a `[B, d, q, q]` tensor.
fn patch(x: &[f64], d: usize, q2: usize, i: usize, k: usize) -> impl Iterator<Item = f64> + '_ {
    (0..d).map(move |c| x[(i * d + c) * q2 + k])
}

fn patch_norms(local: &Tensor<f64>) -> Result<(usize, usize, Vec<f64>)> {
    let (b, d, q2) = dims4(local)?;
    let x = local.data();
    let norms = (0..b * q2)
        .map(|ik| patch(x, d, q2, ik / q2, ik % q2).map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok((b, q2, norms))
}

/// Spatial priority weights: each patch's L2 norm over the sample's total.
pub fn spatial_weights(local: &Tensor<f64>) -> Result<Vec<f64>> {
    let (b, q2, norms) = patch_norms(local)?;
    let mut w = norms;
    for i in 0..b {
        let row = &mut w[i * q2..(i + 1) * q2];
        let total: f64 = row.iter().sum();
        if total <= EPS {
            return Err(Error::Invalid(format!("sample {i} has an all-zero feature map")));
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(w)
}

/// `s_L[i][j] = Σ_k w[i][k]·cos(f_L^k(i), f_L^k(j))`. Weights come from the row
/// sample, so the table is not symmetric in general. Also returns the number
/// of patch pairs with a zero-norm side, whose cosine counts as 0.
pub fn local_similarity(local: &Tensor<f64>, weights: &[f64]) -> Result<(Vec<f64>, usize)> {
    let (b, d, q2) = dims4(local)?;
    if weights.len() != b * q2 {
        return Err(Error::Invalid(format!(
            "weights hold {} entries, expected {b}×{q2}",
            weights.len()
        )));
    }
    let (_, _, norms) = patch_norms(local)?;
    let x = local.data();
    let mut zero = 0;
    let mut cos = vec![0.0; b * b * q2];
    for i in 0..b {
        for j in i..b {
            for k in 0..q2 {
                let (ni, nj) = (norms[i * q2 + k], norms[j * q2 + k]);
                let c = if ni <= EPS || nj <= EPS {
                    zero += if i == j { 1 } else { 2 };
                    0.0
                } else {
                    let dot: f64 = patch(x, d, q2, i, k).zip(patch(x, d, q2, j, k)).map(|(a, b)| a * b).sum();
                    (dot / (ni * nj)).clamp(-1.0, 1.0)
                };
                cos[(i * b + j) * q2 + k] = c;
                cos[(j * b + i) * q2 + k] = c;
            }
        }
    }
    let mut s = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            s[i * b + j] = (0..q2)
                .map(|k| weights[i * q2 + k] * cos[(i * b + j) * q2 + k])
                .sum();
        }
    }
    Ok((s, zero))
}

/// Index of the largest entry of row `i`, excluding `i`; lowest index wins ties.
pub fn top1_excluding_self(table: &[f64], b: usize, i: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for j in (0..b).filter(|&j| j != i) {
        if best.is_none_or(|k| table[i * b + j] > table[i * b + k]) {
            best = Some(j);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartnerKind {
    LabeledSameClass,
    VotedUnlabeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub partner: Option<usize>,
    pub kind: PartnerKind,
    /// Global and local top-1 agree. Always false for labeled samples.
    pub vote_agreed: bool,
    pub global_top1: Option<usize>,
    pub local_top1: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairAssignment {
    pub entries: Vec<PairEntry>,
}

impl PairAssignment {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Global top-1 of every sample, as used by the pure global pairing loss.
    pub fn global_top1(&self) -> Result<Vec<usize>> {
        self.entries
            .iter()
            .map(|e| e.global_top1)
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Invalid("global pairing needs at least two samples".into()))
    }
}

/// Chooses a partner for every batch sample. `labels[i]` is `Some` for labeled
/// samples; candidates are all other samples of the batch.
pub fn select_pairs(labels: &[Option<usize>], tables: &SimilarityTables, rng: &mut impl Rng) -> PairAssignment {
    let b = tables.batch;
    debug_assert_eq!(labels.len(), b);
    let entries = (0..b)
        .map(|i| {
            let global_top1 = top1_excluding_self(&tables.s_global, b, i);
            let local_top1 = top1_excluding_self(&tables.s_local, b, i);
            match labels[i] {
                Some(y) => {
                    let mates: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == Some(y)).collect();
                    let partner = (!mates.is_empty()).then(|| mates[rng.random_range(0..mates.len())]);
                    PairEntry {
                        partner,
                        kind: PartnerKind::LabeledSameClass,
                        vote_agreed: false,
                        global_top1,
                        local_top1,
                    }
                }
                None => {
                    let agreed = global_top1.is_some() && global_top1 == local_top1;
                    PairEntry {
                        partner: if agreed { global_top1 } else { None },
                        kind: PartnerKind::VotedUnlabeled,
                        vote_agreed: agreed,
                        global_top1,
                        local_top1,
                    }
                }
            }
        })
        .collect();
    PairAssignment { entries }
}

/// `Σ_r log(⟨p[a_r], p[b_r]⟩ + ε)` as a graph scalar.
fn sum_log_inner<T: Real>(g: &mut Graph<T>, p: Var, a: &[usize], b: &[usize]) -> Result<Var> {
    let pa = g.gather_rows(p, a)?;
    let pb = g.gather_rows(p, b)?;
    let prod = g.mul(pa, pb)?;
    let inner = g.sum_axis(prod, 1)?;
    let logs = g.log_eps(inner)?;
    Ok(g.sum(logs)?)
}

/// Pure global pairing: `−mean_i log⟨p_i, p_top1(i)⟩` over the whole batch.
pub fn loss_gr<T: Real>(g: &mut Graph<T>, p: Var, top1: &[usize]) -> Result<Var> {
    let b = g.shape(p)[0];
    if top1.len() != b {
        return Err(Error::Invalid(format!("{} partners for a batch of {b}", top1.len())));
    }
    let rows: Vec<usize> = (0..b).collect();
    let s = sum_log_inner(g, p, &rows, top1)?;
    Ok(g.scale(s, -1.0 / b as f64)?)
}

/// Voting loss. Labeled terms are divided by `n`, unlabeled terms by `m`, where
/// `n`/`m` count every labeled/unlabeled sample of the batch; samples without a
/// partner contribute 0.
pub fn loss_glv<T: Real>(g: &mut Graph<T>, p: Var, pairs: &PairAssignment) -> Result<Var> {
    let b = g.shape(p)[0];
    if pairs.len() != b {
        return Err(Error::Invalid(format!("{} pair entries for a batch of {b}", pairs.len())));
    }
    let mut total: Option<Var> = None;
    for kind in [PartnerKind::LabeledSameClass, PartnerKind::VotedUnlabeled] {
        let group = pairs.entries.iter().filter(|e| e.kind == kind).count();
        let (anchors, partners): (Vec<usize>, Vec<usize>) = pairs
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == kind)
            .filter_map(|(i, e)| e.partner.map(|j| (i, j)))
            .unzip();
        if anchors.is_empty() {
            continue;
        }
        let s = sum_log_inner(g, p, &anchors, &partners)?;
        let term = g.scale(s, -1.0 / group as f64)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
    }
}

/// Pair quality counters for unlabeled anchors, split by the anchor's provenance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairStats {
    /// Unlabeled anchors, `[known, novel]`.
    pub anchors: [usize; 2],
    /// Anchors with at least one same-class batchmate.
    pub matchable: [usize; 2],
    /// Vote-agreed anchors.
    pub agreed: [usize; 2],
    /// Vote-agreed anchors whose partner shares their class.
    pub agreed_correct: [usize; 2],
    /// Anchors whose global top-1 shares their class.
    pub global_correct: [usize; 2],
}

impl PairStats {
    pub fn record(&mut self, pairs: &PairAssignment, truth: &[usize], is_novel: impl Fn(usize) -> bool) {
        for (i, e) in pairs.entries.iter().enumerate() {
            if e.kind != PartnerKind::VotedUnlabeled {
                continue;
            }
            let g = usize::from(is_novel(truth[i]));
            self.anchors[g] += 1;
            if truth.iter().enumerate().any(|(j, &t)| j != i && t == truth[i]) {
                self.matchable[g] += 1;
            }
            if e.global_top1.is_some_and(|j| truth[j] == truth[i]) {
                self.global_correct[g] += 1;
            }
            if let Some(j) = e.partner {
                self.agreed[g] += 1;
                if truth[j] == truth[i] {
                    self.agreed_correct[g] += 1;
                }
            }
        }
    }

    fn ratio(a: usize, b: usize) -> f64 {
        if b == 0 {
            f64::NAN
        } else {
            a as f64 / b as f64
        }
    }

    /// Same-class fraction among vote-agreed pairs, over both groups.
    pub fn vote_precision(&self) -> f64 {
        Self::ratio(self.agreed_correct.iter().sum(), self.agreed.iter().sum())
    }

    /// Same-class fraction among global top-1 pairs, over both groups.
    pub fn global_precision(&self) -> f64 {
        Self::ratio(self.global_correct.iter().sum(), self.anchors.iter().sum())
    }

    /// `(precision, recall)` of voted pairs for known (`0`) or novel (`1`) anchors.
    pub fn group(&self, g: usize) -> (f64, f64) {
        (
            Self::ratio(self.agreed_correct[g], self.agreed[g]),
            Self::ratio(self.agreed_correct[g], self.matchable[g]),
        )
    }

    pub fn merge(&mut self, other: &PairStats) {
        for g in 0..2 {
            self.anchors[g] += other.anchors[g];
            self.matchable[g] += other.matchable[g];
            self.agreed[g] += other.agreed[g];
            self.agreed_correct[g] += other.agreed_correct[g];
            self.global_correct[g] += other.global_correct[g];
        }
    }
}
