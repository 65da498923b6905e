//! Clustering metrics under Hungarian alignment, NMI, ARI and real/fake AUC.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Maximum-weight perfect matching on a square matrix. Returns `assign[row] = col`.
///
/// Shortest augmenting paths with potentials, `O(n³)`.
pub fn hungarian(weights: &[Vec<i64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(weights.iter().all(|r| r.len() == n), "hungarian needs a square matrix");
    let max = weights.iter().flatten().copied().max().unwrap_or(0);
    // minimise max − w, 1-based with a virtual column 0
    let cost = |i: usize, j: usize| max - weights[i - 1][j - 1];
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Square count matrix `m[pred][truth]`, padded to the larger id range.
fn count_matrix(pred: &[usize], truth: &[usize]) -> Vec<Vec<i64>> {
    let n = pred.iter().chain(truth).max().map_or(0, |&m| m + 1);
    let mut m = vec![vec![0i64; n]; n];
    for (&p, &t) in pred.iter().zip(truth) {
        m[p][t] += 1;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub all: f64,
    /// `None` when the subset is empty.
    pub known: Option<f64>,
    pub novel: Option<f64>,
    /// `mapping[cluster] = class` from one joint alignment.
    pub mapping: Vec<usize>,
}

/// Hungarian-aligned accuracy. The mapping is computed once on all samples and
/// then scored on the known and novel subsets.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize], novel: &[bool]) -> Result<Accuracy> {
    if pred.len() != truth.len() || novel.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "length mismatch: {} predictions, {} labels, {} masks",
            pred.len(),
            truth.len(),
            novel.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let mapping = hungarian(&count_matrix(pred, truth));
    let mut hits = [0usize; 2];
    let mut sizes = [0usize; 2];
    for i in 0..pred.len() {
        let g = usize::from(novel[i]);
        sizes[g] += 1;
        if mapping[pred[i]] == truth[i] {
            hits[g] += 1;
        }
    }
    let frac = |g: usize| (sizes[g] > 0).then(|| hits[g] as f64 / sizes[g] as f64);
    Ok(Accuracy {
        all: (hits[0] + hits[1]) as f64 / pred.len() as f64,
        known: frac(0),
        novel: frac(1),
        mapping,
    })
}

/// Nonzero cells of the contingency table and both marginals.
struct Contingency {
    n: f64,
    cells: BTreeMap<(usize, usize), usize>,
    rows: BTreeMap<usize, usize>,
    cols: BTreeMap<usize, usize>,
}

fn contingency(pred: &[usize], truth: &[usize]) -> Result<Contingency> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Invalid(format!(
            "need equal nonempty partitions, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut ct = Contingency {
        n: pred.len() as f64,
        cells: BTreeMap::new(),
        rows: BTreeMap::new(),
        cols: BTreeMap::new(),
    };
    for (&p, &t) in pred.iter().zip(truth) {
        *ct.cells.entry((p, t)).or_insert(0) += 1;
        *ct.rows.entry(p).or_insert(0) += 1;
        *ct.cols.entry(t).or_insert(0) += 1;
    }
    Ok(ct)
}

fn entropy(marginal: &BTreeMap<usize, usize>, n: f64) -> f64 {
    -marginal.values().map(|&c| c as f64 / n * (c as f64 / n).ln()).sum::<f64>()
}

/// Normalized mutual information with arithmetic-mean normalization. When both
/// partitions have a single group the score is 1.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = contingency(pred, truth)?;
    if ct.rows.len() == 1 && ct.cols.len() == 1 {
        return Ok(1.0);
    }
    let (hp, ht) = (entropy(&ct.rows, ct.n), entropy(&ct.cols, ct.n));
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = ct
        .cells
        .iter()
        .map(|(&(p, t), &c)| {
            let c = c as f64;
            c / ct.n * (ct.n * c / (ct.rows[&p] as f64 * ct.cols[&t] as f64)).ln()
        })
        .sum();
    Ok((mi / ((hp + ht) / 2.0)).clamp(0.0, 1.0))
}

fn pairs(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts. Two single-group partitions score 1.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = contingency(pred, truth)?;
    if ct.rows.len() == 1 && ct.cols.len() == 1 {
        return Ok(1.0);
    }
    let sum_pairs = |m: &mut dyn Iterator<Item = &usize>| m.map(|&c| pairs(c as f64)).sum::<f64>();
    let index = sum_pairs(&mut ct.cells.values());
    let a = sum_pairs(&mut ct.rows.values());
    let b = sum_pairs(&mut ct.cols.values());
    let expected = a * b / pairs(ct.n);
    let max = (a + b) / 2.0;
    if max == expected {
        return Ok(0.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Real-class score of each row: the summed probability of all real heads.
pub fn real_scores(probs: &[f64], classes: usize, real_heads: &[usize]) -> Result<Vec<f64>> {
    if real_heads.is_empty() {
        return Err(Error::Invalid("no real classes to score".into()));
    }
    Ok(probs
        .chunks(classes)
        .map(|row| real_heads.iter().map(|&c| row[c]).sum())
        .collect())
}

/// Area under the ROC curve for `positive` versus the rest, via midranks; tied
/// scores count one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    if scores.len() != positive.len() || np == 0 || nn == 0 {
        return Err(Error::Invalid(format!(
            "AUC needs both classes present ({np} positive, {nn} negative of {} scores)",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nn as f64))
}

/// Test-set metrics of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub acc_known: Option<f64>,
    pub acc_novel: Option<f64>,
    pub acc_all: f64,
    pub nmi_novel: Option<f64>,
    pub nmi_all: f64,
    pub ari_novel: Option<f64>,
    pub ari_all: f64,
    pub auc: Option<f64>,
    pub mapping: Vec<usize>,
}

/// All metrics from predicted heads. `real` carries the real-class heads and
/// per-sample real flags when the benchmark has real classes.
pub fn evaluate_predictions(
    pred: &[usize],
    truth: &[usize],
    novel: &[bool],
    real: Option<(&[f64], usize, &[usize], &[bool])>,
) -> Result<EvalResult> {
    let acc = clustering_accuracy(pred, truth, novel)?;
    let (pn, tn): (Vec<usize>, Vec<usize>) = pred
        .iter()
        .zip(truth)
        .zip(novel)
        .filter(|(_, &n)| n)
        .map(|((&p, &t), _)| (p, t))
        .unzip();
    let auc = match real {
        Some((probs, classes, heads, is_real)) => Some(auc(&real_scores(probs, classes, heads)?, is_real)?),
        None => None,
    };
    Ok(EvalResult {
        acc_known: acc.known,
        acc_novel: acc.novel,
        acc_all: acc.all,
        nmi_novel: if pn.is_empty() { None } else { Some(nmi(&pn, &tn)?) },
        nmi_all: nmi(pred, truth)?,
        ari_novel: if pn.is_empty() { None } else { Some(ari(&pn, &tn)?) },
        ari_all: ari(pred, truth)?,
        auc,
        mapping: acc.mapping,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hungarian_small() {
        assert_eq!(hungarian(&[vec![5, 1], vec![1, 5]]), vec![0, 1]);
        assert_eq!(hungarian(&[vec![0, 0, 3], vec![3, 0, 0], vec![0, 3, 0]]), vec![2, 0, 1]);
        assert_eq!(hungarian(&[vec![7]]), vec![0]);
        assert!(hungarian(&[]).is_empty());
    }

    #[test]
    fn accuracy_examples() {
        let truth = [0, 0, 1, 1, 2, 2, 3, 3];
        let novel = [false, false, false, false, true, true, true, true];
        let a = clustering_accuracy(&truth, &truth, &novel).unwrap();
        assert_eq!((a.all, a.known, a.novel), (1.0, Some(1.0), Some(1.0)));
        let relabeled = [2, 2, 3, 3, 0, 0, 1, 1];
        let a = clustering_accuracy(&relabeled, &truth, &novel).unwrap();
        assert_eq!(a.all, 1.0);
        assert_eq!(a.mapping, vec![2, 3, 0, 1]);
        let a = clustering_accuracy(&truth, &truth, &[false; 8]).unwrap();
        assert_eq!(a.novel, None);
    }

    #[test]
    fn hand_contingency() {
        // truth rows [[2,1],[0,3]]
        let truth = [0, 0, 0, 1, 1, 1];
        let pred = [0, 0, 1, 1, 1, 1];
        let hp = -(1.0 / 3.0 * (1.0f64 / 3.0).ln() + 2.0 / 3.0 * (2.0f64 / 3.0).ln());
        let ht = 2f64.ln();
        let mi = 1.0 / 3.0 * 2f64.ln() + 1.0 / 6.0 * 0.5f64.ln() + 0.5 * 1.5f64.ln();
        let want = mi / ((hp + ht) / 2.0);
        assert!((nmi(&pred, &truth).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.478_703_971_385_68).abs() < 1e-12);
        assert!((ari(&pred, &truth).unwrap() - 12.0 / 37.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_partitions() {
        assert_eq!(nmi(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(ari(&[3, 3, 3], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 1, 0, 1], &[0, 1, 0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn auc_examples() {
        let pos = [true, false, true, false];
        assert_eq!(auc(&[0.9, 0.8, 0.4, 0.3], &pos).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.1, 0.8, 0.2], &pos).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9, 0.2, 0.8], &pos).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &pos).unwrap(), 0.5);
        assert!(auc(&[0.5; 2], &[true, true]).is_err());
    }

    #[test]
    fn real_scores_sum_heads() {
        let s = real_scores(&[0.1, 0.2, 0.7, 0.5, 0.4, 0.1], 3, &[0, 2]).unwrap();
        assert!((s[0] - 0.8).abs() < 1e-12 && (s[1] - 0.6).abs() < 1e-12);
        assert!(real_scores(&[0.1], 1, &[]).is_err());
    }
}
