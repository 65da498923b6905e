//! Soft pseudo-labels from Gumbel-softmax draws, their confidence weights and
//! the weighted soft cross-entropy. A hard-threshold baseline is included for
//! ablations.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Real, Tensor, Var, EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub y_tilde: Vec<f64>,
    /// In `[0, 1]`; 0 excludes the sample.
    pub lambda: f64,
    pub hard_class: usize,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `softmax((log(p+ε) + g)/τ)` with `g` i.i.d. standard Gumbel.
pub fn gumbel_softmax(p: &[f64], tau: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("Gumbel temperature must be positive, got {tau}")));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale is valid");
    let z: Vec<f64> = p
        .iter()
        .map(|&v| ((v + EPS).ln() + gumbel.sample(rng)) / tau)
        .collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// Predicted probability of the pseudo-label's class.
pub fn confidence_weight(p: &[f64], y_tilde: &[f64]) -> f64 {
    p[argmax(y_tilde)]
}

/// Where the per-sample random stream of a pseudo-label comes from.
#[derive(Clone, Copy, Debug)]
pub struct DrawKey {
    pub seed: u64,
    pub stage: u64,
    /// Ignored unless resampling; a fixed draw per sample uses iteration 0.
    pub iteration: u64,
    pub resample: bool,
}

impl DrawKey {
    fn rng(&self, sample: usize) -> rand_chacha::ChaCha8Rng {
        let it = if self.resample { self.iteration } else { 0 };
        rng::stream(self.seed, &[0xC5B, self.stage, it, sample as u64])
    }
}

/// One soft pseudo-label per row of `p` (`[m, C]`). `samples[r]` identifies the
/// row's sample so draws do not depend on batch composition.
pub fn soft_pseudo_labels(p: &Tensor<f64>, samples: &[usize], tau: f64, key: DrawKey) -> Result<Vec<PseudoLabel>> {
    let c = p.shape()[1];
    (0..p.shape()[0])
        .map(|r| {
            let row = &p.data()[r * c..(r + 1) * c];
            let y_tilde = gumbel_softmax(row, tau, &mut key.rng(samples[r]))?;
            let hard_class = argmax(&y_tilde);
            Ok(PseudoLabel {
                lambda: row[hard_class],
                hard_class,
                y_tilde,
            })
        })
        .collect()
}

/// One-hot labels at the argmax for rows whose top probability reaches
/// `threshold`; other rows get `λ = 0`.
pub fn hard_pseudo_baseline(p: &Tensor<f64>, threshold: f64) -> Result<Vec<PseudoLabel>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("hard threshold must lie in [0, 1], got {threshold}")));
    }
    let c = p.shape()[1];
    Ok((0..p.shape()[0])
        .map(|r| {
            let row = &p.data()[r * c..(r + 1) * c];
            let hard_class = argmax(row);
            let mut y_tilde = vec![0.0; c];
            y_tilde[hard_class] = 1.0;
            PseudoLabel {
                y_tilde,
                lambda: if row[hard_class] >= threshold { 1.0 } else { 0.0 },
                hard_class,
            }
        })
        .collect())
}

/// `−(1/m) Σ_i Σ_c λ_i ỹ_ic log(p_ic + ε)`. Targets and weights enter as
/// constants, so gradients reach `p` only.
pub fn loss_csp<T: Real>(g: &mut Graph<T>, p: Var, pseudo: &[PseudoLabel]) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 2 || shape[0] != pseudo.len() {
        return Err(Error::Invalid(format!(
            "{} pseudo-labels for predictions of shape {shape:?}",
            pseudo.len()
        )));
    }
    let mut w = Vec::with_capacity(shape[0] * shape[1]);
    for pl in pseudo {
        if pl.y_tilde.len() != shape[1] {
            return Err(Error::Invalid(format!("pseudo-label has {} classes, expected {}", pl.y_tilde.len(), shape[1])));
        }
        w.extend(pl.y_tilde.iter().map(|&y| pl.lambda * y));
    }
    let weights = g.constant(Tensor::from_f64(shape.clone(), &w)?);
    let logs = g.log_eps(p)?;
    let terms = g.mul(weights, logs)?;
    let s = g.sum(terms)?;
    Ok(g.scale(s, -1.0 / shape[0].max(1) as f64)?)
}

/// Ten-bin histogram of λ over `[0, 1]`.
pub fn lambda_histogram(pseudo: &[PseudoLabel]) -> [usize; 10] {
    let mut h = [0; 10];
    for pl in pseudo {
        h[((pl.lambda * 10.0) as usize).min(9)] += 1;
    }
    h
}

/// Fraction of rows whose `target` head is among the `k` most probable.
pub fn topk_hit_rate(p: &Tensor<f64>, target: &[usize], k: usize) -> f64 {
    let c = p.shape()[1];
    let n = p.shape()[0];
    if n == 0 {
        return f64::NAN;
    }
    let hits = (0..n)
        .filter(|&r| {
            let row = &p.data()[r * c..(r + 1) * c];
            let above = row.iter().filter(|&&v| v > row[target[r]]).count();
            above < k
        })
        .count();
    hits as f64 / n as f64
}
