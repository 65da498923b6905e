//! Supervised cross-entropy, the prior-matching regularizer and the weighted
//! total objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var, EPS};

/// Which pairwise term enters the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairingMode {
    None,
    /// Pure global top-1 pairing.
    Gr,
    /// Global/local voting.
    Glv,
}

/// Which pseudo-label term enters the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PseudoMode {
    None,
    Csp,
    Hard,
}

impl fmt::Display for PairingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairingMode::None => "none",
            PairingMode::Gr => "gr",
            PairingMode::Glv => "glv",
        })
    }
}

impl FromStr for PairingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(PairingMode::None),
            "gr" => Ok(PairingMode::Gr),
            "glv" => Ok(PairingMode::Glv),
            "gr+glv" | "glv+gr" => Err(Error::Config(
                "pairing modes gr and glv are exclusive; pick one".into(),
            )),
            other => Err(Error::Config(format!("unknown pairing mode `{other}`"))),
        }
    }
}

impl fmt::Display for PseudoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PseudoMode::None => "none",
            PseudoMode::Csp => "csp",
            PseudoMode::Hard => "hard",
        })
    }
}

impl FromStr for PseudoMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(PseudoMode::None),
            "csp" => Ok(PseudoMode::Csp),
            "hard" => Ok(PseudoMode::Hard),
            other => Err(Error::Config(format!("unknown pseudo-label mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub pairing: PairingMode,
    pub pseudo: PseudoMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta1: 1.0,
            eta2: 0.5,
            eta3: 1.0,
            pairing: PairingMode::Glv,
            pseudo: PseudoMode::Csp,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta1", self.eta1), ("eta2", self.eta2), ("eta3", self.eta3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Label prior over all heads. Strictly positive, sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Prior(Vec<f64>);

impl Prior {
    pub fn uniform(c: usize) -> Self {
        Prior(vec![1.0 / c as f64; c])
    }

    /// Normalized from per-class sample counts.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Invalid(format!("prior counts must be positive, got {counts:?}")));
        }
        let total: usize = counts.iter().sum();
        Ok(Prior(counts.iter().map(|&c| c as f64 / total as f64).collect()))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// `−(1/n) Σ log(p[i, y_i] + ε)` over `[n, C]` probabilities.
pub fn loss_ce<T: Real>(g: &mut Graph<T>, p: Var, labels: &[usize]) -> Result<Var> {
    let c = g.shape(p)[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
    }
    let picked = g.pick(p, labels)?;
    let logs = g.log_eps(picked)?;
    let m = g.mean(logs)?;
    Ok(g.scale(m, -1.0)?)
}

/// `KL(q ‖ prior)` with `q` the batch-mean prediction.
pub fn regularizer<T: Real>(g: &mut Graph<T>, p: Var, prior: &Prior) -> Result<Var> {
    let c = g.shape(p)[1];
    if prior.0.len() != c {
        return Err(Error::Invalid(format!(
            "prior has {} classes, predictions have {c}",
            prior.0.len()
        )));
    }
    let q = g.mean_axis(p, 0)?;
    let log_q = g.log_eps(q)?;
    let neg_log_prior = g.constant(crate::tensor::Tensor::from_f64(
        [c],
        &prior.0.iter().map(|&v| -(v + EPS).ln()).collect::<Vec<_>>(),
    )?);
    let ratio = g.add(log_q, neg_log_prior)?;
    let terms = g.mul(q, ratio)?;
    Ok(g.sum(terms)?)
}

/// Already-built loss components of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Components {
    pub ce: Var,
    pub pairing: Option<Var>,
    pub pseudo: Option<Var>,
    pub reg: Option<Var>,
}

/// `CE + η1·pairing + η2·pseudo + η3·R`; absent terms contribute nothing.
pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: Components, w: &LossWeights) -> Result<Var> {
    let mut total = parts.ce;
    for (term, eta) in [(parts.pairing, w.eta1), (parts.pseudo, w.eta2), (parts.reg, w.eta3)] {
        if let Some(t) = term {
            let scaled = g.scale(t, eta)?;
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}
