use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::objective::{LossWeights, PairingMode, PseudoMode};

/// Every knob of a training run. The text form is flat `key = value` lines;
/// `#` starts a comment and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
    /// Epochs of the all-labels reference model; 0 skips it.
    pub upper_epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub q: usize,
    pub weights: LossWeights,
    pub hard_threshold: f64,
    pub resample_pseudo: bool,
    pub stage2_from_scratch: bool,
    pub kmeans_tol: f64,
    pub kmeans_max_iter: usize,
    /// 0 means one cluster per class.
    pub kmeans_k: usize,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            t1: 20,
            t2: 50,
            t3: 20,
            upper_epochs: 0,
            lr: 2e-4,
            lr_decay: 0.2,
            lr_decay_every: 10,
            batch_size: 128,
            tau: 1.0,
            q: 3,
            weights: LossWeights::default(),
            hard_threshold: 0.95,
            resample_pseudo: true,
            stage2_from_scratch: false,
            kmeans_tol: 1e-4,
            kmeans_max_iter: 100,
            kmeans_k: 0,
            seed: 0,
        }
    }
}

/// Preset loss configurations, one per ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Ce,
    Gr,
    Glv,
    GrCsp,
    GlvCsp,
    GlvHard,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Ce,
        Ablation::Gr,
        Ablation::Glv,
        Ablation::GrCsp,
        Ablation::GlvCsp,
        Ablation::GlvHard,
    ];

    pub fn modes(self) -> (PairingMode, PseudoMode) {
        match self {
            Ablation::Ce => (PairingMode::None, PseudoMode::None),
            Ablation::Gr => (PairingMode::Gr, PseudoMode::None),
            Ablation::Glv => (PairingMode::Glv, PseudoMode::None),
            Ablation::GrCsp => (PairingMode::Gr, PseudoMode::Csp),
            Ablation::GlvCsp => (PairingMode::Glv, PseudoMode::Csp),
            Ablation::GlvHard => (PairingMode::Glv, PseudoMode::Hard),
        }
    }

    /// Row label, e.g. `CE+GLV+CSP`.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Ce => "CE",
            Ablation::Gr => "CE+GR",
            Ablation::Glv => "CE+GLV",
            Ablation::GrCsp => "CE+GR+CSP",
            Ablation::GlvCsp => "CE+GLV+CSP",
            Ablation::GlvHard => "CE+GLV+HARD",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Ce => "ce",
            Ablation::Gr => "gr",
            Ablation::Glv => "glv",
            Ablation::GrCsp => "gr+csp",
            Ablation::GlvCsp => "glv+csp",
            Ablation::GlvHard => "glv+hard",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| match s.as_str() {
                "gr+glv" | "glv+gr" | "gr+glv+csp" => {
                    Error::Config("pairing modes gr and glv are exclusive; pick one".into())
                }
                _ => Error::Config(format!("unknown ablation `{s}`")),
            })
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl StageConfig {
    pub fn with_ablation(mut self, a: Ablation) -> Self {
        (self.weights.pairing, self.weights.pseudo) = a.modes();
        self
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "t1" => self.t1 = parse(key, v)?,
            "t2" => self.t2 = parse(key, v)?,
            "t3" => self.t3 = parse(key, v)?,
            "upper_epochs" => self.upper_epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "q" => self.q = parse(key, v)?,
            "eta1" => self.weights.eta1 = parse(key, v)?,
            "eta2" => self.weights.eta2 = parse(key, v)?,
            "eta3" => self.weights.eta3 = parse(key, v)?,
            "pairing_mode" => self.weights.pairing = v.parse()?,
            "pseudo_mode" => self.weights.pseudo = v.parse()?,
            "hard_threshold" => self.hard_threshold = parse(key, v)?,
            "resample_pseudo" => self.resample_pseudo = parse(key, v)?,
            "stage2_from_scratch" => self.stage2_from_scratch = parse(key, v)?,
            "kmeans_tol" => self.kmeans_tol = parse(key, v)?,
            "kmeans_max_iter" => self.kmeans_max_iter = parse(key, v)?,
            "kmeans_k" => self.kmeans_k = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("tau", self.tau),
            ("kmeans_tol", self.kmeans_tol),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        for (k, v) in [
            ("lr_decay_every", self.lr_decay_every),
            ("batch_size", self.batch_size),
            ("q", self.q),
            ("kmeans_max_iter", self.kmeans_max_iter),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even for half-labeled batches, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.hard_threshold) {
            return Err(Error::Config(format!("hard_threshold must lie in [0, 1], got {}", self.hard_threshold)));
        }
        self.weights.validate()
    }

    /// Learning rate of epoch `e` within a stage.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let pairs: [(&str, String); 22] = [
            ("t1", self.t1.to_string()),
            ("t2", self.t2.to_string()),
            ("t3", self.t3.to_string()),
            ("upper_epochs", self.upper_epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("tau", self.tau.to_string()),
            ("q", self.q.to_string()),
            ("eta1", w.eta1.to_string()),
            ("eta2", w.eta2.to_string()),
            ("eta3", w.eta3.to_string()),
            ("pairing_mode", w.pairing.to_string()),
            ("pseudo_mode", w.pseudo.to_string()),
            ("hard_threshold", self.hard_threshold.to_string()),
            ("resample_pseudo", self.resample_pseudo.to_string()),
            ("stage2_from_scratch", self.stage2_from_scratch.to_string()),
            ("kmeans_tol", self.kmeans_tol.to_string()),
            ("kmeans_max_iter", self.kmeans_max_iter.to_string()),
            ("kmeans_k", self.kmeans_k.to_string()),
            ("seed", self.seed.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
