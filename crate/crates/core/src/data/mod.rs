//! Procedural open-world attribution benchmark.
//!
//! Every image is a shared smooth background plus a class-specific grating
//! stamped into a class-specific square region, plus Gaussian pixel noise.
//! One designated class textures the whole image. Protocol-2 benchmarks add
//! untextured "real" classes that differ only in background style.

mod sampler;
mod store;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use sampler::{BatchPlan, BatchSampler, SamplerMode};
pub use store::{load_dataset, load_labels, save_dataset, save_labels, FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    P1,
    P2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Labeled,
    Unlabeled,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Labeled, SplitKind::Unlabeled, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Labeled => "labeled",
            SplitKind::Unlabeled => "unlabeled",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Known,
    Novel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub n_known: usize,
    pub n_novel: usize,
    pub labeled_per_known: usize,
    pub unlabeled_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub region_size: usize,
    /// Random per-sample phase of the shared background.
    pub background_jitter: bool,
    pub protocol: Protocol,
    /// Protocol 2 only: add a known real class.
    pub real_known: bool,
    /// Protocol 2 only: add a novel real class.
    pub real_novel: bool,
    /// Protocol 2 only: per-split sample multiplier for real classes.
    pub real_multiplier: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_known: 4,
            n_novel: 4,
            labeled_per_known: 200,
            unlabeled_per_class: 600,
            test_per_class: 200,
            image_size: 24,
            noise_sigma: 0.05,
            region_size: 8,
            background_jitter: true,
            protocol: Protocol::P1,
            real_known: false,
            real_novel: false,
            real_multiplier: 10,
            seed: 0,
        }
    }
}

/// What distinguishes a class visually.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Pattern {
    /// Grating inside a square region; `None` region textures the whole image.
    Texture {
        region: Option<[usize; 2]>,
        frequency: f64,
        orientation: f64,
    },
    /// Untextured image with its own background period.
    Real { background_period: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: usize,
    pub provenance: Provenance,
    pub real: bool,
    pub pattern: Pattern,
}

const TEXTURE_AMPLITUDE: f64 = 0.3;
const BACKGROUND_AMPLITUDE: f64 = 0.12;
const BACKGROUND_PERIOD: f64 = 24.0;

impl BenchmarkSpec {
    pub fn num_classes(&self) -> usize {
        let reals = if self.protocol == Protocol::P2 {
            self.real_known as usize + self.real_novel as usize
        } else {
            0
        };
        self.n_known + self.n_novel + reals
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_known == 0 || self.n_novel == 0 {
            return Err(Error::Config("need at least one known and one novel class".into()));
        }
        if self.image_size == 0 || self.region_size == 0 {
            return Err(Error::Config("image and region size must be positive".into()));
        }
        if self.region_size > self.image_size {
            return Err(Error::Config(format!(
                "region size {} exceeds image size {}",
                self.region_size, self.image_size
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if self.protocol == Protocol::P2 && self.real_multiplier == 0 {
            return Err(Error::Config("real_multiplier must be positive".into()));
        }
        Ok(())
    }

    /// Region centres on a 3×3 grid of the image.
    fn grid_centres(&self) -> Vec<[usize; 2]> {
        let cell = self.image_size / 3;
        let mut out = Vec::new();
        for gy in 0..3 {
            for gx in 0..3 {
                out.push([gy * cell + cell / 2, gx * cell + cell / 2]);
            }
        }
        out
    }

    /// Deterministic class table: known fakes, known real, novel fakes, novel real.
    ///
    /// Fake class 0 textures the whole image; the rest take regions in an
    /// interleaved order so known and novel classes spread over the grid.
    /// Orientations are spread evenly over a half turn, so two classes sharing
    /// a frequency still differ once position is pooled away.
    pub fn classes(&self) -> Vec<ClassInfo> {
        let centres = self.grid_centres();
        // centre, corners, edges: spreads consecutive classes apart
        let order = [4usize, 0, 8, 2, 6, 1, 7, 3, 5];
        let frequencies = [2.0, 3.0, 1.5];
        let n_fake = (self.n_known + self.n_novel).max(1) as f64;
        let fake = |k: usize| -> Pattern {
            let frequency = frequencies[k % 3];
            let orientation = (k as f64) * PI / n_fake;
            if k == 0 {
                Pattern::Texture {
                    region: None,
                    frequency: 4.0,
                    orientation: PI / 4.0,
                }
            } else {
                Pattern::Texture {
                    region: Some(centres[order[(k - 1) % 9]]),
                    frequency,
                    orientation,
                }
            }
        };
        let p2 = self.protocol == Protocol::P2;
        let mut classes = Vec::new();
        let mut push = |provenance, real, pattern| {
            let id = classes.len();
            classes.push(ClassInfo {
                id,
                provenance,
                real,
                pattern,
            });
        };
        for k in 0..self.n_known {
            push(Provenance::Known, false, fake(k));
        }
        if p2 && self.real_known {
            push(
                Provenance::Known,
                true,
                Pattern::Real {
                    background_period: BACKGROUND_PERIOD,
                },
            );
        }
        for k in self.n_known..self.n_known + self.n_novel {
            push(Provenance::Novel, false, fake(k));
        }
        if p2 && self.real_novel {
            push(
                Provenance::Novel,
                true,
                Pattern::Real {
                    background_period: BACKGROUND_PERIOD / 2.0,
                },
            );
        }
        classes
    }

    /// Samples of `class` in `split`.
    pub fn count(&self, class: &ClassInfo, split: SplitKind) -> usize {
        let base = match split {
            SplitKind::Labeled if class.provenance == Provenance::Known => self.labeled_per_known,
            SplitKind::Labeled => 0,
            SplitKind::Unlabeled => self.unlabeled_per_class,
            SplitKind::Test => self.test_per_class,
        };
        if class.real {
            base * self.real_multiplier
        } else {
            base
        }
    }
}

/// Images and ground-truth labels of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `[n, 1, S, S]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the selected images into one batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let s = self.images.shape();
        let width = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * width..(i + 1) * width]);
        }
        Tensor::new([indices.len(), s[1], s[2], s[3]], data).expect("consistent shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: BenchmarkSpec,
    pub classes: Vec<ClassInfo>,
    pub labeled: Split,
    pub unlabeled: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Labeled => &self.labeled,
            SplitKind::Unlabeled => &self.unlabeled,
            SplitKind::Test => &self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn known_classes(&self) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| c.provenance == Provenance::Known)
            .map(|c| c.id)
            .collect()
    }

    pub fn is_novel(&self, class: usize) -> bool {
        self.classes[class].provenance == Provenance::Novel
    }

    pub fn real_classes(&self) -> Vec<usize> {
        self.classes.iter().filter(|c| c.real).map(|c| c.id).collect()
    }

    /// Novel classes must never carry labels.
    pub fn check_label_invariants(&self) -> Result<()> {
        let c = self.classes.len() as u32;
        for kind in SplitKind::ALL {
            if let Some(&bad) = self.split(kind).labels.iter().find(|&&l| l >= c) {
                return Err(Error::Invalid(format!(
                    "{} split holds label {bad} but there are only {c} classes",
                    kind.name()
                )));
            }
        }
        if let Some(&bad) = self
            .labeled
            .labels
            .iter()
            .find(|&&l| self.is_novel(l as usize))
        {
            return Err(Error::Invalid(format!(
                "novel class {bad} appears in the labeled split"
            )));
        }
        Ok(())
    }
}

fn split_key(kind: SplitKind) -> u64 {
    match kind {
        SplitKind::Labeled => 1,
        SplitKind::Unlabeled => 2,
        SplitKind::Test => 3,
    }
}

/// Renders one sample.
fn render(spec: &BenchmarkSpec, class: &ClassInfo, kind: SplitKind, index: usize) -> Result<Vec<f32>> {
    let size = spec.image_size;
    let mut rng = rng::stream(spec.seed, &[split_key(kind), class.id as u64, index as u64]);
    let phase = if spec.background_jitter {
        rng.random_range(0.0..2.0 * PI)
    } else {
        0.0
    };
    let period = match class.pattern {
        Pattern::Real { background_period } => background_period,
        Pattern::Texture { .. } => BACKGROUND_PERIOD,
    };
    let mut img = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5 * y as f64) / period;
            img[y * size + x] = 0.5 + BACKGROUND_AMPLITUDE * (2.0 * PI * u + phase).sin();
        }
    }
    if let Pattern::Texture {
        region,
        frequency,
        orientation,
    } = class.pattern
    {
        let (y0, x0, extent) = match region {
            None => (0isize, 0isize, size),
            Some([cy, cx]) => {
                let half = (spec.region_size / 2) as isize;
                (cy as isize - half, cx as isize - half, spec.region_size)
            }
        };
        if y0 < 0 || x0 < 0 || y0 as usize + extent > size || x0 as usize + extent > size {
            return Err(Error::Config(format!(
                "class {}: region at ({y0}, {x0}) of size {extent} lies outside the {size}×{size} image",
                class.id
            )));
        }
        let (c, s) = (orientation.cos(), orientation.sin());
        for dy in 0..extent {
            for dx in 0..extent {
                let u = (dx as f64 * c + dy as f64 * s) / extent as f64;
                let idx = (y0 as usize + dy) * size + x0 as usize + dx;
                img[idx] += TEXTURE_AMPLITUDE * (2.0 * PI * frequency * u).sin();
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma is finite and positive");
        img.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())
}

fn build_split(spec: &BenchmarkSpec, classes: &[ClassInfo], kind: SplitKind) -> Result<Split> {
    let size = spec.image_size;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for class in classes {
        for i in 0..spec.count(class, kind) {
            data.extend(render(spec, class, kind, i)?);
            labels.push(class.id as u32);
        }
    }
    let n = labels.len();
    Ok(Split {
        images: Tensor::new([n, 1, size, size], data)?,
        labels,
    })
}

/// Generates the full benchmark in memory. Deterministic given `spec.seed`.
pub fn generate(spec: &BenchmarkSpec) -> Result<Dataset> {
    spec.validate()?;
    let classes = spec.classes();
    let ds = Dataset {
        labeled: build_split(spec, &classes, SplitKind::Labeled)?,
        unlabeled: build_split(spec, &classes, SplitKind::Unlabeled)?,
        test: build_split(spec, &classes, SplitKind::Test)?,
        spec: spec.clone(),
        classes,
    };
    ds.check_label_invariants()?;
    Ok(ds)
}

/// Accuracy of a nearest-class-mean classifier on raw pixels, fitted on the
/// unlabeled split's ground truth and scored on the test split.
pub fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
    let c = ds.num_classes();
    let width = ds.unlabeled.images.numel() / ds.unlabeled.len().max(1);
    let mut means = vec![vec![0.0f64; width]; c];
    let mut counts = vec![0usize; c];
    for (i, &l) in ds.unlabeled.labels.iter().enumerate() {
        counts[l as usize] += 1;
        for (m, &v) in means[l as usize].iter_mut().zip(ds.unlabeled.images.row(i)) {
            *m += v as f64;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = ds
        .test
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = ds.test.images.row(i);
            let best = (0..c)
                .map(|k| {
                    let d: f64 = means[k]
                        .iter()
                        .zip(row)
                        .map(|(m, &v)| (m - v as f64).powi(2))
                        .sum();
                    (k, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(l as usize)
        })
        .count();
    correct as f64 / ds.test.len().max(1) as f64
}
