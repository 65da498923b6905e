//! Feature extractor, pooling heads and the linear classifier.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StageTag};

/// One layer of the convolutional stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    /// Square "same" convolution with bias.
    Conv { out_channels: usize, kernel: usize },
    Relu,
    AvgPool { k: usize },
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv {
                out_channels,
                kernel,
            } => write!(f, "conv{kernel}:{out_channels}"),
            Layer::Relu => write!(f, "relu"),
            Layer::AvgPool { k } => write!(f, "avgpool{k}"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognised layer `{s}`"));
        if s == "relu" {
            return Ok(Layer::Relu);
        }
        if let Some(k) = s.strip_prefix("avgpool") {
            return Ok(Layer::AvgPool {
                k: k.parse().map_err(|_| bad())?,
            });
        }
        if let Some(rest) = s.strip_prefix("conv") {
            let (k, c) = rest.split_once(':').ok_or_else(bad)?;
            return Ok(Layer::Conv {
                out_channels: c.parse().map_err(|_| bad())?,
                kernel: k.parse().map_err(|_| bad())?,
            });
        }
        Err(bad())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub layers: Vec<Layer>,
}

impl Default for ExtractorConfig {
    /// conv3×3(1→8) → relu → conv3×3(8→16) → relu → avgpool2 → conv3×3(16→32) → relu
    /// on 24×24 grayscale, giving a 32×12×12 feature map.
    fn default() -> Self {
        Self {
            input_channels: 1,
            input_size: 24,
            layers: vec![
                Layer::Conv {
                    out_channels: 8,
                    kernel: 3,
                },
                Layer::Relu,
                Layer::Conv {
                    out_channels: 16,
                    kernel: 3,
                },
                Layer::Relu,
                Layer::AvgPool { k: 2 },
                Layer::Conv {
                    out_channels: 32,
                    kernel: 3,
                },
                Layer::Relu,
            ],
        }
    }
}

impl ExtractorConfig {
    /// `(feature_dim, feature_grid)` of the final layer, validating the stack.
    pub fn output_dims(&self) -> Result<(usize, usize)> {
        let (mut c, mut s) = (self.input_channels, self.input_size);
        if c == 0 || s == 0 {
            return Err(Error::Config("input channels and size must be positive".into()));
        }
        for layer in &self.layers {
            match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                } => {
                    if out_channels == 0 || kernel % 2 == 0 {
                        return Err(Error::Config(format!(
                            "layer {layer}: needs an odd kernel and at least one channel"
                        )));
                    }
                    c = out_channels;
                }
                Layer::Relu => {}
                Layer::AvgPool { k } => {
                    if k == 0 || s % k != 0 {
                        return Err(Error::Config(format!(
                            "layer {layer}: spatial size {s} not divisible by {k}"
                        )));
                    }
                    s /= k;
                }
            }
        }
        Ok((c, s))
    }

    pub fn layers_string(&self) -> String {
        self.layers
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_layers(s: &str) -> Result<Vec<Layer>> {
        s.split(',').map(|l| l.trim().parse()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    /// Total class count, known plus novel.
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(extractor: ExtractorConfig, num_classes: usize) -> Result<Self> {
        extractor.output_dims()?;
        if num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(Self {
            extractor,
            num_classes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.output_dims().map(|d| d.0).unwrap_or(0)
    }

    pub fn feature_grid(&self) -> usize {
        self.extractor.output_dims().map(|d| d.1).unwrap_or(0)
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c = self.extractor.input_channels;
        let mut conv = 0;
        for layer in &self.extractor.layers {
            if let Layer::Conv {
                out_channels,
                kernel,
            } = *layer
            {
                out.push((
                    format!("conv{conv}.weight"),
                    vec![out_channels, c, kernel, kernel],
                ));
                out.push((format!("conv{conv}.bias"), vec![out_channels]));
                c = out_channels;
                conv += 1;
            }
        }
        out.push(("classifier.weight".into(), vec![c, self.num_classes]));
        out.push(("classifier.bias".into(), vec![self.num_classes]));
        out
    }
}

/// Parameters of the extractor and classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
}

/// Parameters registered as leaves of one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: Vec<Var>,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Uses existing graph variables as the parameters of `model`, e.g. the
    /// inputs of a gradient check. Count and shapes must match the layout.
    pub fn from_vars<T: Real>(model: &Model<T>, g: &Graph<T>, vars: Vec<Var>) -> Result<Self> {
        let layout = model.config.param_layout();
        if vars.len() != layout.len() {
            return Err(Error::Invalid(format!(
                "{} variables for {} parameters",
                vars.len(),
                layout.len()
            )));
        }
        for ((name, shape), &v) in layout.iter().zip(&vars) {
            if g.shape(v) != shape.as_slice() {
                return Err(Error::Invalid(format!(
                    "`{name}` expects shape {shape:?}, got {:?}",
                    g.shape(v)
                )));
            }
        }
        Ok(Self { vars })
    }
}

impl<T: Real> Model<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    return Tensor::zeros(shape);
                }
                let (fan_in, fan_out) = if shape.len() == 4 {
                    let rf = shape[2] * shape[3];
                    (shape[1] * rf, shape[0] * rf)
                } else {
                    (shape[0], shape[1])
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| T::of(rng.random_range(-bound..bound)))
                    .collect();
                Tensor::new(shape, data).expect("layout shapes are consistent")
            })
            .collect();
        Self { config, params }
    }

    /// All-zero parameters.
    pub fn zeros(config: ModelConfig) -> Self {
        let params = config
            .param_layout()
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(shape))
            .collect();
        Self { config, params }
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        BoundModel {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.clone(), trainable))
                .collect(),
        }
    }

    /// Runs φ on an `[N, C, S, S]` image batch, returning the `[N, d, S', S']` feature map.
    pub fn extract(&self, g: &mut Graph<T>, bound: &BoundModel, x: Var) -> Result<Var> {
        let ex = &self.config.extractor;
        let want = [ex.input_channels, ex.input_size, ex.input_size];
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != want {
            return Err(TensorError::ShapeMismatch {
                op: "extract",
                lhs: shape.to_vec(),
                rhs: want.to_vec(),
            }
            .into());
        }
        let mut h = x;
        let mut conv = 0;
        for layer in &ex.layers {
            h = match *layer {
                Layer::Conv { .. } => {
                    let (w, b) = (bound.vars[2 * conv], bound.vars[2 * conv + 1]);
                    conv += 1;
                    g.conv2d(h, w, Some(b))?
                }
                Layer::Relu => g.relu(h)?,
                Layer::AvgPool { k } => g.avg_pool2d(h, k)?,
            };
        }
        Ok(h)
    }

    /// Class probabilities `softmax(f_G·W + b)` for `[N, d]` global features.
    pub fn classify(&self, g: &mut Graph<T>, bound: &BoundModel, global: Var) -> Result<Var> {
        let n = bound.vars.len();
        let logits = g.matmul(global, bound.vars[n - 2])?;
        let logits = g.add_row_bias(logits, bound.vars[n - 1])?;
        Ok(g.softmax(logits)?)
    }
}

/// Spatial mean of each channel: `[N, d, S, S] → [N, d]`.
pub fn pool_global<T: Real>(g: &mut Graph<T>, fm: Var) -> Result<Var> {
    let shape = g.shape(fm).to_vec();
    if shape.len() != 4 {
        return Err(Error::Invalid(format!("feature map must be 4-D, got {shape:?}")));
    }
    let pooled = g.adaptive_avg_pool2d(fm, 1)?;
    Ok(g.reshape(pooled, &shape[..2])?)
}

/// Average pooling to a `q×q` grid: `[N, d, S, S] → [N, d, q, q]`.
pub fn pool_local<T: Real>(g: &mut Graph<T>, fm: Var, q: usize) -> Result<Var> {
    Ok(g.adaptive_avg_pool2d(fm, q)?)
}

/// Everything one forward pass produces.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub feature_map: Var,
    pub global: Var,
    pub probs: Var,
}

impl<T: Real> Model<T> {
    /// extract → pool_global → classify.
    pub fn forward(&self, g: &mut Graph<T>, bound: &BoundModel, x: Var) -> Result<Forward> {
        let feature_map = self.extract(g, bound, x)?;
        let global = pool_global(g, feature_map)?;
        let probs = self.classify(g, bound, global)?;
        Ok(Forward {
            feature_map,
            global,
            probs,
        })
    }

    /// Inference in chunks without gradient tracking. Returns `(global features, probabilities)`
    /// as row-major `f64` matrices.
    pub fn infer(&self, images: &Tensor<T>, chunk: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let n = images.shape()[0];
        let width = images.numel() / n.max(1);
        let (d, c) = (self.config.feature_dim(), self.config.num_classes);
        let mut feats = Vec::with_capacity(n * d);
        let mut probs = Vec::with_capacity(n * c);
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let mut shape = images.shape().to_vec();
            shape[0] = len;
            let x = Tensor::new(shape, images.data()[start * width..(start + len) * width].to_vec())?;
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let xv = g.constant(x);
            let out = self.forward(&mut g, &bound, xv)?;
            feats.extend(g.value(out.global).data().iter().map(|v| v.as_f64()));
            probs.extend(g.value(out.probs).data().iter().map(|v| v.as_f64()));
            start += len;
        }
        Ok((Tensor::new([n, d], feats)?, Tensor::new([n, c], probs)?))
    }
}
