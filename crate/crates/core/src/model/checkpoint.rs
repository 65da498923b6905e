//! Versioned binary checkpoints.
//!
//! Body layout (inside the shared container, magic `OWDFCKPT`):
//! stage tag `u8`, config echo (length-prefixed `key=value` text), parameter
//! count `u32`, then per parameter: name (length-prefixed), rank `u32`,
//! dims `u32` each, little-endian `f32` payload.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{self, BodyReader, BodyWriter};
use crate::tensor::Tensor;

use super::{ExtractorConfig, Model, ModelConfig};

const MAGIC: &[u8; 8] = b"OWDFCKPT";
const VERSION: u32 = 1;

/// Which training stage produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageTag {
    Init = 0,
    Pretrain = 1,
    Cpl = 2,
    Iterative = 3,
    UpperBound = 4,
}

impl StageTag {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => StageTag::Init,
            1 => StageTag::Pretrain,
            2 => StageTag::Cpl,
            3 => StageTag::Iterative,
            4 => StageTag::UpperBound,
            _ => return None,
        })
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::Init => "init",
            StageTag::Pretrain => "stage1-pretrain",
            StageTag::Cpl => "stage2-cpl",
            StageTag::Iterative => "stage3-iterative",
            StageTag::UpperBound => "upper-bound",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: StageTag,
    pub model: Model<f32>,
}

fn config_echo(cfg: &ModelConfig) -> String {
    format!(
        "input_channels={}\ninput_size={}\nlayers={}\nnum_classes={}\n",
        cfg.extractor.input_channels,
        cfg.extractor.input_size,
        cfg.extractor.layers_string(),
        cfg.num_classes
    )
}

fn parse_echo(text: &str) -> Result<ModelConfig> {
    let mut channels = None;
    let mut size = None;
    let mut layers = None;
    let mut classes = None;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("bad config line `{line}`")))?;
        let num = || {
            v.parse::<usize>()
                .map_err(|_| Error::IncompatibleCheckpoint(format!("bad value in `{line}`")))
        };
        match k {
            "input_channels" => channels = Some(num()?),
            "input_size" => size = Some(num()?),
            "num_classes" => classes = Some(num()?),
            "layers" => layers = Some(ExtractorConfig::parse_layers(v)?),
            _ => {
                return Err(Error::IncompatibleCheckpoint(format!("unknown config key `{k}`")));
            }
        }
    }
    let missing = |what: &str| Error::IncompatibleCheckpoint(format!("config echo lacks {what}"));
    ModelConfig::new(
        ExtractorConfig {
            input_channels: channels.ok_or_else(|| missing("input_channels"))?,
            input_size: size.ok_or_else(|| missing("input_size"))?,
            layers: layers.ok_or_else(|| missing("layers"))?,
        },
        classes.ok_or_else(|| missing("num_classes"))?,
    )
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = BodyWriter::default();
    w.u8(ckpt.stage as u8);
    w.str(&config_echo(ckpt.model.config()));
    let layout = ckpt.model.config().param_layout();
    w.u32(layout.len() as u32);
    for ((name, shape), p) in layout.iter().zip(ckpt.model.params()) {
        w.str(name);
        w.u32(shape.len() as u32);
        for &d in shape {
            w.u32(d as u32);
        }
        w.f32s(p.data());
    }
    format::encode(MAGIC, VERSION, &w.buf)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let body = format::decode(path, bytes, MAGIC, VERSION, "checkpoint")?;
    let mut r = BodyReader::new(path, body);
    let tag = r.u8("stage tag")?;
    let stage = StageTag::from_u8(tag).ok_or_else(|| r.format_err(format!("unknown stage tag {tag}")))?;
    let config = parse_echo(&r.str("config echo")?)?;
    let layout = config.param_layout();
    let count = r.u32("parameter count")? as usize;
    if count != layout.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "expected {} parameters, file has {count}",
            layout.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in &layout {
        let got = r.str("parameter name")?;
        if &got != name {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected parameter `{name}`, found `{got}`"
            )));
        }
        let rank = r.u32("parameter rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("parameter dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{name}: expected shape {shape:?}, found {dims:?}"
            )));
        }
        let n = dims.iter().product();
        params.push(Tensor::new(dims, r.f32s(n, name)?)?);
    }
    r.finish()?;
    Ok(Checkpoint {
        stage,
        model: Model::from_params(config, params)?,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    format::write_file(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(path, &format::read_file(path)?)
}
