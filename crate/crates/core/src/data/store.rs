//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.toml            spec echo, class table, counts, seed, format version
//! <dir>/<split>.images.bin       f32 blob [n, 1, S, S]
//! <dir>/<split>.labels.bin       u32 blob [n]
//! ```
//!
//! Blobs use the shared container (magic `OWDFBLOB`) with body
//! `element_type u8 | rank u32 | dims u64… | little-endian payload`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, BodyReader, BodyWriter};
use crate::tensor::Tensor;

use super::{BenchmarkSpec, ClassInfo, Dataset, Split, SplitKind};

pub const FORMAT_VERSION: u32 = 1;
const BLOB_MAGIC: &[u8; 8] = b"OWDFBLOB";
const ELEM_F32: u8 = 0;
const ELEM_U32: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Counts {
    labeled: usize,
    unlabeled: usize,
    test: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    num_classes: usize,
    counts: Counts,
    spec: BenchmarkSpec,
    classes: Vec<ClassInfo>,
}

fn encode_blob(elem: u8, dims: &[usize], payload: impl FnOnce(&mut BodyWriter)) -> Vec<u8> {
    let mut w = BodyWriter::default();
    w.u8(elem);
    w.u32(dims.len() as u32);
    for &d in dims {
        w.u64(d as u64);
    }
    payload(&mut w);
    format::encode(BLOB_MAGIC, FORMAT_VERSION, &w.buf)
}

fn decode_header<'a>(path: &'a Path, bytes: &'a [u8], want_elem: u8) -> Result<(BodyReader<'a>, Vec<usize>)> {
    let body = format::decode(path, bytes, BLOB_MAGIC, FORMAT_VERSION, "dataset blob")?;
    let mut r = BodyReader::new(path, body);
    let elem = r.u8("element type")?;
    if elem != want_elem {
        return Err(r.format_err(format!("element type {elem}, expected {want_elem}")));
    }
    let rank = r.u32("rank")? as usize;
    let dims = (0..rank)
        .map(|_| r.u64("dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((r, dims))
}

fn save_images(path: &Path, images: &Tensor<f32>) -> Result<()> {
    let bytes = encode_blob(ELEM_F32, images.shape(), |w| w.f32s(images.data()));
    format::write_file(path, &bytes)
}

fn load_images(path: &Path) -> Result<Tensor<f32>> {
    let bytes = format::read_file(path)?;
    let (mut r, dims) = decode_header(path, &bytes, ELEM_F32)?;
    let n = dims.iter().product();
    let data = r.f32s(n, "image payload")?;
    r.finish()?;
    Ok(Tensor::new(dims, data)?)
}

/// Writes a label vector in the dataset label format.
pub fn save_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let bytes = encode_blob(ELEM_U32, &[labels.len()], |w| w.u32s(labels));
    format::write_file(path, &bytes)
}

pub fn load_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = format::read_file(path)?;
    let (mut r, dims) = decode_header(path, &bytes, ELEM_U32)?;
    if dims.len() != 1 {
        return Err(r.format_err(format!("label blob must be rank 1, got {dims:?}")));
    }
    let labels = r.u32s(dims[0], "label payload")?;
    r.finish()?;
    Ok(labels)
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: ds.spec.seed,
        num_classes: ds.classes.len(),
        counts: Counts {
            labeled: ds.labeled.len(),
            unlabeled: ds.unlabeled.len(),
            test: ds.test.len(),
        },
        spec: ds.spec.clone(),
        classes: ds.classes.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format {
        path: dir.join("manifest.toml"),
        msg: e.to_string(),
    })?;
    format::write_file(&dir.join("manifest.toml"), text.as_bytes())?;
    for kind in SplitKind::ALL {
        let split = ds.split(kind);
        save_images(&dir.join(format!("{}.images.bin", kind.name())), &split.images)?;
        save_labels(&dir.join(format!("{}.labels.bin", kind.name())), &split.labels)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.toml");
    let text = String::from_utf8(format::read_file(&mpath)?).map_err(|_| Error::Format {
        path: mpath.clone(),
        msg: "manifest is not UTF-8".into(),
    })?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        msg: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: mpath,
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut splits = Vec::new();
    for (kind, want) in SplitKind::ALL.into_iter().zip([
        manifest.counts.labeled,
        manifest.counts.unlabeled,
        manifest.counts.test,
    ]) {
        let ipath = dir.join(format!("{}.images.bin", kind.name()));
        let images = load_images(&ipath)?;
        let labels = load_labels(&dir.join(format!("{}.labels.bin", kind.name())))?;
        let size = manifest.spec.image_size;
        if images.shape() != [want, 1, size, size] || labels.len() != want {
            return Err(Error::Format {
                path: ipath,
                msg: format!(
                    "manifest promises {want} samples of {size}×{size}, blob holds {:?} with {} labels",
                    images.shape(),
                    labels.len()
                ),
            });
        }
        splits.push(Split { images, labels });
    }
    let test = splits.pop().expect("three splits");
    let unlabeled = splits.pop().expect("three splits");
    let labeled = splits.pop().expect("three splits");
    let ds = Dataset {
        spec: manifest.spec,
        classes: manifest.classes,
        labeled,
        unlabeled,
        test,
    };
    if ds.classes.len() != manifest.num_classes {
        return Err(Error::Format {
            path: mpath,
            msg: "class table length disagrees with num_classes".into(),
        });
    }
    ds.check_label_invariants()?;
    Ok(ds)
}
