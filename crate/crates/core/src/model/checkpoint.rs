//! On-disk container: `manifest.json` (config, array names and shapes,
//! dtype, format version) and `params.bin` (little-endian arrays in manifest
//! order), plus optional vocabularies and BPE merges.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Float, ParamStore, Tensor};
use crate::text::{BpeModel, Vocab};

pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const SRC_VOCAB_FILE: &str = "vocab.src.txt";
pub const TGT_VOCAB_FILE: &str = "vocab.tgt.txt";
pub const BPE_FILE: &str = "bpe.merges";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub dtype: DType,
    pub arrays: Vec<ArrayEntry>,
}

/// A model together with the preprocessing it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Float> {
    pub model: Model<T>,
    pub src_vocab: Option<Vocab>,
    pub tgt_vocab: Option<Vocab>,
    pub bpe: Option<BpeModel>,
}

impl<T: Float> Checkpoint<T> {
    pub fn bare(model: Model<T>) -> Self {
        Checkpoint {
            model,
            src_vocab: None,
            tgt_vocab: None,
            bpe: None,
        }
    }
}

pub fn manifest_of<T: Float>(model: &Model<T>) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        dtype: T::DTYPE,
        arrays: model
            .params()
            .iter()
            .map(|(_, name, t)| ArrayEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    }
}

pub fn save_checkpoint<T: Float>(dir: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let manifest = manifest_of(&ckpt.model);
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    let mut bytes = Vec::with_capacity(ckpt.model.params().num_scalars() * T::DTYPE.size_of());
    for (_, _, t) in ckpt.model.params().iter() {
        for &x in t.data() {
            x.write_le(&mut bytes);
        }
    }
    write_file(&dir.join(PARAMS_FILE), &bytes)?;
    if let Some(v) = &ckpt.src_vocab {
        v.save(&dir.join(SRC_VOCAB_FILE))?;
    }
    if let Some(v) = &ckpt.tgt_vocab {
        v.save(&dir.join(TGT_VOCAB_FILE))?;
    }
    if let Some(b) = &ckpt.bpe {
        b.save(&dir.join(BPE_FILE))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&read_file(&dir.join(MANIFEST_FILE))?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format {} (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

fn decode_arrays<S: Float, T: Float>(m: &Manifest, bytes: &[u8]) -> Result<ParamStore<T>> {
    let width = S::DTYPE.size_of();
    let total: usize = m.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * width {
        return Err(Error::Incompatible(format!(
            "{PARAMS_FILE} holds {} bytes, manifest needs {}",
            bytes.len(),
            total * width
        )));
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for a in &m.arrays {
        let n: usize = a.shape.iter().product();
        let data: Vec<T> = bytes[off..off + n * width]
            .chunks_exact(width)
            .map(|c| T::from_f64_lossy(S::read_le(c).to_f64_lossy()))
            .collect();
        off += n * width;
        store.insert(a.name.clone(), Tensor::new(a.shape.clone(), data)?)?;
    }
    Ok(store)
}

/// Loads only the model, converting to precision `T` if needed.
pub fn load_model<T: Float>(dir: &Path) -> Result<Model<T>> {
    let m = read_manifest(dir)?;
    let bytes = read_file(&dir.join(PARAMS_FILE))?;
    let store = match m.dtype {
        DType::F32 => decode_arrays::<f32, T>(&m, &bytes)?,
        DType::F64 => decode_arrays::<f64, T>(&m, &bytes)?,
    };
    Model::from_parts(m.config, store)
}

pub fn load_checkpoint<T: Float>(dir: &Path) -> Result<Checkpoint<T>> {
    let model = load_model(dir)?;
    let opt = |name: &str| {
        let p = dir.join(name);
        p.exists().then_some(p)
    };
    Ok(Checkpoint {
        model,
        src_vocab: opt(SRC_VOCAB_FILE).map(|p| Vocab::load(&p)).transpose()?,
        tgt_vocab: opt(TGT_VOCAB_FILE).map(|p| Vocab::load(&p)).transpose()?,
        bpe: opt(BPE_FILE).map(|p| BpeModel::load(&p)).transpose()?,
    })
}
