//! Portable checkpoint container.
//!
//! Layout: 8-byte magic `SLTFCKPT`, u32 version, u32 header length, a JSON
//! header (hyperparameters, seed, vocab, tensor names and shapes, training
//! curve), then every tensor in header order as little-endian f32. All
//! integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Hyper, TransformerModel, Weights};
use super::train::EpochStats;
use super::vocab::Vocab;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SLTFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    hyper: Hyper,
    seed: u64,
    vocab: Vocab,
    tensors: Vec<TensorSpec>,
    #[serde(default)]
    training_curve: Vec<EpochStats>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint(model: &TransformerModel, mut out: impl Write) -> Result<()> {
    let header = Header {
        hyper: model.hyper.clone(),
        seed: model.seed,
        vocab: model.vocab.clone(),
        tensors: model
            .weights
            .specs()
            .into_iter()
            .map(|(name, shape)| TensorSpec { name, shape })
            .collect(),
        training_curve: model.training_curve.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    let mut buf = Vec::with_capacity(model.weights.param_count() * 4);
    for t in model.weights.tensors() {
        for &v in t {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<TransformerModel> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let take = |bytes: &[u8], at: usize, n: usize| -> Result<Vec<u8>> {
        bytes
            .get(at..at + n)
            .map(<[u8]>::to_vec)
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))
    };
    if take(&bytes, 0, 8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let u32_at =
        |at: usize| -> Result<u32> { Ok(u32::from_le_bytes(take(&bytes, at, 4)?.try_into().expect("4 bytes"))) };
    let version = u32_at(8)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u32_at(12)? as usize;
    let header: Header = serde_json::from_slice(&take(&bytes, 16, header_len)?)?;
    let mut weights = Weights::zeros(header.vocab.len(), &header.hyper);
    let expected: Vec<TensorSpec> = weights
        .specs()
        .into_iter()
        .map(|(name, shape)| TensorSpec { name, shape })
        .collect();
    if expected != header.tensors {
        return Err(Error::Checkpoint("tensor layout does not match hyperparameters".into()));
    }
    let mut at = 16 + header_len;
    let total = weights.param_count();
    if bytes.len() != at + total * 4 {
        return Err(Error::Checkpoint(format!(
            "expected {} weight bytes, found {}",
            total * 4,
            bytes.len().saturating_sub(at)
        )));
    }
    for t in weights.tensors_mut() {
        for v in t.iter_mut() {
            *v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as f64;
            at += 4;
        }
    }
    let mut model = TransformerModel::new(header.vocab, header.hyper, weights, header.seed)?;
    model.training_curve = header.training_curve;
    Ok(model)
}

pub fn save_checkpoint(model: &TransformerModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TransformerModel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
