//! Checkpoint files: a JSON header line followed by little-endian tensors in
//! the header's storage dtype (`f32` or `f64`).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamStore};
use crate::io_util::write_atomic;
use crate::{Error, Result};

const FORMAT_TAG: &str = "songdisc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dual,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub step: u64,
    /// Free-form training metadata (config snapshot, best validation loss, ...).
    pub meta: serde_json::Value,
    /// `"f32"` or `"f64"`.
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: header plus tensors by name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

pub fn save_checkpoint(
    path: &Path,
    kind: ModelKind,
    model: ModelConfig,
    step: u64,
    meta: serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let wide = tensors.iter().any(|(_, t)| t.dtype() == DType::F64);
    let header = CheckpointHeader {
        format: FORMAT_TAG.into(),
        version: CHECKPOINT_VERSION,
        kind,
        model,
        step,
        meta,
        dtype: if wide { "f64" } else { "f32" }.into(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.dims().to_vec() })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, t) in tensors {
        if wide {
            for v in t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        } else {
            for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_atomic(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::format("checkpoint header line missing"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::format(format!("corrupt checkpoint header: {e}")))?;
    if header.format != FORMAT_TAG || header.version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::format(format!("unsupported checkpoint dtype '{other}'"))),
    };
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>() * width).sum();
    if body.len() != expected {
        return Err(Error::format(format!("checkpoint body has {} bytes, header describes {expected}", body.len())));
    }
    let mut tensors = BTreeMap::new();
    let mut offset = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let bytes = &body[offset..offset + width * n];
        let values = if width == 4 {
            bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect()
        } else {
            bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()
        };
        offset += width * n;
        tensors.insert(e.name.clone(), (e.shape.clone(), values));
    }
    Ok(Checkpoint { header, tensors })
}

impl Checkpoint {
    pub fn tensor(&self, name: &str, dtype: DType) -> Result<Tensor> {
        let (shape, values) = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::validation(format!("checkpoint lacks tensor '{name}'")))?;
        Ok(Tensor::from_vec(values.clone(), shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Copies every parameter and buffer of `store` from the checkpoint after
    /// checking the whole shape table first.
    pub fn restore(&self, store: &ParamStore) -> Result<()> {
        let named = store.params().iter().chain(store.buffers());
        for (name, var) in named.clone() {
            match self.tensors.get(name) {
                None => return Err(Error::validation(format!("checkpoint/architecture mismatch: missing '{name}'"))),
                Some((shape, _)) if shape.as_slice() != var.dims() => {
                    return Err(Error::validation(format!(
                        "checkpoint/architecture mismatch: '{name}' has shape {shape:?}, model expects {:?}",
                        var.dims()
                    )))
                }
                Some(_) => {}
            }
        }
        for (name, var) in named {
            var.set(&self.tensor(name, store.dtype())?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DualVae;

    #[test]
    fn save_load_restores_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cfg = ModelConfig { hidden: 8, heads: 2, global_dim: 3, local_dim: 4, ..ModelConfig::desk() };
        let a = DualVae::new(cfg, DType::F32, 1).unwrap();
        save_checkpoint(&p, ModelKind::Dual, cfg, 17, serde_json::json!({}), &a.store.named_tensors()).unwrap();
        let b = DualVae::new(cfg, DType::F32, 2).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.header.step, 17);
        ck.restore(&b.store).unwrap();
        for ((n1, t1), (n2, t2)) in a.store.named_tensors().iter().zip(b.store.named_tensors()) {
            assert_eq!(n1, &n2);
            assert_eq!(t1.flatten_all().unwrap().to_vec1::<f32>().unwrap(), t2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }

    #[test]
    fn wide_tensors_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ckpt");
        let t = Tensor::new(&[0.1f64, 1.0 / 3.0, -2.5e-300], &Device::Cpu).unwrap();
        save_checkpoint(&p, ModelKind::Dual, ModelConfig::desk(), 0, serde_json::json!({}), &[("m".into(), t.clone())])
            .unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.header.dtype, "f64");
        assert_eq!(ck.tensor("m", DType::F64).unwrap().to_vec1::<f64>().unwrap(), t.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cfg = ModelConfig { hidden: 8, heads: 2, global_dim: 3, local_dim: 4, ..ModelConfig::desk() };
        let a = DualVae::new(cfg, DType::F32, 1).unwrap();
        save_checkpoint(&p, ModelKind::Dual, cfg, 0, serde_json::json!({}), &a.store.named_tensors()).unwrap();
        let other = DualVae::new(ModelConfig { local_dim: 5, ..cfg }, DType::F32, 1).unwrap();
        let err = load_checkpoint(&p).unwrap().restore(&other.store).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cfg = ModelConfig { hidden: 8, heads: 2, global_dim: 3, local_dim: 4, ..ModelConfig::desk() };
        let a = DualVae::new(cfg, DType::F32, 1).unwrap();
        save_checkpoint(&p, ModelKind::Dual, cfg, 0, serde_json::json!({}), &a.store.named_tensors()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));
    }
}
