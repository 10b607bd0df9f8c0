//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `OCOSCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then every value
//! as a little-endian `f64`: parameters in registry order, followed by each
//! normalization layer's main mean, main variance, aux mean and aux variance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DualBatchNormState, Model, ModelConfig, Param, RunningStats};
use crate::tensor::Array;

const MAGIC: &[u8; 8] = b"OCOSCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    params: Vec<ParamEntry>,
    bn_widths: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let manifest = Manifest {
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        bn_widths: model
            .batch_norm_states()
            .iter()
            .map(|s| s.main.mean.len())
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut push = |values: &[f64]| {
        values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
    };
    for p in model.params() {
        push(p.value.data());
    }
    for s in model.batch_norm_states() {
        for stats in [&s.main, &s.aux] {
            push(&stats.mean);
            push(&stats.var);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("manifest too large".into()))?;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)?;

    let mut params = Vec::with_capacity(manifest.params.len());
    for entry in manifest.params {
        let n = entry.shape.iter().product();
        let value = Array::new(entry.shape, r.reals(n)?)
            .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", entry.name)))?;
        params.push(Param {
            name: entry.name,
            value,
        });
    }
    let mut bn = Vec::with_capacity(manifest.bn_widths.len());
    for &w in &manifest.bn_widths {
        let main = RunningStats {
            mean: r.reals(w)?,
            var: r.reals(w)?,
        };
        let aux = RunningStats {
            mean: r.reals(w)?,
            var: r.reals(w)?,
        };
        bn.push(DualBatchNormState { main, aux });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Model::from_parts(manifest.config, params, bn)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}
