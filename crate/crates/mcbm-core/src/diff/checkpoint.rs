//! Parameter checkpoints.
//!
//! JSON with f64 values carried as base64 of their little-endian bytes, so a
//! save/load round trip is bitwise exact regardless of text formatting.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::diff::optim::OptimizerState;
use crate::diff::params::{Init, ParamStore};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub values: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_m: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_v: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub master_seed: u64,
    pub step_count: u64,
    pub params: BTreeMap<String, ParamRecord>,
    /// Caller-owned descriptor (model variant, layout, history pointer, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f64s(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::checkpoint(format!("bad base64 payload: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::checkpoint(format!(
            "payload holds {} bytes, expected {} f64 values",
            bytes.len(),
            expected
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl Checkpoint {
    pub fn capture(
        store: &ParamStore,
        opt: Option<&OptimizerState>,
        extra: serde_json::Value,
    ) -> Checkpoint {
        let mut params = BTreeMap::new();
        for id in store.ids() {
            let t = store.tensor(id);
            let mut rec = ParamRecord {
                shape: t.shape().to_vec(),
                values: encode_f64s(t.values()),
                moment_m: None,
                moment_v: None,
            };
            if let Some(opt) = opt {
                let m = opt.moments(id);
                rec.moment_m = Some(encode_f64s(&m.m));
                rec.moment_v = Some(encode_f64s(&m.v));
            }
            params.insert(store.name(id).to_string(), rec);
        }
        Checkpoint {
            format_version: FORMAT_VERSION,
            master_seed: store.master_seed(),
            step_count: opt.map_or(0, |o| o.step_count()),
            params,
            extra,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::checkpoint(format!("corrupt checkpoint {path:?}: {e}")))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::checkpoint(format!(
                "checkpoint format version {} unsupported (this build reads version {})",
                ck.format_version, FORMAT_VERSION
            )));
        }
        Ok(ck)
    }

    /// Overwrites `store` values with the checkpointed ones. The store must
    /// hold exactly the checkpointed names with matching shapes.
    pub fn apply_params(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::checkpoint(format!(
                "model has {} parameters, checkpoint has {}",
                store.len(),
                self.params.len()
            )));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let rec = self
                .params
                .get(&name)
                .ok_or_else(|| Error::checkpoint(format!("missing parameter {name:?}")))?;
            if rec.shape != store.tensor(id).shape() {
                return Err(Error::checkpoint(format!(
                    "parameter {name:?} shape {:?} does not match checkpointed {:?}",
                    store.tensor(id).shape(),
                    rec.shape
                )));
            }
            let values = decode_f64s(&rec.values, store.tensor(id).len())?;
            store.tensor_mut(id).values_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    /// Restores optimizer moment buffers saved alongside the parameters.
    pub fn apply_moments(&self, store: &ParamStore, opt: &mut OptimizerState) -> Result<()> {
        for id in store.ids() {
            let name = store.name(id);
            let rec = self
                .params
                .get(name)
                .ok_or_else(|| Error::checkpoint(format!("missing parameter {name:?}")))?;
            let n = store.tensor(id).len();
            let m = match &rec.moment_m {
                Some(text) => decode_f64s(text, n)?,
                None => vec![0.0; n],
            };
            let v = match &rec.moment_v {
                Some(text) => decode_f64s(text, n)?,
                None => vec![0.0; n],
            };
            opt.restore_moments(id, m, v)?;
        }
        opt.set_step_count(self.step_count);
        Ok(())
    }

    /// Builds a standalone store holding exactly the checkpointed parameters,
    /// for tools that inspect weights without a model around them.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new(self.master_seed);
        for (name, rec) in &self.params {
            let n: usize = rec.shape.iter().product();
            let values = decode_f64s(&rec.values, n)?;
            store.add(name, Tensor::new(rec.shape.clone(), values)?, Init::AsIs)?;
        }
        Ok(store)
    }
}
