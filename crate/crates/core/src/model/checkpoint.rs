//! Versioned JSON checkpoints and best-k averaging.

use super::{BilCtcModel, ModelSpec};
use crate::error::{Error, Result};
use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedParam {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub step: u64,
    pub dev_loss: f64,
    pub params: IndexMap<String, SavedParam>,
}

impl Checkpoint {
    pub fn from_model(model: &BilCtcModel, step: u64, dev_loss: f64) -> Self {
        let mut params = IndexMap::new();
        for (name, p) in model.store().iter() {
            let (rows, cols) = p.value.dim();
            params.insert(
                name.clone(),
                SavedParam {
                    shape: [rows, cols],
                    values: p.value.iter().copied().collect(),
                },
            );
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            spec: model.spec().clone(),
            step,
            dev_loss,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn param_matrix(&self, name: &str) -> Result<Array2<f64>> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint missing parameter {name}")))?;
        Array2::from_shape_vec((p.shape[0], p.shape[1]), p.values.clone())
            .map_err(|e| Error::Shape(format!("parameter {name}: {e}")))
    }
}

impl BilCtcModel {
    /// Rebuild a model from a checkpoint. Every model parameter must be
    /// present with a matching shape; mismatches are reported by name.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = BilCtcModel::new(ckpt.spec.clone(), 0)?;
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        let names: Vec<String> = model.store().names().map(str::to_string).collect();
        for name in &names {
            match ckpt.params.get(name) {
                None => missing.push(name.clone()),
                Some(p) => {
                    let current = model.store().get(name)?.dim();
                    if [current.0, current.1] != p.shape {
                        mismatched.push(format!(
                            "{name}: checkpoint {:?} vs model {:?}",
                            p.shape,
                            [current.0, current.1]
                        ));
                    }
                }
            }
        }
        if !missing.is_empty() || !mismatched.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint incompatible; missing: [{}]; shape mismatches: [{}]",
                missing.join(", "),
                mismatched.join("; ")
            )));
        }
        for name in &names {
            let value = ckpt.param_matrix(name)?;
            model.store_mut().set_value(name, &value)?;
        }
        model.store_mut().step = ckpt.step;
        Ok(model)
    }
}

/// Average the `k` checkpoints with the lowest recorded dev loss into one
/// checkpoint. Ties break toward earlier paths in the given order.
pub fn average_checkpoints(paths: &[std::path::PathBuf], k: usize) -> Result<Checkpoint> {
    if paths.is_empty() || k == 0 {
        return Err(Error::InvalidInput(
            "averaging requires at least one checkpoint and k >= 1".into(),
        ));
    }
    let mut loaded: Vec<(usize, Checkpoint)> = paths
        .iter()
        .enumerate()
        .map(|(i, p)| Checkpoint::load(p).map(|c| (i, c)))
        .collect::<Result<_>>()?;
    loaded.sort_by(|a, b| {
        a.1.dev_loss
            .partial_cmp(&b.1.dev_loss)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    let chosen: Vec<&Checkpoint> = loaded.iter().take(k).map(|(_, c)| c).collect();
    let first = chosen[0];
    let mut avg = first.clone();
    let n = chosen.len() as f64;
    for (name, p) in avg.params.iter_mut() {
        for v in p.values.iter_mut() {
            *v /= n;
        }
        for other in chosen.iter().skip(1) {
            let op = other.params.get(name).ok_or_else(|| {
                Error::Config(format!("checkpoint missing parameter {name} while averaging"))
            })?;
            if op.shape != p.shape {
                return Err(Error::Shape(format!(
                    "parameter {name}: shape {:?} vs {:?} while averaging",
                    op.shape, p.shape
                )));
            }
            for (v, &o) in p.values.iter_mut().zip(&op.values) {
                *v += o / n;
            }
        }
    }
    avg.step = chosen.iter().map(|c| c.step).max().unwrap();
    avg.dev_loss = chosen.iter().map(|c| c.dev_loss).sum::<f64>() / n;
    Ok(avg)
}
