//! JSON checkpoints holding a model's configuration and parameters.
//!
//! Floats are written with shortest round-trip formatting, so a reload
//! reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const FORMAT: &str = "rnode-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    config: ModelConfig,
    majority_class: usize,
    params: Vec<Entry>,
}

pub fn to_json(model: &Model) -> Result<String> {
    let c = Container {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        majority_class: model.majority_class(),
        params: model
            .params()
            .iter()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&c)?)
}

pub fn from_json(text: &str) -> Result<Model> {
    let c: Container = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if c.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", c.format)));
    }
    if c.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            c.version
        )));
    }
    let mut model = Model::new(c.config, 0)?;
    if c.params.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            model.params().len(),
            c.params.len()
        )));
    }
    for entry in c.params {
        let id = model
            .params()
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", entry.name)))?;
        let slot = model.params_mut().get_mut(id);
        if slot.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let tensor = Tensor::new(entry.shape, entry.data)
            .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", entry.name)))?;
        *slot = tensor.with_requires_grad(true);
    }
    model.set_majority_class(c.majority_class)?;
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_json(&fs::read_to_string(path)?)
}
