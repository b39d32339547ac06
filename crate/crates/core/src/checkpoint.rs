//! Parameter checkpoints: one tensor file per parameter, a JSON index and
//! the model configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::params::{ParamInfo, ParamStore};
use crate::phantom::{read_json, write_json};
use crate::tensor::{Scalar, Shape};
use crate::tensor_io::{load_tensor, save_tensor};

pub const INDEX_FILE: &str = "index.json";
pub const MODEL_FILE: &str = "model.json";
pub const PARAM_DIR: &str = "params";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub file: PathBuf,
    pub shape: [usize; 4],
    pub trainable: bool,
}

pub type CheckpointIndex = BTreeMap<String, IndexEntry>;

/// Writes `store` under `dir`, replacing any previous parameter files.
pub fn save_checkpoint<T: Scalar>(dir: &Path, cfg: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    let params = dir.join(PARAM_DIR);
    if params.exists() {
        fs::remove_dir_all(&params).map_err(|e| Error::io(&params, e))?;
    }
    fs::create_dir_all(&params).map_err(|e| Error::io(&params, e))?;
    let mut index = CheckpointIndex::new();
    for (name, p) in store.iter() {
        let file = PathBuf::from(PARAM_DIR).join(format!("{name}.msrt"));
        save_tensor(dir.join(&file), &p.value)?;
        index.insert(
            name.to_string(),
            IndexEntry {
                file,
                shape: p.value.shape().0,
                trainable: p.trainable,
            },
        );
    }
    write_json(&dir.join(INDEX_FILE), &index)?;
    write_json(&dir.join(MODEL_FILE), cfg)
}

pub fn load_model_config(dir: &Path) -> Result<ModelConfig> {
    let cfg: ModelConfig = read_json(&dir.join(MODEL_FILE))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads parameters and checks them against `cfg`'s expected layout.
pub fn load_params<T: Scalar>(dir: &Path, cfg: &ModelConfig) -> Result<ParamStore<T>> {
    let index: CheckpointIndex = read_json(&dir.join(INDEX_FILE))?;
    let mut store = ParamStore::new();
    for (name, entry) in &index {
        let t = load_tensor(dir.join(&entry.file))?;
        if t.shape() != Shape(entry.shape) {
            return Err(Error::shape(format!(
                "parameter {name}: index says {}, file holds {}",
                Shape(entry.shape),
                t.shape()
            )));
        }
        store.insert(name.clone(), t, entry.trainable)?;
    }
    let expected: BTreeMap<String, ParamInfo> = Network::new(cfg)?.init::<T>(0)?.layout();
    store.check_layout(&expected)?;
    Ok(store)
}

/// Model configuration and parameters from a checkpoint directory.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(ModelConfig, ParamStore<T>)> {
    let cfg = load_model_config(dir)?;
    let store = load_params(dir, &cfg)?;
    Ok((cfg, store))
}
