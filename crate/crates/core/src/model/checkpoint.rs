use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Result};
use crate::container::{Container, ContainerError};
use crate::search_space::BackboneSpec;
use crate::tensor::ParamSet;

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    spec: BackboneSpec,
}

fn container_err(e: ContainerError) -> ModelError {
    ModelError::Input(format!("checkpoint: {e}"))
}

impl Model {
    /// Parameters in layout order, with config and spec in the metadata.
    pub fn to_container(&self) -> Container {
        let meta = ModelMeta {
            config: *self.config(),
            spec: self.spec().clone(),
        };
        Container {
            kind: "model".into(),
            meta: serde_json::to_value(meta).expect("meta serializes"),
            arrays: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "model" {
            return Err(ModelError::Input(format!("container holds a {:?}, not a model", c.kind)));
        }
        let meta: ModelMeta = serde_json::from_value(c.meta.clone()).map_err(|e| ModelError::Input(e.to_string()))?;
        let mut params = ParamSet::new();
        for (name, t) in &c.arrays {
            params.insert(name.clone(), t.clone())?;
        }
        Model::from_params(&meta.spec, &meta.config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path).map_err(container_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path).map_err(container_err)?)
    }
}
