//! Explanation results and their on-disk export.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::Result;
use crate::io::write_tensor;
use crate::tensor::Tensor;

/// An input-shaped explanation plus the metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    pub values: Tensor,
    pub method: String,
    pub params: Map<String, Value>,
    pub neuron_index: usize,
}

impl Saliency {
    pub fn new(values: Tensor, method: impl Into<String>, neuron_index: usize) -> Self {
        Self {
            values,
            method: method.into(),
            params: Map::new(),
            neuron_index,
        }
    }

    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }

    pub fn with_param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn sidecar(&self, model_hash: &str) -> Value {
        json!({
            "method": self.method,
            "params": Value::Object(self.params.clone()),
            "neuron_index": self.neuron_index,
            "model_hash": model_hash,
        })
    }

    /// Writes `values` as an `XTEN` file at `path` and the JSON sidecar next
    /// to it with a `.json` extension. Returns the sidecar path.
    pub fn export(&self, path: impl AsRef<Path>, model_hash: &str) -> Result<PathBuf> {
        let path = path.as_ref();
        write_tensor(path, &self.values)?;
        let side = path.with_extension("json");
        let text = serde_json::to_string_pretty(&self.sidecar(model_hash))
            .expect("json values always serialize");
        std::fs::write(&side, text)?;
        Ok(side)
    }
}
