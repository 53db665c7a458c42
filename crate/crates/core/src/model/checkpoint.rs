//! Safetensors checkpoints. All metadata lives under one header key as a
//! JSON object so the file bytes do not depend on hash-map ordering.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, SiameseModel};
use crate::error::{Error, Result};
use crate::nn::Parameterized;

const HEADER_KEY: &str = "siamtrack";

/// A named array stored alongside the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    extra: BTreeMap<String, serde_json::Value>,
}

/// Contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Free-form JSON entries, such as training progress.
    pub extra: BTreeMap<String, serde_json::Value>,
    pub arrays: BTreeMap<String, NamedArray>,
}

fn to_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    /// Snapshot of a model's parameters.
    pub fn from_model(model: &SiameseModel) -> Self {
        let mut arrays = BTreeMap::new();
        model.visit(&mut |p| {
            arrays.insert(
                p.name.clone(),
                NamedArray {
                    shape: p.shape.clone(),
                    data: p.value.clone(),
                },
            );
        });
        Self {
            model: model.config().clone(),
            extra: BTreeMap::new(),
            arrays,
        }
    }

    /// Builds the model described by the header and loads every parameter.
    pub fn to_model(&self) -> Result<SiameseModel> {
        let mut model = SiameseModel::new(self.model.clone(), 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies parameters into an existing model; every parameter must be
    /// present with a matching shape.
    pub fn load_into(&self, model: &mut SiameseModel) -> Result<()> {
        let mut err = None;
        model.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.arrays.get(&p.name) {
                None => err = Some(Error::Checkpoint(format!("missing parameter {}", p.name))),
                Some(a) if a.shape != p.shape => {
                    err = Some(Error::Checkpoint(format!(
                        "shape mismatch for {}: checkpoint {:?}, model {:?}",
                        p.name, a.shape, p.shape
                    )))
                }
                Some(a) => p.value.copy_from_slice(&a.data),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            extra: self.extra.clone(),
        };
        let mut meta = HashMap::new();
        meta.insert(HEADER_KEY.to_string(), serde_json::to_string(&header)?);
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .arrays
            .iter()
            .map(|(k, a)| (k.clone(), to_bytes(&a.data), a.shape.clone()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, b, s)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(format!("{k}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, meta) = SafeTensors::read_metadata(buf).map_err(bad)?;
        let raw = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Checkpoint("missing model header".into()))?;
        let header: Header =
            serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let st = SafeTensors::deserialize(buf).map_err(bad)?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("{name}: expected f32, got {:?}", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.insert(
                name,
                NamedArray {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Self {
            model: header.model,
            extra: header.extra,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        Self::from_bytes(&buf)
    }
}
