//! JSON checkpoint: model dims, conditioning mode, outcome/covariate
//! standardization and every parameter tensor by name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::flow::{Conditioning, FlowModel};
use crate::nets::ModelDims;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    /// Row-major.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dims: ModelDims,
    pub conditioning: Conditioning,
    pub standardizer: Standardizer,
    pub params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new(model: &FlowModel, standardizer: &Standardizer) -> Self {
        let params = model
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, StoredTensor { shape: t.shape().to_vec(), values: t.values().to_vec() }))
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            dims: model.dims,
            conditioning: model.conditioning,
            standardizer: standardizer.clone(),
            params,
        }
    }

    pub fn into_model(self) -> Result<(FlowModel, Standardizer)> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::parse(
                "checkpoint.format_version",
                format!("unsupported version {}; expected {FORMAT_VERSION}", self.format_version),
            ));
        }
        let mut model = FlowModel::init(self.dims, self.conditioning, 0)?;
        let expected = model.named_params().len();
        if self.params.len() != expected {
            return Err(Error::parse("checkpoint.params", format!("expected {expected} tensors, found {}", self.params.len())));
        }
        let tensors = self
            .params
            .into_iter()
            .map(|(name, t)| Tensor::new(t.shape, t.values).map(|t| (name, t)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        model.load(&tensors)?;
        if model.named_params().iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Numerical("checkpoint contains non-finite parameters".into()));
        }
        Ok((model, self.standardizer))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Contract(format!("checkpoint serialization: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }
}
