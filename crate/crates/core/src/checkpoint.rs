//! Weight checkpoints.
//!
//! A checkpoint is a safetensors archive: every parameter is stored as a
//! little-endian float32 array under its dotted name, and the JSON model
//! configuration is kept in the archive metadata under `model_config`.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StereoModel};

const CONFIG_KEY: &str = "model_config";

pub fn encode_checkpoint(model: &StereoModel) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    for (name, var) in model.var_store().named_vars() {
        let t = var.as_tensor().to_dtype(DType::F32)?;
        let shape = t.dims().to_vec();
        let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        arrays.push((name, shape, bytes));
    }
    let views = arrays
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(CONFIG_KEY.to_string(), serde_json::to_string(model.config())?)]);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(model: &StereoModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    // write then rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Model configuration stored in a checkpoint.
pub fn checkpoint_config(bytes: &[u8]) -> Result<ModelConfig> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(CONFIG_KEY))
        .ok_or_else(|| Error::Checkpoint("archive carries no model configuration".into()))?;
    Ok(serde_json::from_str(text)?)
}

/// Copy every parameter of the archive into `model`. The archive must hold
/// exactly the model's parameter names with matching shapes.
pub fn load_weights(model: &StereoModel, bytes: &[u8]) -> Result<()> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let store = model.var_store();
    let expected: Vec<String> = store.named_vars().into_iter().map(|(n, _)| n).collect();
    let mut found: Vec<String> = st.names().into_iter().map(str::to_string).collect();
    found.sort();
    if found != expected {
        let missing: Vec<_> = expected.iter().filter(|n| !found.contains(n)).take(5).collect();
        let extra: Vec<_> = found.iter().filter(|n| !expected.contains(n)).take(5).collect();
        return Err(Error::Checkpoint(format!(
            "parameter names do not match the model (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    for name in &expected {
        let view = st.tensor(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("parameter {name} is {:?}, expected F32", view.dtype())));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?;
        store.assign(name, &t)?;
    }
    Ok(())
}

/// Rebuild a model from a checkpoint file. When `expected` is given the
/// stored configuration must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>, device: &Device) -> Result<StereoModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let cfg = checkpoint_config(&bytes)?;
    if let Some(exp) = expected {
        if exp != &cfg {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
    }
    let model = StereoModel::new(&cfg, 0, DType::F32, device)?;
    load_weights(&model, &bytes)?;
    Ok(model)
}
