//! JSON checkpoints. Loading validates every layer shape exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::{FeatureTransform, NormStats};
use super::model::{
    layer_offset, Aggregation, GnnModel, PowerHead, TrainingMetadata, LAYER_NAMES, LAYER_SHAPES, PARAM_COUNT,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Architecture {
    name: String,
    message_layers: Vec<[usize; 2]>,
    update_layers: Vec<[usize; 2]>,
    hidden_activation: String,
    output_activation: String,
    aggregation: Aggregation,
    head: PowerHead,
    feature_transform: FeatureTransform,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    name: String,
    /// `outputs` rows of `inputs` values; `null` marks a non-finite value.
    weights: Vec<Vec<Option<f64>>>,
    bias: Vec<Option<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    architecture: Architecture,
    rounds: usize,
    layers: Vec<LayerDoc>,
    normalization: NormStats,
    p_max: f64,
    training: TrainingMetadata,
}

const ARCH_NAME: &str = "per-channel-mpnn";

pub fn to_json(model: &GnnModel) -> Result<String> {
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Corrupt("refusing to save non-finite parameters".into()));
    }
    let layers = (0..LAYER_SHAPES.len())
        .map(|l| {
            let v = model.layer(l);
            LayerDoc {
                name: LAYER_NAMES[l].to_string(),
                weights: v
                    .weights
                    .chunks(v.inputs)
                    .map(|row| row.iter().copied().map(Some).collect())
                    .collect(),
                bias: v.bias.iter().copied().map(Some).collect(),
            }
        })
        .collect();
    let doc = CheckpointDoc {
        architecture: Architecture {
            name: ARCH_NAME.into(),
            message_layers: LAYER_SHAPES[..2].iter().map(|&(i, o)| [i, o]).collect(),
            update_layers: LAYER_SHAPES[2..].iter().map(|&(i, o)| [i, o]).collect(),
            hidden_activation: "relu".into(),
            output_activation: "sigmoid".into(),
            aggregation: model.aggregation,
            head: model.head,
            feature_transform: model.transform,
        },
        rounds: model.rounds,
        layers,
        normalization: model.stats,
        p_max: model.p_max,
        training: model.metadata.clone(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_json(text: &str) -> Result<GnnModel> {
    let doc: CheckpointDoc =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("invalid checkpoint: {e}")))?;
    let arch = &doc.architecture;
    let declared: Vec<[usize; 2]> = arch.message_layers.iter().chain(&arch.update_layers).copied().collect();
    let expected: Vec<[usize; 2]> = LAYER_SHAPES.iter().map(|&(i, o)| [i, o]).collect();
    if declared != expected {
        return Err(Error::Format(format!(
            "architecture layers {declared:?} differ from {expected:?}"
        )));
    }
    if doc.layers.len() != LAYER_SHAPES.len() {
        return Err(Error::Format(format!(
            "expected {} layers, found {}",
            LAYER_SHAPES.len(),
            doc.layers.len()
        )));
    }
    if doc.rounds == 0 {
        return Err(Error::Format("rounds must be at least 1".into()));
    }

    let mut params = vec![0.0; PARAM_COUNT];
    for (l, layer) in doc.layers.iter().enumerate() {
        let name = LAYER_NAMES[l];
        if layer.name != name {
            return Err(Error::Format(format!(
                "layer {l} is named `{}`, expected `{name}`",
                layer.name
            )));
        }
        let (inputs, outputs) = LAYER_SHAPES[l];
        if layer.weights.len() != outputs || layer.weights.iter().any(|r| r.len() != inputs) {
            let rows = layer.weights.len();
            let cols = layer.weights.first().map_or(0, Vec::len);
            return Err(Error::Format(format!(
                "layer `{name}` has weights {rows}x{cols}, expected {outputs}x{inputs}"
            )));
        }
        if layer.bias.len() != outputs {
            return Err(Error::Format(format!(
                "layer `{name}` has {} biases, expected {outputs}",
                layer.bias.len()
            )));
        }
        let values = layer.weights.iter().flatten().chain(&layer.bias);
        let off = layer_offset(l);
        for (slot, v) in params[off..].iter_mut().zip(values) {
            match v {
                Some(x) if x.is_finite() => *slot = *x,
                _ => return Err(Error::Corrupt(format!("non-finite value in layer `{name}`"))),
            }
        }
    }
    if !doc.normalization.is_valid() {
        return Err(Error::Corrupt(format!(
            "invalid normalization stats {:?}",
            doc.normalization
        )));
    }
    let mut model = GnnModel::from_params(params, doc.normalization, doc.p_max)
        .map_err(|e| Error::Format(e.to_string()))?
        .with_rounds(doc.rounds)
        .with_aggregation(arch.aggregation)
        .with_head(arch.head)
        .with_transform(arch.feature_transform);
    model.metadata = doc.training;
    Ok(model)
}

pub fn save_model(model: &GnnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GnnModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_at, NetworkConfig};
    use crate::rng::Rng;

    fn model() -> GnnModel {
        GnnModel::init(&mut Rng::from_seed(12), NormStats { mean: -2.5, std: 0.7 }, 1.0)
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let m = model();
        let back = from_json(&to_json(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let inst = sample_at(&NetworkConfig::new(5, 2), 0);
        let a = m.predict(&m.features(&inst)).unwrap();
        let b = back.predict(&back.features(&inst)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tampered_layer_is_named() {
        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&model()).unwrap()).unwrap();
        doc["layers"][3]["weights"][0].as_array_mut().unwrap().pop();
        let err = from_json(&doc.to_string()).unwrap_err();
        assert!(matches!(&err, Error::Format(msg) if msg.contains("update.1")), "{err}");
    }

    #[test]
    fn missing_normalization_is_format_error() {
        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&model()).unwrap()).unwrap();
        doc.as_object_mut().unwrap().remove("normalization");
        assert!(matches!(from_json(&doc.to_string()), Err(Error::Format(_))));
    }

    #[test]
    fn null_weight_is_corruption() {
        let mut doc: serde_json::Value = serde_json::from_str(&to_json(&model()).unwrap()).unwrap();
        doc["layers"][0]["bias"][2] = serde_json::Value::Null;
        assert!(matches!(from_json(&doc.to_string()), Err(Error::Corrupt(_))));
    }
}
