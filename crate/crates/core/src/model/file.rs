//! The model file: a JSON document with base-64 weight arrays.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "name": "toy",                       (optional)
//!   "input_shape": [1, 8, 8],
//!   "input_scale": "255",
//!   "layers": [
//!     {"kind": "conv", "dims": [out, in, rows, cols], "stride": 1, "padding": 0,
//!      "weight_scale": "65536", "bias_scale": "16711680",
//!      "weights": "<b64>", "bias": "<b64>"},
//!     {"kind": "relu"},
//!     {"kind": "avg_pool", "window": [2, 2], "stride": 2},
//!     {"kind": "flatten"},
//!     {"kind": "dense", "dims": [out, in], "weight_scale": "…", "bias_scale": "…",
//!      "weights": "<b64>", "bias": "<b64>"}
//!   ]
//! }
//! ```
//!
//! Scales are decimal strings. Weight and bias arrays are little-endian
//! signed 64-bit integers in row-major order, base-64 encoded (standard
//! alphabet, padded). `stride` defaults to 1 and `padding` to 0.
//! `bias_scale` may be omitted when the bias is already at the product scale
//! of the layer.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Layer, ModelError, NetworkSpec, Result};
use crate::fixed_point::Scale;
use crate::paillier::PublicKey;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    input_shape: Vec<usize>,
    input_scale: String,
    layers: Vec<LayerDoc>,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerDoc {
    Conv {
        dims: Vec<usize>,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        stride: usize,
        #[serde(default, skip_serializing_if = "is_zero")]
        padding: usize,
        weight_scale: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias_scale: Option<String>,
        weights: String,
        bias: String,
    },
    AvgPool {
        window: [usize; 2],
        stride: usize,
    },
    Relu,
    Flatten,
    Dense {
        dims: Vec<usize>,
        weight_scale: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias_scale: Option<String>,
        weights: String,
        bias: String,
    },
}

pub fn encode_i64s(values: &[i64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_i64s(text: &str) -> std::result::Result<Vec<i64>, String> {
    let bytes = STANDARD.decode(text.trim()).map_err(|e| format!("bad base-64: {e}"))?;
    if bytes.len() % 8 != 0 {
        return Err(format!("{} bytes is not a whole number of 64-bit integers", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn parse_scale(layer: usize, field: &str, text: &str) -> Result<Scale> {
    text.parse()
        .map_err(|e| ModelError::Format { layer, detail: format!("{field}: {e}") })
}

fn array(layer: usize, field: &str, text: &str, expected: usize) -> Result<Vec<i64>> {
    let values = decode_i64s(text)
        .map_err(|detail| ModelError::Format { layer, detail: format!("{field}: {detail}") })?;
    if values.len() != expected {
        return Err(ModelError::Shape {
            layer,
            detail: format!("{field} holds {} values, dims need {expected}", values.len()),
        });
    }
    Ok(values)
}

fn dims<const K: usize>(layer: usize, dims: &[usize]) -> Result<[usize; K]> {
    dims.try_into().map_err(|_| ModelError::Shape {
        layer,
        detail: format!("expected {K} dims, found {dims:?}"),
    })
}

fn layer_from_doc(idx: usize, doc: LayerDoc) -> Result<Layer> {
    Ok(match doc {
        LayerDoc::Conv { dims: d, stride, padding, weight_scale, bias_scale, weights, bias } => {
            let [o, c, kr, kc] = dims::<4>(idx, &d)?;
            Layer::Conv {
                out_channels: o,
                in_channels: c,
                kernel: (kr, kc),
                stride,
                padding,
                weights: array(idx, "weights", &weights, o * c * kr * kc)?,
                bias: array(idx, "bias", &bias, o)?,
                weight_scale: parse_scale(idx, "weight_scale", &weight_scale)?,
                bias_scale: bias_scale
                    .map(|s| parse_scale(idx, "bias_scale", &s))
                    .transpose()?,
            }
        }
        LayerDoc::AvgPool { window, stride } => {
            Layer::AvgPool { window: (window[0], window[1]), stride }
        }
        LayerDoc::Relu => Layer::Relu,
        LayerDoc::Flatten => Layer::Flatten,
        LayerDoc::Dense { dims: d, weight_scale, bias_scale, weights, bias } => {
            let [o, i] = dims::<2>(idx, &d)?;
            Layer::Dense {
                out_features: o,
                in_features: i,
                weights: array(idx, "weights", &weights, o * i)?,
                bias: array(idx, "bias", &bias, o)?,
                weight_scale: parse_scale(idx, "weight_scale", &weight_scale)?,
                bias_scale: bias_scale
                    .map(|s| parse_scale(idx, "bias_scale", &s))
                    .transpose()?,
            }
        }
    })
}

fn layer_to_doc(layer: &Layer) -> LayerDoc {
    match layer {
        Layer::Conv {
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
            weights,
            bias,
            weight_scale,
            bias_scale,
        } => LayerDoc::Conv {
            dims: vec![*out_channels, *in_channels, kernel.0, kernel.1],
            stride: *stride,
            padding: *padding,
            weight_scale: weight_scale.to_string(),
            bias_scale: bias_scale.as_ref().map(Scale::to_string),
            weights: encode_i64s(weights),
            bias: encode_i64s(bias),
        },
        Layer::AvgPool { window, stride } => {
            LayerDoc::AvgPool { window: [window.0, window.1], stride: *stride }
        }
        Layer::Relu => LayerDoc::Relu,
        Layer::Flatten => LayerDoc::Flatten,
        Layer::Dense { out_features, in_features, weights, bias, weight_scale, bias_scale } => {
            LayerDoc::Dense {
                dims: vec![*out_features, *in_features],
                weight_scale: weight_scale.to_string(),
                bias_scale: bias_scale.as_ref().map(Scale::to_string),
                weights: encode_i64s(weights),
                bias: encode_i64s(bias),
            }
        }
    }
}

/// Parses and validates a model document.
///
/// With a key, the static value bound of the whole pipeline is also checked
/// against it (8-bit image inputs).
pub fn load_model(text: &str, key: Option<&PublicKey>) -> Result<NetworkSpec> {
    let doc: ModelDoc = serde_json::from_str(text)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(doc.format_version));
    }
    let input_scale: Scale = doc
        .input_scale
        .parse()
        .map_err(|e| ModelError::Input(format!("input_scale: {e}")))?;
    let layers = doc
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| layer_from_doc(i, l))
        .collect::<Result<Vec<_>>>()?;
    let spec = NetworkSpec::new(doc.name.unwrap_or_default(), doc.input_shape, input_scale, layers)?;
    if let Some(pk) = key {
        spec.check_key(pk)?;
    }
    Ok(spec)
}

pub fn save_model(spec: &NetworkSpec) -> String {
    let doc = ModelDoc {
        format_version: FORMAT_VERSION,
        name: (!spec.name().is_empty()).then(|| spec.name().to_string()),
        input_shape: spec.input_shape().to_vec(),
        input_scale: spec.input_scale().to_string(),
        layers: spec.layers().iter().map(layer_to_doc).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("serializable")
}
