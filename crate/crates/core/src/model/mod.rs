//! Network description, model files and the plaintext reference engines.
//!
//! A [`NetworkSpec`] is built from a list of [`Layer`]s. Construction walks
//! the layers once to chain shapes, track the [`ScaleState`] after every
//! stage, and rescale each bias to the product scale of its layer. Bias
//! rescaling must be exact: the ratio between the product scale and the
//! declared bias scale has to be an integer.

mod file;
mod oracle;

use std::fmt;

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_traits::Zero;
use thiserror::Error;

use crate::enc_tensor::{ConvSpec, DenseSpec, PoolSpec};
use crate::fixed_point::{self, FixedPointError, Scale, ScaleState};
use crate::paillier::PublicKey;

pub use file::{load_model, save_model, FORMAT_VERSION};
pub use oracle::{
    infer_plain_fixed, infer_plain_fixed_with, infer_plain_float, pixels_to_raw, pixels_to_real,
    FixedOutput,
};

/// Largest raw input value: images are 8-bit and each byte is encrypted as is.
pub const PIXEL_MAX: u32 = 255;

/// The shipped toy network: `1×8×8` input, conv(2×3×3) → ReLU → 2×2
/// average pool → flatten → dense(10).
pub const TOY_MODEL: &str = include_str!("../../fixtures/toy_model.json");

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed model document: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("layer {layer}: {detail}")]
    Format { layer: usize, detail: String },
    #[error("layer {layer}: shape mismatch: {detail}")]
    Shape { layer: usize, detail: String },
    #[error("layer {layer}: bias scale does not divide the product scale {product}")]
    ScaleRatio { layer: usize, product: String },
    #[error("layer {layer}: value bound exceeds the key's signed range: {source}")]
    Bound { layer: usize, source: FixedPointError },
    #[error("network input: {0}")]
    Input(String),
    #[error("the network must end with a dense layer")]
    NoLogits,
    #[error("argmax of an empty vector")]
    EmptyLogits,
    #[error("quantized value {0} does not fit in 64 bits")]
    QuantizeOverflow(f64),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// One layer as described in a model file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        /// `[out][in][row][col]`
        weights: Vec<i64>,
        bias: Vec<i64>,
        weight_scale: Scale,
        /// `None` means the bias is already at the layer's product scale.
        bias_scale: Option<Scale>,
    },
    AvgPool {
        window: (usize, usize),
        stride: usize,
    },
    Relu,
    Flatten,
    Dense {
        out_features: usize,
        in_features: usize,
        /// `[out][in]`
        weights: Vec<i64>,
        bias: Vec<i64>,
        weight_scale: Scale,
        bias_scale: Option<Scale>,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::AvgPool { .. } => "avg_pool",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
        }
    }
}

/// A layer resolved into the operation the engines execute.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageOp {
    Conv(ConvSpec),
    AvgPool(PoolSpec),
    Relu,
    Flatten,
    Dense(DenseSpec),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub op: StageOp,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub scale_out: ScaleState,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    name: String,
    input_shape: Vec<usize>,
    input_scale: Scale,
    layers: Vec<Layer>,
    stages: Vec<Stage>,
}

impl NetworkSpec {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        input_scale: Scale,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(ModelError::Input(format!("invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        let mut state = ScaleState::new(input_scale.clone());
        let mut stages = Vec::with_capacity(layers.len());

        for (idx, layer) in layers.iter().enumerate() {
            let shape_err = |detail: String| ModelError::Shape { layer: idx, detail };
            let (op, out_shape, next_state) = match layer {
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
                } => {
                    let product = &state.total() * weight_scale;
                    let spec = ConvSpec {
                        out_channels: *out_channels,
                        in_channels: *in_channels,
                        kernel_rows: kernel.0,
                        kernel_cols: kernel.1,
                        kernel: weights.clone(),
                        bias: rescale_bias(idx, bias, &product, bias_scale.as_ref())?,
                        stride: *stride,
                        padding: *padding,
                        weight_scale: weight_scale.clone(),
                    };
                    spec.check().map_err(|e| shape_err(e.to_string()))?;
                    let out = spec.output_shape(&shape).map_err(|e| shape_err(e.to_string()))?;
                    (StageOp::Conv(spec), out, state.compose(weight_scale))
                }
                Layer::AvgPool { window, stride } => {
                    let spec = PoolSpec { window: *window, stride: *stride };
                    let out = spec.output_shape(&shape).map_err(|e| shape_err(e.to_string()))?;
                    let area = Scale::from_u64(spec.area() as u64)?;
                    (StageOp::AvgPool(spec), out, state.compose(&area))
                }
                Layer::Relu => (StageOp::Relu, shape.clone(), state.clone()),
                Layer::Flatten => {
                    (StageOp::Flatten, vec![shape.iter().product()], state.clone())
                }
                Layer::Dense {
                    out_features,
                    in_features,
                    weights,
                    bias,
                    weight_scale,
                    bias_scale,
                } => {
                    if shape.len() != 1 || shape[0] != *in_features {
                        return Err(shape_err(format!(
                            "dense layer expects [{in_features}], previous output is {shape:?}"
                        )));
                    }
                    let product = &state.total() * weight_scale;
                    let spec = DenseSpec {
                        out_features: *out_features,
                        in_features: *in_features,
                        weights: weights.clone(),
                        bias: rescale_bias(idx, bias, &product, bias_scale.as_ref())?,
                        weight_scale: weight_scale.clone(),
                    };
                    spec.check().map_err(|e| shape_err(e.to_string()))?;
                    (StageOp::Dense(spec), vec![*out_features], state.compose(weight_scale))
                }
            };
            stages.push(Stage {
                op,
                input_shape: shape,
                output_shape: out_shape.clone(),
                scale_out: next_state.clone(),
            });
            shape = out_shape;
            state = next_state;
        }

        if !matches!(layers.last(), Some(Layer::Dense { .. })) {
            return Err(ModelError::NoLogits);
        }
        Ok(Self { name: name.into(), input_shape, input_scale, layers, stages })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn input_scale(&self) -> &Scale {
        &self.input_scale
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn output_len(&self) -> usize {
        self.stages.last().map(|s| s.output_shape[0]).unwrap_or(0)
    }

    pub fn relu_count(&self) -> usize {
        self.stages.iter().filter(|s| s.op == StageOp::Relu).count()
    }

    /// Scale state of the logits.
    pub fn final_scale(&self) -> &ScaleState {
        &self.stages.last().expect("validated network has layers").scale_out
    }

    /// Interval bound on `|raw|` after every stage, given `|input| <= input_bound`.
    pub fn magnitude_bounds(&self, input_bound: &BigUint) -> Vec<BigUint> {
        let mut bound = input_bound.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            bound = match &stage.op {
                StageOp::Conv(spec) => (0..spec.out_channels)
                    .map(|o| {
                        let per_out = spec.in_channels * spec.kernel_rows * spec.kernel_cols;
                        let l1: u128 = spec.kernel[o * per_out..(o + 1) * per_out]
                            .iter()
                            .map(|w| w.unsigned_abs() as u128)
                            .sum();
                        BigUint::from(l1) * &bound + spec.bias[o].magnitude()
                    })
                    .max()
                    .unwrap_or_default(),
                StageOp::Dense(spec) => (0..spec.out_features)
                    .map(|j| {
                        let l1: u128 = spec.row(j).iter().map(|w| w.unsigned_abs() as u128).sum();
                        BigUint::from(l1) * &bound + spec.bias[j].magnitude()
                    })
                    .max()
                    .unwrap_or_default(),
                StageOp::AvgPool(spec) => bound * spec.area(),
                StageOp::Relu | StageOp::Flatten => bound,
            };
            out.push(bound.clone());
        }
        out
    }

    /// Checks that every value the pipeline can produce survives the signed
    /// encoding under `pk`.
    pub fn check_key_with_bound(&self, pk: &PublicKey, input_bound: &BigUint) -> Result<()> {
        fixed_point::check_bound(input_bound, pk)
            .map_err(|source| ModelError::Bound { layer: 0, source })?;
        for (layer, bound) in self.magnitude_bounds(input_bound).iter().enumerate() {
            fixed_point::check_bound(bound, pk).map_err(|source| ModelError::Bound { layer, source })?;
        }
        Ok(())
    }

    /// [`check_key_with_bound`](Self::check_key_with_bound) for 8-bit images.
    pub fn check_key(&self, pk: &PublicKey) -> Result<()> {
        self.check_key_with_bound(pk, &BigUint::from(PIXEL_MAX))
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model {:?}: input {:?} at scale {}", self.name, self.input_shape, self.input_scale)?;
        for (i, (layer, stage)) in self.layers.iter().zip(&self.stages).enumerate() {
            writeln!(
                f,
                "  [{i}] {:<8} -> {:?}  scale {}",
                layer.kind(),
                stage.output_shape,
                stage.scale_out.total()
            )?;
        }
        Ok(())
    }
}

fn rescale_bias(
    layer: usize,
    bias: &[i64],
    product: &Scale,
    bias_scale: Option<&Scale>,
) -> Result<Vec<BigInt>> {
    let ratio = match bias_scale {
        None => BigUint::from(1u32),
        Some(bs) => {
            let (q, r) = product.factor().div_rem(bs.factor());
            if !r.is_zero() {
                return Err(ModelError::ScaleRatio { layer, product: product.to_string() });
            }
            q
        }
    };
    let ratio = BigInt::from(ratio);
    Ok(bias.iter().map(|&b| BigInt::from(b) * &ratio).collect())
}

/// Integer weights and the amplifying factor they were quantized with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedWeights {
    pub values: Vec<i64>,
    pub scale: Scale,
}

impl QuantizedWeights {
    pub fn dequantize(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&v| fixed_point::ratio_to_f64(&BigInt::from(v), self.scale.factor()))
            .collect()
    }
}

/// Elementwise `round_half_away_from_zero(w · scale)`.
pub fn quantize(weights: &[f64], scale: &Scale) -> Result<QuantizedWeights> {
    let values = weights
        .iter()
        .map(|&w| {
            let raw = fixed_point::round_scaled(w, scale.factor())?;
            i64::try_from(raw).map_err(|_| ModelError::QuantizeOverflow(w))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedWeights { values, scale: scale.clone() })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(values: &[T]) -> Result<usize> {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    if values.is_empty() {
        return Err(ModelError::EmptyLogits);
    }
    Ok(best)
}
