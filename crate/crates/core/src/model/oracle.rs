//! Plaintext forward passes.
//!
//! [`infer_plain_fixed`] performs, on plain integers, exactly the arithmetic
//! the encrypted pipeline performs on ciphertexts (pooling as a window sum,
//! ReLU from true signs). [`infer_plain_float`] is the ordinary real-valued
//! forward pass over the dequantized weights.

use num_bigint::{BigInt, BigUint};
use num_traits::{Signed, Zero};

use super::{Layer, ModelError, NetworkSpec, Result, Stage, StageOp};
use crate::enc_tensor::{ConvSpec, DenseSpec, PoolSpec};
use crate::fixed_point::{ratio_to_f64, FixedPointError, Scale, ScaleState};
use crate::paillier::PublicKey;

/// Raw logits and the scale that maps them back to reals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedOutput {
    pub logits: Vec<BigInt>,
    pub scale: ScaleState,
}

impl FixedOutput {
    pub fn decoded(&self) -> Vec<f64> {
        self.logits.iter().map(|v| self.scale.decode(v)).collect()
    }
}

pub fn pixels_to_raw(pixels: &[u8]) -> Vec<BigInt> {
    pixels.iter().map(|&p| BigInt::from(p)).collect()
}

/// Real-valued network input for an 8-bit image: `pixel / input_scale`.
pub fn pixels_to_real(spec: &NetworkSpec, pixels: &[u8]) -> Vec<f64> {
    let scale = spec.input_scale().factor();
    pixels.iter().map(|&p| ratio_to_f64(&BigInt::from(p), scale)).collect()
}

fn check_input(spec: &NetworkSpec, len: usize) -> Result<()> {
    if len != spec.input_len() {
        return Err(ModelError::Input(format!(
            "expected {} values for shape {:?}, got {len}",
            spec.input_len(),
            spec.input_shape()
        )));
    }
    Ok(())
}

/// Integer-exact forward pass with true-sign ReLU.
pub fn infer_plain_fixed(spec: &NetworkSpec, input: &[BigInt]) -> Result<FixedOutput> {
    infer_plain_fixed_with(spec, input, None, &mut |_, values| {
        values.iter().map(|v| !v.is_negative()).collect()
    })
}

/// Integer-exact forward pass with a caller-supplied ReLU mask.
///
/// `relu_mask(round, values)` gets the pre-activations of the `round`-th
/// ReLU and returns which cells to keep. With a key, every intermediate
/// value is checked against the key's signed range.
pub fn infer_plain_fixed_with(
    spec: &NetworkSpec,
    input: &[BigInt],
    key: Option<&PublicKey>,
    relu_mask: &mut dyn FnMut(usize, &[BigInt]) -> Vec<bool>,
) -> Result<FixedOutput> {
    check_input(spec, input.len())?;
    let mut values = input.to_vec();
    let mut round = 0;
    let range_check = |layer: usize, values: &[BigInt]| -> Result<()> {
        if let Some(pk) = key {
            if let Some(v) = values.iter().find(|v| !pk.admits_magnitude(v.magnitude())) {
                return Err(ModelError::Bound {
                    layer,
                    source: FixedPointError::Overflow { bound_bits: v.bits(), key_bits: pk.bits() },
                });
            }
        }
        Ok(())
    };
    range_check(0, &values)?;

    for (idx, stage) in spec.stages().iter().enumerate() {
        values = match &stage.op {
            StageOp::Conv(c) => conv_fixed(&values, &stage.input_shape, c),
            StageOp::AvgPool(p) => pool_fixed(&values, &stage.input_shape, p),
            StageOp::Dense(d) => dense_fixed(&values, d),
            StageOp::Flatten => values,
            StageOp::Relu => {
                let mask = relu_mask(round, &values);
                round += 1;
                if mask.len() != values.len() {
                    return Err(ModelError::Input(format!(
                        "ReLU mask has {} bits for {} cells",
                        mask.len(),
                        values.len()
                    )));
                }
                values
                    .into_iter()
                    .zip(mask)
                    .map(|(v, keep)| if keep { v } else { BigInt::zero() })
                    .collect()
            }
        };
        range_check(idx, &values)?;
    }
    Ok(FixedOutput { logits: values, scale: spec.final_scale().clone() })
}

fn conv_fixed(x: &[BigInt], shape: &[usize], spec: &ConvSpec) -> Vec<BigInt> {
    let out = spec.output_shape(shape).expect("validated shape");
    let (h, w) = (shape[1] as isize, shape[2] as isize);
    let pad = spec.padding as isize;
    let mut result = Vec::with_capacity(out.iter().product());
    for o in 0..out[0] {
        for i in 0..out[1] {
            for j in 0..out[2] {
                let mut acc = spec.bias[o].clone();
                for c in 0..spec.in_channels {
                    for m in 0..spec.kernel_rows {
                        for n in 0..spec.kernel_cols {
                            let r = (i * spec.stride + m) as isize - pad;
                            let q = (j * spec.stride + n) as isize - pad;
                            if r < 0 || q < 0 || r >= h || q >= w {
                                continue;
                            }
                            let v = &x[(c * h as usize + r as usize) * w as usize + q as usize];
                            acc += v * spec.weight(o, c, m, n);
                        }
                    }
                }
                result.push(acc);
            }
        }
    }
    result
}

fn pool_fixed(x: &[BigInt], shape: &[usize], spec: &PoolSpec) -> Vec<BigInt> {
    let out = spec.output_shape(shape).expect("validated shape");
    let (h, w) = (shape[1], shape[2]);
    let mut result = Vec::with_capacity(out.iter().product());
    for c in 0..out[0] {
        for i in 0..out[1] {
            for j in 0..out[2] {
                let mut acc = BigInt::zero();
                for m in 0..spec.window.0 {
                    for n in 0..spec.window.1 {
                        acc += &x[(c * h + i * spec.stride + m) * w + j * spec.stride + n];
                    }
                }
                result.push(acc);
            }
        }
    }
    result
}

fn dense_fixed(x: &[BigInt], spec: &DenseSpec) -> Vec<BigInt> {
    (0..spec.out_features)
        .map(|j| {
            let mut acc = spec.bias[j].clone();
            for (v, &w) in x.iter().zip(spec.row(j)) {
                acc += v * w;
            }
            acc
        })
        .collect()
}

/// Real-valued forward pass over dequantized weights.
pub fn infer_plain_float(spec: &NetworkSpec, image: &[f64]) -> Result<Vec<f64>> {
    check_input(spec, image.len())?;
    let mut values = image.to_vec();
    for (layer, stage) in spec.layers().iter().zip(spec.stages()) {
        let shape = &stage.input_shape;
        values = match (layer, &stage.op) {
            (Layer::Conv { weights, bias, weight_scale, bias_scale, .. }, StageOp::Conv(c)) => {
                let w = dequant(weights, weight_scale.factor());
                let b = float_bias(bias, bias_scale.as_ref(), stage);
                conv_float(&values, shape, c, &w, &b)
            }
            (Layer::Dense { weights, bias, weight_scale, bias_scale, .. }, StageOp::Dense(d)) => {
                let w = dequant(weights, weight_scale.factor());
                let b = float_bias(bias, bias_scale.as_ref(), stage);
                (0..d.out_features)
                    .map(|j| {
                        b[j] + w[j * d.in_features..(j + 1) * d.in_features]
                            .iter()
                            .zip(&values)
                            .map(|(w, x)| w * x)
                            .sum::<f64>()
                    })
                    .collect()
            }
            (_, StageOp::AvgPool(p)) => {
                let sums = pool_float(&values, shape, p);
                let area = p.area() as f64;
                sums.into_iter().map(|s| s / area).collect()
            }
            (_, StageOp::Relu) => values.into_iter().map(|v| v.max(0.0)).collect(),
            (_, StageOp::Flatten) => values,
            _ => unreachable!("stage resolved from its layer"),
        };
    }
    Ok(values)
}

fn dequant(values: &[i64], scale: &BigUint) -> Vec<f64> {
    values.iter().map(|&v| ratio_to_f64(&BigInt::from(v), scale)).collect()
}

/// Bias reals: `bias / bias_scale`, or over the layer's product scale when
/// no bias scale is given.
fn float_bias(bias: &[i64], bias_scale: Option<&Scale>, stage: &Stage) -> Vec<f64> {
    match bias_scale {
        Some(s) => dequant(bias, s.factor()),
        None => dequant(bias, stage.scale_out.total().factor()),
    }
}

fn conv_float(x: &[f64], shape: &[usize], spec: &ConvSpec, w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = spec.output_shape(shape).expect("validated shape");
    let (h, wd) = (shape[1] as isize, shape[2] as isize);
    let pad = spec.padding as isize;
    let per_out = spec.in_channels * spec.kernel_rows * spec.kernel_cols;
    let mut result = Vec::with_capacity(out.iter().product());
    for (o, &bias) in b.iter().enumerate().take(out[0]) {
        for i in 0..out[1] {
            for j in 0..out[2] {
                let mut acc = bias;
                for c in 0..spec.in_channels {
                    for m in 0..spec.kernel_rows {
                        for n in 0..spec.kernel_cols {
                            let r = (i * spec.stride + m) as isize - pad;
                            let q = (j * spec.stride + n) as isize - pad;
                            if r < 0 || q < 0 || r >= h || q >= wd {
                                continue;
                            }
                            let k = o * per_out + (c * spec.kernel_rows + m) * spec.kernel_cols + n;
                            acc += w[k] * x[(c * h as usize + r as usize) * wd as usize + q as usize];
                        }
                    }
                }
                result.push(acc);
            }
        }
    }
    result
}

fn pool_float(x: &[f64], shape: &[usize], spec: &PoolSpec) -> Vec<f64> {
    let out = spec.output_shape(shape).expect("validated shape");
    let (h, w) = (shape[1], shape[2]);
    let mut result = Vec::with_capacity(out.iter().product());
    for c in 0..out[0] {
        for i in 0..out[1] {
            for j in 0..out[2] {
                let mut acc = 0.0;
                for m in 0..spec.window.0 {
                    for n in 0..spec.window.1 {
                        acc += x[(c * h + i * spec.stride + m) * w + j * spec.stride + n];
                    }
                }
                result.push(acc);
            }
        }
    }
    result
}
