#![allow(dead_code)]

use num_bigint::BigInt;
use paillier_cnn::fixed_point::Scale;
use paillier_cnn::model::{Layer, NetworkSpec};
use paillier_cnn::paillier::PrivateKey;
use paillier_cnn::protocol::server::{Session, Step};
use paillier_cnn::protocol::{sign_oracle, ModelRegistry, ProtocolError};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const MODEL_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!("{MODEL_DIR}/{name}")).unwrap()
}

fn rand_scale(rng: &mut impl Rng) -> Scale {
    match rng.gen_range(0..3) {
        0 => Scale::power_of_two(rng.gen_range(4..14)),
        1 => Scale::from_u64(rng.gen_range(2..5000)).unwrap(),
        _ => Scale::from_u64(10u64.pow(rng.gen_range(1..4))).unwrap(),
    }
}

fn rand_weights(rng: &mut impl Rng, len: usize, scale: &Scale) -> Vec<i64> {
    let max: i64 = scale.factor().try_into().unwrap_or(i64::MAX / 4);
    (0..len)
        .map(|_| if rng.gen_bool(0.1) { 0 } else { rng.gen_range(-max..=max) })
        .collect()
}

fn rand_bias(rng: &mut impl Rng, len: usize) -> (Vec<i64>, Option<Scale>) {
    if rng.gen_bool(0.3) {
        (vec![0; len], None)
    } else {
        ((0..len).map(|_| rng.gen_range(-5000..=5000)).collect(), Some(Scale::one()))
    }
}

/// A random small network on `1×8×8` inputs: one or two convolutions, one
/// average pool, one or two dense layers, signed quantized weights.
pub fn random_tiny_network(rng: &mut impl Rng) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut channels = 1;
    let mut side = 8usize;
    let convs = rng.gen_range(1..=2);
    for _ in 0..convs {
        let out = rng.gen_range(1..=3);
        let k = rng.gen_range(2..=3);
        let padding = rng.gen_range(0..=1);
        let ws = rand_scale(rng);
        let (bias, bias_scale) = rand_bias(rng, out);
        layers.push(Layer::Conv {
            out_channels: out,
            in_channels: channels,
            kernel: (k, k),
            stride: 1,
            padding,
            weights: rand_weights(rng, out * channels * k * k, &ws),
            bias,
            weight_scale: ws,
            bias_scale,
        });
        layers.push(Layer::Relu);
        channels = out;
        side = side + 2 * padding - k + 1;
    }
    let window = rng.gen_range(2..=3).min(side);
    let stride = rng.gen_range(1..=window);
    layers.push(Layer::AvgPool { window: (window, window), stride });
    side = (side - window) / stride + 1;
    layers.push(Layer::Flatten);
    let mut features = channels * side * side;
    let dense = rng.gen_range(1..=2);
    for d in 0..dense {
        let out = if d + 1 == dense { 10 } else { rng.gen_range(3..=12) };
        let ws = rand_scale(rng);
        let (bias, bias_scale) = rand_bias(rng, out);
        layers.push(Layer::Dense {
            out_features: out,
            in_features: features,
            weights: rand_weights(rng, out * features, &ws),
            bias,
            weight_scale: ws,
            bias_scale,
        });
        if d + 1 != dense {
            layers.push(Layer::Relu);
        }
        features = out;
    }
    let input_scale = Scale::from_u64(rng.gen_range(1..=255)).unwrap();
    NetworkSpec::new("tiny", vec![1, 8, 8], input_scale, layers).unwrap()
}

pub fn random_image(rng: &mut impl Rng, len: usize) -> Vec<u8> {
    (0..len).map(|_| rng.gen()).collect()
}

/// Runs the server-side session in process, answering every sign query
/// with the key holder's oracle. Returns the signed logits and the batch
/// size of every round.
pub fn run_encrypted(
    spec: &NetworkSpec,
    sk: &PrivateKey,
    pixels: &[u8],
    rng: &mut impl RngCore,
) -> Result<(Vec<BigInt>, Vec<usize>), ProtocolError> {
    let mut registry = ModelRegistry::new();
    registry.insert("m", spec.clone());
    let pk = sk.public();
    let x = paillier_cnn::enc_tensor::EncTensor::encrypt_pixels(
        pk,
        pixels,
        spec.input_shape().to_vec(),
        spec.input_scale().clone(),
        rng,
    )?;
    let mut session = Session::open(
        &registry,
        "m",
        pk.n().clone(),
        pk.g().clone(),
        ChaCha20Rng::seed_from_u64(rng.next_u64()),
    )?;
    let shape: Vec<u32> = spec.input_shape().iter().map(|&d| d as u32).collect();
    let cells = x.into_cells().into_iter().map(|c| c.into_value()).collect();
    let mut step = session.begin(&shape, cells)?;
    let mut rounds = Vec::new();
    loop {
        match step {
            Step::SignRequest(cells) => {
                rounds.push(cells.len());
                let bits = sign_oracle(sk, &cells)?;
                step = session.resume(&bits)?;
            }
            Step::Result { cells, .. } => {
                let logits = cells
                    .into_iter()
                    .map(|c| sk.decrypt_signed(&paillier_cnn::paillier::Ciphertext::from_raw(c)))
                    .collect::<Result<Vec<_>, _>>()?;
                return Ok((logits, rounds));
            }
        }
    }
}
