//! Browser bindings for three small demonstrations:
//!
//! - `encrypt_preview`: encrypt a drawn image pixel by pixel and show the
//!   low byte of every ciphertext.
//! - `bound_report`: how large a modulus the bundled toy model needs, layer
//!   by layer, and whether a given key size clears it.
//! - `toy_infer`: a full encrypted run of the toy model, client and server
//!   in one process, checked against the plaintext result.
//!
//! Every entry point is a plain Rust function returning JSON text; the
//! `wasm_bindgen` wrappers only convert errors.

use num_bigint::{BigInt, BigUint};
use paillier_cnn::enc_tensor::EncTensor;
use paillier_cnn::model::{argmax, infer_plain_fixed, load_model, pixels_to_raw, NetworkSpec, PIXEL_MAX, TOY_MODEL};
use paillier_cnn::paillier::{keygen, Ciphertext, PrivateKey, MIN_KEY_BITS};
use paillier_cnn::protocol::server::{Session, Step};
use paillier_cnn::protocol::{sign_oracle, ModelRegistry};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Largest key the page will generate; bigger keys stall a browser tab.
pub const MAX_DEMO_KEY_BITS: u32 = 1024;

fn toy() -> NetworkSpec {
    load_model(TOY_MODEL, None).expect("bundled toy model is valid")
}

fn demo_key(bits: u32, seed: u64) -> Result<(PrivateKey, ChaCha20Rng), String> {
    if bits > MAX_DEMO_KEY_BITS {
        return Err(format!("key size {bits} exceeds the demo limit of {MAX_DEMO_KEY_BITS} bits"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sk = keygen(u64::from(bits), &mut rng).map_err(|e| e.to_string())?;
    Ok((sk, rng))
}

/// Low byte of each pixel's ciphertext under a key derived from `seed`.
pub fn encrypt_preview_bytes(pixels: &[u8], key_bits: u32, seed: u64) -> Result<Vec<u8>, String> {
    let (sk, mut rng) = demo_key(key_bits, seed)?;
    let pk = sk.public();
    pixels
        .iter()
        .map(|&p| {
            let c = pk.encrypt(&BigUint::from(p), &mut rng).map_err(|e| e.to_string())?;
            Ok(c.value().to_bytes_le()[0])
        })
        .collect()
}

/// Per-layer magnitude bounds of the toy model for 8-bit input.
pub fn bound_report_json(key_bits: u32) -> String {
    let spec = toy();
    let bounds = spec.magnitude_bounds(&BigUint::from(PIXEL_MAX));
    // 2B + 1 < N holds for every N of k bits once 2B + 1 has at most k - 1 bits
    let need = |b: &BigUint| (b * 2u32 + 1u32).bits() + 1;
    let min_bits = bounds.iter().map(need).max().unwrap_or(0).max(MIN_KEY_BITS);
    let layers: Vec<_> = spec
        .layers()
        .iter()
        .zip(&bounds)
        .map(|(layer, b)| json!({ "kind": layer.kind(), "bound_bits": b.bits(), "key_bits_needed": need(b) }))
        .collect();
    json!({
        "model": spec.name(),
        "key_bits": key_bits,
        "min_key_bits": min_bits,
        "fits": u64::from(key_bits) >= min_bits,
        "logit_scale": spec.final_scale().total().factor().to_string(),
        "layers": layers,
    })
    .to_string()
}

/// Encrypted toy-model inference on an 8×8 image.
pub fn toy_infer_json(pixels: &[u8], key_bits: u32, seed: u64) -> Result<String, String> {
    let spec = toy();
    if pixels.len() != spec.input_len() {
        return Err(format!("toy model takes {} pixels, got {}", spec.input_len(), pixels.len()));
    }
    let (sk, mut rng) = demo_key(key_bits, seed)?;
    let pk = sk.public();
    let mut registry = ModelRegistry::new();
    registry.insert("toy", spec.clone());
    let mut session = Session::open(
        &registry,
        "toy",
        pk.n().clone(),
        pk.g().clone(),
        ChaCha20Rng::seed_from_u64(rng.next_u64()),
    )
    .map_err(|e| e.to_string())?;

    let x = EncTensor::encrypt_pixels(pk, pixels, spec.input_shape().to_vec(), spec.input_scale().clone(), &mut rng)
        .map_err(|e| e.to_string())?;
    let shape: Vec<u32> = spec.input_shape().iter().map(|&d| d as u32).collect();
    let cells = x.into_cells().into_iter().map(Ciphertext::into_value).collect();
    let mut step = session.begin(&shape, cells).map_err(|e| e.to_string())?;
    let mut rounds = Vec::new();
    let logits: Vec<BigInt> = loop {
        match step {
            Step::SignRequest(cells) => {
                rounds.push(cells.len());
                let bits = sign_oracle(&sk, &cells).map_err(|e| e.to_string())?;
                step = session.resume(&bits).map_err(|e| e.to_string())?;
            }
            Step::Result { cells, .. } => {
                break cells
                    .into_iter()
                    .map(|c| sk.decrypt_signed(&Ciphertext::from_raw(c)))
                    .collect::<Result<_, _>>()
                    .map_err(|e| e.to_string())?;
            }
        }
    };

    let plain = infer_plain_fixed(&spec, &pixels_to_raw(pixels)).map_err(|e| e.to_string())?;
    let scale = spec.final_scale();
    let class = argmax(&logits).map_err(|e| e.to_string())?;
    Ok(json!({
        "class": class,
        "logits": logits.iter().map(|v| scale.decode(v)).collect::<Vec<f64>>(),
        "rounds": rounds,
        "matches_plaintext": plain.logits == logits,
        "key_bits": pk.bits(),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn encrypt_preview(pixels: &[u8], key_bits: u32, seed: u64) -> Result<Vec<u8>, JsValue> {
    encrypt_preview_bytes(pixels, key_bits, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn bound_report(key_bits: u32) -> String {
    bound_report_json(key_bits)
}

#[wasm_bindgen]
pub fn toy_infer(pixels: &[u8], key_bits: u32, seed: u64) -> Result<String, JsValue> {
    toy_infer_json(pixels, key_bits, seed).map_err(|e| JsValue::from_str(&e))
}
