//! Client side: encrypts, answers sign queries, decrypts the logits.

use std::io::{Read, Write};
use std::time::{Duration, Instant};

use num_bigint::{BigInt, BigUint};
use num_traits::Signed;
use rand::RngCore;

use super::frame::{read_message, write_message, Message};
use super::ProtocolError;
use crate::enc_tensor::{par_map, EncTensor};
use crate::fixed_point::ScaleState;
use crate::model::{argmax, NetworkSpec, PIXEL_MAX};
use crate::paillier::{Ciphertext, PrivateKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timings {
    pub encrypt: Duration,
    /// Wall time spent waiting on the server.
    pub network: Duration,
    /// Decrypting ReLU inputs to answer sign queries.
    pub sign: Duration,
    pub decrypt: Duration,
}

#[derive(Clone, Debug)]
pub struct ClientOutcome {
    pub class: usize,
    pub logits: Vec<BigInt>,
    pub scale: ScaleState,
    /// Cells per SIGN_REQUEST, in order.
    pub rounds: Vec<usize>,
    pub transcript: Option<Vec<(Direction, Message)>>,
    pub timings: Timings,
}

impl ClientOutcome {
    pub fn decoded(&self) -> Vec<f64> {
        self.logits.iter().map(|v| self.scale.decode(v)).collect()
    }
}

/// One bit per cell: set when the signed plaintext is nonnegative.
pub fn sign_oracle(sk: &PrivateKey, cells: &[BigUint]) -> Result<Vec<bool>, ProtocolError> {
    par_map(cells.len(), |i| {
        let c = Ciphertext::from_raw(cells[i].clone());
        sk.decrypt_signed(&c).map(|v| !v.is_negative())
    })
    .into_iter()
    .map(|r| r.map_err(ProtocolError::from))
    .collect()
}

struct Wire<'a, S: ?Sized> {
    conn: &'a mut S,
    max_frame: usize,
    transcript: Option<Vec<(Direction, Message)>>,
    waiting: Duration,
}

impl<S: Read + Write + ?Sized> Wire<'_, S> {
    fn send(&mut self, msg: Message) -> Result<(), ProtocolError> {
        write_message(self.conn, &msg)?;
        if let Some(t) = &mut self.transcript {
            t.push((Direction::Sent, msg));
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, ProtocolError> {
        let start = Instant::now();
        let msg = read_message(self.conn, self.max_frame)?;
        self.waiting += start.elapsed();
        if let Some(t) = &mut self.transcript {
            t.push((Direction::Received, msg.clone()));
        }
        Ok(msg)
    }
}

/// Classifies `pixels` with the server's model `model_id`.
///
/// `model` is the public description of the same network; the client uses
/// it to check the input size before any I/O, and to check the scale and
/// value range of the returned logits.
#[allow(clippy::too_many_arguments)]
pub fn client_start<S, R>(
    conn: &mut S,
    sk: &PrivateKey,
    model: &NetworkSpec,
    model_id: &str,
    pixels: &[u8],
    rng: &mut R,
    record_transcript: bool,
    max_frame: usize,
) -> Result<ClientOutcome, ProtocolError>
where
    S: Read + Write + ?Sized,
    R: RngCore + ?Sized,
{
    if pixels.len() != model.input_len() {
        return Err(ProtocolError::Input(format!(
            "image has {} pixels, model {:?} expects {:?}",
            pixels.len(),
            model_id,
            model.input_shape()
        )));
    }
    let pk = sk.public();
    let mut timings = Timings::default();

    let start = Instant::now();
    let x = EncTensor::encrypt_pixels(
        pk,
        pixels,
        model.input_shape().to_vec(),
        model.input_scale().clone(),
        rng,
    )?;
    timings.encrypt = start.elapsed();

    let mut wire = Wire {
        conn,
        max_frame,
        transcript: record_transcript.then(Vec::new),
        waiting: Duration::ZERO,
    };
    wire.send(Message::Hello { model_id: model_id.to_string(), n: pk.n().clone(), g: pk.g().clone() })?;
    wire.send(Message::InferRequest {
        shape: model.input_shape().iter().map(|&d| d as u32).collect(),
        cells: x.into_cells().into_iter().map(Ciphertext::into_value).collect(),
    })?;

    let mut rounds = Vec::new();
    let (cells, scale) = loop {
        match wire.recv()? {
            Message::SignRequest { cells } => {
                let start = Instant::now();
                let bits = sign_oracle(sk, &cells)?;
                timings.sign += start.elapsed();
                rounds.push(cells.len());
                wire.send(Message::SignResponse { bits })?;
            }
            Message::Result { cells, scale } => break (cells, scale),
            Message::Error { code, detail } => return Err(ProtocolError::Remote { code, detail }),
            other => {
                return Err(ProtocolError::Unexpected { expected: "SIGN_REQUEST or RESULT", got: other.name() })
            }
        }
    };
    timings.network = wire.waiting;

    let expected_scale = model.final_scale();
    if scale != expected_scale.total().to_string() {
        return Err(ProtocolError::ScaleMismatch { server: scale, expected: expected_scale.total().to_string() });
    }
    if cells.len() != model.output_len() {
        return Err(ProtocolError::ResultLength { expected: model.output_len(), got: cells.len() });
    }

    let start = Instant::now();
    let bound = model
        .magnitude_bounds(&BigUint::from(PIXEL_MAX))
        .pop()
        .expect("network has stages");
    let mut logits = Vec::with_capacity(cells.len());
    for (index, cell) in cells.into_iter().enumerate() {
        let v = sk.decrypt_signed(&Ciphertext::from_raw(cell))?;
        if v.magnitude() > &bound {
            return Err(ProtocolError::ResultOutOfRange { index });
        }
        logits.push(v);
    }
    timings.decrypt = start.elapsed();

    Ok(ClientOutcome {
        class: argmax(&logits)?,
        logits,
        scale: expected_scale.clone(),
        rounds,
        transcript: wire.transcript,
        timings,
    })
}
