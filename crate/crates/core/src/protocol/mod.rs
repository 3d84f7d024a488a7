//! The two-party exchange.
//!
//! The client encrypts an image and sends it with its public key. The server
//! runs the network layer by layer; at every ReLU it sends the pre-activation
//! ciphertexts of that layer in one SIGN_REQUEST, the client decrypts them and
//! answers with one sign bit per cell, and the server keeps or zeroes each
//! cell. After the last layer the server returns the encrypted logits and
//! their scale.
//!
//! ```text
//! client                               server
//!   HELLO(model id, N, g)         ->
//!   INFER_REQUEST(dims, cells)    ->
//!                                 <-   SIGN_REQUEST(cells)     } once per
//!   SIGN_RESPONSE(bits)           ->                           } ReLU layer
//!                                 <-   RESULT(logits, scale)
//! ```
//!
//! Any failure on the server side is reported with an ERROR frame before the
//! connection is dropped. The client learns every ReLU input in the clear and
//! the server learns every sign bit; this module does not try to hide either.

pub mod client;
pub mod frame;
pub mod pipe;
pub mod server;

use thiserror::Error;

use crate::enc_tensor::EncTensorError;
use crate::model::ModelError;
use crate::paillier::PaillierError;

pub use client::{client_start, sign_oracle, ClientOutcome, Direction, Timings};
pub use frame::{ErrorCode, FrameError, Message, DEFAULT_MAX_FRAME};
pub use server::{server_handle_session, ModelRegistry, RegistryError, Server, SessionSummary};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("framing: {0}")]
    Frame(#[from] FrameError),
    #[error("server error {code}: {detail}")]
    Remote { code: ErrorCode, detail: String },
    #[error("session rejected with {code}: {detail}")]
    Rejected { code: ErrorCode, detail: String },
    #[error("expected {expected}, received {got}")]
    Unexpected { expected: &'static str, got: &'static str },
    #[error("input: {0}")]
    Input(String),
    #[error("result scale {server} differs from the model's {expected}")]
    ScaleMismatch { server: String, expected: String },
    #[error("result has {got} logits, the model has {expected}")]
    ResultLength { expected: usize, got: usize },
    #[error("logit {index} decrypts outside the model's value bound")]
    ResultOutOfRange { index: usize },
    #[error(transparent)]
    Crypto(#[from] PaillierError),
    #[error(transparent)]
    Tensor(#[from] EncTensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ProtocolError {
    /// The wire error code a server reports for this failure.
    pub fn code(&self) -> ErrorCode {
        match self {
            ProtocolError::Remote { code, .. } | ProtocolError::Rejected { code, .. } => *code,
            ProtocolError::Frame(_) | ProtocolError::Unexpected { .. } => ErrorCode::Protocol,
            ProtocolError::Input(_) | ProtocolError::Crypto(_) => ErrorCode::BadRequest,
            ProtocolError::Model(ModelError::Bound { .. }) => ErrorCode::OverflowConfig,
            _ => ErrorCode::Internal,
        }
    }
}
