//! Convolutional-network inference over Paillier-encrypted inputs.
//!
//! The server evaluates linear layers (dense, convolution, average pooling)
//! directly on ciphertexts using the additive homomorphism, and asks the
//! key-holding client for the signs of the pre-activations at every ReLU.
//!
//! - [`paillier`]: keys, encryption, homomorphic operators, signed encoding
//!   and Montgomery exponentiation.
//! - [`fixed_point`]: amplifying factors and their propagation.
//! - [`enc_tensor`]: encrypted tensors and layer primitives.
//! - [`model`]: network description, model files and plaintext oracles.
//! - [`protocol`]: the framed client/server exchange.

pub mod enc_tensor;
pub mod fixed_point;
pub mod model;
pub mod paillier;
pub mod protocol;
