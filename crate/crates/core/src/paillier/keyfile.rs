//! Text serialization of keys.
//!
//! Keys are JSON objects whose big integers are strings, written as
//! `0x`-prefixed lowercase hex and accepted as either hex or decimal:
//!
//! ```text
//! public:  {"kind": "paillier-public-key",  "n": "0x…", "g": "0x…"}
//! private: {"kind": "paillier-private-key", "p": "0x…", "q": "0x…",
//!           "lambda": "0x…", "mu": "0x…"}
//! ```
//!
//! A private key file is self-contained (`N = p·q`, `g = N + 1`); `lambda`
//! and `mu` are recomputed on load and must match.

use num_bigint::BigUint;
use num_traits::Num;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{PaillierError, PrivateKey, PublicKey};

const PUBLIC_KIND: &str = "paillier-public-key";
const PRIVATE_KIND: &str = "paillier-private-key";

#[derive(Debug, Error)]
pub enum KeyFileError {
    #[error("malformed key document: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("expected a {expected} document, found {found:?}")]
    WrongKind { expected: &'static str, found: String },
    #[error("field `{0}` is not a decimal or 0x-hex integer")]
    BadInteger(&'static str),
    #[error("field `{0}` does not match the key")]
    Mismatch(&'static str),
    #[error(transparent)]
    Key(#[from] PaillierError),
}

#[derive(Serialize, Deserialize)]
struct PublicDoc {
    kind: String,
    n: String,
    g: String,
}

#[derive(Serialize, Deserialize)]
struct PrivateDoc {
    kind: String,
    p: String,
    q: String,
    lambda: String,
    mu: String,
}

fn hex(v: &BigUint) -> String {
    format!("{v:#x}")
}

fn parse(field: &'static str, s: &str) -> Result<BigUint, KeyFileError> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => BigUint::from_str_radix(h, 16),
        None => BigUint::from_str_radix(s, 10),
    };
    parsed.map_err(|_| KeyFileError::BadInteger(field))
}

fn check_kind(found: &str, expected: &'static str) -> Result<(), KeyFileError> {
    if found != expected {
        return Err(KeyFileError::WrongKind { expected, found: found.to_string() });
    }
    Ok(())
}

impl PublicKey {
    pub fn to_document(&self) -> String {
        let doc = PublicDoc { kind: PUBLIC_KIND.into(), n: hex(&self.n), g: hex(&self.g) };
        serde_json::to_string_pretty(&doc).expect("serializable")
    }

    pub fn from_document(text: &str) -> Result<Self, KeyFileError> {
        let doc: PublicDoc = serde_json::from_str(text)?;
        check_kind(&doc.kind, PUBLIC_KIND)?;
        Ok(PublicKey::from_parts(parse("n", &doc.n)?, parse("g", &doc.g)?)?)
    }
}

impl PrivateKey {
    pub fn to_document(&self) -> String {
        let doc = PrivateDoc {
            kind: PRIVATE_KIND.into(),
            p: hex(&self.p),
            q: hex(&self.q),
            lambda: hex(&self.lambda),
            mu: hex(&self.mu),
        };
        serde_json::to_string_pretty(&doc).expect("serializable")
    }

    pub fn from_document(text: &str) -> Result<Self, KeyFileError> {
        let doc: PrivateDoc = serde_json::from_str(text)?;
        check_kind(&doc.kind, PRIVATE_KIND)?;
        let sk = PrivateKey::from_primes(parse("p", &doc.p)?, parse("q", &doc.q)?)?;
        if parse("lambda", &doc.lambda)? != sk.lambda {
            return Err(KeyFileError::Mismatch("lambda"));
        }
        if parse("mu", &doc.mu)? != sk.mu {
            return Err(KeyFileError::Mismatch("mu"));
        }
        Ok(sk)
    }
}
