//! The `pcnn` command line: keys, model inspection, encryption preview,
//! the inference server and client, and a modular exponentiation benchmark.
//!
//! Timings and results are printed as `key=value` lines.

pub mod idx;
pub mod pgm;

use std::fs;
use std::io::Write;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use num_bigint::{BigUint, RandBigInt};
use paillier_cnn::enc_tensor::EncTensor;
use paillier_cnn::fixed_point::Scale;
use paillier_cnn::model::{load_model, ModelError, NetworkSpec, PIXEL_MAX};
use paillier_cnn::paillier::{keygen, mod_exp, mod_exp_naive, KeyFileError, PaillierError, PrivateKey, PublicKey};
use paillier_cnn::protocol::{client_start, ModelRegistry, ProtocolError, RegistryError, Server, DEFAULT_MAX_FRAME};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CRYPTO: i32 = 4;
pub const EXIT_PROTOCOL: i32 = 5;
pub const EXIT_MODEL: i32 = 6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Network(std::io::Error),
    #[error("{path}: {detail}")]
    Input { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    KeyFile { path: PathBuf, source: KeyFileError },
    #[error(transparent)]
    Crypto(#[from] PaillierError),
    #[error(transparent)]
    Protocol(ProtocolError),
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: ModelError },
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Input { .. } => EXIT_IO,
            CliError::KeyFile { .. } | CliError::Crypto(_) => EXIT_CRYPTO,
            CliError::Network(_) => EXIT_PROTOCOL,
            CliError::Protocol(ProtocolError::Input(_) | ProtocolError::Model(_)) => EXIT_MODEL,
            CliError::Protocol(ProtocolError::Crypto(_)) => EXIT_CRYPTO,
            CliError::Protocol(_) => EXIT_PROTOCOL,
            CliError::Model { .. } | CliError::Registry(_) => EXIT_MODEL,
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        CliError::Protocol(e)
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "pcnn", version, about = "CNN inference over Paillier-encrypted images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a key pair: <out>.pub.json and <out>.priv.json.
    Keygen {
        #[arg(long, default_value_t = paillier_cnn::paillier::DEFAULT_KEY_BITS)]
        bits: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing key files.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Load and validate a model file, optionally against a key.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        /// Public or private key file; checks the model's value range fits it.
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Encrypt an image and write the low byte of every ciphertext as a PGM.
    EncryptPreview {
        #[arg(long)]
        key: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve every model in a directory.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Exit after this many sessions.
        #[arg(long)]
        max_sessions: Option<usize>,
    },
    /// Classify one image with a remote server.
    Infer {
        #[arg(long)]
        server: String,
        /// Private key file.
        #[arg(long)]
        key: PathBuf,
        /// Model id on the server.
        #[arg(long)]
        model_id: String,
        /// Directory holding the public description `<model-id>.json`.
        #[arg(long)]
        models: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time naive and Montgomery exponentiation, and image encryption with
    /// one and several threads.
    BenchModexp {
        #[arg(long, default_value_t = 2048)]
        bits: u64,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    /// Binary PGM or raw bytes in row-major order.
    #[arg(long, conflicts_with = "idx")]
    pub image: Option<PathBuf>,
    /// IDX image file.
    #[arg(long, requires = "index")]
    pub idx: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
}

/// Pixels and, when the source knows them, `(rows, cols)`.
pub type LoadedImage = (Vec<u8>, Option<(usize, usize)>);

impl ImageArgs {
    pub fn load(&self) -> Result<LoadedImage> {
        match (&self.image, &self.idx, self.index) {
            (Some(path), None, _) => {
                let bytes = read(path)?;
                if pgm::is_pgm(&bytes) {
                    let g = pgm::parse(&bytes)
                        .map_err(|e| CliError::Input { path: path.clone(), detail: e.to_string() })?;
                    Ok((g.pixels, Some((g.height, g.width))))
                } else {
                    Ok((bytes, None))
                }
            }
            (None, Some(path), Some(index)) => {
                let bad = |detail: String| CliError::Input { path: path.clone(), detail };
                let images = idx::IdxImages::parse(&read(path)?).map_err(|e| bad(e.to_string()))?;
                let pixels = images.image(index).map_err(|e| bad(e.to_string()))?.to_vec();
                Ok((pixels, Some((images.rows, images.cols))))
            }
            _ => Err(CliError::Usage("give --image PATH or --idx FILE --index N".into())),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn rng_from(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_rng(rand::thread_rng()).expect("thread rng"),
    }
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn key_paths(out: &Path) -> (PathBuf, PathBuf) {
    let base = out.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{base}.pub.json")), PathBuf::from(format!("{base}.priv.json")))
}

/// Reads a public key from a public or a private key file.
pub fn load_public_key(path: &Path) -> Result<PublicKey> {
    let text = read_text(path)?;
    let key_err = |source| CliError::KeyFile { path: path.to_path_buf(), source };
    let kind = serde_json_kind(&text);
    if kind.as_deref() == Some("paillier-private-key") {
        Ok(PrivateKey::from_document(&text).map_err(key_err)?.public().clone())
    } else {
        PublicKey::from_document(&text).map_err(key_err)
    }
}

pub fn load_private_key(path: &Path) -> Result<PrivateKey> {
    let text = read_text(path)?;
    PrivateKey::from_document(&text).map_err(|source| CliError::KeyFile { path: path.to_path_buf(), source })
}

fn serde_json_kind(text: &str) -> Option<String> {
    let doc: serde_json::Value = serde_json::from_str(text).ok()?;
    doc.get("kind")?.as_str().map(str::to_string)
}

pub fn load_model_file(path: &Path, key: Option<&PublicKey>) -> Result<NetworkSpec> {
    let text = read_text(path)?;
    load_model(&text, key).map_err(|source| CliError::Model { path: path.to_path_buf(), source })
}

fn ms(d: Duration) -> String {
    format!("{:.3}", d.as_secs_f64() * 1e3)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Keygen { bits, out: prefix, force, seed } => {
            let (pub_path, priv_path) = key_paths(&prefix);
            if !force {
                if let Some(existing) = [&pub_path, &priv_path].into_iter().find(|p| p.exists()) {
                    return Err(CliError::Io {
                        path: existing.clone(),
                        source: std::io::Error::new(
                            std::io::ErrorKind::AlreadyExists,
                            "exists; pass --force to overwrite",
                        ),
                    });
                }
            }
            let start = Instant::now();
            let sk = keygen(bits, &mut rng_from(seed))?;
            let elapsed = start.elapsed();
            write_file(&pub_path, sk.public().to_document().as_bytes())?;
            write_file(&priv_path, sk.to_document().as_bytes())?;
            let _ = writeln!(out, "public={}", pub_path.display());
            let _ = writeln!(out, "private={}", priv_path.display());
            let _ = writeln!(out, "modulus_bits={}", sk.public().bits());
            let _ = writeln!(out, "keygen_ms={}", ms(elapsed));
        }
        Command::Inspect { model, key } => {
            let spec = load_model_file(&model, None)?;
            let _ = write!(out, "{spec}");
            let bound = spec.magnitude_bounds(&BigUint::from(PIXEL_MAX)).pop().unwrap_or_default();
            let _ = writeln!(out, "relu_rounds={}", spec.relu_count());
            let _ = writeln!(out, "logit_scale={}", spec.final_scale().total());
            let _ = writeln!(out, "logit_bound_bits={}", bound.bits());
            // N must exceed 2·bound + 1
            let _ = writeln!(out, "min_modulus_bits={}", (bound * 2u32 + 2u32).bits());
            if let Some(path) = key {
                let pk = load_public_key(&path)?;
                spec.check_key(&pk).map_err(|source| CliError::Model { path: model.clone(), source })?;
                let _ = writeln!(out, "key_check=ok ({} bits)", pk.bits());
            }
        }
        Command::EncryptPreview { key, image, out: target, seed } => {
            let pk = load_public_key(&key)?;
            let (pixels, dims) = image.load()?;
            let (rows, cols) = dims.unwrap_or((1, pixels.len()));
            let start = Instant::now();
            let enc = EncTensor::encrypt_pixels(&pk, &pixels, vec![1, rows, cols], Scale::one(), &mut rng_from(seed))
                .map_err(|e| CliError::Protocol(e.into()))?;
            let elapsed = start.elapsed();
            let preview: Vec<u8> = enc.cells().iter().map(|c| c.value().to_bytes_le()[0]).collect();
            write_file(&target, &pgm::write(cols, rows, &preview))?;
            let _ = writeln!(out, "preview={}", target.display());
            let _ = writeln!(out, "cells={}", enc.len());
            let _ = writeln!(out, "ciphertext_bits={}", pk.n_squared().bits());
            let _ = writeln!(out, "encrypt_ms={}", ms(elapsed));
        }
        Command::Serve { listen, models, threads, seed, max_sessions } => {
            set_threads(threads)?;
            let registry = ModelRegistry::load_dir(&models)?;
            if registry.is_empty() {
                return Err(CliError::Usage(format!("no *.json models in {}", models.display())));
            }
            let ids: Vec<&str> = registry.ids().collect();
            let _ = writeln!(out, "models={}", ids.join(","));
            let mut seed_bytes = [0u8; 32];
            rng_from(seed).fill_bytes(&mut seed_bytes);
            let server = Server::bind(&listen, registry, seed_bytes).map_err(CliError::Network)?;
            let _ = writeln!(out, "listening={}", server.local_addr().map_err(CliError::Network)?);
            let _ = out.flush();
            drop(out);
            server
                .serve(max_sessions, &|id, peer, result| match result {
                    Ok(s) => println!(
                        "session={id} peer={peer} model={} key_bits={} rounds={:?} status=ok",
                        s.model_id, s.key_bits, s.rounds
                    ),
                    Err(e) => println!("session={id} peer={peer} status=error code={} detail={e}", e.code()),
                })
                .map_err(CliError::Network)?;
            return Ok(());
        }
        Command::Infer { server, key, model_id, models, image, threads, seed } => {
            set_threads(threads)?;
            let sk = load_private_key(&key)?;
            let spec = load_model_file(&models.join(format!("{model_id}.json")), None)?;
            let (pixels, _) = image.load()?;
            if pixels.len() != spec.input_len() {
                return Err(ProtocolError::Input(format!(
                    "image has {} pixels, model {model_id:?} expects {:?}",
                    pixels.len(),
                    spec.input_shape()
                ))
                .into());
            }
            let start = Instant::now();
            let mut conn = TcpStream::connect(&server).map_err(CliError::Network)?;
            let _ = conn.set_nodelay(true);
            let outcome =
                client_start(&mut conn, &sk, &spec, &model_id, &pixels, &mut rng_from(seed), false, DEFAULT_MAX_FRAME)?;
            let total = start.elapsed();
            let decoded: Vec<String> = outcome.decoded().iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "class={}", outcome.class);
            let _ = writeln!(out, "logits={}", decoded.join(","));
            let _ = writeln!(out, "rounds={}", outcome.rounds.len());
            let _ = writeln!(out, "encrypt_ms={}", ms(outcome.timings.encrypt));
            let _ = writeln!(out, "network_ms={}", ms(outcome.timings.network));
            let _ = writeln!(out, "sign_ms={}", ms(outcome.timings.sign));
            let _ = writeln!(out, "decrypt_ms={}", ms(outcome.timings.decrypt));
            let _ = writeln!(out, "total_ms={}", ms(total));
        }
        Command::BenchModexp { bits, iterations, threads, seed } => {
            if iterations == 0 {
                return Ok(());
            }
            let mut rng = rng_from(seed);
            let mut modulus = rng.gen_biguint(bits);
            modulus.set_bit(bits.saturating_sub(1), true);
            modulus.set_bit(0, true);
            let cases: Vec<_> =
                (0..iterations).map(|_| (rng.gen_biguint_below(&modulus), rng.gen_biguint(bits))).collect();
            let time = |f: &dyn Fn(&BigUint, &BigUint) -> BigUint| {
                let start = Instant::now();
                for (b, e) in &cases {
                    std::hint::black_box(f(b, e));
                }
                start.elapsed() / iterations as u32
            };
            let naive = time(&|b, e| mod_exp_naive(b, e, &modulus));
            let mont = time(&|b, e| mod_exp(b, e, &modulus));
            let _ = writeln!(out, "modulus_bits={bits}");
            let _ = writeln!(out, "naive_ms={}", ms(naive));
            let _ = writeln!(out, "montgomery_ms={}", ms(mont));
            let _ = writeln!(out, "speedup={:.2}", naive.as_secs_f64() / mont.as_secs_f64());

            // image encryption throughput uses an N of `bits` bits
            let sk = keygen(bits, &mut rng)?;
            let pixels: Vec<u8> = (0..784).map(|i| (i * 7 % 256) as u8).collect();
            let multi = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let encrypt_with = |n: usize| -> Result<Duration> {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                let mut rng = ChaCha20Rng::seed_from_u64(0);
                let start = Instant::now();
                pool.install(|| {
                    EncTensor::encrypt_pixels(sk.public(), &pixels, vec![1, 28, 28], Scale::one(), &mut rng)
                })
                .map_err(|e| CliError::Protocol(e.into()))?;
                Ok(start.elapsed())
            };
            let one = encrypt_with(1)?;
            let _ = writeln!(out, "image_encrypt_1_thread_ms={}", ms(one));
            if multi > 1 {
                let many = encrypt_with(multi)?;
                let _ = writeln!(out, "image_encrypt_{multi}_threads_ms={}", ms(many));
                let _ = writeln!(out, "thread_speedup={:.2}", one.as_secs_f64() / many.as_secs_f64());
            }
        }
    }
    Ok(())
}
