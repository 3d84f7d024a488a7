//! Server side. Works only with the public key the client sends.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::frame::{read_message, write_message, ErrorCode, Message, DEFAULT_MAX_FRAME};
use super::ProtocolError;
use crate::enc_tensor::{apply_sign_mask, enc_avg_pool, enc_conv2d, enc_dense, EncTensor};
use crate::model::{load_model, ModelError, NetworkSpec, StageOp};
use crate::paillier::{Ciphertext, PublicKey};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: ModelError },
}

/// Loaded models by id. Immutable once the server starts.
#[derive(Clone, Debug, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<NetworkSpec>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, spec: NetworkSpec) {
        self.models.insert(id.into(), Arc::new(spec));
    }

    pub fn get(&self, id: &str) -> Option<Arc<NetworkSpec>> {
        self.models.get(id).cloned()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Loads every `*.json` file in `dir`; the model id is the file stem.
    pub fn load_dir(dir: &Path) -> Result<Self, RegistryError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RegistryError::Io { path, source }
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let mut registry = Self::new();
        for path in paths {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let spec = load_model(&text, None)
                .map_err(|source| RegistryError::Model { path: path.clone(), source })?;
            let id = path.file_stem().expect("json file has a stem").to_string_lossy().into_owned();
            registry.insert(id, spec);
        }
        Ok(registry)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionSummary {
    pub model_id: String,
    pub key_bits: u64,
    /// Cells per SIGN_REQUEST, in order.
    pub rounds: Vec<usize>,
}

/// What the server sends next.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    SignRequest(Vec<BigUint>),
    Result { cells: Vec<BigUint>, scale: String },
}

fn reject(code: ErrorCode, detail: impl Into<String>) -> ProtocolError {
    ProtocolError::Rejected { code, detail: detail.into() }
}

/// Per-session state: the key, the model, where in the layer list the
/// pipeline stands and the sign query it waits on.
pub struct Session {
    pk: PublicKey,
    model_id: String,
    spec: Arc<NetworkSpec>,
    cursor: usize,
    state: Option<EncTensor>,
    pending: Option<usize>,
    rounds: Vec<usize>,
    rng: ChaCha20Rng,
}

impl Session {
    /// Handles HELLO: resolves the model and checks its value bound against
    /// the client's key.
    pub fn open(
        registry: &ModelRegistry,
        model_id: &str,
        n: BigUint,
        g: BigUint,
        rng: ChaCha20Rng,
    ) -> Result<Self, ProtocolError> {
        let spec = registry
            .get(model_id)
            .ok_or_else(|| reject(ErrorCode::UnknownModel, format!("no model {model_id:?}")))?;
        let pk = PublicKey::from_parts(n, g)
            .map_err(|e| reject(ErrorCode::BadRequest, format!("public key: {e}")))?;
        spec.check_key(&pk)
            .map_err(|e| reject(ErrorCode::OverflowConfig, e.to_string()))?;
        Ok(Self {
            pk,
            model_id: model_id.to_string(),
            spec,
            cursor: 0,
            state: None,
            pending: None,
            rounds: Vec::new(),
            rng,
        })
    }

    /// Handles INFER_REQUEST and runs up to the first ReLU.
    pub fn begin(&mut self, shape: &[u32], cells: Vec<BigUint>) -> Result<Step, ProtocolError> {
        if self.state.is_some() {
            return Err(reject(ErrorCode::Protocol, "second INFER_REQUEST in one session"));
        }
        let expected = self.spec.input_shape();
        if shape.len() != expected.len() || shape.iter().zip(expected).any(|(&a, &b)| a as usize != b) {
            return Err(reject(
                ErrorCode::BadRequest,
                format!("input shape {shape:?}, model expects {expected:?}"),
            ));
        }
        let cells = self.import(cells)?;
        let tensor = EncTensor::new(
            expected.to_vec(),
            cells,
            crate::fixed_point::ScaleState::new(self.spec.input_scale().clone()),
        )
        .map_err(|e| reject(ErrorCode::BadRequest, e.to_string()))?;
        self.state = Some(tensor);
        self.run()
    }

    /// Handles SIGN_RESPONSE and runs to the next ReLU or the end.
    pub fn resume(&mut self, bits: &[bool]) -> Result<Step, ProtocolError> {
        let expected = self
            .pending
            .take()
            .ok_or_else(|| reject(ErrorCode::Protocol, "SIGN_RESPONSE without a pending query"))?;
        if bits.len() != expected {
            return Err(reject(
                ErrorCode::BadResponse,
                format!("{} sign bits for {expected} cells", bits.len()),
            ));
        }
        let x = self.state.take().expect("pending query has a tensor");
        let masked = apply_sign_mask(&x, bits, &self.pk, &mut self.rng)
            .map_err(|e| reject(ErrorCode::Internal, e.to_string()))?;
        self.state = Some(masked);
        self.cursor += 1;
        self.run()
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            model_id: self.model_id.clone(),
            key_bits: self.pk.bits(),
            rounds: self.rounds.clone(),
        }
    }

    fn import(&self, cells: Vec<BigUint>) -> Result<Vec<Ciphertext>, ProtocolError> {
        cells
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let c = Ciphertext::from_raw(v);
                self.pk
                    .validate(&c)
                    .map_err(|e| reject(ErrorCode::BadRequest, format!("cell {i}: {e}")))?;
                Ok(c)
            })
            .collect()
    }

    fn run(&mut self) -> Result<Step, ProtocolError> {
        let internal = |e: crate::enc_tensor::EncTensorError| reject(ErrorCode::Internal, e.to_string());
        let mut x = self.state.take().expect("session has a tensor");
        while let Some(stage) = self.spec.stages().get(self.cursor) {
            x = match &stage.op {
                StageOp::Conv(spec) => enc_conv2d(&x, spec, &self.pk).map_err(internal)?,
                StageOp::AvgPool(spec) => enc_avg_pool(&x, spec, &self.pk).map_err(internal)?,
                StageOp::Dense(spec) => enc_dense(&x, spec, &self.pk).map_err(internal)?,
                StageOp::Flatten => x.flatten(),
                StageOp::Relu => {
                    let cells = x.cells().iter().map(|c| c.value().clone()).collect::<Vec<_>>();
                    self.pending = Some(cells.len());
                    self.rounds.push(cells.len());
                    self.state = Some(x);
                    return Ok(Step::SignRequest(cells));
                }
            };
            self.cursor += 1;
        }
        let scale = x.scale_state().total().to_string();
        debug_assert_eq!(scale, self.spec.final_scale().total().to_string());
        let cells = x.into_cells().into_iter().map(Ciphertext::into_value).collect();
        Ok(Step::Result { cells, scale })
    }
}

fn step_message(step: Step) -> Message {
    match step {
        Step::SignRequest(cells) => Message::SignRequest { cells },
        Step::Result { cells, scale } => Message::Result { cells, scale },
    }
}

/// Runs one session to completion on `conn`.
///
/// Failures are sent to the client as an ERROR frame and returned.
pub fn server_handle_session<S, R>(
    conn: &mut S,
    registry: &ModelRegistry,
    rng: &mut R,
    max_frame: usize,
) -> Result<SessionSummary, ProtocolError>
where
    S: Read + Write + ?Sized,
    R: RngCore + ?Sized,
{
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    let session_rng = ChaCha20Rng::from_seed(seed);

    let mut session = match read_message(conn, max_frame) {
        Ok(Message::Hello { model_id, n, g }) => {
            match Session::open(registry, &model_id, n, g, session_rng) {
                Ok(s) => s,
                Err(e) => {
                    send_error(conn, &e);
                    // the client pipelines its INFER_REQUEST; consume it so the
                    // ERROR frame is not lost to a reset
                    let _ = read_message(conn, max_frame);
                    return Err(e);
                }
            }
        }
        Ok(other) => {
            let e = ProtocolError::Unexpected { expected: "HELLO", got: other.name() };
            send_error(conn, &e);
            return Err(e);
        }
        Err(e) => return Err(e.into()),
    };

    let mut step = match read_message(conn, max_frame) {
        Ok(Message::InferRequest { shape, cells }) => session.begin(&shape, cells),
        Ok(other) => Err(ProtocolError::Unexpected { expected: "INFER_REQUEST", got: other.name() }),
        Err(e) => return Err(e.into()),
    };
    loop {
        let next = match step {
            Ok(next) => next,
            Err(e) => {
                send_error(conn, &e);
                return Err(e);
            }
        };
        let done = matches!(next, Step::Result { .. });
        write_message(conn, &step_message(next))?;
        if done {
            return Ok(session.summary());
        }
        step = match read_message(conn, max_frame) {
            Ok(Message::SignResponse { bits }) => session.resume(&bits),
            Ok(other) => Err(ProtocolError::Unexpected { expected: "SIGN_RESPONSE", got: other.name() }),
            Err(e) => return Err(e.into()),
        };
    }
}

fn send_error<S: Write + ?Sized>(conn: &mut S, e: &ProtocolError) {
    let detail = match e {
        ProtocolError::Rejected { detail, .. } => detail.clone(),
        other => other.to_string(),
    };
    let _ = write_message(conn, &Message::Error { code: e.code(), detail });
}

/// TCP front end: one thread per connection, sessions seeded from a master
/// generator.
pub struct Server {
    listener: TcpListener,
    registry: Arc<ModelRegistry>,
    master: Mutex<ChaCha20Rng>,
    next_id: AtomicU64,
    max_frame: usize,
}

pub type SessionReport<'a> = &'a (dyn Fn(u64, SocketAddr, &Result<SessionSummary, ProtocolError>) + Sync);

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, registry: ModelRegistry, seed: [u8; 32]) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            registry: Arc::new(registry),
            master: Mutex::new(ChaCha20Rng::from_seed(seed)),
            next_id: AtomicU64::new(0),
            max_frame: DEFAULT_MAX_FRAME,
        })
    }

    pub fn with_max_frame(mut self, max_frame: usize) -> Self {
        self.max_frame = max_frame;
        self
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    /// Accepts connections until `limit` sessions have been accepted (or
    /// forever), and returns once all of them finished.
    pub fn serve(&self, limit: Option<usize>, report: SessionReport<'_>) -> io::Result<()> {
        std::thread::scope(|scope| {
            let mut accepted = 0;
            while limit.is_none_or(|l| accepted < l) {
                let (stream, peer) = match self.listener.accept() {
                    Ok(pair) => pair,
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(e) => return Err(e),
                };
                accepted += 1;
                let id = self.next_id.fetch_add(1, Ordering::Relaxed);
                let seed = {
                    let mut master = self.master.lock().unwrap_or_else(|p| p.into_inner());
                    let mut seed = [0u8; 32];
                    master.fill_bytes(&mut seed);
                    seed
                };
                scope.spawn(move || {
                    let result = self.handle(stream, seed);
                    report(id, peer, &result);
                });
            }
            Ok(())
        })
    }

    fn handle(&self, mut stream: TcpStream, seed: [u8; 32]) -> Result<SessionSummary, ProtocolError> {
        let _ = stream.set_nodelay(true);
        // bounds the drain read after a rejected HELLO
        let _ = stream.set_read_timeout(Some(Duration::from_secs(600)));
        let mut rng = ChaCha20Rng::from_seed(seed);
        server_handle_session(&mut stream, &self.registry, &mut rng, self.max_frame)
    }
}
