//! Encrypted tensors and the layer primitives that run on them.
//!
//! Every output cell of a layer is an independent product of ciphertext
//! powers, so cells are computed in parallel when the `parallel` feature is
//! on. Randomness (fresh encryptions) is drawn from per-cell ChaCha streams
//! keyed by one seed taken from the caller's RNG, which keeps results
//! independent of scheduling.

use num_bigint::{BigInt, BigUint};
use num_traits::{One, Zero};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::fixed_point::{Scale, ScaleState};
use crate::paillier::{Ciphertext, PaillierError, PrivateKey, PublicKey};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncTensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sign mask has {got} bits for {expected} cells")]
    MaskLength { expected: usize, got: usize },
    #[error(transparent)]
    Crypto(#[from] PaillierError),
}

type Result<T> = std::result::Result<T, EncTensorError>;

/// 2-D convolution with integer weights.
///
/// `kernel` is indexed `[out][in][row][col]`; `bias` holds one integer per
/// output channel already expressed at the product scale of the layer
/// (input total scale × `weight_scale`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_rows: usize,
    pub kernel_cols: usize,
    pub kernel: Vec<i64>,
    pub bias: Vec<BigInt>,
    pub stride: usize,
    /// Zero padding added on every side.
    pub padding: usize,
    pub weight_scale: Scale,
}

impl ConvSpec {
    pub fn weight(&self, o: usize, c: usize, m: usize, n: usize) -> i64 {
        self.kernel[((o * self.in_channels + c) * self.kernel_rows + m) * self.kernel_cols + n]
    }

    /// Output `[C', H', W']` for an input `[C, H, W]`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = *input else {
            return Err(EncTensorError::Shape(format!("convolution needs [C, H, W], got {input:?}")));
        };
        if c != self.in_channels {
            return Err(EncTensorError::Shape(format!(
                "convolution expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if self.stride == 0 || self.kernel_rows == 0 || self.kernel_cols == 0 {
            return Err(EncTensorError::Shape("kernel and stride must be positive".into()));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel_rows || pw < self.kernel_cols {
            return Err(EncTensorError::Shape(format!(
                "{}x{} kernel does not fit a {h}x{w} input",
                self.kernel_rows, self.kernel_cols
            )));
        }
        Ok(vec![
            self.out_channels,
            (ph - self.kernel_rows) / self.stride + 1,
            (pw - self.kernel_cols) / self.stride + 1,
        ])
    }

    pub fn check(&self) -> Result<()> {
        let expected = self.out_channels * self.in_channels * self.kernel_rows * self.kernel_cols;
        if self.kernel.len() != expected {
            return Err(EncTensorError::Shape(format!(
                "kernel has {} weights, dims need {expected}",
                self.kernel.len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(EncTensorError::Shape(format!(
                "bias has {} entries for {} output channels",
                self.bias.len(),
                self.out_channels
            )));
        }
        Ok(())
    }
}

/// Fully connected layer; `weights` is `[out][in]` row-major and `bias` is at
/// the layer's product scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseSpec {
    pub out_features: usize,
    pub in_features: usize,
    pub weights: Vec<i64>,
    pub bias: Vec<BigInt>,
    pub weight_scale: Scale,
}

impl DenseSpec {
    pub fn row(&self, j: usize) -> &[i64] {
        &self.weights[j * self.in_features..(j + 1) * self.in_features]
    }

    pub fn check(&self) -> Result<()> {
        if self.weights.len() != self.out_features * self.in_features {
            return Err(EncTensorError::Shape(format!(
                "weight matrix has {} entries, dims need {}",
                self.weights.len(),
                self.out_features * self.in_features
            )));
        }
        if self.bias.len() != self.out_features {
            return Err(EncTensorError::Shape(format!(
                "bias has {} entries for {} outputs",
                self.bias.len(),
                self.out_features
            )));
        }
        Ok(())
    }
}

/// Average pooling; trailing rows and columns that do not fill a window are
/// dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: (usize, usize),
    pub stride: usize,
}

impl PoolSpec {
    pub fn area(&self) -> usize {
        self.window.0 * self.window.1
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = *input else {
            return Err(EncTensorError::Shape(format!("pooling needs [C, H, W], got {input:?}")));
        };
        if self.area() == 0 || self.stride == 0 {
            return Err(EncTensorError::Shape("pool window and stride must be positive".into()));
        }
        if self.window.0 > h || self.window.1 > w {
            return Err(EncTensorError::Shape(format!(
                "{}x{} window is larger than the {h}x{w} input",
                self.window.0, self.window.1
            )));
        }
        Ok(vec![c, (h - self.window.0) / self.stride + 1, (w - self.window.1) / self.stride + 1])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncTensor {
    shape: Vec<usize>,
    cells: Vec<Ciphertext>,
    scale_state: ScaleState,
}

impl EncTensor {
    pub fn new(shape: Vec<usize>, cells: Vec<Ciphertext>, scale_state: ScaleState) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != cells.len() {
            return Err(EncTensorError::Shape(format!(
                "shape {shape:?} needs {count} cells, got {}",
                cells.len()
            )));
        }
        Ok(Self { shape, cells, scale_state })
    }

    /// Encrypts signed raw integers, one ciphertext per value.
    pub fn encrypt<R: RngCore + ?Sized>(
        pk: &PublicKey,
        values: &[BigInt],
        shape: Vec<usize>,
        scale_state: ScaleState,
        rng: &mut R,
    ) -> Result<Self> {
        let seed = draw_seed(rng);
        let cells = par_map(values.len(), |i| {
            pk.encrypt_signed(&values[i], &mut cell_rng(&seed, i))
        })
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(shape, cells, scale_state)
    }

    /// Per-pixel encryption of an 8-bit image; each byte is the raw value.
    pub fn encrypt_pixels<R: RngCore + ?Sized>(
        pk: &PublicKey,
        pixels: &[u8],
        shape: Vec<usize>,
        input_scale: Scale,
        rng: &mut R,
    ) -> Result<Self> {
        let values: Vec<BigInt> = pixels.iter().map(|&p| BigInt::from(p)).collect();
        Self::encrypt(pk, &values, shape, ScaleState::new(input_scale), rng)
    }

    /// Signed decryption of every cell.
    pub fn decrypt(&self, sk: &PrivateKey) -> Result<Vec<BigInt>> {
        par_map(self.cells.len(), |i| sk.decrypt_signed(&self.cells[i]))
            .into_iter()
            .map(|r| r.map_err(EncTensorError::from))
            .collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn cells(&self) -> &[Ciphertext] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<Ciphertext> {
        self.cells
    }

    pub fn scale_state(&self) -> &ScaleState {
        &self.scale_state
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Same cells viewed as a flat feature vector.
    pub fn flatten(self) -> Self {
        Self { shape: vec![self.cells.len()], ..self }
    }
}

/// Fresh 32-byte seed for the per-cell streams.
pub fn draw_seed<R: RngCore + ?Sized>(rng: &mut R) -> [u8; 32] {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    seed
}

/// The deterministic randomness stream of cell `index`.
pub fn cell_rng(seed: &[u8; 32], index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::from_seed(*seed);
    rng.set_stream(index as u64);
    rng
}

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..len).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, F>(len: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..len).map(f).collect()
}

/// Running product split by weight sign, so only one inversion is needed.
struct SignedProduct<'a> {
    pk: &'a PublicKey,
    pos: BigUint,
    neg: BigUint,
}

impl<'a> SignedProduct<'a> {
    fn new(pk: &'a PublicKey) -> Self {
        Self { pk, pos: BigUint::one(), neg: BigUint::one() }
    }

    fn push(&mut self, c: &Ciphertext, w: i64) {
        if w == 0 {
            return;
        }
        let term = if w.unsigned_abs() == 1 {
            c.value().clone()
        } else {
            self.pk.pow_mod_n_squared(c.value(), &BigUint::from(w.unsigned_abs()))
        };
        let n2 = self.pk.n_squared();
        if w > 0 {
            self.pos = &self.pos * term % n2;
        } else {
            self.neg = &self.neg * term % n2;
        }
    }

    fn finish(self, bias: &BigInt) -> Result<Ciphertext> {
        let mut acc = Ciphertext::from_raw(self.pos);
        if !self.neg.is_one() {
            let inv = self.pk.negate(&Ciphertext::from_raw(self.neg))?;
            acc = self.pk.add(&acc, &inv);
        }
        if !bias.is_zero() {
            acc = self.pk.add_plain_signed(&acc, bias)?;
        }
        Ok(acc)
    }
}

/// `E(y_j) = E(b_j) · Π_i E(x_i)^{W_ji}`.
pub fn enc_dense(x: &EncTensor, spec: &DenseSpec, pk: &PublicKey) -> Result<EncTensor> {
    spec.check()?;
    if x.shape.len() != 1 || x.len() != spec.in_features {
        return Err(EncTensorError::Shape(format!(
            "dense layer expects [{}], got {:?}",
            spec.in_features, x.shape
        )));
    }
    let cells = par_map(spec.out_features, |j| {
        let mut acc = SignedProduct::new(pk);
        for (c, &w) in x.cells.iter().zip(spec.row(j)) {
            acc.push(c, w);
        }
        acc.finish(&spec.bias[j])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    EncTensor::new(
        vec![spec.out_features],
        cells,
        x.scale_state.compose(&spec.weight_scale),
    )
}

/// `E(a_ij) = E(b) · Π_c Π_m Π_n E(x_{c, i·s+m-p, j·s+n-p})^{w_{m,n}}`,
/// with padded positions contributing nothing.
pub fn enc_conv2d(x: &EncTensor, spec: &ConvSpec, pk: &PublicKey) -> Result<EncTensor> {
    spec.check()?;
    let out_shape = spec.output_shape(&x.shape)?;
    let (h, w) = (x.shape[1] as isize, x.shape[2] as isize);
    let (oh, ow) = (out_shape[1], out_shape[2]);

    let cells = par_map(out_shape.iter().product(), |idx| {
        let o = idx / (oh * ow);
        let i = (idx / ow) % oh;
        let j = idx % ow;
        let mut acc = SignedProduct::new(pk);
        for c in 0..spec.in_channels {
            for m in 0..spec.kernel_rows {
                let r = (i * spec.stride + m) as isize - spec.padding as isize;
                if r < 0 || r >= h {
                    continue;
                }
                for n in 0..spec.kernel_cols {
                    let col = (j * spec.stride + n) as isize - spec.padding as isize;
                    if col < 0 || col >= w {
                        continue;
                    }
                    let cell = &x.cells[(c * h as usize + r as usize) * w as usize + col as usize];
                    acc.push(cell, spec.weight(o, c, m, n));
                }
            }
        }
        acc.finish(&spec.bias[o])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    EncTensor::new(out_shape, cells, x.scale_state.compose(&spec.weight_scale))
}

/// Encrypted window sums; the window area is folded into the scale so the
/// decoded value is the average.
pub fn enc_avg_pool(x: &EncTensor, spec: &PoolSpec, pk: &PublicKey) -> Result<EncTensor> {
    let out_shape = spec.output_shape(&x.shape)?;
    let (h, w) = (x.shape[1], x.shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let cells = par_map(out_shape.iter().product(), |idx| {
        let c = idx / (oh * ow);
        let i = (idx / ow) % oh;
        let j = idx % ow;
        let mut sum = BigUint::one();
        for m in 0..spec.window.0 {
            for n in 0..spec.window.1 {
                let cell = &x.cells[(c * h + i * spec.stride + m) * w + j * spec.stride + n];
                sum = sum * cell.value() % pk.n_squared();
            }
        }
        Ciphertext::from_raw(sum)
    });
    let area = Scale::from_u64(spec.area() as u64).expect("positive window area");
    EncTensor::new(out_shape, cells, x.scale_state.compose(&area))
}

/// Server half of the interactive ReLU: cells whose bit is set are kept,
/// the others become fresh encryptions of zero.
pub fn apply_sign_mask<R: RngCore + ?Sized>(
    x: &EncTensor,
    mask: &[bool],
    pk: &PublicKey,
    rng: &mut R,
) -> Result<EncTensor> {
    if mask.len() != x.len() {
        return Err(EncTensorError::MaskLength { expected: x.len(), got: mask.len() });
    }
    let seed = draw_seed(rng);
    let cells = par_map(x.len(), |i| {
        if mask[i] {
            x.cells[i].clone()
        } else {
            pk.encrypt_zero(&mut cell_rng(&seed, i))
        }
    });
    EncTensor::new(x.shape.clone(), cells, x.scale_state.clone())
}
