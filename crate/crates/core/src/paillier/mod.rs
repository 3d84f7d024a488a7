//! Paillier cryptosystem.
//!
//! Keys use the generator `g = N + 1`, so `g^m mod N^2` collapses to
//! `1 + m·N`. Plaintexts live in `Z_N`; signed values are mapped onto it by
//! [`PublicKey::encode_signed`], which sends negatives to the upper half.
//!
//! Nothing here is constant-time.

mod keyfile;
pub mod modexp;
pub mod prime;

use std::fmt;
use std::sync::Arc;

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use rand::RngCore;
use thiserror::Error;

pub use keyfile::KeyFileError;
pub use modexp::{mod_exp, mod_exp_naive, Montgomery};

/// Smallest accepted modulus size for [`keygen`].
pub const MIN_KEY_BITS: u64 = 32;
/// Modulus size used when the caller does not choose one.
pub const DEFAULT_KEY_BITS: u64 = 2048;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PaillierError {
    #[error("key size of {0} bits is below the minimum of {MIN_KEY_BITS}")]
    KeyTooSmall(u64),
    #[error("plaintext is outside [0, N)")]
    PlaintextOutOfRange,
    #[error("signed value does not fit the half-range of N")]
    SignedOverflow,
    #[error("scalar magnitude must be below N")]
    ScalarOutOfRange,
    #[error("value is not a valid ciphertext under this key")]
    InvalidCiphertext,
    #[error("invalid key: {0}")]
    InvalidKey(String),
}

pub type Result<T, E = PaillierError> = std::result::Result<T, E>;

/// A Paillier ciphertext, an element of `Z*_{N^2}`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext(BigUint);

impl Ciphertext {
    /// Wraps a raw value without checking it; see [`PublicKey::validate`].
    pub fn from_raw(value: BigUint) -> Self {
        Ciphertext(value)
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn into_value(self) -> BigUint {
        self.0
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({:#x})", self.0)
    }
}

#[derive(Clone)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
    /// `ceil(N / 2)`: decoded values at or above it are negative.
    half: BigUint,
    n_squared_ctx: Arc<Montgomery>,
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.g == other.g
    }
}

impl Eq for PublicKey {}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("bits", &self.n.bits())
            .field("n", &format_args!("{:#x}", self.n))
            .finish()
    }
}

impl PublicKey {
    /// Public key for modulus `n` with `g = n + 1`.
    pub fn from_modulus(n: BigUint) -> Result<Self> {
        let g = &n + 1u32;
        Self::from_parts(n, g)
    }

    /// Public key with an explicit generator.
    pub fn from_parts(n: BigUint, g: BigUint) -> Result<Self> {
        if n <= BigUint::from(2u32) || n.is_even() {
            return Err(PaillierError::InvalidKey("N must be odd and greater than 2".into()));
        }
        let n_squared = &n * &n;
        if g.is_zero() || g >= n_squared || !g.gcd(&n).is_one() {
            return Err(PaillierError::InvalidKey("g is not a unit modulo N^2".into()));
        }
        let n_squared_ctx = Arc::new(Montgomery::new(&n_squared).expect("odd modulus"));
        let half = (&n + 1u32) >> 1;
        Ok(Self { n, n_squared, g, half, n_squared_ctx })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    /// `base^exp mod N^2` through the cached Montgomery context.
    pub fn pow_mod_n_squared(&self, base: &BigUint, exp: &BigUint) -> BigUint {
        self.n_squared_ctx.pow(base, exp)
    }

    fn g_pow(&self, m: &BigUint) -> BigUint {
        if self.g == &self.n + 1u32 {
            (m * &self.n + 1u32) % &self.n_squared
        } else {
            self.pow_mod_n_squared(&self.g, m)
        }
    }

    /// Uniform `r` in `[1, N)` with `gcd(r, N) = 1`.
    pub fn random_nonce<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_range(&BigUint::one(), &self.n);
            if r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// `E(m) = g^m · r^N mod N^2` with a fresh nonce.
    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
        let r = self.random_nonce(rng);
        self.encrypt_with_nonce(m, &r)
    }

    /// Encryption with a caller-chosen nonce.
    pub fn encrypt_with_nonce(&self, m: &BigUint, r: &BigUint) -> Result<Ciphertext> {
        if m >= &self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        if r.is_zero() || r >= &self.n || !r.gcd(&self.n).is_one() {
            return Err(PaillierError::InvalidKey("nonce is not a unit modulo N".into()));
        }
        let rn = self.pow_mod_n_squared(r, &self.n);
        Ok(Ciphertext(self.g_pow(m) * rn % &self.n_squared))
    }

    /// Fresh encryption of zero (`r^N mod N^2`).
    pub fn encrypt_zero<R: RngCore + ?Sized>(&self, rng: &mut R) -> Ciphertext {
        let r = self.random_nonce(rng);
        Ciphertext(self.pow_mod_n_squared(&r, &self.n))
    }

    pub fn encrypt_signed<R: RngCore + ?Sized>(&self, m: &BigInt, rng: &mut R) -> Result<Ciphertext> {
        let encoded = self.encode_signed(m)?;
        self.encrypt(&encoded, rng)
    }

    /// Checks `c < N^2` and `gcd(c, N) = 1`.
    pub fn validate(&self, c: &Ciphertext) -> Result<()> {
        if c.0.is_zero() || c.0 >= self.n_squared || !c.0.gcd(&self.n).is_one() {
            return Err(PaillierError::InvalidCiphertext);
        }
        Ok(())
    }

    /// Homomorphic addition: decrypts to `m1 + m2 mod N`.
    pub fn add(&self, c1: &Ciphertext, c2: &Ciphertext) -> Ciphertext {
        Ciphertext(&c1.0 * &c2.0 % &self.n_squared)
    }

    /// `c · g^m mod N^2`: decrypts to `m_c + m mod N`.
    pub fn add_plain(&self, c: &Ciphertext, m: &BigUint) -> Result<Ciphertext> {
        if m >= &self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        Ok(Ciphertext(&c.0 * self.g_pow(m) % &self.n_squared))
    }

    pub fn add_plain_signed(&self, c: &Ciphertext, m: &BigInt) -> Result<Ciphertext> {
        let encoded = self.encode_signed(m)?;
        self.add_plain(c, &encoded)
    }

    /// `c^{-1} mod N^2`: decrypts to `-m mod N`.
    pub fn negate(&self, c: &Ciphertext) -> Result<Ciphertext> {
        c.0.modinv(&self.n_squared)
            .map(Ciphertext)
            .ok_or(PaillierError::InvalidCiphertext)
    }

    /// Homomorphic scalar product: decrypts to `k·m mod N`.
    ///
    /// Negative `k` exponentiates the inverse ciphertext by `|k|`.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigInt) -> Result<Ciphertext> {
        let magnitude = k.magnitude();
        if magnitude >= &self.n {
            return Err(PaillierError::ScalarOutOfRange);
        }
        let base = if k.is_negative() { self.negate(c)? } else { c.clone() };
        Ok(Ciphertext(self.pow_mod_n_squared(&base.0, magnitude)))
    }

    /// Maps `m` with `|m| < N/2` into `Z_N`, negatives to `m + N`.
    pub fn encode_signed(&self, m: &BigInt) -> Result<BigUint> {
        // 2|m| < N
        if m.magnitude() << 1u32 >= self.n {
            return Err(PaillierError::SignedOverflow);
        }
        Ok(match m.sign() {
            Sign::Minus => &self.n - m.magnitude(),
            _ => m.magnitude().clone(),
        })
    }

    /// Inverse of [`encode_signed`](Self::encode_signed): values below
    /// `ceil(N/2)` are nonnegative, the rest are `v - N`.
    pub fn decode_signed(&self, v: &BigUint) -> BigInt {
        if v < &self.half {
            BigInt::from(v.clone())
        } else {
            BigInt::from(v.clone()) - BigInt::from(self.n.clone())
        }
    }

    /// True when `2·bound + 1 < N`, i.e. every value with `|v| <= bound`
    /// survives the signed encoding.
    pub fn admits_magnitude(&self, bound: &BigUint) -> bool {
        (bound << 1u32) + 1u32 < self.n
    }
}

/// Chinese-remainder helper for one prime factor.
#[derive(Clone)]
struct PrimeFactor {
    p: BigUint,
    p_minus_one: BigUint,
    p_squared_ctx: Montgomery,
    /// `L_p(g^{p-1} mod p^2)^{-1} mod p`
    h: BigUint,
}

impl PrimeFactor {
    fn new(p: &BigUint, g: &BigUint) -> Result<Self> {
        let p_squared = p * p;
        let p_squared_ctx = Montgomery::new(&p_squared)
            .ok_or_else(|| PaillierError::InvalidKey("prime factor must be odd".into()))?;
        let p_minus_one = p - 1u32;
        let gp = p_squared_ctx.pow(&(g % &p_squared), &p_minus_one);
        let h = l_function(&gp, p)
            .modinv(p)
            .ok_or_else(|| PaillierError::InvalidKey("generator fails the CRT condition".into()))?;
        Ok(Self { p: p.clone(), p_minus_one, p_squared_ctx, h })
    }

    fn decrypt(&self, c: &BigUint) -> BigUint {
        let x = self.p_squared_ctx.pow(c, &self.p_minus_one);
        l_function(&x, &self.p) * &self.h % &self.p
    }
}

#[derive(Clone)]
pub struct PrivateKey {
    public: PublicKey,
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    mu: BigUint,
    crt_p: PrimeFactor,
    crt_q: PrimeFactor,
    /// `q^{-1} mod p`
    q_inv: BigUint,
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivateKey")
            .field("bits", &self.public.bits())
            .finish_non_exhaustive()
    }
}

/// `L(u) = (u - 1) / n`
fn l_function(u: &BigUint, n: &BigUint) -> BigUint {
    (u - 1u32) / n
}

impl PrivateKey {
    /// Builds a key pair from two distinct odd primes with `g = pq + 1`.
    ///
    /// The primes are trusted; only the key-generation condition is checked.
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self> {
        let n = &p * &q;
        let public = PublicKey::from_modulus(n)?;
        Self::with_public(public, p, q)
    }

    fn with_public(public: PublicKey, p: BigUint, q: BigUint) -> Result<Self> {
        if p == q {
            return Err(PaillierError::InvalidKey("p and q must differ".into()));
        }
        if &p * &q != public.n {
            return Err(PaillierError::InvalidKey("p·q does not match N".into()));
        }
        let lambda = (&p - 1u32).lcm(&(&q - 1u32));
        let g_lambda = public.pow_mod_n_squared(&public.g, &lambda);
        let mu = l_function(&g_lambda, &public.n)
            .modinv(&public.n)
            .ok_or_else(|| PaillierError::InvalidKey("gcd(L(g^λ mod N^2), N) ≠ 1".into()))?;
        let crt_p = PrimeFactor::new(&p, &public.g)?;
        let crt_q = PrimeFactor::new(&q, &public.g)?;
        let q_inv = q
            .modinv(&p)
            .ok_or_else(|| PaillierError::InvalidKey("p and q are not coprime".into()))?;
        Ok(Self { public, p, q, lambda, mu, crt_p, crt_q, q_inv })
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    /// Decrypts via the CRT split modulo `p^2` and `q^2`.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint> {
        self.public.validate(c)?;
        let mp = self.crt_p.decrypt(&c.0);
        let mq = self.crt_q.decrypt(&c.0);
        let diff = (&mp + &self.p - (&mq % &self.p)) % &self.p;
        let h = diff * &self.q_inv % &self.p;
        Ok(mq + h * &self.q)
    }

    /// `L(c^λ mod N^2) · μ mod N`, without the CRT split.
    pub fn decrypt_direct(&self, c: &Ciphertext) -> Result<BigUint> {
        self.public.validate(c)?;
        let u = self.public.pow_mod_n_squared(&c.0, &self.lambda);
        Ok(l_function(&u, &self.public.n) * &self.mu % &self.public.n)
    }

    pub fn decrypt_signed(&self, c: &Ciphertext) -> Result<BigInt> {
        Ok(self.public.decode_signed(&self.decrypt(c)?))
    }
}

/// Generates a key pair whose modulus has exactly `bits` bits.
pub fn keygen<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<PrivateKey> {
    if bits < MIN_KEY_BITS {
        return Err(PaillierError::KeyTooSmall(bits));
    }
    let p_bits = bits / 2;
    let q_bits = bits - p_bits;
    loop {
        let p = prime::random_prime(p_bits, rng);
        let q = prime::random_prime(q_bits, rng);
        if p == q {
            continue;
        }
        match PrivateKey::from_primes(p, q) {
            Ok(sk) => return Ok(sk),
            Err(PaillierError::InvalidKey(_)) => continue,
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::ToPrimitive;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy() -> PrivateKey {
        PrivateKey::from_primes(BigUint::from(5u32), BigUint::from(7u32)).unwrap()
    }

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    fn int(v: i64) -> BigInt {
        BigInt::from(v)
    }

    #[test]
    fn toy_key_arithmetic() {
        let sk = toy();
        assert_eq!(sk.public().n(), &big(35));
        assert_eq!(sk.public().n_squared(), &big(1225));
        assert_eq!(sk.lambda(), &big(12));
        assert_eq!(sk.public().g(), &big(36));
        assert_eq!((sk.mu() * (sk.lambda() % big(35))) % big(35), big(1));
    }

    #[test]
    fn toy_encrypt_forced_nonce() {
        let sk = toy();
        let pk = sk.public();
        let c0 = pk.encrypt_with_nonce(&big(0), &big(1)).unwrap();
        assert_eq!(c0.value(), &big(1));
        assert_eq!(sk.decrypt(&c0).unwrap(), big(0));

        // 36^3 · 2^35 mod 1225, evaluated with u128 arithmetic
        let mut expected: u128 = 1;
        for _ in 0..3 {
            expected = expected * 36 % 1225;
        }
        for _ in 0..35 {
            expected = expected * 2 % 1225;
        }
        let c3 = pk.encrypt_with_nonce(&big(3), &big(2)).unwrap();
        assert_eq!(c3.value().to_u128().unwrap(), expected);
        assert_eq!(sk.decrypt(&c3).unwrap(), big(3));
        assert_eq!(sk.decrypt_direct(&c3).unwrap(), big(3));
    }

    #[test]
    fn toy_addition_wraps() {
        let sk = toy();
        let pk = sk.public();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = pk.encrypt(&big(30), &mut rng).unwrap();
        let b = pk.encrypt(&big(10), &mut rng).unwrap();
        assert_eq!(sk.decrypt(&pk.add(&a, &b)).unwrap(), big(5));
    }

    #[test]
    fn toy_signed_encoding() {
        let pk = toy().public().clone();
        assert_eq!(pk.encode_signed(&int(-3)).unwrap(), big(32));
        assert_eq!(pk.decode_signed(&big(32)), int(-3));
        assert_eq!(pk.encode_signed(&int(18)), Err(PaillierError::SignedOverflow));
        assert_eq!(pk.encode_signed(&int(-18)), Err(PaillierError::SignedOverflow));
        for m in -17..=17 {
            assert_eq!(pk.decode_signed(&pk.encode_signed(&int(m)).unwrap()), int(m));
        }
    }

    #[test]
    fn toy_magnitude_guard() {
        let pk = toy().public().clone();
        assert!(!pk.admits_magnitude(&big(17)));
        assert!(pk.admits_magnitude(&big(16)));
    }

    #[test]
    fn plaintext_range_checked() {
        let sk = toy();
        let pk = sk.public();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        assert_eq!(pk.encrypt(&big(35), &mut rng), Err(PaillierError::PlaintextOutOfRange));
        let c = pk.encrypt(&big(7), &mut rng).unwrap();
        assert_eq!(pk.add_plain(&c, &big(35)), Err(PaillierError::PlaintextOutOfRange));
        assert_eq!(sk.decrypt(&pk.add_plain(&c, &big(0)).unwrap()).unwrap(), big(7));
        assert_eq!(
            pk.scalar_mul(&c, &int(35)),
            Err(PaillierError::ScalarOutOfRange)
        );
    }

    #[test]
    fn invalid_ciphertexts_rejected() {
        let sk = toy();
        for v in [0u64, 5, 7, 1225, 2000] {
            assert_eq!(
                sk.decrypt(&Ciphertext::from_raw(big(v))),
                Err(PaillierError::InvalidCiphertext),
                "{v}"
            );
        }
        assert_eq!(
            sk.public().scalar_mul(&Ciphertext::from_raw(big(35)), &int(-1)),
            Err(PaillierError::InvalidCiphertext)
        );
    }

    #[test]
    fn keygen_bit_lengths() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let sk = keygen(32, &mut rng).unwrap();
        assert_eq!(sk.p().bits(), 16);
        assert_eq!(sk.q().bits(), 16);
        assert_eq!(sk.public().bits(), 32);
        assert_eq!(keygen(16, &mut rng).unwrap_err(), PaillierError::KeyTooSmall(16));
        let sk = keygen(129, &mut rng).unwrap();
        assert_eq!(sk.public().bits(), 129);
    }

    #[test]
    fn probabilistic_encryption() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let sk = keygen(256, &mut rng).unwrap();
        let pk = sk.public();
        let m = big(42);
        let a = pk.encrypt(&m, &mut rng).unwrap();
        let b = pk.encrypt(&m, &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(sk.decrypt(&a).unwrap(), m);
        assert_eq!(sk.decrypt(&b).unwrap(), m);
    }

    #[test]
    fn scalar_identities() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let sk = keygen(128, &mut rng).unwrap();
        let pk = sk.public();
        let c = pk.encrypt_signed(&int(3), &mut rng).unwrap();
        assert_eq!(sk.decrypt_signed(&pk.scalar_mul(&c, &int(1)).unwrap()).unwrap(), int(3));
        assert_eq!(sk.decrypt_signed(&pk.scalar_mul(&c, &int(-2)).unwrap()).unwrap(), int(-6));
        let zero = pk.scalar_mul(&c, &int(0)).unwrap();
        assert_eq!(zero.value(), &big(1));
        assert_eq!(sk.decrypt(&zero).unwrap(), big(0));
    }

    #[test]
    fn general_generator_decrypts() {
        // g = (N+1)^5 is still a valid generator
        let p = big(1_000_003);
        let q = big(1_000_033);
        let n = &p * &q;
        let g = (&n + 1u32).modpow(&big(5), &(&n * &n));
        let public = PublicKey::from_parts(n, g).unwrap();
        let sk = PrivateKey::with_public(public, p, q).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let c = sk.public().encrypt(&big(987_654), &mut rng).unwrap();
        assert_eq!(sk.decrypt(&c).unwrap(), big(987_654));
        assert_eq!(sk.decrypt_direct(&c).unwrap(), big(987_654));
        let c2 = sk.public().add_plain(&c, &big(6)).unwrap();
        assert_eq!(sk.decrypt(&c2).unwrap(), big(987_660));
    }

    #[test]
    fn degenerate_primes_rejected() {
        assert!(PrivateKey::from_primes(big(7), big(7)).is_err());
        // p | q - 1 makes gcd(λ, N) ≠ 1 with g = N + 1
        assert!(PrivateKey::from_primes(big(3), big(7)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn laws_hold(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>(), k in any::<i32>()) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let sk = keygen(128, &mut rng).unwrap();
            let pk = sk.public();
            let n = pk.n().clone();
            let (a, b) = (big(a) % &n, big(b) % &n);
            let ca = pk.encrypt(&a, &mut rng).unwrap();
            let cb = pk.encrypt(&b, &mut rng).unwrap();
            prop_assert_eq!(sk.decrypt(&ca).unwrap(), a.clone());
            prop_assert_eq!(sk.decrypt(&ca).unwrap(), sk.decrypt_direct(&ca).unwrap());
            prop_assert_eq!(sk.decrypt(&pk.add(&ca, &cb)).unwrap(), (&a + &b) % &n);
            prop_assert_eq!(
                sk.decrypt(&pk.add_plain(&ca, &b).unwrap()).unwrap(),
                sk.decrypt(&pk.add(&ca, &cb)).unwrap()
            );
            let expected = (BigInt::from(k) * BigInt::from(a)).mod_floor(&BigInt::from(n));
            let got = sk.decrypt(&pk.scalar_mul(&ca, &BigInt::from(k)).unwrap()).unwrap();
            prop_assert_eq!(BigInt::from(got), expected);
        }
    }
}
