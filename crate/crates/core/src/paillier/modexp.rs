//! Modular exponentiation.
//!
//! [`Montgomery`] keeps an odd modulus in 64-bit limbs and exponentiates
//! with a fixed-window ladder over Montgomery-form products (CIOS
//! multiplication, a dedicated squaring routine and one conditional final
//! subtraction per product). [`mod_exp_naive`] is the plain left-to-right
//! square-and-multiply reference it is checked against.

use num_bigint::BigUint;
use num_traits::{One, Zero};

/// Precomputed state for arithmetic modulo a fixed odd modulus `n > 1`.
#[derive(Clone, Debug)]
pub struct Montgomery {
    modulus: BigUint,
    n: Vec<u64>,
    /// `-n^{-1} mod 2^64`
    n0_inv: u64,
    /// `R^2 mod n` with `R = 2^(64 * limbs)`
    r2: Vec<u64>,
}

impl Montgomery {
    /// Returns `None` when the modulus is even or `<= 1`.
    pub fn new(modulus: &BigUint) -> Option<Self> {
        if modulus <= &BigUint::one() || !modulus.bit(0) {
            return None;
        }
        let n = modulus.to_u64_digits();
        let s = n.len();

        let n0 = n[0];
        let mut inv = n0;
        for _ in 0..6 {
            inv = inv.wrapping_mul(2u64.wrapping_sub(n0.wrapping_mul(inv)));
        }
        debug_assert_eq!(n0.wrapping_mul(inv), 1);

        let r2 = (BigUint::one() << (128 * s)) % modulus;
        Some(Self {
            modulus: modulus.clone(),
            n0_inv: inv.wrapping_neg(),
            r2: to_limbs(&r2, s),
            n,
        })
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    fn limbs(&self) -> usize {
        self.n.len()
    }

    /// `a * b * R^{-1} mod n` for `a, b < n`.
    fn mul(&self, a: &[u64], b: &[u64], t: &mut [u64], out: &mut [u64]) {
        let s = self.limbs();
        let n = &self.n;
        let t = &mut t[..s + 2];
        t.fill(0);
        for &bi in &b[..s] {
            let bi = bi as u128;
            let mut carry = 0u128;
            for j in 0..s {
                let v = t[j] as u128 + (a[j] as u128) * bi + carry;
                t[j] = v as u64;
                carry = v >> 64;
            }
            let v = t[s] as u128 + carry;
            t[s] = v as u64;
            t[s + 1] = (v >> 64) as u64;

            let m = t[0].wrapping_mul(self.n0_inv) as u128;
            let mut carry = (t[0] as u128 + m * n[0] as u128) >> 64;
            for j in 1..s {
                let v = t[j] as u128 + m * n[j] as u128 + carry;
                t[j - 1] = v as u64;
                carry = v >> 64;
            }
            let v = t[s] as u128 + carry;
            t[s - 1] = v as u64;
            t[s] = t[s + 1] + (v >> 64) as u64;
        }
        self.finish(&t[..s], t[s], out);
    }

    /// `a^2 * R^{-1} mod n`; `t` needs `2 * limbs` words.
    fn sqr(&self, a: &[u64], t: &mut [u64], out: &mut [u64]) {
        let s = self.limbs();
        let n = &self.n;
        let t = &mut t[..2 * s];
        t.fill(0);

        // off-diagonal products
        for i in 0..s {
            let ai = a[i] as u128;
            let mut carry = 0u128;
            for j in (i + 1)..s {
                let v = t[i + j] as u128 + ai * (a[j] as u128) + carry;
                t[i + j] = v as u64;
                carry = v >> 64;
            }
            t[i + s] = carry as u64;
        }
        // double, then add the squares on the diagonal
        let mut top = 0u64;
        for w in t[..2 * s].iter_mut() {
            let next = *w >> 63;
            *w = (*w << 1) | top;
            top = next;
        }
        let mut carry = 0u128;
        for i in 0..s {
            let sq = (a[i] as u128) * (a[i] as u128);
            let v = t[2 * i] as u128 + (sq as u64) as u128 + carry;
            t[2 * i] = v as u64;
            let v = t[2 * i + 1] as u128 + (sq >> 64) + (v >> 64);
            t[2 * i + 1] = v as u64;
            carry = v >> 64;
        }

        // reduction
        let mut extra = 0u64;
        for i in 0..s {
            let m = t[i].wrapping_mul(self.n0_inv) as u128;
            let mut carry = 0u128;
            for j in 0..s {
                let v = t[i + j] as u128 + m * n[j] as u128 + carry;
                t[i + j] = v as u64;
                carry = v >> 64;
            }
            let v = t[i + s] as u128 + carry + extra as u128;
            t[i + s] = v as u64;
            extra = (v >> 64) as u64;
        }
        self.finish(&t[s..2 * s], extra, out);
    }

    /// Writes `value` (with an overflow word) reduced below `n` into `out`.
    fn finish(&self, value: &[u64], overflow: u64, out: &mut [u64]) {
        if overflow != 0 || !less_than(value, &self.n) {
            let mut borrow = 0u64;
            for j in 0..value.len() {
                let (d, b1) = value[j].overflowing_sub(self.n[j]);
                let (d, b2) = d.overflowing_sub(borrow);
                out[j] = d;
                borrow = (b1 | b2) as u64;
            }
        } else {
            out.copy_from_slice(value);
        }
    }

    fn enter(&self, x: &BigUint, t: &mut [u64]) -> Vec<u64> {
        let s = self.limbs();
        let reduced = if x < &self.modulus { x.clone() } else { x % &self.modulus };
        let limbs = to_limbs(&reduced, s);
        let mut out = vec![0u64; s];
        self.mul(&limbs, &self.r2, t, &mut out);
        out
    }

    fn leave(&self, x: &[u64], t: &mut [u64]) -> BigUint {
        let s = self.limbs();
        let mut one = vec![0u64; s];
        one[0] = 1;
        let mut out = vec![0u64; s];
        self.mul(x, &one, t, &mut out);
        from_limbs(&out)
    }

    /// `base^exp mod n`.
    pub fn pow(&self, base: &BigUint, exp: &BigUint) -> BigUint {
        let bits = exp.bits() as usize;
        if bits == 0 {
            return BigUint::one();
        }
        let s = self.limbs();
        let mut t = vec![0u64; 2 * s + 2];
        let window = window_width(bits);

        let mut table = Vec::with_capacity(1 << window);
        table.push(self.enter(&BigUint::one(), &mut t));
        table.push(self.enter(base, &mut t));
        for k in 2..(1usize << window) {
            let mut next = vec![0u64; s];
            self.mul(&table[k - 1], &table[1], &mut t, &mut next);
            table.push(next);
        }

        let exp_limbs = exp.to_u64_digits();
        let windows = bits.div_ceil(window);
        let mut acc = vec![0u64; s];
        let mut scratch = vec![0u64; s];
        for w in (0..windows).rev() {
            let digit = window_digit(&exp_limbs, w * window, window);
            if w == windows - 1 {
                acc.copy_from_slice(&table[digit]);
                continue;
            }
            for _ in 0..window {
                self.sqr(&acc, &mut t, &mut scratch);
                std::mem::swap(&mut acc, &mut scratch);
            }
            if digit != 0 {
                self.mul(&acc, &table[digit], &mut t, &mut scratch);
                std::mem::swap(&mut acc, &mut scratch);
            }
        }
        self.leave(&acc, &mut t)
    }
}

fn window_width(bits: usize) -> usize {
    match bits {
        0..=8 => 1,
        9..=32 => 2,
        33..=128 => 3,
        129..=512 => 4,
        _ => 5,
    }
}

fn window_digit(limbs: &[u64], start: usize, width: usize) -> usize {
    let mut digit = 0usize;
    for k in (0..width).rev() {
        let bit = start + k;
        let word = limbs.get(bit / 64).copied().unwrap_or(0);
        digit = (digit << 1) | ((word >> (bit % 64)) & 1) as usize;
    }
    digit
}

fn less_than(a: &[u64], b: &[u64]) -> bool {
    for (x, y) in a.iter().rev().zip(b.iter().rev()) {
        if x != y {
            return x < y;
        }
    }
    false
}

fn to_limbs(x: &BigUint, len: usize) -> Vec<u64> {
    let mut limbs = x.to_u64_digits();
    limbs.resize(len, 0);
    limbs
}

fn from_limbs(limbs: &[u64]) -> BigUint {
    BigUint::new(
        limbs
            .iter()
            .flat_map(|&l| [l as u32, (l >> 32) as u32])
            .collect(),
    )
}

/// `base^exp mod modulus`.
///
/// Odd moduli go through [`Montgomery`]; even moduli use the reference
/// path. Panics if `modulus` is zero.
pub fn mod_exp(base: &BigUint, exp: &BigUint, modulus: &BigUint) -> BigUint {
    match Montgomery::new(modulus) {
        Some(ctx) => ctx.pow(base, exp),
        None => mod_exp_naive(base, exp, modulus),
    }
}

/// Left-to-right binary square-and-multiply with full divisions.
pub fn mod_exp_naive(base: &BigUint, exp: &BigUint, modulus: &BigUint) -> BigUint {
    assert!(!modulus.is_zero(), "modulus must be nonzero");
    if modulus.is_one() {
        return BigUint::zero();
    }
    let b = base % modulus;
    let mut acc = BigUint::one();
    for i in (0..exp.bits()).rev() {
        acc = &acc * &acc % modulus;
        if exp.bit(i) {
            acc = &acc * &b % modulus;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::RandBigInt;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn zero_and_one_exponents() {
        let n = BigUint::from(1_000_003u32);
        let x = BigUint::from(123_456_789u32);
        assert_eq!(mod_exp(&x, &BigUint::zero(), &n), BigUint::one());
        assert_eq!(mod_exp(&x, &BigUint::one(), &n), &x % &n);
    }

    #[test]
    fn even_modulus_uses_reference() {
        let n = BigUint::from(1u32 << 20);
        let x = BigUint::from(3u32);
        let e = BigUint::from(1000u32);
        assert_eq!(mod_exp(&x, &e, &n), x.modpow(&e, &n));
    }

    #[test]
    fn modulus_one() {
        let x = BigUint::from(5u32);
        assert!(mod_exp(&x, &BigUint::from(3u32), &BigUint::one()).is_zero());
        assert!(Montgomery::new(&BigUint::one()).is_none());
    }

    #[test]
    fn base_larger_than_modulus() {
        let n = BigUint::from(97u32);
        let x = BigUint::from(10_000u32);
        let e = BigUint::from(13u32);
        assert_eq!(mod_exp(&x, &e, &n), mod_exp_naive(&x, &e, &n));
    }

    #[test]
    fn random_triples_match_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for i in 0..1000 {
            let bits = [64u64, 65, 127, 128, 192, 257, 512, 1024][i % 8];
            let mut n = rng.gen_biguint(bits);
            n.set_bit(0, true);
            if n <= BigUint::one() {
                continue;
            }
            let base = rng.gen_biguint(bits + 8);
            let exp_bits = rng.gen_range(0..300u64);
            let exp = rng.gen_biguint(exp_bits);
            assert_eq!(
                mod_exp(&base, &exp, &n),
                mod_exp_naive(&base, &exp, &n),
                "bits={bits}"
            );
        }
    }

    #[test]
    fn all_ones_modulus_limbs() {
        // exercises the final subtraction with maximal carries
        let n = (BigUint::one() << 256u32) - BigUint::one();
        let base = &n - BigUint::from(2u32);
        let exp = BigUint::from(0xffff_ffffu64);
        assert_eq!(mod_exp(&base, &exp, &n), mod_exp_naive(&base, &exp, &n));
    }
}
