//! Shortened binary BCH codec: 56 message bits, 35 parity bits, 5 fixed pad
//! bits, correcting up to 5 bit errors.
//!
//! The base code is BCH(127, 92, t=5) over GF(2^7), shortened by 36 data bits
//! to (91, 56). The 5-bit pad marker tops the transmitted word up to 96 bits
//! and doubles as a cheap integrity check: pad mismatches count toward the
//! error budget, and a word whose combined error count exceeds `t` is
//! reported as a decode failure rather than a silent miscorrection.
//!
//! The exact paper-scale parameters are not published; this construction is
//! the one consistent with a 56-bit message, 40 bits of error-correction
//! overhead, and exact recovery below 5 corrupted bits.

use crate::error::{Error, Result};

/// Message length in bits.
pub const DATA_BITS: usize = 56;
/// Parity bits appended by the systematic encoder.
pub const PARITY_BITS: usize = 35;
/// Shortened codeword length (data + parity).
pub const CODE_BITS: usize = DATA_BITS + PARITY_BITS;
/// Fixed marker bits appended after the code bits.
pub const PAD_BITS: usize = 5;
/// Transmitted word length.
pub const CODEWORD_BITS: usize = CODE_BITS + PAD_BITS;
/// Designed correction capacity t.
pub const CORRECT_CAPACITY: usize = 5;
/// The fixed pad marker.
pub const PAD_PATTERN: [u8; PAD_BITS] = [1, 0, 1, 0, 1];

const FIELD_BITS: usize = 7;
const FIELD_SIZE: usize = 1 << FIELD_BITS; // 128
const GROUP_ORDER: usize = FIELD_SIZE - 1; // 127
/// Primitive polynomial x^7 + x^3 + 1.
const PRIM_POLY: u16 = 0x89;
const FULL_LENGTH: usize = 127;
const FULL_DATA: usize = 92;
const GEN_DEGREE: usize = FULL_LENGTH - FULL_DATA; // 35

/// One message as bits (each element 0 or 1).
pub type Payload = [u8; DATA_BITS];
/// One transmitted word as bits.
pub type Codeword = [u8; CODEWORD_BITS];

/// Decode failures are expected outcomes of a noisy channel, not faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BchDecodeFailure {
    /// Berlekamp-Massey produced a locator of degree > t.
    LocatorDegree(usize),
    /// The locator's root count disagrees with its degree (roots fell outside
    /// the shortened positions or are missing).
    RootMismatch { degree: usize, roots: usize },
    /// Corrections plus pad mismatches exceed the error budget.
    ExcessErrors { corrected: usize, pad_mismatches: usize },
}

impl std::fmt::Display for BchDecodeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BchDecodeFailure::LocatorDegree(d) => {
                write!(f, "error locator degree {} exceeds t={}", d, CORRECT_CAPACITY)
            }
            BchDecodeFailure::RootMismatch { degree, roots } => write!(
                f,
                "locator degree {} but {} roots in valid positions",
                degree, roots
            ),
            BchDecodeFailure::ExcessErrors {
                corrected,
                pad_mismatches,
            } => write!(
                f,
                "{} corrections + {} pad mismatches exceed t={}",
                corrected, pad_mismatches, CORRECT_CAPACITY
            ),
        }
    }
}

/// GF(2^7) tables plus the degree-35 generator polynomial.
pub struct BchCode {
    exp: [u8; 2 * GROUP_ORDER],
    log: [u8; FIELD_SIZE],
    /// Generator coefficients, index = degree (g[35] = 1).
    generator: [u8; GEN_DEGREE + 1],
}

impl Default for BchCode {
    fn default() -> Self {
        Self::new()
    }
}

impl BchCode {
    pub fn new() -> Self {
        let mut exp = [0u8; 2 * GROUP_ORDER];
        let mut log = [0u8; FIELD_SIZE];
        let mut v: u16 = 1;
        for i in 0..GROUP_ORDER {
            exp[i] = v as u8;
            log[v as usize] = i as u8;
            v <<= 1;
            if v & (1 << FIELD_BITS) != 0 {
                v ^= PRIM_POLY;
            }
        }
        for i in GROUP_ORDER..2 * GROUP_ORDER {
            exp[i] = exp[i - GROUP_ORDER];
        }
        let code = BchCode {
            exp,
            log,
            generator: [0; GEN_DEGREE + 1],
        };
        let generator = code.build_generator();
        BchCode { generator, ..code }
    }

    #[inline]
    fn mul(&self, a: u8, b: u8) -> u8 {
        if a == 0 || b == 0 {
            0
        } else {
            self.exp[self.log[a as usize] as usize + self.log[b as usize] as usize]
        }
    }

    #[inline]
    fn div(&self, a: u8, b: u8) -> u8 {
        debug_assert!(b != 0);
        if a == 0 {
            0
        } else {
            self.exp
                [self.log[a as usize] as usize + GROUP_ORDER - self.log[b as usize] as usize]
        }
    }

    #[inline]
    fn alpha_pow(&self, e: usize) -> u8 {
        self.exp[e % GROUP_ORDER]
    }

    /// g(x) = lcm of the minimal polynomials of alpha^1 .. alpha^10; with a
    /// prime extension degree every odd-power coset here has size 7, so this
    /// is the product over the cosets of 1, 3, 5, 7, 9.
    fn build_generator(&self) -> [u8; GEN_DEGREE + 1] {
        let mut g: Vec<u8> = vec![1]; // over GF(2), index = degree
        for root in [1usize, 3, 5, 7, 9] {
            let mut coset = Vec::new();
            let mut e = root;
            loop {
                coset.push(e);
                e = (e * 2) % GROUP_ORDER;
                if e == root {
                    break;
                }
            }
            // Minimal polynomial: product of (x + alpha^j) over the coset,
            // computed in GF(128).
            let mut m: Vec<u8> = vec![1];
            for &j in &coset {
                let a = self.alpha_pow(j);
                let mut next = vec![0u8; m.len() + 1];
                for (d, &c) in m.iter().enumerate() {
                    next[d + 1] ^= c;
                    next[d] ^= self.mul(c, a);
                }
                m = next;
            }
            assert!(
                m.iter().all(|&c| c <= 1),
                "minimal polynomial must have binary coefficients"
            );
            // Multiply into g over GF(2).
            let mut next = vec![0u8; g.len() + m.len() - 1];
            for (i, &gi) in g.iter().enumerate() {
                if gi == 0 {
                    continue;
                }
                for (j, &mj) in m.iter().enumerate() {
                    next[i + j] ^= mj;
                }
            }
            g = next;
        }
        assert_eq!(g.len(), GEN_DEGREE + 1, "generator degree must be 35");
        let mut out = [0u8; GEN_DEGREE + 1];
        out.copy_from_slice(&g);
        out
    }

    pub fn generator_coefficients(&self) -> &[u8; GEN_DEGREE + 1] {
        &self.generator
    }

    /// Systematic encode: the 56 payload bits appear verbatim, followed by 35
    /// parity bits and the fixed pad marker.
    pub fn encode(&self, payload: &Payload) -> Codeword {
        // LFSR division of d(x) * x^35 by g(x); reg[0] tracks the x^34
        // coefficient of the running remainder.
        let mut reg = [0u8; GEN_DEGREE];
        for &bit in payload.iter() {
            let fb = (bit & 1) ^ reg[0];
            for i in 0..GEN_DEGREE - 1 {
                reg[i] = reg[i + 1] ^ (fb & self.generator[GEN_DEGREE - 1 - i]);
            }
            reg[GEN_DEGREE - 1] = fb & self.generator[0];
        }
        let mut cw = [0u8; CODEWORD_BITS];
        for (i, &b) in payload.iter().enumerate() {
            cw[i] = b & 1;
        }
        cw[DATA_BITS..DATA_BITS + PARITY_BITS].copy_from_slice(&reg);
        cw[CODE_BITS..].copy_from_slice(&PAD_PATTERN);
        cw
    }

    /// Syndrome computation, Berlekamp-Massey, Chien search over the 91
    /// shortened positions. Corrects at most `t = 5` combined errors (code
    /// bits and pad bits) and reports how many it fixed.
    pub fn decode(
        &self,
        received: &Codeword,
    ) -> std::result::Result<(Payload, usize), BchDecodeFailure> {
        let mut word: Vec<u8> = received[..CODE_BITS].iter().map(|&b| b & 1).collect();
        let pad_mismatches = received[CODE_BITS..]
            .iter()
            .zip(&PAD_PATTERN)
            .filter(|(&r, &p)| (r & 1) != p)
            .count();

        // Syndromes S_j = r(alpha^j), j = 1..=10; bit k holds the x^(90-k)
        // coefficient.
        let mut synd = [0u8; 2 * CORRECT_CAPACITY];
        let mut all_zero = true;
        for (j, s) in synd.iter_mut().enumerate() {
            let mut acc = 0u8;
            for (k, &bit) in word.iter().enumerate() {
                if bit != 0 {
                    acc ^= self.alpha_pow((j + 1) * (CODE_BITS - 1 - k));
                }
            }
            *s = acc;
            all_zero &= acc == 0;
        }

        let corrected = if all_zero {
            0
        } else {
            // Berlekamp-Massey for the error locator Lambda(x).
            let mut lambda = vec![1u8];
            let mut prev = vec![1u8];
            let (mut l, mut m, mut b) = (0usize, 1usize, 1u8);
            for n in 0..2 * CORRECT_CAPACITY {
                let mut d = synd[n];
                for i in 1..=l.min(lambda.len() - 1) {
                    d ^= self.mul(lambda[i], synd[n - i]);
                }
                if d == 0 {
                    m += 1;
                } else if 2 * l <= n {
                    let t = lambda.clone();
                    let coef = self.div(d, b);
                    if lambda.len() < prev.len() + m {
                        lambda.resize(prev.len() + m, 0);
                    }
                    for (i, &pv) in prev.iter().enumerate() {
                        lambda[i + m] ^= self.mul(coef, pv);
                    }
                    l = n + 1 - l;
                    prev = t;
                    b = d;
                    m = 1;
                } else {
                    let coef = self.div(d, b);
                    if lambda.len() < prev.len() + m {
                        lambda.resize(prev.len() + m, 0);
                    }
                    for (i, &pv) in prev.iter().enumerate() {
                        lambda[i + m] ^= self.mul(coef, pv);
                    }
                    m += 1;
                }
            }
            while lambda.last() == Some(&0) {
                lambda.pop();
            }
            let degree = lambda.len() - 1;
            if degree > CORRECT_CAPACITY || degree != l {
                return Err(BchDecodeFailure::LocatorDegree(degree.max(l)));
            }

            // Chien search restricted to the shortened exponents 0..=90.
            let mut flips = Vec::new();
            for e in 0..CODE_BITS {
                // Evaluate Lambda(alpha^{-e}).
                let mut acc = 0u8;
                for (i, &c) in lambda.iter().enumerate() {
                    if c != 0 {
                        let expo = (GROUP_ORDER - (e % GROUP_ORDER)) * i;
                        acc ^= self.mul(c, self.alpha_pow(expo));
                    }
                }
                if acc == 0 {
                    flips.push(CODE_BITS - 1 - e);
                }
            }
            if flips.len() != degree {
                return Err(BchDecodeFailure::RootMismatch {
                    degree,
                    roots: flips.len(),
                });
            }
            for &k in &flips {
                word[k] ^= 1;
            }
            flips.len()
        };

        if corrected + pad_mismatches > CORRECT_CAPACITY {
            return Err(BchDecodeFailure::ExcessErrors {
                corrected,
                pad_mismatches,
            });
        }
        let mut payload = [0u8; DATA_BITS];
        payload.copy_from_slice(&word[..DATA_BITS]);
        Ok((payload, corrected + pad_mismatches))
    }
}

/// Parses the CLI hex convention: 14 hex chars, most significant bit first.
pub fn payload_from_hex(s: &str) -> Result<Payload> {
    let s = s.trim();
    if s.len() != DATA_BITS / 4 {
        return Err(Error::Config(format!(
            "payload must be {} hex chars ({} bits), got {}",
            DATA_BITS / 4,
            DATA_BITS,
            s.len()
        )));
    }
    let mut bits = [0u8; DATA_BITS];
    for (i, ch) in s.chars().enumerate() {
        let v = ch
            .to_digit(16)
            .ok_or_else(|| Error::Config(format!("invalid hex char '{}'", ch)))?;
        for b in 0..4 {
            bits[i * 4 + b] = ((v >> (3 - b)) & 1) as u8;
        }
    }
    Ok(bits)
}

pub fn payload_to_hex(bits: &Payload) -> String {
    let mut out = String::with_capacity(DATA_BITS / 4);
    for nibble in bits.chunks(4) {
        let v = (nibble[0] << 3) | (nibble[1] << 2) | (nibble[2] << 1) | nibble[3];
        out.push(char::from_digit(v as u32, 16).unwrap());
    }
    out
}

/// Bits from '0'/'1' text, any length.
pub fn bits_from_str(s: &str) -> Result<Vec<u8>> {
    s.trim()
        .chars()
        .map(|c| match c {
            '0' => Ok(0u8),
            '1' => Ok(1u8),
            _ => Err(Error::Config(format!("invalid bit char '{}'", c))),
        })
        .collect()
}

pub fn bits_to_str(bits: &[u8]) -> String {
    bits.iter().map(|&b| if b != 0 { '1' } else { '0' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_payload(r: &mut ChaCha8Rng) -> Payload {
        let mut p = [0u8; DATA_BITS];
        for b in &mut p {
            *b = r.gen_range(0..2);
        }
        p
    }

    /// Independent GF(2) polynomial remainder, index = degree.
    fn gf2_mod(poly: &[u8], divisor: &[u8]) -> Vec<u8> {
        let mut rem: Vec<u8> = poly.to_vec();
        let dd = divisor.len() - 1;
        for d in (dd..rem.len()).rev() {
            if rem[d] != 0 {
                for (i, &dv) in divisor.iter().enumerate() {
                    rem[d - dd + i] ^= dv;
                }
            }
        }
        rem.truncate(dd);
        rem
    }

    #[test]
    fn generator_divides_x127_minus_1() {
        let code = BchCode::new();
        let mut poly = vec![0u8; 128];
        poly[0] = 1;
        poly[127] = 1;
        let rem = gf2_mod(&poly, code.generator_coefficients());
        assert!(rem.iter().all(|&b| b == 0), "g(x) must divide x^127 - 1");
    }

    #[test]
    fn all_zero_payload_encodes_to_zero_code_bits() {
        let code = BchCode::new();
        let cw = code.encode(&[0u8; DATA_BITS]);
        assert!(cw[..CODE_BITS].iter().all(|&b| b == 0));
        assert_eq!(&cw[CODE_BITS..], &PAD_PATTERN);
    }

    #[test]
    fn systematic_and_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let code = BchCode::new();
        for _ in 0..20 {
            let p = random_payload(&mut r);
            let cw = code.encode(&p);
            assert_eq!(&cw[..DATA_BITS], &p, "systematic property");
            let (q, corrected) = code.decode(&cw).unwrap();
            assert_eq!(q, p);
            assert_eq!(corrected, 0);
        }
    }

    #[test]
    fn codeword_is_multiple_of_generator() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let code = BchCode::new();
        for _ in 0..20 {
            let p = random_payload(&mut r);
            let cw = code.encode(&p);
            // Bit k is the coefficient of x^(90-k).
            let mut poly = vec![0u8; CODE_BITS];
            for (k, &b) in cw[..CODE_BITS].iter().enumerate() {
                poly[CODE_BITS - 1 - k] = b;
            }
            let rem = gf2_mod(&poly, code.generator_coefficients());
            assert!(
                rem.iter().all(|&b| b == 0),
                "codeword polynomial must be divisible by g(x)"
            );
        }
    }

    #[test]
    fn linearity_on_code_bits() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let code = BchCode::new();
        for _ in 0..20 {
            let a = random_payload(&mut r);
            let b = random_payload(&mut r);
            let mut xor = [0u8; DATA_BITS];
            for i in 0..DATA_BITS {
                xor[i] = a[i] ^ b[i];
            }
            let ca = code.encode(&a);
            let cb = code.encode(&b);
            let cx = code.encode(&xor);
            for i in 0..CODE_BITS {
                assert_eq!(cx[i], ca[i] ^ cb[i]);
            }
        }
    }

    #[test]
    fn corrects_up_to_five_errors_anywhere() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let code = BchCode::new();
        let positions: Vec<usize> = (0..CODEWORD_BITS).collect();
        for w in 1..=CORRECT_CAPACITY {
            for _ in 0..60 {
                let p = random_payload(&mut r);
                let mut cw = code.encode(&p);
                let flips: Vec<usize> = positions.choose_multiple(&mut r, w).copied().collect();
                for &f in &flips {
                    cw[f] ^= 1;
                }
                let (q, corrected) = code
                    .decode(&cw)
                    .unwrap_or_else(|e| panic!("weight {} failed: {}", w, e));
                assert_eq!(q, p, "payload must be recovered exactly");
                assert_eq!(corrected, w, "must report the injected weight");
            }
        }
    }

    #[test]
    fn weight_eight_mostly_detected() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let code = BchCode::new();
        let positions: Vec<usize> = (0..CODEWORD_BITS).collect();
        let trials = 1000;
        let mut bad = 0;
        for _ in 0..trials {
            let p = random_payload(&mut r);
            let mut cw = code.encode(&p);
            for &f in positions.choose_multiple(&mut r, 8) {
                cw[f] ^= 1;
            }
            if let Ok((q, _)) = code.decode(&cw) {
                if q != p {
                    bad += 1; // silent miscorrection
                }
            }
        }
        assert!(
            bad * 100 <= trials,
            "silent miscorrection rate {}/{} above 1%",
            bad,
            trials
        );
    }

    #[test]
    fn hex_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let p = random_payload(&mut r);
            let h = payload_to_hex(&p);
            assert_eq!(h.len(), 14);
            assert_eq!(payload_from_hex(&h).unwrap(), p);
        }
        assert_eq!(
            payload_from_hex("00000000000000").unwrap(),
            [0u8; DATA_BITS]
        );
        let p = payload_from_hex("80000000000001").unwrap();
        assert_eq!(p[0], 1, "most significant bit first");
        assert_eq!(p[55], 1);
        assert!(payload_from_hex("xyz").is_err());
        assert!(payload_from_hex("0000000000000g").is_err());
    }
}
