//! Prime-field arithmetic and centered fixed-point encoding.
//!
//! Every share, mask and aggregate in the protocol lives in `F_q` for a
//! runtime-chosen odd prime `q < 2^63`. Real vectors enter the field through a
//! [`FixedPointCodec`]: `x -> round(x * 2^f) mod q`, and leave it through the
//! centered representative in `[-q/2, q/2)`. As long as the true integer value
//! of a protocol sum stays inside that window (see [`check_aggregate_bound`]),
//! decoding the field sum recovers the real sum up to rounding.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `2^61 - 1`, the default modulus.
pub const MERSENNE_61: u64 = (1 << 61) - 1;

/// Default fractional bits for key shares and keys.
pub const F_SHARE: u32 = 20;
/// Default fractional bits for the public scale integer.
pub const G_SCALE: u32 = 16;
/// Default fractional bits for model submissions (`F_SHARE + G_SCALE`).
pub const F_MODEL: u32 = F_SHARE + G_SCALE;
/// Coordinates of sampled keys are clipped to this magnitude.
pub const TAU_BOUND: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("modulus {0} is not an odd prime below 2^63")]
    InvalidModulus(u64),
    #[error("modulus mismatch: {left} vs {right}")]
    ModulusMismatch { left: u64, right: u64 },
    #[error("inverse of zero")]
    InverseOfZero,
    #[error("coordinate {index} = {value} is outside the encodable range (|x| < {limit})")]
    EncodingOverflow { index: usize, value: f64, limit: f64 },
    #[error("vector length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("element {value} is not reduced modulo {modulus}")]
    Unreduced { value: u64, modulus: u64 },
    #[error(
        "aggregate bound exceeded ({0}); reduce the fractional bits or the model dimension"
    )]
    BoundExceeded(BoundReport),
    #[error("malformed field vector encoding: {0}")]
    Malformed(String),
}

/// Modulus of the field. Always an odd prime in `[3, 2^63)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct FieldParams {
    modulus: u64,
}

impl TryFrom<u64> for FieldParams {
    type Error = FieldError;

    fn try_from(q: u64) -> Result<Self, Self::Error> {
        Self::new(q)
    }
}

impl From<FieldParams> for u64 {
    fn from(p: FieldParams) -> u64 {
        p.modulus
    }
}

impl Default for FieldParams {
    fn default() -> Self {
        Self::mersenne61()
    }
}

impl FieldParams {
    pub fn new(q: u64) -> Result<Self, FieldError> {
        if q < 3 || q >= 1 << 63 || !is_prime(q) {
            return Err(FieldError::InvalidModulus(q));
        }
        Ok(Self { modulus: q })
    }

    pub const fn mersenne61() -> Self {
        Self {
            modulus: MERSENNE_61,
        }
    }

    #[inline]
    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    /// Reduces an arbitrary integer into the field.
    #[inline]
    pub fn elem(&self, v: u64) -> FieldElem {
        FieldElem {
            value: v % self.modulus,
            modulus: self.modulus,
        }
    }

    /// Maps a signed integer to its residue.
    #[inline]
    pub fn from_i64(&self, v: i64) -> FieldElem {
        let q = self.modulus as i128;
        let r = (v as i128).rem_euclid(q) as u64;
        FieldElem {
            value: r,
            modulus: self.modulus,
        }
    }

    #[inline]
    pub fn zero(&self) -> FieldElem {
        self.elem(0)
    }

    #[inline]
    pub fn one(&self) -> FieldElem {
        self.elem(1)
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        if s >= self.modulus {
            s - self.modulus
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            a + self.modulus - b
        }
    }

    #[inline]
    pub fn neg(&self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.modulus - a
        }
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        let p = (a as u128) * (b as u128);
        if self.modulus == MERSENNE_61 {
            // p < 2^122, so one fold leaves a value below 2^62.
            let folded = ((p as u64) & MERSENNE_61) + ((p >> 61) as u64);
            if folded >= MERSENNE_61 {
                folded - MERSENNE_61
            } else {
                folded
            }
        } else {
            (p % self.modulus as u128) as u64
        }
    }

    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1 % self.modulus;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Inverse via Fermat's little theorem.
    pub fn inv(&self, a: u64) -> Result<u64, FieldError> {
        let a = a % self.modulus;
        if a == 0 {
            return Err(FieldError::InverseOfZero);
        }
        Ok(self.pow(a, self.modulus - 2))
    }

    /// Centered representative of `v` in `[-(q-1)/2, (q-1)/2]`.
    #[inline]
    pub fn centered(&self, v: u64) -> i64 {
        if v > self.modulus / 2 {
            v as i64 - self.modulus as i64
        } else {
            v as i64
        }
    }
}

/// A single element of `F_q`, tagged with its modulus.
///
/// Arithmetic operators panic on a modulus mismatch; use the `try_*` methods
/// where operands may come from different configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FieldElem {
    value: u64,
    modulus: u64,
}

impl FieldElem {
    #[inline]
    pub fn value(&self) -> u64 {
        self.value
    }

    #[inline]
    pub fn params(&self) -> FieldParams {
        FieldParams {
            modulus: self.modulus,
        }
    }

    fn same_field(&self, other: &FieldElem) -> Result<FieldParams, FieldError> {
        if self.modulus != other.modulus {
            return Err(FieldError::ModulusMismatch {
                left: self.modulus,
                right: other.modulus,
            });
        }
        Ok(self.params())
    }

    pub fn try_add(self, other: FieldElem) -> Result<FieldElem, FieldError> {
        let p = self.same_field(&other)?;
        Ok(FieldElem {
            value: p.add(self.value, other.value),
            modulus: self.modulus,
        })
    }

    pub fn try_sub(self, other: FieldElem) -> Result<FieldElem, FieldError> {
        let p = self.same_field(&other)?;
        Ok(FieldElem {
            value: p.sub(self.value, other.value),
            modulus: self.modulus,
        })
    }

    pub fn try_mul(self, other: FieldElem) -> Result<FieldElem, FieldError> {
        let p = self.same_field(&other)?;
        Ok(FieldElem {
            value: p.mul(self.value, other.value),
            modulus: self.modulus,
        })
    }

    pub fn inv(self) -> Result<FieldElem, FieldError> {
        Ok(FieldElem {
            value: self.params().inv(self.value)?,
            modulus: self.modulus,
        })
    }
}

impl fmt::Display for FieldElem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

impl Add for FieldElem {
    type Output = FieldElem;
    fn add(self, rhs: FieldElem) -> FieldElem {
        self.try_add(rhs).expect("field operands from different moduli")
    }
}

impl Sub for FieldElem {
    type Output = FieldElem;
    fn sub(self, rhs: FieldElem) -> FieldElem {
        self.try_sub(rhs).expect("field operands from different moduli")
    }
}

impl Mul for FieldElem {
    type Output = FieldElem;
    fn mul(self, rhs: FieldElem) -> FieldElem {
        self.try_mul(rhs).expect("field operands from different moduli")
    }
}

impl Neg for FieldElem {
    type Output = FieldElem;
    fn neg(self) -> FieldElem {
        FieldElem {
            value: self.params().neg(self.value),
            modulus: self.modulus,
        }
    }
}

/// A fixed-length vector over `F_q`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FieldVector {
    elems: Vec<u64>,
    params: FieldParams,
}

impl FieldVector {
    pub fn zeros(params: FieldParams, d: usize) -> Self {
        Self {
            elems: vec![0; d],
            params,
        }
    }

    /// Wraps raw words, rejecting any value that is not reduced.
    pub fn from_raw(params: FieldParams, elems: Vec<u64>) -> Result<Self, FieldError> {
        if let Some(&value) = elems.iter().find(|&&v| v >= params.modulus) {
            return Err(FieldError::Unreduced {
                value,
                modulus: params.modulus,
            });
        }
        Ok(Self { elems, params })
    }

    pub fn from_elems(params: FieldParams, elems: &[FieldElem]) -> Result<Self, FieldError> {
        let mut out = Vec::with_capacity(elems.len());
        for e in elems {
            if e.modulus != params.modulus {
                return Err(FieldError::ModulusMismatch {
                    left: params.modulus,
                    right: e.modulus,
                });
            }
            out.push(e.value);
        }
        Ok(Self { elems: out, params })
    }

    #[inline]
    pub fn params(&self) -> FieldParams {
        self.params
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.elems.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[u64] {
        &self.elems
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [u64] {
        &mut self.elems
    }

    pub fn get(&self, i: usize) -> Option<FieldElem> {
        self.elems.get(i).map(|&value| FieldElem {
            value,
            modulus: self.params.modulus,
        })
    }

    fn compatible(&self, other: &FieldVector) -> Result<(), FieldError> {
        if self.params != other.params {
            return Err(FieldError::ModulusMismatch {
                left: self.params.modulus,
                right: other.params.modulus,
            });
        }
        if self.len() != other.len() {
            return Err(FieldError::LengthMismatch {
                expected: self.len(),
                found: other.len(),
            });
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &FieldVector) -> Result<(), FieldError> {
        self.compatible(other)?;
        let p = self.params;
        for (a, &b) in self.elems.iter_mut().zip(&other.elems) {
            *a = p.add(*a, b);
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &FieldVector) -> Result<(), FieldError> {
        self.compatible(other)?;
        let p = self.params;
        for (a, &b) in self.elems.iter_mut().zip(&other.elems) {
            *a = p.sub(*a, b);
        }
        Ok(())
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: FieldElem, other: &FieldVector) -> Result<(), FieldError> {
        self.compatible(other)?;
        if c.modulus != self.params.modulus {
            return Err(FieldError::ModulusMismatch {
                left: self.params.modulus,
                right: c.modulus,
            });
        }
        let p = self.params;
        for (a, &b) in self.elems.iter_mut().zip(&other.elems) {
            *a = p.add(*a, p.mul(c.value, b));
        }
        Ok(())
    }

    pub fn scaled(&self, c: FieldElem) -> Result<FieldVector, FieldError> {
        if c.modulus != self.params.modulus {
            return Err(FieldError::ModulusMismatch {
                left: self.params.modulus,
                right: c.modulus,
            });
        }
        let p = self.params;
        Ok(FieldVector {
            elems: self.elems.iter().map(|&v| p.mul(c.value, v)).collect(),
            params: p,
        })
    }

    /// Multiplication by a public signed integer.
    pub fn scaled_by_int(&self, s: i64) -> FieldVector {
        let c = self.params.from_i64(s);
        self.scaled(c).expect("same modulus by construction")
    }

    /// Inner product over the field.
    pub fn dot(&self, other: &FieldVector) -> Result<FieldElem, FieldError> {
        self.compatible(other)?;
        let p = self.params;
        let acc = self
            .elems
            .iter()
            .zip(&other.elems)
            .fold(0u64, |acc, (&a, &b)| p.add(acc, p.mul(a, b)));
        Ok(p.elem(acc))
    }

    /// Length-prefixed little-endian serialization: `d` as u64, then one u64 per element.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.len() + 1));
        self.write_bytes(&mut out);
        out
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.elems {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Inverse of [`to_bytes`](Self::to_bytes). Returns the vector and the number of bytes consumed.
    pub fn from_bytes(params: FieldParams, bytes: &[u8]) -> Result<(Self, usize), FieldError> {
        let word = |i: usize| -> Result<u64, FieldError> {
            bytes
                .get(8 * i..8 * i + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| FieldError::Malformed(format!("truncated at word {i}")))
        };
        let d = usize::try_from(word(0)?)
            .map_err(|_| FieldError::Malformed("length does not fit in usize".into()))?;
        if bytes.len() < 8 * (d + 1) {
            return Err(FieldError::Malformed(format!(
                "declared length {d} needs {} bytes, found {}",
                8 * (d + 1),
                bytes.len()
            )));
        }
        let elems = (1..=d).map(word).collect::<Result<Vec<_>, _>>()?;
        Ok((Self::from_raw(params, elems)?, 8 * (d + 1)))
    }
}

/// Centered fixed-point codec with `frac_bits` fractional bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    pub frac_bits: u32,
    pub params: FieldParams,
}

impl FixedPointCodec {
    pub fn new(params: FieldParams, frac_bits: u32) -> Self {
        Self { frac_bits, params }
    }

    #[inline]
    fn unit(&self) -> f64 {
        (self.frac_bits as f64).exp2()
    }

    /// Largest magnitude that encodes without wrapping: `q / 2^(f+1)`.
    pub fn range_limit(&self) -> f64 {
        self.params.modulus as f64 / (self.frac_bits as f64 + 1.0).exp2()
    }

    /// `round(x * 2^f)` as a signed integer, half away from zero.
    pub fn quantize(&self, x: f64) -> Option<i64> {
        let v = (x * self.unit()).round();
        let half = (self.params.modulus / 2) as f64;
        // `half` is not exactly representable for large q; the strict
        // comparison plus the i64 range keeps wraparound impossible.
        if !v.is_finite() || v.abs() >= half {
            return None;
        }
        let v = v as i64;
        if v.unsigned_abs() > self.params.modulus / 2 {
            return None;
        }
        Some(v)
    }

    pub fn encode_scalar(&self, x: f64) -> Result<FieldElem, FieldError> {
        self.quantize(x)
            .map(|v| self.params.from_i64(v))
            .ok_or(FieldError::EncodingOverflow {
                index: 0,
                value: x,
                limit: self.range_limit(),
            })
    }

    pub fn encode(&self, x: &[f64]) -> Result<FieldVector, FieldError> {
        let q = self.params.modulus;
        let mut elems = Vec::with_capacity(x.len());
        for (index, &xi) in x.iter().enumerate() {
            let v = self.quantize(xi).ok_or(FieldError::EncodingOverflow {
                index,
                value: xi,
                limit: self.range_limit(),
            })?;
            elems.push(if v < 0 { (q as i64 + v) as u64 } else { v as u64 });
        }
        Ok(FieldVector {
            elems,
            params: self.params,
        })
    }

    pub fn decode_scalar(&self, v: FieldElem) -> f64 {
        self.params.centered(v.value) as f64 / self.unit()
    }

    pub fn decode_centered(&self, v: &FieldVector) -> Vec<f64> {
        let unit = self.unit();
        v.elems
            .iter()
            .map(|&e| self.params.centered(e) as f64 / unit)
            .collect()
    }
}

/// Fractional-bit assignment for every protocol role, plus the key magnitude bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    pub modulus: FieldParams,
    pub f_share: u32,
    pub g_scale: u32,
    pub f_model: u32,
    pub tau_bound: f64,
}

impl Default for Precision {
    fn default() -> Self {
        Self {
            modulus: FieldParams::mersenne61(),
            f_share: F_SHARE,
            g_scale: G_SCALE,
            f_model: F_MODEL,
            tau_bound: TAU_BOUND,
        }
    }
}

impl Precision {
    pub fn share_codec(&self) -> FixedPointCodec {
        FixedPointCodec::new(self.modulus, self.f_share)
    }

    pub fn scale_codec(&self) -> FixedPointCodec {
        FixedPointCodec::new(self.modulus, self.g_scale)
    }

    pub fn model_codec(&self) -> FixedPointCodec {
        FixedPointCodec::new(self.modulus, self.f_model)
    }

    /// Codec for decoding `<enc_share(theta), enc_share(tau)>`.
    pub fn inner_codec(&self) -> FixedPointCodec {
        FixedPointCodec::new(self.modulus, 2 * self.f_share)
    }
}

/// Worst-case centered magnitudes of the two protocol aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `K * theta_max * 2^f_model + scale_max * 2^g * tau_bound * 2^f_share`.
    pub model_sum: f64,
    /// `d * theta_max * tau_bound * 2^(2 f_share)`.
    pub verify_inner: f64,
    /// `q / 2`.
    pub limit: f64,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.model_sum < self.limit && self.verify_inner < self.limit
    }

    /// Fraction of the centered window used by the larger aggregate.
    pub fn utilization(&self) -> f64 {
        self.model_sum.max(self.verify_inner) / self.limit
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "model sum {:.3e}, verification inner product {:.3e}, limit {:.3e}",
            self.model_sum, self.verify_inner, self.limit
        )
    }
}

/// Checks that neither protocol aggregate can leave the centered window.
pub fn check_aggregate_bound(
    d: usize,
    k: usize,
    theta_max: f64,
    scale_max: f64,
    precision: &Precision,
) -> Result<BoundReport, FieldError> {
    let p2 = |bits: u32| (bits as f64).exp2();
    let report = BoundReport {
        model_sum: k as f64 * theta_max * p2(precision.f_model)
            + scale_max * p2(precision.g_scale) * precision.tau_bound * p2(precision.f_share),
        verify_inner: d as f64 * theta_max * precision.tau_bound * p2(2 * precision.f_share),
        limit: precision.modulus.modulus() as f64 / 2.0,
    };
    if report.passed() {
        Ok(report)
    } else {
        Err(FieldError::BoundExceeded(report))
    }
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for &p in &BASES {
        if n % p == 0 {
            return n == p;
        }
    }
    let mulmod = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let powmod = |mut b: u64, mut e: u64| {
        let mut acc = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                acc = mulmod(acc, b);
            }
            b = mulmod(b, b);
            e >>= 1;
        }
        acc
    };
    let s = (n - 1).trailing_zeros();
    let d = (n - 1) >> s;
    'witness: for &a in &BASES {
        let mut x = powmod(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mulmod(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f7() -> FieldParams {
        FieldParams::new(7).unwrap()
    }

    #[test]
    fn add_wraps_and_has_identity() {
        let p = FieldParams::mersenne61();
        assert_eq!((p.elem(MERSENNE_61 - 1) + p.one()).value(), 0);
        assert_eq!((p.zero() + p.elem(5)).value(), 5);
        assert_eq!((f7().elem(5) + f7().elem(4)).value(), 2);
    }

    #[test]
    fn mul_and_inverse_small_field() {
        let p = f7();
        assert_eq!((p.elem(4) * p.elem(5)).value(), 6);
        assert_eq!(p.elem(3).inv().unwrap().value(), 5);
        assert_eq!(p.elem(0).inv(), Err(FieldError::InverseOfZero));
        let big = FieldParams::mersenne61();
        let a = big.elem(123_456_789_012);
        assert_eq!(a * big.one(), a);
    }

    #[test]
    fn modulus_mismatch_is_an_error() {
        let a = f7().elem(1);
        let b = FieldParams::new(11).unwrap().elem(1);
        assert!(matches!(
            a.try_add(b),
            Err(FieldError::ModulusMismatch { left: 7, right: 11 })
        ));
    }

    #[test]
    fn rejects_composite_and_tiny_moduli() {
        for q in [0, 1, 2, 4, 9, 15, 561, (1u64 << 61) + 1] {
            assert!(FieldParams::new(q).is_err(), "{q}");
        }
        for q in [3, 7, 1_000_000_007, MERSENNE_61] {
            assert!(FieldParams::new(q).is_ok(), "{q}");
        }
    }

    #[test]
    fn mersenne_fast_path_matches_generic_reduction() {
        let p = FieldParams::mersenne61();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let a = rng.random_range(0..MERSENNE_61);
            let b = rng.random_range(0..MERSENNE_61);
            let expect = ((a as u128 * b as u128) % MERSENNE_61 as u128) as u64;
            assert_eq!(p.mul(a, b), expect);
        }
        assert_eq!(p.mul(MERSENNE_61 - 1, MERSENNE_61 - 1), 1);
    }

    #[test]
    fn encode_examples() {
        let codec = FixedPointCodec::new(FieldParams::mersenne61(), 20);
        let v = codec.encode(&[0.5, -1.0, 0.0]).unwrap();
        assert_eq!(v.as_slice(), &[524_288, MERSENNE_61 - 1_048_576, 0]);
        assert_eq!(codec.decode_centered(&v), vec![0.5, -1.0, 0.0]);
    }

    #[test]
    fn encode_overflow_names_the_index() {
        let codec = FixedPointCodec::new(FieldParams::mersenne61(), 20);
        let limit = codec.range_limit();
        let err = codec.encode(&[0.0, 1.0, limit * 1.01]).unwrap_err();
        assert!(matches!(err, FieldError::EncodingOverflow { index: 2, .. }));
        assert!(codec.encode(&[f64::NAN]).is_err());
        assert!(codec.encode(&[limit * 0.99]).is_ok());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let codec = FixedPointCodec::new(FieldParams::mersenne61(), 1);
        assert_eq!(codec.quantize(0.25), Some(1));
        assert_eq!(codec.quantize(-0.25), Some(-1));
        assert_eq!(codec.quantize(0.75), Some(2));
    }

    #[test]
    fn roundtrip_error_within_half_ulp() {
        let codec = FixedPointCodec::new(FieldParams::mersenne61(), 20);
        let bound = (-21f64).exp2();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.random_range(-1e3..1e3)).collect();
        let back = codec.decode_centered(&codec.encode(&xs).unwrap());
        for (x, y) in xs.iter().zip(&back) {
            assert!((x - y).abs() <= bound, "{x} -> {y}");
        }
        let x = 0.123456;
        let y = codec.decode_centered(&codec.encode(&[x]).unwrap())[0];
        assert!((x - y).abs() <= bound);
    }

    #[test]
    fn bound_check_examples() {
        let prec = Precision::default();
        let ok = check_aggregate_bound(5000, 32, 10.0, 10.0, &prec).unwrap();
        assert!(ok.passed());
        assert!(check_aggregate_bound(1_000_000_000, 32, 10.0, 10.0, &prec).is_err());
        let zero = check_aggregate_bound(1, 1, 0.0, 0.0, &prec).unwrap();
        assert_eq!(zero.utilization(), 0.0);
    }

    #[test]
    fn serialization_layout() {
        let p = f7();
        let v = FieldVector::from_raw(p, vec![1, 6]).unwrap();
        let bytes = v.to_bytes();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..], &6u64.to_le_bytes());
        let (back, used) = FieldVector::from_bytes(p, &bytes).unwrap();
        assert_eq!((back, used), (v, 24));
        assert!(FieldVector::from_bytes(p, &bytes[..20]).is_err());
        assert!(FieldVector::from_raw(p, vec![7]).is_err());
    }

    proptest! {
        #[test]
        fn field_sum_decodes_to_real_sum(
            xs in proptest::collection::vec(proptest::collection::vec(-1e4f64..1e4, 8), 1..40)
        ) {
            let codec = FixedPointCodec::new(FieldParams::mersenne61(), F_SHARE);
            let k = xs.len();
            let mut acc = FieldVector::zeros(codec.params, 8);
            for x in &xs {
                acc.add_assign(&codec.encode(x).unwrap()).unwrap();
            }
            let decoded = codec.decode_centered(&acc);
            let tol = k as f64 * (-(F_SHARE as f64) - 1.0).exp2() + 1e-9;
            for j in 0..8 {
                let real: f64 = xs.iter().map(|x| x[j]).sum();
                prop_assert!((decoded[j] - real).abs() <= tol);
            }
        }

        #[test]
        fn public_integer_scaling_commutes(x in -1e3f64..1e3, s in -5000i64..5000) {
            let codec = FixedPointCodec::new(FieldParams::mersenne61(), F_SHARE);
            let v = codec.encode(&[x]).unwrap().scaled_by_int(s);
            let y = codec.decode_centered(&v)[0];
            let tol = s.unsigned_abs() as f64 * (-(F_SHARE as f64) - 1.0).exp2() + 1e-9;
            prop_assert!((y - s as f64 * x).abs() <= tol);
        }

        #[test]
        fn inverse_property(a in 1u64..MERSENNE_61) {
            let p = FieldParams::mersenne61();
            prop_assert_eq!(p.mul(a, p.inv(a).unwrap()), 1);
        }
    }
}
