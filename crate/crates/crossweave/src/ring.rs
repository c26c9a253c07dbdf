//! Exact wraparound arithmetic over `Z_{2^κ}` and the fixed-point codec that
//! bridges real-valued activations to ring elements.
//!
//! κ is 64 by default (one machine word). The `ring128` feature widens the
//! ring to 2^128 at a roughly 2x arithmetic cost.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::{Error, Result};

#[cfg(not(feature = "ring128"))]
mod width {
    pub type RingInt = u64;
    pub type SignedInt = i64;
    pub const KAPPA: u32 = 64;
}

#[cfg(feature = "ring128")]
mod width {
    pub type RingInt = u128;
    pub type SignedInt = i128;
    pub const KAPPA: u32 = 128;
}

pub use width::{RingInt, SignedInt, KAPPA};

/// Bytes in the wire encoding of one ring element (κ/8).
pub const RING_BYTES: usize = (KAPPA as usize) / 8;

/// An integer residue modulo 2^κ.
///
/// All arithmetic wraps silently; no overflow is ever raised. When a signed
/// reading is needed the residue is decoded two's-complement into
/// `[-2^{κ-1}, 2^{κ-1})`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct RingElement(RingInt);

impl RingElement {
    pub const ZERO: RingElement = RingElement(0);
    pub const ONE: RingElement = RingElement(1);

    pub fn new(value: RingInt) -> Self {
        RingElement(value)
    }

    /// The raw residue in `[0, 2^κ)`.
    pub fn raw(self) -> RingInt {
        self.0
    }

    /// Encode a signed integer two's-complement.
    pub fn from_signed(s: SignedInt) -> Self {
        RingElement(s as RingInt)
    }

    /// Decode two's-complement into `[-2^{κ-1}, 2^{κ-1})`.
    pub fn to_signed(self) -> SignedInt {
        self.0 as SignedInt
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn to_le_bytes(self) -> [u8; RING_BYTES] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(bytes: [u8; RING_BYTES]) -> Self {
        RingElement(RingInt::from_le_bytes(bytes))
    }
}

impl fmt::Debug for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ring({})", self.0)
    }
}

impl fmt::Display for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Add for RingElement {
    type Output = RingElement;
    fn add(self, rhs: RingElement) -> RingElement {
        RingElement(self.0.wrapping_add(rhs.0))
    }
}

impl AddAssign for RingElement {
    fn add_assign(&mut self, rhs: RingElement) {
        self.0 = self.0.wrapping_add(rhs.0);
    }
}

impl Sub for RingElement {
    type Output = RingElement;
    fn sub(self, rhs: RingElement) -> RingElement {
        RingElement(self.0.wrapping_sub(rhs.0))
    }
}

impl SubAssign for RingElement {
    fn sub_assign(&mut self, rhs: RingElement) {
        self.0 = self.0.wrapping_sub(rhs.0);
    }
}

impl Mul for RingElement {
    type Output = RingElement;
    fn mul(self, rhs: RingElement) -> RingElement {
        RingElement(self.0.wrapping_mul(rhs.0))
    }
}

impl MulAssign for RingElement {
    fn mul_assign(&mut self, rhs: RingElement) {
        self.0 = self.0.wrapping_mul(rhs.0);
    }
}

impl Neg for RingElement {
    type Output = RingElement;
    fn neg(self) -> RingElement {
        RingElement(self.0.wrapping_neg())
    }
}

impl std::iter::Sum for RingElement {
    fn sum<I: Iterator<Item = RingElement>>(iter: I) -> RingElement {
        iter.fold(RingElement::ZERO, |acc, x| acc + x)
    }
}

/// Round-to-nearest fixed-point codec: `Q(m, p) = ⌊m · 2^p⌉`.
///
/// `precision` is the number of fractional bits. A product of two scale-`2^p`
/// encodings sits at scale `2^{2p}`; [`FixedPointCodec::truncate`] restores
/// scale `2^p`. The constructor enforces `2p + 16 ≤ κ` so one multiplication
/// plus a modest sum cannot wrap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedPointCodec {
    precision: u32,
}

impl FixedPointCodec {
    /// Minimum spare bits above the doubled-precision product.
    pub const HEADROOM_BITS: u32 = 16;

    pub fn new(precision: u32) -> Result<Self> {
        if precision < 1 {
            return Err(Error::Config("fixed-point precision must be >= 1".into()));
        }
        if 2 * precision + Self::HEADROOM_BITS > KAPPA {
            return Err(Error::Config(format!(
                "precision {precision} too large: need 2p + {} <= {KAPPA}",
                Self::HEADROOM_BITS
            )));
        }
        Ok(FixedPointCodec { precision })
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    /// 2^p as a float.
    pub fn scale(&self) -> f64 {
        (1u128 << self.precision) as f64
    }

    /// Exclusive magnitude bound for encodable values: 2^{κ-1-p}.
    pub fn magnitude_bound(&self) -> f64 {
        2f64.powi((KAPPA - 1 - self.precision) as i32)
    }

    /// `⌊m · 2^p⌉`, two's-complement encoded.
    pub fn quantize(&self, m: f64) -> Result<RingElement> {
        self.quantize_ctx(m, "quantize")
    }

    /// Like [`FixedPointCodec::quantize`] with caller-supplied error context.
    pub fn quantize_ctx(&self, m: f64, context: &str) -> Result<RingElement> {
        if !m.is_finite() || m.abs() >= self.magnitude_bound() {
            return Err(Error::OutOfRange {
                value: m,
                bound_log2: (KAPPA - 1 - self.precision) as i64,
                context: context.to_string(),
            });
        }
        let scaled = (m * self.scale()).round();
        Ok(RingElement::from_signed(scaled as SignedInt))
    }

    /// Signed decode divided by 2^p.
    pub fn dequantize(&self, x: RingElement) -> f64 {
        x.to_signed() as f64 / self.scale()
    }

    /// Rescale a doubled-precision product (scale 2^{2p}) back to scale 2^p.
    ///
    /// Deterministic round-to-nearest (ties toward +inf) on the decoded signed
    /// value, saturating at the ring boundary rather than faulting.
    pub fn truncate(&self, x: RingElement) -> RingElement {
        let s = x.to_signed() as i128;
        let divisor = 1i128 << self.precision;
        let div = s.div_euclid(divisor);
        let rem = s.rem_euclid(divisor);
        let q = if rem >= divisor / 2 { div + 1 } else { div };
        let clamped = q.clamp(SignedInt::MIN as i128, SignedInt::MAX as i128);
        RingElement::from_signed(clamped as SignedInt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn codec(p: u32) -> FixedPointCodec {
        FixedPointCodec::new(p).unwrap()
    }

    #[test]
    fn add_basics() {
        assert_eq!(RingElement::new(5) + RingElement::new(7), RingElement::new(12));
        assert_eq!(
            RingElement::new(RingInt::MAX) + RingElement::ONE,
            RingElement::ZERO
        );
    }

    #[test]
    fn additive_inverse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = RingElement::new(rng.random());
            assert_eq!(x + (-x), RingElement::ZERO);
        }
    }

    #[test]
    fn mul_basics() {
        assert_eq!(RingElement::new(3) * RingElement::new(4), RingElement::new(12));
        let a = RingElement::new(0xdeadbeef_12345678u64 as RingInt);
        assert_eq!(a * RingElement::ONE, a);
        // 2^{κ/2} squared wraps to zero.
        let half = RingElement::new((1 as RingInt) << (KAPPA / 2));
        assert_eq!(half * half, RingElement::ZERO);
    }

    #[test]
    fn quantize_examples() {
        let c = codec(8);
        assert_eq!(c.quantize(0.5).unwrap(), RingElement::new(128));
        assert_eq!(c.quantize(-1.0).unwrap(), RingElement::ZERO - RingElement::new(256));
        // Oracle: direct evaluation of ⌊0.1 * 256⌉ = ⌊25.6⌉.
        assert_eq!(c.quantize(0.1).unwrap(), RingElement::new(26));
    }

    #[test]
    fn quantize_rejects_out_of_range() {
        let c = codec(8);
        let err = c.quantize(c.magnitude_bound() * 2.0).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { .. }));
        assert!(c.quantize(f64::NAN).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let c = codec(8);
        assert_eq!(c.dequantize(RingElement::new(128)), 0.5);
        assert_eq!(c.dequantize(RingElement::ZERO), 0.0);
        let rt = c.dequantize(c.quantize(0.3).unwrap());
        assert!((rt - 0.3).abs() <= 2f64.powi(-9));
    }

    #[test]
    fn truncate_examples() {
        let c = codec(8);
        // A product of 1.0 * 1.0 at scale 2^{2p} decodes as 2^16 -> 256.
        let x = RingElement::from_signed(1 << 16);
        assert_eq!(c.truncate(x), RingElement::new(256));
        assert_eq!(c.truncate(RingElement::ZERO), RingElement::ZERO);
        // Negative product: -1.5 * 2^16 -> -1.5 * 2^8 rounded half-up = -384.
        let y = RingElement::from_signed(-3 * (1 << 15));
        assert_eq!(c.truncate(y).to_signed(), -384);
    }

    #[test]
    fn truncated_products_track_float_products() {
        // Oracle: plain f64 multiplication.
        let c = codec(8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let bound = 2f64.powi(-(c.precision() as i32) + 1);
        for _ in 0..1000 {
            let a = rng.random_range(-1.0..1.0);
            let b = rng.random_range(-1.0..1.0);
            let qa = c.quantize(a).unwrap();
            let qb = c.quantize(b).unwrap();
            let got = c.dequantize(c.truncate(qa * qb));
            assert!(
                (got - a * b).abs() <= bound,
                "a={a} b={b} got={got} want={}",
                a * b
            );
        }
    }

    proptest! {
        #[test]
        fn add_associative_commutative(a: u64, b: u64, c: u64) {
            let (a, b, c) = (
                RingElement::new(a as RingInt),
                RingElement::new(b as RingInt),
                RingElement::new(c as RingInt),
            );
            prop_assert_eq!((a + b) + c, a + (b + c));
            prop_assert_eq!(a + b, b + a);
            prop_assert_eq!(a * b, b * a);
        }

        #[test]
        fn quantize_round_trip_bound(m in -1.0f64..1.0) {
            let c = codec(8);
            let rt = c.dequantize(c.quantize(m).unwrap());
            prop_assert!((rt - m).abs() <= 2f64.powi(-9));
        }

        #[test]
        fn quantize_monotone(m1 in -100.0f64..100.0, m2 in -100.0f64..100.0) {
            let c = codec(8);
            let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
            let a = c.quantize(lo).unwrap().to_signed();
            let b = c.quantize(hi).unwrap().to_signed();
            prop_assert!(a <= b);
        }

        #[test]
        fn product_error_bound(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let c = codec(8);
            let got = c.dequantize(c.truncate(c.quantize(a).unwrap() * c.quantize(b).unwrap()));
            prop_assert!((got - a * b).abs() <= 2f64.powi(-7));
        }
    }

    #[test]
    fn codec_validation() {
        let max_p = (KAPPA - FixedPointCodec::HEADROOM_BITS) / 2;
        assert!(FixedPointCodec::new(0).is_err());
        assert!(FixedPointCodec::new(max_p).is_ok());
        assert!(FixedPointCodec::new(max_p + 1).is_err());
    }
}
