//! Scalar abstraction so the whole pipeline runs at f32 or f64.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the library is generic over.
///
/// Adds bit-level encoding on top of `num_traits::Float` so checkpoints can
/// round-trip parameters exactly.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Width of the underlying representation in bits (32 or 64).
    const BITS: u32;

    fn to_bits_u64(self) -> u64;
    fn from_bits_u64(bits: u64) -> Self;

    /// Fixed-width lowercase hex encoding of the raw bits.
    fn encode_bits(self) -> String {
        let width = (Self::BITS / 4) as usize;
        format!("{:0width$x}", self.to_bits_u64(), width = width)
    }

    fn decode_bits(text: &str) -> Option<Self> {
        let bits = u64::from_str_radix(text, 16).ok()?;
        if Self::BITS == 32 && bits > u64::from(u32::MAX) {
            return None;
        }
        Some(Self::from_bits_u64(bits))
    }

    /// Parses the shortest-round-trip decimal form produced by `{:?}`.
    fn parse_decimal(text: &str) -> Option<Self>;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    fn to_bits_u64(self) -> u64 {
        u64::from(self.to_bits())
    }

    fn from_bits_u64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }

    fn parse_decimal(text: &str) -> Option<Self> {
        text.parse().ok()
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }

    fn from_bits_u64(bits: u64) -> Self {
        f64::from_bits(bits)
    }

    fn parse_decimal(text: &str) -> Option<Self> {
        text.parse().ok()
    }
}

/// Converts an f64 literal into the working scalar type.
pub fn fp<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

/// Log of the sum of exponentials, max-shifted, with pairwise accumulation so
/// the result is insensitive to how callers batch the terms.
pub fn log_sum_exp<T: Scalar>(terms: &[T]) -> T {
    let m = terms
        .iter()
        .fold(T::neg_infinity(), |acc, &x| if x > acc { x } else { acc });
    if m == T::neg_infinity() {
        return T::neg_infinity();
    }
    let shifted: Vec<T> = terms.iter().map(|&x| (x - m).exp()).collect();
    m + pairwise_sum(&shifted).ln()
}

/// Pairwise (tree) summation; associativity error stays near machine epsilon.
pub fn pairwise_sum<T: Scalar>(xs: &[T]) -> T {
    match xs.len() {
        0 => T::zero(),
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}
