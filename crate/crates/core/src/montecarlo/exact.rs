//! Exact summation of doubles.
//!
//! Every finite double is an integer multiple of `2^-1074`, so a running sum
//! kept as a big integer in those units is exact. Exact sums make merging of
//! partial accumulators associative and commutative bit for bit, which is
//! what lets any number of workers reproduce the same estimate.

use num_bigint::{BigInt, Sign};
use num_traits::{ToPrimitive, Zero};

/// Binary exponent of the unit in the last place of the smallest subnormal.
pub const UNIT_EXP: u64 = 1074;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExactSum(BigInt);

impl ExactSum {
    pub fn new() -> Self {
        Self(BigInt::zero())
    }

    /// Adds a finite double exactly. Non-finite input is a caller bug.
    pub fn add(&mut self, x: f64) {
        debug_assert!(x.is_finite());
        if x != 0.0 {
            self.0 += to_units(x);
        }
    }

    pub fn merge(&mut self, other: &ExactSum) {
        self.0 += &other.0;
    }

    /// The sum in units of `2^-1074`.
    pub fn units(&self) -> &BigInt {
        &self.0
    }

    pub fn from_units(units: BigInt) -> Self {
        Self(units)
    }

    pub fn to_f64(&self) -> f64 {
        scaled_to_f64(&self.0, UNIT_EXP)
    }
}

/// `x` as an integer count of `2^-1074`.
fn to_units(x: f64) -> BigInt {
    let bits = x.to_bits();
    let negative = bits >> 63 == 1;
    let exp = ((bits >> 52) & 0x7ff) as u64;
    let frac = bits & ((1 << 52) - 1);
    // x = mantissa * 2^(shift - 1074)
    let (mantissa, shift) = if exp == 0 { (frac, 0) } else { (frac | (1 << 52), exp - 1) };
    let v = BigInt::from(mantissa) << shift;
    if negative {
        -v
    } else {
        v
    }
}

/// `x * 2^e` without spurious intermediate overflow or underflow.
fn ldexp(mut x: f64, mut e: i64) -> f64 {
    let step = |k: i64| f64::from_bits(((1023 + k) as u64) << 52);
    while e > 1000 {
        x *= step(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= step(-1000);
        e += 1000;
    }
    x * step(e)
}

/// `n * 2^-scale_exp` rounded to the nearest double.
pub fn scaled_to_f64(n: &BigInt, scale_exp: u64) -> f64 {
    if n.is_zero() {
        return 0.0;
    }
    let (sign, mag) = n.clone().into_parts();
    let bits = mag.bits();
    let (top, shift) = if bits <= 64 {
        (mag.to_u64().expect("fits in 64 bits"), 0)
    } else {
        let shift = bits - 64;
        let top = (&mag >> shift).to_u64().expect("fits in 64 bits");
        // Sticky bit keeps round-to-nearest correct after truncation.
        let sticky = mag.trailing_zeros().is_some_and(|tz| tz < shift);
        (top | u64::from(sticky), shift)
    };
    let v = ldexp(top as f64, shift as i64 - scale_exp as i64);
    if sign == Sign::Minus {
        -v
    } else {
        v
    }
}
