//! Scalar abstraction shared by the numeric modules (metrics, geometry, energy).
//!
//! Everything numeric in this crate is written against [`Scalar`] so the same
//! code runs over `f32`, `f64` and exact rationals. Golden tests use the
//! rational instantiation to avoid float drift.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, ToPrimitive};

/// Numeric type usable by the metric, geometry and energy code.
pub trait Scalar:
    Num + Copy + PartialOrd + Debug + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Parse a plain decimal literal such as `11.656` or `-3e-2`.
    ///
    /// Rationals parse exactly; floats round to nearest.
    fn from_decimal(text: &str) -> Option<Self>;

    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    fn from_decimal(text: &str) -> Option<Self> {
        text.trim().parse().ok()
    }
}

impl Scalar for f32 {
    fn from_decimal(text: &str) -> Option<Self> {
        text.trim().parse().ok()
    }
}

impl Scalar for Ratio<i64> {
    fn from_decimal(text: &str) -> Option<Self> {
        parse_decimal_ratio(text)
    }
}

fn parse_decimal_ratio(text: &str) -> Option<Ratio<i64>> {
    let text = text.trim();
    let (mantissa, exponent) = match text.find(['e', 'E']) {
        Some(pos) => (&text[..pos], text[pos + 1..].parse::<i32>().ok()?),
        None => (text, 0),
    };
    let (negative, mantissa) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((i, f)) => (i, f),
        None => (mantissa, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let mut numer: i64 = if digits.is_empty() { 0 } else { digits.parse().ok()? };
    let mut scale = exponent - frac_part.len() as i32;
    let mut denom: i64 = 1;
    while scale > 0 {
        numer = numer.checked_mul(10)?;
        scale -= 1;
    }
    while scale < 0 {
        denom = denom.checked_mul(10)?;
        scale += 1;
    }
    if negative {
        numer = -numer;
    }
    Some(Ratio::new(numer, denom))
}
