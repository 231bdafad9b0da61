//! k-precision fixed-point values.
//!
//! A value at precision `k` is stored as an integer mantissa `m` and denotes
//! exactly `m / 2^k`. Every quantity that crosses a flow layer boundary lives
//! on this grid, so equality and Euclidean division are exact.

use crate::error::{Error, Result};

/// Mantissas must stay strictly below this magnitude.
pub const MANTISSA_LIMIT: i64 = 1 << 62;

/// Highest precision accepted by model loading and codec configuration.
pub const MAX_PRECISION: u32 = 24;

/// Round half away from zero. This is the single tie-break rule used by every
/// quantization step in the crate, on both the encode and the decode side.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// `2^k` as an `f64`. Exact for every precision the crate accepts.
#[inline]
pub fn scale(k: u32) -> f64 {
    libm::ldexp(1.0, k as i32)
}

/// Round a real to the `k`-precision grid and return the mantissa.
pub fn quantize_mantissa(x: f64, k: u32) -> Result<i64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("cannot quantize non-finite value {x}")));
    }
    let scaled = round_half_away(libm::ldexp(x, k as i32));
    if scaled.abs() >= MANTISSA_LIMIT as f64 {
        return Err(Error::Overflow(format!("quantize({x}, {k}) exceeds the 2^62 mantissa guard")));
    }
    Ok(scaled as i64)
}

#[inline]
pub(crate) fn check_mantissa(m: i64) -> Result<i64> {
    if m.unsigned_abs() >= MANTISSA_LIMIT as u64 {
        Err(Error::Overflow(format!("mantissa {m} exceeds the 2^62 guard")))
    } else {
        Ok(m)
    }
}

#[inline]
pub(crate) fn checked_add(a: i64, b: i64) -> Result<i64> {
    a.checked_add(b).ok_or_else(|| Error::Overflow(format!("{a} + {b}"))).and_then(check_mantissa)
}

/// Exact value of a mantissa at precision `k`.
#[inline]
pub fn mantissa_to_real(m: i64, k: u32) -> f64 {
    libm::ldexp(m as f64, -(k as i32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantScalar {
    mantissa: i64,
    precision: u32,
}

impl QuantScalar {
    pub fn new(mantissa: i64, precision: u32) -> Result<Self> {
        Ok(Self { mantissa: check_mantissa(mantissa)?, precision })
    }

    pub fn mantissa(&self) -> i64 {
        self.mantissa
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    /// Exact as long as the mantissa fits in 53 bits.
    pub fn to_real(&self) -> f64 {
        mantissa_to_real(self.mantissa, self.precision)
    }
}

/// `round(2^k * x) / 2^k`, ties away from zero.
pub fn quantize(x: f64, k: u32) -> Result<QuantScalar> {
    Ok(QuantScalar { mantissa: quantize_mantissa(x, k)?, precision: k })
}

/// Split `x` into the largest multiple of `2^-h` not exceeding it and the
/// non-negative remainder (kept at the precision of `x`).
///
/// `coarse + remainder == x` holds exactly.
pub fn floor_to_precision(x: QuantScalar, h: u32) -> Result<(QuantScalar, QuantScalar)> {
    let k = x.precision;
    if h > k {
        return Err(Error::Precondition(format!("floor_to_precision needs h <= k, got h={h}, k={k}")));
    }
    let shift = k - h;
    let coarse = x.mantissa >> shift;
    let remainder = x.mantissa - (coarse << shift);
    Ok((QuantScalar { mantissa: coarse, precision: h }, QuantScalar { mantissa: remainder, precision: k }))
}

/// A vector of mantissas sharing one precision.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantVector {
    mantissas: Vec<i64>,
    precision: u32,
}

impl QuantVector {
    pub fn new(mantissas: Vec<i64>, precision: u32) -> Result<Self> {
        if mantissas.is_empty() {
            return Err(Error::Precondition("QuantVector must have at least one element".into()));
        }
        for &m in &mantissas {
            check_mantissa(m)?;
        }
        Ok(Self { mantissas, precision })
    }

    /// Internal constructor for values already known to respect the guard.
    pub(crate) fn from_raw(mantissas: Vec<i64>, precision: u32) -> Self {
        debug_assert!(mantissas.iter().all(|m| m.unsigned_abs() < MANTISSA_LIMIT as u64));
        Self { mantissas, precision }
    }

    pub fn from_reals(xs: &[f64], k: u32) -> Result<Self> {
        let mantissas = xs.iter().map(|&x| quantize_mantissa(x, k)).collect::<Result<Vec<_>>>()?;
        Self::new(mantissas, k)
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.mantissas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mantissas.is_empty()
    }

    pub fn mantissas(&self) -> &[i64] {
        &self.mantissas
    }

    pub fn into_mantissas(self) -> Vec<i64> {
        self.mantissas
    }

    pub fn get(&self, i: usize) -> QuantScalar {
        QuantScalar { mantissa: self.mantissas[i], precision: self.precision }
    }

    pub fn to_reals(&self) -> Vec<f64> {
        self.mantissas.iter().map(|&m| mantissa_to_real(m, self.precision)).collect()
    }

    /// Bin volume `2^(-k d)` expressed as its base-2 logarithm.
    pub fn log2_bin_volume(&self) -> f64 {
        -(self.precision as f64) * self.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.3, 2).unwrap().mantissa(), 1);
        assert_eq!(quantize(0.25, 2).unwrap().mantissa(), 1);
        // 0.25 * 2 = 0.5 is a tie and rounds away from zero.
        assert_eq!(quantize(0.25, 1).unwrap().mantissa(), 1);
        assert_eq!(quantize(-0.25, 1).unwrap().mantissa(), -1);
    }

    #[test]
    fn quantize_rejects_overflow_and_nan() {
        assert!(matches!(quantize(1e30, 10), Err(Error::Overflow(_))));
        assert!(matches!(quantize(f64::NAN, 10), Err(Error::Domain(_))));
        assert!(matches!(quantize(f64::INFINITY, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn to_real_examples() {
        assert_eq!(QuantScalar::new(1, 2).unwrap().to_real(), 0.25);
        assert_eq!(QuantScalar::new(-3, 1).unwrap().to_real(), -1.5);
        assert_eq!(QuantScalar::new(4915, 14).unwrap().to_real(), 0.29998779296875);
    }

    #[test]
    fn floor_to_precision_examples() {
        let x = quantize(0.3125, 4).unwrap();
        let (c, r) = floor_to_precision(x, 2).unwrap();
        assert_eq!((c.to_real(), r.to_real()), (0.25, 0.0625));

        let x = quantize(-0.5, 4).unwrap();
        let (c, r) = floor_to_precision(x, 2).unwrap();
        assert_eq!((c.to_real(), r.to_real()), (-0.5, 0.0));

        let x = quantize(-0.4375, 4).unwrap();
        let (c, r) = floor_to_precision(x, 2).unwrap();
        assert_eq!((c.to_real(), r.to_real()), (-0.5, 0.0625));

        assert!(floor_to_precision(x, 5).is_err());
    }

    #[test]
    fn empty_vector_rejected() {
        assert!(QuantVector::new(vec![], 3).is_err());
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(m in -(1i64 << 50)..(1i64 << 50), k in 0u32..=24) {
            let q = QuantScalar::new(m, k).unwrap();
            prop_assert_eq!(quantize(q.to_real(), k).unwrap(), q);
        }

        #[test]
        fn quantize_error_bound(x in -1e6f64..1e6, k in 0u32..=24) {
            let q = quantize(x, k).unwrap();
            prop_assert!((q.to_real() - x).abs() <= libm::ldexp(1.0, -(k as i32) - 1));
        }

        #[test]
        fn floor_split_reconstructs(m in -(1i64 << 40)..(1i64 << 40), k in 0u32..=24, dh in 0u32..=24) {
            let h = k.saturating_sub(dh);
            let x = QuantScalar::new(m, k).unwrap();
            let (c, r) = floor_to_precision(x, h).unwrap();
            prop_assert_eq!((c.mantissa() << (k - h)) + r.mantissa(), m);
            prop_assert!(r.mantissa() >= 0 && r.mantissa() < (1i64 << (k - h)));
        }
    }
}
