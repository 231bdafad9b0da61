//! Modular affine transformation.
//!
//! Realizes `z = s ⊙ x + t` exactly on the `k`-precision grid when
//! `∏ s_i = 1`. Each scale is approximated by a ratio of consecutive moduli
//! `m_{i-1} / m_i`, and the division remainders are carried in an auxiliary
//! register `r ∈ [0, 2^C)` so the map `(x, r) ↔ (z, r')` is a bijection.

use crate::error::{Error, Result};
use crate::fixnum::{self, QuantVector};

/// Default modulus width.
pub const DEFAULT_MODULUS_BITS: u32 = 16;

/// Upper bound accepted for `C`.
pub const MAX_MODULUS_BITS: u32 = 30;

const MODULUS_LIMIT: f64 = (1u64 << 62) as f64;

/// Tolerance on `|∑ ln s_i|` for scale vectors built from stored parameters.
pub const VOLUME_TOLERANCE: f64 = 1e-6;

/// Remainder carried between affine steps, always in `[0, 2^C)` at layer
/// boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AuxRegister(u64);

impl AuxRegister {
    pub const ZERO: AuxRegister = AuxRegister(0);

    pub fn new(value: u64, c_bits: u32) -> Result<Self> {
        let reg = AuxRegister(value);
        reg.check(c_bits)?;
        Ok(reg)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub(crate) fn check(self, c_bits: u32) -> Result<()> {
        if c_bits > MAX_MODULUS_BITS || self.0 >= 1u64 << c_bits {
            return Err(Error::Precondition(format!("auxiliary register {} is not in [0, 2^{c_bits})", self.0)));
        }
        Ok(())
    }
}

/// Moduli `m_0 … m_{d_b}` with `m_0 = m_{d_b} = 2^C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModulusChain {
    moduli: Vec<u64>,
    bits: u32,
}

impl ModulusChain {
    pub fn moduli(&self) -> &[u64] {
        &self.moduli
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Number of scaled elements `d_b`.
    pub fn len(&self) -> usize {
        self.moduli.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Check that a vector of log-scales is volume preserving within
/// [`VOLUME_TOLERANCE`].
pub fn check_volume_preserving(log_scales: &[f64]) -> Result<()> {
    let sum: f64 = log_scales.iter().sum();
    if !sum.is_finite() || sum.abs() >= VOLUME_TOLERANCE {
        return Err(Error::Model(format!("scales are not volume preserving: sum of logs = {sum:e}")));
    }
    Ok(())
}

/// `m_i = round(2^C / ∏_{j<=i} s_j)` for `0 < i < d_b`, with any value in
/// `(0, 1]` mapped to 1. The running product is accumulated left to right.
pub fn compute_moduli(scales: &[f64], c_bits: u32) -> Result<ModulusChain> {
    if scales.is_empty() {
        return Err(Error::Precondition("MAT needs at least one scale".into()));
    }
    if c_bits == 0 || c_bits > MAX_MODULUS_BITS {
        return Err(Error::Config(format!("modulus bits C={c_bits} outside 1..={MAX_MODULUS_BITS}")));
    }
    if let Some(bad) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Domain(format!("MAT scale must be finite and positive, got {bad}")));
    }
    let m0 = 1u64 << c_bits;
    let mut moduli = Vec::with_capacity(scales.len() + 1);
    moduli.push(m0);
    let mut prod = 1.0f64;
    for &s in &scales[..scales.len() - 1] {
        prod *= s;
        let ratio = m0 as f64 / prod;
        if !ratio.is_finite() || ratio >= MODULUS_LIMIT {
            return Err(Error::Overflow(format!("modulus {ratio:e} exceeds the 2^62 guard")));
        }
        let m = fixnum::round_half_away(ratio);
        moduli.push(if m < 1.0 { 1 } else { m as u64 });
    }
    moduli.push(m0);
    Ok(ModulusChain { moduli, bits: c_bits })
}

fn narrow(v: i128) -> Result<i64> {
    i64::try_from(v)
        .map_err(|_| Error::Overflow(format!("MAT intermediate {v} does not fit in 64 bits")))
        .and_then(fixnum::check_mantissa)
}

/// A prepared affine step: modulus chain plus the quantized offset.
#[derive(Debug, Clone)]
pub struct Mat {
    chain: ModulusChain,
    offset: Vec<i64>,
}

impl Mat {
    /// `t` is quantized at precision `k` before use.
    pub fn new(scales: &[f64], offsets: &[f64], k: u32, c_bits: u32) -> Result<Self> {
        if scales.len() != offsets.len() {
            return Err(Error::Precondition(format!(
                "scale/offset length mismatch: {} vs {}",
                scales.len(),
                offsets.len()
            )));
        }
        let chain = compute_moduli(scales, c_bits)?;
        let offset = offsets.iter().map(|&t| fixnum::quantize_mantissa(t, k)).collect::<Result<Vec<_>>>()?;
        Ok(Self { chain, offset })
    }

    pub fn chain(&self) -> &ModulusChain {
        &self.chain
    }

    pub fn offset_mantissas(&self) -> &[i64] {
        &self.offset
    }

    /// Forward step on raw mantissas, in place.
    pub fn forward_in_place(&self, x: &mut [i64], r: &mut AuxRegister) -> Result<()> {
        self.check_len(x.len())?;
        r.check(self.chain.bits)?;
        let m = &self.chain.moduli;
        let mut rem = r.0 as i128;
        for i in 0..x.len() {
            let v = x[i] as i128 * m[i] as i128 + rem;
            let div = m[i + 1] as i128;
            let y = v.div_euclid(div);
            rem = v.rem_euclid(div);
            x[i] = fixnum::checked_add(narrow(y)?, self.offset[i])?;
        }
        *r = AuxRegister(rem as u64);
        Ok(())
    }

    /// Inverse step on raw mantissas, in place.
    pub fn inverse_in_place(&self, z: &mut [i64], r: &mut AuxRegister) -> Result<()> {
        self.check_len(z.len())?;
        r.check(self.chain.bits)?;
        let m = &self.chain.moduli;
        let mut rem = r.0 as i128;
        for i in (0..z.len()).rev() {
            let y = z[i] as i128 - self.offset[i] as i128;
            let v = y * m[i + 1] as i128 + rem;
            let div = m[i] as i128;
            z[i] = narrow(v.div_euclid(div))?;
            rem = v.rem_euclid(div);
        }
        *r = AuxRegister(rem as u64);
        Ok(())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.chain.len() {
            return Err(Error::Precondition(format!("MAT prepared for {} elements, got {n}", self.chain.len())));
        }
        Ok(())
    }
}

/// Forward MAT on a quantized vector.
pub fn mat_forward(
    x: &QuantVector,
    scales: &[f64],
    offsets: &[f64],
    r: AuxRegister,
    c_bits: u32,
) -> Result<(QuantVector, AuxRegister)> {
    let k = x.precision();
    let mat = Mat::new(scales, offsets, k, c_bits)?;
    let mut out = x.mantissas().to_vec();
    let mut r = r;
    mat.forward_in_place(&mut out, &mut r)?;
    Ok((QuantVector::from_raw(out, k), r))
}

/// Inverse MAT on a quantized vector.
pub fn mat_inverse(
    z: &QuantVector,
    scales: &[f64],
    offsets: &[f64],
    r: AuxRegister,
    c_bits: u32,
) -> Result<(QuantVector, AuxRegister)> {
    let k = z.precision();
    let mat = Mat::new(scales, offsets, k, c_bits)?;
    let mut out = z.mantissas().to_vec();
    let mut r = r;
    mat.inverse_in_place(&mut out, &mut r)?;
    Ok((QuantVector::from_raw(out, k), r))
}
