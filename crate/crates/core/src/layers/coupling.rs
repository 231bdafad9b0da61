use super::net::{Activation, DenseNet};
use crate::error::{Error, Result};
use crate::fixnum::QuantVector;
use crate::mat::{AuxRegister, Mat};
use rand::Rng;

/// `s = α (tanh(s0) - mean(tanh(s0)))`, `t = α t0`.
///
/// The log-scales sum to zero up to rounding, so `∏ exp(s_i) ≈ 1`.
pub fn vp_project(s0: &[f64], t0: &[f64], alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let squashed: Vec<f64> = s0.iter().map(|&v| libm::tanh(v)).collect();
    let mean = if squashed.is_empty() { 0.0 } else { squashed.iter().sum::<f64>() / squashed.len() as f64 };
    let s = squashed.iter().map(|v| alpha * (v - mean)).collect();
    let t = t0.iter().map(|v| alpha * v).collect();
    (s, t)
}

/// Affine coupling: the first `dim - d_b` elements pass through and
/// condition a volume-preserving affine map of the last `d_b` elements.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub dim: usize,
    pub d_b: usize,
    pub net: DenseNet,
    pub alpha: f64,
}

/// Size of the transformed part for a `ratio:1` split, at least one element.
pub fn split_point(dim: usize, ratio: usize) -> usize {
    (dim / (ratio + 1)).clamp(1, dim.saturating_sub(1).max(1))
}

impl CouplingLayer {
    pub fn new(dim: usize, d_b: usize, net: DenseNet, alpha: f64) -> Result<Self> {
        let layer = Self { dim, d_b, net, alpha };
        layer.validate()?;
        Ok(layer)
    }

    /// Random network with `alpha = 0`, i.e. an identity layer.
    pub fn identity_init<R: Rng>(dim: usize, d_b: usize, hidden: usize, rng: &mut R) -> Self {
        let net = DenseNet::random(dim - d_b, hidden, 2 * d_b, 1.0, Activation::Tanh, rng);
        Self { dim, d_b, net, alpha: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_b == 0 || self.d_b > self.dim {
            return Err(Error::Model(format!("coupling split d_b={} invalid for dim {}", self.d_b, self.dim)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Model("coupling alpha is not finite".into()));
        }
        self.net.validate()?;
        if self.net.inputs() != self.dim - self.d_b || self.net.outputs() != 2 * self.d_b {
            return Err(Error::Model(format!(
                "coupling net is {}→{}, expected {}→{}",
                self.net.inputs(),
                self.net.outputs(),
                self.dim - self.d_b,
                2 * self.d_b
            )));
        }
        Ok(())
    }

    pub fn d_a(&self) -> usize {
        self.dim - self.d_b
    }

    /// Log-scales and offsets for the transformed half.
    pub fn params(&self, x_a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.net.eval(x_a)?;
        let (s0, t0) = out.split_at(self.d_b);
        Ok(vp_project(s0, t0, self.alpha))
    }

    fn prepare(&self, x_a: &QuantVector, c_bits: u32) -> Result<Mat> {
        let (log_s, t) = self.params(&x_a.to_reals())?;
        let scales: Vec<f64> = log_s.iter().map(|&v| libm::exp(v)).collect();
        Mat::new(&scales, &t, x_a.precision(), c_bits)
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim {
            return Err(Error::Precondition(format!("coupling expects dim {}, got {n}", self.dim)));
        }
        Ok(())
    }

    pub fn forward(&self, x: &QuantVector, r: AuxRegister, c_bits: u32) -> Result<(QuantVector, AuxRegister)> {
        self.check_dim(x.len())?;
        let k = x.precision();
        let mut out = x.mantissas().to_vec();
        let (a, b) = out.split_at_mut(self.d_a());
        let mat = self.prepare(&QuantVector::from_raw(a.to_vec(), k), c_bits)?;
        let mut r = r;
        mat.forward_in_place(b, &mut r)?;
        Ok((QuantVector::from_raw(out, k), r))
    }

    pub fn inverse(&self, z: &QuantVector, r: AuxRegister, c_bits: u32) -> Result<(QuantVector, AuxRegister)> {
        self.check_dim(z.len())?;
        let k = z.precision();
        let mut out = z.mantissas().to_vec();
        let (a, b) = out.split_at_mut(self.d_a());
        let mat = self.prepare(&QuantVector::from_raw(a.to_vec(), k), c_bits)?;
        let mut r = r;
        mat.inverse_in_place(b, &mut r)?;
        Ok((QuantVector::from_raw(out, k), r))
    }

    /// Unquantized reference: `z_b = exp(s(x_a)) ⊙ x_b + t(x_a)`.
    pub fn forward_continuous(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let (a, b) = x.split_at(self.d_a());
        let (log_s, t) = self.params(a)?;
        let mut out = a.to_vec();
        out.extend(b.iter().zip(&log_s).zip(&t).map(|((xb, ls), tb)| libm::exp(*ls) * xb + tb));
        Ok(out)
    }
}
