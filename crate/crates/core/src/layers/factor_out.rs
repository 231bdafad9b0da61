use super::coupling::{split_point, CouplingLayer};
use super::net::{Activation, Dense, DenseNet};
use crate::error::{Error, Result};
use crate::fixnum::QuantVector;
use crate::mat::AuxRegister;
use rand::Rng;

/// Splits off the first `factored` elements after an internal coupling.
///
/// The factored part `z_l` is coded with a Gaussian whose mean and log
/// variance come from `head(y)`, where `y` is the remaining part that keeps
/// flowing through deeper layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorOutLayer {
    pub dim: usize,
    pub factored: usize,
    pub coupling: CouplingLayer,
    pub head: DenseNet,
}

/// Conditional prior parameters for one factored vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CondParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl FactorOutLayer {
    pub fn new(dim: usize, factored: usize, coupling: CouplingLayer, head: DenseNet) -> Result<Self> {
        let layer = Self { dim, factored, coupling, head };
        layer.validate()?;
        Ok(layer)
    }

    /// Identity coupling and a head whose output starts near
    /// `mean = 0, std = init_std`.
    pub fn random_init<R: Rng>(dim: usize, factored: usize, hidden: usize, init_std: f64, rng: &mut R) -> Self {
        let coupling = CouplingLayer::identity_init(dim, split_point(dim, 3), hidden, rng);
        let mut head = DenseNet::random(dim - factored, hidden, 2 * factored, 0.05, Activation::Tanh, rng);
        let last = head.layers.len() - 1;
        let out: &mut Dense = &mut head.layers[last];
        for b in &mut out.bias[factored..] {
            *b = 2.0 * init_std.ln();
        }
        Self { dim, factored, coupling, head }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factored == 0 || self.factored >= self.dim {
            return Err(Error::Model(format!(
                "factor-out of {} from {} leaves nothing on one side",
                self.factored, self.dim
            )));
        }
        if self.coupling.dim != self.dim {
            return Err(Error::Model("factor-out coupling dimension mismatch".into()));
        }
        self.coupling.validate()?;
        self.head.validate()?;
        if self.head.inputs() != self.dim - self.factored || self.head.outputs() != 2 * self.factored {
            return Err(Error::Model(format!(
                "factor-out head is {}→{}, expected {}→{}",
                self.head.inputs(),
                self.head.outputs(),
                self.dim - self.factored,
                2 * self.factored
            )));
        }
        Ok(())
    }

    pub fn remaining(&self) -> usize {
        self.dim - self.factored
    }

    /// `(μ(y), γ(y))` kept in binary64.
    pub fn cond_params(&self, y: &[f64]) -> Result<CondParams> {
        let mut out = self.head.eval(y)?;
        let log_var = out.split_off(self.factored);
        Ok(CondParams { mean: out, log_var })
    }

    pub fn forward(
        &self,
        x: &QuantVector,
        r: AuxRegister,
        c_bits: u32,
    ) -> Result<(QuantVector, QuantVector, AuxRegister)> {
        let (v, r) = self.coupling.forward(x, r, c_bits)?;
        let k = v.precision();
        let mut m = v.into_mantissas();
        let y = m.split_off(self.factored);
        Ok((QuantVector::from_raw(m, k), QuantVector::from_raw(y, k), r))
    }

    pub fn inverse(
        &self,
        z_l: &QuantVector,
        y: &QuantVector,
        r: AuxRegister,
        c_bits: u32,
    ) -> Result<(QuantVector, AuxRegister)> {
        if z_l.len() != self.factored || y.len() != self.remaining() || z_l.precision() != y.precision() {
            return Err(Error::Precondition("factor-out inverse got mismatched parts".into()));
        }
        let mut m = z_l.mantissas().to_vec();
        m.extend_from_slice(y.mantissas());
        self.coupling.inverse(&QuantVector::from_raw(m, y.precision()), r, c_bits)
    }

    /// Unquantized reference, returns `(z_l, y)`.
    pub fn forward_continuous(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut v = self.coupling.forward_continuous(x)?;
        let y = v.split_off(self.factored);
        Ok((v, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = FactorOutLayer::random_init(8, 4, 6, 0.3, &mut rng);
        let x = QuantVector::new((0..8).map(|i| i * 100 - 333).collect(), 12).unwrap();
        let (zl, y, r) = layer.forward(&x, AuxRegister::ZERO, 16).unwrap();
        assert_eq!(zl.mantissas(), &x.mantissas()[..4]);
        assert_eq!(y.mantissas(), &x.mantissas()[4..]);
        assert_eq!(layer.inverse(&zl, &y, r, 16).unwrap(), (x, AuxRegister::ZERO));
    }

    #[test]
    fn head_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = FactorOutLayer::random_init(10, 5, 8, 0.3, &mut rng);
        let y = [0.1, -0.2, 0.3, 0.05, -0.45];
        let a = layer.cond_params(&y).unwrap();
        let b = layer.cond_params(&y).unwrap();
        let bits = |p: &CondParams| p.mean.iter().chain(&p.log_var).map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.mean.len(), 5);
        assert!(a.log_var.iter().all(|g| (g - 2.0 * 0.3f64.ln()).abs() < 0.2));
    }

    #[test]
    fn random_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let dim = rng.random_range(2..20);
            let factored = rng.random_range(1..dim);
            let mut layer = FactorOutLayer::random_init(dim, factored, 4, 0.3, &mut rng);
            layer.coupling.alpha = rng.random_range(-1.0..1.0);
            let k = rng.random_range(4..=16);
            let x =
                QuantVector::new((0..dim).map(|_| rng.random_range(-(1i64 << k)..(1i64 << k))).collect(), k).unwrap();
            let r = AuxRegister::new(rng.random_range(0..65536), 16).unwrap();
            let (zl, y, r2) = layer.forward(&x, r, 16).unwrap();
            assert_eq!(layer.inverse(&zl, &y, r2, 16).unwrap(), (x, r));
        }
    }

    #[test]
    fn rejects_degenerate_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = FactorOutLayer::random_init(6, 3, 4, 0.3, &mut rng);
        layer.factored = 6;
        assert!(layer.validate().is_err());
    }
}
