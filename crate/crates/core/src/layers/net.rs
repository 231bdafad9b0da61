//! Small fully connected networks that produce coupling and factor-out
//! parameters.
//!
//! Evaluation is plain binary64 with a fixed left-to-right reduction order,
//! and transcendental functions come from `libm`, so the same input always
//! yields the same bits. Encoder and decoder both depend on that.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Swish,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Swish => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Swish),
            _ => Err(Error::Model(format!("unknown activation tag {tag}"))),
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Swish => x / (1.0 + libm::exp(-x)),
        }
    }
}

/// One affine map `y = W x + b`, `W` stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let dense = Self { inputs, outputs, weights, bias };
        dense.validate()?;
        Ok(dense)
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    /// Uniform init in `±gain / sqrt(inputs)`, zero bias.
    pub fn random<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain / (inputs.max(1) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { inputs, outputs, weights, bias: vec![0.0; outputs] }
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(Error::Model(format!(
                "dense layer {}x{} has {} weights and {} biases",
                self.outputs,
                self.inputs,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|w| !w.is_finite()) {
            return Err(Error::Model("dense layer has non-finite parameters".into()));
        }
        Ok(())
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.inputs == 0 {
            out.extend_from_slice(&self.bias);
            return;
        }
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
            let mut acc = 0.0;
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc + b);
        }
    }
}

/// A stack of dense layers with an activation between consecutive layers
/// (none after the last one).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        let net = Self { layers, activation };
        net.validate()?;
        Ok(net)
    }

    /// `inputs → hidden → hidden → outputs`. The output layer is scaled by
    /// `out_gain`.
    pub fn random<R: Rng>(
        inputs: usize,
        hidden: usize,
        outputs: usize,
        out_gain: f64,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = vec![
            Dense::random(inputs, hidden, 1.0, rng),
            Dense::random(hidden, hidden, 1.0, rng),
            Dense::random(hidden, outputs, out_gain, rng),
        ];
        Self { layers, activation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Model("network has no layers".into()));
        }
        for l in &self.layers {
            l.validate()?;
        }
        for pair in self.layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Model(format!(
                    "network layer widths do not chain: {} -> {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Evaluate the network.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.inputs() {
            return Err(Error::Precondition(format!("network expects {} inputs, got {}", self.inputs(), input.len())));
        }
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i != last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("network produced a non-finite output".into()));
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias() {
        let mut out = Dense::zeros(3, 2);
        out.bias = vec![0.5, -1.25];
        let net = DenseNet::new(vec![Dense::zeros(3, 3), out], Activation::Tanh).unwrap();
        assert_eq!(net.eval(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, -1.25]);
    }

    #[test]
    fn single_affine_layer() {
        // [[1, 2], [3, 4]] · [0.5, -1] + [0.25, 0] = [-1.25, -2.5]
        let d = Dense::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.25, 0.0]).unwrap();
        let net = DenseNet::new(vec![d], Activation::Swish).unwrap();
        assert_eq!(net.eval(&[0.5, -1.0]).unwrap(), vec![-1.25, -2.5]);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::random(17, 8, 6, 1.0, Activation::Swish, &mut rng);
        let x: Vec<f64> = (0..17).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = net.eval(&x).unwrap();
        let b = net.eval(&x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn shape_errors() {
        assert!(Dense::new(2, 2, vec![1.0; 3], vec![0.0; 2]).is_err());
        assert!(DenseNet::new(vec![Dense::zeros(2, 3), Dense::zeros(2, 1)], Activation::Tanh).is_err());
        let net = DenseNet::new(vec![Dense::zeros(2, 1)], Activation::Tanh).unwrap();
        assert!(net.eval(&[1.0]).is_err());
    }

    #[test]
    fn non_finite_output_is_model_error() {
        let d = Dense::new(1, 1, vec![1e308], vec![0.0]).unwrap();
        let net = DenseNet::new(vec![d], Activation::Tanh).unwrap();
        assert!(matches!(net.eval(&[1e10]), Err(Error::Model(_))));
    }
}
