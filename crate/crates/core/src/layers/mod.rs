//! Numerically invertible flow layers.

mod conv;
mod coupling;
mod factor_out;
mod net;

pub use conv::{
    diag_forward, diag_inverse, permute_forward, permute_inverse, random_permutation, tri_lower_forward,
    tri_lower_forward_in_place, tri_lower_inverse, tri_lower_inverse_in_place, tri_upper_forward,
    tri_upper_forward_in_place, tri_upper_inverse, tri_upper_inverse_in_place, validate_permutation, Conv1x1Layer,
    PermutationLayer,
};
pub use coupling::{split_point, vp_project, CouplingLayer};
pub use factor_out::{CondParams, FactorOutLayer};
pub use net::{Activation, Dense, DenseNet};

/// One step of a flow.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Permutation(PermutationLayer),
    Coupling(CouplingLayer),
    Conv1x1(Conv1x1Layer),
    FactorOut(FactorOutLayer),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Permutation(_) => "permutation",
            Layer::Coupling(_) => "coupling",
            Layer::Conv1x1(_) => "conv1x1",
            Layer::FactorOut(_) => "factor-out",
        }
    }

    /// Number of values this layer consumes.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Layer::Permutation(p) => Some(p.dim()),
            Layer::Coupling(c) => Some(c.dim),
            Layer::Conv1x1(_) => None,
            Layer::FactorOut(f) => Some(f.dim),
        }
    }

    /// Number of values passed on to the next layer, given the input size.
    pub fn output_dim(&self, input: usize) -> usize {
        match self {
            Layer::FactorOut(f) => f.remaining(),
            _ => input,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        match self {
            Layer::Permutation(p) => validate_permutation(&p.perm),
            Layer::Coupling(c) => c.validate(),
            Layer::Conv1x1(c) => c.validate(),
            Layer::FactorOut(f) => f.validate(),
        }
    }
}
