//! Quantized flow passes with the auxiliary register threaded through.

use crate::error::{Error, Result};
use crate::fixnum::QuantVector;
use crate::layers::{CondParams, Layer};
use crate::mat::AuxRegister;
use crate::model::FlowModel;

/// Everything `flow_forward` produces for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput {
    /// Factored parts in layer order (shallowest first) with the
    /// conditional prior parameters predicted for them.
    pub factored: Vec<(QuantVector, CondParams)>,
    pub z: QuantVector,
    pub r: AuxRegister,
}

impl FlowOutput {
    /// All latents concatenated: factored parts in order, then `z`.
    pub fn concat_reals(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.factored.iter().flat_map(|(v, _)| v.to_reals()).collect();
        out.extend(self.z.to_reals());
        out
    }
}

pub fn flow_forward(model: &FlowModel, x: &QuantVector, r: AuxRegister, c_bits: u32) -> Result<FlowOutput> {
    if x.len() != model.input_dim() {
        return Err(Error::Precondition(format!("model expects {} values, got {}", model.input_dim(), x.len())));
    }
    r.check(c_bits)?;
    let mut cur = x.clone();
    let mut r = r;
    let mut factored = Vec::new();
    for layer in &model.layers {
        cur = match layer {
            Layer::Permutation(p) => p.forward(&cur)?,
            Layer::Coupling(c) => {
                let (z, r2) = c.forward(&cur, r, c_bits)?;
                r = r2;
                z
            }
            Layer::Conv1x1(c) => {
                let (z, r2) = c.forward(&cur, r, c_bits)?;
                r = r2;
                z
            }
            Layer::FactorOut(f) => {
                let (zl, y, r2) = f.forward(&cur, r, c_bits)?;
                r = r2;
                let params = f.cond_params(&y.to_reals())?;
                factored.push((zl, params));
                y
            }
        };
    }
    Ok(FlowOutput { factored, z: cur, r })
}

/// Inverse pass that asks `source(level, params)` for each factored part
/// when it is needed, deepest level first. This lets a decoder pull latents
/// out of the stream in exactly the order they are required.
pub fn flow_inverse_with<F>(
    model: &FlowModel,
    z: &QuantVector,
    r: AuxRegister,
    c_bits: u32,
    mut source: F,
) -> Result<(QuantVector, AuxRegister)>
where
    F: FnMut(usize, &CondParams) -> Result<QuantVector>,
{
    if z.len() != model.final_dim() {
        return Err(Error::Precondition(format!("model emits {} latents, got {}", model.final_dim(), z.len())));
    }
    r.check(c_bits)?;
    let mut level = model.factor_out_count();
    let mut cur = z.clone();
    let mut r = r;
    for layer in model.layers.iter().rev() {
        cur = match layer {
            Layer::Permutation(p) => p.inverse(&cur)?,
            Layer::Coupling(c) => {
                let (x, r2) = c.inverse(&cur, r, c_bits)?;
                r = r2;
                x
            }
            Layer::Conv1x1(c) => {
                let (x, r2) = c.inverse(&cur, r, c_bits)?;
                r = r2;
                x
            }
            Layer::FactorOut(f) => {
                level -= 1;
                let params = f.cond_params(&cur.to_reals())?;
                let zl = source(level, &params)?;
                let (x, r2) = f.inverse(&zl, &cur, r, c_bits)?;
                r = r2;
                x
            }
        };
    }
    Ok((cur, r))
}

/// Inverse of [`flow_forward`] given its full output.
pub fn flow_inverse(model: &FlowModel, out: &FlowOutput, c_bits: u32) -> Result<(QuantVector, AuxRegister)> {
    if out.factored.len() != model.factor_out_count() {
        return Err(Error::Precondition("factored latent count does not match the model".into()));
    }
    flow_inverse_with(model, &out.z, out.r, c_bits, |level, _| Ok(out.factored[level].0.clone()))
}
