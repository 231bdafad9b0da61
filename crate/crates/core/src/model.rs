//! Flow models: layer stack, prior, persistence and a float reference.
//!
//! File layout (little-endian): `"IVPM"`, version, shape, codec defaults,
//! support radius, then length-prefixed layer blocks and a prior block, and
//! finally the SHA-256 of everything before it.

use crate::error::{Error, Result};
use crate::fixnum::MAX_PRECISION;
use crate::layers::{
    split_point, Activation, Conv1x1Layer, CouplingLayer, Dense, DenseNet, FactorOutLayer, Layer, PermutationLayer,
};
use crate::mat::MAX_MODULUS_BITS;
use crate::prior::{self, MixGaussPrior, Prior, MAX_FREQ_BITS};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::{Cursor, Read};

pub const MODEL_MAGIC: &[u8; 4] = b"IVPM";
pub const MODEL_VERSION: u8 = 1;

/// Hidden width of generated coupling and head networks.
pub const DEFAULT_HIDDEN: usize = 8;

const TAG_PERMUTATION: u8 = 1;
const TAG_COUPLING: u8 = 2;
const TAG_CONV: u8 = 3;
const TAG_FACTOR_OUT: u8 = 4;
const PRIOR_MIXTURE: u8 = 1;
const PRIOR_UNIFORM: u8 = 2;

/// Codec settings a model was built for; used when a caller gives none.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDefaults {
    pub h: u32,
    pub k: u32,
    pub c_bits: u32,
    pub freq_bits: u32,
}

impl Default for ModelDefaults {
    fn default() -> Self {
        Self { h: 8, k: 14, c_bits: crate::mat::DEFAULT_MODULUS_BITS, freq_bits: prior::DEFAULT_FREQ_BITS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub shape: Vec<usize>,
    pub defaults: ModelDefaults,
    /// Half-width of every latent coding window.
    pub support: f64,
    pub layers: Vec<Layer>,
    pub prior: Prior,
}

impl FlowModel {
    pub fn new(shape: Vec<usize>, layers: Vec<Layer>, prior: Prior) -> Result<Self> {
        let model = Self { shape, defaults: ModelDefaults::default(), support: prior::DEFAULT_SUPPORT, layers, prior };
        model.validate()?;
        Ok(model)
    }

    /// No layers and a uniform prior over the data range `[-0.5, 0.5)`.
    pub fn identity_uniform(shape: Vec<usize>) -> Result<Self> {
        let d = shape.iter().product();
        Self::new(shape, Vec::new(), Prior::Uniform { dims: d, lo: -0.5, hi: 0.5 })
    }

    pub fn input_dim(&self) -> usize {
        self.shape.iter().product()
    }

    /// Last axis of the shape.
    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Dimension of the vector that reaches the prior.
    pub fn final_dim(&self) -> usize {
        self.layers.iter().fold(self.input_dim(), |d, l| l.output_dim(d))
    }

    pub fn factor_out_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::FactorOut(_))).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.contains(&0) || self.shape.len() > 255 {
            return Err(Error::Model(format!("invalid shape {:?}", self.shape)));
        }
        let d = self.defaults;
        if d.h == 0
            || d.h > 8
            || d.k < d.h
            || d.k > MAX_PRECISION
            || d.c_bits == 0
            || d.c_bits > MAX_MODULUS_BITS
            || d.freq_bits == 0
            || d.freq_bits > MAX_FREQ_BITS
        {
            return Err(Error::Model(format!("invalid codec defaults {d:?}")));
        }
        if !(self.support.is_finite() && self.support > 0.0) {
            return Err(Error::Model(format!("support radius {} must be positive", self.support)));
        }
        let mut dim = self.input_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| Error::Model(format!("layer {i} ({}): {e}", layer.name())))?;
            match (layer, layer.input_dim()) {
                (Layer::Conv1x1(c), _) if !dim.is_multiple_of(c.channels) => {
                    return Err(Error::Model(format!(
                        "layer {i}: {dim} values are not whole {}-channel pixels",
                        c.channels
                    )));
                }
                (_, Some(n)) if n != dim => {
                    return Err(Error::Model(format!("layer {i} ({}) expects {n} values, gets {dim}", layer.name())));
                }
                _ => {}
            }
            dim = layer.output_dim(dim);
        }
        self.prior.validate()?;
        if self.prior.dims() != dim {
            return Err(Error::Model(format!("prior covers {} dims, flow emits {dim}", self.prior.dims())));
        }
        Ok(())
    }

    /// Generated model: `blocks` of (permutation, coupling, 1×1 conv) split
    /// across `levels`, with a factor-out between levels. Couplings start at
    /// `α = 0` and the conv factors are trivial, so the flow is a pure
    /// reordering until perturbed.
    pub fn random_init(shape: Vec<usize>, blocks: usize, levels: usize, seed: u64) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("at least one level is required".into()));
        }
        let probe = Self::identity_uniform(shape.clone())?;
        let c = probe.channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dim = probe.input_dim();
        let mut layers = Vec::new();
        for level in 0..levels {
            let n = blocks / levels + usize::from(level < blocks % levels);
            for _ in 0..n {
                layers.push(Layer::Permutation(PermutationLayer {
                    perm: crate::layers::random_permutation(dim, &mut rng),
                }));
                layers.push(Layer::Coupling(CouplingLayer::identity_init(
                    dim,
                    split_point(dim, 3),
                    DEFAULT_HIDDEN,
                    &mut rng,
                )));
                layers.push(Layer::Conv1x1(Conv1x1Layer::random_init(c, &mut rng)));
            }
            let factored = dim / c / 2 * c;
            if level + 1 < levels && factored > 0 && factored < dim {
                layers.push(Layer::FactorOut(FactorOutLayer::random_init(
                    dim,
                    factored,
                    DEFAULT_HIDDEN,
                    0.3,
                    &mut rng,
                )));
                dim -= factored;
            }
        }
        Self::new(shape, layers, Prior::MixGauss(MixGaussPrior::standard(dim)))
    }

    /// Move every layer away from the identity: coupling `α`, LU
    /// off-diagonals and log-`Λ` drawn from `±strength`.
    pub fn perturb(&mut self, strength: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| if strength > 0.0 { rng.random_range(-strength..strength) } else { 0.0 };
        for layer in &mut self.layers {
            match layer {
                Layer::Coupling(cl) => cl.alpha = draw(&mut rng),
                Layer::FactorOut(f) => f.coupling.alpha = draw(&mut rng),
                Layer::Conv1x1(conv) => {
                    let c = conv.channels;
                    // Wide layers get smaller off-diagonals so the triangular factors keep a bounded gain.
                    let shrink = (3.0 / c.max(3) as f64).sqrt();
                    for i in 0..c {
                        for j in 0..c {
                            if j < i {
                                conv.lower[i * c + j] = shrink * draw(&mut rng);
                            } else if j > i {
                                conv.upper[i * c + j] = shrink * draw(&mut rng);
                            }
                        }
                    }
                    let mut logs: Vec<f64> = (0..c).map(|_| draw(&mut rng)).collect();
                    let mean = logs.iter().sum::<f64>() / c as f64;
                    logs.iter_mut().for_each(|l| *l -= mean);
                    let mut lambda: Vec<f64> = logs.iter().map(|l| libm::exp(*l)).collect();
                    let prod: f64 = lambda.iter().product();
                    lambda[0] /= prod;
                    conv.lambda = lambda;
                }
                Layer::Permutation(_) => {}
            }
        }
    }

    /// Float evaluation of the same flow without quantization: factored
    /// parts in order, then the final latent.
    pub fn continuous_eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Precondition(format!("model expects {} values, got {}", self.input_dim(), x.len())));
        }
        let mut cur = x.to_vec();
        let mut factored = Vec::new();
        for layer in &self.layers {
            cur = match layer {
                Layer::Permutation(p) => crate::layers::permute_forward(&cur, &p.perm),
                Layer::Coupling(c) => c.forward_continuous(&cur)?,
                Layer::Conv1x1(c) => c.forward_continuous(&cur)?,
                Layer::FactorOut(f) => {
                    let (zl, y) = f.forward_continuous(&cur)?;
                    factored.extend(zl);
                    y
                }
            };
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("continuous flow produced a non-finite value".into()));
        }
        factored.extend(cur);
        Ok(factored)
    }

    fn body(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MODEL_MAGIC);
        w.push(MODEL_VERSION);
        w.push(self.shape.len() as u8);
        for &s in &self.shape {
            put_u32(&mut w, s);
        }
        let d = self.defaults;
        w.extend_from_slice(&[d.h as u8, d.k as u8, d.c_bits as u8, d.freq_bits as u8]);
        put_f64s(&mut w, &[self.support]);
        put_u32(&mut w, self.layers.len());
        for layer in &self.layers {
            let mut block = Vec::new();
            write_layer(&mut block, layer);
            put_u32(&mut w, block.len());
            w.extend_from_slice(&block);
        }
        let mut block = Vec::new();
        match &self.prior {
            Prior::MixGauss(p) => {
                block.push(PRIOR_MIXTURE);
                put_u32(&mut block, p.dims());
                put_u32(&mut block, p.components());
                put_f64s(&mut block, p.logits());
                put_f64s(&mut block, p.means());
                put_f64s(&mut block, p.log_vars());
            }
            Prior::Uniform { dims, lo, hi } => {
                block.push(PRIOR_UNIFORM);
                put_u32(&mut block, *dims);
                put_f64s(&mut block, &[*lo, *hi]);
            }
        }
        put_u32(&mut w, block.len());
        w.extend_from_slice(&block);
        w
    }

    pub fn save(&self) -> Vec<u8> {
        let mut bytes = self.body();
        let hash = Sha256::digest(&bytes);
        bytes.extend_from_slice(&hash);
        bytes
    }

    /// SHA-256 of the serialized parameters.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.body()).into()
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 + 5 {
            return Err(Error::Model("model file is truncated".into()));
        }
        let (body, stored) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Model("model file hash does not match its contents".into()));
        }
        let mut r = Reader(Cursor::new(body));
        let mut magic = [0u8; 4];
        r.bytes(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Model("not a model file (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != MODEL_VERSION {
            return Err(Error::Model(format!("unsupported model version {version}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let defaults =
            ModelDefaults { h: r.u8()? as u32, k: r.u8()? as u32, c_bits: r.u8()? as u32, freq_bits: r.u8()? as u32 };
        let support = r.f64()?;
        let n_layers = r.u32()?;
        let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
        for i in 0..n_layers {
            let len = r.u32()?;
            let block = r.slice(len)?;
            let mut br = Reader(Cursor::new(block));
            let layer = read_layer(&mut br).map_err(|e| Error::Model(format!("layer {i}: {e}")))?;
            br.finish()?;
            layers.push(layer);
        }
        let len = r.u32()?;
        let block = r.slice(len)?;
        let mut br = Reader(Cursor::new(block));
        let prior = match br.u8()? {
            PRIOR_MIXTURE => {
                let dims = br.u32()?;
                let kc = br.u32()?;
                let n = dims.checked_mul(kc).ok_or_else(|| Error::Model("prior size overflows".into()))?;
                Prior::MixGauss(MixGaussPrior::new(dims, kc, br.f64s(n)?, br.f64s(n)?, br.f64s(n)?)?)
            }
            PRIOR_UNIFORM => {
                let dims = br.u32()?;
                Prior::Uniform { dims, lo: br.f64()?, hi: br.f64()? }
            }
            t => return Err(Error::Model(format!("unknown prior tag {t}"))),
        };
        br.finish()?;
        r.finish()?;
        let model = Self { shape, defaults, support, layers, prior };
        model.validate()?;
        Ok(model)
    }
}

fn put_u32(w: &mut Vec<u8>, v: usize) {
    w.write_u32::<LE>(u32::try_from(v).expect("model sizes fit in 32 bits")).expect("vec write");
}

fn put_f64s(w: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        w.write_f64::<LE>(v).expect("vec write");
    }
}

fn write_net(w: &mut Vec<u8>, net: &DenseNet) {
    w.push(net.activation.tag());
    put_u32(w, net.layers.len());
    for d in &net.layers {
        put_u32(w, d.inputs);
        put_u32(w, d.outputs);
        put_f64s(w, &d.weights);
        put_f64s(w, &d.bias);
    }
}

fn write_coupling(w: &mut Vec<u8>, c: &CouplingLayer) {
    put_u32(w, c.dim);
    put_u32(w, c.d_b);
    put_f64s(w, &[c.alpha]);
    write_net(w, &c.net);
}

fn write_layer(w: &mut Vec<u8>, layer: &Layer) {
    match layer {
        Layer::Permutation(p) => {
            w.push(TAG_PERMUTATION);
            put_u32(w, p.perm.len());
            for &i in &p.perm {
                put_u32(w, i);
            }
        }
        Layer::Coupling(c) => {
            w.push(TAG_COUPLING);
            write_coupling(w, c);
        }
        Layer::Conv1x1(c) => {
            w.push(TAG_CONV);
            put_u32(w, c.channels);
            for &i in &c.perm {
                put_u32(w, i);
            }
            put_f64s(w, &c.lower);
            put_f64s(w, &c.lambda);
            put_f64s(w, &c.upper);
        }
        Layer::FactorOut(f) => {
            w.push(TAG_FACTOR_OUT);
            put_u32(w, f.dim);
            put_u32(w, f.factored);
            write_coupling(w, &f.coupling);
            write_net(w, &f.head);
        }
    }
}

struct Reader<'a>(Cursor<&'a [u8]>);

fn truncated(_: std::io::Error) -> Error {
    Error::Model("model file is truncated".into())
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.0.get_ref().len() - self.0.position() as usize
    }

    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().map_err(truncated)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(self.0.read_u32::<LE>().map_err(truncated)? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        self.0.read_f64::<LE>().map_err(truncated)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.remaining() {
            return Err(Error::Model("model file is truncated".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>> {
        if n.saturating_mul(4) > self.remaining() {
            return Err(Error::Model("model file is truncated".into()));
        }
        (0..n).map(|_| self.u32()).collect()
    }

    fn bytes(&mut self, out: &mut [u8]) -> Result<()> {
        self.0.read_exact(out).map_err(truncated)
    }

    fn slice(&mut self, len: usize) -> Result<&'a [u8]> {
        if len > self.remaining() {
            return Err(Error::Model("model file is truncated".into()));
        }
        let start = self.0.position() as usize;
        self.0.set_position((start + len) as u64);
        Ok(&self.0.get_ref()[start..start + len])
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Model(format!("{} unexpected trailing bytes in model block", self.remaining())));
        }
        Ok(())
    }
}

fn read_net(r: &mut Reader) -> Result<DenseNet> {
    let activation = Activation::from_tag(r.u8()?)?;
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let inputs = r.u32()?;
        let outputs = r.u32()?;
        let nw = inputs.checked_mul(outputs).ok_or_else(|| Error::Model("dense size overflows".into()))?;
        layers.push(Dense::new(inputs, outputs, r.f64s(nw)?, r.f64s(outputs)?)?);
    }
    DenseNet::new(layers, activation)
}

fn read_coupling(r: &mut Reader) -> Result<CouplingLayer> {
    let dim = r.u32()?;
    let d_b = r.u32()?;
    let alpha = r.f64()?;
    CouplingLayer::new(dim, d_b, read_net(r)?, alpha)
}

fn read_layer(r: &mut Reader) -> Result<Layer> {
    Ok(match r.u8()? {
        TAG_PERMUTATION => {
            let n = r.u32()?;
            Layer::Permutation(PermutationLayer::new(r.u32s(n)?)?)
        }
        TAG_COUPLING => Layer::Coupling(read_coupling(r)?),
        TAG_CONV => {
            let c = r.u32()?;
            let cc = c.checked_mul(c).ok_or_else(|| Error::Model("conv size overflows".into()))?;
            let perm = r.u32s(c)?;
            let lower = r.f64s(cc)?;
            let lambda = r.f64s(c)?;
            let upper = r.f64s(cc)?;
            Layer::Conv1x1(Conv1x1Layer::new(perm, lower, lambda, upper)?)
        }
        TAG_FACTOR_OUT => {
            let dim = r.u32()?;
            let factored = r.u32()?;
            let coupling = read_coupling(r)?;
            let head = read_net(r)?;
            Layer::FactorOut(FactorOutLayer::new(dim, factored, coupling, head)?)
        }
        t => return Err(Error::Model(format!("unknown layer tag {t}"))),
    })
}
