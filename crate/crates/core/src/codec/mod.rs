//! End-to-end encode and decode with bits-back dequantization.
//!
//! Encode: map `x0 ∈ [0, 2^h)` to `x = x0 / 2^h − 1/2`, pop `k − h` uniform
//! bits per value from the coder as dequantization noise `u`, run the
//! quantized flow on `x + u` starting from `r = 0`, push every latent against
//! its prior and keep the final register. Decode runs the same steps
//! backwards and pushes `u` again, which returns the borrowed bits.
//!
//! Latents are pushed shallowest factor-out level first and the final latent
//! last, each vector from its last element down, so the decoder reads the
//! final latent first, then factored levels from the deepest up, elements in
//! ascending order.

mod container;
mod flow;

pub use container::{read_archive, write_archive, Container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use flow::{flow_forward, flow_inverse, flow_inverse_with, FlowOutput};

use crate::coder::RansState;
use crate::error::{Error, Result};
use crate::fixnum::{self, QuantVector, MAX_PRECISION};
use crate::layers::CondParams;
use crate::mat::{AuxRegister, MAX_MODULUS_BITS};
use crate::model::FlowModel;
use crate::prior::{QuantizedCdf, MAX_FREQ_BITS};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecConfig {
    /// Input bit depth.
    pub h: u32,
    /// Fixed-point precision of the flow.
    pub k: u32,
    /// MAT modulus bits.
    pub c_bits: u32,
    /// rANS frequency precision.
    pub freq_bits: u32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        let d = crate::model::ModelDefaults::default();
        Self { h: d.h, k: d.k, c_bits: d.c_bits, freq_bits: d.freq_bits }
    }
}

impl CodecConfig {
    pub fn from_model(model: &FlowModel) -> Self {
        let d = model.defaults;
        Self { h: d.h, k: d.k, c_bits: d.c_bits, freq_bits: d.freq_bits }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.h > 8 {
            return Err(Error::Config(format!("bit depth h={} outside 1..=8", self.h)));
        }
        if self.k < self.h || self.k > MAX_PRECISION {
            return Err(Error::Config(format!("precision k={} must satisfy h ≤ k ≤ {MAX_PRECISION}", self.k)));
        }
        if self.c_bits == 0 || self.c_bits > MAX_MODULUS_BITS {
            return Err(Error::Config(format!("modulus bits C={} outside 1..={MAX_MODULUS_BITS}", self.c_bits)));
        }
        if self.freq_bits == 0 || self.freq_bits > MAX_FREQ_BITS {
            return Err(Error::Config(format!("frequency bits n={} outside 1..={MAX_FREQ_BITS}", self.freq_bits)));
        }
        Ok(())
    }

    /// Full check against a model, including that every coding window fits.
    pub fn validate_for(&self, model: &FlowModel) -> Result<()> {
        self.validate()?;
        model.prior.quantized(0, self.k, self.freq_bits, model.support)?;
        if model.factor_out_count() > 0 {
            QuantizedCdf::gaussian(0.0, 0.0, self.k, self.freq_bits, model.support)?;
        }
        Ok(())
    }
}

/// Codelength of one item, split into its terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodelengthReport {
    pub dims: usize,
    /// Cost of pushing every latent.
    pub bits_latent: i64,
    /// Bits borrowed for dequantization noise, `(k − h) · d`.
    pub bits_uniform_debited: i64,
    /// Width of the stored register, `C`.
    pub bits_aux_register: u32,
    /// `bits_latent − bits_uniform_debited + bits_aux_register`.
    pub net_bits: i64,
    pub bpd: f64,
    /// `C / d`.
    pub aux_bpd: f64,
    /// Serialized container size, when known. Includes the coder head,
    /// header fields and the register padded to 32 bits.
    pub container_bits: Option<u64>,
}

impl CodelengthReport {
    fn new(dims: usize, bits_latent: i64, bits_uniform_debited: i64, c_bits: u32) -> Self {
        let net_bits = bits_latent - bits_uniform_debited + c_bits as i64;
        Self {
            dims,
            bits_latent,
            bits_uniform_debited,
            bits_aux_register: c_bits,
            net_bits,
            bpd: net_bits as f64 / dims as f64,
            aux_bpd: c_bits as f64 / dims as f64,
            container_bits: None,
        }
    }

    /// Sum over items; `bpd` is recomputed over all dimensions.
    pub fn total(reports: &[CodelengthReport]) -> Option<CodelengthReport> {
        let first = reports.first()?;
        let dims = reports.iter().map(|r| r.dims).sum::<usize>();
        let c_total: i64 = reports.iter().map(|r| r.bits_aux_register as i64).sum();
        let net_bits = reports.iter().map(|r| r.net_bits).sum::<i64>();
        Some(CodelengthReport {
            dims,
            bits_latent: reports.iter().map(|r| r.bits_latent).sum(),
            bits_uniform_debited: reports.iter().map(|r| r.bits_uniform_debited).sum(),
            bits_aux_register: first.bits_aux_register,
            net_bits,
            bpd: net_bits as f64 / dims as f64,
            aux_bpd: c_total as f64 / dims as f64,
            container_bits: reports.iter().map(|r| r.container_bits).sum(),
        })
    }
}

/// `x0 / 2^h − 1/2` as mantissas at precision `k`.
pub fn preprocess(x0: &[u8], h: u32, k: u32) -> Result<QuantVector> {
    let half = 1i64 << (h - 1);
    let mantissas = x0
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if (v as u32) >> h != 0 {
                return Err(Error::Precondition(format!("sample {i} = {v} does not fit in {h} bits")));
            }
            Ok((v as i64 - half) << (k - h))
        })
        .collect::<Result<Vec<_>>>()?;
    QuantVector::new(mantissas, k)
}

fn push_vector(
    state: &mut RansState,
    v: &QuantVector,
    table: impl Fn(usize) -> Result<QuantizedCdf<'static>>,
    n: u32,
) -> Result<()> {
    for (i, &m) in v.mantissas().iter().enumerate().rev() {
        let q = table(i)?;
        let (cum, freq) = q.interval(q.index_of(i, m)?);
        state.encode_symbol(cum, freq, n);
    }
    Ok(())
}

fn pop_symbol(state: &mut RansState, q: &QuantizedCdf<'_>, n: u32) -> i64 {
    let idx = state.decode_symbol(n, |slot| {
        let i = q.symbol_from_cdf(slot);
        let (cum, freq) = q.interval(i);
        (i, cum, freq)
    });
    q.mantissa_of(idx)
}

fn cond_table(
    params: &CondParams,
    k: u32,
    n: u32,
    support: f64,
) -> impl Fn(usize) -> Result<QuantizedCdf<'static>> + '_ {
    move |i| QuantizedCdf::gaussian(params.mean[i], params.log_var[i], k, n, support)
}

/// Encode one item onto `state`. Returns the final register, which the
/// caller must store alongside the stream.
pub fn encode(
    model: &FlowModel,
    cfg: &CodecConfig,
    x0: &[u8],
    state: &mut RansState,
) -> Result<(AuxRegister, CodelengthReport)> {
    cfg.validate_for(model)?;
    if x0.len() != model.input_dim() {
        return Err(Error::Precondition(format!("model expects {} samples, got {}", model.input_dim(), x0.len())));
    }
    let (k, n) = (cfg.k, cfg.freq_bits);
    let x = preprocess(x0, cfg.h, k)?;

    let start = state.bit_len();
    let u = state.decode_uniform(x.len(), k - cfg.h);
    let debited = start - state.bit_len();
    let xbar: Vec<i64> = x.mantissas().iter().zip(&u).map(|(m, u)| m + *u as i64).collect();
    let xbar = QuantVector::new(xbar, k)?;

    let out = flow_forward(model, &xbar, AuxRegister::ZERO, cfg.c_bits)?;

    let before = state.bit_len();
    for (zl, params) in &out.factored {
        push_vector(state, zl, cond_table(params, k, n, model.support), n)?;
    }
    let prior = &model.prior;
    for (i, &m) in out.z.mantissas().iter().enumerate().rev() {
        let q = prior.quantized(i, k, n, model.support)?;
        let (cum, freq) = q.interval(q.index_of(i, m)?);
        state.encode_symbol(cum, freq, n);
    }
    let bits_latent = state.bit_len() - before;
    Ok((out.r, CodelengthReport::new(x.len(), bits_latent, debited, cfg.c_bits)))
}

/// Decode one item from `state` given the stored register. On success the
/// state is back to what it was before the matching [`encode`].
pub fn decode(model: &FlowModel, cfg: &CodecConfig, state: &mut RansState, r: AuxRegister) -> Result<Vec<u8>> {
    cfg.validate_for(model)?;
    let (k, n, h) = (cfg.k, cfg.freq_bits, cfg.h);
    let d_final = model.final_dim();
    let mut z = Vec::with_capacity(d_final);
    for i in 0..d_final {
        let q = model.prior.quantized(i, k, n, model.support)?;
        z.push(pop_symbol(state, &q, n));
    }
    let z = QuantVector::new(z, k)?;
    let (xbar, r0) = flow_inverse_with(model, &z, r, cfg.c_bits, |_, params| {
        let mut zl = Vec::with_capacity(params.mean.len());
        for i in 0..params.mean.len() {
            let q = QuantizedCdf::gaussian(params.mean[i], params.log_var[i], k, n, model.support)?;
            zl.push(pop_symbol(state, &q, n));
        }
        QuantVector::new(zl, k)
    })?;
    if r0 != AuxRegister::ZERO {
        return Err(Error::Stream(format!("auxiliary register ended at {} instead of 0", r0.value())));
    }
    let half = 1i64 << (h - 1);
    let mut x0 = Vec::with_capacity(xbar.len());
    let mut u = Vec::with_capacity(xbar.len());
    for i in 0..xbar.len() {
        let (coarse, rem) = fixnum::floor_to_precision(xbar.get(i), h)?;
        let v = coarse.mantissa() + half;
        if !(0..1i64 << h).contains(&v) {
            return Err(Error::Stream(format!("decoded sample {i} = {v} is outside {h}-bit range")));
        }
        x0.push(v as u8);
        u.push(rem.mantissa() as u64);
    }
    state.encode_uniform(&u, k - h);
    Ok(x0)
}

/// Encode one item into a standalone container.
pub fn compress(model: &FlowModel, cfg: &CodecConfig, x0: &[u8]) -> Result<(Container, CodelengthReport)> {
    let (container, mut reports) = compress_many(model, cfg, &[x0])?;
    let mut report = reports.pop().expect("one report per item");
    report.container_bits = Some(8 * container.total_bytes() as u64);
    Ok((container, report))
}

/// Encode items first to last onto one shared stream. Every item after the
/// first draws its dequantization noise from the latents already pushed, so
/// the container approaches the summed net codelength.
pub fn compress_many<T: AsRef<[u8]>>(
    model: &FlowModel,
    cfg: &CodecConfig,
    items: &[T],
) -> Result<(Container, Vec<CodelengthReport>)> {
    if items.is_empty() {
        return Err(Error::Precondition("nothing to compress".into()));
    }
    let mut state = RansState::default();
    let mut registers = Vec::with_capacity(items.len());
    let mut reports = Vec::with_capacity(items.len());
    for x0 in items {
        let (r, report) = encode(model, cfg, x0.as_ref(), &mut state)?;
        registers.push(r.value() as u32);
        reports.push(report);
    }
    let container = Container {
        h: cfg.h,
        k: cfg.k,
        c_bits: cfg.c_bits,
        freq_bits: cfg.freq_bits,
        shape: model.shape.clone(),
        model_hash: model.hash(),
        registers,
        words: state.flush(),
    };
    Ok((container, reports))
}

/// Decode a single-item container produced by [`compress`] with the same model.
pub fn decompress(model: &FlowModel, container: &Container) -> Result<Vec<u8>> {
    decompress_with_hash(model, &model.hash(), container)
}

/// Like [`decompress`] with the model hash computed once by the caller.
pub fn decompress_with_hash(model: &FlowModel, hash: &[u8; 32], container: &Container) -> Result<Vec<u8>> {
    if container.registers.len() != 1 {
        return Err(Error::Stream(format!("container holds {} items, expected one", container.registers.len())));
    }
    Ok(decompress_many_with_hash(model, hash, container)?.remove(0))
}

/// Decode every item of a container, in the order they were encoded.
pub fn decompress_many(model: &FlowModel, container: &Container) -> Result<Vec<Vec<u8>>> {
    decompress_many_with_hash(model, &model.hash(), container)
}

pub fn decompress_many_with_hash(model: &FlowModel, hash: &[u8; 32], container: &Container) -> Result<Vec<Vec<u8>>> {
    if &container.model_hash != hash {
        return Err(Error::ModelMismatch);
    }
    if container.shape != model.shape {
        return Err(Error::Stream(format!(
            "container shape {:?} does not match model {:?}",
            container.shape, model.shape
        )));
    }
    if container.registers.is_empty() {
        return Err(Error::Stream("container holds no items".into()));
    }
    let cfg = CodecConfig { h: container.h, k: container.k, c_bits: container.c_bits, freq_bits: container.freq_bits };
    cfg.validate().map_err(|e| Error::Stream(e.to_string()))?;
    let mut state = RansState::restore(&container.words, crate::coder::DEFAULT_SEED)?;
    let mut items = Vec::with_capacity(container.registers.len());
    for &reg in container.registers.iter().rev() {
        let r = AuxRegister::new(reg as u64, cfg.c_bits).map_err(|e| Error::Stream(e.to_string()))?;
        items.push(decode(model, &cfg, &mut state, r)?);
    }
    if state != RansState::default() {
        return Err(Error::Stream("coder state did not return to its initial value".into()));
    }
    items.reverse();
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bytes(n: usize, h: u32, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..1u32 << h) as u8).collect()
    }

    #[test]
    fn preprocess_maps_to_centered_grid() {
        let x = preprocess(&[0, 128, 255], 8, 10).unwrap();
        assert_eq!(x.to_reals(), vec![-0.5, 0.0, 127.0 / 256.0]);
        assert!(preprocess(&[16], 4, 6).is_err());
    }

    #[test]
    fn empty_stack_is_identity() {
        let m = FlowModel::identity_uniform(vec![5]).unwrap();
        let x = QuantVector::new(vec![1, -2, 3, 4, -5], 6).unwrap();
        let out = flow_forward(&m, &x, AuxRegister::new(9, 16).unwrap(), 16).unwrap();
        assert_eq!((&out.z, out.r.value()), (&x, 9));
    }

    #[test]
    fn identity_start_model_is_a_reordering() {
        let m = FlowModel::random_init(vec![4, 4, 3], 3, 1, 2).unwrap();
        let x = preprocess(&random_bytes(48, 8, 1), 8, 14).unwrap();
        let out = flow_forward(&m, &x, AuxRegister::ZERO, 16).unwrap();
        let mut a = out.z.mantissas().to_vec();
        let mut b = x.mantissas().to_vec();
        a.sort();
        b.sort();
        assert_eq!((a, out.r), (b, AuxRegister::ZERO));
    }

    #[test]
    fn flow_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = FlowModel::random_init(vec![4, 4, 3], 4, 2, 9).unwrap();
        m.perturb(0.3, 1);
        for _ in 0..2000 {
            let x = QuantVector::new((0..48).map(|_| rng.random_range(-8192..8192)).collect(), 14).unwrap();
            let r = AuxRegister::new(rng.random_range(0..65536), 16).unwrap();
            let out = flow_forward(&m, &x, r, 16).unwrap();
            assert_eq!(flow_inverse(&m, &out, 16).unwrap(), (x, r));
        }
    }

    #[test]
    fn shared_stream_pays_back_borrowed_bits() {
        let mut m = FlowModel::random_init(vec![4, 4, 3], 4, 2, 3).unwrap();
        m.perturb(0.2, 3);
        m.support = 3.0;
        let cfg = CodecConfig::default();
        let items: Vec<Vec<u8>> = (0..20).map(|i| random_bytes(48, 8, 100 + i)).collect();
        let (c, reports) = compress_many(&m, &cfg, &items).unwrap();
        assert_eq!(decompress_many(&m, &c).unwrap(), items);
        assert!(decompress(&m, &c).is_err());

        let net: i64 = reports.iter().map(|r| r.net_bits).sum();
        let words_bits = 32 * c.words.len() as i64;
        // Only the first item borrows from the seeded pool; the rest reuse pushed latents.
        let first_debit = ((cfg.k - cfg.h) * 48) as i64;
        assert!(words_bits <= net + first_debit + 160, "{words_bits} stream bits for {net} net bits");
        let separate: usize = items.iter().map(|x| compress(&m, &cfg, x).unwrap().0.total_bytes()).sum();
        assert!(c.total_bytes() < separate);
    }

    #[test]
    fn identity_uniform_costs_h_d_plus_c() {
        let m = FlowModel::identity_uniform(vec![10, 3]).unwrap();
        for (h, k) in [(8u32, 14u32), (4, 10), (8, 8)] {
            let cfg = CodecConfig { h, k, ..CodecConfig::default() };
            let x0 = random_bytes(30, h, k as u64);
            let (c, rep) = compress(&m, &cfg, &x0).unwrap();
            assert_eq!(rep.net_bits, (h * 30 + 16) as i64);
            assert_eq!(rep.bits_uniform_debited, ((k - h) * 30) as i64);
            assert_eq!(decompress(&m, &c).unwrap(), x0);
        }
    }

    #[test]
    fn round_trip_with_state_conservation() {
        let mut m = FlowModel::random_init(vec![6, 6, 3], 4, 2, 3).unwrap();
        m.perturb(0.2, 2);
        for (h, k) in [(8u32, 14u32), (4, 10), (8, 8), (1, 5)] {
            let cfg = CodecConfig { h, k, ..CodecConfig::default() };
            let x0 = random_bytes(108, h, 7 + k as u64);
            let mut s = RansState::default();
            let (r, _) = encode(&m, &cfg, &x0, &mut s).unwrap();
            let mut d = RansState::restore(&s.flush(), crate::coder::DEFAULT_SEED).unwrap();
            assert_eq!(decode(&m, &cfg, &mut d, r).unwrap(), x0);
            assert_eq!(d, RansState::default());
        }
    }

    #[test]
    fn deterministic_bytes() {
        let m = FlowModel::random_init(vec![4, 4, 3], 2, 2, 5).unwrap();
        let x0 = random_bytes(48, 8, 3);
        let a = compress(&m, &CodecConfig::default(), &x0).unwrap().0.to_bytes();
        let b = compress(&m, &CodecConfig::default(), &x0).unwrap().0.to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_model_rejected() {
        let m = FlowModel::random_init(vec![4, 4, 3], 2, 2, 5).unwrap();
        let other = FlowModel::random_init(vec![4, 4, 3], 2, 2, 6).unwrap();
        let (c, _) = compress(&m, &CodecConfig::default(), &random_bytes(48, 8, 1)).unwrap();
        assert!(matches!(decompress(&other, &c), Err(Error::ModelMismatch)));
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig { h: 9, ..CodecConfig::default() }.validate().is_err());
        assert!(CodecConfig { k: 6, ..CodecConfig::default() }.validate().is_err());
        assert!(CodecConfig { c_bits: 31, ..CodecConfig::default() }.validate().is_err());
        let m = FlowModel::random_init(vec![4, 4, 3], 2, 2, 5).unwrap();
        let cfg = CodecConfig { freq_bits: 16, ..CodecConfig::default() };
        assert!(matches!(cfg.validate_for(&m), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_support_is_an_error() {
        let mut m = FlowModel::random_init(vec![4], 1, 1, 5).unwrap();
        m.support = 0.25;
        let x0 = vec![0u8, 255, 0, 255];
        assert!(matches!(compress(&m, &CodecConfig::default(), &x0), Err(Error::OutOfSupport { .. })));
    }
}
