//! Brute-force verifiers and empirical demonstrators.
//!
//! The MAT scan recomputes moduli and floor division on its own instead of
//! calling into `mat`, so a bug shared by forward and inverse still shows up
//! as a mismatch against the reference.

use crate::codec::flow_forward;
use crate::error::Result;
use crate::fixnum::{self, QuantVector};
use crate::mat::{self, AuxRegister};
use crate::model::FlowModel;
use crate::prior::MixGaussPrior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashMap;

/// Outcome of an exhaustive or sampled check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanReport {
    pub name: String,
    pub domain: String,
    pub cases: u64,
    pub violations: Vec<String>,
    pub max_error: f64,
}

impl ScanReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let status = if self.passed() { "ok" } else { "FAILED" };
        let mut s = format!(
            "{status:6} {}: {} cases over {}, max error {:.3e}",
            self.name, self.cases, self.domain, self.max_error
        );
        for v in self.violations.iter().take(5) {
            s.push_str("\n       ");
            s.push_str(v);
        }
        if self.violations.len() > 5 {
            s.push_str(&format!("\n       … {} more", self.violations.len() - 5));
        }
        s
    }

    /// Combine reports of the same check run over disjoint domains.
    pub fn merge(mut self, other: ScanReport) -> ScanReport {
        self.cases += other.cases;
        self.violations.extend(other.violations);
        self.max_error = self.max_error.max(other.max_error);
        self
    }
}

fn reference_moduli(s: &[f64], c_bits: u32) -> Vec<i128> {
    let top = 1i128 << c_bits;
    let mut m = vec![top];
    let mut prod = 1.0;
    for &si in &s[..s.len() - 1] {
        prod *= si;
        let v = ((top as f64) / prod).round();
        m.push(if v < 1.0 { 1 } else { v as i128 });
    }
    m.push(top);
    m
}

fn floor_divmod(a: i128, b: i128) -> (i128, i128) {
    let mut q = a / b;
    let mut r = a % b;
    if r < 0 {
        q -= 1;
        r += b;
    }
    (q, r)
}

/// Reference forward MAT on mantissas, written independently of `mat`.
pub fn reference_mat_forward(x: &[i64], r: u64, s: &[f64], t: &[f64], k: u32, c_bits: u32) -> (Vec<i64>, u64) {
    let m = reference_moduli(s, c_bits);
    let mut rem = r as i128;
    let mut z = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let (q, r2) = floor_divmod(x[i] as i128 * m[i] + rem, m[i + 1]);
        rem = r2;
        let tq = (t[i] * (1u64 << k) as f64).round() as i128;
        z.push((q + tq) as i64);
    }
    (z, rem as u64)
}

type MapFn<'a> = dyn Fn(&[i64], u64) -> Option<(Vec<i64>, u64)> + 'a;

/// Enumerate every `(x, r)` with mantissas in `[-radius, radius)` and
/// `r ∈ [0, 2^C)`, checking the supplied forward/inverse pair against the
/// reference forward, the range of the outputs, round trip and injectivity.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_check_with(
    s: &[f64],
    t: &[f64],
    k: u32,
    c_bits: u32,
    radius: i64,
    forward: &MapFn<'_>,
    inverse: &MapFn<'_>,
) -> ScanReport {
    let d_b = s.len();
    let side = (2 * radius) as u64;
    let regs = 1u64 << c_bits;
    let total = side.pow(d_b as u32) * regs;
    let mut seen: HashMap<(Vec<i64>, u64), (Vec<i64>, u64)> = HashMap::with_capacity(total as usize);
    let mut violations = Vec::new();
    let mut max_error = 0.0f64;
    let scale = (1u64 << k) as f64;
    let mut x = vec![-radius; d_b];
    for _ in 0..side.pow(d_b as u32) {
        for r in 0..regs {
            let expect = reference_mat_forward(&x, r, s, t, k, c_bits);
            let Some((z, r2)) = forward(&x, r) else {
                violations.push(format!("forward failed at x={x:?} r={r}"));
                continue;
            };
            if (z.clone(), r2) != expect {
                violations.push(format!("x={x:?} r={r}: got ({z:?}, {r2}), reference {expect:?}"));
            }
            if r2 >= regs {
                violations.push(format!("x={x:?} r={r}: register {r2} out of range"));
            }
            for i in 0..d_b {
                let exact = s[i] * x[i] as f64 / scale + t[i];
                max_error = max_error.max((z[i] as f64 / scale - exact).abs());
            }
            match inverse(&z, r2) {
                Some(back) if back == (x.clone(), r) => {}
                other => violations.push(format!("x={x:?} r={r}: inverse gave {other:?}")),
            }
            if let Some(prev) = seen.insert((z.clone(), r2), (x.clone(), r)) {
                violations.push(format!("collision: {prev:?} and ({x:?}, {r}) both map to ({z:?}, {r2})"));
            }
        }
        for xi in x.iter_mut() {
            *xi += 1;
            if *xi < radius {
                break;
            }
            *xi = -radius;
        }
    }
    ScanReport {
        name: "mat-bijection".into(),
        domain: format!("d_b={d_b} k={k} C={c_bits} s={s:?} mantissas in [-{radius},{radius})"),
        cases: total,
        violations,
        max_error,
    }
}

/// Exhaustive bijection check of the crate's MAT. The mantissa radius is
/// `max(8, 2^(k+1))`.
pub fn brute_force_mat_check(s: &[f64], t: &[f64], k: u32, c_bits: u32) -> ScanReport {
    let radius = 8i64.max(1 << (k + 1));
    let fwd = |x: &[i64], r: u64| {
        let q = QuantVector::new(x.to_vec(), k).ok()?;
        let (z, r2) = mat::mat_forward(&q, s, t, AuxRegister::new(r, c_bits).ok()?, c_bits).ok()?;
        Some((z.into_mantissas(), r2.value()))
    };
    let inv = |z: &[i64], r: u64| {
        let q = QuantVector::new(z.to_vec(), k).ok()?;
        let (x, r2) = mat::mat_inverse(&q, s, t, AuxRegister::new(r, c_bits).ok()?, c_bits).ok()?;
        Some((x.into_mantissas(), r2.value()))
    };
    brute_force_check_with(s, t, k, c_bits, radius, &fwd, &inv)
}

/// Random volume-preserving scales (product exactly pinned by the last
/// element) and offsets.
pub fn random_admissible<R: Rng>(d_b: usize, spread: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut s: Vec<f64> = (0..d_b).map(|_| libm::exp(rng.random_range(-spread..=spread))).collect();
    let prod: f64 = s[..d_b - 1].iter().product();
    s[d_b - 1] = 1.0 / prod;
    let t = (0..d_b).map(|_| rng.random_range(-1.0..1.0)).collect();
    (s, t)
}

/// Two grid points that a non-volume-preserving map sends to one bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollisionWitness {
    pub scale: f64,
    pub k: u32,
    pub x1: f64,
    pub x2: f64,
    pub bin: f64,
}

/// Scan the `k`-precision grid upwards from 0 for two points whose images
/// under `x ↦ scale · x`, re-quantized at `k`, coincide.
pub fn bijection_failure_demo(scale: f64, k: u32) -> Option<CollisionWitness> {
    let limit = 1i64 << (k + 2);
    let mut seen: HashMap<i64, i64> = HashMap::new();
    for m in 0..limit {
        let x = fixnum::mantissa_to_real(m, k);
        let z = fixnum::quantize_mantissa(scale * x, k).ok()?;
        if let Some(&prev) = seen.get(&z) {
            return Some(CollisionWitness {
                scale,
                k,
                x1: fixnum::mantissa_to_real(prev, k),
                x2: x,
                bin: fixnum::mantissa_to_real(z, k),
            });
        }
        seen.insert(z, m);
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapReport {
    pub scale: f64,
    pub dims: usize,
    pub samples: usize,
    pub mean_gap_bits: f64,
    pub expected_bits: f64,
}

/// For `z = scale · x` with `x ∼ prior`, the mean of
/// `−log2(p_Z(⌊z⌉) δ) + log2(p_X(x) δ)` where `p_Z(z) = p_X(z / scale) / scale`.
/// Comes out near `d · log2(scale)`.
pub fn codelength_gap_demo(scale: f64, prior: &MixGaussPrior, k: u32, samples: usize, seed: u64) -> Result<GapReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = prior.dims();
    let mut total = 0.0;
    for _ in 0..samples {
        let x = prior.sample(&mut rng);
        for (i, &xi) in x.iter().enumerate() {
            let zq = fixnum::quantize(scale * xi, k)?.to_real();
            let pz = prior.density(i, zq / scale) / scale;
            total += -pz.log2() + prior.density(i, xi).log2();
        }
    }
    Ok(GapReport {
        scale,
        dims: d,
        samples,
        mean_gap_bits: total / samples as f64,
        expected_bits: d as f64 * scale.log2(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorPoint {
    pub k: u32,
    pub max_error: f64,
    /// `max_error(k) / max_error(previous k)`.
    pub ratio: Option<f64>,
}

/// Largest `|flow_forward(⌊x⌉_k) − continuous_eval(x)|_∞` over uniform
/// samples `x ∈ [-0.5, 0.5)^d`.
pub fn max_flow_error(model: &FlowModel, k: u32, c_bits: u32, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.input_dim();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let xq = QuantVector::from_reals(&x, k)?;
        let zq = flow_forward(model, &xq, AuxRegister::ZERO, c_bits)?.concat_reals();
        let z = model.continuous_eval(&x)?;
        for (a, b) in zq.iter().zip(&z) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Error curve over `k_values` on one model.
pub fn error_scaling_probe(
    model: &FlowModel,
    k_values: &[u32],
    c_bits: u32,
    samples: usize,
    seed: u64,
) -> Result<Vec<ErrorPoint>> {
    let mut out: Vec<ErrorPoint> = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let e = max_flow_error(model, k, c_bits, samples, seed)?;
        let ratio = out.last().map(|p| e / p.max_error);
        out.push(ErrorPoint { k, max_error: e, ratio });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthPoint {
    pub blocks: usize,
    pub max_error: f64,
}

/// Error at fixed `k` for generated models of increasing depth, perturbed
/// with the same strength.
#[allow(clippy::too_many_arguments)]
pub fn depth_sweep(
    shape: &[usize],
    depths: &[usize],
    strength: f64,
    k: u32,
    c_bits: u32,
    samples: usize,
    seed: u64,
) -> Result<Vec<DepthPoint>> {
    depths
        .iter()
        .map(|&blocks| {
            let mut m = FlowModel::random_init(shape.to_vec(), blocks, 1, seed)?;
            m.perturb(strength, seed ^ 0x5eed);
            Ok(DepthPoint { blocks, max_error: max_flow_error(&m, k, c_bits, samples, seed)? })
        })
        .collect()
}
