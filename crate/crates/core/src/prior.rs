//! Discretized latent distributions exposed as integer CDFs for rANS.
//!
//! Every coded dimension gets a bounded window of `N` bins of width `2^-k`.
//! Frequencies are `cdf(i) = round(Φ(edge_i) · (2^n − N)) + i` with the
//! ends pinned to `0` and `2^n`, so every bin has frequency ≥ 1 and the tail
//! mass outside the window is absorbed by the two edge bins. Windows depend
//! only on model parameters, never on the data.

use crate::error::{Error, Result};
use crate::fixnum;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Frequency precision used by the codec unless configured otherwise.
pub const DEFAULT_FREQ_BITS: u32 = 30;

/// Largest frequency precision the 64-bit coder supports.
pub const MAX_FREQ_BITS: u32 = 30;

/// Default half-width of the coding window, in latent units.
pub const DEFAULT_SUPPORT: f64 = 2.0;

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t * std::f64::consts::FRAC_1_SQRT_2)
}

/// Gaussian CDF. A zero standard deviation degrades to a step at the mean.
#[inline]
pub fn gauss_cdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let t = (x - mean) / sigma;
    if t.is_nan() {
        return 0.5;
    }
    std_normal_cdf(t)
}

/// Per-dimension mixture of `K` Gaussians with softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixGaussPrior {
    dims: usize,
    components: usize,
    logits: Vec<f64>,
    means: Vec<f64>,
    log_vars: Vec<f64>,
    weights: Vec<f64>,
    sigmas: Vec<f64>,
}

impl MixGaussPrior {
    /// Parameters are `dims × components`, row-major.
    pub fn new(dims: usize, components: usize, logits: Vec<f64>, means: Vec<f64>, log_vars: Vec<f64>) -> Result<Self> {
        let n = dims * components;
        if dims == 0 || components == 0 || logits.len() != n || means.len() != n || log_vars.len() != n {
            return Err(Error::Model(format!("mixture prior needs {dims}×{components} parameters per field")));
        }
        if logits.iter().chain(&means).chain(&log_vars).any(|v| !v.is_finite()) {
            return Err(Error::Model("mixture prior has non-finite parameters".into()));
        }
        let mut weights = Vec::with_capacity(n);
        for row in logits.chunks_exact(components) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|l| libm::exp(l - max)).collect();
            let total: f64 = exps.iter().sum();
            weights.extend(exps.iter().map(|e| e / total));
        }
        let sigmas: Vec<f64> = log_vars.iter().map(|g| libm::exp(0.5 * g)).collect();
        if weights.iter().any(|w| *w <= 0.0) || sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Model("mixture prior has a vanishing weight or scale".into()));
        }
        Ok(Self { dims, components, logits, means, log_vars, weights, sigmas })
    }

    /// Same components on every dimension.
    pub fn shared(dims: usize, weights: &[f64], means: &[f64], stds: &[f64]) -> Result<Self> {
        if weights.len() != means.len() || weights.len() != stds.len() {
            return Err(Error::Model("mixture component lists differ in length".into()));
        }
        if weights.iter().chain(stds).any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::Model("mixture weights and stds must be positive".into()));
        }
        let rep = |v: Vec<f64>| v.iter().cloned().cycle().take(dims * v.len()).collect::<Vec<_>>();
        Self::new(
            dims,
            weights.len(),
            rep(weights.iter().map(|w| w.ln()).collect()),
            rep(means.to_vec()),
            rep(stds.iter().map(|s| 2.0 * s.ln()).collect()),
        )
    }

    /// Four equally weighted components spread over `[-0.3, 0.3]`.
    pub fn standard(dims: usize) -> Self {
        Self::shared(dims, &[0.25; 4], &[-0.3, -0.1, 0.1, 0.3], &[0.15; 4]).expect("valid constants")
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn log_vars(&self) -> &[f64] {
        &self.log_vars
    }

    fn row(&self, dim: usize) -> std::ops::Range<usize> {
        dim * self.components..(dim + 1) * self.components
    }

    fn dist(&self, dim: usize) -> Dist<'_> {
        let r = self.row(dim);
        Dist::Mixture { weights: &self.weights[r.clone()], means: &self.means[r.clone()], sigmas: &self.sigmas[r] }
    }

    pub fn weights(&self, dim: usize) -> &[f64] {
        &self.weights[self.row(dim)]
    }

    pub fn sigmas(&self, dim: usize) -> &[f64] {
        &self.sigmas[self.row(dim)]
    }

    pub fn mixture_mean(&self, dim: usize) -> f64 {
        let r = self.row(dim);
        self.weights[r.clone()].iter().zip(&self.means[r]).map(|(w, m)| w * m).sum()
    }

    pub fn cdf(&self, dim: usize, x: f64) -> f64 {
        self.dist(dim).cdf(x)
    }

    pub fn density(&self, dim: usize, x: f64) -> f64 {
        let r = self.row(dim);
        let mut p = 0.0;
        for ((w, m), s) in self.weights[r.clone()].iter().zip(&self.means[r.clone()]).zip(&self.sigmas[r]) {
            let t = (x - m) / s;
            p += w * libm::exp(-0.5 * t * t) / (s * (2.0 * std::f64::consts::PI).sqrt());
        }
        p
    }

    /// One draw per dimension.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dims)
            .map(|d| {
                let u: f64 = rng.random();
                let w = self.weights(d);
                let mut acc = 0.0;
                let mut c = w.len() - 1;
                for (i, wi) in w.iter().enumerate() {
                    acc += wi;
                    if u < acc {
                        c = i;
                        break;
                    }
                }
                let r = self.row(d);
                Normal::new(self.means[r.start + c], self.sigmas[r.start + c]).expect("positive sigma").sample(rng)
            })
            .collect()
    }
}

/// Distribution over the final latent.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    MixGauss(MixGaussPrior),
    /// Uniform over `[lo, hi)` on every dimension.
    Uniform {
        dims: usize,
        lo: f64,
        hi: f64,
    },
}

impl Prior {
    pub fn dims(&self) -> usize {
        match self {
            Prior::MixGauss(p) => p.dims(),
            Prior::Uniform { dims, .. } => *dims,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Prior::MixGauss(_) => Ok(()),
            Prior::Uniform { dims, lo, hi } => {
                if *dims == 0 || !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::Model(format!("uniform prior [{lo}, {hi}) over {dims} dims is invalid")));
                }
                Ok(())
            }
        }
    }

    /// Coding table for one dimension at precision `k`.
    pub fn quantized(&self, dim: usize, k: u32, freq_bits: u32, support: f64) -> Result<QuantizedCdf<'_>> {
        match self {
            Prior::MixGauss(p) => {
                let center = fixnum::quantize_mantissa(p.mixture_mean(dim), k)?;
                QuantizedCdf::windowed(p.dist(dim), center, k, freq_bits, support)
            }
            Prior::Uniform { lo, hi, .. } => QuantizedCdf::uniform(*lo, *hi, k, freq_bits),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Dist<'a> {
    Mixture { weights: &'a [f64], means: &'a [f64], sigmas: &'a [f64] },
    Gaussian { mean: f64, sigma: f64 },
    Uniform,
}

impl Dist<'_> {
    fn cdf(&self, x: f64) -> f64 {
        match *self {
            Dist::Mixture { weights, means, sigmas } => {
                let mut acc = 0.0;
                for ((w, m), s) in weights.iter().zip(means).zip(sigmas) {
                    acc += w * gauss_cdf(x, *m, *s);
                }
                acc.clamp(0.0, 1.0)
            }
            Dist::Gaussian { mean, sigma } => gauss_cdf(x, mean, sigma),
            Dist::Uniform => unreachable!("uniform tables do not query a CDF"),
        }
    }
}

/// Monotone integer CDF over a window of `N` bins starting at mantissa `lo`.
#[derive(Debug, Clone)]
pub struct QuantizedCdf<'a> {
    dist: Dist<'a>,
    lo: i64,
    bins: u64,
    k: u32,
    freq_bits: u32,
}

fn check_freq_bits(freq_bits: u32) -> Result<()> {
    if freq_bits == 0 || freq_bits > MAX_FREQ_BITS {
        return Err(Error::Config(format!("frequency bits n={freq_bits} outside 1..={MAX_FREQ_BITS}")));
    }
    Ok(())
}

/// Half-width of the window in bins.
pub fn support_half_bins(support: f64, k: u32) -> Result<i64> {
    if !(support.is_finite() && support > 0.0) {
        return Err(Error::Config(format!("support radius {support} must be positive")));
    }
    Ok(fixnum::quantize_mantissa(support, k)?.max(1))
}

impl<'a> QuantizedCdf<'a> {
    fn windowed(dist: Dist<'a>, center: i64, k: u32, freq_bits: u32, support: f64) -> Result<Self> {
        check_freq_bits(freq_bits)?;
        let half = support_half_bins(support, k)?;
        let bins = 2 * half as u64;
        if bins >= 1u64 << freq_bits {
            return Err(Error::Config(format!("window of {bins} bins does not fit in 2^{freq_bits} frequency slots")));
        }
        let lo = fixnum::checked_add(center, -half)?;
        fixnum::checked_add(center, half)?;
        Ok(Self { dist, lo, bins, k, freq_bits })
    }

    /// Conditional Gaussian `N(mean, exp(log_var))` centred on `round(mean·2^k)`.
    pub fn gaussian(mean: f64, log_var: f64, k: u32, freq_bits: u32, support: f64) -> Result<QuantizedCdf<'static>> {
        if !(mean.is_finite() && log_var.is_finite()) {
            return Err(Error::Model(format!("conditional prior parameters ({mean}, {log_var}) are not finite")));
        }
        let center = fixnum::quantize_mantissa(mean, k)?;
        let sigma = libm::exp(0.5 * log_var);
        QuantizedCdf::windowed(Dist::Gaussian { mean, sigma }, center, k, freq_bits, support)
    }

    /// Uniform over the grid points of `[lo, hi)`; exact `log2 N` bits per
    /// symbol when `N` is a power of two.
    pub fn uniform(lo: f64, hi: f64, k: u32, freq_bits: u32) -> Result<QuantizedCdf<'static>> {
        check_freq_bits(freq_bits)?;
        let a = fixnum::quantize_mantissa(lo, k)?;
        let b = fixnum::quantize_mantissa(hi, k)?;
        if b <= a {
            return Err(Error::Config(format!("uniform window [{lo}, {hi}) is empty at k={k}")));
        }
        let bins = (b - a) as u64;
        if bins > 1u64 << freq_bits {
            return Err(Error::Config(format!(
                "uniform window of {bins} bins does not fit in 2^{freq_bits} frequency slots"
            )));
        }
        Ok(QuantizedCdf { dist: Dist::Uniform, lo: a, bins, k, freq_bits })
    }

    pub fn bins(&self) -> u64 {
        self.bins
    }

    pub fn freq_bits(&self) -> u32 {
        self.freq_bits
    }

    pub fn total(&self) -> u64 {
        1u64 << self.freq_bits
    }

    /// Mantissa range `[lo, hi)` covered by the window.
    pub fn window(&self) -> (i64, i64) {
        (self.lo, self.lo + self.bins as i64)
    }

    fn edge(&self, i: u64) -> f64 {
        fixnum::mantissa_to_real(self.lo + i as i64, self.k) - fixnum::mantissa_to_real(1, self.k + 1)
    }

    /// Cumulative frequency of bins `0..i`.
    pub fn cdf(&self, i: u64) -> u64 {
        debug_assert!(i <= self.bins);
        let total = self.total();
        if i == 0 {
            return 0;
        }
        if i >= self.bins {
            return total;
        }
        match self.dist {
            Dist::Uniform => {
                // round(i · (total − N) / N) + i, exactly in integers.
                let (i, n) = (i as u128, self.bins as u128);
                ((2 * i * (total as u128 - n) + n) / (2 * n)) as u64 + i as u64
            }
            dist => {
                let spread = (total - self.bins) as f64;
                let phi = dist.cdf(self.edge(i));
                fixnum::round_half_away(phi * spread) as u64 + i
            }
        }
    }

    /// `(cum, freq)` of bin `i`.
    pub fn interval(&self, i: u64) -> (u64, u64) {
        let lo = self.cdf(i);
        (lo, self.cdf(i + 1) - lo)
    }

    /// The unique bin with `cdf(i) ≤ b < cdf(i + 1)`.
    pub fn symbol_from_cdf(&self, b: u64) -> u64 {
        debug_assert!(b < self.total());
        let (mut lo, mut hi) = (0u64, self.bins);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.cdf(mid) <= b {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn index_of(&self, dim: usize, mantissa: i64) -> Result<u64> {
        let (lo, hi) = self.window();
        if mantissa < lo || mantissa >= hi {
            return Err(Error::OutOfSupport { dim, value: mantissa, lo, hi });
        }
        Ok((mantissa - lo) as u64)
    }

    pub fn mantissa_of(&self, i: u64) -> i64 {
        self.lo + i as i64
    }

    /// Exact probability of bin `i` under the continuous distribution
    /// (no tail absorption).
    pub fn bin_mass(&self, i: u64) -> f64 {
        match self.dist {
            Dist::Uniform => 1.0 / self.bins as f64,
            dist => dist.cdf(self.edge(i + 1)) - dist.cdf(self.edge(i)),
        }
    }

    /// `−log2(freq / 2^n)` for bin `i`.
    pub fn code_length(&self, i: u64) -> f64 {
        let (_, f) = self.interval(i);
        self.freq_bits as f64 - (f as f64).log2()
    }
}

/// Mass of the `2^-k` bin centred on `z` under a mixture dimension.
pub fn bin_mass(prior: &MixGaussPrior, dim: usize, z: fixnum::QuantScalar) -> f64 {
    let half = fixnum::mantissa_to_real(1, z.precision() + 1);
    prior.cdf(dim, z.to_real() + half) - prior.cdf(dim, z.to_real() - half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixnum::QuantScalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_gauss(dims: usize) -> MixGaussPrior {
        MixGaussPrior::shared(dims, &[1.0], &[0.0], &[1.0]).unwrap()
    }

    #[test]
    fn bin_mass_examples() {
        let p = unit_gauss(1);
        let m = bin_mass(&p, 0, QuantScalar::new(0, 14).unwrap());
        let expect = libm::ldexp(1.0, -14) / (2.0 * std::f64::consts::PI).sqrt();
        assert!((m - expect).abs() / expect < 1e-8, "{m} vs {expect}");
        for z in [1i64, 77, 5000, 16383] {
            let a = bin_mass(&p, 0, QuantScalar::new(z, 14).unwrap());
            let b = bin_mass(&p, 0, QuantScalar::new(-z, 14).unwrap());
            assert!((a - b).abs() <= 1e-18, "{z}");
        }
    }

    #[test]
    fn wide_support_total_mass() {
        // S = 32σ with σ = 1/16 at k=6 gives a few hundred bins; the window
        // holds all but a negligible tail.
        let p = MixGaussPrior::shared(1, &[1.0], &[0.0], &[1.0 / 16.0]).unwrap();
        let prior = Prior::MixGauss(p);
        let q = prior.quantized(0, 6, 16, 2.0).unwrap();
        let total: f64 = (0..q.bins()).map(|i| q.bin_mass(i)).sum();
        assert!(1.0 - total < libm::ldexp(1.0, -20));
    }

    #[test]
    fn boundaries_and_monotonicity() {
        let p = Prior::MixGauss(MixGaussPrior::standard(1));
        for (k, s, n) in [(2u32, 2.0, 8u32), (4, 1.0, 12), (6, 2.0, 16), (8, 3.0, 16)] {
            let q = p.quantized(0, k, n, s).unwrap();
            assert_eq!(q.cdf(0), 0);
            assert_eq!(q.cdf(q.bins()), 1 << n);
            for i in 0..q.bins() {
                assert!(q.interval(i).1 >= 1, "k={k} i={i}");
            }
        }
    }

    #[test]
    fn uniform_formula() {
        let q = QuantizedCdf::uniform(-0.5, 0.5, 3, 16).unwrap();
        assert_eq!(q.bins(), 8);
        for i in 0..=8 {
            assert_eq!(q.cdf(i), i * 8192);
        }
        assert_eq!(q.window(), (-4, 4));
        let q = QuantizedCdf::uniform(0.0, 3.0, 0, 4).unwrap();
        assert_eq!((q.cdf(1), q.cdf(2), q.cdf(3)), (5, 11, 16));
    }

    #[test]
    fn symbol_lookup() {
        let p = Prior::MixGauss(MixGaussPrior::standard(1));
        let q = p.quantized(0, 6, 16, 2.0).unwrap();
        assert_eq!(q.symbol_from_cdf(0), 0);
        for j in 0..q.bins() {
            assert_eq!(q.symbol_from_cdf(q.cdf(j)), j);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let b = rng.random_range(0..q.total());
            let i = q.symbol_from_cdf(b);
            assert!(q.cdf(i) <= b && b < q.cdf(i + 1));
        }
    }

    #[test]
    fn code_length_matches_mass() {
        let p = Prior::MixGauss(MixGaussPrior::standard(1));
        let q = p.quantized(0, 10, DEFAULT_FREQ_BITS, DEFAULT_SUPPORT).unwrap();
        let mut checked = 0;
        for i in (0..q.bins()).step_by(7) {
            let m = q.bin_mass(i);
            if m >= libm::ldexp(1.0, -12) {
                checked += 1;
                assert!((q.code_length(i) + m.log2()).abs() < 0.01, "bin {i}");
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn gaussian_matches_degenerate_mixture() {
        let mix = Prior::MixGauss(unit_gauss(1));
        let a = mix.quantized(0, 8, 20, 4.0).unwrap();
        let b = QuantizedCdf::gaussian(0.0, 0.0, 8, 20, 4.0).unwrap();
        for i in 0..=a.bins() {
            assert_eq!(a.cdf(i), b.cdf(i));
        }
    }

    #[test]
    fn gaussian_shift_moves_mode() {
        let k = 8;
        let mode = |q: &QuantizedCdf| (0..q.bins()).max_by_key(|&i| q.interval(i).1).map(|i| q.mantissa_of(i)).unwrap();
        let a = QuantizedCdf::gaussian(0.0, (0.1f64).ln(), k, 24, 2.0).unwrap();
        let b = QuantizedCdf::gaussian(0.37, (0.1f64).ln(), k, 24, 2.0).unwrap();
        assert_eq!(mode(&b) - mode(&a), fixnum::quantize_mantissa(0.37, k).unwrap());
    }

    #[test]
    fn window_must_fit() {
        let p = Prior::MixGauss(MixGaussPrior::standard(1));
        assert!(matches!(p.quantized(0, 14, 16, 2.0), Err(Error::Config(_))));
        assert!(p.quantized(0, 14, 30, 2.0).is_ok());
    }

    #[test]
    fn out_of_support() {
        let q = QuantizedCdf::gaussian(0.0, 0.0, 4, 16, 1.0).unwrap();
        assert_eq!(q.window(), (-16, 16));
        assert!(matches!(q.index_of(3, 16), Err(Error::OutOfSupport { dim: 3, .. })));
        assert_eq!(q.index_of(0, -16).unwrap(), 0);
    }

    #[test]
    fn tiny_sigma_still_decodable() {
        let q = QuantizedCdf::gaussian(0.01, -200.0, 6, 16, 1.0).unwrap();
        for i in 0..q.bins() {
            assert!(q.interval(i).1 >= 1);
        }
    }

    #[test]
    fn sampling_moments() {
        let p = MixGaussPrior::shared(2, &[0.5, 0.5], &[-0.15, 0.15], &[0.05, 0.05]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<f64> = (0..20_000).flat_map(|_| p.sample(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.005);
        assert!((var - (0.0025 + 0.0225)).abs() < 0.001);
    }
}
