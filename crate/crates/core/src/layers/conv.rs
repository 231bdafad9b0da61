//! Invertible 1×1 convolution `W = P L Λ U` applied along the channel axis,
//! plus the standalone permutation layer.
//!
//! The flat latent vector is read as consecutive groups of `channels`
//! values (one group per pixel). Triangular products add one rounded dot
//! product per output element, so they invert by substitution; the diagonal
//! goes through MAT.

use crate::error::{Error, Result};
use crate::fixnum::{self, QuantVector};
use crate::mat::{self, AuxRegister, Mat};
use rand::seq::SliceRandom;
use rand::Rng;

fn rounded_dot(row: &[f64], x: &[i64]) -> Result<i64> {
    let mut acc = 0.0f64;
    for (w, &m) in row.iter().zip(x) {
        acc += w * m as f64;
    }
    if !acc.is_finite() {
        return Err(Error::Overflow("triangular dot product is not finite".into()));
    }
    // Scaling by 2^±k is exact, so rounding the mantissa-space sum equals
    // quantizing the real-valued dot product at precision k.
    let r = fixnum::round_half_away(acc);
    if r.abs() >= fixnum::MANTISSA_LIMIT as f64 {
        return Err(Error::Overflow(format!("triangular dot product {acc:e} exceeds the guard")));
    }
    Ok(r as i64)
}

fn check_square(m: &[f64], c: usize, x: usize) -> Result<()> {
    if m.len() != c * c || x != c {
        return Err(Error::Precondition(format!(
            "matrix of {} entries does not match {c} channels / input of {x}",
            m.len()
        )));
    }
    Ok(())
}

/// `z_i = x_i + ⌊Σ_{j>i} u_ij x_j⌉`, in place.
pub fn tri_upper_forward_in_place(x: &mut [i64], upper: &[f64]) -> Result<()> {
    let c = x.len();
    for i in 0..c.saturating_sub(1) {
        let d = rounded_dot(&upper[i * c + i + 1..(i + 1) * c], &x[i + 1..])?;
        x[i] = fixnum::checked_add(x[i], d)?;
    }
    Ok(())
}

/// Back substitution for [`tri_upper_forward_in_place`], from the last
/// element up.
pub fn tri_upper_inverse_in_place(z: &mut [i64], upper: &[f64]) -> Result<()> {
    let c = z.len();
    for i in (0..c.saturating_sub(1)).rev() {
        let d = rounded_dot(&upper[i * c + i + 1..(i + 1) * c], &z[i + 1..])?;
        z[i] = fixnum::checked_add(z[i], -d)?;
    }
    Ok(())
}

/// `z_i = x_i + ⌊Σ_{j<i} l_ij x_j⌉`, in place.
pub fn tri_lower_forward_in_place(x: &mut [i64], lower: &[f64]) -> Result<()> {
    let c = x.len();
    for i in (1..c).rev() {
        let d = rounded_dot(&lower[i * c..i * c + i], &x[..i])?;
        x[i] = fixnum::checked_add(x[i], d)?;
    }
    Ok(())
}

/// Forward substitution for [`tri_lower_forward_in_place`].
pub fn tri_lower_inverse_in_place(z: &mut [i64], lower: &[f64]) -> Result<()> {
    let c = z.len();
    for i in 1..c {
        let d = rounded_dot(&lower[i * c..i * c + i], &z[..i])?;
        z[i] = fixnum::checked_add(z[i], -d)?;
    }
    Ok(())
}

macro_rules! vector_wrapper {
    ($name:ident, $inner:ident) => {
        pub fn $name(x: &QuantVector, matrix: &[f64]) -> Result<QuantVector> {
            check_square(matrix, x.len(), x.len())?;
            let mut out = x.mantissas().to_vec();
            $inner(&mut out, matrix)?;
            Ok(QuantVector::from_raw(out, x.precision()))
        }
    };
}

vector_wrapper!(tri_upper_forward, tri_upper_forward_in_place);
vector_wrapper!(tri_upper_inverse, tri_upper_inverse_in_place);
vector_wrapper!(tri_lower_forward, tri_lower_forward_in_place);
vector_wrapper!(tri_lower_inverse, tri_lower_inverse_in_place);

/// Diagonal scaling through MAT with zero offset.
pub fn diag_forward(
    x: &QuantVector,
    lambda: &[f64],
    r: AuxRegister,
    c_bits: u32,
) -> Result<(QuantVector, AuxRegister)> {
    mat::mat_forward(x, lambda, &vec![0.0; lambda.len()], r, c_bits)
}

pub fn diag_inverse(
    z: &QuantVector,
    lambda: &[f64],
    r: AuxRegister,
    c_bits: u32,
) -> Result<(QuantVector, AuxRegister)> {
    mat::mat_inverse(z, lambda, &vec![0.0; lambda.len()], r, c_bits)
}

/// `z[i] = x[perm[i]]`.
pub fn permute_forward<T: Copy>(x: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&p| x[p]).collect()
}

pub fn permute_inverse<T: Copy + Default>(z: &[T], perm: &[usize]) -> Vec<T> {
    let mut x = vec![T::default(); z.len()];
    for (i, &p) in perm.iter().enumerate() {
        x[p] = z[i];
    }
    x
}

pub fn validate_permutation(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Model(format!("invalid permutation entry {p}")));
        }
    }
    Ok(())
}

pub fn random_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Fixed reordering of the whole latent vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationLayer {
    pub perm: Vec<usize>,
}

impl PermutationLayer {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        validate_permutation(&perm)?;
        Ok(Self { perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn forward(&self, x: &QuantVector) -> Result<QuantVector> {
        self.check(x.len())?;
        Ok(QuantVector::from_raw(permute_forward(x.mantissas(), &self.perm), x.precision()))
    }

    pub fn inverse(&self, z: &QuantVector) -> Result<QuantVector> {
        self.check(z.len())?;
        Ok(QuantVector::from_raw(permute_inverse(z.mantissas(), &self.perm), z.precision()))
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.perm.len() {
            return Err(Error::Precondition(format!("permutation of {} applied to {n}", self.perm.len())));
        }
        Ok(())
    }
}

/// `W = P L Λ U` over `channels`, shared by every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1Layer {
    pub channels: usize,
    pub perm: Vec<usize>,
    /// Unit lower-triangular, row-major `channels × channels`.
    pub lower: Vec<f64>,
    /// Strictly positive, `∏ λ_i = 1`.
    pub lambda: Vec<f64>,
    /// Unit upper-triangular, row-major `channels × channels`.
    pub upper: Vec<f64>,
}

fn identity(c: usize) -> Vec<f64> {
    let mut m = vec![0.0; c * c];
    for i in 0..c {
        m[i * c + i] = 1.0;
    }
    m
}

impl Conv1x1Layer {
    pub fn new(perm: Vec<usize>, lower: Vec<f64>, lambda: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let layer = Self { channels: perm.len(), perm, lower, lambda, upper };
        layer.validate()?;
        Ok(layer)
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            channels,
            perm: (0..channels).collect(),
            lower: identity(channels),
            lambda: vec![1.0; channels],
            upper: identity(channels),
        }
    }

    /// Random channel permutation, trivial `L`, `Λ`, `U`.
    pub fn random_init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        Self { perm: random_permutation(channels, rng), ..Self::identity(channels) }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 {
            return Err(Error::Model("conv1x1 needs at least one channel".into()));
        }
        validate_permutation(&self.perm)?;
        if self.perm.len() != c || self.lower.len() != c * c || self.upper.len() != c * c || self.lambda.len() != c {
            return Err(Error::Model(format!("conv1x1 factor sizes do not match {c} channels")));
        }
        if self.lower.iter().chain(&self.upper).chain(&self.lambda).any(|v| !v.is_finite()) {
            return Err(Error::Model("conv1x1 has non-finite parameters".into()));
        }
        for i in 0..c {
            for j in 0..c {
                let (l, u) = (self.lower[i * c + j], self.upper[i * c + j]);
                if i == j && (l != 1.0 || u != 1.0) {
                    return Err(Error::Model(format!("conv1x1 L/U diagonal at {i} is not 1")));
                }
                if j > i && l != 0.0 {
                    return Err(Error::Model(format!(
                        "conv1x1 L has a non-zero entry above the diagonal at ({i},{j})"
                    )));
                }
                if j < i && u != 0.0 {
                    return Err(Error::Model(format!(
                        "conv1x1 U has a non-zero entry below the diagonal at ({i},{j})"
                    )));
                }
            }
        }
        if self.lambda.iter().any(|&l| l <= 0.0) {
            return Err(Error::Model("conv1x1 Λ must be strictly positive".into()));
        }
        let logs: Vec<f64> = self.lambda.iter().map(|&l| l.ln()).collect();
        mat::check_volume_preserving(&logs)
    }

    fn check(&self, n: usize) -> Result<()> {
        if !n.is_multiple_of(self.channels) {
            return Err(Error::Precondition(format!("conv1x1 over {} channels applied to {n} values", self.channels)));
        }
        Ok(())
    }

    fn diag_mat(&self, k: u32, c_bits: u32) -> Result<Mat> {
        Mat::new(&self.lambda, &vec![0.0; self.channels], k, c_bits)
    }

    pub fn forward(&self, x: &QuantVector, r: AuxRegister, c_bits: u32) -> Result<(QuantVector, AuxRegister)> {
        self.check(x.len())?;
        let diag = self.diag_mat(x.precision(), c_bits)?;
        let mut r = r;
        let mut out = Vec::with_capacity(x.len());
        for px in x.mantissas().chunks_exact(self.channels) {
            let mut v = px.to_vec();
            tri_upper_forward_in_place(&mut v, &self.upper)?;
            diag.forward_in_place(&mut v, &mut r)?;
            tri_lower_forward_in_place(&mut v, &self.lower)?;
            out.extend(self.perm.iter().map(|&p| v[p]));
        }
        Ok((QuantVector::from_raw(out, x.precision()), r))
    }

    pub fn inverse(&self, z: &QuantVector, r: AuxRegister, c_bits: u32) -> Result<(QuantVector, AuxRegister)> {
        self.check(z.len())?;
        let diag = self.diag_mat(z.precision(), c_bits)?;
        let mut r = r;
        let mut out = vec![0i64; z.len()];
        let n_px = z.len() / self.channels;
        // Pixels are undone in reverse order so the register unwinds LIFO.
        for p in (0..n_px).rev() {
            let span = p * self.channels..(p + 1) * self.channels;
            let mut v = permute_inverse(&z.mantissas()[span.clone()], &self.perm);
            tri_lower_inverse_in_place(&mut v, &self.lower)?;
            diag.inverse_in_place(&mut v, &mut r)?;
            tri_upper_inverse_in_place(&mut v, &self.upper)?;
            out[span].copy_from_slice(&v);
        }
        Ok((QuantVector::from_raw(out, z.precision()), r))
    }

    /// Dense `W = P L Λ U` as a row-major matrix.
    pub fn weight_matrix(&self) -> Vec<f64> {
        let c = self.channels;
        let mut lu = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for m in 0..c {
                    acc += self.lower[i * c + m] * self.lambda[m] * self.upper[m * c + j];
                }
                lu[i * c + j] = acc;
            }
        }
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c..(i + 1) * c].copy_from_slice(&lu[self.perm[i] * c..(self.perm[i] + 1) * c]);
        }
        w
    }

    /// Unquantized reference: plain matrix product per pixel.
    pub fn forward_continuous(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len())?;
        let c = self.channels;
        let w = self.weight_matrix();
        let mut out = Vec::with_capacity(x.len());
        for px in x.chunks_exact(c) {
            for row in w.chunks_exact(c) {
                out.push(row.iter().zip(px).map(|(a, b)| a * b).sum());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qv(m: &[i64], k: u32) -> QuantVector {
        QuantVector::new(m.to_vec(), k).unwrap()
    }

    fn random_upper<R: Rng>(c: usize, rng: &mut R) -> Vec<f64> {
        let mut u = identity(c);
        for i in 0..c {
            for j in i + 1..c {
                u[i * c + j] = rng.random_range(-1.5..1.5);
            }
        }
        u
    }

    fn transpose(m: &[f64], c: usize) -> Vec<f64> {
        (0..c * c).map(|idx| m[(idx % c) * c + idx / c]).collect()
    }

    #[test]
    fn upper_hand_trace() {
        // c=2, u12=0.5, k=1, x=(0.5, 1.0): z1 = 0.5 + ⌊0.5⌉ = 1.0.
        let u = [1.0, 0.5, 0.0, 1.0];
        let x = qv(&[1, 2], 1);
        let z = tri_upper_forward(&x, &u).unwrap();
        assert_eq!(z.to_reals(), vec![1.0, 1.0]);
        assert_eq!(tri_upper_inverse(&z, &u).unwrap(), x);
    }

    #[test]
    fn lower_hand_trace() {
        // c=2, l21=0.5, k=1, x=(1.0, 0.5): z2 = 0.5 + ⌊0.5⌉ = 1.0.
        let l = [1.0, 0.0, 0.5, 1.0];
        let x = qv(&[2, 1], 1);
        let z = tri_lower_forward(&x, &l).unwrap();
        assert_eq!(z.to_reals(), vec![1.0, 1.0]);
        assert_eq!(tri_lower_inverse(&z, &l).unwrap(), x);
    }

    #[test]
    fn identity_factors_are_identity() {
        let x = qv(&[5, -3, 8], 4);
        assert_eq!(tri_upper_forward(&x, &identity(3)).unwrap(), x);
        assert_eq!(tri_lower_forward(&x, &identity(3)).unwrap(), x);
        let (z, r) = diag_forward(&x, &[1.0; 3], AuxRegister::new(7, 16).unwrap(), 16).unwrap();
        assert_eq!((z, r.value()), (x.clone(), 7));
        let conv = Conv1x1Layer::identity(3);
        let xx = qv(&[1, 2, 3, 4, 5, 6], 2);
        let (z, r) = conv.forward(&xx, AuxRegister::ZERO, 16).unwrap();
        assert_eq!((z, r), (xx, AuxRegister::ZERO));
    }

    #[test]
    fn exhaustive_triangular_round_trip() {
        // c=3, k=2, all mantissas in [-4, 4).
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let u = random_upper(3, &mut rng);
            let l = transpose(&random_upper(3, &mut rng), 3);
            for a in -4..4 {
                for b in -4..4 {
                    for c in -4..4 {
                        let x = qv(&[a, b, c], 2);
                        let zu = tri_upper_forward(&x, &u).unwrap();
                        assert_eq!(tri_upper_inverse(&zu, &u).unwrap(), x);
                        let zl = tri_lower_forward(&x, &l).unwrap();
                        assert_eq!(tri_lower_inverse(&zl, &l).unwrap(), x);
                    }
                }
            }
        }
    }

    #[test]
    fn diag_trace_and_round_trip() {
        let (z, r) = diag_forward(&qv(&[3, 5], 0), &[2.0, 0.5], AuxRegister::ZERO, 4).unwrap();
        assert_eq!((z.mantissas(), r.value()), (&[6i64, 2][..], 8));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let lambda = [a.exp(), b.exp(), (-a - b).exp()];
            let x = qv(&[rng.random_range(-999..999), rng.random_range(-999..999), rng.random_range(-999..999)], 8);
            let r = AuxRegister::new(rng.random_range(0..65536), 16).unwrap();
            let (z, r2) = diag_forward(&x, &lambda, r, 16).unwrap();
            assert_eq!(diag_inverse(&z, &lambda, r2, 16).unwrap(), (x, r));
        }
    }

    #[test]
    fn permutations() {
        let x = [10i64, 20, 30, 40];
        let id = [0usize, 1, 2, 3];
        assert_eq!(permute_forward(&x, &id), x.to_vec());
        let rev = [3usize, 2, 1, 0];
        assert_eq!(permute_forward(&x, &rev), vec![40, 30, 20, 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..50 {
            let p = random_permutation(n, &mut rng);
            let v: Vec<i64> = (0..n as i64).map(|i| i * 7 - 3).collect();
            assert_eq!(permute_inverse(&permute_forward(&v, &p), &p), v);
        }
        assert!(validate_permutation(&[0, 0, 1]).is_err());
        assert!(validate_permutation(&[0, 3, 1]).is_err());
    }

    #[test]
    fn conv_composition_hand_trace() {
        // U: u12 = 0.5, Λ = (2, 0.5), L: l21 = 0.5, P = swap; k=0, C=4, x=(2, 5).
        // U: (2 + ⌊2.5⌉, 5) = (5, 5); Λ: v=80 → y=10 r=0, v=40 → y=2 r=8;
        // L: (10, 2 + ⌊5⌉) = (10, 7); P: (7, 10).
        let conv =
            Conv1x1Layer::new(vec![1, 0], vec![1.0, 0.0, 0.5, 1.0], vec![2.0, 0.5], vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        let x = qv(&[2, 5], 0);
        let (z, r) = conv.forward(&x, AuxRegister::ZERO, 4).unwrap();
        assert_eq!((z.mantissas(), r.value()), (&[7i64, 10][..], 8));
        assert_eq!(conv.inverse(&z, r, 4).unwrap(), (x, AuxRegister::ZERO));
    }

    #[test]
    fn conv_random_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..300 {
            let c = rng.random_range(1..=5);
            let mut logs: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mean = logs.iter().sum::<f64>() / c as f64;
            logs.iter_mut().for_each(|l| *l -= mean);
            // Re-centre in product space so the volume check passes.
            let mut lambda: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
            let prod: f64 = lambda.iter().product();
            lambda[0] /= prod;
            let conv = Conv1x1Layer::new(
                random_permutation(c, &mut rng),
                transpose(&random_upper(c, &mut rng), c),
                lambda,
                random_upper(c, &mut rng),
            )
            .unwrap();
            let pixels = rng.random_range(1..6);
            let x = QuantVector::new((0..c * pixels).map(|_| rng.random_range(-5000..5000)).collect(), 12).unwrap();
            let r = AuxRegister::new(rng.random_range(0..65536), 16).unwrap();
            let (z, r2) = conv.forward(&x, r, 16).unwrap();
            assert_eq!(conv.inverse(&z, r2, 16).unwrap(), (x, r));
        }
    }

    #[test]
    fn conv_validation() {
        let mut bad = Conv1x1Layer::identity(2);
        bad.lower[0] = 0.9;
        assert!(bad.validate().is_err());
        let mut bad = Conv1x1Layer::identity(2);
        bad.upper[2] = 0.3;
        assert!(bad.validate().is_err());
        let mut bad = Conv1x1Layer::identity(2);
        bad.lambda = vec![2.0, 0.6];
        assert!(bad.validate().is_err());
        let mut bad = Conv1x1Layer::identity(2);
        bad.lambda = vec![-1.0, -1.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn continuous_matches_matrix() {
        let conv =
            Conv1x1Layer::new(vec![1, 0], vec![1.0, 0.0, 0.5, 1.0], vec![2.0, 0.5], vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        // Λ U x = (2·(2 + 2.5), 0.5·5) = (9, 2.5); L: (9, 2.5 + 4.5) = (9, 7); P: (7, 9).
        assert_eq!(conv.forward_continuous(&[2.0, 5.0]).unwrap(), vec![7.0, 9.0]);
    }
}
