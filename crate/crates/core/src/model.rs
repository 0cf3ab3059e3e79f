//! Transmission model `y = Hx + z`, QAM constellations, synthetic Rayleigh
//! channels and the Gram/matched-filter precomputation.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Square QAM constellation with unit average energy and per-axis Gray labels.
///
/// Point `l` carries the bit label equal to the binary expansion of `l`
/// (most significant bit first). The first half of the bits select the
/// in-phase level, the second half the quadrature level, each through a
/// reflected Gray code.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    points: Vec<C64>,
    bits_per_symbol: usize,
}

impl Constellation {
    pub fn new(order: usize) -> Result<Self> {
        let bits_per_symbol = match order {
            4 => 2,
            16 => 4,
            64 => 6,
            other => return Err(Error::UnsupportedOrder(other)),
        };
        let axis_bits = bits_per_symbol / 2;
        let side = 1usize << axis_bits;
        let mean_energy = 2.0 * ((side * side) as f64 - 1.0) / 3.0;
        let scale = 1.0 / mean_energy.sqrt();
        let axis_mask = side - 1;

        let points = (0..order)
            .map(|label| {
                let i_bits = label >> axis_bits;
                let q_bits = label & axis_mask;
                let re = axis_level(gray_decode(i_bits), side);
                let im = axis_level(gray_decode(q_bits), side);
                C64::new(re * scale, im * scale)
            })
            .collect();

        Ok(Self {
            points,
            bits_per_symbol,
        })
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    pub fn points(&self) -> &[C64] {
        &self.points
    }

    pub fn point(&self, index: usize) -> C64 {
        self.points[index]
    }

    /// Bit `i` (0 = most significant) of the label of point `index`.
    pub fn bit(&self, index: usize, i: usize) -> u8 {
        ((index >> (self.bits_per_symbol - 1 - i)) & 1) as u8
    }

    pub fn label(&self, index: usize) -> Vec<u8> {
        (0..self.bits_per_symbol)
            .map(|i| self.bit(index, i))
            .collect()
    }

    pub fn max_amplitude(&self) -> f64 {
        self.points.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Index of the constellation point closest to `z` (lowest index on ties).
    pub fn nearest(&self, z: C64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (l, c) in self.points.iter().enumerate() {
            let d = (z - c).norm_sqr();
            if d < best_d {
                best_d = d;
                best = l;
            }
        }
        best
    }
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = g;
    while g > 1 {
        g >>= 1;
        b ^= g;
    }
    b
}

fn axis_level(index: usize, side: usize) -> f64 {
    2.0 * index as f64 - (side as f64 - 1.0)
}

pub fn make_constellation(order: usize) -> Result<Constellation> {
    Constellation::new(order)
}

/// Scaling of the i.i.d. Rayleigh channel entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelScaling {
    /// Entries CN(0, 1/N), so that E[||H||_F^2] = M.
    #[default]
    Frobenius,
    /// Entries CN(0, 1): every user column has expected energy M.
    UnitEntries,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelModel {
    /// Exponential correlation coefficient between adjacent user columns.
    pub correlation: Option<f64>,
    pub scaling: ChannelScaling,
}

impl ChannelModel {
    pub fn generate<R: Rng + ?Sized>(&self, m: usize, n: usize, rng: &mut R) -> Result<CMatrix> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidParameter(format!(
                "channel dimensions must be positive, got {m}x{n}"
            )));
        }
        if m < n {
            log::warn!("generating a {m}x{n} channel with fewer antennas than users");
        }
        let var = match self.scaling {
            ChannelScaling::Frobenius => 1.0 / n as f64,
            ChannelScaling::UnitEntries => 1.0,
        };
        let h = CMatrix::from_fn(m, n, |_, _| complex_normal(rng, var));

        match self.correlation {
            None => Ok(h),
            Some(rho) if !(0.0..1.0).contains(&rho) => Err(Error::InvalidParameter(format!(
                "correlation must lie in [0, 1), got {rho}"
            ))),
            Some(0.0) => Ok(h),
            Some(rho) => {
                // R = L L^H has unit diagonal, so H L^H keeps every column's
                // expected energy and needs no further renormalization.
                let r = DMatrix::<f64>::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32));
                let chol = r
                    .cholesky()
                    .ok_or(Error::NotPositiveDefinite("exponential correlation matrix"))?;
                let upper = chol.l().transpose().map(|v| C64::new(v, 0.0));
                Ok(h * upper)
            }
        }
    }
}

/// Draws an i.i.d. channel with E[||H||_F^2] = M, optionally column-correlated.
pub fn generate_channel<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    rng: &mut R,
    correlation: Option<f64>,
) -> Result<CMatrix> {
    ChannelModel {
        correlation,
        scaling: ChannelScaling::Frobenius,
    }
    .generate(m, n, rng)
}

/// Circularly-symmetric complex normal sample with total variance `var`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re * s, im * s)
}

pub fn draw_symbols<R: Rng + ?Sized>(n: usize, order: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..order)).collect()
}

pub fn symbols_to_vector(indices: &[usize], constellation: &Constellation) -> Result<CVector> {
    let order = constellation.order();
    indices
        .iter()
        .map(|&index| {
            if index < order {
                Ok(constellation.point(index))
            } else {
                Err(Error::SymbolOutOfRange { index, order })
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(CVector::from_vec)
}

/// Maps symbol indices through the constellation and sends them over `h`,
/// adding CN(0, sigma2 I) noise. Returns `(x, y)`.
pub fn transmit<R: Rng + ?Sized>(
    indices: &[usize],
    h: &CMatrix,
    sigma2: f64,
    constellation: &Constellation,
    rng: &mut R,
) -> Result<(CVector, CVector)> {
    if indices.len() != h.ncols() {
        return Err(Error::DimensionMismatch {
            what: "symbol vector",
            expected: h.ncols(),
            found: indices.len(),
        });
    }
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise power must be finite and non-negative, got {sigma2}"
        )));
    }
    let x = symbols_to_vector(indices, constellation)?;
    let mut y = h * &x;
    for v in y.iter_mut() {
        *v += complex_normal(rng, sigma2);
    }
    Ok((x, y))
}

/// SNR convention: with E[||H||_F^2] = M and unit-energy symbols, SNR = 1/sigma2.
pub fn snr_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Everything a detector needs: `y = Hx + z`, `z ~ CN(0, sigma2 I)`.
#[derive(Debug, Clone)]
pub struct DetectionProblem {
    pub h: CMatrix,
    pub y: CVector,
    pub sigma2: f64,
    pub constellation: Constellation,
}

impl DetectionProblem {
    pub fn new(h: CMatrix, y: CVector, sigma2: f64, constellation: Constellation) -> Result<Self> {
        if h.nrows() == 0 || h.ncols() == 0 {
            return Err(Error::InvalidParameter("empty channel matrix".into()));
        }
        if y.len() != h.nrows() {
            return Err(Error::DimensionMismatch {
                what: "received vector",
                expected: h.nrows(),
                found: y.len(),
            });
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise power must be finite and positive, got {sigma2}"
            )));
        }
        Ok(Self {
            h,
            y,
            sigma2,
            constellation,
        })
    }

    pub fn antennas(&self) -> usize {
        self.h.nrows()
    }

    pub fn users(&self) -> usize {
        self.h.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Gaussian prior: `K = H^H H / sigma2 + I`.
    Linear,
    /// Discrete prior handled separately: `K = H^H H / sigma2`.
    Nonlinear,
}

/// Gram matrix `K` and matched filter `H^H y / sigma2`.
#[derive(Debug, Clone)]
pub struct PrecomputedGram {
    pub k: CMatrix,
    pub mf: CVector,
    pub variant: Variant,
}

impl PrecomputedGram {
    pub fn users(&self) -> usize {
        self.mf.len()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.users()).map(|i| self.k[(i, i)].re).collect()
    }
}

pub fn precompute(problem: &DetectionProblem, variant: Variant) -> PrecomputedGram {
    let inv = 1.0 / problem.sigma2;
    let gram = problem.h.ad_mul(&problem.h);
    let n = gram.ncols();
    let mut k = CMatrix::from_fn(n, n, |i, j| {
        0.5 * (gram[(i, j)] + gram[(j, i)].conj()) * inv
    });
    if variant == Variant::Linear {
        for i in 0..n {
            k[(i, i)] += C64::new(1.0, 0.0);
        }
    }
    for i in 0..n {
        k[(i, i)].im = 0.0;
    }
    let mf = problem.h.ad_mul(&problem.y) * C64::new(inv, 0.0);
    PrecomputedGram { k, mf, variant }
}

/// Condition number of `H^H H` (ratio of extreme eigenvalues).
pub fn gram_condition_number(h: &CMatrix) -> f64 {
    let gram = h.ad_mul(h);
    let eig = gram.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn qpsk_points() {
        let c = make_constellation(4).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for p in c.points() {
            assert!((p.re.abs() - s).abs() < 1e-15);
            assert!((p.im.abs() - s).abs() < 1e-15);
        }
        assert_eq!(c.bits_per_symbol(), 2);
    }

    #[test]
    fn qam16_scale() {
        let c = make_constellation(16).unwrap();
        // Unit energy on the {+-1, +-3}^2 grid needs mean |c|^2 = 10 before scaling.
        let scale = 1.0 / 10f64.sqrt();
        let max_re = c.points().iter().map(|p| p.re).fold(f64::MIN, f64::max);
        assert!((max_re - 3.0 * scale).abs() < 1e-15);
        let min_abs = c
            .points()
            .iter()
            .map(|p| p.re.abs())
            .fold(f64::MAX, f64::min);
        assert!((min_abs - scale).abs() < 1e-15);
    }

    #[test]
    fn unsupported_order() {
        assert!(matches!(
            make_constellation(3),
            Err(Error::UnsupportedOrder(3))
        ));
        assert!(make_constellation(8).is_err());
    }

    #[test]
    fn zero_mean_unit_energy() {
        for order in [4, 16, 64] {
            let c = make_constellation(order).unwrap();
            let l = order as f64;
            let mean: C64 = c.points().iter().sum::<C64>() / l;
            let energy: f64 = c.points().iter().map(|p| p.norm_sqr()).sum::<f64>() / l;
            assert!(mean.norm() < 1e-12);
            assert!((energy - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gray_neighbors_differ_in_one_bit() {
        for order in [4, 16, 64] {
            let c = make_constellation(order).unwrap();
            let side = (order as f64).sqrt().round() as usize;
            let scale = 1.0 / (2.0 * ((side * side) as f64 - 1.0) / 3.0).sqrt();
            for a in 0..order {
                for b in 0..order {
                    let d = c.point(a) - c.point(b);
                    let horizontal = (d.re.abs() - 2.0 * scale).abs() < 1e-12 && d.im.abs() < 1e-12;
                    let vertical = (d.im.abs() - 2.0 * scale).abs() < 1e-12 && d.re.abs() < 1e-12;
                    if horizontal || vertical {
                        assert_eq!((a ^ b).count_ones(), 1, "order {order}: {a} vs {b}");
                    }
                }
            }
            // labels form a bijection onto {0,1}^B
            let mut labels: Vec<Vec<u8>> = (0..order).map(|l| c.label(l)).collect();
            labels.sort();
            labels.dedup();
            assert_eq!(labels.len(), order);
        }
    }

    #[test]
    fn channel_frobenius_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = generate_channel(64, 16, &mut rng, None).unwrap();
        let fro = h.norm_squared();
        assert!((fro - 64.0).abs() / 64.0 < 0.2, "{fro}");

        let mut total = 0.0;
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            total += generate_channel(64, 16, &mut rng, None)
                .unwrap()
                .norm_squared();
        }
        let mean = total / 1000.0;
        assert!((mean - 64.0).abs() / 64.0 < 0.01, "{mean}");
    }

    #[test]
    fn channel_determinism_and_zero_correlation() {
        let h1 = generate_channel(8, 8, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        let h2 = generate_channel(8, 8, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        assert_eq!(h1, h2);
        let h3 = generate_channel(8, 8, &mut ChaCha8Rng::seed_from_u64(0), Some(0.0)).unwrap();
        assert_eq!(h1, h3);
        assert!(generate_channel(8, 8, &mut ChaCha8Rng::seed_from_u64(0), Some(1.0)).is_err());
    }

    #[test]
    fn correlated_channel_keeps_energy() {
        let mut total = 0.0;
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            total += generate_channel(32, 8, &mut rng, Some(0.7))
                .unwrap()
                .norm_squared();
        }
        let mean = total / 500.0;
        assert!((mean - 32.0).abs() / 32.0 < 0.03, "{mean}");
    }

    #[test]
    fn noiseless_identity_channel() {
        let c = make_constellation(16).unwrap();
        let h = CMatrix::identity(4, 4);
        let idx = [0, 5, 10, 15];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = transmit(&idx, &h, 0.0, &c, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn transmit_rejects_bad_index() {
        let c = make_constellation(4).unwrap();
        let h = CMatrix::identity(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = transmit(&[0, 4], &h, 1.0, &c, &mut rng).unwrap_err();
        assert!(matches!(
            err,
            Error::SymbolOutOfRange { index: 4, order: 4 }
        ));
    }

    #[test]
    fn transmit_reproducible() {
        let c = make_constellation(4).unwrap();
        let h = generate_channel(6, 3, &mut ChaCha8Rng::seed_from_u64(9), None).unwrap();
        let a = transmit(&[0, 1, 2], &h, 0.3, &c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = transmit(&[0, 1, 2], &h, 0.3, &c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_variance() {
        let c = make_constellation(4).unwrap();
        let h = CMatrix::zeros(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma2 = 0.37;
        let draws = 100_000;
        let mut acc = 0.0;
        let mut acc_re = 0.0;
        for _ in 0..draws {
            let (_, y) = transmit(&[0], &h, sigma2, &c, &mut rng).unwrap();
            acc += y[0].norm_sqr();
            acc_re += y[0].re * y[0].re;
        }
        let est = acc / draws as f64;
        assert!((est - sigma2).abs() / sigma2 < 0.02, "{est}");
        let est_re = acc_re / draws as f64;
        assert!(
            (est_re - sigma2 / 2.0).abs() / (sigma2 / 2.0) < 0.03,
            "{est_re}"
        );
    }

    #[test]
    fn snr_conversion() {
        assert_eq!(snr_to_sigma2(0.0), 1.0);
        assert!((snr_to_sigma2(10.0) - 0.1).abs() < 1e-15);
        assert!((snr_to_sigma2(13.0) - 0.050_118_723_362_727_2).abs() < 1e-12);
    }

    #[test]
    fn precompute_identity() {
        let c = make_constellation(4).unwrap();
        let y = CVector::from_vec(vec![C64::new(1.0, 2.0), C64::new(-0.5, 0.25)]);
        let p = DetectionProblem::new(CMatrix::identity(2, 2), y.clone(), 1.0, c).unwrap();
        let lin = precompute(&p, Variant::Linear);
        assert_eq!(lin.k, CMatrix::identity(2, 2) * C64::new(2.0, 0.0));
        assert_eq!(lin.mf, y);
        let nl = precompute(&p, Variant::Nonlinear);
        assert_eq!(nl.k, CMatrix::identity(2, 2));
    }

    #[test]
    fn precompute_matches_dense_loop() {
        let c = make_constellation(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = generate_channel(8, 4, &mut rng, None).unwrap();
        let (_, y) = transmit(&[0, 1, 2, 3], &h, 0.2, &c, &mut rng).unwrap();
        let p = DetectionProblem::new(h.clone(), y.clone(), 0.2, c).unwrap();
        let g = precompute(&p, Variant::Linear);
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = C64::new(0.0, 0.0);
                for r in 0..8 {
                    acc += h[(r, i)].conj() * h[(r, j)];
                }
                acc /= 0.2;
                if i == j {
                    acc += 1.0;
                }
                assert!((g.k[(i, j)] - acc).norm() < 1e-12);
                assert!((g.k[(i, j)] - g.k[(j, i)].conj()).norm() <= 1e-12);
            }
            let mut mf = C64::new(0.0, 0.0);
            for r in 0..8 {
                mf += h[(r, i)].conj() * y[r];
            }
            assert!((g.mf[i] - mf / 0.2).norm() < 1e-12);
        }
    }

    #[test]
    fn problem_validation() {
        let c = make_constellation(4).unwrap();
        let h = CMatrix::identity(3, 2);
        assert!(DetectionProblem::new(h.clone(), CVector::zeros(2), 1.0, c.clone()).is_err());
        assert!(DetectionProblem::new(h.clone(), CVector::zeros(3), 0.0, c.clone()).is_err());
        assert!(DetectionProblem::new(h, CVector::zeros(3), 1.0, c).is_ok());
    }
}
