//! Complex-Gaussian exponential family on C^N.
//!
//! A point is written either in natural (e-) coordinates `(theta, Theta)`,
//!
//! ```text
//! p(x) = exp{ x^H theta + theta^H x + x^H Theta x - psi(theta, Theta) }
//! ```
//!
//! with `Theta` negative definite, or in expectation (m-) coordinates
//! `(mu, Sigma)`. The two charts are related by `theta = Sigma^-1 mu`,
//! `Theta = -Sigma^-1`.

use nalgebra::linalg::Cholesky;
use nalgebra::Dyn;

use crate::error::{Error, Result};
use crate::model::{CMatrix, CVector, C64};

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// Hermitian N x N matrix, stored densely or as a real diagonal.
#[derive(Debug, Clone, PartialEq)]
pub enum HermMatrix {
    Full(CMatrix),
    Diagonal(Vec<f64>),
}

impl HermMatrix {
    pub fn dim(&self) -> usize {
        match self {
            HermMatrix::Full(m) => m.nrows(),
            HermMatrix::Diagonal(d) => d.len(),
        }
    }

    pub fn to_dense(&self) -> CMatrix {
        match self {
            HermMatrix::Full(m) => m.clone(),
            HermMatrix::Diagonal(d) => CMatrix::from_diagonal(&CVector::from_iterator(
                d.len(),
                d.iter().map(|&v| C64::new(v, 0.0)),
            )),
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            HermMatrix::Full(m) => (0..m.nrows()).map(|i| m[(i, i)].re).collect(),
            HermMatrix::Diagonal(d) => d.clone(),
        }
    }

    fn negated(&self) -> HermMatrix {
        match self {
            HermMatrix::Full(m) => HermMatrix::Full(-m),
            HermMatrix::Diagonal(d) => HermMatrix::Diagonal(d.iter().map(|v| -v).collect()),
        }
    }
}

/// Natural coordinates `(theta, Theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNat {
    pub theta: CVector,
    pub theta_mat: HermMatrix,
}

/// Expectation coordinates `(mu, Sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianExp {
    pub mu: CVector,
    pub sigma: HermMatrix,
}

impl GaussianNat {
    pub fn new(theta: CVector, theta_mat: HermMatrix) -> Result<Self> {
        check_dims(theta.len(), theta_mat.dim())?;
        Ok(Self { theta, theta_mat })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

impl GaussianExp {
    pub fn new(mu: CVector, sigma: HermMatrix) -> Result<Self> {
        check_dims(mu.len(), sigma.dim())?;
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn check_dims(vec: usize, mat: usize) -> Result<()> {
    if vec != mat {
        return Err(Error::DimensionMismatch {
            what: "gaussian mean/matrix",
            expected: mat,
            found: vec,
        });
    }
    Ok(())
}

fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

fn cholesky(m: &CMatrix, what: &'static str) -> Result<Cholesky<C64, Dyn>> {
    let chol = hermitian_part(m)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(what))?;
    // the complex factorization takes square roots of negative pivots instead of failing
    let pivot_ok = |d: &C64| d.re > 0.0 && d.re.is_finite() && d.im.abs() <= 1e-8 * d.re;
    if !chol.l_dirty().diagonal().iter().all(pivot_ok) {
        return Err(Error::NotPositiveDefinite(what));
    }
    Ok(chol)
}

/// Inverse of a positive definite Hermitian matrix, returned in the same shape.
fn inverse_pd(m: &HermMatrix, what: &'static str) -> Result<HermMatrix> {
    match m {
        HermMatrix::Full(a) => {
            let inv = cholesky(a, what)?.inverse();
            Ok(HermMatrix::Full(hermitian_part(&inv)))
        }
        HermMatrix::Diagonal(d) => {
            if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::NotPositiveDefinite(what));
            }
            Ok(HermMatrix::Diagonal(d.iter().map(|v| 1.0 / v).collect()))
        }
    }
}

fn apply(m: &HermMatrix, v: &CVector) -> CVector {
    match m {
        HermMatrix::Full(a) => a * v,
        HermMatrix::Diagonal(d) => {
            CVector::from_iterator(v.len(), v.iter().zip(d).map(|(x, s)| x * *s))
        }
    }
}

/// Returns `ln det A` for positive definite `A`.
fn log_det_pd(m: &HermMatrix, what: &'static str) -> Result<f64> {
    match m {
        HermMatrix::Full(a) => {
            let chol = cholesky(a, what)?;
            Ok(2.0
                * chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|v| v.re.ln())
                    .sum::<f64>())
        }
        HermMatrix::Diagonal(d) => {
            if d.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::NotPositiveDefinite(what));
            }
            Ok(d.iter().map(|v| v.ln()).sum())
        }
    }
}

/// `mu = -Theta^-1 theta`, `Sigma = -Theta^-1`.
pub fn nat_to_exp(p: &GaussianNat) -> Result<GaussianExp> {
    let sigma = inverse_pd(&p.theta_mat.negated(), "-Theta (natural precision)")?;
    let mu = apply(&sigma, &p.theta);
    Ok(GaussianExp { mu, sigma })
}

/// `theta = Sigma^-1 mu`, `Theta = -Sigma^-1`.
pub fn exp_to_nat(p: &GaussianExp) -> Result<GaussianNat> {
    let prec = inverse_pd(&p.sigma, "Sigma (covariance)")?;
    let theta = apply(&prec, &p.mu);
    Ok(GaussianNat {
        theta,
        theta_mat: prec.negated(),
    })
}

/// Log-normalizer `psi = N ln(pi) - ln det(-Theta) - theta^H Theta^-1 theta`.
pub fn free_energy(p: &GaussianNat) -> Result<f64> {
    let n = p.dim() as f64;
    let prec = p.theta_mat.negated();
    let log_det = log_det_pd(&prec, "-Theta (natural precision)")?;
    let cov = inverse_pd(&prec, "-Theta (natural precision)")?;
    let quad = p.theta.dotc(&apply(&cov, &p.theta)).re;
    Ok(n * LN_PI - log_det + quad)
}

/// Dual potential `phi(mu, Sigma) = -ln det Sigma + c`, with
/// `c = -N (1 + ln pi)` so that the divergence of a point from itself is zero.
pub fn neg_entropy(q: &GaussianExp) -> Result<f64> {
    let n = q.dim() as f64;
    Ok(-log_det_pd(&q.sigma, "Sigma (covariance)")? - n * (1.0 + LN_PI))
}

/// `D_KL(Q; P)` with `Q` in expectation and `P` in natural coordinates:
///
/// `phi(mu2, Sigma2) + psi(theta1, Theta1) - mu2^H theta1 - theta1^H mu2
///  - tr((Sigma2 + mu2 mu2^H) Theta1)`.
pub fn kl_divergence(q: &GaussianExp, p: &GaussianNat) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            what: "KL divergence operands",
            expected: p.dim(),
            found: q.dim(),
        });
    }
    let cross = 2.0 * q.mu.dotc(&p.theta).re;
    let second = q.sigma.to_dense() + &q.mu * q.mu.adjoint();
    let trace = (second * p.theta_mat.to_dense()).trace().re;
    Ok(neg_entropy(q)? + free_energy(p)? - cross - trace)
}

/// m-projection onto the diagonal-precision family: keeps `mu` and the
/// diagonal of `Sigma`.
pub fn m_project_diag(q: &GaussianExp) -> GaussianExp {
    GaussianExp {
        mu: q.mu.clone(),
        sigma: HermMatrix::Diagonal(q.sigma.diagonal()),
    }
}
