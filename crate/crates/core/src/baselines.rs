//! Exact references: direct LMMSE, matched filter and exhaustive enumeration
//! of the discrete posterior for small problems.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{precompute, CVector, DetectionProblem, Variant, C64};

/// Upper bound on `L^N` for [`exact_marginals`].
pub const MAX_HYPOTHESES: usize = 1_000_000;

/// `mu = (H^H H / sigma2 + I)^-1 H^H y / sigma2` and the diagonal of the inverse.
pub fn lmmse(problem: &DetectionProblem) -> Result<(CVector, Vec<f64>)> {
    let g = precompute(problem, Variant::Linear);
    let chol = g.k.cholesky().ok_or(Error::NotPositiveDefinite(
        "LMMSE precision H^H H / sigma2 + I",
    ))?;
    let mu = chol.solve(&g.mf);
    let inv = chol.inverse();
    let sigma = (0..inv.nrows()).map(|i| inv[(i, i)].re).collect();
    Ok((mu, sigma))
}

/// `H^H y / sigma2`.
pub fn matched_filter(problem: &DetectionProblem) -> CVector {
    problem.h.ad_mul(&problem.y) * C64::new(1.0 / problem.sigma2, 0.0)
}

#[derive(Debug, Clone)]
pub struct ExactMarginals {
    /// `N x L`, row `k` is `p(x_k = c_l | y)`.
    pub eta: DMatrix<f64>,
    /// Natural log of `eta` (finite even where `eta` underflows).
    pub log_eta: DMatrix<f64>,
    /// Joint MAP symbol indices; ties go to the lowest hypothesis index.
    pub map_joint: Vec<usize>,
    /// Discrete MMSE mean `E[x | y]`.
    pub mmse_mean: CVector,
}

impl ExactMarginals {
    /// Per-user argmax of the marginals (lowest index on ties).
    pub fn marginal_argmax(&self) -> Vec<usize> {
        (0..self.eta.nrows())
            .map(|k| argmax(self.log_eta.row(k).iter().copied()))
            .collect()
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Enumerates all `L^N` hypotheses under a uniform prior.
///
/// Hypothesis index is `sum_k l_k L^(N-1-k)`, so user 0 varies slowest.
pub fn exact_marginals(problem: &DetectionProblem) -> Result<ExactMarginals> {
    let cons = &problem.constellation;
    let l = cons.order();
    let n = problem.users();
    let count = (l as f64).powi(n as i32);
    if count > MAX_HYPOTHESES as f64 {
        return Err(Error::HypothesisLimit {
            count,
            limit: MAX_HYPOTHESES,
        });
    }
    let count = count as usize;
    let inv_sigma2 = 1.0 / problem.sigma2;

    let mut digits = vec![0usize; n];
    let mut x = CVector::from_element(n, cons.point(0));
    let mut loglik = Vec::with_capacity(count);
    let mut best = 0;
    let mut best_ll = f64::NEG_INFINITY;
    for hyp in 0..count {
        let resid = &problem.y - &problem.h * &x;
        let ll = -resid.norm_squared() * inv_sigma2;
        if ll > best_ll {
            best_ll = ll;
            best = hyp;
        }
        loglik.push(ll);

        // odometer with the last user fastest
        for k in (0..n).rev() {
            digits[k] += 1;
            if digits[k] < l {
                x[k] = cons.point(digits[k]);
                break;
            }
            digits[k] = 0;
            x[k] = cons.point(0);
        }
    }

    let decode = |mut hyp: usize| {
        let mut d = vec![0usize; n];
        for k in (0..n).rev() {
            d[k] = hyp % l;
            hyp /= l;
        }
        d
    };

    let mut mass = DMatrix::<f64>::zeros(n, l);
    let mut mean = CVector::zeros(n);
    let mut total = 0.0;
    for (hyp, ll) in loglik.iter().enumerate() {
        let w = (ll - best_ll).exp();
        total += w;
        for (k, &dk) in decode(hyp).iter().enumerate() {
            mass[(k, dk)] += w;
            mean[k] += cons.point(dk) * w;
        }
    }
    let eta = mass.map(|v| v / total);
    let log_eta = log_marginals(&loglik, n, l, &decode);
    mean /= C64::new(total, 0.0);

    Ok(ExactMarginals {
        eta,
        log_eta,
        map_joint: decode(best),
        mmse_mean: mean,
    })
}

/// Log-sum-exp of the log-likelihoods over each `(user, symbol)` slice.
fn log_marginals(
    loglik: &[f64],
    n: usize,
    l: usize,
    decode: &impl Fn(usize) -> Vec<usize>,
) -> DMatrix<f64> {
    let mut peak = DMatrix::from_element(n, l, f64::NEG_INFINITY);
    for (hyp, &ll) in loglik.iter().enumerate() {
        for (k, dk) in decode(hyp).into_iter().enumerate() {
            if ll > peak[(k, dk)] {
                peak[(k, dk)] = ll;
            }
        }
    }
    let mut acc = DMatrix::<f64>::zeros(n, l);
    for (hyp, &ll) in loglik.iter().enumerate() {
        for (k, dk) in decode(hyp).into_iter().enumerate() {
            acc[(k, dk)] += (ll - peak[(k, dk)]).exp();
        }
    }
    let mut out = peak.zip_map(&acc, |p, a| p + a.ln());
    for k in 0..n {
        let row_max = out.row(k).max();
        let norm = row_max
            + out
                .row(k)
                .iter()
                .map(|v| (v - row_max).exp())
                .sum::<f64>()
                .ln();
        for j in 0..l {
            out[(k, j)] -= norm;
        }
    }
    out
}
