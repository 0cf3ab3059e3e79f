//! NCS-IGA: the cross-splitting backbone on `K = H^H H / sigma2` plus an extra
//! auxiliary point carrying the discrete constellation prior.
//!
//! Each iteration computes the linear beliefs, forms the (damped) cavity
//! parameters `lambda_hat0`, `Lambda_hat0`, turns the cavity Gaussian into
//! per-user posteriors over the constellation, moment-matches those back to a
//! diagonal Gaussian and feeds the difference to every auxiliary point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::argmax;
use crate::cs_iga::{diagonal_moments, validate_schedule, CsIgaDetector, InitMode};
use crate::error::{Error, Result};
use crate::model::{
    precompute, CVector, Constellation, DetectionProblem, PrecomputedGram, Variant, C64,
};

pub const DEFAULT_VAR_FLOOR: f64 = 1e-12;
pub const DEFAULT_LLR_CLIP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NcsIgaConfig {
    pub max_iter: usize,
    pub damping: f64,
    pub init: InitMode,
    pub llr_clip: f64,
    /// Lower bound on the moment-matched variance.
    pub var_floor: f64,
    /// Store per-iteration hard decisions and cavity means in the trace.
    pub record: bool,
    /// When false the prior step is skipped and the detector reduces to the
    /// linear backbone on whatever Gram it was given.
    pub prior_step: bool,
    /// Keep the previous prior belief of a user whose new belief precision
    /// would not be positive (matched variance at least the cavity variance).
    pub guard_prior: bool,
}

impl Default for NcsIgaConfig {
    fn default() -> Self {
        Self {
            max_iter: 10,
            damping: 0.5,
            init: InitMode::Zero,
            llr_clip: DEFAULT_LLR_CLIP,
            var_floor: DEFAULT_VAR_FLOOR,
            record: false,
            prior_step: true,
            guard_prior: true,
        }
    }
}

impl NcsIgaConfig {
    fn validate(&self) -> Result<()> {
        validate_schedule(self.max_iter, self.damping)?;
        if !(self.llr_clip > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "LLR clip must be positive, got {}",
                self.llr_clip
            )));
        }
        if !(self.var_floor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "variance floor must be positive, got {}",
                self.var_floor
            )));
        }
        Ok(())
    }
}

/// Cavity parameters and prior beliefs of the extra auxiliary point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraState {
    pub lambda_hat0: CVector,
    pub lambda_hat0_prec: Vec<f64>,
    pub xi_e: CVector,
    pub xi_e_prec: Vec<f64>,
}

impl ExtraState {
    pub fn zeros(users: usize) -> Self {
        Self {
            lambda_hat0: CVector::zeros(users),
            lambda_hat0_prec: vec![0.0; users],
            xi_e: CVector::zeros(users),
            xi_e_prec: vec![0.0; users],
        }
    }

    /// Cavity moments `mu_hat0 = lambda_hat0 / (Lambda_hat0 + D)`, `Sigma_hat0 = 1 / (Lambda_hat0 + D)`.
    pub fn cavity_moments(&self, diag: &[f64], iteration: usize) -> Result<(CVector, Vec<f64>)> {
        diagonal_moments(&self.lambda_hat0, &self.lambda_hat0_prec, diag, iteration)
    }
}

/// Per-user posteriors over the constellation and their Gaussian moment match.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolPosterior {
    /// `N x L`, rows sum to one.
    pub eta: DMatrix<f64>,
    /// Natural log of `eta`, kept separately so tiny probabilities survive.
    pub log_eta: DMatrix<f64>,
    pub mu_tilde: CVector,
    pub sigma_tilde: Vec<f64>,
    /// Users whose variance was raised to the floor.
    pub floored: Vec<bool>,
}

impl SymbolPosterior {
    /// Builds the moments from a given row-stochastic `eta`.
    pub fn from_eta(eta: DMatrix<f64>, cons: &Constellation, var_floor: f64) -> Result<Self> {
        if eta.ncols() != cons.order() {
            return Err(Error::DimensionMismatch {
                what: "posterior columns",
                expected: cons.order(),
                found: eta.ncols(),
            });
        }
        let log_eta = eta.map(f64::ln);
        Ok(Self::with_log(eta, log_eta, cons, var_floor))
    }

    fn with_log(
        eta: DMatrix<f64>,
        log_eta: DMatrix<f64>,
        cons: &Constellation,
        var_floor: f64,
    ) -> Self {
        let n = eta.nrows();
        let mut mu_tilde = CVector::zeros(n);
        let mut sigma_tilde = vec![0.0; n];
        let mut floored = vec![false; n];
        for k in 0..n {
            let mut mean = C64::new(0.0, 0.0);
            for (l, c) in cons.points().iter().enumerate() {
                mean += c * eta[(k, l)];
            }
            let var: f64 = cons
                .points()
                .iter()
                .enumerate()
                .map(|(l, c)| eta[(k, l)] * (c - mean).norm_sqr())
                .sum();
            mu_tilde[k] = mean;
            if var < var_floor || !var.is_finite() {
                sigma_tilde[k] = var_floor;
                floored[k] = true;
            } else {
                sigma_tilde[k] = var;
            }
        }
        Self {
            eta,
            log_eta,
            mu_tilde,
            sigma_tilde,
            floored,
        }
    }

    pub fn users(&self) -> usize {
        self.eta.nrows()
    }

    /// `argmax_l eta[k, l]` per user, lowest index on ties.
    pub fn hard_decisions(&self) -> Vec<usize> {
        (0..self.users())
            .map(|k| argmax(self.log_eta.row(k).iter().copied()))
            .collect()
    }
}

/// `eta[k, l] ~ exp(-|mu0[k] - c_l|^2 / sigma0[k])`, normalized per row, with
/// the default variance floor.
pub fn symbol_posteriors(
    mu0: &CVector,
    sigma0: &[f64],
    cons: &Constellation,
) -> Result<SymbolPosterior> {
    symbol_posteriors_floored(mu0, sigma0, cons, DEFAULT_VAR_FLOOR)
}

pub fn symbol_posteriors_floored(
    mu0: &CVector,
    sigma0: &[f64],
    cons: &Constellation,
    var_floor: f64,
) -> Result<SymbolPosterior> {
    let n = mu0.len();
    if sigma0.len() != n {
        return Err(Error::DimensionMismatch {
            what: "cavity variance",
            expected: n,
            found: sigma0.len(),
        });
    }
    let l = cons.order();
    let mut log_eta = DMatrix::<f64>::zeros(n, l);
    let mut eta = DMatrix::<f64>::zeros(n, l);
    for k in 0..n {
        let s = sigma0[k];
        if !(s > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "cavity variance of user {k} is {s:e}, must be positive"
            )));
        }
        let mut peak = f64::NEG_INFINITY;
        for (j, c) in cons.points().iter().enumerate() {
            let v = -(mu0[k] - c).norm_sqr() / s;
            log_eta[(k, j)] = v;
            peak = peak.max(v);
        }
        let mut total = 0.0;
        for j in 0..l {
            let w = (log_eta[(k, j)] - peak).exp();
            eta[(k, j)] = w;
            total += w;
        }
        let log_norm = peak + total.ln();
        for j in 0..l {
            eta[(k, j)] /= total;
            log_eta[(k, j)] -= log_norm;
        }
    }
    Ok(SymbolPosterior::with_log(eta, log_eta, cons, var_floor))
}

/// Beliefs of the extra auxiliary point.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBeliefs {
    pub xi_e: CVector,
    pub xi_e_prec: Vec<f64>,
    /// `mu_tilde / sigma_tilde`.
    pub obj_mean: CVector,
    /// `1 / sigma_tilde` (full precision, `D` included).
    pub obj_prec: Vec<f64>,
}

/// `xi_e = mu_tilde / sigma_tilde - lambda_hat0`, `Xi_e = 1 / sigma_tilde - Lambda_hat0 - D`.
pub fn extra_beliefs(
    sp: &SymbolPosterior,
    extra: &ExtraState,
    diag: &[f64],
) -> Result<PriorBeliefs> {
    let n = sp.users();
    for (what, len) in [
        ("cavity mean", extra.lambda_hat0.len()),
        ("cavity precision", extra.lambda_hat0_prec.len()),
        ("Gram diagonal", diag.len()),
    ] {
        if len != n {
            return Err(Error::DimensionMismatch {
                what,
                expected: n,
                found: len,
            });
        }
    }
    let mut out = PriorBeliefs {
        xi_e: CVector::zeros(n),
        xi_e_prec: vec![0.0; n],
        obj_mean: CVector::zeros(n),
        obj_prec: vec![0.0; n],
    };
    for (k, d) in diag.iter().enumerate() {
        let s = sp.sigma_tilde[k];
        if !(s > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "matched variance of user {k} is {s:e}"
            )));
        }
        out.obj_mean[k] = sp.mu_tilde[k] / s;
        out.obj_prec[k] = 1.0 / s;
        out.xi_e[k] = out.obj_mean[k] - extra.lambda_hat0[k];
        out.xi_e_prec[k] = out.obj_prec[k] - extra.lambda_hat0_prec[k] - d;
    }
    Ok(out)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let peak = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return peak;
    }
    peak + values.map(|v| (v - peak).exp()).sum::<f64>().ln()
}

/// `LLR[k, i] = ln(sum_{bit i = 0} eta / sum_{bit i = 1} eta)`, clipped to `[-clip, clip]`.
pub fn llr_from_eta(sp: &SymbolPosterior, cons: &Constellation, clip: f64) -> DMatrix<f64> {
    let n = sp.users();
    let b = cons.bits_per_symbol();
    let l = cons.order();
    DMatrix::from_fn(n, b, |k, i| {
        let row = sp.log_eta.row(k);
        let zero = (0..l).filter(|&j| cons.bit(j, i) == 0).map(|j| row[j]);
        let one = (0..l).filter(|&j| cons.bit(j, i) == 1).map(|j| row[j]);
        let v = log_sum_exp(zero) - log_sum_exp(one);
        if v.is_nan() {
            0.0
        } else {
            v.clamp(-clip, clip)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NcsIterationRecord {
    pub iteration: usize,
    /// `max |Delta lambda_hat0|`.
    pub delta: f64,
    /// Residual of `sum_n lambda_n + lambda_hat0 - N lambda_0` (and the precision analog).
    pub e_residual: f64,
    /// `max_n |mu_n[n] - mu_tilde[n]|`; measured only.
    pub m_residual: f64,
    pub floored: usize,
    /// Users whose prior belief was kept from the previous iteration.
    pub guarded: usize,
    #[serde(skip)]
    pub hard: Option<Vec<usize>>,
    #[serde(skip)]
    pub cavity_mean: Option<CVector>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NcsTrace {
    pub records: Vec<NcsIterationRecord>,
}

#[derive(Debug, Clone)]
pub struct LlrOutput {
    /// `N x B`, bit `i` of user `k` MSB-first.
    pub llr: DMatrix<f64>,
    pub posterior: SymbolPosterior,
    pub hard: Vec<usize>,
    pub trace: NcsTrace,
}

#[derive(Debug, Clone)]
pub struct NcsIgaDetector {
    engine: CsIgaDetector,
    cons: Constellation,
    extra: ExtraState,
    config: NcsIgaConfig,
    posterior: Option<SymbolPosterior>,
}

impl NcsIgaDetector {
    /// `gram` is normally the nonlinear precomputation (`K = H^H H / sigma2`).
    pub fn new(gram: &PrecomputedGram, cons: Constellation, config: NcsIgaConfig) -> Result<Self> {
        config.validate()?;
        let engine = CsIgaDetector::new(gram, config.damping, config.init)?;
        let users = gram.users();
        Ok(Self {
            engine,
            cons,
            extra: ExtraState::zeros(users),
            config,
            posterior: None,
        })
    }

    pub fn engine(&self) -> &CsIgaDetector {
        &self.engine
    }

    pub fn extra(&self) -> &ExtraState {
        &self.extra
    }

    pub fn posterior(&self) -> Option<&SymbolPosterior> {
        self.posterior.as_ref()
    }

    pub fn cavity_moments(&self) -> Result<(CVector, Vec<f64>)> {
        self.extra
            .cavity_moments(&self.engine.split().diag, self.engine.state().iteration)
    }

    /// Extended e-condition residual `sum_n lambda_n + lambda_hat0 - N lambda_0`
    /// (and the precision analog) using the objective stored by the last step.
    ///
    /// Each entry is divided by `1 + N |lambda_0|`: a confident prior makes
    /// `lambda_0` large, and the absolute rounding error grows with it.
    pub fn e_condition_residual(&self) -> f64 {
        let state = self.engine.state();
        let n = state.users();
        let nf = n as f64;
        let mut worst: f64 = 0.0;
        for m in 0..n {
            let mut s = self.extra.lambda_hat0[m] - state.obj_mean[m] * nf;
            let mut p = self.extra.lambda_hat0_prec[m] - state.obj_prec[m] * nf;
            for col in 0..n {
                s += state.mean_param[(m, col)];
                p += state.prec_param[(m, col)];
            }
            let s_scale = 1.0 + nf * state.obj_mean[m].norm();
            let p_scale = 1.0 + nf * state.obj_prec[m].abs();
            worst = worst.max(s.norm() / s_scale).max(p.abs() / p_scale);
        }
        worst
    }

    /// One iteration. Returns the record (without optional fields filled).
    pub fn step(&mut self) -> Result<NcsIterationRecord> {
        let iteration = self.engine.state().iteration;
        let alpha = self.config.damping;
        let keep = 1.0 - alpha;
        self.engine.compute_beliefs()?;
        let (s, p) = self.engine.beliefs().totals();

        let before = self.extra.lambda_hat0.clone();
        for m in 0..s.len() {
            self.extra.lambda_hat0[m] = self.extra.lambda_hat0[m] * keep + s[m] * alpha;
            self.extra.lambda_hat0_prec[m] = self.extra.lambda_hat0_prec[m] * keep + p[m] * alpha;
        }
        let delta = crate::cs_iga::max_abs_diff(&before, &self.extra.lambda_hat0);

        let diag = self.engine.split().diag.clone();
        let (mu0, sigma0) = self.extra.cavity_moments(&diag, iteration)?;
        let sp = symbol_posteriors_floored(&mu0, &sigma0, &self.cons, self.config.var_floor)?;

        // auxiliary target is the undamped belief sum plus the prior belief
        let (mut target, mut target_prec) = (s, p);
        let mut guarded = 0;
        if self.config.prior_step {
            let pb = extra_beliefs(&sp, &self.extra, &diag)?;
            for m in 0..target.len() {
                if self.config.guard_prior && !(pb.xi_e_prec[m] > 0.0) {
                    guarded += 1;
                } else {
                    self.extra.xi_e[m] = pb.xi_e[m];
                    self.extra.xi_e_prec[m] = pb.xi_e_prec[m];
                }
                target[m] += self.extra.xi_e[m];
                target_prec[m] += self.extra.xi_e_prec[m];
            }
            // equals the moment-matched objective wherever the guard did not fire
            let state = self.engine.state_mut();
            state.obj_mean = &self.extra.lambda_hat0 + &self.extra.xi_e;
            for m in 0..target.len() {
                state.obj_prec[m] = self.extra.lambda_hat0_prec[m] + self.extra.xi_e_prec[m];
            }
        } else {
            let state = self.engine.state_mut();
            state.obj_mean = self.extra.lambda_hat0.clone();
            state.obj_prec = self.extra.lambda_hat0_prec.clone();
        }
        self.engine.blend(&target, &target_prec, alpha);
        self.engine.state_mut().iteration += 1;

        let m_residual = self
            .engine
            .aux_means()
            .iter()
            .zip(sp.mu_tilde.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        let record = NcsIterationRecord {
            iteration: iteration + 1,
            delta,
            e_residual: self.e_condition_residual(),
            m_residual,
            floored: sp.floored.iter().filter(|f| **f).count(),
            guarded,
            hard: None,
            cavity_mean: None,
        };
        self.posterior = Some(sp);
        Ok(record)
    }

    pub fn run(mut self) -> Result<LlrOutput> {
        let mut trace = NcsTrace::default();
        for _ in 0..self.config.max_iter {
            let mut rec = self.step()?;
            if rec.floored > 0 {
                log::debug!(
                    "iteration {}: {} matched variances floored",
                    rec.iteration,
                    rec.floored
                );
            }
            if self.config.record {
                rec.hard = self.posterior.as_ref().map(SymbolPosterior::hard_decisions);
                rec.cavity_mean = Some(self.cavity_moments()?.0);
            }
            trace.records.push(rec);
        }
        let posterior = self.posterior.take().expect("at least one iteration ran");
        Ok(LlrOutput {
            llr: llr_from_eta(&posterior, &self.cons, self.config.llr_clip),
            hard: posterior.hard_decisions(),
            posterior,
            trace,
        })
    }
}

/// NCS-IGA from an existing Gram precomputation.
pub fn detect_soft_with_gram(
    gram: &PrecomputedGram,
    cons: &Constellation,
    config: &NcsIgaConfig,
) -> Result<LlrOutput> {
    NcsIgaDetector::new(gram, cons.clone(), *config)?.run()
}

/// NCS-IGA detection with soft bit output.
pub fn detect_soft(problem: &DetectionProblem, config: &NcsIgaConfig) -> Result<LlrOutput> {
    detect_soft_with_gram(
        &precompute(problem, Variant::Nonlinear),
        &problem.constellation,
        config,
    )
}
