//! CS-IGA: linear detection with a Gaussian prior.
//!
//! Auxiliary point `n` has natural parameters
//! `theta_n = b_n + lambda_n`, `Theta_n = -(C_n + D + Lambda_n)` and the
//! objective point has `theta_0 = lambda_0`, `Theta_0 = -(Lambda_0 + D)` with
//! `Lambda_n`, `Lambda_0` diagonal. Each iteration computes the moments of
//! every auxiliary point in O(N) (block inversion plus Sherman-Morrison),
//! m-projects them onto the diagonal family, and redistributes the resulting
//! beliefs so that
//!
//! ```text
//! sum_n (lambda_n, Lambda_n) + (1 - N) (lambda_0, Lambda_0) = 0
//! ```
//!
//! holds after every update. At a fixed point the objective mean is the LMMSE
//! estimate.
//!
//! Storage convention: per-user quantities are columns of N x N matrices in
//! natural index order (column `n` holds `lambda_n`, `diag(Lambda_n)`, `xi_n`,
//! `diag(Xi_n)`). Vectors that conceptually have length N-1 are kept at
//! length N with entry `n` set to zero.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{precompute, CMatrix, CVector, DetectionProblem, PrecomputedGram, Variant, C64};
use crate::splitting::{cross_split, SplitComponents};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// `lambda_n = 0`, `Lambda_n = 0`.
    #[default]
    Zero,
    /// `lambda_n = 0`, `Lambda_n = -1`. Can be infeasible on weak channels.
    #[serde(rename = "paper")]
    NegativeUnit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsIgaConfig {
    pub max_iter: usize,
    pub damping: f64,
    /// Early exit when `max |lambda_0^{t+1} - lambda_0^t| < tolerance`.
    pub tolerance: Option<f64>,
    pub init: InitMode,
    /// Keep the objective mean of every iteration in the trace.
    pub record_means: bool,
}

impl Default for CsIgaConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            damping: 0.7,
            tolerance: Some(1e-8),
            init: InitMode::Zero,
            record_means: false,
        }
    }
}

impl CsIgaConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        validate_schedule(self.max_iter, self.damping)
    }
}

pub(crate) fn validate_schedule(max_iter: usize, damping: f64) -> Result<()> {
    if max_iter == 0 {
        return Err(Error::InvalidParameter(
            "iteration count must be at least 1".into(),
        ));
    }
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "damping must lie in (0, 1], got {damping}"
        )));
    }
    Ok(())
}

/// Free parameters of the auxiliary and objective points.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryState {
    /// Column `n` is `lambda_n`.
    pub mean_param: CMatrix,
    /// Column `n` is `diag(Lambda_n)`.
    pub prec_param: DMatrix<f64>,
    /// `lambda_0`.
    pub obj_mean: CVector,
    /// `diag(Lambda_0)`.
    pub obj_prec: Vec<f64>,
    pub iteration: usize,
}

impl AuxiliaryState {
    pub fn new(users: usize, init: InitMode) -> Self {
        let (aux, obj) = match init {
            InitMode::Zero => (0.0, 0.0),
            // keep the e-condition: (N - 1) Lambda_0 = sum_n Lambda_n
            InitMode::NegativeUnit if users > 1 => (-1.0, -(users as f64) / (users as f64 - 1.0)),
            InitMode::NegativeUnit => (0.0, 0.0),
        };
        Self {
            mean_param: CMatrix::zeros(users, users),
            prec_param: DMatrix::from_element(users, users, aux),
            obj_mean: CVector::zeros(users),
            obj_prec: vec![obj; users],
            iteration: 0,
        }
    }

    pub fn users(&self) -> usize {
        self.obj_mean.len()
    }

    pub fn mean_col(&self, n: usize) -> &[C64] {
        let len = self.users();
        &self.mean_param.as_slice()[n * len..(n + 1) * len]
    }

    pub fn prec_col(&self, n: usize) -> &[f64] {
        let len = self.users();
        &self.prec_param.as_slice()[n * len..(n + 1) * len]
    }

    /// Max-abs residual of `sum_n (lambda_n, Lambda_n) + (1 - N)(lambda_0, Lambda_0)`.
    pub fn e_condition_residual(&self) -> f64 {
        let n = self.users();
        let w = 1.0 - n as f64;
        let mut worst: f64 = 0.0;
        for m in 0..n {
            let mut s = self.obj_mean[m] * w;
            let mut p = self.obj_prec[m] * w;
            for col in 0..n {
                s += self.mean_param[(m, col)];
                p += self.prec_param[(m, col)];
            }
            worst = worst.max(s.norm()).max(p.abs());
        }
        worst
    }

    /// Objective moments `mu = (Lambda_0 + D)^-1 lambda_0`, `sigma = (Lambda_0 + D)^-1`.
    pub fn objective_moments(&self, diag: &[f64]) -> Result<(CVector, Vec<f64>)> {
        diagonal_moments(&self.obj_mean, &self.obj_prec, diag, self.iteration)
    }
}

pub(crate) fn diagonal_moments(
    mean: &CVector,
    prec: &[f64],
    diag: &[f64],
    iteration: usize,
) -> Result<(CVector, Vec<f64>)> {
    let mut mu = CVector::zeros(mean.len());
    let mut sigma = vec![0.0; mean.len()];
    for m in 0..mean.len() {
        let p = prec[m] + diag[m];
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::IndefiniteState {
                iteration,
                user: m,
                detail: format!("objective precision Lambda_0 + D = {p:e} is not positive"),
            });
        }
        sigma[m] = 1.0 / p;
        mu[m] = mean[m] * sigma[m];
    }
    Ok((mu, sigma))
}

/// Closed-form moments of auxiliary point `n`.
///
/// Vectors have length N in natural order with entry `n` unused (zero).
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryProjection {
    pub user: usize,
    /// `r_n = (Lambda_n[n] + d_n - kbar^H Lcheck kbar)^-1`, the variance of entry `n`.
    pub r: f64,
    /// `v_n = kbar^H Lcheck lambda_bar`.
    pub v: C64,
    /// `kbar^H Lcheck kbar`.
    pub q: f64,
    /// Entry `n` of the auxiliary mean.
    pub mu: C64,
    /// `Lcheck = (Lambda_bar + D_bar)^-1`.
    pub lambda_check: Vec<f64>,
    /// `|kbar|^2` elementwise.
    pub lbar: Vec<f64>,
    /// `(1 + r |kbar|^2 Lcheck)^-1` elementwise.
    pub shrink: Vec<f64>,
}

impl AuxiliaryProjection {
    pub fn with_users(users: usize) -> Self {
        Self {
            user: 0,
            r: 0.0,
            v: C64::new(0.0, 0.0),
            q: 0.0,
            mu: C64::new(0.0, 0.0),
            lambda_check: vec![0.0; users],
            lbar: vec![0.0; users],
            shrink: vec![0.0; users],
        }
    }

    /// Full auxiliary mean `mu_n` (entries `m != n` are `Lcheck (lambda_bar - mu_n kbar)`).
    pub fn mean_vector(&self, state: &AuxiliaryState, split: &SplitComponents) -> CVector {
        let n = self.user;
        let lam = state.mean_col(n);
        let k = split.kbar_column(n);
        CVector::from_fn(split.users(), |m, _| {
            if m == n {
                self.mu
            } else {
                self.lambda_check[m] * (lam[m] - self.mu * k[m])
            }
        })
    }

    /// Dense auxiliary covariance `Sigma_n`. Test and oracle use only.
    pub fn covariance(&self, split: &SplitComponents) -> CMatrix {
        let n = self.user;
        let len = split.users();
        let k = split.kbar_column(n);
        let chk = &self.lambda_check;
        CMatrix::from_fn(len, len, |a, b| match (a == n, b == n) {
            (true, true) => C64::new(self.r, 0.0),
            (false, true) => -self.r * chk[a] * k[a],
            (true, false) => -self.r * chk[b] * k[b].conj(),
            (false, false) => {
                let rank_one = self.r * chk[a] * chk[b] * k[a] * k[b].conj();
                if a == b {
                    rank_one + chk[a]
                } else {
                    rank_one
                }
            }
        })
    }
}

fn indefinite(state: &AuxiliaryState, user: usize, detail: String) -> Error {
    Error::IndefiniteState {
        iteration: state.iteration,
        user,
        detail,
    }
}

/// Computes the projection quantities of auxiliary point `n` into `proj` in O(N).
pub fn aux_moments_into(
    state: &AuxiliaryState,
    split: &SplitComponents,
    n: usize,
    proj: &mut AuxiliaryProjection,
) -> Result<()> {
    let len = split.users();
    let lam = state.mean_col(n);
    let prec = state.prec_col(n);
    let k = split.kbar_column(n);
    let d = &split.diag;

    let mut q = 0.0;
    let mut v = C64::new(0.0, 0.0);
    for m in 0..len {
        if m == n {
            proj.lambda_check[m] = 0.0;
            proj.lbar[m] = 0.0;
            continue;
        }
        let denom = prec[m] + d[m];
        if !(denom > 0.0) {
            return Err(indefinite(
                state,
                n,
                format!("Lambda_n[{m}] + D[{m}] = {denom:e} is not positive"),
            ));
        }
        let chk = 1.0 / denom;
        let l = k[m].norm_sqr();
        proj.lambda_check[m] = chk;
        proj.lbar[m] = l;
        q += l * chk;
        v += k[m].conj() * (lam[m] * chk);
    }

    let denom = prec[n] + d[n] - q;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(indefinite(
            state,
            n,
            format!("r_n denominator {denom:e} is not positive"),
        ));
    }
    let r = 1.0 / denom;
    for m in 0..len {
        proj.shrink[m] = if m == n {
            0.0
        } else {
            1.0 / (1.0 + r * proj.lbar[m] * proj.lambda_check[m])
        };
    }
    proj.user = n;
    proj.r = r;
    proj.q = q;
    proj.v = v;
    proj.mu = (split.b[n] + lam[n] - v) * r;
    Ok(())
}

pub fn aux_moments(
    state: &AuxiliaryState,
    split: &SplitComponents,
    n: usize,
) -> Result<AuxiliaryProjection> {
    if n >= split.users() {
        return Err(Error::IndexOutOfRange {
            index: n,
            len: split.users(),
        });
    }
    let mut proj = AuxiliaryProjection::with_users(split.users());
    aux_moments_into(state, split, n, &mut proj)?;
    Ok(proj)
}

/// Beliefs `xi_n = theta_n^0 - lambda_n`, `Xi_n = -Theta_n^0 - D - Lambda_n`
/// of auxiliary point `n`, written into `xi` / `xi_prec` (length N).
pub fn aux_beliefs_into(
    proj: &AuxiliaryProjection,
    state: &AuxiliaryState,
    split: &SplitComponents,
    xi: &mut [C64],
    xi_prec: &mut [f64],
) {
    let n = proj.user;
    let lam = state.mean_col(n);
    let k = split.kbar_column(n);
    for m in 0..split.users() {
        if m == n {
            xi[m] = split.b[n] - proj.v;
            xi_prec[m] = -proj.q;
        } else {
            let s = proj.shrink[m];
            xi[m] = (lam[m] - proj.mu * k[m]) * s - lam[m];
            xi_prec[m] = -proj.r * proj.lbar[m] * s;
        }
    }
}

pub fn aux_beliefs(
    proj: &AuxiliaryProjection,
    state: &AuxiliaryState,
    split: &SplitComponents,
) -> (CVector, Vec<f64>) {
    let len = split.users();
    let mut xi = vec![C64::new(0.0, 0.0); len];
    let mut xi_prec = vec![0.0; len];
    aux_beliefs_into(proj, state, split, &mut xi, &mut xi_prec);
    (CVector::from_vec(xi), xi_prec)
}

/// Beliefs of all auxiliary points at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Beliefs {
    /// Column `n` is `xi_n`.
    pub xi: CMatrix,
    /// Column `n` is `diag(Xi_n)`.
    pub xi_prec: DMatrix<f64>,
}

impl Beliefs {
    pub fn zeros(users: usize) -> Self {
        Self {
            xi: CMatrix::zeros(users, users),
            xi_prec: DMatrix::zeros(users, users),
        }
    }

    /// `(sum_n xi_n, sum_n Xi_n)`.
    pub fn totals(&self) -> (CVector, Vec<f64>) {
        let len = self.xi.nrows();
        let mut s = CVector::zeros(len);
        let mut p = vec![0.0; len];
        for (col, pcol) in self
            .xi
            .as_slice()
            .chunks_exact(len)
            .zip(self.xi_prec.as_slice().chunks_exact(len))
        {
            for m in 0..len {
                s[m] += col[m];
                p[m] += pcol[m];
            }
        }
        (s, p)
    }
}

/// Damped update:
/// `lambda_0 <- (1-a) lambda_0 + a sum_n xi_n`,
/// `lambda_n <- (1-a) lambda_n + a sum_{m != n} xi_m`, and likewise for the
/// precision parts. The e-condition is preserved for any `a`.
pub fn update(state: &mut AuxiliaryState, beliefs: &Beliefs, alpha: f64) {
    let (s, p) = beliefs.totals();
    apply_update(state, beliefs, &s, &p, alpha);
    state.iteration += 1;
}

pub(crate) fn apply_update(
    state: &mut AuxiliaryState,
    beliefs: &Beliefs,
    target: &CVector,
    target_prec: &[f64],
    alpha: f64,
) {
    let keep = 1.0 - alpha;
    for m in 0..state.users() {
        state.obj_mean[m] = state.obj_mean[m] * keep + target[m] * alpha;
        state.obj_prec[m] = state.obj_prec[m] * keep + target_prec[m] * alpha;
    }
    blend_auxiliary(state, beliefs, target, target_prec, alpha);
}

/// `lambda_n <- (1-a) lambda_n + a (target - xi_n)`, likewise for `Lambda_n`.
pub(crate) fn blend_auxiliary(
    state: &mut AuxiliaryState,
    beliefs: &Beliefs,
    target: &CVector,
    target_prec: &[f64],
    alpha: f64,
) {
    let len = state.users();
    let keep = 1.0 - alpha;
    let own = beliefs.xi.as_slice().chunks_exact(len);
    let own_prec = beliefs.xi_prec.as_slice().chunks_exact(len);
    let cols = state.mean_param.as_mut_slice().chunks_exact_mut(len);
    let pcols = state.prec_param.as_mut_slice().chunks_exact_mut(len);
    for (((lam, prec), xi), xi_p) in cols.zip(pcols).zip(own).zip(own_prec) {
        for m in 0..len {
            lam[m] = lam[m] * keep + (target[m] - xi[m]) * alpha;
            prec[m] = prec[m] * keep + (target_prec[m] - xi_p[m]) * alpha;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `max |lambda_0^{t+1} - lambda_0^t|`.
    pub delta: f64,
    /// e-condition residual after the update.
    pub e_residual: f64,
    /// `max_n |mu_n[n] - mu_0[n]|` between auxiliary and objective means at the start of the iteration.
    pub m_residual: f64,
    #[serde(skip)]
    pub mean: Option<CVector>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trace {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
}

impl Trace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn final_delta(&self) -> f64 {
        self.records.last().map_or(f64::INFINITY, |r| r.delta)
    }
}

#[derive(Debug, Clone)]
pub struct LinearOutput {
    pub mu_hat: CVector,
    pub sigma_hat: Vec<f64>,
    pub trace: Trace,
}

/// Iteration engine shared by the linear and nonlinear detectors.
#[derive(Debug, Clone)]
pub struct CsIgaDetector {
    split: SplitComponents,
    state: AuxiliaryState,
    beliefs: Beliefs,
    proj: AuxiliaryProjection,
    aux_means: Vec<C64>,
    damping: f64,
}

impl CsIgaDetector {
    pub fn new(gram: &PrecomputedGram, damping: f64, init: InitMode) -> Result<Self> {
        validate_schedule(1, damping)?;
        let split = cross_split(gram)?;
        let users = split.users();
        Ok(Self {
            split,
            state: AuxiliaryState::new(users, init),
            beliefs: Beliefs::zeros(users),
            proj: AuxiliaryProjection::with_users(users),
            aux_means: vec![C64::new(0.0, 0.0); users],
            damping,
        })
    }

    pub fn split(&self) -> &SplitComponents {
        &self.split
    }

    pub fn state(&self) -> &AuxiliaryState {
        &self.state
    }

    pub fn beliefs(&self) -> &Beliefs {
        &self.beliefs
    }

    /// Entry `n` of each auxiliary mean from the last call to [`compute_beliefs`](Self::compute_beliefs).
    pub fn aux_means(&self) -> &[C64] {
        &self.aux_means
    }

    pub(crate) fn state_mut(&mut self) -> &mut AuxiliaryState {
        &mut self.state
    }

    /// Auxiliary update toward `target` using the beliefs of the last
    /// [`compute_beliefs`](Self::compute_beliefs) call. Leaves the objective untouched.
    pub(crate) fn blend(&mut self, target: &CVector, target_prec: &[f64], alpha: f64) {
        blend_auxiliary(&mut self.state, &self.beliefs, target, target_prec, alpha);
    }

    /// Moments and beliefs of every auxiliary point from the current state.
    pub fn compute_beliefs(&mut self) -> Result<()> {
        let len = self.split.users();
        let xi_cols = self.beliefs.xi.as_mut_slice().chunks_exact_mut(len);
        let prec_cols = self.beliefs.xi_prec.as_mut_slice().chunks_exact_mut(len);
        for (n, (xi, xi_prec)) in xi_cols.zip(prec_cols).enumerate() {
            aux_moments_into(&self.state, &self.split, n, &mut self.proj)?;
            aux_beliefs_into(&self.proj, &self.state, &self.split, xi, xi_prec);
            self.aux_means[n] = self.proj.mu;
        }
        Ok(())
    }

    /// One full iteration. Returns `max |Delta lambda_0|`.
    pub fn step(&mut self) -> Result<f64> {
        self.compute_beliefs()?;
        let before = self.state.obj_mean.clone();
        update(&mut self.state, &self.beliefs, self.damping);
        Ok(max_abs_diff(&before, &self.state.obj_mean))
    }

    pub fn estimate(&self) -> Result<(CVector, Vec<f64>)> {
        self.state.objective_moments(&self.split.diag)
    }

    fn m_residual(&self) -> f64 {
        match self.estimate() {
            Ok((mu, _)) => self
                .aux_means
                .iter()
                .zip(mu.iter())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max),
            Err(_) => f64::INFINITY,
        }
    }
}

pub(crate) fn max_abs_diff(a: &CVector, b: &CVector) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// Runs CS-IGA from an existing Gram precomputation.
pub fn detect_with_gram(gram: &PrecomputedGram, config: &CsIgaConfig) -> Result<LinearOutput> {
    config.validate()?;
    let mut det = CsIgaDetector::new(gram, config.damping, config.init)?;
    let mut trace = Trace::default();
    for t in 1..=config.max_iter {
        det.compute_beliefs()?;
        let m_residual = det.m_residual();
        let before = det.state.obj_mean.clone();
        update(&mut det.state, &det.beliefs, det.damping);
        let delta = max_abs_diff(&before, &det.state.obj_mean);
        let mean = if config.record_means {
            Some(det.estimate()?.0)
        } else {
            None
        };
        trace.records.push(IterationRecord {
            iteration: t,
            delta,
            e_residual: det.state.e_condition_residual(),
            m_residual,
            mean,
        });
        if config.tolerance.is_some_and(|tol| delta < tol) {
            trace.converged = true;
            break;
        }
    }
    let (mu_hat, sigma_hat) = det.estimate()?;
    Ok(LinearOutput {
        mu_hat,
        sigma_hat,
        trace,
    })
}

/// CS-IGA detection: precompute `K = H^H H / sigma2 + I`, cross split, iterate.
pub fn detect(problem: &DetectionProblem, config: &CsIgaConfig) -> Result<LinearOutput> {
    detect_with_gram(&precompute(problem, Variant::Linear), config)
}
