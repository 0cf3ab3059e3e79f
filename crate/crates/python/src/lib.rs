//! Python bindings. Matrices are passed as lists of rows of complex numbers.

use nalgebra::DMatrix;
use num_complex::Complex64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use csiga::baselines;
use csiga::cs_iga::{CsIgaConfig, InitMode};
use csiga::harness::{self, ExperimentConfig};
use csiga::model::{self, CMatrix, CVector, DetectionProblem};
use csiga::ncs_iga::NcsIgaConfig;

fn to_py(e: csiga::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<Complex64>>) -> PyResult<CMatrix> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err(
            "H must be a non-empty list of equal-length rows",
        ));
    }
    Ok(CMatrix::from_fn(m, n, |i, j| rows[i][j]))
}

fn problem(
    h: Vec<Vec<Complex64>>,
    y: Vec<Complex64>,
    sigma2: f64,
    order: usize,
) -> PyResult<DetectionProblem> {
    let cons = model::make_constellation(order).map_err(to_py)?;
    DetectionProblem::new(matrix(h)?, CVector::from_vec(y), sigma2, cons).map_err(to_py)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn parse_init(init: &str) -> PyResult<InitMode> {
    match init {
        "zero" => Ok(InitMode::Zero),
        "paper" => Ok(InitMode::NegativeUnit),
        _ => Err(PyValueError::new_err(format!("unknown init mode {init:?}"))),
    }
}

#[pyclass(name = "Constellation", module = "csiga_py")]
struct PyConstellation {
    inner: model::Constellation,
}

#[pymethods]
impl PyConstellation {
    #[new]
    fn new(order: usize) -> PyResult<Self> {
        Ok(Self {
            inner: model::make_constellation(order).map_err(to_py)?,
        })
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn bits_per_symbol(&self) -> usize {
        self.inner.bits_per_symbol()
    }

    fn points(&self) -> Vec<Complex64> {
        self.inner.points().to_vec()
    }

    fn label(&self, index: usize) -> PyResult<Vec<u8>> {
        if index >= self.inner.order() {
            return Err(PyValueError::new_err(format!("index {index} out of range")));
        }
        Ok(self.inner.label(index))
    }

    fn nearest(&self, z: Complex64) -> usize {
        self.inner.nearest(z)
    }
}

type Simulated = (
    Vec<Vec<Complex64>>,
    Vec<usize>,
    Vec<Complex64>,
    Vec<Complex64>,
);

/// Draws `(H, symbol indices, x, y)` for an i.i.d. channel.
#[pyfunction]
#[pyo3(signature = (antennas, users, order, snr_db, seed))]
fn simulate(
    antennas: usize,
    users: usize,
    order: usize,
    snr_db: f64,
    seed: u64,
) -> PyResult<Simulated> {
    let cons = model::make_constellation(order).map_err(to_py)?;
    let mut rng = harness::trial_rng(seed, 0, 0);
    let h = model::generate_channel(antennas, users, &mut rng, None).map_err(to_py)?;
    let idx = model::draw_symbols(users, order, &mut rng);
    let (x, y) =
        model::transmit(&idx, &h, model::snr_to_sigma2(snr_db), &cons, &mut rng).map_err(to_py)?;
    let h_rows = (0..antennas)
        .map(|i| h.row(i).iter().copied().collect())
        .collect();
    Ok((
        h_rows,
        idx,
        x.iter().copied().collect(),
        y.iter().copied().collect(),
    ))
}

#[pyfunction]
fn snr_to_sigma2(snr_db: f64) -> f64 {
    model::snr_to_sigma2(snr_db)
}

/// Direct LMMSE: `(mean, diagonal of the error covariance)`.
#[pyfunction]
#[pyo3(signature = (h, y, sigma2, order=4))]
fn lmmse(
    h: Vec<Vec<Complex64>>,
    y: Vec<Complex64>,
    sigma2: f64,
    order: usize,
) -> PyResult<(Vec<Complex64>, Vec<f64>)> {
    let (mu, sigma) = baselines::lmmse(&problem(h, y, sigma2, order)?).map_err(to_py)?;
    Ok((mu.iter().copied().collect(), sigma))
}

/// Linear detector. Returns a dict with `mu`, `sigma`, `iterations`, `converged`.
#[pyfunction]
#[pyo3(signature = (h, y, sigma2, order=4, iters=100, damping=0.7, tol=Some(1e-8), init="zero"))]
#[allow(clippy::too_many_arguments)]
fn cs_iga<'py>(
    py: Python<'py>,
    h: Vec<Vec<Complex64>>,
    y: Vec<Complex64>,
    sigma2: f64,
    order: usize,
    iters: usize,
    damping: f64,
    tol: Option<f64>,
    init: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = CsIgaConfig {
        max_iter: iters,
        damping,
        tolerance: tol,
        init: parse_init(init)?,
        record_means: false,
    };
    let out = csiga::cs_iga::detect(&problem(h, y, sigma2, order)?, &cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mu", out.mu_hat.iter().copied().collect::<Vec<_>>())?;
    d.set_item("sigma", out.sigma_hat)?;
    d.set_item("iterations", out.trace.iterations())?;
    d.set_item("converged", out.trace.converged)?;
    Ok(d)
}

/// Nonlinear detector. Returns a dict with `llr` (N x B), `hard`, `mu`, `sigma`, `eta`.
#[pyfunction]
#[pyo3(signature = (h, y, sigma2, order=4, iters=10, damping=0.5, llr_clip=30.0))]
#[allow(clippy::too_many_arguments)]
fn ncs_iga<'py>(
    py: Python<'py>,
    h: Vec<Vec<Complex64>>,
    y: Vec<Complex64>,
    sigma2: f64,
    order: usize,
    iters: usize,
    damping: f64,
    llr_clip: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = NcsIgaConfig {
        max_iter: iters,
        damping,
        llr_clip,
        ..Default::default()
    };
    let out = csiga::ncs_iga::detect_soft(&problem(h, y, sigma2, order)?, &cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("llr", rows(&out.llr))?;
    d.set_item("hard", out.hard)?;
    d.set_item(
        "mu",
        out.posterior.mu_tilde.iter().copied().collect::<Vec<_>>(),
    )?;
    d.set_item("sigma", out.posterior.sigma_tilde)?;
    d.set_item("eta", rows(&out.posterior.eta))?;
    Ok(d)
}

/// Exhaustive marginal posteriors for small problems: `(eta rows, joint MAP indices)`.
#[pyfunction]
#[pyo3(signature = (h, y, sigma2, order=4))]
fn exact_marginals(
    h: Vec<Vec<Complex64>>,
    y: Vec<Complex64>,
    sigma2: f64,
    order: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ex = baselines::exact_marginals(&problem(h, y, sigma2, order)?).map_err(to_py)?;
    Ok((rows(&ex.eta), ex.map_joint))
}

/// Runs a sweep from a JSON config (same fields as the CLI manifest) and returns CSV text.
#[pyfunction]
fn run_sweep(config_json: &str) -> PyResult<String> {
    let cfg: ExperimentConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let rec = harness::run_sweep(&cfg).map_err(to_py)?;
    Ok(harness::render_csv(&rec.rows))
}

#[pymodule]
fn csiga_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConstellation>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(snr_to_sigma2, m)?)?;
    m.add_function(wrap_pyfunction!(lmmse, m)?)?;
    m.add_function(wrap_pyfunction!(cs_iga, m)?)?;
    m.add_function(wrap_pyfunction!(ncs_iga, m)?)?;
    m.add_function(wrap_pyfunction!(exact_marginals, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    Ok(())
}
