//! Monte Carlo sweeps, timing scans and result files.
//!
//! Every trial draws from its own ChaCha8 stream, indexed by the trial number,
//! so results do not depend on how trials are scheduled across threads. Noise
//! for each SNR point comes from a separate stream of the same trial, which
//! keeps channels and symbols common across the SNR axis.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{exact_marginals, lmmse};
use crate::cs_iga::{CsIgaDetector, InitMode};
use crate::error::{Error, Result};
use crate::model::{
    gram_condition_number, make_constellation, precompute, snr_to_sigma2, transmit, CMatrix,
    CVector, ChannelModel, Constellation, DetectionProblem, Variant, C64,
};
use crate::ncs_iga::{NcsIgaConfig, NcsIgaDetector};

pub const CSV_HEADER: &str =
    "detector,M,N,L,snr_db,iter,trials,bit_errors,bits,ber,ser,mse,fp_resid,iter_time_us,seed";

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "CSIGA_THREADS";

/// Redraws allowed per trial when the condition filter is active.
pub const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    CsIga,
    NcsIga,
    Lmmse,
    Mf,
    Exact,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::CsIga => "cs-iga",
            Self::NcsIga => "ncs-iga",
            Self::Lmmse => "lmmse",
            Self::Mf => "mf",
            Self::Exact => "exact",
        }
    }

    pub fn is_iterative(self) -> bool {
        matches!(self, Self::CsIga | Self::NcsIga)
    }

    pub fn default_damping(self) -> f64 {
        match self {
            Self::NcsIga => 0.5,
            _ => 0.7,
        }
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cs-iga" => Self::CsIga,
            "ncs-iga" => Self::NcsIga,
            "lmmse" => Self::Lmmse,
            "mf" => Self::Mf,
            "exact" => Self::Exact,
            _ => return Err(Error::InvalidParameter(format!("unknown detector {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::InvalidParameter(format!(
                "unknown output format {s:?}"
            ))),
        }
    }
}

/// Parses `a:b:step` (inclusive) or a comma-separated list.
pub fn parse_snr_list(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidParameter(format!("cannot parse SNR specification {s:?}"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let (a, b, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || b < a {
            return Err(bad());
        }
        let count = ((b - a) / step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| a + i as f64 * step).collect())
    } else {
        let v = s.split(',').map(num).collect::<Result<Vec<_>>>()?;
        if v.is_empty() {
            return Err(bad());
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub detector: DetectorKind,
    pub antennas: usize,
    pub users: usize,
    pub order: usize,
    pub snr_db: Vec<f64>,
    pub iters: usize,
    /// Defaults per detector when absent.
    pub damping: Option<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Redraw channels whose `H^H H` condition number exceeds this.
    pub cond_max: Option<f64>,
    pub init: InitMode,
    pub channel: ChannelModel,
    pub out: Option<PathBuf>,
    pub format: OutputFormat,
    /// Fill `iter_time_us` (makes output timing-dependent).
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            detector: DetectorKind::CsIga,
            antennas: 64,
            users: 16,
            order: 4,
            snr_db: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            iters: 10,
            damping: None,
            trials: 100,
            seed: 1,
            cond_max: None,
            init: InitMode::Zero,
            channel: ChannelModel::default(),
            out: None,
            format: OutputFormat::Csv,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn damping(&self) -> f64 {
        self.damping.unwrap_or(self.detector.default_damping())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidParameter(msg));
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.antennas == 0 || self.users == 0 {
            return fail("antennas and users must be positive".into());
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return fail("SNR list must be non-empty and finite".into());
        }
        if self.detector.is_iterative() {
            crate::cs_iga::validate_schedule(self.iters, self.damping())?;
        }
        if let Some(c) = self.cond_max {
            if !(c >= 1.0) {
                return fail(format!("condition cap must be >= 1, got {c}"));
            }
        }
        make_constellation(self.order)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn recorded_iterations(&self) -> usize {
        if self.detector.is_iterative() {
            self.iters
        } else {
            1
        }
    }
}

/// One output row: aggregates for one (SNR, iteration) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub detector: String,
    #[serde(rename = "M")]
    pub antennas: usize,
    #[serde(rename = "N")]
    pub users: usize,
    #[serde(rename = "L")]
    pub order: usize,
    pub snr_db: f64,
    /// 1-based; 0 for non-iterative detectors.
    pub iter: usize,
    pub trials: usize,
    pub bit_errors: u64,
    pub bits: u64,
    pub symbol_errors: u64,
    pub symbols: u64,
    pub ber: f64,
    pub ser: f64,
    pub mse: f64,
    pub fp_resid: Option<f64>,
    pub iter_time_us: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub rows: Vec<RunRow>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    bit_errors: u64,
    symbol_errors: u64,
    sq_error: f64,
    fp_resid: Option<f64>,
    time_ns: f64,
}

impl Tally {
    fn absorb(&mut self, other: &Tally) {
        self.bit_errors += other.bit_errors;
        self.symbol_errors += other.symbol_errors;
        self.sq_error += other.sq_error;
        self.time_ns += other.time_ns;
        self.fp_resid = match (self.fp_resid, other.fp_resid) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }
}

/// Stream for `(trial, tag)`: tag 0 draws the channel and symbols, tag `k + 1`
/// the noise at the `k`-th SNR point.
pub fn trial_rng(seed: u64, trial: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((trial << 16) | tag);
    rng
}

/// Draws a channel, honoring the condition cap by redrawing.
pub fn draw_channel(config: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<CMatrix> {
    let mut attempts = 0;
    loop {
        let h = config
            .channel
            .generate(config.antennas, config.users, rng)?;
        match config.cond_max {
            Some(cap) if gram_condition_number(&h) > cap => {
                attempts += 1;
                if attempts >= MAX_REDRAWS {
                    return Err(Error::RetryExhausted { attempts });
                }
            }
            _ => return Ok(h),
        }
    }
}

fn score(hard: &[usize], estimate: &CVector, sent: &[usize], x: &CVector) -> Tally {
    let mut t = Tally::default();
    for (k, (&a, &b)) in hard.iter().zip(sent).enumerate() {
        t.bit_errors += u64::from((a ^ b).count_ones());
        t.symbol_errors += u64::from(a != b);
        t.sq_error += (estimate[k] - x[k]).norm_sqr();
    }
    t
}

fn nearest_all(mu: &CVector, cons: &Constellation) -> Vec<usize> {
    mu.iter().map(|z| cons.nearest(*z)).collect()
}

/// Per-user scaled matched filter `h_k^H y / ||h_k||^2`.
fn single_user_estimates(problem: &DetectionProblem) -> CVector {
    let h = &problem.h;
    CVector::from_fn(problem.users(), |k, _| {
        let col = h.column(k);
        col.dotc(&problem.y) / C64::new(col.norm_squared(), 0.0)
    })
}

/// Runs one detector on one problem, returning a tally per recorded iteration.
fn run_detector(
    config: &ExperimentConfig,
    problem: &DetectionProblem,
    sent: &[usize],
    x: &CVector,
) -> Result<Vec<Tally>> {
    let cons = &problem.constellation;
    let timed = |f: &mut dyn FnMut() -> Result<()>| -> Result<f64> {
        let start = Instant::now();
        f()?;
        Ok(start.elapsed().as_nanos() as f64)
    };
    match config.detector {
        DetectorKind::CsIga => {
            let reference = lmmse(problem)?.0;
            let mut det = CsIgaDetector::new(
                &precompute(problem, Variant::Linear),
                config.damping(),
                config.init,
            )?;
            let mut out = Vec::with_capacity(config.iters);
            for _ in 0..config.iters {
                let time_ns = timed(&mut || det.step().map(|_| ()))?;
                let (mu, _) = det.estimate()?;
                let mut t = score(&nearest_all(&mu, cons), &mu, sent, x);
                t.fp_resid = Some(crate::cs_iga::max_abs_diff(&mu, &reference));
                t.time_ns = time_ns;
                out.push(t);
            }
            Ok(out)
        }
        DetectorKind::NcsIga => {
            let ncfg = NcsIgaConfig {
                max_iter: config.iters,
                damping: config.damping(),
                init: config.init,
                ..Default::default()
            };
            let mut det =
                NcsIgaDetector::new(&precompute(problem, Variant::Nonlinear), cons.clone(), ncfg)?;
            let mut out = Vec::with_capacity(config.iters);
            for _ in 0..config.iters {
                let time_ns = timed(&mut || det.step().map(|_| ()))?;
                let sp = det.posterior().expect("posterior after step");
                let mut t = score(&sp.hard_decisions(), &sp.mu_tilde, sent, x);
                t.time_ns = time_ns;
                out.push(t);
            }
            Ok(out)
        }
        DetectorKind::Lmmse => {
            let mu = lmmse(problem)?.0;
            Ok(vec![score(&nearest_all(&mu, cons), &mu, sent, x)])
        }
        DetectorKind::Mf => {
            let mu = single_user_estimates(problem);
            Ok(vec![score(&nearest_all(&mu, cons), &mu, sent, x)])
        }
        DetectorKind::Exact => {
            let ex = exact_marginals(problem)?;
            Ok(vec![score(&ex.marginal_argmax(), &ex.mmse_mean, sent, x)])
        }
    }
}

/// All SNR points of one trial: `[snr][iteration]`.
fn run_trial(
    config: &ExperimentConfig,
    cons: &Constellation,
    trial: u64,
) -> Result<Vec<Vec<Tally>>> {
    let mut rng = trial_rng(config.seed, trial, 0);
    let h = draw_channel(config, &mut rng)?;
    let sent = crate::model::draw_symbols(config.users, config.order, &mut rng);
    config
        .snr_db
        .iter()
        .enumerate()
        .map(|(k, &snr)| {
            let sigma2 = snr_to_sigma2(snr);
            let mut noise_rng = trial_rng(config.seed, trial, k as u64 + 1);
            let (x, y) = transmit(&sent, &h, sigma2, cons, &mut noise_rng)?;
            let problem = DetectionProblem::new(h.clone(), y, sigma2, cons.clone())?;
            run_detector(config, &problem, &sent, &x)
        })
        .collect()
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| {
            Error::InvalidParameter(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build thread pool: {e}")))
}

/// Runs the full Monte Carlo sweep described by `config`.
pub fn run_sweep(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let cons = make_constellation(config.order)?;
    let per_trial: Vec<Vec<Vec<Tally>>> = thread_pool()?.install(|| {
        (0..config.trials as u64)
            .into_par_iter()
            .map(|t| run_trial(config, &cons, t))
            .collect::<Result<Vec<_>>>()
    })?;

    let iters = config.recorded_iterations();
    let mut acc = vec![vec![Tally::default(); iters]; config.snr_db.len()];
    // fixed trial order keeps floating-point sums reproducible
    for trial in &per_trial {
        for (snr_acc, snr_trial) in acc.iter_mut().zip(trial) {
            for (a, t) in snr_acc.iter_mut().zip(snr_trial) {
                a.absorb(t);
            }
        }
    }

    let trials = config.trials as u64;
    let symbols = trials * config.users as u64;
    let bits = symbols * cons.bits_per_symbol() as u64;
    let mut rows = Vec::with_capacity(config.snr_db.len() * iters);
    for (snr, snr_acc) in config.snr_db.iter().zip(&acc) {
        for (i, a) in snr_acc.iter().enumerate() {
            rows.push(RunRow {
                detector: config.detector.name().to_string(),
                antennas: config.antennas,
                users: config.users,
                order: config.order,
                snr_db: *snr,
                iter: if config.detector.is_iterative() {
                    i + 1
                } else {
                    0
                },
                trials: config.trials,
                bit_errors: a.bit_errors,
                bits,
                symbol_errors: a.symbol_errors,
                symbols,
                ber: a.bit_errors as f64 / bits as f64,
                ser: a.symbol_errors as f64 / symbols as f64,
                mse: a.sq_error / symbols as f64,
                fp_resid: a.fp_resid,
                iter_time_us: (config.timing && config.detector.is_iterative())
                    .then(|| a.time_ns / trials as f64 / 1e3),
                seed: config.seed,
            });
        }
    }
    Ok(RunRecord {
        config_hash: config.hash(),
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_csv(rows: &[RunRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.detector,
            r.antennas,
            r.users,
            r.order,
            r.snr_db,
            r.iter,
            r.trials,
            r.bit_errors,
            r.bits,
            r.ber,
            r.ser,
            r.mse,
            opt(r.fp_resid),
            opt(r.iter_time_us),
            r.seed
        )
        .expect("writing to a String");
    }
    s
}

pub fn render(record: &RunRecord, format: OutputFormat) -> Result<String> {
    Ok(match format {
        OutputFormat::Csv => render_csv(&record.rows),
        OutputFormat::Json => serde_json::to_string_pretty(record)? + "\n",
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub version: &'static str,
    pub git_commit: String,
    pub config_hash: String,
    pub config: &'a ExperimentConfig,
    pub args: Vec<String>,
    pub threads: usize,
}

pub fn git_commit() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

/// `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Writes the result file and its manifest.
pub fn write_outputs(
    record: &RunRecord,
    config: &ExperimentConfig,
    out: &Path,
    args: Vec<String>,
) -> Result<()> {
    std::fs::write(out, render(record, config.format)?)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        git_commit: git_commit(),
        config_hash: record.config_hash.clone(),
        config,
        args,
        threads: thread_pool()?.current_num_threads(),
    };
    std::fs::write(
        manifest_path(out),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingPoint {
    pub antennas: usize,
    pub users: usize,
    pub order: usize,
    pub median_iter_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingTable {
    pub detector: String,
    pub points: Vec<TimingPoint>,
    /// Least-squares slope of `ln t` against `ln N`.
    pub slope: f64,
}

/// Median wall time of one detector iteration, Gram precomputation excluded.
///
/// Each sample times a batch of steps long enough to dwarf timer resolution.
pub fn median_iteration_time(
    detector: DetectorKind,
    antennas: usize,
    users: usize,
    order: usize,
    snr_db: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let cons = make_constellation(order)?;
    let mut rng = trial_rng(seed, 0, 0);
    let h = crate::model::generate_channel(antennas, users, &mut rng, None)?;
    let sent = crate::model::draw_symbols(users, order, &mut rng);
    let sigma2 = snr_to_sigma2(snr_db);
    let (_, y) = transmit(&sent, &h, sigma2, &cons, &mut rng)?;
    let problem = DetectionProblem::new(h, y, sigma2, cons.clone())?;

    let mut step: Box<dyn FnMut() -> Result<()>> = match detector {
        DetectorKind::CsIga => {
            let mut det =
                CsIgaDetector::new(&precompute(&problem, Variant::Linear), 0.7, InitMode::Zero)?;
            Box::new(move || det.step().map(|_| ()))
        }
        DetectorKind::NcsIga => {
            let fresh = NcsIgaDetector::new(
                &precompute(&problem, Variant::Nonlinear),
                cons,
                NcsIgaConfig::default(),
            )?;
            // restart periodically so the state never drifts far from a real run
            let mut det = fresh.clone();
            let mut count = 0;
            Box::new(move || {
                count += 1;
                if count % 10 == 0 {
                    det = fresh.clone();
                }
                det.step().map(|_| ())
            })
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "{} has no iterations to time",
                other.name()
            )));
        }
    };

    // calibrate the batch so one sample takes about 2 ms
    step()?;
    let start = Instant::now();
    step()?;
    let one = start.elapsed().as_secs_f64().max(1e-9);
    let batch = ((2e-3 / one).ceil() as usize).clamp(1, 10_000);

    let mut times = Vec::with_capacity(samples);
    for _ in 0..samples.max(1) {
        let start = Instant::now();
        for _ in 0..batch {
            step()?;
        }
        times.push(start.elapsed().as_secs_f64() / batch as f64);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Ordinary least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Median per-iteration time for each user count, plus the fitted slope.
pub fn timing_scan(
    detector: DetectorKind,
    antennas: usize,
    users: &[usize],
    order: usize,
    snr_db: f64,
    samples: usize,
    seed: u64,
) -> Result<TimingTable> {
    if users.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(
            "user counts must be strictly ascending".into(),
        ));
    }
    let mut points = Vec::with_capacity(users.len());
    for &n in users {
        let t = median_iteration_time(detector, antennas, n, order, snr_db, samples, seed)?;
        points.push(TimingPoint {
            antennas,
            users: n,
            order,
            median_iter_us: t * 1e6,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.users as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_iter_us).collect();
    let slope = if points.len() >= 2 {
        loglog_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    Ok(TimingTable {
        detector: detector.name().to_string(),
        points,
        slope,
    })
}

pub fn render_timing_csv(table: &TimingTable) -> String {
    let mut s = String::from("detector,M,N,L,median_iter_us\n");
    for p in &table.points {
        writeln!(
            s,
            "{},{},{},{},{}",
            table.detector, p.antennas, p.users, p.order, p.median_iter_us
        )
        .expect("writing to a String");
    }
    s
}
