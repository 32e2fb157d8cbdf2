//! Parallel Monte Carlo experiments.
//!
//! Replica `i` draws its noise from stream `i` of the master seed, results
//! are collected in replica order and reduced sequentially, so every output
//! is a function of the config alone, whatever the worker count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimate::{EstimateError, Normalized};
use crate::ledger::{
    bercu_touati_bound, BercuTouatiTally, EstimatorAccumulator, PathAccumulator, ScalarEstimates,
    StatLedger, TruncationAccumulator, TruncationDiagnostics,
};
use crate::noise::{stream_rng, NoiseSpec};
use crate::params::{sample_schedule, Case, ModelConfig, ParamsError, ScheduleSample};
use crate::rates::{stationary_variances, RateModel, RatesError, Statistic};
use crate::simulate::{expected_sums, stream_path};
use crate::sum::CompensatedSum;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Rates(#[from] RatesError),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("all {0} replicas were degenerate")]
    AllReplicasDegenerate(usize),
    #[error("could not build worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Concentration,
    VarianceMatch,
    TailSlope,
    BercuTouati,
    Truncation,
}

impl ExperimentKind {
    pub fn file_stem(self) -> &'static str {
        match self {
            ExperimentKind::Concentration => "concentration",
            ExperimentKind::VarianceMatch => "variance",
            ExperimentKind::TailSlope => "tailslope",
            ExperimentKind::BercuTouati => "bercu-touati",
            ExperimentKind::Truncation => "truncation",
        }
    }
}

/// Explicit `(x, y)` grid for the Bercu-Touati experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BercuTouatiGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationSettings {
    pub r: f64,
    /// Sample sizes to sweep; the model's own `n` when empty.
    #[serde(default)]
    pub n_grid: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub replicas: usize,
    pub master_seed: u64,
    pub experiment: ExperimentKind,
    /// Tail thresholds `x`.
    #[serde(default)]
    pub thresholds: Vec<f64>,
    /// Estimator examined by the tail-slope experiment.
    #[serde(default = "default_statistic")]
    pub statistic: Statistic,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bercu_touati: Option<BercuTouatiGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<TruncationSettings>,
}

fn default_statistic() -> Statistic {
    Statistic::Theta
}

impl ExperimentConfig {
    pub fn new(model: ModelConfig, experiment: ExperimentKind, replicas: usize, master_seed: u64) -> Self {
        Self {
            model,
            replicas,
            master_seed,
            experiment,
            thresholds: Vec::new(),
            statistic: Statistic::Theta,
            bercu_touati: None,
            truncation: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate()?;
        if self.replicas == 0 {
            return Err(HarnessError::InvalidConfig("replicas must be at least 1".into()));
        }
        if self.thresholds.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(HarnessError::InvalidConfig("thresholds must be nonnegative".into()));
        }
        if let Some(g) = &self.bercu_touati {
            if g.xs.iter().chain(&g.ys).any(|&v| !(v > 0.0)) {
                return Err(HarnessError::InvalidConfig("Bercu-Touati grid must be positive".into()));
            }
        }
        if let Some(t) = &self.truncation {
            if !(t.r > 0.0) {
                return Err(HarnessError::InvalidConfig("truncation r must be positive".into()));
            }
            if t.n_grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(HarnessError::InvalidConfig("n_grid must be increasing".into()));
            }
        }
        Ok(())
    }
}

/// SHA-256 of `data` under git blob framing (`blob <len>\0<data>`).
pub fn content_hash(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", data.len()).as_bytes());
    h.update(data);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    pub name: String,
    /// Asymptotic limit.
    pub target: f64,
    pub estimate: f64,
    /// Absent with a single replica.
    pub std_error: Option<f64>,
    /// The same quantity at the configured finite `kappa`, where available.
    pub finite_reference: Option<f64>,
    pub replicas_used: usize,
    pub replicas_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub x: f64,
    pub count: u64,
    pub p_hat: f64,
    /// `-log(p_hat) / a_n^2`; absent when censored.
    pub slope: Option<f64>,
    pub rate_prediction: f64,
    /// No exceedance was seen; `slope_lower_bound` replaces the slope.
    pub lower_bound_flag: bool,
    pub slope_lower_bound: Option<f64>,
    /// Slope of an exact two-sided Gaussian tail with the finite-`kappa`
    /// variance, when one is known.
    pub gaussian_reference_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BercuTouatiRecord {
    pub x: f64,
    pub y: f64,
    pub count: u64,
    pub frequency: f64,
    pub bound: f64,
    /// `sqrt(b (1 - b) / replicas)` with `b = min(bound, 1)`.
    pub binomial_se: f64,
    /// `frequency <= bound + 3 binomial_se`.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRecord {
    pub n: usize,
    pub kappa: f64,
    pub a_n: f64,
    pub gap_mean: f64,
    pub gap_p50: f64,
    pub gap_p99: f64,
    pub gap_max: f64,
    pub mean_truncated_v: f64,
    pub cov_mean: [[f64; 2]; 2],
    pub cov_trunc_mean: [[f64; 2]; 2],
    pub cov_target: [[f64; 2]; 2],
    /// Exact expectation of the normalized predictable covariance.
    pub cov_finite_reference: [[f64; 2]; 2],
    pub replicas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub replicas: usize,
    pub replicas_used: usize,
    pub replicas_degenerate: usize,
    pub schedule: ScheduleSample,
    pub rate_model: RateModel,
    #[serde(default)]
    pub stats: Vec<StatRecord>,
    #[serde(default)]
    pub thresholds: Vec<ThresholdRecord>,
    #[serde(default)]
    pub bercu_touati: Vec<BercuTouatiRecord>,
    #[serde(default)]
    pub truncation: Vec<TruncationRecord>,
}

impl ExperimentResult {
    pub fn stat(&self, name: &str) -> Option<&StatRecord> {
        self.stats.iter().find(|s| s.name == name)
    }
}

/// Runs `f` on every replica index inside a pool of `threads` workers
/// (0 = rayon's default) and returns the outputs in index order.
fn map_replicas<T, F>(threads: usize, replicas: usize, f: F) -> Result<Vec<T>, HarnessError>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    let body = || (0..replicas as u64).into_par_iter().map(&f).collect::<Vec<T>>();
    if threads == 0 {
        Ok(body())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| HarnessError::Pool(e.to_string()))?;
        Ok(pool.install(body))
    }
}

/// Mean and standard error of a sample, summed in order.
fn mean_se(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().copied().collect::<CompensatedSum>().value() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .collect::<CompensatedSum>()
        .value()
        / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Sample covariance of paired samples with a delta-method standard error.
fn covariance(a: &[f64], b: &[f64]) -> (f64, Option<f64>) {
    let (ma, _) = mean_se(a);
    let (mb, _) = mean_se(b);
    let prods: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    let n = a.len() as f64;
    let (m, se) = mean_se(&prods);
    if a.len() < 2 {
        return (m, None);
    }
    (m * n / (n - 1.0), se)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (c, _) = covariance(a, b);
    let (va, _) = covariance(a, a);
    let (vb, _) = covariance(b, b);
    c / (va * vb).sqrt()
}

/// Split replica outcomes into successes and a degenerate count.
fn partition<T>(outcomes: Vec<Result<T, EstimateError>>) -> (Vec<T>, usize) {
    let mut ok = Vec::with_capacity(outcomes.len());
    let mut bad = 0;
    for o in outcomes {
        match o {
            Ok(v) => ok.push(v),
            Err(_) => bad += 1,
        }
    }
    (ok, bad)
}

struct Setup {
    schedule: ScheduleSample,
    spec: NoiseSpec,
    rates: RateModel,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup, HarnessError> {
    cfg.validate()?;
    let schedule = sample_schedule(&cfg.model, cfg.model.n)?;
    let spec = cfg.model.noise_spec();
    let rates = RateModel::build(cfg.model.gamma1, cfg.model.gamma2, cfg.model.sigma)?.with_noise(&spec);
    Ok(Setup {
        schedule,
        spec,
        rates,
    })
}

fn base_result(cfg: &ExperimentConfig, s: &Setup) -> Result<ExperimentResult, HarnessError> {
    let canonical = serde_json::to_vec(cfg)?;
    Ok(ExperimentResult {
        experiment: cfg.experiment,
        config: cfg.clone(),
        config_hash: content_hash(&canonical),
        replicas: cfg.replicas,
        replicas_used: 0,
        replicas_degenerate: 0,
        schedule: s.schedule,
        rate_model: s.rates.clone(),
        stats: Vec::new(),
        thresholds: Vec::new(),
        bercu_touati: Vec::new(),
        truncation: Vec::new(),
    })
}

/// Lean replica: the three estimators from one streamed path.
fn estimator_replica(
    schedule: &ScheduleSample,
    spec: &NoiseSpec,
    seed: u64,
    index: u64,
) -> Result<ScalarEstimates, EstimateError> {
    let mut rng = stream_rng(seed, index);
    let mut acc = EstimatorAccumulator::new();
    stream_path(schedule, spec, &mut rng, |s| acc.push(s.x));
    acc.finish()
}

/// Full replica: every ledger quantity from one streamed path.
fn ledger_replica(
    schedule: &ScheduleSample,
    spec: &NoiseSpec,
    seed: u64,
    index: u64,
) -> Result<StatLedger, EstimateError> {
    let mut rng = stream_rng(seed, index);
    let mut acc = PathAccumulator::new();
    stream_path(schedule, spec, &mut rng, |s| acc.push(s));
    let sums = acc.finish();
    let est = sums.estimates()?;
    Ok(StatLedger::assemble(&sums, &est, schedule, spec.sigma))
}

/// Limits of the normalized sums, in the order S, P, T, Q, J_{n-1}, H.
pub fn concentration_targets(case: Case, gamma1: f64, gamma2: f64, sigma: f64) -> [f64; 6] {
    let (g1, g2, s2) = (gamma1, gamma2, sigma * sigma);
    let s = g1 + g2;
    match case {
        Case::CaseI => {
            let sp = -s2 / (2.0 * g1 * g2 * s);
            [sp, sp, -s2 / (2.0 * g2), s2 / (2.0 * g2 * s), -s2 / (2.0 * s), s2 / 2.0]
        }
        Case::CaseII => [
            -s * s2 / (8.0 * g1 * g2),
            (g1 - g2) * s2 / (8.0 * g1 * g2),
            -s2 / (2.0 * g2),
            -s2 / (4.0 * g2),
            -s2 / (2.0 * s),
            -s2 / s,
        ],
    }
}

/// Divisors applied to S, P, T, Q, J_{n-1}, H.
pub fn concentration_norms(case: Case, n: usize, kappa: f64) -> [f64; 6] {
    let n = n as f64;
    match case {
        Case::CaseI => [
            n * kappa.powi(3),
            n * kappa.powi(3),
            n * kappa,
            n * kappa * kappa,
            n * kappa,
            n,
        ],
        Case::CaseII => [n * kappa; 6],
    }
}

pub const CONCENTRATION_NAMES: [&str; 6] = ["S", "P", "T", "Q", "J_prev", "H"];

pub fn run_concentration(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentResult, HarnessError> {
    let st = setup(cfg)?;
    let sched = st.schedule;
    let norms = concentration_norms(sched.case, sched.n, sched.kappa);
    let outcomes = map_replicas(threads, cfg.replicas, |i| {
        ledger_replica(&sched, &st.spec, cfg.master_seed, i).map(|lg| {
            let raw = [lg.s, lg.p, lg.t, lg.q, lg.j_prev, lg.h];
            let mut out = [0.0; 6];
            for k in 0..6 {
                out[k] = raw[k] / norms[k];
            }
            out
        })
    })?;
    let (rows, bad) = partition(outcomes);
    if rows.is_empty() {
        return Err(HarnessError::AllReplicasDegenerate(cfg.replicas));
    }
    let m = &cfg.model;
    let targets = concentration_targets(sched.case, m.gamma1, m.gamma2, m.sigma);
    let ex = expected_sums(&sched, m.sigma);
    let exact = [
        Some(ex.s),
        Some(ex.p),
        Some(ex.t),
        Some(ex.q),
        None,
        None,
    ];
    let mut res = base_result(cfg, &st)?;
    res.replicas_used = rows.len();
    res.replicas_degenerate = bad;
    for k in 0..6 {
        let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let (estimate, std_error) = mean_se(&col);
        res.stats.push(StatRecord {
            name: CONCENTRATION_NAMES[k].to_string(),
            target: targets[k],
            estimate,
            std_error,
            finite_reference: exact[k].map(|e| e / norms[k]),
            replicas_used: rows.len(),
            replicas_degenerate: bad,
        });
    }
    Ok(res)
}

/// Scaled deviations `(theta, rho, d)` of one replica, not divided by `a_n`.
fn deviations(sched: &ScheduleSample, e: &ScalarEstimates) -> [f64; 3] {
    let z = Normalized::from_estimates(sched, e.theta_hat, e.rho_hat, e.d_hat).as_array();
    z.map(|v| v * sched.a_n)
}

/// Finite-`kappa` variances of the scaled deviations, from the time-invariant
/// formulas at the current roots.
pub fn finite_variances(sched: &ScheduleSample) -> [f64; 3] {
    let (vt, vr) = stationary_variances(sched.theta_n, sched.rho_n);
    let k = sched.kappa;
    match sched.case {
        Case::CaseI => [k.powi(3) * vt, k * vr, 4.0 * k * vr],
        Case::CaseII => [vt / k, vr / k, 4.0 * vr / k],
    }
}

pub fn run_variance_match(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentResult, HarnessError> {
    let st = setup(cfg)?;
    if cfg.replicas < 100 {
        return Err(HarnessError::InvalidConfig(
            "variance matching needs at least 100 replicas".into(),
        ));
    }
    let sched = st.schedule;
    let outcomes = map_replicas(threads, cfg.replicas, |i| {
        estimator_replica(&sched, &st.spec, cfg.master_seed, i).map(|e| deviations(&sched, &e))
    })?;
    let (rows, bad) = partition(outcomes);
    if rows.is_empty() {
        return Err(HarnessError::AllReplicasDegenerate(cfg.replicas));
    }
    let col = |k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
    let (th, rh, dh) = (col(0), col(1), col(2));
    let finite = finite_variances(&sched);
    let used = rows.len();
    let rec = |name: &str, target: f64, (estimate, std_error): (f64, Option<f64>), finite: Option<f64>| StatRecord {
        name: name.to_string(),
        target,
        estimate,
        std_error,
        finite_reference: finite,
        replicas_used: used,
        replicas_degenerate: bad,
    };
    let r = &st.rates;
    let case = sched.case;
    let mut stats = vec![
        rec("mean_theta", 0.0, mean_se(&th), None),
        rec("mean_rho", 0.0, mean_se(&rh), None),
        rec("mean_d", 0.0, mean_se(&dh), None),
        rec(
            "var_theta",
            r.limit_variance(case, Statistic::Theta),
            covariance(&th, &th),
            Some(finite[0]),
        ),
        rec(
            "var_rho",
            r.limit_variance(case, Statistic::Rho),
            covariance(&rh, &rh),
            Some(finite[1]),
        ),
        rec(
            "var_d",
            r.limit_variance(case, Statistic::D),
            covariance(&dh, &dh),
            Some(finite[2]),
        ),
    ];
    match case {
        Case::CaseI => stats.push(rec("cov_theta_rho", 0.0, covariance(&th, &rh), None)),
        Case::CaseII => stats.push(rec("corr_theta_rho", -1.0, (correlation(&th, &rh), None), None)),
    }
    let mut res = base_result(cfg, &st)?;
    res.replicas_used = used;
    res.replicas_degenerate = bad;
    res.stats = stats;
    Ok(res)
}

/// Two-sided exceedance frequencies of normalized samples.
///
/// `samples` are already divided by `a_n`; the event at `x` is
/// `|z| >= x` and its slope is `-log(p_hat) / a_n^2`.
pub fn tail_records(
    samples: &[f64],
    a_n: f64,
    xs: &[f64],
    rate: impl Fn(f64) -> f64,
    reference_variance: Option<f64>,
) -> Vec<ThresholdRecord> {
    let used = samples.len() as f64;
    let a2 = a_n * a_n;
    xs.iter()
        .map(|&x| {
            let count = samples.iter().filter(|z| z.abs() >= x).count() as u64;
            let p_hat = count as f64 / used;
            let censored = count == 0;
            let gaussian_reference_slope = reference_variance.map(|v| {
                let p = libm::erfc(x * a_n / (2.0 * v).sqrt());
                -p.ln() / a2
            });
            ThresholdRecord {
                x,
                count,
                p_hat,
                slope: (!censored).then(|| -p_hat.ln() / a2),
                rate_prediction: rate(x),
                lower_bound_flag: censored,
                slope_lower_bound: censored.then(|| used.ln() / a2),
                gaussian_reference_slope,
            }
        })
        .collect()
}

pub fn run_tail_slope(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentResult, HarnessError> {
    let st = setup(cfg)?;
    let sched = st.schedule;
    let idx = match cfg.statistic {
        Statistic::Theta => 0,
        Statistic::Rho => 1,
        Statistic::D => 2,
    };
    let outcomes = map_replicas(threads, cfg.replicas, |i| {
        estimator_replica(&sched, &st.spec, cfg.master_seed, i)
            .map(|e| deviations(&sched, &e)[idx] / sched.a_n)
    })?;
    let (zs, bad) = partition(outcomes);
    if zs.is_empty() {
        return Err(HarnessError::AllReplicasDegenerate(cfg.replicas));
    }
    let name = RateModel::rate_name(sched.case, cfg.statistic);
    let rates = &st.rates;
    let reference = finite_variances(&sched)[idx];
    let mut res = base_result(cfg, &st)?;
    res.replicas_used = zs.len();
    res.replicas_degenerate = bad;
    res.thresholds = tail_records(
        &zs,
        sched.a_n,
        &cfg.thresholds,
        |x| rates.eval_rate(name, x).expect("closed-form rate"),
        Some(reference),
    );
    let (mean, se) = mean_se(&zs);
    res.stats.push(StatRecord {
        name: "mean_normalized".into(),
        target: 0.0,
        estimate: mean,
        std_error: se,
        finite_reference: None,
        replicas_used: zs.len(),
        replicas_degenerate: bad,
    });
    Ok(res)
}

/// Bound levels used to place the default `x` grid.
pub const BERCU_TOUATI_BOUNDS: [f64; 3] = [0.2, 0.05, 0.01];
/// Multiples of `E(<M>_n + [M]_n)` used as the default `y` grid.
pub const BERCU_TOUATI_Y_MULTIPLES: [f64; 3] = [0.75, 1.0, 1.5];

/// Default grid: `y` at multiples of `E(<M>_n + [M]_n) = 2 sigma^2 E S_{n-1}`
/// and `x = sqrt(2 y ln(2 / b))` at the middle `y` for each bound level `b`.
pub fn default_bercu_touati_grid(sched: &ScheduleSample, sigma: f64) -> BercuTouatiGrid {
    let mean = 2.0 * sigma * sigma * expected_sums(sched, sigma).s_prev;
    let ys: Vec<f64> = BERCU_TOUATI_Y_MULTIPLES.iter().map(|m| m * mean).collect();
    let xs = BERCU_TOUATI_BOUNDS
        .iter()
        .map(|b| (2.0 * mean * (2.0 / b).ln()).sqrt())
        .collect();
    BercuTouatiGrid { xs, ys }
}

pub fn run_bercu_touati(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentResult, HarnessError> {
    let st = setup(cfg)?;
    let sched = st.schedule;
    let grid = cfg
        .bercu_touati
        .clone()
        .unwrap_or_else(|| default_bercu_touati_grid(&sched, cfg.model.sigma));
    let s2 = cfg.model.sigma * cfg.model.sigma;
    let rows = map_replicas(threads, cfg.replicas, |i| {
        let mut rng = stream_rng(cfg.master_seed, i);
        let mut acc = PathAccumulator::new();
        stream_path(&sched, &st.spec, &mut rng, |s| acc.push(s));
        let sums = acc.finish();
        (sums.m, s2 * sums.s_prev, sums.bracket_m)
    })?;
    let mut tally = BercuTouatiTally::new(grid.xs.clone(), grid.ys.clone());
    for (m, qv, br) in rows {
        tally.record(m, qv, br);
    }
    let mut res = base_result(cfg, &st)?;
    res.replicas_used = cfg.replicas;
    let trials = tally.trials as f64;
    for (i, &x) in grid.xs.iter().enumerate() {
        for (j, &y) in grid.ys.iter().enumerate() {
            let bound = bercu_touati_bound(x, y);
            let b = bound.min(1.0);
            let binomial_se = (b * (1.0 - b) / trials).sqrt();
            let frequency = tally.frequency(i, j);
            res.bercu_touati.push(BercuTouatiRecord {
                x,
                y,
                count: tally.count(i, j),
                frequency,
                bound,
                binomial_se,
                pass: frequency <= bound + 3.0 * binomial_se,
            });
        }
    }
    Ok(res)
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn mean_matrix(ms: impl Iterator<Item = [[f64; 2]; 2]>) -> [[f64; 2]; 2] {
    let mut acc = [[CompensatedSum::new(), CompensatedSum::new()], [CompensatedSum::new(), CompensatedSum::new()]];
    let mut n = 0usize;
    for m in ms {
        for i in 0..2 {
            for j in 0..2 {
                acc[i][j].add(m[i][j]);
            }
        }
        n += 1;
    }
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = acc[i][j].value() / n as f64;
        }
    }
    out
}

/// Streams are split per grid point so that each sample size draws from its
/// own block of the master seed.
const GRID_STREAM_SHIFT: u32 = 40;

pub fn run_truncation(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentResult, HarnessError> {
    let st = setup(cfg)?;
    let settings = cfg.truncation.clone().unwrap_or(TruncationSettings {
        r: 1.0,
        n_grid: Vec::new(),
    });
    let grid = if settings.n_grid.is_empty() {
        vec![cfg.model.n]
    } else {
        settings.n_grid.clone()
    };
    let mut res = base_result(cfg, &st)?;
    let target = match cfg.model.case {
        Case::CaseI => st.rates.theta,
        Case::CaseII => st.rates.theta_tilde,
    };
    for (g, &n) in grid.iter().enumerate() {
        let sched = sample_schedule(&cfg.model.with_n(n), n)?;
        let diags: Vec<TruncationDiagnostics> = map_replicas(threads, cfg.replicas, |i| {
            let mut rng = stream_rng(cfg.master_seed, ((g as u64) << GRID_STREAM_SHIFT) | i);
            let mut acc = TruncationAccumulator::new(&sched, &st.spec, settings.r);
            stream_path(&sched, &st.spec, &mut rng, |s| acc.push(s));
            acc.finish()
        })?;
        let gaps: Vec<f64> = diags.iter().map(|d| d.gap).collect();
        let mut sorted = gaps.clone();
        sorted.sort_by(f64::total_cmp);
        let ex = expected_sums(&sched, cfg.model.sigma);
        let first = match sched.case {
            Case::CaseI => 1.0 / sched.kappa,
            Case::CaseII => 1.0,
        };
        let c = cfg.model.sigma.powi(2) / (n as f64 * sched.kappa);
        let reference = [
            [c * ex.s_prev * first * first, c * ex.q_prev * first],
            [c * ex.q_prev * first, c * ex.t_prev],
        ];
        let truncated_v: Vec<f64> = diags.iter().map(|d| d.truncated_v as f64).collect();
        res.truncation.push(TruncationRecord {
            n,
            kappa: sched.kappa,
            a_n: sched.a_n,
            gap_mean: mean_se(&gaps).0,
            gap_p50: quantile(&sorted, 0.5),
            gap_p99: quantile(&sorted, 0.99),
            gap_max: *sorted.last().expect("replicas >= 1"),
            mean_truncated_v: mean_se(&truncated_v).0,
            cov_mean: mean_matrix(diags.iter().map(|d| d.cov)),
            cov_trunc_mean: mean_matrix(diags.iter().map(|d| d.cov_trunc)),
            cov_target: target,
            cov_finite_reference: reference,
            replicas: cfg.replicas,
        });
    }
    res.replicas_used = cfg.replicas;
    Ok(res)
}

/// Dispatches on the experiment kind.
pub fn run(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentResult, HarnessError> {
    match cfg.experiment {
        ExperimentKind::Concentration => run_concentration(cfg, threads),
        ExperimentKind::VarianceMatch => run_variance_match(cfg, threads),
        ExperimentKind::TailSlope => run_tail_slope(cfg, threads),
        ExperimentKind::BercuTouati => run_bercu_touati(cfg, threads),
        ExperimentKind::Truncation => run_truncation(cfg, threads),
    }
}

pub const RESULT_CSV_HEADER: [&str; 16] = [
    "kind",
    "name",
    "n",
    "x",
    "y",
    "target",
    "estimate",
    "std_error",
    "finite_reference",
    "count",
    "p_hat",
    "slope",
    "rate_prediction",
    "censored",
    "replicas_used",
    "replicas_degenerate",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per statistic, threshold, grid cell or sample size.
pub fn write_result_csv<W: Write>(res: &ExperimentResult, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_CSV_HEADER)?;
    let kind = res.experiment.file_stem();
    let empty = String::new;
    for s in &res.stats {
        w.write_record([
            kind.to_string(),
            s.name.clone(),
            res.schedule.n.to_string(),
            empty(),
            empty(),
            s.target.to_string(),
            s.estimate.to_string(),
            opt(s.std_error),
            opt(s.finite_reference),
            empty(),
            empty(),
            empty(),
            empty(),
            empty(),
            s.replicas_used.to_string(),
            s.replicas_degenerate.to_string(),
        ])?;
    }
    for t in &res.thresholds {
        w.write_record([
            kind.to_string(),
            "tail".to_string(),
            res.schedule.n.to_string(),
            t.x.to_string(),
            empty(),
            t.rate_prediction.to_string(),
            empty(),
            empty(),
            opt(t.gaussian_reference_slope),
            t.count.to_string(),
            t.p_hat.to_string(),
            opt(t.slope.or(t.slope_lower_bound)),
            t.rate_prediction.to_string(),
            t.lower_bound_flag.to_string(),
            res.replicas_used.to_string(),
            res.replicas_degenerate.to_string(),
        ])?;
    }
    for b in &res.bercu_touati {
        w.write_record([
            kind.to_string(),
            "frequency".to_string(),
            res.schedule.n.to_string(),
            b.x.to_string(),
            b.y.to_string(),
            b.bound.to_string(),
            b.frequency.to_string(),
            b.binomial_se.to_string(),
            empty(),
            b.count.to_string(),
            b.frequency.to_string(),
            empty(),
            empty(),
            empty(),
            res.replicas_used.to_string(),
            res.replicas_degenerate.to_string(),
        ])?;
    }
    for t in &res.truncation {
        for (name, value, target) in [
            ("gap_p99", t.gap_p99, 0.0),
            ("cov_11", t.cov_mean[0][0], t.cov_target[0][0]),
            ("cov_12", t.cov_mean[0][1], t.cov_target[0][1]),
            ("cov_22", t.cov_mean[1][1], t.cov_target[1][1]),
        ] {
            w.write_record([
                kind.to_string(),
                name.to_string(),
                t.n.to_string(),
                empty(),
                empty(),
                target.to_string(),
                value.to_string(),
                empty(),
                empty(),
                empty(),
                empty(),
                empty(),
                empty(),
                empty(),
                t.replicas.to_string(),
                "0".to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir` and returns both paths.
pub fn persist(res: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let stem = res.experiment.file_stem();
    let json_path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(res)?;
    text.push('\n');
    fs::write(&json_path, text)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    write_result_csv(res, fs::File::create(&csv_path)?)?;
    Ok(vec![json_path, csv_path])
}
