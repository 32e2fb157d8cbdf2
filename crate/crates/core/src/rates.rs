//! Limiting covariance matrices and the quadratic rate functions, with their
//! internal consistency relations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::rel_diff;
use crate::noise::{NoiseError, NoiseMoments, NoiseSpec};
use crate::params::Case;

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RatesError {
    #[error("gamma1 and gamma2 must both be negative (got {gamma1}, {gamma2})")]
    InvalidRegime { gamma1: f64, gamma2: f64 },
    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("consistency check {check} failed with residual {residual:e}")]
    ConsistencyFailure { check: String, residual: f64 },
    #[error("rate {0:?} needs noise moments; build the model with a noise spec")]
    MissingNoise(RateName),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RateName {
    #[serde(rename = "I_theta")]
    ITheta,
    #[serde(rename = "I_rho")]
    IRho,
    #[serde(rename = "J")]
    J,
    #[serde(rename = "I_d")]
    ID,
    #[serde(rename = "J_d")]
    JD,
    #[serde(rename = "I_L")]
    IL,
    #[serde(rename = "I_Lambda")]
    ILambda,
}

/// The three estimators whose deviations are rated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Theta,
    Rho,
    D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub gamma1: f64,
    pub gamma2: f64,
    pub sigma: f64,
    /// Joint limit covariance of the first regime.
    pub gamma: Mat2,
    /// Limit of `<Z>_n / (n kappa)` in the first regime.
    pub theta: Mat2,
    /// Limit of `<Z>_n / (n kappa)` in the second regime.
    pub theta_tilde: Mat2,
    pub upsilon: Mat2,
    pub upsilon_tilde: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noise: Option<NoiseMoments>,
}

pub fn matmul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn transpose(a: &Mat2) -> Mat2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

impl RateModel {
    pub fn build(gamma1: f64, gamma2: f64, sigma: f64) -> Result<Self, RatesError> {
        if !(gamma1 < 0.0 && gamma2 < 0.0) {
            return Err(RatesError::InvalidRegime { gamma1, gamma2 });
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(RatesError::InvalidSigma(sigma));
        }
        let (g1, g2) = (gamma1, gamma2);
        let s = g1 + g2;
        let s2 = sigma * sigma;
        let s4 = s2 * s2;
        let off = s4 / (2.0 * g2 * s);
        let ut = 8.0 * g1 * g2 / (s * s * s2);
        Ok(Self {
            gamma1,
            gamma2,
            sigma,
            gamma: [[-g1 * g2 * s / 2.0, 0.0], [0.0, -2.0 * s]],
            theta: [[-s4 / (2.0 * g1 * g2 * s), off], [off, -s4 / (2.0 * g2)]],
            theta_tilde: [
                [-s * s4 / (8.0 * g1 * g2), -s4 / (4.0 * g2)],
                [-s4 / (4.0 * g2), -s4 / (2.0 * g2)],
            ],
            upsilon: [[-g1 * g2 * s / s2, 0.0], [-2.0 * g1 * s / s2, -2.0 * s / s2]],
            upsilon_tilde: [ut, -ut],
            noise: None,
        })
    }

    /// Attaches noise moments so that `I_L` and `I_Lambda` can be evaluated.
    pub fn with_noise(mut self, spec: &NoiseSpec) -> Self {
        self.noise = Some(spec.moments);
        self
    }

    fn sum(&self) -> f64 {
        self.gamma1 + self.gamma2
    }

    fn prod(&self) -> f64 {
        self.gamma1 * self.gamma2
    }

    pub fn eval_rate(&self, name: RateName, x: f64) -> Result<f64, RatesError> {
        let s = self.sum();
        let p = self.prod();
        let x2 = x * x;
        Ok(match name {
            RateName::ITheta => -x2 / (p * s),
            RateName::IRho => -x2 / (4.0 * s),
            RateName::J => -s * s * s * x2 / (16.0 * p),
            RateName::ID => -x2 / (16.0 * s),
            RateName::JD => -s * s * s * x2 / (64.0 * p),
            RateName::IL | RateName::ILambda => {
                let m = self.noise.ok_or(RatesError::MissingNoise(name))?;
                let (var, err) = if name == RateName::IL {
                    (m.var_sq, NoiseError::DegenerateSecondMoment)
                } else {
                    (m.var_quart, NoiseError::DegenerateFourthMoment)
                };
                if var == 0.0 {
                    return Err(err.into());
                }
                x2 / (2.0 * var)
            }
        })
    }

    /// `x^T Gamma^{-1} x / 2`, with the diagonal inverse taken entrywise.
    pub fn i_joint(&self, x: [f64; 2]) -> f64 {
        0.5 * (x[0] * x[0] / self.gamma[0][0] + x[1] * x[1] / self.gamma[1][1])
    }

    /// Rate governing one estimator in one regime.
    pub fn rate_name(case: Case, stat: Statistic) -> RateName {
        match (case, stat) {
            (Case::CaseI, Statistic::Theta) => RateName::ITheta,
            (Case::CaseI, Statistic::Rho) => RateName::IRho,
            (Case::CaseI, Statistic::D) => RateName::ID,
            (Case::CaseII, Statistic::D) => RateName::JD,
            (Case::CaseII, _) => RateName::J,
        }
    }

    /// Limit variance matching a rate `x^2 / (2 v)`.
    pub fn limit_variance(&self, case: Case, stat: Statistic) -> f64 {
        let s = self.sum();
        match (case, stat) {
            (Case::CaseI, Statistic::Theta) => self.gamma[0][0],
            (Case::CaseI, Statistic::Rho) => self.gamma[1][1],
            (Case::CaseI, Statistic::D) => 4.0 * self.gamma[1][1],
            (Case::CaseII, Statistic::D) => -32.0 * self.prod() / (s * s * s),
            (Case::CaseII, _) => -8.0 * self.prod() / (s * s * s),
        }
    }
}

/// Asymptotic variances `(sigma_theta^2, sigma_rho^2)` of the time-invariant
/// model at fixed `(theta, rho)`.
pub fn stationary_variances(theta: f64, rho: f64) -> (f64, f64) {
    let p = theta * rho;
    let s = theta + rho;
    let a = 1.0 - theta * theta;
    let b = 1.0 - rho * rho;
    let den = (1.0 + p).powi(3);
    let v_theta = a * (1.0 - p) * b / den;
    let v_rho = (1.0 - p) * (s * s * (1.0 + p) * (1.0 + p) + p * p * a * b) / den;
    (v_theta, v_rho)
}

/// `-(g^2 + 2g + 2) / (g^2 + 2g)`: the estimator variance of the
/// time-invariant model at `theta = 1 + g = -rho`.
pub fn time_invariant_theta_variance(g: f64) -> f64 {
    -(g * g + 2.0 * g + 2.0) / (g * g + 2.0 * g)
}

/// `(1 + g)^4` times [`time_invariant_theta_variance`].
pub fn time_invariant_rho_variance(g: f64) -> f64 {
    (1.0 + g).powi(4) * time_invariant_theta_variance(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub name: String,
    pub value: f64,
    pub target: f64,
    pub residual: f64,
    pub pass: bool,
}

/// Scaled time-invariant variances along a growing `kappa` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingTrend {
    pub name: String,
    pub kappas: Vec<f64>,
    pub values: Vec<f64>,
    pub target: f64,
    pub rel_errors: Vec<f64>,
    /// `(10 f(10k) - f(k)) / 9` from the last two grid points.
    pub richardson: f64,
    pub richardson_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub records: Vec<ConsistencyRecord>,
    pub trends: Vec<MatchingTrend>,
}

impl ConsistencyReport {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass) && self.trends.iter().all(|t| t.pass)
    }

    /// First failing record or trend as an error.
    pub fn into_result(self) -> Result<Self, RatesError> {
        if let Some(r) = self.records.iter().find(|r| !r.pass) {
            return Err(RatesError::ConsistencyFailure {
                check: r.name.clone(),
                residual: r.residual,
            });
        }
        if let Some(t) = self.trends.iter().find(|t| !t.pass) {
            return Err(RatesError::ConsistencyFailure {
                check: t.name.clone(),
                residual: *t.rel_errors.last().unwrap_or(&f64::NAN),
            });
        }
        Ok(self)
    }
}

pub const MATRIX_TOLERANCE: f64 = 1e-10;
pub const RATE_TOLERANCE: f64 = 1e-12;
pub const MATCHING_GRID: [f64; 3] = [1e2, 1e3, 1e4];
/// Largest relative error allowed at the end of the matching grid.
pub const MATCHING_FINAL_TOLERANCE: f64 = 1e-2;
pub const RATE_GRID: [f64; 7] = [-3.0, -1.0, -0.25, 0.0, 0.5, 2.0, 7.5];
pub const TIME_INVARIANT_GRID: [f64; 5] = [-0.9, -0.7, -0.5, -0.3, -0.1];

fn record(name: String, value: f64, target: f64, tol: f64) -> ConsistencyRecord {
    let residual = rel_diff(value, target);
    ConsistencyRecord {
        name,
        value,
        target,
        residual,
        pass: residual <= tol,
    }
}

fn trend(name: &str, target: f64, f: impl Fn(f64) -> f64) -> MatchingTrend {
    let kappas = MATCHING_GRID.to_vec();
    let values: Vec<f64> = kappas.iter().map(|&k| f(k)).collect();
    let rel = |v: f64| (v - target).abs() / target.abs();
    let rel_errors: Vec<f64> = values.iter().map(|&v| rel(v)).collect();
    let last = values.len() - 1;
    let richardson = (10.0 * values[last] - values[last - 1]) / 9.0;
    let richardson_rel_error = rel(richardson);
    let decreasing = rel_errors
        .windows(2)
        .all(|w| w[1] < w[0] || w[1] <= 1e-13);
    let pass = decreasing
        && rel_errors[last] <= MATCHING_FINAL_TOLERANCE
        && richardson_rel_error <= rel_errors[last].max(1e-13);
    MatchingTrend {
        name: name.to_string(),
        kappas,
        values,
        target,
        rel_errors,
        richardson,
        richardson_rel_error,
        pass,
    }
}

/// Evaluates every internal relation; see [`ConsistencyReport::into_result`]
/// for the failing form.
pub fn consistency_check(model: &RateModel) -> ConsistencyReport {
    let mut records = Vec::new();
    let prod = matmul(&matmul(&model.upsilon, &model.theta), &transpose(&model.upsilon));
    for i in 0..2 {
        for j in 0..2 {
            records.push(record(
                format!("upsilon_theta_upsilon_t[{i}][{j}]"),
                prod[i][j],
                model.gamma[i][j],
                MATRIX_TOLERANCE,
            ));
        }
    }
    let u1 = model.upsilon_tilde[0];
    let jt = 2.0 * u1 * u1 * model.theta_tilde[0][0];
    for x in RATE_GRID {
        let j = model.eval_rate(RateName::J, x).expect("closed form");
        records.push(record(format!("j_times_2_ut2_tt11_at_{x}"), j * jt, x * x, RATE_TOLERANCE));
        let id = model.eval_rate(RateName::ID, x).expect("closed form");
        let ir = model.eval_rate(RateName::IRho, x / 2.0).expect("closed form");
        records.push(record(format!("i_d_vs_i_rho_half_at_{x}"), id, ir, RATE_TOLERANCE));
        let jd = model.eval_rate(RateName::JD, x).expect("closed form");
        let jh = model.eval_rate(RateName::J, x / 2.0).expect("closed form");
        records.push(record(format!("j_d_vs_j_half_at_{x}"), jd, jh, RATE_TOLERANCE));
    }
    records.push(record(
        "upsilon_tilde_antisymmetric".to_string(),
        model.upsilon_tilde[1],
        -model.upsilon_tilde[0],
        RATE_TOLERANCE,
    ));
    for g in TIME_INVARIANT_GRID {
        let (vt, vr) = stationary_variances(1.0 + g, -1.0 - g);
        records.push(record(
            format!("time_invariant_theta_at_{g}"),
            time_invariant_theta_variance(g),
            vt,
            RATE_TOLERANCE,
        ));
        records.push(record(
            format!("time_invariant_rho_at_{g}"),
            time_invariant_rho_variance(g),
            vr,
            RATE_TOLERANCE,
        ));
        let bound = -1.0 / g;
        for (name, v) in [("theta", vt), ("rho", vr)] {
            records.push(ConsistencyRecord {
                name: format!("time_invariant_{name}_below_bound_at_{g}"),
                value: v,
                target: bound,
                residual: v - bound,
                pass: v < bound,
            });
        }
    }

    let (g1, g2) = (model.gamma1, model.gamma2);
    let case_one = |k: f64| stationary_variances(1.0 + g1 / k, 1.0 + g2 / k);
    let case_two = |k: f64| stationary_variances(1.0 + g1 / k, -1.0 - g2 / k);
    let trends = vec![
        trend("case_i_theta", model.gamma[0][0], |k| k.powi(3) * case_one(k).0),
        trend("case_i_rho", model.gamma[1][1], |k| k * case_one(k).1),
        trend("case_i_d", 4.0 * model.gamma[1][1], |k| 4.0 * k * case_one(k).1),
        trend(
            "case_ii_theta",
            model.limit_variance(Case::CaseII, Statistic::Theta),
            |k| case_two(k).0 / k,
        ),
        trend(
            "case_ii_rho",
            model.limit_variance(Case::CaseII, Statistic::Rho),
            |k| case_two(k).1 / k,
        ),
    ];
    ConsistencyReport { records, trends }
}
