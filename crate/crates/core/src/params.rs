//! Parameter schedules for the two mildly stationary regimes and the
//! growth conditions that the deviation scale has to satisfy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{NoiseConfig, NoiseSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("gamma1 and gamma2 must both be negative (got {gamma1}, {gamma2})")]
    InvalidGamma { gamma1: f64, gamma2: f64 },
    #[error("kappa exponent delta must lie in (0,1), got {0}")]
    InvalidDelta(f64),
    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("power-law exponent beta must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("sample size must be at least 2, got {0}")]
    SampleTooSmall(usize),
    #[error("noise sigma {noise} does not match model sigma {model}")]
    NoiseSigmaMismatch { model: f64, noise: f64 },
    #[error("non-stationary at n={n}: kappa={kappa}, theta={theta}, rho={rho}")]
    NonStationaryAtN {
        n: usize,
        kappa: f64,
        theta: f64,
        rho: f64,
    },
    #[error("condition grid must be non-empty and strictly increasing")]
    InvalidGrid,
}

/// Sign pattern of the two autoregressive roots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Case {
    /// Both roots approach +1.
    CaseI,
    /// Regressor root approaches +1, error root approaches -1.
    CaseII,
}

impl Case {
    pub fn label(self) -> &'static str {
        match self {
            Case::CaseI => "I",
            Case::CaseII => "II",
        }
    }
}

/// Deviation scale `a_n` (the `b_n` of Case I or `lambda_n` of Case II).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviationScale {
    /// `a_n = n^beta`.
    PowerLaw { beta: f64 },
    /// `a_n = sqrt(log n)`.
    SqrtLog,
}

impl DeviationScale {
    pub fn at(self, n: usize) -> f64 {
        let n = n as f64;
        match self {
            DeviationScale::PowerLaw { beta } => n.powf(beta),
            DeviationScale::SqrtLog => n.ln().sqrt(),
        }
    }

    /// `(polynomial exponent, log exponent)` of `a_n`.
    fn growth(self) -> (f64, f64) {
        match self {
            DeviationScale::PowerLaw { beta } => (beta, 0.0),
            DeviationScale::SqrtLog => (0.0, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub case: Case,
    pub gamma1: f64,
    pub gamma2: f64,
    /// `kappa_n = n^delta`.
    pub delta: f64,
    pub scale: DeviationScale,
    pub sigma: f64,
    pub n: usize,
    pub noise: NoiseConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ParamsError> {
        if !(self.gamma1 < 0.0 && self.gamma2 < 0.0) {
            return Err(ParamsError::InvalidGamma {
                gamma1: self.gamma1,
                gamma2: self.gamma2,
            });
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(ParamsError::InvalidDelta(self.delta));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(ParamsError::InvalidSigma(self.sigma));
        }
        if let DeviationScale::PowerLaw { beta } = self.scale {
            if !(beta > 0.0) {
                return Err(ParamsError::InvalidBeta(beta));
            }
        }
        if self.n < 2 {
            return Err(ParamsError::SampleTooSmall(self.n));
        }
        if self.noise.sigma != self.sigma {
            return Err(ParamsError::NoiseSigmaMismatch {
                model: self.sigma,
                noise: self.noise.sigma,
            });
        }
        Ok(())
    }

    pub fn kappa(&self, n: usize) -> f64 {
        (n as f64).powf(self.delta)
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec::from_config(self.noise)
    }

    /// Same model at a different sample size.
    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }
}

/// Every schedule value at one sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSample {
    pub case: Case,
    pub n: usize,
    pub kappa: f64,
    pub theta_n: f64,
    pub rho_n: f64,
    pub a_n: f64,
    pub theta_star: f64,
    pub rho_star: f64,
    pub d_star: f64,
}

impl ScheduleSample {
    /// Schedule at an explicit `kappa`, bypassing `kappa = n^delta`.
    pub fn from_kappa(
        case: Case,
        gamma1: f64,
        gamma2: f64,
        n: usize,
        kappa: f64,
        a_n: f64,
    ) -> Result<Self, ParamsError> {
        let (theta_n, rho_n) = roots(case, gamma1, gamma2, kappa);
        let stationary = kappa > gamma1.abs().max(gamma2.abs())
            && theta_n.abs() < 1.0
            && rho_n.abs() < 1.0;
        if !stationary {
            return Err(ParamsError::NonStationaryAtN {
                n,
                kappa,
                theta: theta_n,
                rho: rho_n,
            });
        }
        let (theta_star, rho_star, d_star) = centering(theta_n, rho_n);
        Ok(Self {
            case,
            n,
            kappa,
            theta_n,
            rho_n,
            a_n,
            theta_star,
            rho_star,
            d_star,
        })
    }

    /// Scalings applied to `(theta_hat - theta*, rho_hat - rho*, d_hat - d*)`
    /// before division by `a_n`.
    pub fn scalings(&self) -> [f64; 3] {
        let n = self.n as f64;
        let k = self.kappa;
        match self.case {
            Case::CaseI => {
                let s = (n * k).sqrt();
                [(n * k * k * k).sqrt(), s, s]
            }
            Case::CaseII => {
                let s = (n / k).sqrt();
                [s, s, s]
            }
        }
    }
}

/// `(theta_n, rho_n)` for a regime at a given `kappa`.
pub fn roots(case: Case, gamma1: f64, gamma2: f64, kappa: f64) -> (f64, f64) {
    let theta = 1.0 + gamma1 / kappa;
    let rho = match case {
        Case::CaseI => 1.0 + gamma2 / kappa,
        Case::CaseII => -1.0 - gamma2 / kappa,
    };
    (theta, rho)
}

/// `(theta*, rho*, d*)` for a pair of roots.
pub fn centering(theta: f64, rho: f64) -> (f64, f64, f64) {
    let theta_star = (theta + rho) / (1.0 + theta * rho);
    let rho_star = theta * rho * theta_star;
    (theta_star, rho_star, 2.0 * (1.0 - rho_star))
}

pub fn sample_schedule(config: &ModelConfig, n: usize) -> Result<ScheduleSample, ParamsError> {
    config.validate()?;
    if n < 2 {
        return Err(ParamsError::SampleTooSmall(n));
    }
    ScheduleSample::from_kappa(
        config.case,
        config.gamma1,
        config.gamma2,
        n,
        config.kappa(n),
        config.scale.at(n),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub n: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub name: String,
    pub analytic_pass: bool,
    /// Dominant power of `n`; absent for conditions decided by a flag.
    pub exponent: Option<f64>,
    /// Residual power of `log n` multiplying the dominant power.
    pub log_power: Option<f64>,
    pub ratios: Vec<RatioPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub case: Case,
    pub conditions: Vec<ConditionRecord>,
}

impl ConditionReport {
    pub fn all_pass(&self) -> bool {
        self.conditions.iter().all(|c| c.analytic_pass)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionRecord> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// A ratio of the form `n^e0 * a_n^a * kappa_n^k * (log n)^l`.
struct GrowthRatio {
    name: &'static str,
    n_pow: f64,
    a_pow: f64,
    kappa_pow: f64,
    log_pow: f64,
}

impl GrowthRatio {
    fn eval(&self, n: usize, delta: f64, scale: DeviationScale) -> f64 {
        let nf = n as f64;
        nf.powf(self.n_pow)
            * scale.at(n).powf(self.a_pow)
            * nf.powf(delta * self.kappa_pow)
            * nf.ln().powf(self.log_pow)
    }

    /// `(exponent of n, exponent of log n)` after substituting the scale.
    fn dominant(&self, delta: f64, scale: DeviationScale) -> (f64, f64) {
        let (a_e, a_l) = scale.growth();
        (
            self.n_pow + self.a_pow * a_e + self.kappa_pow * delta,
            self.log_pow + self.a_pow * a_l,
        )
    }
}

const EXP_EPS: f64 = 1e-12;

fn diverges(exponent: f64, log_power: f64) -> bool {
    exponent > EXP_EPS || (exponent.abs() <= EXP_EPS && log_power > 0.0)
}

fn growth_ratios(case: Case) -> [GrowthRatio; 4] {
    let kappas = match case {
        Case::CaseI => (2.0, 5.0, 5.0),
        Case::CaseII => (6.0, 11.0, 7.0),
    };
    [
        GrowthRatio {
            name: "a_n_diverges",
            n_pow: 0.0,
            a_pow: 1.0,
            kappa_pow: 0.0,
            log_pow: 0.0,
        },
        GrowthRatio {
            name: "n_over_a6_kappa_pow",
            n_pow: 1.0,
            a_pow: -6.0,
            kappa_pow: -kappas.0,
            log_pow: 0.0,
        },
        GrowthRatio {
            name: "n_over_a2_kappa_pow",
            n_pow: 1.0,
            a_pow: -2.0,
            kappa_pow: -kappas.1,
            log_pow: 0.0,
        },
        GrowthRatio {
            name: "n_a2_over_kappa_pow_log2",
            n_pow: 1.0,
            a_pow: 2.0,
            kappa_pow: -kappas.2,
            log_pow: -2.0,
        },
    ]
}

/// Checks the growth conditions on `(a_n, kappa_n)` for the configured regime.
///
/// Each ratio must tend to infinity. The verdict uses the dominant power of
/// `n` (falling back to the power of `log n` when that is zero); the numeric
/// values on `n_grid` are reported alongside for inspection.
pub fn validate_conditions(
    config: &ModelConfig,
    n_grid: &[usize],
) -> Result<ConditionReport, ParamsError> {
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid[0] < 2 {
        return Err(ParamsError::InvalidGrid);
    }
    let mut conditions: Vec<ConditionRecord> = growth_ratios(config.case)
        .iter()
        .map(|ratio| {
            let (exponent, log_power) = ratio.dominant(config.delta, config.scale);
            ConditionRecord {
                name: ratio.name.to_string(),
                analytic_pass: diverges(exponent, log_power),
                exponent: Some(exponent),
                log_power: Some(log_power),
                ratios: n_grid
                    .iter()
                    .map(|&n| RatioPoint {
                        n,
                        value: ratio.eval(n, config.delta, config.scale),
                    })
                    .collect(),
            }
        })
        .collect();
    conditions.push(ConditionRecord {
        name: "chen_ledoux".to_string(),
        analytic_pass: config.noise_spec().chen_ledoux,
        exponent: None,
        log_power: None,
        ratios: Vec::new(),
    });
    Ok(ConditionReport {
        case: config.case,
        conditions,
    })
}
