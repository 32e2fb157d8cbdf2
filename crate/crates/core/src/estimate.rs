//! Two-stage least squares, the Durbin-Watson statistic and the sign-flip
//! reflection of a path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Case, ScheduleSample};
use crate::simulate::Trajectory;
use crate::sum::csum;

/// Which ratio had a vanishing denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Theta,
    Rho,
    DurbinWatson,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Theta => "theta",
            Stage::Rho => "rho",
            Stage::DurbinWatson => "durbin_watson",
        })
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum EstimateError {
    #[error("zero denominator in the {0} stage")]
    ZeroDenominator(Stage),
}

fn ratio(num: f64, den: f64, stage: Stage) -> Result<f64, EstimateError> {
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(EstimateError::ZeroDenominator(stage))
    }
}

/// `sum X_k X_{k-1} / sum X_{k-1}^2` over `k = 1..=n`; `x` holds `X_0..X_n`.
pub fn estimate_theta(x: &[f64]) -> Result<f64, EstimateError> {
    let num = csum(x.windows(2).map(|w| w[1] * w[0]));
    let den = csum(x.windows(2).map(|w| w[0] * w[0]));
    ratio(num, den, Stage::Theta)
}

/// `eps_hat_0 = 0` and `eps_hat_k = X_k - theta_hat X_{k-1}`.
pub fn residuals(x: &[f64], theta_hat: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    out.push(0.0);
    out.extend(x.windows(2).map(|w| w[1] - theta_hat * w[0]));
    out
}

/// `sum e_k e_{k-1} / sum e_{k-1}^2` over `k = 1..=n`.
pub fn estimate_rho(res: &[f64]) -> Result<f64, EstimateError> {
    let num = csum(res.windows(2).map(|w| w[1] * w[0]));
    let den = csum(res.windows(2).map(|w| w[0] * w[0]));
    ratio(num, den, Stage::Rho)
}

/// `sum (e_k - e_{k-1})^2 / sum e_k^2` over `k = 1..=n`.
///
/// The denominator runs over the current index, unlike [`estimate_rho`].
pub fn durbin_watson(res: &[f64]) -> Result<f64, EstimateError> {
    let num = csum(res.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])));
    let den = csum(res.iter().skip(1).map(|e| e * e));
    ratio(num, den, Stage::DurbinWatson)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centering {
    pub theta_star: f64,
    pub rho_star: f64,
    pub d_star: f64,
}

/// Scaled deviations divided by `a_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    pub z_theta: f64,
    pub z_rho: f64,
    pub z_d: f64,
}

impl Normalized {
    pub fn from_estimates(schedule: &ScheduleSample, theta_hat: f64, rho_hat: f64, d_hat: f64) -> Self {
        let [st, sr, sd] = schedule.scalings();
        let a = schedule.a_n;
        Self {
            z_theta: st * (theta_hat - schedule.theta_star) / a,
            z_rho: sr * (rho_hat - schedule.rho_star) / a,
            z_d: sd * (d_hat - schedule.d_star) / a,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.z_theta, self.z_rho, self.z_d]
    }
}

pub const ESTIMATE_CSV_HEADER: [&str; 12] = [
    "seed",
    "n",
    "case",
    "theta_hat",
    "rho_hat",
    "d_hat",
    "theta_star",
    "rho_star",
    "d_star",
    "z_theta",
    "z_rho",
    "z_d",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSet {
    pub n: usize,
    pub case: Case,
    pub theta_hat: f64,
    pub rho_hat: f64,
    pub d_hat: f64,
    /// `eps_hat_0..eps_hat_n`.
    pub residuals: Vec<f64>,
    pub centering: Centering,
    pub normalized: Normalized,
}

impl EstimateSet {
    pub fn csv_row(&self, seed: u64) -> [String; 12] {
        [
            seed.to_string(),
            self.n.to_string(),
            self.case.label().to_string(),
            self.theta_hat.to_string(),
            self.rho_hat.to_string(),
            self.d_hat.to_string(),
            self.centering.theta_star.to_string(),
            self.centering.rho_star.to_string(),
            self.centering.d_star.to_string(),
            self.normalized.z_theta.to_string(),
            self.normalized.z_rho.to_string(),
            self.normalized.z_d.to_string(),
        ]
    }
}

pub fn full_estimate(traj: &Trajectory) -> Result<EstimateSet, EstimateError> {
    let theta_hat = estimate_theta(&traj.x)?;
    let res = residuals(&traj.x, theta_hat);
    let rho_hat = estimate_rho(&res)?;
    let d_hat = durbin_watson(&res)?;
    let s = &traj.schedule;
    Ok(EstimateSet {
        n: traj.n,
        case: s.case,
        theta_hat,
        rho_hat,
        d_hat,
        residuals: res,
        centering: Centering {
            theta_star: s.theta_star,
            rho_star: s.rho_star,
            d_star: s.d_star,
        },
        normalized: Normalized::from_estimates(s, theta_hat, rho_hat, d_hat),
    })
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Estimates on the reflected path `Y_k = (-1)^k X_k` set against the
/// original ones.
///
/// The reflected estimators and centerings are the negated originals. The
/// Durbin-Watson statistic is not invariant: with `f = eps_hat_n^2 / J_n` the
/// reflected value is `4 - d_hat - 2f`, and the reflected centering is
/// `4 - d*`. Both the naive equalities and these exact relations are reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignFlipReport {
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub e_hat: f64,
    pub alpha_star: f64,
    pub beta_star: f64,
    pub e_star: f64,
    /// `eps_hat_n^2 / sum eps_hat_k^2`.
    pub f_n: f64,
    pub err_alpha: f64,
    pub err_beta: f64,
    /// `e_hat` against `d_hat`.
    pub err_e_naive: f64,
    /// `e_hat` against `4 - d_hat - 2 f_n`.
    pub err_e_reflected: f64,
    pub err_alpha_star: f64,
    pub err_beta_star: f64,
    /// `e*` against `d*`.
    pub err_e_star_naive: f64,
    /// `e*` against `4 - d*`.
    pub err_e_star_reflected: f64,
}

impl SignFlipReport {
    /// Largest relative error among the relations that hold exactly.
    pub fn max_exact_error(&self) -> f64 {
        [
            self.err_alpha,
            self.err_beta,
            self.err_e_reflected,
            self.err_alpha_star,
            self.err_beta_star,
            self.err_e_star_reflected,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    /// Largest relative error over `alpha = -theta`, `beta = -rho`, `e = d`.
    pub fn max_naive_error(&self) -> f64 {
        [self.err_alpha, self.err_beta, self.err_e_naive]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Reflects a path: `Y_k = (-1)^k X_k` is driven by `-theta`, `-rho` and the
/// noise `(-1)^k V_k`.
pub fn reflect(traj: &Trajectory) -> Trajectory {
    let sign = |k: usize| if k % 2 == 0 { 1.0 } else { -1.0 };
    let s = traj.schedule;
    let theta_n = -s.theta_n;
    let rho_n = -s.rho_n;
    let (theta_star, rho_star, d_star) = crate::params::centering(theta_n, rho_n);
    Trajectory {
        n: traj.n,
        v: traj.v.iter().enumerate().map(|(i, v)| sign(i + 1) * v).collect(),
        eps: traj.eps.iter().enumerate().map(|(k, e)| sign(k) * e).collect(),
        x: traj.x.iter().enumerate().map(|(k, x)| sign(k) * x).collect(),
        schedule: ScheduleSample {
            theta_n,
            rho_n,
            theta_star,
            rho_star,
            d_star,
            ..s
        },
    }
}

pub fn sign_flip(traj: &Trajectory) -> Result<(Trajectory, SignFlipReport), EstimateError> {
    let orig = full_estimate(traj)?;
    let flipped = reflect(traj);
    let alpha_hat = estimate_theta(&flipped.x)?;
    let eta = residuals(&flipped.x, alpha_hat);
    let beta_hat = estimate_rho(&eta)?;
    let e_hat = durbin_watson(&eta)?;
    let last = orig.residuals[traj.n];
    let j_n = csum(orig.residuals.iter().skip(1).map(|e| e * e));
    let f_n = last * last / j_n;
    let fs = flipped.schedule;
    let c = orig.centering;
    let report = SignFlipReport {
        alpha_hat,
        beta_hat,
        e_hat,
        alpha_star: fs.theta_star,
        beta_star: fs.rho_star,
        e_star: fs.d_star,
        f_n,
        err_alpha: rel_diff(alpha_hat, -orig.theta_hat),
        err_beta: rel_diff(beta_hat, -orig.rho_hat),
        err_e_naive: rel_diff(e_hat, orig.d_hat),
        err_e_reflected: rel_diff(e_hat, 4.0 - orig.d_hat - 2.0 * f_n),
        err_alpha_star: rel_diff(fs.theta_star, -c.theta_star),
        err_beta_star: rel_diff(fs.rho_star, -c.rho_star),
        err_e_star_naive: rel_diff(fs.d_star, c.d_star),
        err_e_star_reflected: rel_diff(fs.d_star, 4.0 - c.d_star),
    };
    Ok((flipped, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::tests::{config, hand_schedule};
    use crate::simulate::{generate, generate_with_noise};
    use proptest::prelude::*;

    fn hand() -> Trajectory {
        Trajectory::from_schedule(hand_schedule(Case::CaseI, 2), vec![1.0, -1.0])
    }

    #[test]
    fn theta_on_hand_path() {
        assert!((estimate_theta(&[0.0, 1.0, 0.8]).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn theta_zero_denominators() {
        assert_eq!(
            estimate_theta(&[0.0, 0.0, 0.0]),
            Err(EstimateError::ZeroDenominator(Stage::Theta))
        );
        assert_eq!(
            estimate_theta(&[0.0, 1.7]),
            Err(EstimateError::ZeroDenominator(Stage::Theta))
        );
    }

    #[test]
    fn residual_examples() {
        let r = residuals(&[0.0, 1.0, 0.8], 0.8);
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 1.0).abs() < 1e-15 && r[2].abs() < 1e-15);
        assert_eq!(residuals(&[0.0, 1.0, 0.8], 0.0), vec![0.0, 1.0, 0.8]);
        let t = generate(&config(Case::CaseI, 50), 1).unwrap();
        let r = residuals(&t.x, t.schedule.theta_n);
        for k in 0..=50 {
            assert!((r[k] - t.eps[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rho_examples() {
        assert_eq!(estimate_rho(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(
            estimate_rho(&[0.0, 0.0, 0.0, 5.0]),
            Err(EstimateError::ZeroDenominator(Stage::Rho))
        );
        assert_eq!(estimate_rho(&[0.0, 1.0, 1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn durbin_watson_examples() {
        assert_eq!(durbin_watson(&[0.0, 1.0, 0.0]).unwrap(), 2.0);
        let c = 1.7;
        let mut flat = vec![c; 11];
        flat[0] = 0.0;
        assert!((durbin_watson(&flat).unwrap() - 0.1).abs() < 1e-15);
        let n = 10_000;
        let alt: Vec<f64> = (0..=n)
            .map(|k| if k == 0 { 0.0 } else if k % 2 == 1 { c } else { -c })
            .collect();
        let d = durbin_watson(&alt).unwrap();
        assert!((d - 4.0).abs() < 4.0 / n as f64, "{d}");
        assert_eq!(
            durbin_watson(&[0.0, 0.0]),
            Err(EstimateError::ZeroDenominator(Stage::DurbinWatson))
        );
    }

    #[test]
    fn full_estimate_on_hand_path() {
        let e = full_estimate(&hand()).unwrap();
        assert!((e.theta_hat - 0.8).abs() < 1e-15);
        assert!(e.rho_hat.abs() < 1e-15);
        assert!((e.d_hat - 2.0).abs() < 1e-15);
        assert!((e.theta_hat - e.centering.theta_star + 0.194_475_1).abs() < 1e-7);
    }

    #[test]
    fn full_estimate_case_two_centering() {
        let t = generate(&config(Case::CaseII, 200), 4).unwrap();
        let e = full_estimate(&t).unwrap();
        assert_eq!(e.centering.theta_star, 0.0);
        assert_eq!(e.centering.rho_star, 0.0);
        assert_eq!(e.centering.d_star, 2.0);
        let scale = (200f64 / t.schedule.kappa).sqrt() / t.schedule.a_n;
        assert!((e.normalized.z_theta - scale * e.theta_hat).abs() < 1e-12);
    }

    #[test]
    fn full_estimate_zero_noise() {
        let t = generate_with_noise(&config(Case::CaseI, 4), vec![0.0; 4]).unwrap();
        assert_eq!(
            full_estimate(&t),
            Err(EstimateError::ZeroDenominator(Stage::Theta))
        );
    }

    #[test]
    fn sign_flip_hand_path() {
        let (y, rep) = sign_flip(&hand()).unwrap();
        assert_eq!(y.x, vec![0.0, -1.0, 0.8]);
        assert!((rep.alpha_hat + 0.8).abs() < 1e-15);
        assert!(rep.max_exact_error() < 1e-15);
    }

    #[test]
    fn sign_flip_zero_path_errors_on_both_sides() {
        let t = generate_with_noise(&config(Case::CaseI, 4), vec![0.0; 4]).unwrap();
        assert_eq!(
            sign_flip(&t).unwrap_err(),
            full_estimate(&t).unwrap_err()
        );
        assert_eq!(
            estimate_theta(&reflect(&t).x).unwrap_err(),
            full_estimate(&t).unwrap_err()
        );
    }

    #[test]
    fn sign_flip_random_paths() {
        for seed in 0..5 {
            let t = generate(&config(Case::CaseI, 1000), seed).unwrap();
            let (_, rep) = sign_flip(&t).unwrap();
            assert!(rep.max_exact_error() < 1e-12, "{rep:?}");
            assert!(rep.err_alpha < 1e-12 && rep.err_beta < 1e-12);
            // The reflected statistic sits near 4 - d_hat, not near d_hat.
            assert!(rep.err_e_naive > 1e-3);
        }
    }

    #[test]
    fn reflected_path_obeys_negated_recursion() {
        let t = generate(&config(Case::CaseII, 30), 2).unwrap();
        let y = reflect(&t);
        let again = Trajectory::from_schedule(y.schedule, y.v.clone());
        for k in 0..=30 {
            assert!((again.x[k] - y.x[k]).abs() < 1e-12);
            assert!((again.eps[k] - y.eps[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_row_shape() {
        let e = full_estimate(&hand()).unwrap();
        let row = e.csv_row(7);
        assert_eq!(row.len(), ESTIMATE_CSV_HEADER.len());
        assert_eq!(row[0], "7");
        assert_eq!(row[2], "I");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scale_equivariance(seed in 0u64..1000, c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
            let cfg = config(Case::CaseI, 64);
            let t = generate(&cfg, seed).unwrap();
            let scaled = generate_with_noise(&cfg, t.v.iter().map(|v| c * v).collect()).unwrap();
            let a = full_estimate(&t).unwrap();
            let b = full_estimate(&scaled).unwrap();
            prop_assert!(rel_diff(a.theta_hat, b.theta_hat) < 1e-12);
            prop_assert!(rel_diff(a.rho_hat, b.rho_hat) < 1e-12);
            prop_assert!(rel_diff(a.d_hat, b.d_hat) < 1e-12);
        }

        #[test]
        fn residuals_orthogonal_to_regressor(seed in 0u64..1000, case_two in any::<bool>()) {
            let case = if case_two { Case::CaseII } else { Case::CaseI };
            let t = generate(&config(case, 200), seed).unwrap();
            let e = full_estimate(&t).unwrap();
            let dot = csum((1..=200).map(|k| e.residuals[k] * t.x[k - 1]));
            let scale = csum(t.x.iter().map(|x| x * x)).sqrt()
                * csum(e.residuals.iter().map(|r| r * r)).sqrt();
            prop_assert!(dot.abs() <= 1e-12 * scale);
        }

        #[test]
        fn durbin_watson_in_range(res in proptest::collection::vec(-10.0f64..10.0, 2..50)) {
            let mut r = res;
            r[0] = 0.0;
            if let Ok(d) = durbin_watson(&r) {
                prop_assert!((0.0..=4.0 + 1e-12).contains(&d));
            }
        }
    }
}
