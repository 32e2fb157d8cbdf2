//! Per-path sums, martingales and remainders, the exact decompositions that
//! tie them to the estimators, and the pathwise inequalities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{EstimateError, EstimateSet, Stage};
use crate::noise::NoiseSpec;
use crate::params::{Case, ScheduleSample};
use crate::simulate::{Step, Trajectory};
use crate::sum::{csum, CompensatedSum, DoubleDouble, Real};

pub const DEFAULT_IDENTITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("identity {name} diverges: relative residual {rel_residual:e} exceeds {tolerance:e}")]
    DivergentIdentity {
        name: String,
        rel_residual: f64,
        tolerance: f64,
    },
    #[error("inequality {name} violated by {margin:e}")]
    InequalityViolated { name: String, margin: f64 },
}

/// Raw terminal sums of one path, all over `k = 1..=n` unless noted.
///
/// Sums ending in `_prev` stop one step short, e.g. `s_prev = sum X_{k-1}^2`.
/// Path values and maxima stay `f64`; sums and `eps_n` take the scalar type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PathSums<T = f64> {
    pub n: usize,
    /// `sum X_{k-1} V_k`
    pub m: T,
    /// `sum_{k>=2} X_{k-2} V_k`
    pub n_mart: T,
    /// `sum eps_{k-1} V_k`
    pub u: T,
    pub s_prev: T,
    /// `sum_{k>=2} X_{k-1} X_{k-2}`
    pub p_prev: T,
    /// `sum X_{k-1} eps_{k-1}`
    pub q_prev: T,
    /// `sum eps_{k-1}^2`
    pub t_prev: T,
    /// `sum_{k>=2} X_k X_{k-2}`
    pub w: T,
    /// `sum V_k^2`
    pub l: T,
    /// `sum V_k^4`
    pub lambda: T,
    /// `sum X_{k-1}^2 V_k^2`
    pub bracket_m: T,
    pub x_n: f64,
    pub x_prev: f64,
    pub eps_n: T,
    pub max_x2: f64,
    pub max_eps2: f64,
    pub max_v2: f64,
}

impl<T: Real> PathSums<T> {
    pub fn s(&self) -> T {
        self.s_prev + T::prod(self.x_n, self.x_n)
    }

    pub fn p(&self) -> T {
        self.p_prev + T::prod(self.x_n, self.x_prev)
    }

    pub fn q(&self) -> T {
        self.q_prev + T::of(self.x_n) * self.eps_n
    }

    pub fn t(&self) -> T {
        self.t_prev + self.eps_n * self.eps_n
    }

    /// `sum_{k>=2} X_{k-2}^2`
    pub fn s_prev2(&self) -> T {
        self.s_prev - T::prod(self.x_prev, self.x_prev)
    }

    /// Estimators from the sums alone, for single-pass use.
    pub fn estimates(&self) -> Result<ScalarEstimates<T>, EstimateError> {
        ScalarEstimates::from_moments(self.s_prev, self.p_prev, self.w, self.x_n, self.x_prev)
    }
}

/// Single-pass accumulator of every [`PathSums`] field.
#[derive(Debug, Clone, Default)]
pub struct PathAccumulator<T: Real = f64> {
    n: usize,
    m: T::Acc,
    n_mart: T::Acc,
    u: T::Acc,
    s_prev: T::Acc,
    p_prev: T::Acc,
    q_prev: T::Acc,
    t_prev: T::Acc,
    w: T::Acc,
    l: T::Acc,
    lambda: T::Acc,
    bracket_m: T::Acc,
    x1: f64,
    x2: f64,
    e1: f64,
    max_x2: f64,
    max_eps2: f64,
    max_v2: f64,
}

impl PathAccumulator<f64> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> PathAccumulator<T> {
    #[inline]
    pub fn push(&mut self, step: Step) {
        let Step { v, eps, x } = step;
        let (x1, x2, e1) = (self.x1, self.x2, self.e1);
        let v2 = v * v;
        T::accumulate(&mut self.m, T::prod(x1, v));
        T::accumulate(&mut self.n_mart, T::prod(x2, v));
        T::accumulate(&mut self.u, T::prod(e1, v));
        T::accumulate(&mut self.s_prev, T::prod(x1, x1));
        T::accumulate(&mut self.p_prev, T::prod(x1, x2));
        T::accumulate(&mut self.q_prev, T::prod(x1, e1));
        T::accumulate(&mut self.t_prev, T::prod(e1, e1));
        T::accumulate(&mut self.w, T::prod(x, x2));
        T::accumulate(&mut self.l, T::prod(v, v));
        T::accumulate(&mut self.lambda, T::of(v2 * v2));
        T::accumulate(&mut self.bracket_m, T::of(x1 * x1 * v2));
        self.max_x2 = self.max_x2.max(x * x);
        self.max_eps2 = self.max_eps2.max(eps * eps);
        self.max_v2 = self.max_v2.max(v2);
        self.x2 = x1;
        self.x1 = x;
        self.e1 = eps;
        self.n += 1;
    }

    pub fn finish(&self) -> PathSums<T> {
        PathSums {
            n: self.n,
            m: T::total(&self.m),
            n_mart: T::total(&self.n_mart),
            u: T::total(&self.u),
            s_prev: T::total(&self.s_prev),
            p_prev: T::total(&self.p_prev),
            q_prev: T::total(&self.q_prev),
            t_prev: T::total(&self.t_prev),
            w: T::total(&self.w),
            l: T::total(&self.l),
            lambda: T::total(&self.lambda),
            bracket_m: T::total(&self.bracket_m),
            x_n: self.x1,
            x_prev: self.x2,
            eps_n: T::of(self.e1),
            max_x2: self.max_x2,
            max_eps2: self.max_eps2,
            max_v2: self.max_v2,
        }
    }
}

/// Path sums in the scalar type `T`.
pub fn path_sums_in<T: Real>(traj: &Trajectory) -> PathSums<T> {
    let mut acc = PathAccumulator::<T>::default();
    for k in 1..=traj.n {
        acc.push(Step {
            v: traj.v[k - 1],
            eps: traj.eps[k],
            x: traj.x[k],
        });
    }
    acc.finish()
}

pub fn path_sums(traj: &Trajectory) -> PathSums {
    path_sums_in(traj)
}

/// Path sums with errors and noise rebuilt from `X` in `T`:
/// `eps_k = X_k - theta X_{k-1}` and `V_k = eps_k - rho eps_{k-1}`.
///
/// Stored `eps` and `V` obey the recursions only up to `f64` rounding,
/// which floors identity residuals near `sqrt(n) max X^2 * 1e-16`. The
/// rebuilt values obey them to the precision of `T`. `V^4`, `X^2 V^2` and
/// the maxima are diagnostics and come from the stored path.
pub fn implied_path_sums<T: Real>(traj: &Trajectory) -> PathSums<T> {
    let base = path_sums(traj);
    let (theta, rho) = (traj.schedule.theta_n, traj.schedule.rho_n);
    let mut acc: [T::Acc; 9] = Default::default();
    let [m, n_mart, u, s_prev, p_prev, q_prev, t_prev, w, l] = &mut acc;
    let (mut x1, mut x2) = (traj.x[0], 0.0);
    let mut e1 = T::of(traj.eps[0]);
    for &x in &traj.x[1..] {
        let e = T::of(x) - T::prod(theta, x1);
        let v = e - T::of(rho) * e1;
        let (tx1, tx2) = (T::of(x1), T::of(x2));
        T::accumulate(m, tx1 * v);
        T::accumulate(n_mart, tx2 * v);
        T::accumulate(u, e1 * v);
        T::accumulate(s_prev, T::prod(x1, x1));
        T::accumulate(p_prev, T::prod(x1, x2));
        T::accumulate(q_prev, tx1 * e1);
        T::accumulate(t_prev, e1 * e1);
        T::accumulate(w, T::prod(x, x2));
        T::accumulate(l, v * v);
        x2 = x1;
        x1 = x;
        e1 = e;
    }
    PathSums {
        n: base.n,
        m: T::total(m),
        n_mart: T::total(n_mart),
        u: T::total(u),
        s_prev: T::total(s_prev),
        p_prev: T::total(p_prev),
        q_prev: T::total(q_prev),
        t_prev: T::total(t_prev),
        w: T::total(w),
        l: T::total(l),
        lambda: T::of(base.lambda),
        bracket_m: T::of(base.bracket_m),
        x_n: x1,
        x_prev: x2,
        eps_n: e1,
        max_x2: base.max_x2,
        max_eps2: base.max_eps2,
        max_v2: base.max_v2,
    }
}

/// Lean single-pass accumulator carrying only what the three estimators need.
#[derive(Debug, Clone, Default)]
pub struct EstimatorAccumulator {
    s_prev: CompensatedSum,
    p_prev: CompensatedSum,
    w: CompensatedSum,
    x1: f64,
    x2: f64,
}

impl EstimatorAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        let (x1, x2) = (self.x1, self.x2);
        self.s_prev.add(x1 * x1);
        self.p_prev.add(x1 * x2);
        self.w.add(x * x2);
        self.x2 = x1;
        self.x1 = x;
    }

    pub fn finish(&self) -> Result<ScalarEstimates, EstimateError> {
        ScalarEstimates::from_moments(
            self.s_prev.value(),
            self.p_prev.value(),
            self.w.value(),
            self.x1,
            self.x2,
        )
    }
}

/// Estimators together with the residual sums `I`, `J_n`, `J_{n-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarEstimates<T = f64> {
    pub theta_hat: T,
    pub rho_hat: T,
    pub d_hat: T,
    /// `sum eps_hat_k eps_hat_{k-1}`
    pub i_sum: T,
    /// `sum eps_hat_k^2`
    pub j_sum: T,
    /// `sum eps_hat_{k-1}^2`
    pub j_prev: T,
    pub eps_hat_n: T,
}

/// `x` if positive, else zero; NaN maps to zero.
fn positive_part<T: Real>(x: T) -> T {
    if x.to_f64() > 0.0 {
        x
    } else {
        T::of(0.0)
    }
}

impl<T: Real> ScalarEstimates<T> {
    /// Residual sums expanded in path moments.
    ///
    /// With `S' = S_{n-1}`, `S'' = S_{n-2}`, `P' = P_{n-1}`:
    /// `J_n = S - 2 theta_hat P + theta_hat^2 S'`,
    /// `J_{n-1} = S' - 2 theta_hat P' + theta_hat^2 S''` and
    /// `I = P - theta_hat (W + S') + theta_hat^2 P'`. In `f64` these lose
    /// roughly `S / J_n` in relative accuracy; double-double absorbs that.
    pub fn from_moments(
        s_prev: T,
        p_prev: T,
        w: T,
        x_n: f64,
        x_prev: f64,
    ) -> Result<Self, EstimateError> {
        if !(s_prev.to_f64() > 0.0) {
            return Err(EstimateError::ZeroDenominator(Stage::Theta));
        }
        let two = T::of(2.0);
        let s = s_prev + T::prod(x_n, x_n);
        let p = p_prev + T::prod(x_n, x_prev);
        let s_prev2 = s_prev - T::prod(x_prev, x_prev);
        let th = p / s_prev;
        let j_sum = positive_part(s - two * th * p + th * th * s_prev);
        let j_prev = positive_part(s_prev - two * th * p_prev + th * th * s_prev2);
        let i_sum = p - th * (w + s_prev) + th * th * p_prev;
        let eps_hat_n = T::of(x_n) - th * T::of(x_prev);
        if !(j_prev.to_f64() > 0.0) {
            return Err(EstimateError::ZeroDenominator(Stage::Rho));
        }
        if !(j_sum.to_f64() > 0.0) {
            return Err(EstimateError::ZeroDenominator(Stage::DurbinWatson));
        }
        Ok(Self {
            theta_hat: th,
            rho_hat: i_sum / j_prev,
            d_hat: (j_sum + j_prev - two * i_sum) / j_sum,
            i_sum,
            j_sum,
            j_prev,
            eps_hat_n,
        })
    }
}

impl ScalarEstimates<f64> {
    /// Residual sums taken directly from a residual vector.
    pub fn from_estimate_set(est: &EstimateSet) -> Self {
        let r = &est.residuals;
        let n = r.len() - 1;
        Self {
            theta_hat: est.theta_hat,
            rho_hat: est.rho_hat,
            d_hat: est.d_hat,
            i_sum: csum(r.windows(2).map(|w| w[1] * w[0])),
            j_sum: csum(r.iter().skip(1).map(|e| e * e)),
            j_prev: csum(r[..n].iter().map(|e| e * e)),
            eps_hat_n: r[n],
        }
    }
}

/// Every auxiliary quantity of one path.
///
/// Parameters, path endpoints and maxima stay `f64`; everything derived
/// from sums or centring values takes the scalar type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatLedger<T = f64> {
    pub n: usize,
    pub sigma: f64,
    pub theta_n: f64,
    pub rho_n: f64,
    pub theta_star: T,
    pub rho_star: T,
    pub d_star: T,
    pub theta_hat: T,
    pub rho_hat: T,
    pub d_hat: T,
    pub m: T,
    pub n_mart: T,
    pub u: T,
    pub s: T,
    pub s_prev: T,
    pub p: T,
    pub q: T,
    pub t: T,
    pub w: T,
    pub l: T,
    pub lambda: T,
    pub bracket_m: T,
    pub i_sum: T,
    pub j_sum: T,
    pub j_prev: T,
    pub xi_p: T,
    pub xi_q: T,
    pub xi_i: T,
    pub xi_j: T,
    pub f: T,
    pub g: T,
    pub h: T,
    pub r_n1: T,
    pub r_n3: T,
    /// The third remainder with `theta rho (X_n + X_{n-1})` and the factor
    /// `(1 - theta rho)` on the cross term; kept to expose its mismatch.
    pub r_n3_linear: T,
    pub r_n4: T,
    pub delta_1: T,
    pub delta_2: T,
    pub f_n: T,
    pub r_d: T,
    pub x_n: f64,
    pub x_prev: f64,
    pub max_x2: f64,
    pub max_eps2: f64,
    pub max_v2: f64,
    pub qv_m: T,
    pub qv_n: T,
    pub qv_u: T,
    pub cv_mn: T,
    pub cv_mu: T,
}

impl<T: Real> StatLedger<T> {
    /// Centring values are recomputed in `T` from the schedule's `theta`, `rho`.
    pub fn assemble(
        sums: &PathSums<T>,
        est: &ScalarEstimates<T>,
        schedule: &ScheduleSample,
        sigma: f64,
    ) -> Self {
        let c = T::of;
        let (one, two) = (c(1.0), c(2.0));
        let (th, rho) = (c(schedule.theta_n), c(schedule.rho_n));
        let p_ = th * rho;
        let s_ = th + rho;
        let ts = s_ / (one + p_);
        let rs = p_ * ts;
        let th_h = est.theta_hat;
        let (xn, xm) = (sums.x_n, sums.x_prev);
        let (xn2, xm2, xnm) = (T::prod(xn, xn), T::prod(xm, xm), T::prod(xn, xm));
        let (s, p) = (sums.s(), sums.p());
        let m = sums.m;
        let nm = sums.n_mart;

        let xi_p = p_ * xnm - s_ * xn2;
        let xi_q = ts * xi_p - s_ * xnm + p_ * (xn2 + xm2);
        let xi_i = th_h * xn2 - th_h * th_h * xnm + (one + ts * ts) / (one + p_) * xi_p - ts * xi_q;
        let xi_j = -xn2 + two * th_h * xnm - th_h * th_h * (xn2 + xm2) - two * ts / (one + p_) * xi_p;
        let f = s + sums.w - (th_h + ts) * p;
        let g = two * p - (th_h + ts) * s;
        let h = f - rs * g;

        let r_n1 = (two * p_ * s_ * ts - s_ * s_ - p_ * p_) * xn2
            + (two * s_ - two * p_ * ts) * m
            - two * p_ * nm
            + (two * p_ * s_ - two * p_ * p_ * ts) * xnm
            - p_ * p_ * xm2;
        let r_n3 = nm + s_ / (one + p_) * m - s_ / (one + p_) * xnm + p_ * (xn2 + xm2) - s_ * ts * xn2;
        let r_n3_linear = nm + s_ / (one + p_) * m - s_ * (one - p_) / (one + p_) * xnm
            + p_ * (c(xn) + c(xm))
            - s_ * ts * xn2;
        let b = m / (one + p_) + p_ * xnm / (one + p_) - ts * xn2;
        let r_n4 = r_n3 - two * (ts + rs) * b;

        let cube = (one + p_) * (one + p_) * (one + p_);
        let delta_1 = p_ * (one - th * th) * (one - rho * rho) / cube * xnm + rs * (ts + one) * (ts - one) * xm2;
        let delta_2 = (ts * ts - th_h * th_h + two * rs * (ts - th_h)) * xnm
            + (rs * (th_h * th_h - ts * ts) + (th_h - ts)) * xn2
            + rs * (th_h * th_h - ts * ts) * xm2;

        let f_n = est.eps_hat_n * est.eps_hat_n / est.j_sum;
        let r_d = two * (est.rho_hat - rs) * f_n + (two * rs - one) * f_n;

        let s2 = c(sigma * sigma);
        Self {
            n: sums.n,
            sigma,
            theta_n: schedule.theta_n,
            rho_n: schedule.rho_n,
            theta_star: ts,
            rho_star: rs,
            d_star: two * (one - rs),
            theta_hat: th_h,
            rho_hat: est.rho_hat,
            d_hat: est.d_hat,
            m,
            n_mart: nm,
            u: sums.u,
            s,
            s_prev: sums.s_prev,
            p,
            q: sums.q(),
            t: sums.t(),
            w: sums.w,
            l: sums.l,
            lambda: sums.lambda,
            bracket_m: sums.bracket_m,
            i_sum: est.i_sum,
            j_sum: est.j_sum,
            j_prev: est.j_prev,
            xi_p,
            xi_q,
            xi_i,
            xi_j,
            f,
            g,
            h,
            r_n1,
            r_n3,
            r_n3_linear,
            r_n4,
            delta_1,
            delta_2,
            f_n,
            r_d,
            x_n: xn,
            x_prev: xm,
            max_x2: sums.max_x2,
            max_eps2: sums.max_eps2,
            max_v2: sums.max_v2,
            qv_m: s2 * sums.s_prev,
            qv_n: s2 * sums.s_prev2(),
            qv_u: s2 * sums.t_prev,
            cv_mn: s2 * sums.p_prev,
            cv_mu: s2 * sums.q_prev,
        }
    }
}

/// Dense ledger; residual sums come straight from `est.residuals`.
pub fn build_ledger(traj: &Trajectory, est: &EstimateSet, sigma: f64) -> StatLedger {
    StatLedger::assemble(
        &path_sums(traj),
        &ScalarEstimates::from_estimate_set(est),
        &traj.schedule,
        sigma,
    )
}

/// Ledger in double-double over [`implied_path_sums`]; the identities close
/// to roughly 1e-25 relative, far below any `f64` tolerance.
pub fn build_exact_ledger(traj: &Trajectory, sigma: f64) -> Result<StatLedger<DoubleDouble>, EstimateError> {
    let sums = implied_path_sums::<DoubleDouble>(traj);
    let est = sums.estimates()?;
    Ok(StatLedger::assemble(&sums, &est, &traj.schedule, sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_residual: f64,
    pub rel_residual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub tolerance: f64,
    pub records: Vec<IdentityRecord>,
}

impl IdentityReport {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }

    pub fn max_rel_residual(&self) -> f64 {
        self.records.iter().map(|r| r.rel_residual).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&IdentityRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["identity", "lhs", "rhs", "abs_residual", "rel_residual", "pass"])?;
        for r in &self.records {
            w.write_record([
                r.name.clone(),
                r.lhs.to_string(),
                r.rhs.to_string(),
                r.abs_residual.to_string(),
                r.rel_residual.to_string(),
                r.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const IDENTITY_NAMES: [&str; 10] = [
    "ID-THETA", "ID-P", "ID-S", "ID-Q", "ID-W", "ID-J", "ID-RHO", "ID-H", "ID-XI", "ID-D",
];

/// Both sides of each exact decomposition.
pub fn identity_sides<T: Real>(lg: &StatLedger<T>) -> [(T, T); 10] {
    let c = T::of;
    let (one, two, half) = (c(1.0), c(2.0), c(0.5));
    let (th, rho) = (c(lg.theta_n), c(lg.rho_n));
    let (ts, rs) = (lg.theta_star, lg.rho_star);
    let p_ = th * rho;
    let s_ = th + rho;
    let dth = lg.theta_hat - ts;
    let xnm = T::prod(lg.x_n, lg.x_prev);
    let c_h = (one - p_) * (one - th) * (one - rho) * (one + ts) / (one + p_);
    [
        (dth * (one + p_) * lg.s_prev, lg.m + p_ * xnm),
        (lg.p, ts * lg.s_prev + lg.m / (one + p_) + p_ * xnm / (one + p_)),
        (
            lg.s * (one - p_) * (one - th * th) * (one - rho * rho) / (one + p_),
            lg.l + lg.r_n1,
        ),
        (
            lg.q,
            half * ((one - th * th) * lg.s + th * th * T::prod(lg.x_n, lg.x_n) + lg.t),
        ),
        (lg.w, (s_ * ts - p_) * lg.s + lg.r_n3),
        (
            lg.j_prev,
            (one + ts) * (one - ts) * lg.s - two * ts / (one + p_) * lg.m - dth * lg.g + lg.xi_j,
        ),
        (
            lg.j_prev * (lg.rho_hat - rs),
            ((one + ts * rs) / (one + p_) - ts / th) * lg.m + ts / th * lg.u - dth * lg.h + lg.xi_i
                - rs * lg.xi_j,
        ),
        (lg.h, c_h * lg.s + dth * (rs * lg.s - lg.p) + lg.r_n4),
        (lg.xi_i - rs * lg.xi_j, lg.delta_1 + lg.delta_2),
        (lg.d_hat - lg.d_star, -two * (lg.rho_hat - rs) + lg.r_d),
    ]
}

/// Residuals of all ten identities; never fails.
///
/// The residual is taken in `T` before rounding to `f64`, and scaled by
/// `max(1, |lhs|, |rhs|)`.
pub fn identity_report<T: Real>(lg: &StatLedger<T>, tolerance: f64) -> IdentityReport {
    let records = IDENTITY_NAMES
        .iter()
        .zip(identity_sides(lg))
        .map(|(name, (lhs, rhs))| {
            let abs_residual = (lhs - rhs).abs().to_f64();
            let (lhs, rhs) = (lhs.to_f64(), rhs.to_f64());
            let rel_residual = abs_residual / 1.0f64.max(lhs.abs()).max(rhs.abs());
            IdentityRecord {
                name: name.to_string(),
                lhs,
                rhs,
                abs_residual,
                rel_residual,
                // NaN residuals fail.
                pass: rel_residual <= tolerance,
            }
        })
        .collect();
    IdentityReport { tolerance, records }
}

/// As [`identity_report`], but the first divergent identity is an error.
pub fn check_identities<T: Real>(lg: &StatLedger<T>, tolerance: f64) -> Result<IdentityReport, LedgerError> {
    let report = identity_report(lg, tolerance);
    if let Some(bad) = report.records.iter().find(|r| !r.pass) {
        return Err(LedgerError::DivergentIdentity {
            name: bad.name.clone(),
            rel_residual: bad.rel_residual,
            tolerance,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub bound: f64,
    /// `bound - lhs`; nonnegative when the inequality holds.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub checks: Vec<BoundCheck>,
}

/// Slack allowed for round-off in the bounds.
const BOUND_SLACK: f64 = 1e-12;

/// Power-sum bounds for `a in {1, 2, 4}` and the two maximum bounds.
pub fn check_path_inequalities(traj: &Trajectory) -> Result<InequalityReport, LedgerError> {
    let s = &traj.schedule;
    let gap_theta = 1.0 - s.theta_n.abs();
    let gap_rho = 1.0 - s.rho_n.abs();
    let mut checks = Vec::new();
    for a in [1i32, 2, 4] {
        let lhs = csum(traj.x[1..].iter().map(|x| x.abs().powi(a)));
        let noise = csum(traj.v.iter().map(|v| v.abs().powi(a)));
        let bound = (gap_theta * gap_rho).powi(-a) * noise;
        checks.push(BoundCheck {
            name: format!("power_sum_a{a}"),
            lhs,
            bound,
            margin: bound - lhs,
        });
    }
    let max2 = |xs: &[f64]| xs.iter().fold(0.0f64, |m, x| m.max(x * x));
    let (mx, me, mv) = (max2(&traj.x), max2(&traj.eps), max2(&traj.v));
    for (name, lhs, gap, rhs) in [
        ("max_x_vs_eps", mx, gap_theta, me),
        ("max_eps_vs_v", me, gap_rho, mv),
    ] {
        let bound = rhs / (gap * gap);
        checks.push(BoundCheck {
            name: name.to_string(),
            lhs,
            bound,
            margin: bound - lhs,
        });
    }
    for c in &checks {
        if c.lhs > c.bound * (1.0 + BOUND_SLACK) {
            return Err(LedgerError::InequalityViolated {
                name: c.name.clone(),
                margin: c.margin,
            });
        }
    }
    Ok(InequalityReport { checks })
}

/// Counts of `{|M_n| > x, <M>_n + [M]_n <= y}` over a grid of `(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BercuTouatiTally {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major over `(x, y)`.
    pub counts: Vec<u64>,
    pub trials: u64,
}

impl BercuTouatiTally {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let counts = vec![0; xs.len() * ys.len()];
        Self {
            xs,
            ys,
            counts,
            trials: 0,
        }
    }

    /// `qv` is `<M>_n`, `bracket` is `[M]_n`.
    pub fn record(&mut self, m: f64, qv: f64, bracket: f64) {
        self.trials += 1;
        let total = qv + bracket;
        for (i, &x) in self.xs.iter().enumerate() {
            if m.abs() > x {
                for (j, &y) in self.ys.iter().enumerate() {
                    if total <= y {
                        self.counts[i * self.ys.len() + j] += 1;
                    }
                }
            }
        }
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.ys.len() + j]
    }

    pub fn frequency(&self, i: usize, j: usize) -> f64 {
        self.count(i, j) as f64 / self.trials as f64
    }
}

/// `2 exp(-x^2 / (2y))`.
pub fn bercu_touati_bound(x: f64, y: f64) -> f64 {
    2.0 * (-x * x / (2.0 * y)).exp()
}

/// Truncated martingale construction of one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationDiagnostics {
    pub r: f64,
    /// `sqrt(kappa)`, the noise truncation level.
    pub level_v: f64,
    pub level_x: f64,
    pub level_eps: f64,
    /// `E[V 1{|V| <= sqrt(kappa)}]` subtracted from the truncated noise.
    pub noise_centre: f64,
    /// Variance of the truncated-centred noise.
    pub sigma_n2: f64,
    pub max_abs_v_trunc: f64,
    pub truncated_v: usize,
    pub truncated_x: usize,
    pub truncated_eps: usize,
    pub z: [f64; 2],
    pub z_trunc: [f64; 2],
    /// `|Z - Z^(r)| / (a_n sqrt(n kappa))`.
    pub gap: f64,
    /// `<Z>_n / (n kappa)`.
    pub cov: [[f64; 2]; 2],
    /// `<Z^(r)>_n / (n kappa)` with `sigma_n2` in place of `sigma^2`.
    pub cov_trunc: [[f64; 2]; 2],
}

/// Single-pass builder of [`TruncationDiagnostics`].
///
/// Regressors are cut at `r sqrt(n) kappa / a_n`, errors at `r sqrt(n) / a_n`
/// and noise at `sqrt(kappa)`. In the first regime the first coordinate of
/// `Z` is `M / kappa`; in the second it is `M`.
#[derive(Debug, Clone)]
pub struct TruncationAccumulator {
    case: Case,
    r: f64,
    kappa: f64,
    a_n: f64,
    n: usize,
    sigma2: f64,
    level_v: f64,
    level_x: f64,
    level_eps: f64,
    centre: f64,
    sigma_n2: f64,
    m: CompensatedSum,
    u: CompensatedSum,
    m_r: CompensatedSum,
    u_r: CompensatedSum,
    s_prev: CompensatedSum,
    q_prev: CompensatedSum,
    t_prev: CompensatedSum,
    s_r: CompensatedSum,
    q_r: CompensatedSum,
    t_r: CompensatedSum,
    x1: f64,
    e1: f64,
    max_abs_v_trunc: f64,
    truncated_v: usize,
    truncated_x: usize,
    truncated_eps: usize,
}

impl TruncationAccumulator {
    pub fn new(schedule: &ScheduleSample, spec: &NoiseSpec, r: f64) -> Self {
        let nf = schedule.n as f64;
        let level_v = schedule.kappa.sqrt();
        Self {
            case: schedule.case,
            r,
            kappa: schedule.kappa,
            a_n: schedule.a_n,
            n: schedule.n,
            sigma2: spec.sigma * spec.sigma,
            level_v,
            level_x: r * nf.sqrt() * schedule.kappa / schedule.a_n,
            level_eps: r * nf.sqrt() / schedule.a_n,
            centre: spec.truncated_mean(level_v),
            sigma_n2: spec.truncated_variance(level_v),
            m: CompensatedSum::new(),
            u: CompensatedSum::new(),
            m_r: CompensatedSum::new(),
            u_r: CompensatedSum::new(),
            s_prev: CompensatedSum::new(),
            q_prev: CompensatedSum::new(),
            t_prev: CompensatedSum::new(),
            s_r: CompensatedSum::new(),
            q_r: CompensatedSum::new(),
            t_r: CompensatedSum::new(),
            x1: 0.0,
            e1: 0.0,
            max_abs_v_trunc: 0.0,
            truncated_v: 0,
            truncated_x: 0,
            truncated_eps: 0,
        }
    }

    #[inline]
    pub fn push(&mut self, step: Step) {
        let (x1, e1, v) = (self.x1, self.e1, step.v);
        let xr = if x1.abs() <= self.level_x { x1 } else { 0.0 };
        let er = if e1.abs() <= self.level_eps { e1 } else { 0.0 };
        let kept = v.abs() <= self.level_v;
        let vn = if kept { v } else { 0.0 } - self.centre;
        self.truncated_v += usize::from(!kept);
        self.max_abs_v_trunc = self.max_abs_v_trunc.max(vn.abs());
        self.m.add(x1 * v);
        self.u.add(e1 * v);
        self.m_r.add(xr * vn);
        self.u_r.add(er * vn);
        self.s_prev.add(x1 * x1);
        self.q_prev.add(x1 * e1);
        self.t_prev.add(e1 * e1);
        self.s_r.add(xr * xr);
        self.q_r.add(xr * er);
        self.t_r.add(er * er);
        self.truncated_x += usize::from(step.x.abs() > self.level_x);
        self.truncated_eps += usize::from(step.eps.abs() > self.level_eps);
        self.x1 = step.x;
        self.e1 = step.eps;
    }

    pub fn finish(&self) -> TruncationDiagnostics {
        let first = match self.case {
            Case::CaseI => 1.0 / self.kappa,
            Case::CaseII => 1.0,
        };
        let z = [self.m.value() * first, self.u.value()];
        let z_trunc = [self.m_r.value() * first, self.u_r.value()];
        let norm = self.a_n * (self.n as f64 * self.kappa).sqrt();
        let gap = (z[0] - z_trunc[0]).hypot(z[1] - z_trunc[1]) / norm;
        let nk = self.n as f64 * self.kappa;
        let cov_of = |scale: f64, s: f64, q: f64, t: f64| {
            let c = scale / nk;
            [[c * s * first * first, c * q * first], [c * q * first, c * t]]
        };
        TruncationDiagnostics {
            r: self.r,
            level_v: self.level_v,
            level_x: self.level_x,
            level_eps: self.level_eps,
            noise_centre: self.centre,
            sigma_n2: self.sigma_n2,
            max_abs_v_trunc: self.max_abs_v_trunc,
            truncated_v: self.truncated_v,
            truncated_x: self.truncated_x,
            truncated_eps: self.truncated_eps,
            z,
            z_trunc,
            gap,
            cov: cov_of(
                self.sigma2,
                self.s_prev.value(),
                self.q_prev.value(),
                self.t_prev.value(),
            ),
            cov_trunc: cov_of(
                self.sigma_n2,
                self.s_r.value(),
                self.q_r.value(),
                self.t_r.value(),
            ),
        }
    }
}

pub fn truncation_diagnostics(traj: &Trajectory, r: f64, spec: &NoiseSpec) -> TruncationDiagnostics {
    let mut acc = TruncationAccumulator::new(&traj.schedule, spec, r);
    for k in 1..=traj.n {
        acc.push(Step {
            v: traj.v[k - 1],
            eps: traj.eps[k],
            x: traj.x[k],
        });
    }
    acc.finish()
}
