//! Trajectories of the double autoregression started from zero.

use std::io::Write;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{stream_rng, NoiseSpec};
use crate::params::{sample_schedule, ModelConfig, ParamsError, ScheduleSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("noise has length {got}, expected n = {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// One realized path.
///
/// `v[k-1]` holds `V_k`; `eps[k]` and `x[k]` hold `eps_k` and `X_k` for
/// `0 <= k <= n`, with `eps[0] = x[0] = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub n: usize,
    pub v: Vec<f64>,
    pub eps: Vec<f64>,
    pub x: Vec<f64>,
    pub schedule: ScheduleSample,
}

impl Trajectory {
    /// Runs both recursions over caller-supplied noise.
    pub fn from_schedule(schedule: ScheduleSample, v: Vec<f64>) -> Self {
        let n = v.len();
        let mut eps = Vec::with_capacity(n + 1);
        let mut x = Vec::with_capacity(n + 1);
        eps.push(0.0);
        x.push(0.0);
        let (theta, rho) = (schedule.theta_n, schedule.rho_n);
        let (mut e, mut xv) = (0.0, 0.0);
        for &vk in &v {
            e = rho * e + vk;
            xv = theta * xv + e;
            eps.push(e);
            x.push(xv);
        }
        Self {
            n,
            v,
            eps,
            x,
            schedule,
        }
    }

    /// Writes `k,V,eps,X`; the `k = 0` row leaves `V` empty.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "V", "eps", "X"])?;
        for k in 0..=self.n {
            let v = if k == 0 {
                String::new()
            } else {
                self.v[k - 1].to_string()
            };
            w.write_record([
                k.to_string(),
                v,
                self.eps[k].to_string(),
                self.x[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Path with noise drawn from stream 0 of `seed`.
pub fn generate(config: &ModelConfig, seed: u64) -> Result<Trajectory, SimulateError> {
    generate_stream(config, seed, 0)
}

/// Path with noise drawn from an explicit stream of `seed`.
pub fn generate_stream(
    config: &ModelConfig,
    seed: u64,
    stream: u64,
) -> Result<Trajectory, SimulateError> {
    let schedule = sample_schedule(config, config.n)?;
    let spec = config.noise_spec();
    let mut rng = stream_rng(seed, stream);
    let v = crate::noise::fill(&spec, config.n, &mut rng);
    Ok(Trajectory::from_schedule(schedule, v))
}

pub fn generate_with_noise(config: &ModelConfig, v: Vec<f64>) -> Result<Trajectory, SimulateError> {
    if v.len() != config.n {
        return Err(SimulateError::LengthMismatch {
            expected: config.n,
            got: v.len(),
        });
    }
    let schedule = sample_schedule(config, config.n)?;
    Ok(Trajectory::from_schedule(schedule, v))
}

/// One step of a streamed path: `(V_k, eps_k, X_k)` for `k = 1..=n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub v: f64,
    pub eps: f64,
    pub x: f64,
}

/// Runs the recursion without storing the path, handing every step to `visit`.
///
/// Draws are taken in the same order as [`generate_stream`], so a streamed
/// path equals the dense one bit for bit.
#[inline]
pub fn stream_path<R: RngCore, F: FnMut(Step)>(
    schedule: &ScheduleSample,
    spec: &NoiseSpec,
    rng: &mut R,
    mut visit: F,
) {
    let (theta, rho) = (schedule.theta_n, schedule.rho_n);
    let (mut e, mut x) = (0.0, 0.0);
    for _ in 0..schedule.n {
        let v = spec.draw(rng);
        e = rho * e + v;
        x = theta * x + e;
        visit(Step { v, eps: e, x });
    }
}

/// Exact expectations of the second-order path sums, by the moment recursion
/// of the zero-started process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedSums {
    /// `E sum X_k^2`
    pub s: f64,
    /// `E sum X_{k-1}^2`
    pub s_prev: f64,
    /// `E sum X_k X_{k-1}`
    pub p: f64,
    /// `E sum X_k eps_k`
    pub q: f64,
    /// `E sum X_{k-1} eps_{k-1}`
    pub q_prev: f64,
    /// `E sum eps_k^2`
    pub t: f64,
    /// `E sum eps_{k-1}^2`
    pub t_prev: f64,
}

pub fn expected_sums(schedule: &ScheduleSample, sigma: f64) -> ExpectedSums {
    let (th, rho) = (schedule.theta_n, schedule.rho_n);
    let s2 = sigma * sigma;
    // Second moments at step k-1: E X^2, E X eps, E eps^2.
    let (mut xx, mut xe, mut ee) = (0.0, 0.0, 0.0);
    let mut out = ExpectedSums {
        s: 0.0,
        s_prev: 0.0,
        p: 0.0,
        q: 0.0,
        q_prev: 0.0,
        t: 0.0,
        t_prev: 0.0,
    };
    for _ in 0..schedule.n {
        out.s_prev += xx;
        out.q_prev += xe;
        out.t_prev += ee;
        let ee_k = rho * rho * ee + s2;
        let lag_e = rho * xe;
        let xe_k = th * lag_e + ee_k;
        let xx_k = th * th * xx + 2.0 * th * lag_e + ee_k;
        out.p += th * xx + lag_e;
        xx = xx_k;
        xe = xe_k;
        ee = ee_k;
        out.s += xx;
        out.q += xe;
        out.t += ee;
    }
    out
}
