//! Noise families with zero mean, variance `sigma^2` and Gaussian
//! integrability, together with the exact moment functionals that enter the
//! rate functions of the quadratic sums `L_n = sum V_k^2` and
//! `Lambda_n = sum V_k^4`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::erf;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("noise sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("E(V^2 - sigma^2)^2 is zero: the L_n rate is undefined for this family")]
    DegenerateSecondMoment,
    #[error("E(V^4 - EV^4)^2 is zero: the Lambda_n rate is undefined for this family")]
    DegenerateFourthMoment,
    #[error("cannot draw an empty sample")]
    EmptySample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    /// Uniform on `(-sigma*sqrt(3), sigma*sqrt(3))`.
    Uniform,
    /// `+-sigma` with probability one half each.
    TwoPoint,
}

/// The serialized form of a noise law inside a model config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub family: NoiseFamily,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseMoments {
    /// `E V^4`
    pub m4: f64,
    /// `E (V^2 - sigma^2)^2`
    pub var_sq: f64,
    /// `E (V^4 - E V^4)^2`
    pub var_quart: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub sigma: f64,
    pub moments: NoiseMoments,
    pub gaussian_integrable: bool,
    pub chen_ledoux: bool,
}

pub fn make_noise(family: NoiseFamily, sigma: f64) -> Result<NoiseSpec, NoiseError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(NoiseError::InvalidSigma(sigma));
    }
    let s4 = sigma.powi(4);
    let s8 = s4 * s4;
    // Even moments E V^{2k} in units of sigma^{2k}: (m4, m8).
    let (m4, m8) = match family {
        // (2k-1)!!: 3 and 105
        NoiseFamily::Gaussian => (3.0, 105.0),
        // c^{2k}/(2k+1) with c^2 = 3: 9/5 and 81/9
        NoiseFamily::Uniform => (9.0 / 5.0, 9.0),
        NoiseFamily::TwoPoint => (1.0, 1.0),
    };
    Ok(NoiseSpec {
        family,
        sigma,
        moments: NoiseMoments {
            m4: m4 * s4,
            var_sq: (m4 - 1.0) * s4,
            var_quart: (m8 - m4 * m4) * s8,
        },
        gaussian_integrable: true,
        chen_ledoux: true,
    })
}

impl NoiseSpec {
    /// Panics on a non-positive sigma; configs are validated before this is
    /// reached.
    pub fn from_config(config: NoiseConfig) -> Self {
        make_noise(config.family, config.sigma).expect("validated noise config")
    }

    pub fn config(&self) -> NoiseConfig {
        NoiseConfig {
            family: self.family,
            sigma: self.sigma,
        }
    }

    /// Two-point noise has `V^2` constant and cannot drive the `L_n` rate.
    pub fn is_degenerate(&self) -> bool {
        self.moments.var_sq == 0.0
    }

    /// Every shipped family is symmetric about zero.
    pub fn is_symmetric(&self) -> bool {
        true
    }

    /// Half-width of the support, if bounded.
    pub fn support_bound(&self) -> Option<f64> {
        match self.family {
            NoiseFamily::Gaussian => None,
            NoiseFamily::Uniform => Some(self.sigma * 3f64.sqrt()),
            NoiseFamily::TwoPoint => Some(self.sigma),
        }
    }

    /// One draw.
    ///
    /// Gaussian draws use the ziggurat transform of `rand_distr`'s
    /// `StandardNormal` scaled by sigma; uniform draws map the 53-bit
    /// `[0,1)` float `u` to `c(2u-1)`; two-point draws take the top bit of
    /// one `u64`.
    #[inline(always)]
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            NoiseFamily::Gaussian => {
                let z: f64 = rng.sample(StandardNormal);
                self.sigma * z
            }
            NoiseFamily::Uniform => {
                let u: f64 = rng.random();
                self.sigma * 3f64.sqrt() * (2.0 * u - 1.0)
            }
            NoiseFamily::TwoPoint => {
                if rng.next_u64() >> 63 == 1 {
                    self.sigma
                } else {
                    -self.sigma
                }
            }
        }
    }

    /// `E[V 1{|V| <= t}]`, zero for symmetric laws.
    pub fn truncated_mean(&self, _t: f64) -> f64 {
        debug_assert!(self.is_symmetric());
        0.0
    }

    /// `E[V^2 1{|V| <= t}]`.
    pub fn truncated_second_moment(&self, t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        match self.family {
            NoiseFamily::Gaussian => {
                let z = t / self.sigma;
                let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                s2 * (erf(z / std::f64::consts::SQRT_2) - 2.0 * z * pdf)
            }
            NoiseFamily::Uniform => {
                let c = self.sigma * 3f64.sqrt();
                if t >= c {
                    s2
                } else {
                    t * t * t / (3.0 * c)
                }
            }
            NoiseFamily::TwoPoint => {
                if self.sigma <= t {
                    s2
                } else {
                    0.0
                }
            }
        }
    }

    /// Variance of the truncated-and-centred noise `V 1{|V|<=t} - E[..]`.
    pub fn truncated_variance(&self, t: f64) -> f64 {
        let m = self.truncated_mean(t);
        self.truncated_second_moment(t) - m * m
    }

    /// `I_L(x) = x^2 / (2 E(V^2 - sigma^2)^2)`.
    pub fn rate_l(&self, x: f64) -> Result<f64, NoiseError> {
        if self.moments.var_sq == 0.0 {
            return Err(NoiseError::DegenerateSecondMoment);
        }
        Ok(x * x / (2.0 * self.moments.var_sq))
    }

    /// `I_Lambda(x) = x^2 / (2 E(V^4 - E V^4)^2)`.
    pub fn rate_lambda(&self, x: f64) -> Result<f64, NoiseError> {
        if self.moments.var_quart == 0.0 {
            return Err(NoiseError::DegenerateFourthMoment);
        }
        Ok(x * x / (2.0 * self.moments.var_quart))
    }
}

/// Generator for `stream` of `seed`.
///
/// ChaCha is counter based, so distinct streams of one key are independent
/// and each replica can be positioned without touching any other.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` i.i.d. draws, deterministic in `(spec, n, seed)`.
pub fn sample_noise(spec: &NoiseSpec, n: usize, seed: u64) -> Result<Vec<f64>, NoiseError> {
    if n == 0 {
        return Err(NoiseError::EmptySample);
    }
    let mut rng = stream_rng(seed, 0);
    Ok(fill(spec, n, &mut rng))
}

pub(crate) fn fill<R: RngCore>(spec: &NoiseSpec, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| spec.draw(rng)).collect()
}
