//! Gaussian noise calibration for a target (epsilon, delta) without amplification.
//!
//! The multiplier is the smallest `sigma` for which the unit-sensitivity
//! Gaussian mechanism satisfies the exact privacy-profile condition
//! `Phi(1/(2 sigma) - eps sigma) - e^eps Phi(-1/(2 sigma) - eps sigma) <= delta`,
//! found by bisection.

use serde::{Deserialize, Serialize};
use libm::erfc;
use thiserror::Error;

use crate::matrix::TriMatrix;
use crate::sensitivity::{sens_auto, ParticipationSchema, SensitivityError};

/// Absolute tolerance on the returned multiplier.
pub const SIGMA_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("invalid privacy budget: epsilon={epsilon}, delta={delta}")]
    InvalidBudget { epsilon: f64, delta: f64 },
    #[error("bisection failed to bracket sigma for epsilon={epsilon}, delta={delta}")]
    NoBracket { epsilon: f64, delta: f64 },
    #[error(
        "not implemented: Balls-in-Bins Monte-Carlo accountant out of scope \
         (amplified_multiplier_stub)"
    )]
    AmplificationNotImplemented,
    #[error("sensitivity must be positive and finite, got {0}")]
    InvalidSensitivity(f64),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BudgetRepr")]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

#[derive(Deserialize)]
struct BudgetRepr {
    epsilon: f64,
    delta: f64,
}

impl TryFrom<BudgetRepr> for PrivacyBudget {
    type Error = CalibrationError;

    fn try_from(r: BudgetRepr) -> Result<Self> {
        PrivacyBudget::new(r.epsilon, r.delta)
    }
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if epsilon > 0.0 && epsilon.is_finite() && delta > 0.0 && delta < 1.0 {
            Ok(Self { epsilon, delta })
        } else {
            Err(CalibrationError::InvalidBudget { epsilon, delta })
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Smallest delta achieved at `epsilon` by the Gaussian mechanism with
/// sensitivity 1 and noise standard deviation `sigma`.
pub fn gaussian_delta(sigma: f64, epsilon: f64) -> f64 {
    let a = 1.0 / (2.0 * sigma);
    let b = epsilon * sigma;
    normal_cdf(a - b) - epsilon.exp() * normal_cdf(-a - b)
}

/// `sqrt(2 ln(1.25/delta)) / epsilon`, the classical sufficient multiplier.
pub fn classical_multiplier(budget: &PrivacyBudget) -> f64 {
    (2.0 * (1.25 / budget.delta).ln()).sqrt() / budget.epsilon
}

/// Noise multiplier `sigma_{eps,delta}` for unit sensitivity.
pub fn gaussian_multiplier(budget: &PrivacyBudget) -> Result<f64> {
    let (eps, delta) = (budget.epsilon, budget.delta);
    let ok = |s: f64| gaussian_delta(s, eps) <= delta;
    let no_bracket = || CalibrationError::NoBracket {
        epsilon: eps,
        delta,
    };

    let mut hi = 1.0;
    let mut tries = 0;
    while !ok(hi) {
        hi *= 2.0;
        tries += 1;
        if tries > 64 {
            return Err(no_bracket());
        }
    }
    let mut lo = hi / 2.0;
    tries = 0;
    while ok(lo) {
        hi = lo;
        lo /= 2.0;
        tries += 1;
        if tries > 1100 || lo == 0.0 {
            return Err(no_bracket());
        }
    }
    // invariant: lo violates, hi satisfies
    for _ in 0..400 {
        if hi - lo <= SIGMA_TOLERANCE.min(1e-10 * hi) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Noise scale for a strategy: `total = sens * sigma_multiplier`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScale {
    pub sigma_multiplier: f64,
    pub sens: f64,
    pub total: f64,
}

impl NoiseScale {
    pub fn from_parts(sens: f64, sigma_multiplier: f64) -> Result<Self> {
        if !(sens > 0.0 && sens.is_finite()) {
            return Err(CalibrationError::InvalidSensitivity(sens));
        }
        Ok(Self {
            sigma_multiplier,
            sens,
            total: sens * sigma_multiplier,
        })
    }
}

/// Unamplified calibration of a strategy matrix.
pub fn calibrate(
    strategy: &TriMatrix,
    schema: &ParticipationSchema,
    budget: &PrivacyBudget,
) -> Result<NoiseScale> {
    let sens = sens_auto(strategy, schema)?;
    NoiseScale::from_parts(sens, gaussian_multiplier(budget)?)
}

/// Extension point for an amplified (Balls-in-Bins) accountant. Always fails.
pub fn amplified_multiplier_stub(
    _budget: &PrivacyBudget,
    _strategy: &TriMatrix,
    _k: usize,
) -> Result<f64> {
    Err(CalibrationError::AmplificationNotImplemented)
}
