//! Clipping, Gaussian mechanisms, noise calibration and budget accounting.
//!
//! Noise is calibrated with the single-shot Gaussian constant
//! `sqrt(2 ln(1.25/δ))` and a `sqrt(T)` advanced-composition factor:
//!
//! ```text
//! σ = S · sqrt(T) · sqrt(2 ln(1.25/δ)) / ε
//! ```
//!
//! with local sensitivity `S_L = C_th/|B|` and global sensitivity
//! `S_G = C_th/(N·|B|)`. Neighbouring batches follow the add/remove
//! convention, which is what makes `S_L` exact when per-example gradients
//! are clipped and summed over a fixed denominator `|B|`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gaussian_matrix, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_threshold: f64,
    pub rounds: usize,
    pub batch_size: usize,
    pub num_clients: usize,
}

impl PrivacySpec {
    pub fn new(
        epsilon: f64,
        delta: f64,
        clip_threshold: f64,
        rounds: usize,
        batch_size: usize,
        num_clients: usize,
    ) -> Result<Self> {
        let spec = PrivacySpec {
            epsilon,
            delta,
            clip_threshold,
            rounds,
            batch_size,
            num_clients,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::validation("epsilon", format!("must be > 0, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::validation("delta", format!("must be in (0, 1), got {}", self.delta)));
        }
        if !(self.clip_threshold > 0.0 && self.clip_threshold.is_finite()) {
            return Err(Error::validation(
                "clip_threshold",
                format!("must be > 0, got {}", self.clip_threshold),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::validation("rounds", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be >= 1"));
        }
        if self.num_clients == 0 {
            return Err(Error::validation("num_clients", "must be >= 1"));
        }
        Ok(())
    }

    /// `C_th / |B|`
    pub fn local_sensitivity(&self) -> f64 {
        self.clip_threshold / self.batch_size as f64
    }

    /// `C_th / (N·|B|)`
    pub fn global_sensitivity(&self) -> f64 {
        self.clip_threshold / (self.num_clients * self.batch_size) as f64
    }
}

/// Standard deviations of the local (per-client) and global (server) noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScales {
    pub sigma_local: f64,
    pub sigma_global: f64,
}

impl NoiseScales {
    pub fn zero() -> Self {
        NoiseScales {
            sigma_local: 0.0,
            sigma_global: 0.0,
        }
    }

    pub fn calibrate(spec: &PrivacySpec) -> Result<Self> {
        spec.validate()?;
        Ok(NoiseScales {
            sigma_local: calibrate_sigma(spec.local_sensitivity(), spec.epsilon, spec.delta, spec.rounds)?,
            sigma_global: calibrate_sigma(spec.global_sensitivity(), spec.epsilon, spec.delta, spec.rounds)?,
        })
    }
}

fn gaussian_constant(delta: f64) -> f64 {
    (2.0 * (1.25 / delta).ln()).sqrt()
}

pub fn calibrate_sigma(sensitivity: f64, epsilon: f64, delta: f64, rounds: usize) -> Result<f64> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidArgument(format!("sensitivity must be > 0, got {sensitivity}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0, 1), got {delta}")));
    }
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be >= 1".into()));
    }
    Ok(sensitivity * (rounds as f64).sqrt() * gaussian_constant(delta) / epsilon)
}

/// Inverse of [`calibrate_sigma`]: the ε achieved by noise `sigma`.
pub fn epsilon_for_sigma(sensitivity: f64, sigma: f64, delta: f64, rounds: usize) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    calibrate_sigma(sensitivity, sigma, delta, rounds)
}

/// Scales `g` onto the Frobenius ball of radius `threshold` if it lies outside.
pub fn clip(g: &Matrix, threshold: f64) -> Result<Matrix> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidArgument(format!("clip threshold must be > 0, got {threshold}")));
    }
    let norm = g.frobenius_norm();
    // A few ulps of slack so re-clipping a clipped matrix is a no-op.
    if norm <= threshold * (1.0 + 4.0 * f64::EPSILON) {
        Ok(g.clone())
    } else {
        Ok(g.scale(threshold / norm))
    }
}

/// Clips each per-example gradient, sums, and divides by the nominal batch
/// size `denominator` (not the number of examples present).
pub fn clip_and_average(per_example: &[Matrix], threshold: f64, denominator: usize) -> Result<Matrix> {
    let first = per_example
        .first()
        .ok_or_else(|| Error::InvalidArgument("no per-example gradients".into()))?;
    if denominator == 0 {
        return Err(Error::InvalidArgument("denominator must be >= 1".into()));
    }
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for g in per_example {
        acc.axpy(1.0, &clip(g, threshold)?)?;
    }
    Ok(acc.scale(1.0 / denominator as f64))
}

/// Gaussian mechanism: `g + N(0, sigma²)` elementwise.
pub fn privatize(g: &Matrix, sigma: f64, rng: &mut RngStream) -> Result<Matrix> {
    if sigma == 0.0 {
        return Ok(g.clone());
    }
    g.add(&gaussian_matrix(g.rows(), g.cols(), sigma, rng)?)
}

/// Budget consumed after `rounds_elapsed` of the calibrated `T` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub epsilon_spent_local: f64,
    pub epsilon_spent_global: f64,
    pub delta: f64,
    pub rounds_elapsed: usize,
    pub sigma_local: f64,
    pub sigma_global: f64,
}

/// Analytic accountant. Under the `sqrt(T)` calibration both tracks spend
/// `ε·sqrt(t/T)` after `t` rounds. The local track is reported once for all
/// clients: shards are disjoint, so parallel composition applies.
pub fn account(spec: &PrivacySpec, rounds_elapsed: usize) -> Result<BudgetReport> {
    spec.validate()?;
    if rounds_elapsed > spec.rounds {
        return Err(Error::BudgetExhausted {
            elapsed: rounds_elapsed,
            total: spec.rounds,
        });
    }
    let scales = NoiseScales::calibrate(spec)?;
    let spent = spec.epsilon * (rounds_elapsed as f64 / spec.rounds as f64).sqrt();
    Ok(BudgetReport {
        epsilon_spent_local: spent,
        epsilon_spent_global: spent,
        delta: spec.delta,
        rounds_elapsed,
        sigma_local: scales.sigma_local,
        sigma_global: scales.sigma_global,
    })
}

/// Parallel composition over mechanisms run on disjoint shards: the joint
/// guarantee is the worst single one, not the sum.
pub fn compose_parallel(reports: &[BudgetReport]) -> Result<BudgetReport> {
    let mut iter = reports.iter();
    let first = *iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("no reports to compose".into()))?;
    Ok(iter.fold(first, |acc, r| BudgetReport {
        epsilon_spent_local: acc.epsilon_spent_local.max(r.epsilon_spent_local),
        epsilon_spent_global: acc.epsilon_spent_global.max(r.epsilon_spent_global),
        delta: acc.delta.max(r.delta),
        rounds_elapsed: acc.rounds_elapsed.max(r.rounds_elapsed),
        sigma_local: acc.sigma_local.min(r.sigma_local),
        sigma_global: acc.sigma_global.min(r.sigma_global),
    }))
}
