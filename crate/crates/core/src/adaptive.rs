//! Choosing the compression power from the fitted time model.
//!
//! For a sparsifier keeping `k` of `d` coordinates the communication cost to
//! a fixed accuracy is proportional to
//!
//! ```text
//! unbiased (Rand-k): J(k) = (1 + zeta(k) / sqrt(n)) * T(s(k)),  zeta = d/k
//! biased   (Top-k):  J(k) = (1 + delta(k))          * T(s(k)),  delta = d/k
//! ```
//!
//! where `s(k)` is the exact compressed message size. Both follow from cost
//! being linear in `1/eta + zeta/(eta sqrt n)` (resp. `1/eta + delta/eta`)
//! together with `T(s_full) / eta = T(s(k))`. Factors that do not depend on
//! `k` are dropped.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commodel::TimeModelParams;
use crate::compression::index_bits;
use crate::estimator::{EstimatorError, EstimatorState, FitResult};
use crate::BITS_PER_BYTE;

/// Largest dimension scanned exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 10_000_000;
/// Number of geometric candidates above [`EXHAUSTIVE_LIMIT`].
pub const GEOMETRIC_CANDIDATES: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("k = {k} outside [1, {d}]")]
    PowerOutOfRange { k: usize, d: usize },
    #[error("invalid objective: {0}")]
    Parameter(String),
    #[error("csv error: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    RandK,
    TopK,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::RandK => "rand_k",
            Family::TopK => "top_k",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, SelectError> {
        match s {
            "rand_k" => Ok(Family::RandK),
            "top_k" => Ok(Family::TopK),
            other => Err(SelectError::Parameter(format!("unsupported family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionObjective {
    pub family: Family,
    pub d: usize,
    pub n: usize,
    pub bits_per_scalar: u32,
    /// Seconds.
    pub alpha: f64,
    /// Seconds per bit.
    pub beta: f64,
}

impl SelectionObjective {
    pub fn new(family: Family, d: usize, n: usize, bits_per_scalar: u32, params: &TimeModelParams) -> Result<Self, SelectError> {
        Self::with_costs(family, d, n, bits_per_scalar, params.alpha_const, params.beta_const)
    }

    pub fn with_costs(family: Family, d: usize, n: usize, bits_per_scalar: u32, alpha: f64, beta: f64) -> Result<Self, SelectError> {
        if d == 0 || n == 0 || bits_per_scalar == 0 {
            return Err(SelectError::Parameter("d, n and bits per scalar must be positive".into()));
        }
        if !(alpha >= 0.0 && beta >= 0.0) || !(alpha + beta > 0.0) || !(alpha + beta).is_finite() {
            return Err(SelectError::Parameter(format!("need alpha, beta >= 0, not both zero; got ({alpha}, {beta})")));
        }
        Ok(Self { family, d, n, bits_per_scalar, alpha, beta })
    }

    /// Same shape with costs taken from a fit. Negative estimates are
    /// clamped to zero; `None` if both clamp to zero.
    pub fn with_fit(&self, fit: &FitResult) -> Option<Self> {
        let alpha = fit.alpha_hat.max(0.0);
        let beta = fit.beta_hat.max(0.0);
        Self::with_costs(self.family, self.d, self.n, self.bits_per_scalar, alpha, beta).ok()
    }

    /// Compressed message size in bits at power `k`.
    pub fn message_bits(&self, k: usize) -> f64 {
        let b = u64::from(self.bits_per_scalar);
        let per = match self.family {
            Family::RandK => b,
            Family::TopK => b + index_bits(self.d),
        };
        (k as u64 * per) as f64
    }

    pub fn predicted_cost(&self, k: usize) -> Result<f64, SelectError> {
        if k == 0 || k > self.d {
            return Err(SelectError::PowerOutOfRange { k, d: self.d });
        }
        let ratio = self.d as f64 / k as f64;
        let factor = match self.family {
            Family::RandK => 1.0 + ratio / (self.n as f64).sqrt(),
            Family::TopK => 1.0 + ratio,
        };
        Ok(factor * (self.alpha + self.beta * self.message_bits(k)))
    }

    /// Powers scanned by [`select_power`](Self::select_power), ascending.
    pub fn candidates(&self) -> Vec<usize> {
        if self.d <= EXHAUSTIVE_LIMIT {
            return (1..=self.d).collect();
        }
        let ln_d = (self.d as f64).ln();
        let mut ks: Vec<usize> = (0..GEOMETRIC_CANDIDATES)
            .map(|i| ((ln_d * i as f64 / (GEOMETRIC_CANDIDATES - 1) as f64).exp().round() as usize).clamp(1, self.d))
            .collect();
        ks[GEOMETRIC_CANDIDATES - 1] = self.d;
        ks.dedup();
        ks
    }

    /// `(k, J(k))` over all candidates.
    pub fn cost_curve(&self) -> Vec<(usize, f64)> {
        self.candidates().into_iter().map(|k| (k, self.predicted_cost(k).expect("candidate in range"))).collect()
    }

    /// Minimizer of `J` over the candidates; ties go to the larger `k`.
    pub fn select_power(&self) -> (usize, f64) {
        let mut best = (1, f64::INFINITY);
        for k in self.candidates() {
            let j = self.predicted_cost(k).expect("candidate in range");
            if j <= best.1 {
                best = (k, j);
            }
        }
        best
    }
}

/// Emitted when the selected power changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Number of samples ingested when the decision was made.
    pub sample_index: u64,
    pub alpha_hat: f64,
    /// Seconds per bit.
    pub beta_hat: f64,
    pub k_star: usize,
    pub predicted_cost: f64,
}

/// Re-selects `k*` while `(alpha, beta)` estimates stream in.
#[derive(Debug, Clone)]
pub struct AdaptiveController {
    template: SelectionObjective,
    estimator: EstimatorState,
    cadence: u64,
    current: Option<usize>,
}

impl AdaptiveController {
    /// `cadence`: refit and reselect every `cadence` samples (>= 1).
    pub fn new(template: SelectionObjective, estimator: EstimatorState, cadence: u64) -> Result<Self, SelectError> {
        if cadence == 0 {
            return Err(SelectError::Parameter("cadence must be at least 1".into()));
        }
        Ok(Self { template, estimator, cadence, current: None })
    }

    pub fn current_k(&self) -> Option<usize> {
        self.current
    }

    pub fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    /// Ingest one sample. Estimator errors are returned unchanged and leave
    /// the current selection in place.
    pub fn observe(&mut self, size_bits: f64, time_s: f64) -> Result<Option<Decision>, EstimatorError> {
        let fit = self.estimator.update(size_bits, time_s)?;
        if fit.k % self.cadence != 0 {
            return Ok(None);
        }
        let Some(objective) = self.template.with_fit(&fit) else {
            return Ok(None);
        };
        let (k_star, cost) = objective.select_power();
        if self.current == Some(k_star) {
            return Ok(None);
        }
        self.current = Some(k_star);
        Ok(Some(Decision { sample_index: fit.k, alpha_hat: fit.alpha_hat, beta_hat: fit.beta_hat, k_star, predicted_cost: cost }))
    }
}

/// Write `sample_index,alpha_hat,beta_hat,k_star,predicted_cost`, with
/// `beta_hat` in seconds per byte.
pub fn write_decisions<W: Write>(out: W, decisions: &[Decision]) -> Result<(), SelectError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| SelectError::Csv(e.to_string());
    w.write_record(["sample_index", "alpha_hat", "beta_hat", "k_star", "predicted_cost"]).map_err(err)?;
    for d in decisions {
        w.write_record([
            d.sample_index.to_string(),
            d.alpha_hat.to_string(),
            (d.beta_hat * BITS_PER_BYTE as f64).to_string(),
            d.k_star.to_string(),
            d.predicted_cost.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| SelectError::Csv(e.to_string()))
}

pub fn write_cost_curve<W: Write>(out: W, curve: &[(usize, f64)]) -> Result<(), SelectError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| SelectError::Csv(e.to_string());
    w.write_record(["k", "predicted_cost"]).map_err(err)?;
    for (k, j) in curve {
        w.write_record([k.to_string(), j.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| SelectError::Csv(e.to_string()))
}
