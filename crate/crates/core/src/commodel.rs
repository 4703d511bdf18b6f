//! Affine transmission-time model `T(s) = alpha + beta * s`.
//!
//! Sizes are in bits, times in seconds. The stochastic form draws
//! `alpha(t) = alpha_const + N(0, (alpha_m * alpha_const)^2)` and
//! `beta(t) = beta_const + N(0, (beta_m * beta_const)^2)` independently for
//! every message.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{SeedKey, Stream};

/// Sampled times are clamped below at this value.
pub const MIN_SAMPLED_TIME: f64 = 1e-12;

/// Default dominance ratio separating the three regions.
pub const DEFAULT_RHO: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("degenerate time model: alpha and beta are both zero")]
    Degenerate,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("csv output failed: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeModelParams {
    /// Channel initialization time, seconds.
    pub alpha_const: f64,
    /// Transmission time per bit, seconds.
    pub beta_const: f64,
    /// Relative noise level of alpha.
    pub alpha_m: f64,
    /// Relative noise level of beta.
    pub beta_m: f64,
}

impl TimeModelParams {
    pub fn new(alpha_const: f64, beta_const: f64, alpha_m: f64, beta_m: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha_const), ("beta", beta_const), ("alpha_m", alpha_m), ("beta_m", beta_m)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if alpha_const + beta_const <= 0.0 {
            return Err(ModelError::Degenerate);
        }
        Ok(Self { alpha_const, beta_const, alpha_m, beta_m })
    }

    /// Noise-free model.
    pub fn deterministic(alpha_const: f64, beta_const: f64) -> Result<Self> {
        Self::new(alpha_const, beta_const, 0.0, 0.0)
    }

    pub fn sigma_alpha(&self) -> f64 {
        self.alpha_m * self.alpha_const
    }

    pub fn sigma_beta(&self) -> f64 {
        self.beta_m * self.beta_const
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma_alpha() == 0.0 && self.sigma_beta() == 0.0
    }

    /// `alpha_const + beta_const * s`.
    pub fn expected_time(&self, s: f64) -> f64 {
        self.alpha_const + self.beta_const * s
    }

    /// One noisy transmission time for a message of `s` bits.
    pub fn sample_time<R: Rng + ?Sized>(&self, s: f64, rng: &mut R) -> f64 {
        let za: f64 = rng.sample(StandardNormal);
        let zb: f64 = rng.sample(StandardNormal);
        let alpha = self.alpha_const + self.sigma_alpha() * za;
        let beta = self.beta_const + self.sigma_beta() * zb;
        (alpha + beta * s).max(MIN_SAMPLED_TIME)
    }

    /// [`sample_time`](Self::sample_time) with a fresh generator for `key`.
    pub fn sample_time_keyed(&self, s: f64, key: SeedKey) -> f64 {
        self.sample_time(s, &mut key.rng(Stream::UplinkTime))
    }

    /// Variance of a sampled time at size `s` (before clamping).
    pub fn time_variance(&self, s: f64) -> f64 {
        self.sigma_alpha().powi(2) + s * s * self.sigma_beta().powi(2)
    }

    /// Real speedup `T(s) / T(s / omega)` from expected times.
    pub fn eta(&self, s: f64, omega: f64) -> Result<f64> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(ModelError::Parameter(format!("message size must be positive, got {s}")));
        }
        if !(omega >= 1.0) {
            return Err(ModelError::Parameter(format!("omega must be >= 1, got {omega}")));
        }
        if self.alpha_const == 0.0 && self.beta_const == 0.0 {
            return Err(ModelError::Degenerate);
        }
        if omega.is_infinite() {
            return Ok(self.speedup_ceiling(s));
        }
        // exact limits; the general ratio rounds
        if self.alpha_const == 0.0 {
            return Ok(omega);
        }
        if self.beta_const == 0.0 {
            return Ok(1.0);
        }
        Ok(self.expected_time(s) / self.expected_time(s / omega))
    }

    /// Limit of `eta` as `omega -> inf`: `T(s) / alpha`, infinite when alpha is zero.
    pub fn speedup_ceiling(&self, s: f64) -> f64 {
        if self.alpha_const == 0.0 {
            f64::INFINITY
        } else {
            self.expected_time(s) / self.alpha_const
        }
    }

    /// Area 1 if `beta*s <= alpha/rho`, area 3 if `beta*s >= rho*alpha`,
    /// area 2 otherwise.
    pub fn classify_region(&self, s: f64, rho: f64) -> Region {
        let bandwidth = self.beta_const * s;
        if bandwidth <= self.alpha_const / rho {
            Region::Area1AlphaDominated
        } else if bandwidth >= rho * self.alpha_const {
            Region::Area3BetaDominated
        } else {
            Region::Area2Mixed
        }
    }

    /// Compress a message of `s_from` bits by each factor in `omegas`.
    pub fn transition_report(&self, s_from: f64, omegas: &[f64], rho: f64) -> Result<SpeedupReport> {
        check_rho(rho)?;
        let from = self.classify_region(s_from, rho);
        let rows = omegas
            .iter()
            .map(|&omega| {
                let speedup = self.eta(s_from, omega)?;
                let compressed_bits = s_from / omega;
                Ok(SpeedupRow {
                    omega,
                    compressed_bits,
                    region_from: from,
                    region_to: self.classify_region(compressed_bits, rho),
                    expected_time_s: self.expected_time(compressed_bits),
                    speedup,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpeedupReport { source_bits: s_from, rows })
    }

    /// Full saturation curve over an ascending `omega_grid`.
    pub fn speedup_curve(&self, s: f64, omega_grid: &[f64], rho: f64) -> Result<SpeedupReport> {
        if omega_grid.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(ModelError::Parameter("omega grid must be sorted ascending".into()));
        }
        self.transition_report(s, omega_grid, rho)
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 1.0) || !rho.is_finite() {
        return Err(ModelError::Parameter(format!("rho must be a finite ratio > 1, got {rho}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "area1_alpha_dominated")]
    Area1AlphaDominated,
    #[serde(rename = "area2_mixed")]
    Area2Mixed,
    #[serde(rename = "area3_beta_dominated")]
    Area3BetaDominated,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Area1AlphaDominated => "area1_alpha_dominated",
            Region::Area2Mixed => "area2_mixed",
            Region::Area3BetaDominated => "area3_beta_dominated",
        }
    }

    /// 1, 2 or 3.
    pub fn number(self) -> u8 {
        match self {
            Region::Area1AlphaDominated => 1,
            Region::Area2Mixed => 2,
            Region::Area3BetaDominated => 3,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "area1_alpha_dominated" => Ok(Region::Area1AlphaDominated),
            "area2_mixed" => Ok(Region::Area2Mixed),
            "area3_beta_dominated" => Ok(Region::Area3BetaDominated),
            other => Err(ModelError::Parameter(format!("unknown region `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub omega: f64,
    pub compressed_bits: f64,
    pub region_from: Region,
    pub region_to: Region,
    /// Expected time of the compressed message.
    pub expected_time_s: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub source_bits: f64,
    pub rows: Vec<SpeedupRow>,
}

impl SpeedupReport {
    pub const CSV_HEADER: [&'static str; 6] =
        ["omega", "compressed_bits", "region_from", "region_to", "expected_time_s", "speedup"];

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| ModelError::Io(e.to_string());
        w.write_record(Self::CSV_HEADER).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.omega.to_string(),
                r.compressed_bits.to_string(),
                r.region_from.to_string(),
                r.region_to.to_string(),
                r.expected_time_s.to_string(),
                r.speedup.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| ModelError::Io(e.to_string()))
    }
}

/// `n` ratios spaced geometrically from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi / lo).ln() / (n - 1) as f64;
            let mut g: Vec<f64> = (0..n).map(|i| lo * (step * i as f64).exp()).collect();
            g[n - 1] = hi;
            g
        }
    }
}
