//! Online least-squares fit of `(alpha, beta)` from streaming
//! `(message size, delay)` samples.
//!
//! Only four running sums are kept (`s_x`, `s_y`, `s_xy`, `s_xx`) plus the
//! sample count; each update is O(1) in time and memory. After every update
//!
//! ```text
//! beta_k  = (k * s_xy - s_x * s_y) / (k * s_xx - s_x^2)
//! alpha_k = (s_y - beta_k * s_x) / k
//! ```
//!
//! Sizes are accumulated in units of 2^20 bits. The scale is a power of two,
//! so it only moves exponents: results are bit-identical to accumulating raw
//! bits while keeping `s_xx` far from the overflow range.

use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{SeedKey, Stream};
use crate::BITS_PER_BYTE;

/// Bits per accumulation unit.
pub const SIZE_SCALE_BITS: f64 = 1_048_576.0;

/// Number of points of the `grid` size policy.
pub const GRID_POINTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("degenerate design: message sizes do not vary enough to fit a line")]
    Degenerate,
    #[error("sample out of range: {0}")]
    OutOfRange(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("csv error: {0}")]
    Csv(String),
}

type Result<T> = std::result::Result<T, EstimatorError>;

/// Fitted `(alpha, beta)` after `k` samples. `beta_hat` is seconds per bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub k: u64,
}

impl FitResult {
    pub fn beta_per_byte(&self) -> f64 {
        self.beta_hat * BITS_PER_BYTE as f64
    }
}

/// The running sums, reported in bits and seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sums {
    pub s_x: f64,
    pub s_y: f64,
    pub s_xy: f64,
    pub s_xx: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    samples: u64,
    /// Effective sample weight; equals `samples` without forgetting.
    weight: f64,
    s_x: f64,
    s_y: f64,
    s_xy: f64,
    s_xx: f64,
    p_max: f64,
    forgetting: f64,
}

impl EstimatorState {
    /// Empty state accepting sizes in `(0, p_max]` bits.
    pub fn new(p_max: f64) -> Result<Self> {
        if !(p_max > 0.0) || !p_max.is_finite() {
            return Err(EstimatorError::Parameter(format!("p_max must be positive, got {p_max}")));
        }
        Ok(Self { samples: 0, weight: 0.0, s_x: 0.0, s_y: 0.0, s_xy: 0.0, s_xx: 0.0, p_max, forgetting: 1.0 })
    }

    /// Exponential forgetting: all sums are multiplied by `lambda` before
    /// each new sample. `lambda = 1` keeps every sample at full weight.
    pub fn with_forgetting(mut self, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(EstimatorError::Parameter(format!("forgetting factor must lie in (0, 1], got {lambda}")));
        }
        self.forgetting = lambda;
        Ok(self)
    }

    /// Seed the sums with two measurements at distinct sizes.
    pub fn init(x1: f64, y1: f64, x2: f64, y2: f64, p_max: f64) -> Result<Self> {
        if x1 == x2 {
            return Err(EstimatorError::Degenerate);
        }
        let mut st = Self::new(p_max)?;
        st.push(x1, y1)?;
        st.push(x2, y2)?;
        Ok(st)
    }

    /// Add one sample without fitting.
    pub fn push(&mut self, x: f64, y: f64) -> Result<()> {
        if !(x > 0.0 && x <= self.p_max) {
            return Err(EstimatorError::OutOfRange(format!("size {x} outside (0, {}]", self.p_max)));
        }
        if !y.is_finite() {
            return Err(EstimatorError::OutOfRange(format!("time {y} is not finite")));
        }
        if self.forgetting < 1.0 {
            let l = self.forgetting;
            self.weight *= l;
            self.s_x *= l;
            self.s_y *= l;
            self.s_xy *= l;
            self.s_xx *= l;
        }
        let xs = x / SIZE_SCALE_BITS;
        self.samples += 1;
        self.weight += 1.0;
        self.s_x += xs;
        self.s_y += y;
        self.s_xy += xs * y;
        self.s_xx += xs * xs;
        Ok(())
    }

    /// Add one sample and refit. On a degenerate design the sample is kept
    /// and the error returned.
    pub fn update(&mut self, x: f64, y: f64) -> Result<FitResult> {
        self.push(x, y)?;
        self.fit()
    }

    pub fn fit(&self) -> Result<FitResult> {
        let den = self.denominator();
        if self.samples < 2 || !(den > 64.0 * f64::EPSILON * self.weight * self.s_xx) {
            return Err(EstimatorError::Degenerate);
        }
        let beta_scaled = (self.weight * self.s_xy - self.s_x * self.s_y) / den;
        let alpha_hat = (self.s_y - beta_scaled * self.s_x) / self.weight;
        Ok(FitResult { alpha_hat, beta_hat: beta_scaled / SIZE_SCALE_BITS, k: self.samples })
    }

    /// `k * s_xx - s_x^2` in accumulation units.
    pub fn denominator(&self) -> f64 {
        self.weight * self.s_xx - self.s_x * self.s_x
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn forgetting(&self) -> f64 {
        self.forgetting
    }

    pub fn sums(&self) -> Sums {
        Sums {
            s_x: self.s_x * SIZE_SCALE_BITS,
            s_y: self.s_y,
            s_xy: self.s_xy * SIZE_SCALE_BITS,
            s_xx: self.s_xx * SIZE_SCALE_BITS * SIZE_SCALE_BITS,
        }
    }
}

/// Ordinary least squares over a stored point set `(size_bits, time_s)`,
/// computed from centered second moments.
pub fn batch_ls(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.len() < 2 {
        return Err(EstimatorError::Degenerate);
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in points {
        let dx = x - mean_x;
        sxx += dx * dx;
        sxy += dx * (y - mean_y);
    }
    if !(sxx > 0.0) {
        return Err(EstimatorError::Degenerate);
    }
    let beta_hat = sxy / sxx;
    Ok(FitResult { alpha_hat: mean_y - beta_hat * mean_x, beta_hat, k: points.len() as u64 })
}

/// How the next probe size is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizePolicy {
    /// Uniform on `(0, p_max]`.
    Uniform,
    /// Cycle through a 16-point geometric grid spanning `(p_max/10^4, p_max]`.
    Grid,
}

impl FromStr for SizePolicy {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SizePolicy::Uniform),
            "grid" => Ok(SizePolicy::Grid),
            other => Err(EstimatorError::Parameter(format!("unknown size policy `{other}`"))),
        }
    }
}

/// The grid used by [`SizePolicy::Grid`], ascending, largest point `p_max`.
pub fn size_grid(p_max: f64) -> [f64; GRID_POINTS] {
    let mut g = [0.0; GRID_POINTS];
    for (i, slot) in g.iter_mut().enumerate() {
        let exponent = -4.0 * (GRID_POINTS - 1 - i) as f64 / GRID_POINTS as f64;
        *slot = p_max * 10f64.powf(exponent);
    }
    g
}

/// Next message size in bits; a pure function of the state's sample count,
/// the policy and `seed`.
pub fn propose_next_size(state: &EstimatorState, policy: SizePolicy, seed: u64) -> f64 {
    let p_max = state.p_max();
    match policy {
        SizePolicy::Uniform => {
            let u: f64 = SeedKey::new(seed, state.samples(), 0).rng(Stream::SizeProposal).random();
            p_max * (1.0 - u)
        }
        SizePolicy::Grid => size_grid(p_max)[(state.samples() % GRID_POINTS as u64) as usize],
    }
}

/// One `(size, delay)` observation with the size in bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub size_bits: f64,
    pub time_s: f64,
}

impl Sample {
    pub fn as_point(&self) -> (f64, f64) {
        (self.size_bits, self.time_s)
    }
}

#[derive(Deserialize)]
struct SampleRow {
    size_bytes: u64,
    time_seconds: f64,
}

/// Read a `size_bytes,time_seconds[,...]` CSV; sizes are converted to bits.
/// Extra columns are ignored.
pub fn read_samples_csv<R: Read>(input: R) -> Result<Vec<Sample>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(|e| EstimatorError::Csv(e.to_string()))?.clone();
    for needed in ["size_bytes", "time_seconds"] {
        if !headers.iter().any(|h| h == needed) {
            return Err(EstimatorError::Csv(format!("missing column `{needed}`")));
        }
    }
    rdr.deserialize::<SampleRow>()
        .map(|row| {
            let row = row.map_err(|e| EstimatorError::Csv(e.to_string()))?;
            Ok(Sample { size_bits: (row.size_bytes * BITS_PER_BYTE) as f64, time_s: row.time_seconds })
        })
        .collect()
}

/// Write the fit trace `k,alpha_hat,beta_hat`. `beta_hat` is written in
/// seconds per byte, matching the byte-denominated sample files.
pub fn write_fit_trace<W: Write>(out: W, fits: &[FitResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| EstimatorError::Csv(e.to_string());
    w.write_record(["k", "alpha_hat", "beta_hat"]).map_err(err)?;
    for f in fits {
        w.write_record([f.k.to_string(), f.alpha_hat.to_string(), f.beta_per_byte().to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| EstimatorError::Csv(e.to_string()))
}

/// Read a fit trace written by [`write_fit_trace`]; `beta_hat` comes back in
/// seconds per bit.
pub fn read_fit_trace<R: Read>(input: R) -> Result<Vec<FitResult>> {
    #[derive(Deserialize)]
    struct Row {
        k: u64,
        alpha_hat: f64,
        beta_hat: f64,
    }
    csv::Reader::from_reader(input)
        .deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(|e| EstimatorError::Csv(e.to_string()))?;
            Ok(FitResult { alpha_hat: row.alpha_hat, beta_hat: row.beta_hat / BITS_PER_BYTE as f64, k: row.k })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_seeds_sums() {
        let st = EstimatorState::init(1.0, 5.0, 2.0, 7.0, 10.0).unwrap();
        assert_eq!(st.sums(), Sums { s_x: 3.0, s_y: 12.0, s_xy: 19.0, s_xx: 5.0 });
        let fit = st.fit().unwrap();
        assert_eq!((fit.alpha_hat, fit.beta_hat, fit.k), (3.0, 2.0, 2));
    }

    #[test]
    fn init_rejects_equal_sizes_and_range() {
        assert_eq!(EstimatorState::init(4.0, 1.0, 4.0, 2.0, 10.0), Err(EstimatorError::Degenerate));
        assert!(matches!(EstimatorState::init(0.0, 1.0, 4.0, 2.0, 10.0), Err(EstimatorError::OutOfRange(_))));
        assert!(matches!(EstimatorState::init(1.0, 1.0, 11.0, 2.0, 10.0), Err(EstimatorError::OutOfRange(_))));
        assert!(EstimatorState::new(0.0).is_err());
    }

    #[test]
    fn noiseless_stream_recovers_line() {
        let mut st = EstimatorState::init(10.0, 15.0, 20.0, 20.0, 100.0).unwrap();
        let fit = st.update(30.0, 25.0).unwrap();
        assert!((fit.beta_hat - 0.5).abs() < 1e-9);
        assert!((fit.alpha_hat - 10.0).abs() < 1e-9);
        let oracle = batch_ls(&[(10.0, 15.0), (20.0, 20.0), (30.0, 25.0)]).unwrap();
        assert!((oracle.beta_hat - 0.5).abs() < 1e-12 && (oracle.alpha_hat - 10.0).abs() < 1e-12);
    }

    #[test]
    fn constant_sizes_are_degenerate() {
        let mut st = EstimatorState::new(100.0).unwrap();
        st.push(5.0, 1.0).unwrap();
        assert_eq!(st.fit(), Err(EstimatorError::Degenerate));
        assert_eq!(st.update(5.0, 2.0), Err(EstimatorError::Degenerate));
        assert_eq!(st.samples(), 2);
        assert_eq!(batch_ls(&[(3.0, 1.0), (3.0, 2.0)]), Err(EstimatorError::Degenerate));
        assert_eq!(batch_ls(&[(3.0, 1.0)]), Err(EstimatorError::Degenerate));
    }

    #[test]
    fn batch_collinear_points_fit_exactly() {
        let pts: Vec<(f64, f64)> = (1..20).map(|i| (i as f64 * 3.0, 7.0 + 0.25 * i as f64 * 3.0)).collect();
        let fit = batch_ls(&pts).unwrap();
        for &(x, y) in &pts {
            assert!((fit.alpha_hat + fit.beta_hat * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn forgetting_validation_and_identity() {
        assert!(EstimatorState::new(1.0).unwrap().with_forgetting(0.0).is_err());
        assert!(EstimatorState::new(1.0).unwrap().with_forgetting(1.5).is_err());
        let pts = [(1.0, 2.0), (3.0, 2.5), (2.0, 9.0), (4.0, 1.0)];
        let mut a = EstimatorState::new(10.0).unwrap();
        let mut b = EstimatorState::new(10.0).unwrap().with_forgetting(1.0).unwrap();
        for (x, y) in pts {
            a.push(x, y).unwrap();
            b.push(x, y).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn forgetting_tracks_a_shift() {
        let mut st = EstimatorState::new(1e6).unwrap().with_forgetting(0.8).unwrap();
        for i in 0..200 {
            let x = 1e3 * (1 + i % 7) as f64;
            let alpha = if i < 100 { 1e-3 } else { 1e-1 };
            st.push(x, alpha + 1e-8 * x).unwrap();
        }
        let fit = st.fit().unwrap();
        assert!((fit.alpha_hat - 1e-1).abs() < 1e-6);
    }

    #[test]
    fn grid_policy_cycles_sixteen_sizes() {
        let mut st = EstimatorState::new(1e6).unwrap();
        let mut seen = Vec::new();
        for i in 0..32 {
            let s = propose_next_size(&st, SizePolicy::Grid, 0);
            assert!(s > 1e6 / 1e4 && s <= 1e6);
            seen.push(s);
            st.push(s, i as f64).unwrap();
        }
        let mut distinct = seen[..16].to_vec();
        distinct.dedup();
        assert_eq!(distinct.len(), 16);
        assert_eq!(&seen[..16], &seen[16..]);
        assert_eq!(seen[15], 1e6);
    }

    #[test]
    fn uniform_policy_stays_in_range() {
        let mut st = EstimatorState::new(5e3).unwrap();
        for i in 0..2000 {
            let s = propose_next_size(&st, SizePolicy::Uniform, 17);
            assert!(s > 0.0 && s <= 5e3);
            st.push(s, 1.0 + i as f64).unwrap();
        }
        assert!("poisson".parse::<SizePolicy>().is_err());
    }

    #[test]
    fn two_distinct_proposals_make_the_design_regular() {
        for policy in [SizePolicy::Uniform, SizePolicy::Grid] {
            let mut st = EstimatorState::new(1e4).unwrap();
            let mut sizes = Vec::new();
            while sizes.len() < 2 {
                let s = propose_next_size(&st, policy, 3);
                st.push(s, 0.1).unwrap();
                if !sizes.contains(&s) {
                    sizes.push(s);
                }
            }
            assert!(st.denominator() > 0.0);
            assert!(st.fit().is_ok());
        }
    }

    #[test]
    fn sample_csv_converts_bytes_and_ignores_extra_columns() {
        let text = "size_bytes,time_seconds,rep\n1,5,0\n2,7,1\n";
        let samples = read_samples_csv(text.as_bytes()).unwrap();
        assert_eq!(samples, vec![Sample { size_bits: 8.0, time_s: 5.0 }, Sample { size_bits: 16.0, time_s: 7.0 }]);
        assert!(read_samples_csv("size,time\n1,2\n".as_bytes()).is_err());
        assert!(read_samples_csv("size_bytes,time_seconds\nx,2\n".as_bytes()).is_err());
    }

    #[test]
    fn fit_trace_uses_bytes() {
        let fit = FitResult { alpha_hat: 3.0, beta_hat: 0.25, k: 2 };
        let mut buf = Vec::new();
        write_fit_trace(&mut buf, &[fit]).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "k,alpha_hat,beta_hat\n2,3,2\n");
        assert_eq!(read_fit_trace(buf.as_slice()).unwrap(), vec![fit]);
    }
}
