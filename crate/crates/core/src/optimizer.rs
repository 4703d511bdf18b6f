//! Synchronous distributed gradient descent with optional gradient
//! compression, charged with simulated wall clock under the time model.
//!
//! Each round the server broadcasts `x^k`, every worker returns
//! `C(grad f_i(x^k))`, and the server steps with the mean of the decompressed
//! gradients. A round costs one downlink sample plus the slowest of the `n`
//! uplink samples; gradient computation is free.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commodel::{ModelError, TimeModelParams};
use crate::compression::{decompress, CompressionError, CompressorSpec, DenseVector, Kind, DEFAULT_BITS_PER_SCALAR};
use crate::rng::{SeedKey, Stream};
use crate::BITS_PER_BYTE;

/// Objective values above this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("diverged at round {round}: objective {objective:e} exceeds the limit")]
    Diverged { round: u64, objective: f64 },
    #[error("singular averaged system")]
    Singular,
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, SimError>;

/// Finite-sum objective `f(x) = (1/n) sum_i f_i(x)`.
#[derive(Debug, Clone)]
pub enum Problem {
    /// `f_i(x) = 1/2 |x - a_i|^2`.
    Mean { anchors: Vec<Vec<f64>> },
    /// `f_i(x) = 1/2 x^T A_i x - b_i^T x` with symmetric PSD `A_i`.
    Quadratic { hessians: Vec<DMatrix<f64>>, linear: Vec<DVector<f64>>, mean_hessian: DMatrix<f64>, mean_linear: DVector<f64>, smoothness: f64 },
}

impl Problem {
    pub fn mean(anchors: Vec<Vec<f64>>) -> Result<Self> {
        let d = anchors.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(SimError::Problem("need at least one worker and one dimension".into()));
        }
        if anchors.iter().any(|a| a.len() != d || a.iter().any(|v| !v.is_finite())) {
            return Err(SimError::Problem("anchors must share one dimension and be finite".into()));
        }
        Ok(Problem::Mean { anchors })
    }

    /// Anchors drawn from a standard normal.
    pub fn random_mean(n: usize, d: usize, seed: u64) -> Result<Self> {
        let anchors = (0..n)
            .map(|i| {
                let mut rng = SeedKey::new(seed, 0, i as u64).rng(Stream::ProblemData);
                (0..d).map(|_| rng.sample(StandardNormal)).collect()
            })
            .collect();
        Self::mean(anchors)
    }

    pub fn quadratic(hessians: Vec<DMatrix<f64>>, linear: Vec<DVector<f64>>) -> Result<Self> {
        let n = hessians.len();
        if n == 0 || linear.len() != n {
            return Err(SimError::Problem("need one (A_i, b_i) pair per worker".into()));
        }
        let d = hessians[0].nrows();
        if d == 0 {
            return Err(SimError::Problem("dimension must be at least 1".into()));
        }
        for (a, b) in hessians.iter().zip(&linear) {
            if a.nrows() != d || a.ncols() != d || b.len() != d {
                return Err(SimError::Problem("inconsistent dimensions".into()));
            }
            let scale = a.amax().max(1.0);
            if (a - a.transpose()).amax() > 1e-12 * scale {
                return Err(SimError::Problem("A_i must be symmetric".into()));
            }
            if SymmetricEigen::new(a.clone()).eigenvalues.min() < -1e-10 * scale {
                return Err(SimError::Problem("A_i must be positive semidefinite".into()));
            }
        }
        let inv_n = 1.0 / n as f64;
        let mean_hessian = hessians.iter().fold(DMatrix::zeros(d, d), |acc, a| acc + a) * inv_n;
        let mean_linear = linear.iter().fold(DVector::zeros(d), |acc, b| acc + b) * inv_n;
        let smoothness = SymmetricEigen::new(mean_hessian.clone()).eigenvalues.max();
        Ok(Problem::Quadratic { hessians, linear, mean_hessian, mean_linear, smoothness })
    }

    /// `A_i = G^T G / d + 0.1 I` with Gaussian `G`, Gaussian `b_i`.
    pub fn random_quadratic(n: usize, d: usize, seed: u64) -> Result<Self> {
        let mut hessians = Vec::with_capacity(n);
        let mut linear = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = SeedKey::new(seed, 1, i as u64).rng(Stream::ProblemData);
            let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = (g.transpose() * &g) / d as f64 + DMatrix::identity(d, d) * 0.1;
            // exact symmetry
            let a = (&a + a.transpose()) * 0.5;
            hessians.push(a);
            linear.push(DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)));
        }
        Self::quadratic(hessians, linear)
    }

    pub fn n(&self) -> usize {
        match self {
            Problem::Mean { anchors } => anchors.len(),
            Problem::Quadratic { hessians, .. } => hessians.len(),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Problem::Mean { anchors } => anchors[0].len(),
            Problem::Quadratic { mean_linear, .. } => mean_linear.len(),
        }
    }

    /// Largest eigenvalue of the averaged Hessian.
    pub fn smoothness(&self) -> f64 {
        match self {
            Problem::Mean { .. } => 1.0,
            Problem::Quadratic { smoothness, .. } => *smoothness,
        }
    }

    /// Smallest eigenvalue of the averaged Hessian.
    pub fn strong_convexity(&self) -> f64 {
        match self {
            Problem::Mean { .. } => 1.0,
            Problem::Quadratic { mean_hessian, .. } => SymmetricEigen::new(mean_hessian.clone()).eigenvalues.min(),
        }
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        match self {
            Problem::Mean { anchors } => {
                let total: f64 = anchors
                    .iter()
                    .map(|a| 0.5 * a.iter().zip(x).map(|(ai, xi)| (xi - ai).powi(2)).sum::<f64>())
                    .sum();
                total / anchors.len() as f64
            }
            Problem::Quadratic { mean_hessian, mean_linear, .. } => {
                let xv = DVector::from_column_slice(x);
                0.5 * xv.dot(&(mean_hessian * &xv)) - mean_linear.dot(&xv)
            }
        }
    }

    /// Gradient of worker `i`'s local function.
    pub fn local_gradient(&self, i: usize, x: &[f64]) -> Vec<f64> {
        match self {
            Problem::Mean { anchors } => x.iter().zip(&anchors[i]).map(|(xi, ai)| xi - ai).collect(),
            Problem::Quadratic { hessians, linear, .. } => {
                let xv = DVector::from_column_slice(x);
                (&hessians[i] * xv - &linear[i]).as_slice().to_vec()
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Problem::Mean { anchors } => {
                let n = anchors.len() as f64;
                (0..x.len()).map(|j| x[j] - anchors.iter().map(|a| a[j]).sum::<f64>() / n).collect()
            }
            Problem::Quadratic { mean_hessian, mean_linear, .. } => {
                let xv = DVector::from_column_slice(x);
                (mean_hessian * xv - mean_linear).as_slice().to_vec()
            }
        }
    }

    /// Exact minimizer and minimum.
    pub fn closed_form_optimum(&self) -> Result<(Vec<f64>, f64)> {
        let x = match self {
            Problem::Mean { anchors } => {
                let n = anchors.len() as f64;
                (0..self.d()).map(|j| anchors.iter().map(|a| a[j]).sum::<f64>() / n).collect::<Vec<_>>()
            }
            Problem::Quadratic { mean_hessian, mean_linear, .. } => {
                let chol = mean_hessian.clone().cholesky().ok_or(SimError::Singular)?;
                chol.solve(mean_linear).as_slice().to_vec()
            }
        };
        let f = self.objective(&x);
        Ok((x, f))
    }
}

/// Step size schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Stepsize {
    Constant(f64),
    /// `gamma_k` for each round; must cover every round.
    Schedule(Vec<f64>),
    /// `1 / (L * zeta)` for unbiased compressors, `1 / L` otherwise.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub steps: u64,
    pub stepsize: Stepsize,
    pub compressor: CompressorSpec,
    pub time: TimeModelParams,
    pub seed: u64,
    pub downlink_compressed: bool,
    pub bits_per_scalar: u32,
}

impl SimConfig {
    pub fn new(steps: u64, stepsize: Stepsize, compressor: CompressorSpec, time: TimeModelParams, seed: u64) -> Self {
        Self { steps, stepsize, compressor, time, seed, downlink_compressed: false, bits_per_scalar: DEFAULT_BITS_PER_SCALAR }
    }

    fn gammas(&self, problem: &Problem) -> Result<Vec<f64>> {
        if self.steps == 0 {
            return Err(SimError::Config("steps must be at least 1".into()));
        }
        let steps = self.steps as usize;
        let gammas = match &self.stepsize {
            Stepsize::Constant(g) => vec![*g; steps],
            Stepsize::Schedule(gs) => {
                if gs.len() < steps {
                    return Err(SimError::Config(format!("schedule has {} entries for {steps} steps", gs.len())));
                }
                gs[..steps].to_vec()
            }
            Stepsize::Auto => {
                let zeta = if self.compressor.is_unbiased() { self.compressor.zeta(problem.d()).unwrap_or(1.0) } else { 1.0 };
                vec![1.0 / (problem.smoothness() * zeta); steps]
            }
        };
        if let Some(g) = gammas.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return Err(SimError::Config(format!("step sizes must be positive, got {g}")));
        }
        Ok(gammas)
    }
}

/// State after a round. Round 0 is the starting point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub round: u64,
    pub objective: f64,
    pub grad_norm: f64,
    pub wall_clock_s: f64,
    /// Cumulative time attributed to uplinks (slowest worker per round).
    pub uplink_time_s: f64,
    /// Cumulative time attributed to downlink broadcasts.
    pub downlink_time_s: f64,
    /// Cumulative bits sent by all workers.
    pub uplink_bits: u64,
    /// Cumulative bits received by all workers (broadcast counted per worker).
    pub downlink_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub records: Vec<SimRecord>,
    pub final_x: Vec<f64>,
}

impl SimTrace {
    pub const CSV_HEADER: [&'static str; 6] =
        ["round", "objective", "grad_norm", "wall_clock_s", "uplink_bits", "downlink_bits"];

    pub fn last(&self) -> &SimRecord {
        self.records.last().expect("trace always holds round 0")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.round.to_string(),
                r.objective.to_string(),
                r.grad_norm.to_string(),
                r.wall_clock_s.to_string(),
                r.uplink_bits.to_string(),
                r.downlink_bits.to_string(),
            ])?;
        }
        w.flush()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Plain distributed GD: the configured compressor is replaced by identity.
pub fn run_gd(problem: &Problem, config: &SimConfig) -> Result<SimTrace> {
    let plain = SimConfig { compressor: CompressorSpec::Identity, downlink_compressed: false, ..config.clone() };
    run_compressed_gd(problem, &plain)
}

/// Distributed GD aggregating compressed gradients, starting from `x^0 = 0`.
pub fn run_compressed_gd(problem: &Problem, config: &SimConfig) -> Result<SimTrace> {
    let (n, d) = (problem.n(), problem.d());
    let b = config.bits_per_scalar;
    config.compressor.validate(d)?;
    let gammas = config.gammas(problem)?;
    let full_bits = d as u64 * u64::from(b);
    let server = n as u64;

    let mut x = vec![0.0; d];
    let mut rec = SimRecord {
        round: 0,
        objective: problem.objective(&x),
        grad_norm: norm(&problem.gradient(&x)),
        wall_clock_s: 0.0,
        uplink_time_s: 0.0,
        downlink_time_s: 0.0,
        uplink_bits: 0,
        downlink_bits: 0,
    };
    let mut records = vec![rec];

    for (k, &gamma) in gammas.iter().enumerate() {
        let round = k as u64;
        let server_key = SeedKey::new(config.seed, round, server);

        let (seen, down_bits) = if config.downlink_compressed {
            let msg = config.compressor.compress(&DenseVector::new(x.clone(), b)?, server_key)?;
            (decompress(&msg)?.into_values(), msg.bits())
        } else {
            (x.clone(), full_bits)
        };
        let t_down = config.time.sample_time(down_bits as f64, &mut server_key.rng(Stream::DownlinkTime));

        let mut sum = vec![0.0; d];
        let mut t_up_max = 0.0f64;
        let mut up_bits = 0u64;
        for i in 0..n {
            let key = SeedKey::new(config.seed, round, i as u64);
            let grad = DenseVector::new(problem.local_gradient(i, &seen), b)
                .map_err(|_| SimError::Diverged { round, objective: f64::INFINITY })?;
            let msg = config.compressor.compress(&grad, key)?;
            let recv = decompress(&msg)?;
            for (s, g) in sum.iter_mut().zip(recv.values()) {
                *s += g;
            }
            up_bits += msg.bits();
            t_up_max = t_up_max.max(config.time.sample_time(msg.bits() as f64, &mut key.rng(Stream::UplinkTime)));
        }
        let n_f = n as f64;
        for (xj, sj) in x.iter_mut().zip(&sum) {
            *xj -= gamma * (sj / n_f);
        }

        let objective = problem.objective(&x);
        if !objective.is_finite() || objective > DIVERGENCE_LIMIT {
            return Err(SimError::Diverged { round: round + 1, objective });
        }
        rec = SimRecord {
            round: round + 1,
            objective,
            grad_norm: norm(&problem.gradient(&x)),
            wall_clock_s: rec.wall_clock_s + (t_down + t_up_max),
            uplink_time_s: rec.uplink_time_s + t_up_max,
            downlink_time_s: rec.downlink_time_s + t_down,
            uplink_bits: rec.uplink_bits + up_bits,
            downlink_bits: rec.downlink_bits + n as u64 * down_bits,
        };
        records.push(rec);
    }
    Ok(SimTrace { records, final_x: x })
}

/// Problem family selectable from a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Mean,
    Quadratic,
}

/// Flat key-value simulation settings as read from a config file.
///
/// Sizes on this boundary are bytes, so `beta` is seconds per byte; it is
/// converted to seconds per bit when the time model is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub n: usize,
    pub d: usize,
    pub steps: u64,
    pub gamma: Option<f64>,
    pub compressor_kind: Kind,
    pub compressor_k: Option<usize>,
    pub compressor_r: Option<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_m: f64,
    pub beta_m: f64,
    pub seed: u64,
    pub downlink_compressed: bool,
    pub problem: ProblemKind,
    pub bits_per_scalar: u32,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            n: 4,
            d: 100,
            steps: 100,
            gamma: None,
            compressor_kind: Kind::Identity,
            compressor_k: None,
            compressor_r: None,
            alpha: 1e-4,
            beta: 8e-9,
            alpha_m: 0.0,
            beta_m: 0.0,
            seed: 0,
            downlink_compressed: false,
            problem: ProblemKind::Mean,
            bits_per_scalar: DEFAULT_BITS_PER_SCALAR,
        }
    }
}

impl SimSettings {
    pub const KEYS: [&'static str; 15] = [
        "n",
        "d",
        "steps",
        "gamma",
        "compressor.kind",
        "compressor.k",
        "compressor.r",
        "alpha",
        "beta",
        "alpha_m",
        "beta_m",
        "seed",
        "downlink_compressed",
        "problem",
        "bits_per_scalar",
    ];

    /// Parse `key = value` lines; `#` starts a comment. Unknown keys and
    /// duplicate keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut settings = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SimError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(SimError::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            settings.set(key, value.trim())?;
        }
        Ok(settings)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| SimError::Config(format!("bad value `{value}` for `{key}`")))
        }
        let opt = |v: &str| v.is_empty() || v == "auto" || v == "none";
        match key {
            "n" => self.n = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "gamma" => self.gamma = if opt(value) { None } else { Some(num(key, value)?) },
            "compressor.kind" => self.compressor_kind = value.parse()?,
            "compressor.k" => self.compressor_k = if opt(value) { None } else { Some(num(key, value)?) },
            "compressor.r" => self.compressor_r = if opt(value) { None } else { Some(num(key, value)?) },
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "alpha_m" => self.alpha_m = num(key, value)?,
            "beta_m" => self.beta_m = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "downlink_compressed" => self.downlink_compressed = num(key, value)?,
            "problem" => {
                self.problem = match value {
                    "mean" => ProblemKind::Mean,
                    "quadratic" => ProblemKind::Quadratic,
                    other => return Err(SimError::Config(format!("unknown problem `{other}`"))),
                }
            }
            "bits_per_scalar" => self.bits_per_scalar = num(key, value)?,
            other => return Err(SimError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Resolved settings as ordered key/value strings.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "auto".into());
        let problem = match self.problem {
            ProblemKind::Mean => "mean",
            ProblemKind::Quadratic => "quadratic",
        };
        [
            ("n", self.n.to_string()),
            ("d", self.d.to_string()),
            ("steps", self.steps.to_string()),
            ("gamma", opt(self.gamma.map(|g| g.to_string()))),
            ("compressor.kind", self.compressor_kind.to_string()),
            ("compressor.k", opt(self.compressor_k.map(|k| k.to_string()))),
            ("compressor.r", opt(self.compressor_r.map(|r| r.to_string()))),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("alpha_m", self.alpha_m.to_string()),
            ("beta_m", self.beta_m.to_string()),
            ("seed", self.seed.to_string()),
            ("downlink_compressed", self.downlink_compressed.to_string()),
            ("problem", problem.to_string()),
            ("bits_per_scalar", self.bits_per_scalar.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn build(&self) -> Result<(Problem, SimConfig)> {
        if self.n == 0 || self.d == 0 {
            return Err(SimError::Config("n and d must be at least 1".into()));
        }
        let problem = match self.problem {
            ProblemKind::Mean => Problem::random_mean(self.n, self.d, self.seed)?,
            ProblemKind::Quadratic => Problem::random_quadratic(self.n, self.d, self.seed)?,
        };
        let compressor = CompressorSpec::from_parts(self.compressor_kind, self.compressor_k, self.compressor_r)?;
        let time = TimeModelParams::new(self.alpha, self.beta / BITS_PER_BYTE as f64, self.alpha_m, self.beta_m)?;
        let stepsize = self.gamma.map_or(Stepsize::Auto, Stepsize::Constant);
        let config = SimConfig {
            steps: self.steps,
            stepsize,
            compressor,
            time,
            seed: self.seed,
            downlink_compressed: self.downlink_compressed,
            bits_per_scalar: self.bits_per_scalar,
        };
        Ok((problem, config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(a: f64, b: f64) -> TimeModelParams {
        TimeModelParams::deterministic(a, b).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let p = Problem::mean(vec![vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let (x, f) = p.closed_form_optimum().unwrap();
        assert_eq!(x, vec![1.0, 1.0]);
        assert_eq!(f, 1.0);

        let p = Problem::mean(vec![vec![3.0, -1.5, 2.0]]).unwrap();
        assert_eq!(p.closed_form_optimum().unwrap(), (vec![3.0, -1.5, 2.0], 0.0));

        let p = Problem::mean(vec![vec![0.5, 4.0]; 5]).unwrap();
        assert_eq!(p.closed_form_optimum().unwrap().1, 0.0);
    }

    #[test]
    fn problem_validation() {
        assert!(Problem::mean(vec![]).is_err());
        assert!(Problem::mean(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        let not_sym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(Problem::quadratic(vec![not_sym], vec![DVector::zeros(2)]).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(Problem::quadratic(vec![indefinite], vec![DVector::zeros(2)]).is_err());
    }

    #[test]
    fn singular_system_is_reported() {
        let zero = DMatrix::zeros(2, 2);
        let p = Problem::quadratic(vec![zero], vec![DVector::from_vec(vec![1.0, 0.0])]).unwrap();
        assert_eq!(p.closed_form_optimum().unwrap_err(), SimError::Singular);
    }

    #[test]
    fn quadratic_gradient_matches_finite_differences() {
        let p = Problem::random_quadratic(3, 4, 5).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5];
        let g = p.gradient(&x);
        for j in 0..4 {
            let h = 1e-6;
            let (mut xp, mut xm) = (x, x);
            xp[j] += h;
            xm[j] -= h;
            let fd = (p.objective(&xp) - p.objective(&xm)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6, "coordinate {j}: {fd} vs {}", g[j]);
        }
        let local_mean: Vec<f64> =
            (0..4).map(|j| (0..3).map(|i| p.local_gradient(i, &x)[j]).sum::<f64>() / 3.0).collect();
        for (a, b) in local_mean.iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_step_solves_mean_problem() {
        let p = Problem::random_mean(5, 7, 3).unwrap();
        let cfg = SimConfig::new(1, Stepsize::Constant(1.0), CompressorSpec::Identity, noiseless(1e-3, 1e-9), 0);
        let trace = run_gd(&p, &cfg).unwrap();
        let (xs, fs) = p.closed_form_optimum().unwrap();
        for (a, b) in trace.final_x.iter().zip(&xs) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((trace.last().objective - fs).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_wall_clock_closed_form() {
        let p = Problem::random_mean(3, 50, 1).unwrap();
        let t = noiseless(2e-4, 3e-9);
        let cfg = SimConfig::new(7, Stepsize::Constant(0.5), CompressorSpec::Identity, t, 0);
        let trace = run_gd(&p, &cfg).unwrap();
        let expect = 2.0 * 7.0 * t.expected_time(50.0 * 32.0);
        assert!((trace.last().wall_clock_s - expect).abs() <= 1e-9 * expect);
        assert_eq!(trace.last().uplink_bits, 7 * 3 * 50 * 32);
        assert_eq!(trace.last().downlink_bits, 7 * 3 * 50 * 32);
    }

    #[test]
    fn small_steps_descend() {
        let p = Problem::random_quadratic(4, 6, 2).unwrap();
        let gamma = 0.5 / p.smoothness();
        let cfg = SimConfig::new(50, Stepsize::Constant(gamma), CompressorSpec::Identity, noiseless(1e-3, 0.0), 0);
        let trace = run_gd(&p, &cfg).unwrap();
        for w in trace.records.windows(2) {
            assert!(w[1].objective <= w[0].objective);
            assert!(w[1].wall_clock_s > w[0].wall_clock_s);
        }
    }

    #[test]
    fn invalid_configs() {
        let p = Problem::random_mean(2, 3, 0).unwrap();
        let t = noiseless(1.0, 0.0);
        let zero = SimConfig::new(3, Stepsize::Constant(0.0), CompressorSpec::Identity, t, 0);
        assert!(matches!(run_gd(&p, &zero), Err(SimError::Config(_))));
        let none = SimConfig::new(0, Stepsize::Constant(1.0), CompressorSpec::Identity, t, 0);
        assert!(run_gd(&p, &none).is_err());
        let short = SimConfig::new(3, Stepsize::Schedule(vec![1.0]), CompressorSpec::Identity, t, 0);
        assert!(run_gd(&p, &short).is_err());
        let big_k = SimConfig::new(3, Stepsize::Constant(1.0), CompressorSpec::RandK { k: 4 }, t, 0);
        assert!(run_compressed_gd(&p, &big_k).is_err());
    }

    #[test]
    fn divergence_guard_fires() {
        let p = Problem::random_mean(2, 3, 0).unwrap();
        let cfg = SimConfig::new(200, Stepsize::Constant(3.0), CompressorSpec::Identity, noiseless(1.0, 0.0), 0);
        match run_gd(&p, &cfg) {
            Err(SimError::Diverged { round, objective }) => {
                assert!(round > 1);
                assert!(objective > DIVERGENCE_LIMIT);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn auto_stepsize_uses_zeta() {
        let p = Problem::random_mean(2, 10, 0).unwrap();
        let cfg = SimConfig::new(1, Stepsize::Auto, CompressorSpec::RandK { k: 2 }, noiseless(1.0, 0.0), 0);
        assert_eq!(cfg.gammas(&p).unwrap(), vec![0.2]);
        let cfg = SimConfig { compressor: CompressorSpec::TopK { k: 2 }, ..cfg };
        assert_eq!(cfg.gammas(&p).unwrap(), vec![1.0]);
    }

    #[test]
    fn downlink_compression_changes_accounting() {
        let p = Problem::random_mean(2, 16, 0).unwrap();
        let t = noiseless(0.0, 1e-6);
        let mut cfg = SimConfig::new(3, Stepsize::Constant(0.5), CompressorSpec::TopK { k: 4 }, t, 0);
        cfg.downlink_compressed = true;
        let trace = run_compressed_gd(&p, &cfg).unwrap();
        let bits = 4 * (32 + 4);
        assert_eq!(trace.last().downlink_bits, 3 * 2 * bits);
        assert_eq!(trace.last().uplink_bits, 3 * 2 * bits);
        let expect = 3.0 * 2.0 * t.expected_time(bits as f64);
        assert!((trace.last().wall_clock_s - expect).abs() < 1e-12);
    }

    #[test]
    fn settings_parse_strictly() {
        let s = SimSettings::parse(
            "# experiment\nn = 8\nd=64\nsteps = 20\ncompressor.kind = rand_k\ncompressor.k = 8\nalpha = 0\nbeta = 1e-8\nseed = 42 # trailing\ndownlink_compressed = false\n",
        )
        .unwrap();
        assert_eq!((s.n, s.d, s.steps, s.seed), (8, 64, 20, 42));
        assert_eq!(s.compressor_kind, Kind::RandK);
        let (p, cfg) = s.build().unwrap();
        assert_eq!((p.n(), p.d()), (8, 64));
        assert_eq!(cfg.compressor, CompressorSpec::RandK { k: 8 });
        assert_eq!(cfg.time.beta_const, 1e-8 / 8.0);
        assert_eq!(cfg.stepsize, Stepsize::Auto);

        assert!(SimSettings::parse("learning_rate = 0.1").is_err());
        assert!(SimSettings::parse("n = 3\nn = 4").is_err());
        assert!(SimSettings::parse("n three").is_err());
        assert!(SimSettings::parse("n = -3").is_err());
        assert!(SimSettings::parse("compressor.kind = rand_k").unwrap().build().is_err());
        assert!(SimSettings::parse("alpha = 0\nbeta = 0").unwrap().build().is_err());
    }

    #[test]
    fn settings_pairs_round_trip() {
        let mut s = SimSettings::default();
        s.set("compressor.kind", "top_k").unwrap();
        s.set("compressor.k", "5").unwrap();
        s.set("gamma", "0.25").unwrap();
        let text: String = s.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        assert_eq!(SimSettings::parse(&text).unwrap(), s);
        assert_eq!(s.to_pairs().len(), SimSettings::KEYS.len());
    }

    #[test]
    fn trace_csv_schema() {
        let p = Problem::random_mean(2, 3, 0).unwrap();
        let cfg = SimConfig::new(2, Stepsize::Constant(1.0), CompressorSpec::Identity, noiseless(1.0, 0.0), 0);
        let mut buf = Vec::new();
        run_gd(&p, &cfg).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "round,objective,grad_norm,wall_clock_s,uplink_bits,downlink_bits");
        assert_eq!(lines.count(), 3);
    }
}
