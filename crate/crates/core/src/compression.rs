//! Gradient compression operators with exact transmitted-bit accounting.
//!
//! Four operators are provided next to the identity:
//!
//! * **Rand-k**: keep a uniformly random k-subset of coordinates, scaled by
//!   `d/k`. The subset is derived from a shared [`SeedKey`], so no index bits
//!   are transmitted.
//! * **Top-k**: keep the k largest-magnitude coordinates and send their indices
//!   explicitly (`ceil(log2 d)` bits each). Ties go to the lowest index.
//! * **Natural**: stochastic rounding of every scalar to one of the two
//!   neighbouring powers of two; only sign and exponent are sent.
//! * **Rank-r**: one power-iteration step on the row-major reshape of the
//!   vector, sending factors `P` (rows x r) and `Q` (cols x r).
//!
//! The compression degree `omega_inf = len(x) / len(C(x))` is returned as an
//! exact rational.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{SeedKey, Stream};

pub const DEFAULT_BITS_PER_SCALAR: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompressionError {
    #[error("invalid vector: {0}")]
    InvalidVector(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("malformed message: {0}")]
    Decode(String),
}

type Result<T> = std::result::Result<T, CompressionError>;

fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CompressionError::Parameter(msg.into()))
}

fn decode_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CompressionError::Decode(msg.into()))
}

/// A gradient or model vector together with the width used to encode each
/// scalar on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector {
    values: Vec<f64>,
    bits_per_scalar: u32,
}

impl DenseVector {
    pub fn new(values: Vec<f64>, bits_per_scalar: u32) -> Result<Self> {
        if values.is_empty() {
            return Err(CompressionError::InvalidVector("dimension must be at least 1".into()));
        }
        if bits_per_scalar == 0 {
            return Err(CompressionError::InvalidVector("bits per scalar must be positive".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CompressionError::InvalidVector(format!(
                "non-finite scalar {} at index {i}",
                values[i]
            )));
        }
        Ok(Self { values, bits_per_scalar })
    }

    /// Vector encoded with 32-bit scalars.
    pub fn from_f32_width(values: Vec<f64>) -> Result<Self> {
        Self::new(values, DEFAULT_BITS_PER_SCALAR)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn bits_per_scalar(&self) -> u32 {
        self.bits_per_scalar
    }

    /// Uncompressed length in bits, `d * b`.
    pub fn len_bits(&self) -> u64 {
        self.values.len() as u64 * u64::from(self.bits_per_scalar)
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Operator tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Identity,
    RandK,
    TopK,
    Natural,
    RankR,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Identity => "identity",
            Kind::RandK => "rand_k",
            Kind::TopK => "top_k",
            Kind::Natural => "natural",
            Kind::RankR => "rank_r",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Kind::Identity => 0,
            Kind::RandK => 1,
            Kind::TopK => 2,
            Kind::Natural => 3,
            Kind::RankR => 4,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kind {
    type Err = CompressionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(Kind::Identity),
            "rand_k" => Ok(Kind::RandK),
            "top_k" => Ok(Kind::TopK),
            "natural" => Ok(Kind::Natural),
            "rank_r" => Ok(Kind::RankR),
            other => param_err(format!("unknown compressor kind `{other}`")),
        }
    }
}

/// Compressor configuration. `shape` for rank-r is `(rows, cols)`; when
/// absent the default near-square reshape from [`default_shape`] is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressorSpec {
    Identity,
    RandK { k: usize },
    TopK { k: usize },
    Natural,
    RankR { r: usize, shape: Option<(usize, usize)> },
}

impl CompressorSpec {
    /// Build from a kind tag and the optional sparsity/rank parameters.
    pub fn from_parts(kind: Kind, k: Option<usize>, r: Option<usize>) -> Result<Self> {
        let need = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| CompressionError::Parameter(format!("{kind} requires `{name}`")))
        };
        Ok(match kind {
            Kind::Identity => CompressorSpec::Identity,
            Kind::RandK => CompressorSpec::RandK { k: need(k, "k")? },
            Kind::TopK => CompressorSpec::TopK { k: need(k, "k")? },
            Kind::Natural => CompressorSpec::Natural,
            Kind::RankR => CompressorSpec::RankR { r: need(r, "r")?, shape: None },
        })
    }

    pub fn kind(&self) -> Kind {
        match self {
            CompressorSpec::Identity => Kind::Identity,
            CompressorSpec::RandK { .. } => Kind::RandK,
            CompressorSpec::TopK { .. } => Kind::TopK,
            CompressorSpec::Natural => Kind::Natural,
            CompressorSpec::RankR { .. } => Kind::RankR,
        }
    }

    /// Variance factor `zeta` with `E|C(x)|^2 <= zeta |x|^2`, for unbiased operators.
    pub fn zeta(&self, d: usize) -> Option<f64> {
        match *self {
            CompressorSpec::Identity => Some(1.0),
            CompressorSpec::RandK { k } => Some(d as f64 / k as f64),
            CompressorSpec::Natural => Some(9.0 / 8.0),
            _ => None,
        }
    }

    /// Contraction factor `delta` with `E|C(x) - x|^2 <= (1 - 1/delta) |x|^2`,
    /// for the deterministic biased operators.
    pub fn delta(&self, d: usize) -> Option<f64> {
        match *self {
            CompressorSpec::Identity => Some(1.0),
            CompressorSpec::TopK { k } => Some(d as f64 / k as f64),
            _ => None,
        }
    }

    pub fn is_unbiased(&self) -> bool {
        matches!(self, CompressorSpec::Identity | CompressorSpec::RandK { .. } | CompressorSpec::Natural)
    }

    /// Check the parameters against dimension `d` and return the resolved
    /// rank-r shape, if any.
    pub fn validate(&self, d: usize) -> Result<Option<(usize, usize)>> {
        if d == 0 {
            return param_err("dimension must be at least 1");
        }
        match *self {
            CompressorSpec::RandK { k } | CompressorSpec::TopK { k } => {
                if k == 0 || k > d {
                    return param_err(format!("k = {k} outside [1, {d}]"));
                }
                Ok(None)
            }
            CompressorSpec::RankR { r, shape } => {
                let (rows, cols) = shape.unwrap_or_else(|| default_shape(d));
                check_rank_shape(d, r, rows, cols)?;
                Ok(Some((rows, cols)))
            }
            CompressorSpec::Identity | CompressorSpec::Natural => Ok(None),
        }
    }

    /// Closed-form transmitted bits for a `d`-vector with `b`-bit scalars.
    pub fn bits(&self, d: usize, b: u32) -> Result<u64> {
        let shape = self.validate(d)?;
        if b == 0 {
            return param_err("bits per scalar must be positive");
        }
        let (d64, b64) = (d as u64, u64::from(b));
        Ok(match *self {
            CompressorSpec::Identity => d64 * b64,
            CompressorSpec::RandK { k } => k as u64 * b64,
            CompressorSpec::TopK { k } => k as u64 * (b64 + index_bits(d)),
            CompressorSpec::Natural => d64 * u64::from(natural_bits_per_scalar(b)?),
            CompressorSpec::RankR { r, .. } => {
                let (rows, cols) = shape.expect("validated rank-r shape");
                r as u64 * (rows + cols) as u64 * b64
            }
        })
    }

    /// Degree of compression `len(x) / len(C(x)) = d*b / bits`, exact.
    pub fn omega_inf(&self, d: usize, b: u32) -> Result<Ratio<u64>> {
        let bits = self.bits(d, b)?;
        Ok(Ratio::new(d as u64 * u64::from(b), bits))
    }

    /// Compress `x`. `key` drives all randomness (Rand-k subset, natural
    /// rounding, rank-r test matrix) and is shared with the receiver.
    pub fn compress(&self, x: &DenseVector, key: SeedKey) -> Result<CompressedMessage> {
        match *self {
            CompressorSpec::Identity => Ok(identity_compress(x)),
            CompressorSpec::RandK { k } => rand_k_compress(x, k, key),
            CompressorSpec::TopK { k } => top_k_compress(x, k),
            CompressorSpec::Natural => natural_compress(x, key),
            CompressorSpec::RankR { r, shape } => {
                let (rows, cols) = shape.unwrap_or_else(|| default_shape(x.dim()));
                rank_r_compress(x, r, rows, cols, key)
            }
        }
    }
}

impl fmt::Display for CompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorSpec::Identity => write!(f, "identity"),
            CompressorSpec::RandK { k } => write!(f, "rand_k(k={k})"),
            CompressorSpec::TopK { k } => write!(f, "top_k(k={k})"),
            CompressorSpec::Natural => write!(f, "natural"),
            CompressorSpec::RankR { r, shape: Some((n, m)) } => write!(f, "rank_r(r={r},{n}x{m})"),
            CompressorSpec::RankR { r, shape: None } => write!(f, "rank_r(r={r})"),
        }
    }
}

/// `ceil(log2 d)`; zero for `d = 1`.
pub fn index_bits(d: usize) -> u64 {
    if d <= 1 {
        0
    } else {
        u64::from(usize::BITS - (d - 1).leading_zeros())
    }
}

/// Sign bit plus exponent field of the IEEE format of width `b`.
pub fn natural_bits_per_scalar(b: u32) -> Result<u32> {
    match b {
        16 => Ok(1 + 5),
        32 => Ok(1 + 8),
        64 => Ok(1 + 11),
        other => param_err(format!("natural compression needs an IEEE width (16, 32, 64), got {other}")),
    }
}

/// Near-square row-major reshape: `rows = ceil(sqrt d)`, `cols = ceil(d / rows)`.
pub fn default_shape(d: usize) -> (usize, usize) {
    let mut rows = (d as f64).sqrt().ceil() as usize;
    // guard against sqrt rounding for large d
    while rows > 1 && (rows - 1) * (rows - 1) >= d {
        rows -= 1;
    }
    while rows * rows < d {
        rows += 1;
    }
    let rows = rows.max(1);
    (rows, d.div_ceil(rows))
}

fn check_rank_shape(d: usize, r: usize, rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 || rows.checked_mul(cols).is_none_or(|nm| nm < d) {
        return param_err(format!("shape {rows}x{cols} cannot hold {d} entries"));
    }
    if r == 0 || r > rows.min(cols) {
        return param_err(format!("rank r = {r} outside [1, {}]", rows.min(cols)));
    }
    Ok(())
}

/// Operator-specific content of a compressed message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Identity { values: Vec<f64> },
    /// `values[j]` is the scaled coordinate at the j-th index of
    /// [`rand_k_indices`]`(key, d, k)`.
    RandK { k: usize, key: SeedKey, values: Vec<f64> },
    /// Indices ascending, zero-based.
    TopK { indices: Vec<u32>, values: Vec<f64> },
    Natural { values: Vec<f64> },
    /// Row-major factors, `p` is rows x r and `q` is cols x r.
    RankR { rows: usize, cols: usize, r: usize, p: Vec<f64>, q: Vec<f64> },
}

/// A compressed vector plus the exact number of bits its transmission costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedMessage {
    d: usize,
    bits_per_scalar: u32,
    bits: u64,
    payload: Payload,
}

impl CompressedMessage {
    pub fn kind(&self) -> Kind {
        match self.payload {
            Payload::Identity { .. } => Kind::Identity,
            Payload::RandK { .. } => Kind::RandK,
            Payload::TopK { .. } => Kind::TopK,
            Payload::Natural { .. } => Kind::Natural,
            Payload::RankR { .. } => Kind::RankR,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn bits_per_scalar(&self) -> u32 {
        self.bits_per_scalar
    }

    /// Transmitted bits under the operator's accounting rule.
    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    /// The shared-randomness key; present exactly for Rand-k messages.
    pub fn seed(&self) -> Option<SeedKey> {
        match self.payload {
            Payload::RandK { key, .. } => Some(key),
            _ => None,
        }
    }

    /// Achieved `d*b / bits`.
    pub fn omega_inf(&self) -> Ratio<u64> {
        Ratio::new(self.d as u64 * u64::from(self.bits_per_scalar), self.bits)
    }

    /// Serialize to a canonical little-endian byte layout. This is a storage
    /// format for the message object; its length is unrelated to [`bits`](Self::bits).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u8(self.kind().tag());
        w.u64(self.d as u64);
        w.u32(self.bits_per_scalar);
        w.u64(self.bits);
        match &self.payload {
            Payload::Identity { values } | Payload::Natural { values } => w.f64s(values),
            Payload::RandK { k, key, values } => {
                w.u64(*k as u64);
                w.u64(key.seed);
                w.u64(key.round);
                w.u64(key.worker);
                w.f64s(values);
            }
            Payload::TopK { indices, values } => {
                w.u64(indices.len() as u64);
                for &i in indices {
                    w.u32(i);
                }
                w.f64s(values);
            }
            Payload::RankR { rows, cols, r, p, q } => {
                w.u64(*rows as u64);
                w.u64(*cols as u64);
                w.u64(*r as u64);
                w.f64s(p);
                w.f64s(q);
            }
        }
        w.buf
    }

    /// Parse bytes produced by [`to_bytes`](Self::to_bytes), checking every
    /// structural invariant of the payload.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return decode_err("bad magic");
        }
        let tag = r.u8()?;
        let d = r.usize()?;
        let bits_per_scalar = r.u32()?;
        let bits = r.u64()?;
        let payload = match tag {
            0 => Payload::Identity { values: r.f64s()? },
            1 => {
                let k = r.usize()?;
                let key = SeedKey::new(r.u64()?, r.u64()?, r.u64()?);
                Payload::RandK { k, key, values: r.f64s()? }
            }
            2 => {
                let n = r.usize()?;
                let mut indices = Vec::with_capacity(n.min(bytes.len() / 4));
                for _ in 0..n {
                    indices.push(r.u32()?);
                }
                Payload::TopK { indices, values: r.f64s()? }
            }
            3 => Payload::Natural { values: r.f64s()? },
            4 => {
                let rows = r.usize()?;
                let cols = r.usize()?;
                let rank = r.usize()?;
                Payload::RankR { rows, cols, r: rank, p: r.f64s()?, q: r.f64s()? }
            }
            t => return decode_err(format!("unknown kind tag {t}")),
        };
        if r.pos != bytes.len() {
            return decode_err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let msg = CompressedMessage { d, bits_per_scalar, bits, payload };
        msg.check()?;
        Ok(msg)
    }

    fn check(&self) -> Result<()> {
        let d = self.d;
        if d == 0 || self.bits_per_scalar == 0 {
            return decode_err("zero dimension or width");
        }
        let spec = match &self.payload {
            Payload::Identity { values } | Payload::Natural { values } => {
                if values.len() != d {
                    return decode_err(format!("expected {d} values, got {}", values.len()));
                }
                if self.kind() == Kind::Identity {
                    CompressorSpec::Identity
                } else {
                    CompressorSpec::Natural
                }
            }
            Payload::RandK { k, values, .. } => {
                if values.len() != *k {
                    return decode_err(format!("rand_k: expected {k} values, got {}", values.len()));
                }
                CompressorSpec::RandK { k: *k }
            }
            Payload::TopK { indices, values } => {
                if indices.len() != values.len() {
                    return decode_err("top_k: index and value counts differ");
                }
                if indices.windows(2).any(|w| w[0] >= w[1]) {
                    return decode_err("top_k: indices not strictly ascending");
                }
                if indices.last().is_some_and(|&i| i as usize >= d) {
                    return decode_err("top_k: index out of range");
                }
                CompressorSpec::TopK { k: indices.len() }
            }
            Payload::RankR { rows, cols, r, p, q } => {
                if p.len() != rows * r || q.len() != cols * r {
                    return decode_err("rank_r: factor sizes do not match shape");
                }
                CompressorSpec::RankR { r: *r, shape: Some((*rows, *cols)) }
            }
        };
        let expected = spec
            .bits(d, self.bits_per_scalar)
            .map_err(|e| CompressionError::Decode(e.to_string()))?;
        if expected != self.bits {
            return decode_err(format!("bit count {} does not match {expected}", self.bits));
        }
        Ok(())
    }
}

const MAGIC: &[u8] = b"CCM1";

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => decode_err("truncated message"),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CompressionError::Decode("length overflow".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CompressionError::Decode("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn identity_compress(x: &DenseVector) -> CompressedMessage {
    CompressedMessage {
        d: x.dim(),
        bits_per_scalar: x.bits_per_scalar,
        bits: x.len_bits(),
        payload: Payload::Identity { values: x.values.clone() },
    }
}

/// The k-subset of `0..d` that sender and receiver both derive from `key`.
/// Uniform over all `C(d, k)` subsets.
pub fn rand_k_indices(key: SeedKey, d: usize, k: usize) -> Vec<usize> {
    let mut rng = key.rng(Stream::RandKIndices);
    rand::seq::index::sample(&mut rng, d, k).into_vec()
}

/// Dense `C(x) = (d/k) * sum_{i in S} x_i e_i` for an explicit support `S`.
pub fn rand_k_sparsify(x: &[f64], support: &[usize]) -> Vec<f64> {
    let scale = x.len() as f64 / support.len() as f64;
    let mut out = vec![0.0; x.len()];
    for &i in support {
        out[i] = x[i] * scale;
    }
    out
}

pub fn rand_k_compress(x: &DenseVector, k: usize, key: SeedKey) -> Result<CompressedMessage> {
    let d = x.dim();
    CompressorSpec::RandK { k }.validate(d)?;
    let scale = d as f64 / k as f64;
    let values = rand_k_indices(key, d, k).into_iter().map(|i| x.values[i] * scale).collect();
    Ok(CompressedMessage {
        d,
        bits_per_scalar: x.bits_per_scalar,
        bits: k as u64 * u64::from(x.bits_per_scalar),
        payload: Payload::RandK { k, key, values },
    })
}

/// Indices of the k largest magnitudes, lowest index first among ties,
/// returned in ascending index order.
pub fn top_k_indices(x: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    let by_rank = |&a: &usize, &b: &usize| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b));
    if k < order.len() {
        order.select_nth_unstable_by(k, by_rank);
        order.truncate(k);
    }
    order.sort_unstable();
    order
}

pub fn top_k_compress(x: &DenseVector, k: usize) -> Result<CompressedMessage> {
    let d = x.dim();
    let spec = CompressorSpec::TopK { k };
    let bits = spec.bits(d, x.bits_per_scalar)?;
    let idx = top_k_indices(&x.values, k);
    let values = idx.iter().map(|&i| x.values[i]).collect();
    Ok(CompressedMessage {
        d,
        bits_per_scalar: x.bits_per_scalar,
        bits,
        payload: Payload::TopK { indices: idx.into_iter().map(|i| i as u32).collect(), values },
    })
}

/// Neighbouring powers of two of a positive finite magnitude `a` and the
/// probability of rounding down:
/// `(low, high, p)` with `low = 2^floor(log2 a)`, `high = 2^ceil(log2 a)` and
/// `p = (high - a) / low`. For exact powers of two `low == high` and `p == 0`.
pub fn natural_bracket(a: f64) -> Result<(f64, f64, f64)> {
    debug_assert!(a > 0.0 && a.is_finite());
    let low = floor_pow2(a);
    if low == a {
        return Ok((a, a, 0.0));
    }
    let high = 2.0 * low;
    if !high.is_finite() {
        return param_err(format!("{a} has no finite power of two above it"));
    }
    Ok((low, high, (high - a) / low))
}

fn floor_pow2(a: f64) -> f64 {
    const EXP_MASK: u64 = 0x7ff0_0000_0000_0000;
    if a >= f64::MIN_POSITIVE {
        f64::from_bits(a.to_bits() & EXP_MASK)
    } else {
        // subnormal: lift into the normal range, where scaling by 2^64 is exact
        let lifted = a * 18_446_744_073_709_551_616.0;
        f64::from_bits(lifted.to_bits() & EXP_MASK) / 18_446_744_073_709_551_616.0
    }
}

/// Round one scalar given a uniform draw `u` in `[0, 1)`.
pub fn natural_round(x: f64, u: f64) -> Result<f64> {
    if x == 0.0 {
        return Ok(0.0);
    }
    let (low, high, p) = natural_bracket(x.abs())?;
    let mag = if low == high || u < p { low } else { high };
    Ok(mag.copysign(x))
}

pub fn natural_compress(x: &DenseVector, key: SeedKey) -> Result<CompressedMessage> {
    let per_scalar = natural_bits_per_scalar(x.bits_per_scalar)?;
    let mut rng = key.rng(Stream::Natural);
    let values = x
        .values
        .iter()
        .map(|&v| {
            let u: f64 = rng.random();
            natural_round(v, u)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedMessage {
        d: x.dim(),
        bits_per_scalar: x.bits_per_scalar,
        bits: x.dim() as u64 * u64::from(per_scalar),
        payload: Payload::Natural { values },
    })
}

/// One power-iteration step on the `rows x cols` row-major, zero-padded
/// reshape `M` of `x`: `P = orth(M G)` for a Gaussian `G` (cols x r) drawn
/// from `key`, then `Q = M^T P`.
pub fn rank_r_compress(
    x: &DenseVector,
    r: usize,
    rows: usize,
    cols: usize,
    key: SeedKey,
) -> Result<CompressedMessage> {
    let d = x.dim();
    check_rank_shape(d, r, rows, cols)?;
    let m = |i: usize, j: usize| x.values.get(i * cols + j).copied().unwrap_or(0.0);

    let mut rng = key.rng(Stream::RankRTest);
    let g: Vec<f64> = (0..cols * r).map(|_| rng.sample(StandardNormal)).collect();

    let mut p = vec![0.0; rows * r];
    for i in 0..rows {
        for j in 0..cols {
            let mij = m(i, j);
            if mij != 0.0 {
                for c in 0..r {
                    p[i * r + c] += mij * g[j * r + c];
                }
            }
        }
    }
    orthonormalize_columns(&mut p, rows, r);

    let mut q = vec![0.0; cols * r];
    for i in 0..rows {
        for j in 0..cols {
            let mij = m(i, j);
            if mij != 0.0 {
                for c in 0..r {
                    q[j * r + c] += mij * p[i * r + c];
                }
            }
        }
    }
    Ok(CompressedMessage {
        d,
        bits_per_scalar: x.bits_per_scalar,
        bits: r as u64 * (rows + cols) as u64 * u64::from(x.bits_per_scalar),
        payload: Payload::RankR { rows, cols, r, p, q },
    })
}

/// Modified Gram-Schmidt on the columns of a row-major `rows x r` matrix.
/// Columns that vanish after projection are set to zero.
fn orthonormalize_columns(a: &mut [f64], rows: usize, r: usize) {
    for c in 0..r {
        let before: f64 = (0..rows).map(|i| a[i * r + c].powi(2)).sum::<f64>().sqrt();
        for prev in 0..c {
            let dot: f64 = (0..rows).map(|i| a[i * r + c] * a[i * r + prev]).sum();
            for i in 0..rows {
                a[i * r + c] -= dot * a[i * r + prev];
            }
        }
        let norm: f64 = (0..rows).map(|i| a[i * r + c].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || norm <= 64.0 * f64::EPSILON * before {
            for i in 0..rows {
                a[i * r + c] = 0.0;
            }
        } else {
            for i in 0..rows {
                a[i * r + c] /= norm;
            }
        }
    }
}

/// Receiver side: reconstruct `C(x)` in `R^d`.
pub fn decompress(msg: &CompressedMessage) -> Result<DenseVector> {
    msg.check()?;
    let d = msg.d;
    let values = match &msg.payload {
        Payload::Identity { values } | Payload::Natural { values } => values.clone(),
        Payload::RandK { k, key, values } => {
            let mut out = vec![0.0; d];
            for (i, v) in rand_k_indices(*key, d, *k).into_iter().zip(values) {
                out[i] = *v;
            }
            out
        }
        Payload::TopK { indices, values } => {
            let mut out = vec![0.0; d];
            for (&i, &v) in indices.iter().zip(values) {
                out[i as usize] = v;
            }
            out
        }
        Payload::RankR { cols, r, p, q, .. } => (0..d)
            .map(|flat| {
                let (i, j) = (flat / cols, flat % cols);
                (0..*r).map(|c| p[i * r + c] * q[j * r + c]).sum()
            })
            .collect(),
    };
    DenseVector::new(values, msg.bits_per_scalar).map_err(|e| CompressionError::Decode(e.to_string()))
}
