//! Cluster-scaled ternary and 4-bit weight quantization.
//!
//! A layer's filters (output channels) are split into consecutive clusters of
//! `N`. Each filter first gets its own threshold from a magnitude-sorted
//! search ([`select_threshold`]); the cluster then picks one shared scale from
//! the RMS of its top-`t` filter scales ([`ternarize_cluster`]). Scales are
//! finally stored as 8-bit mantissas with one power-of-two exponent per layer.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixed_point::{covering_exponent, pow2, MANTISSA_MAX};
use crate::model_io::{pack_ternary, unpack_ternary};
use crate::par;
use crate::tensor::Tensor;

/// Outcome of the per-filter threshold search.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    /// Retained fraction `support_size / n`.
    pub tau_star: f64,
    pub support_size: usize,
    pub alpha: f64,
    /// Squared l2 residual `sum (w - alpha * code)^2`.
    pub error: f64,
    pub codes: Vec<i8>,
}

fn check_finite(w: &[f32]) -> Result<()> {
    match w.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn sign(v: f32) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Indices ordered by decreasing magnitude, ties by increasing index.
fn magnitude_order(w: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
    idx
}

fn residual(w: &[f32], alpha: f64, codes: &[i8]) -> f64 {
    w.iter()
        .zip(codes)
        .map(|(&x, &c)| {
            let r = x as f64 - alpha * c as f64;
            r * r
        })
        .sum()
}

/// Per-filter threshold search.
///
/// Candidate supports are the top-`t` magnitudes for `t = 1..=n`, each scored
/// with `alpha_t = sqrt(mean of squares over the support)` and codes equal to
/// the sign on the support, zero elsewhere. The empty support (`alpha = 0`,
/// all codes zero) is the fallback and also covers all-zero filters; supports
/// whose RMS is zero collapse onto it. Equal errors resolve to the larger
/// support.
pub fn select_threshold(w: &[f32]) -> Result<ThresholdResult> {
    if w.is_empty() {
        return Err(Error::Empty("filter"));
    }
    check_finite(w)?;
    let n = w.len();
    let order = magnitude_order(w);
    let total: f64 = w.iter().map(|&x| (x as f64) * (x as f64)).sum();

    let (mut best_t, mut best_alpha, mut best_err) = (0usize, 0.0f64, total);
    let (mut s1, mut s2, mut nonzero) = (0.0f64, 0.0f64, 0usize);
    for (k, &i) in order.iter().enumerate() {
        let m = w[i].abs() as f64;
        s1 += m;
        s2 += m * m;
        if m > 0.0 {
            nonzero += 1;
        }
        let t = k + 1;
        let alpha = (s2 / t as f64).sqrt();
        if alpha == 0.0 {
            continue;
        }
        // sum over support of (|w| - alpha)^2 for nonzero entries, plus w^2 off support
        let err = (total - 2.0 * alpha * s1 + nonzero as f64 * alpha * alpha).max(0.0);
        if err <= best_err {
            best_t = t;
            best_alpha = alpha;
            best_err = err;
        }
    }

    let mut codes = vec![0i8; n];
    for &i in &order[..best_t] {
        codes[i] = sign(w[i]);
    }
    let error = residual(w, best_alpha, &codes);
    Ok(ThresholdResult { tau_star: best_t as f64 / n as f64, support_size: best_t, alpha: best_alpha, error, codes })
}

/// An 8-bit scale: `mantissa * 2^exponent`, mantissa in `[0, 127]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScaleQ {
    pub mantissa: u8,
    pub exponent: i32,
}

impl ScaleQ {
    pub fn value(self) -> f64 {
        self.mantissa as f64 * pow2(self.exponent)
    }
}

/// How [`quantize_scale`] picks the exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExponentPolicy {
    /// Smallest exponent whose mantissa range covers this layer maximum.
    /// The maximum then lands on a mantissa in `[64, 127]`.
    FromMax(f64),
    Fixed(i32),
}

impl ExponentPolicy {
    pub fn exponent(self) -> i32 {
        match self {
            ExponentPolicy::FromMax(m) => covering_exponent(m, MANTISSA_MAX),
            ExponentPolicy::Fixed(e) => e,
        }
    }
}

/// Round-to-nearest-even onto the 8-bit grid, clamped to `[0, 127]`.
pub fn quantize_scale(alpha: f64, policy: ExponentPolicy) -> Result<ScaleQ> {
    if !alpha.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    if alpha < 0.0 {
        return Err(Error::Config(format!("scale must be non-negative, got {alpha}")));
    }
    if let ExponentPolicy::FromMax(m) = policy {
        if !m.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
    }
    let exponent = policy.exponent();
    let m = (alpha * pow2(-exponent)).round_ties_even().clamp(0.0, MANTISSA_MAX as f64);
    Ok(ScaleQ { mantissa: m as u8, exponent })
}

/// Weight precision for non-first conv/fc layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WeightBits {
    Ternary,
    Int4,
}

impl WeightBits {
    pub fn bits(self) -> u8 {
        match self {
            WeightBits::Ternary => 2,
            WeightBits::Int4 => 4,
        }
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            2 => Ok(WeightBits::Ternary),
            4 => Ok(WeightBits::Int4),
            b => Err(Error::Config(format!("weight bits must be 2 or 4, got {b}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QuantConfig {
    /// Filters per cluster. The last cluster of a layer may be smaller.
    pub cluster_size: usize,
    pub weight_bits: WeightBits,
    /// Quantize fully connected layers like convolutions; when false they
    /// keep 8-bit weights.
    pub quantize_fc: bool,
}

impl QuantConfig {
    pub const FIRST_LAYER_BITS: u8 = 8;
    pub const SCALE_BITS: u8 = 8;

    pub fn new(cluster_size: usize, weight_bits: WeightBits) -> Result<Self> {
        if cluster_size == 0 {
            return Err(Error::Config("cluster size must be at least 1".into()));
        }
        Ok(Self { cluster_size, weight_bits, quantize_fc: false })
    }

    pub fn ternary(cluster_size: usize) -> Self {
        Self::new(cluster_size, WeightBits::Ternary).expect("cluster size >= 1")
    }

    pub fn with_fc(mut self, quantize_fc: bool) -> Self {
        self.quantize_fc = quantize_fc;
        self
    }
}

/// Consecutive output-channel clusters `[jN, (j+1)N)`, last one ragged.
pub fn cluster_ranges(filters: usize, cluster_size: usize) -> Vec<std::ops::Range<usize>> {
    let n = cluster_size.max(1);
    (0..filters.div_ceil(n)).map(|j| j * n..((j + 1) * n).min(filters)).collect()
}

/// One candidate of the cluster-level search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterCandidate {
    pub t: usize,
    pub alpha: f64,
    pub error: f64,
}

/// Exact-scale result of the cluster search, before scale quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSearch {
    /// Per-filter thresholds in filter order.
    pub filter_alphas: Vec<f64>,
    pub candidates: Vec<ClusterCandidate>,
    pub t_star: usize,
    pub alpha: f64,
    pub error: f64,
    /// Codes for all filters, filter-major.
    pub codes: Vec<i8>,
}

/// Threshold-rule codes: `sign(w)` where `|w| >= alpha`, else 0.
pub fn threshold_codes(w: &[f32], alpha: f64) -> Vec<i8> {
    w.iter().map(|&x| if alpha > 0.0 && (x.abs() as f64) >= alpha { sign(x) } else { 0 }).collect()
}

/// Cluster magnitudes in decreasing order with prefix sums, for O(log n)
/// evaluation of the threshold-rule residual.
struct SortedMagnitudes {
    desc: Vec<f64>,
    s1: Vec<f64>,
    total: f64,
}

impl SortedMagnitudes {
    fn new(filters: &[&[f32]]) -> Self {
        let mut desc: Vec<f64> = filters.iter().flat_map(|f| f.iter().map(|&x| x.abs() as f64)).collect();
        desc.sort_by(|a, b| b.total_cmp(a));
        let mut s1 = vec![0.0; desc.len() + 1];
        for (i, &m) in desc.iter().enumerate() {
            s1[i + 1] = s1[i] + m;
        }
        let total = desc.iter().map(|m| m * m).sum();
        Self { desc, s1, total }
    }

    fn error_at(&self, alpha: f64) -> f64 {
        if alpha <= 0.0 {
            return self.total;
        }
        let kept = self.desc.partition_point(|&m| m >= alpha);
        // kept: (m - a)^2 = m^2 - 2am + a^2; dropped: m^2
        (self.total - 2.0 * alpha * self.s1[kept] + kept as f64 * alpha * alpha).max(0.0)
    }
}

/// Cluster-level search over the sorted per-filter thresholds.
///
/// For `t = 1..=N` the candidate scale is the RMS of the `t` largest filter
/// thresholds (rounded to f32, the precision weights are stored in); every
/// weight is re-coded with the threshold rule against that scale and the
/// candidate with the smallest total squared residual wins, ties going to
/// larger `t`.
pub fn search_cluster(filters: &[&[f32]]) -> Result<ClusterSearch> {
    let first = filters.first().ok_or(Error::Empty("cluster"))?;
    let len = first.len();
    for f in filters {
        if f.len() != len {
            return Err(Error::FilterSizeMismatch { expected: len, got: f.len() });
        }
    }
    let filter_alphas = filters.iter().map(|f| select_threshold(f).map(|r| r.alpha)).collect::<Result<Vec<_>>>()?;
    let mut sorted = filter_alphas.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));

    let mags = SortedMagnitudes::new(filters);
    let mut candidates = Vec::with_capacity(sorted.len());
    let mut sq = 0.0f64;
    for (k, a) in sorted.iter().enumerate() {
        sq += a * a;
        let t = k + 1;
        let alpha = ((sq / t as f64).sqrt() as f32) as f64;
        candidates.push(ClusterCandidate { t, alpha, error: mags.error_at(alpha) });
    }
    let best = candidates
        .iter()
        .copied()
        .reduce(|best, c| if c.error <= best.error { c } else { best })
        .expect("non-empty cluster");

    let mut codes = Vec::with_capacity(len * filters.len());
    for f in filters {
        codes.extend(threshold_codes(f, best.alpha));
    }
    let error = filters.iter().zip(codes.chunks(len.max(1))).map(|(f, c)| residual(f, best.alpha, c)).sum();
    Ok(ClusterSearch { filter_alphas, candidates, t_star: best.t, alpha: best.alpha, error, codes })
}

/// A cluster of filters sharing one 8-bit scale, with packed ternary codes.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryCluster {
    pub filter_indices: Vec<usize>,
    pub filter_len: usize,
    /// Packed 2-bit codes, filter-major (see [`crate::model_io::pack_ternary`]).
    pub codes: Vec<u8>,
    pub alpha_q: ScaleQ,
    pub alpha_exact: f64,
    pub t_star: usize,
    /// Squared residual with the exact scale.
    pub error: f64,
}

impl TernaryCluster {
    pub fn len(&self) -> usize {
        self.filter_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filter_indices.is_empty()
    }

    pub fn unpacked_codes(&self) -> Result<Vec<i8>> {
        unpack_ternary(&self.codes, self.filter_len * self.len())
    }
}

/// Run the cluster search on `filters` and quantize the winning scale.
pub fn ternarize_cluster(filters: &[&[f32]], policy: ExponentPolicy) -> Result<TernaryCluster> {
    let s = search_cluster(filters)?;
    Ok(TernaryCluster {
        filter_indices: (0..filters.len()).collect(),
        filter_len: filters[0].len(),
        codes: pack_ternary(&s.codes)?,
        alpha_q: quantize_scale(s.alpha, policy)?,
        alpha_exact: s.alpha,
        t_star: s.t_star,
        error: s.error,
    })
}

fn filters_of(weights: &Tensor) -> Result<(usize, usize)> {
    match weights.shape.len() {
        2 | 4 => {}
        r => return Err(Error::Config(format!("weight tensor must be rank 2 or 4, got rank {r}"))),
    }
    let d = weights.shape[0];
    if d == 0 || weights.is_empty() {
        return Err(Error::Empty("weight tensor"));
    }
    Ok((d, weights.len() / d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TernaryLayer {
    pub shape: Vec<usize>,
    pub cluster_size: usize,
    pub exponent: i32,
    pub clusters: Vec<TernaryCluster>,
}

impl TernaryLayer {
    /// Total squared residual using the exact (pre-quantization) scales.
    pub fn error(&self) -> f64 {
        self.clusters.iter().map(|c| c.error).sum()
    }

    /// Codes for the whole tensor in weight order.
    pub fn codes(&self) -> Result<Vec<i8>> {
        let mut out = Vec::new();
        for c in &self.clusters {
            out.extend(c.unpacked_codes()?);
        }
        Ok(out)
    }

    pub fn scale_mantissas(&self) -> Vec<u8> {
        self.clusters.iter().map(|c| c.alpha_q.mantissa).collect()
    }

    fn expand(&self, scale: impl Fn(&TernaryCluster) -> f64) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.shape.iter().product());
        for c in &self.clusters {
            let a = scale(c);
            data.extend(c.unpacked_codes()?.iter().map(|&k| (a * k as f64) as f32));
        }
        Tensor::new(self.shape.clone(), data)
    }

    /// `alpha_hat * code` elementwise.
    pub fn dequantize(&self) -> Result<Tensor> {
        self.expand(|c| c.alpha_q.value())
    }

    pub fn dequantize_exact(&self) -> Result<Tensor> {
        self.expand(|c| c.alpha_exact)
    }

    /// Rebuild from stored codes and scale mantissas.
    pub fn from_parts(
        shape: Vec<usize>,
        cluster_size: usize,
        exponent: i32,
        codes: &[i8],
        mantissas: &[u8],
    ) -> Result<Self> {
        let d = shape[0];
        let n = shape.iter().skip(1).product::<usize>();
        let ranges = cluster_ranges(d, cluster_size);
        if ranges.len() != mantissas.len() || codes.len() != d * n {
            return Err(Error::Config(format!(
                "{} codes / {} scales do not fit shape {:?} with cluster size {}",
                codes.len(),
                mantissas.len(),
                shape,
                cluster_size
            )));
        }
        let clusters = ranges
            .into_iter()
            .zip(mantissas)
            .map(|(r, &m)| {
                let alpha_q = ScaleQ { mantissa: m, exponent };
                let slice = &codes[r.start * n..r.end * n];
                Ok(TernaryCluster {
                    filter_indices: r.collect(),
                    filter_len: n,
                    codes: pack_ternary(slice)?,
                    alpha_q,
                    alpha_exact: alpha_q.value(),
                    t_star: 0,
                    error: f64::NAN,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { shape, cluster_size, exponent, clusters })
    }
}

/// Quantize a conv (`[d, c_in, K, K]`) or fc (`[d, c_in]`) weight tensor into
/// ternary clusters of consecutive output channels. Clusters are searched
/// independently (in parallel when enabled); the scale exponent is shared by
/// the whole layer.
pub fn quantize_layer(weights: &Tensor, config: &QuantConfig) -> Result<TernaryLayer> {
    check_finite(&weights.data)?;
    let (d, n) = filters_of(weights)?;
    let ranges = cluster_ranges(d, config.cluster_size);
    let searches = par::map_slice(&ranges, |r| {
        let filters: Vec<&[f32]> = r.clone().map(|f| &weights.data[f * n..(f + 1) * n]).collect();
        search_cluster(&filters)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let max_alpha = searches.iter().fold(0.0f64, |m, s| m.max(s.alpha));
    let policy = ExponentPolicy::Fixed(ExponentPolicy::FromMax(max_alpha).exponent());
    let clusters = ranges
        .into_iter()
        .zip(searches)
        .map(|(r, s)| {
            Ok(TernaryCluster {
                filter_indices: r.collect(),
                filter_len: n,
                codes: pack_ternary(&s.codes)?,
                alpha_q: quantize_scale(s.alpha, policy)?,
                alpha_exact: s.alpha,
                t_star: s.t_star,
                error: s.error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TernaryLayer {
        shape: weights.shape.clone(),
        cluster_size: config.cluster_size,
        exponent: policy.exponent(),
        clusters,
    })
}

pub const INT4_MAX: i8 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Int4Cluster {
    pub filter_indices: Vec<usize>,
    /// Codes in `[-7, 7]`, filter-major.
    pub codes: Vec<i8>,
    pub scale: ScaleQ,
    pub scale_exact: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Int4Layer {
    pub shape: Vec<usize>,
    pub cluster_size: usize,
    pub exponent: i32,
    pub clusters: Vec<Int4Cluster>,
}

impl Int4Layer {
    pub fn codes(&self) -> Vec<i8> {
        self.clusters.iter().flat_map(|c| c.codes.iter().copied()).collect()
    }

    pub fn scale_mantissas(&self) -> Vec<u8> {
        self.clusters.iter().map(|c| c.scale.mantissa).collect()
    }

    fn expand(&self, scale: impl Fn(&Int4Cluster) -> f64) -> Tensor {
        let data = self
            .clusters
            .iter()
            .flat_map(|c| {
                let s = scale(c);
                c.codes.iter().map(move |&k| (s * k as f64) as f32)
            })
            .collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn dequantize(&self) -> Tensor {
        self.expand(|c| c.scale.value())
    }

    pub fn dequantize_exact(&self) -> Tensor {
        self.expand(|c| c.scale_exact)
    }

    pub fn error(&self, weights: &Tensor) -> f64 {
        let deq = self.dequantize_exact();
        weights.data.iter().zip(&deq.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum()
    }

    pub fn from_parts(
        shape: Vec<usize>,
        cluster_size: usize,
        exponent: i32,
        codes: &[i8],
        mantissas: &[u8],
    ) -> Result<Self> {
        let d = shape[0];
        let n = shape.iter().skip(1).product::<usize>();
        let ranges = cluster_ranges(d, cluster_size);
        if ranges.len() != mantissas.len() || codes.len() != d * n {
            return Err(Error::Config(format!("int4 codes/scales do not fit shape {shape:?}")));
        }
        if let Some(i) = codes.iter().position(|c| c.abs() > INT4_MAX) {
            return Err(Error::Config(format!("int4 code {} at index {i} outside [-7, 7]", codes[i])));
        }
        let clusters = ranges
            .into_iter()
            .zip(mantissas)
            .map(|(r, &m)| {
                let scale = ScaleQ { mantissa: m, exponent };
                Int4Cluster {
                    codes: codes[r.start * n..r.end * n].to_vec(),
                    filter_indices: r.collect(),
                    scale,
                    scale_exact: scale.value(),
                }
            })
            .collect();
        Ok(Self { shape, cluster_size, exponent, clusters })
    }
}

/// Symmetric linear 4-bit quantization: per cluster `s = max|w| / 7`, codes
/// `round(w / s)` clamped to `[-7, 7]`; `s` is then stored as an 8-bit scale
/// with a layer-shared exponent.
pub fn quantize_layer_int4(weights: &Tensor, config: &QuantConfig) -> Result<Int4Layer> {
    check_finite(&weights.data)?;
    let (d, n) = filters_of(weights)?;
    let ranges = cluster_ranges(d, config.cluster_size);
    let raw: Vec<(f64, Vec<i8>)> = par::map_slice(&ranges, |r| {
        let w = &weights.data[r.start * n..r.end * n];
        let max = w.iter().fold(0.0f64, |m, &x| m.max(x.abs() as f64));
        let s = max / INT4_MAX as f64;
        let codes = if s == 0.0 {
            vec![0; w.len()]
        } else {
            w.iter()
                .map(|&x| (x as f64 / s).round_ties_even().clamp(-(INT4_MAX as f64), INT4_MAX as f64) as i8)
                .collect()
        };
        (s, codes)
    });
    let max_scale = raw.iter().fold(0.0f64, |m, (s, _)| m.max(*s));
    let policy = ExponentPolicy::Fixed(ExponentPolicy::FromMax(max_scale).exponent());
    let clusters = ranges
        .into_iter()
        .zip(raw)
        .map(|(r, (s, codes))| {
            Ok(Int4Cluster { filter_indices: r.collect(), codes, scale: quantize_scale(s, policy)?, scale_exact: s })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Int4Layer {
        shape: weights.shape.clone(),
        cluster_size: config.cluster_size,
        exponent: policy.exponent(),
        clusters,
    })
}

/// Plain 8-bit fixed point weights (used for the first convolution).
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Weights {
    pub shape: Vec<usize>,
    pub mantissas: Vec<i8>,
    pub exponent: i32,
}

impl Int8Weights {
    pub fn dequantize(&self) -> Tensor {
        let step = pow2(self.exponent);
        Tensor { shape: self.shape.clone(), data: self.mantissas.iter().map(|&m| (m as f64 * step) as f32).collect() }
    }
}

/// Per-tensor exponent covering `max|w|` with mantissas in `[-127, 127]`.
pub fn quantize_weights_int8(weights: &Tensor) -> Result<Int8Weights> {
    check_finite(&weights.data)?;
    let exponent = covering_exponent(weights.max_abs() as f64, MANTISSA_MAX);
    let mantissas = weights.data.iter().map(|&x| crate::fixed_point::quantize_value(x as f64, exponent)).collect();
    Ok(Int8Weights { shape: weights.shape.clone(), mantissas, exponent })
}
