//! 8-bit dynamic fixed point: `value = mantissa * 2^exponent`.
//!
//! Rounding is fixed per operation so integer paths can be checked bit-exactly:
//! quantization from floats rounds to nearest, ties to even; right shifts in
//! [`requantize`] round half away from zero. Mantissas are signed 8-bit.

use std::collections::BTreeMap;

use crate::engine::{Mode, Plan};
use crate::error::{Error, Result};
use crate::model_io::{LayerKind, Model};
use crate::par;
use crate::tensor::Tensor;

pub const MANTISSA_MIN: i32 = -128;
pub const MANTISSA_MAX: i32 = 127;
/// Exponent used when a tensor never takes a non-zero value.
pub const DEFAULT_EXPONENT: i32 = -7;

/// Exact `2^e` as f64 for the exponent range used here.
pub fn pow2(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        f64::from_bits(((1023 + e) as u64) << 52)
    } else {
        2f64.powi(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPointFormat {
    pub exponent: i32,
}

impl FixedPointFormat {
    pub const fn new(exponent: i32) -> Self {
        Self { exponent }
    }

    /// Smallest exponent `e` with `max_abs <= limit * 2^e`; [`DEFAULT_EXPONENT`]
    /// when `max_abs` is zero.
    pub fn covering(max_abs: f64, limit: i32) -> Self {
        Self::new(covering_exponent(max_abs, limit))
    }

    pub fn step(self) -> f64 {
        pow2(self.exponent)
    }

    /// Largest representable magnitude on the positive side.
    pub fn max_value(self) -> f64 {
        MANTISSA_MAX as f64 * self.step()
    }

    pub fn quantize(self, x: f32) -> i8 {
        quantize_value(x as f64, self.exponent)
    }

    pub fn dequantize(self, m: i8) -> f32 {
        (m as f64 * self.step()) as f32
    }

    /// True when `x` lies inside the representable range (no saturation).
    pub fn in_range(self, x: f64) -> bool {
        x >= MANTISSA_MIN as f64 * self.step() && x <= self.max_value()
    }
}

/// Smallest `e` with `max_abs <= limit * 2^e`.
pub fn covering_exponent(max_abs: f64, limit: i32) -> i32 {
    if max_abs <= 0.0 || !max_abs.is_finite() {
        return DEFAULT_EXPONENT;
    }
    let limit = limit as f64;
    let mut e = (max_abs / limit).log2().ceil() as i32;
    while max_abs > limit * pow2(e) {
        e += 1;
    }
    while max_abs <= limit * pow2(e - 1) {
        e -= 1;
    }
    e
}

/// Round-to-nearest-even of `x / 2^exponent`, saturated to the i8 range.
pub fn quantize_value(x: f64, exponent: i32) -> i8 {
    let v = (x * pow2(-exponent)).round_ties_even();
    v.clamp(MANTISSA_MIN as f64, MANTISSA_MAX as f64) as i8
}

/// An 8-bit tensor with one power-of-two scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub format: FixedPointFormat,
}

impl QTensor {
    pub fn dequantize(&self) -> Tensor {
        let step = self.format.step();
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&m| (m as f64 * step) as f32).collect() }
    }

    pub fn item_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }
}

pub fn quantize_tensor(x: &Tensor, format: FixedPointFormat) -> Result<QTensor> {
    if let Some(index) = x.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(QTensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| format.quantize(v)).collect(), format })
}

/// Shift that maps an accumulator at exponent `in + scale` onto `out`.
pub fn combined_shift(input: FixedPointFormat, scale_exponent: i32, output: FixedPointFormat) -> i32 {
    input.exponent + scale_exponent - output.exponent
}

/// `saturate(round_shift(acc * scale_mantissa, shift))`.
///
/// Positive `shift` multiplies by `2^shift`; negative divides, rounding half
/// away from zero. Total over all i32 inputs; computed in i128 so nothing
/// overflows before the final saturation.
pub fn requantize(acc: i32, scale_mantissa: i32, shift: i32) -> i8 {
    let p = acc as i128 * scale_mantissa as i128;
    let v = if p == 0 {
        0
    } else if shift >= 0 {
        if shift > 64 {
            p.signum() * (1i128 << 100)
        } else {
            p << shift
        }
    } else {
        let s = (-shift).min(126) as u32;
        let half = 1i128 << (s - 1);
        p.signum() * ((p.abs() + half) >> s)
    };
    v.clamp(MANTISSA_MIN as i128, MANTISSA_MAX as i128) as i8
}

/// Running max-abs statistics for one tensor.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CalibrationStats {
    pub max_abs: f64,
    pub sample_count: u64,
}

impl CalibrationStats {
    pub fn observe(&mut self, t: &Tensor) {
        self.max_abs = self.max_abs.max(t.max_abs() as f64);
        self.sample_count += t.batch() as u64;
    }

    /// Associative and commutative, so batch order never changes the result.
    pub fn merge(self, other: Self) -> Self {
        Self { max_abs: self.max_abs.max(other.max_abs), sample_count: self.sample_count + other.sample_count }
    }
}

/// Chooses a format from observed statistics.
pub trait CalibrationPolicy: Sync {
    fn format(&self, stats: &CalibrationStats) -> FixedPointFormat;
}

/// Smallest exponent whose signed range covers the observed max-abs.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxAbs;

impl CalibrationPolicy for MaxAbs {
    fn format(&self, stats: &CalibrationStats) -> FixedPointFormat {
        FixedPointFormat::covering(stats.max_abs, MANTISSA_MAX)
    }
}

/// Names of the tensors that carry their own activation format: the graph
/// input and every conv/fc/batchnorm output. ReLU and pooling inherit.
pub fn formatted_tensors(model: &Model) -> Vec<String> {
    let mut names = vec![model.graph.input.name.clone()];
    names.extend(
        model
            .graph
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv | LayerKind::Fc | LayerKind::BatchNorm))
            .map(|l| l.name.clone()),
    );
    names
}

/// Run full-precision activations (weights as stored, dequantized if needed)
/// over the calibration batches and choose a format per formatted tensor.
pub fn calibrate(
    model: &Model,
    batches: &[Tensor],
    policy: &dyn CalibrationPolicy,
) -> Result<BTreeMap<String, FixedPointFormat>> {
    if batches.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let plan = Plan::new(model, Mode::Float)?;
    let names = formatted_tensors(model);
    let per_batch = par::map_slice(batches, |b| -> Result<Vec<CalibrationStats>> {
        let trace = plan.trace(b)?;
        Ok(names
            .iter()
            .map(|n| {
                let mut s = CalibrationStats::default();
                s.observe(trace.get(n).expect("traced tensor"));
                s
            })
            .collect())
    });
    let mut totals = vec![CalibrationStats::default(); names.len()];
    for stats in per_batch {
        for (t, s) in totals.iter_mut().zip(stats?) {
            *t = t.merge(s);
        }
    }
    Ok(names.into_iter().zip(totals.iter().map(|s| policy.format(s))).collect())
}

/// Write calibrated formats into the graph (`afmt` on layers and input).
pub fn apply_formats(model: &mut Model, formats: &BTreeMap<String, FixedPointFormat>) {
    if let Some(f) = formats.get(&model.graph.input.name) {
        model.graph.input.afmt = Some(f.exponent);
    }
    for l in &mut model.graph.layers {
        if let Some(f) = formats.get(&l.name) {
            l.afmt = Some(f.exponent);
        }
    }
}
