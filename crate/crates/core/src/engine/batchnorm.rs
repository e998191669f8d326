//! Batch-norm parameters, their integer form, and post-quantization
//! re-estimation of the normalization statistics.

use crate::engine::{Mode, Plan};
use crate::error::{Error, Result};
use crate::fixed_point::{covering_exponent, pow2, quantize_value, FixedPointFormat, MANTISSA_MAX};
use crate::model_io::{LayerKind, Model, TensorRecord};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Folded per-channel `(scale, shift)` with `y = scale * x + shift`.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        (0..self.channels())
            .map(|c| {
                let s = self.gamma[c] as f64 / (self.var[c] as f64 + self.eps as f64).sqrt();
                (s, self.beta[c] as f64 - self.mean[c] as f64 * s)
            })
            .unzip()
    }

    pub fn load(model: &Model, layer: &str) -> Result<Self> {
        let spec = model.graph.layer(layer).and_then(|l| l.bn.as_ref()).ok_or_else(|| Error::ModeIncompatible {
            layer: layer.to_string(),
            detail: "not a batchnorm layer".into(),
        })?;
        let get = |n: &str| model.tensors.require(layer, n).and_then(|r| r.to_f32());
        let p = Self {
            mean: get(&spec.mean)?,
            var: get(&spec.var)?,
            gamma: get(&spec.gamma)?,
            beta: get(&spec.beta)?,
            eps: spec.eps,
        };
        if let Some(c) = p.var.iter().position(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::InvalidRecord {
                record: spec.var.clone(),
                detail: format!("negative variance at channel {c}"),
            });
        }
        Ok(p)
    }

    /// Write mean/var/gamma/beta records for `layer` into the model.
    pub fn store(&self, model: &mut Model, layer: &str) -> Result<()> {
        let spec = model.graph.layer(layer).and_then(|l| l.bn.clone()).ok_or_else(|| Error::ModeIncompatible {
            layer: layer.to_string(),
            detail: "not a batchnorm layer".into(),
        })?;
        let c = [self.channels()];
        model.tensors.insert(TensorRecord::from_f32(spec.mean, &c, &self.mean));
        model.tensors.insert(TensorRecord::from_f32(spec.var, &c, &self.var));
        model.tensors.insert(TensorRecord::from_f32(spec.gamma, &c, &self.gamma));
        model.tensors.insert(TensorRecord::from_f32(spec.beta, &c, &self.beta));
        Ok(())
    }
}

/// Batch norm as an integer affine layer: an 8-bit multiplier per channel,
/// each with its own power-of-two exponent, and an i32 bias at the
/// channel's product exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct IntBatchNorm {
    pub mult: Vec<i8>,
    pub mult_exponents: Vec<i32>,
    pub bias_acc: Vec<i32>,
    pub input: FixedPointFormat,
    pub output: FixedPointFormat,
}

impl IntBatchNorm {
    pub fn new(p: &BatchNormParams, input: FixedPointFormat, output: FixedPointFormat) -> Self {
        let (scale, shift) = p.affine();
        let mult_exponents: Vec<i32> = scale.iter().map(|s| covering_exponent(s.abs(), MANTISSA_MAX)).collect();
        let mult = scale.iter().zip(&mult_exponents).map(|(&s, &e)| quantize_value(s, e)).collect();
        let bias_acc = shift
            .iter()
            .zip(&mult_exponents)
            .map(|(&b, &e)| {
                (b * pow2(-(input.exponent + e))).round_ties_even().clamp(i32::MIN as f64, i32::MAX as f64) as i32
            })
            .collect();
        Self { mult, mult_exponents, bias_acc, input, output }
    }

    /// Per-channel right shift from the product exponent to the output format.
    pub fn shifts(&self) -> Vec<i32> {
        self.mult_exponents.iter().map(|e| self.input.exponent + e - self.output.exponent).collect()
    }

    /// The affine this layer computes exactly, as floats.
    pub fn dequantized(&self) -> (Vec<f64>, Vec<f64>) {
        let scale = self.mult.iter().zip(&self.mult_exponents).map(|(&a, &e)| a as f64 * pow2(e)).collect();
        let bias = self
            .bias_acc
            .iter()
            .zip(&self.mult_exponents)
            .map(|(&b, &e)| b as f64 * pow2(self.input.exponent + e))
            .collect();
        (scale, bias)
    }
}

/// Streaming mean/variance (Welford), mergeable with Chan's update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(self, o: Self) -> Self {
        if self.count == 0 {
            return o;
        }
        if o.count == 0 {
            return self;
        }
        let n = self.count + o.count;
        let d = o.mean - self.mean;
        Self {
            count: n,
            mean: self.mean + d * o.count as f64 / n as f64,
            m2: self.m2 + o.m2 + d * d * self.count as f64 * o.count as f64 / n as f64,
        }
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }
}

/// Per-channel statistics of a `[B, C, ...]` tensor.
pub fn channel_stats(t: &Tensor) -> Vec<RunningStats> {
    let channels = t.shape.get(1).copied().unwrap_or(1);
    let plane = t.item_len() / channels.max(1);
    let mut stats = vec![RunningStats::default(); channels];
    for b in 0..t.batch() {
        let item = t.item(b);
        for (c, s) in stats.iter_mut().enumerate() {
            for &x in &item[c * plane..(c + 1) * plane] {
                s.push(x as f64);
            }
        }
    }
    stats
}

/// Re-estimate every batch-norm layer's mean and variance from its input as
/// produced by the model's current weights over the calibration batches.
/// Layers are processed in graph order, each seeing the already updated
/// statistics of earlier layers. Per-batch statistics are merged in batch
/// order; gamma and beta are left unchanged.
pub fn recompute_batchnorm(model: &Model, batches: &[Tensor]) -> Result<Vec<(String, BatchNormParams)>> {
    if batches.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let mut work = model.clone();
    let mut updated = Vec::new();
    let bn_layers: Vec<(String, String)> = model
        .graph
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::BatchNorm)
        .map(|l| (l.name.clone(), l.input.clone()))
        .collect();
    for (name, input) in bn_layers {
        let plan = Plan::new(&work, Mode::Float)?;
        let per_batch = par::map_slice(batches, |b| plan.trace_until(b, &input).map(|t| channel_stats(&t)));
        let mut totals: Option<Vec<RunningStats>> = None;
        for s in per_batch {
            let s = s?;
            totals = Some(match totals {
                None => s,
                Some(t) => t.into_iter().zip(s).map(|(a, b)| a.merge(b)).collect(),
            });
        }
        let totals = totals.expect("non-empty calibration set");
        let mut p = BatchNormParams::load(&work, &name)?;
        p.mean = totals.iter().map(|s| s.mean as f32).collect();
        p.var = totals.iter().map(|s| s.variance() as f32).collect();
        p.store(&mut work, &name)?;
        updated.push((name, p));
    }
    Ok(updated)
}

/// [`recompute_batchnorm`] followed by writing the new statistics into `model`.
pub fn apply_recomputed_batchnorm(model: &mut Model, batches: &[Tensor]) -> Result<Vec<(String, BatchNormParams)>> {
    let updated = recompute_batchnorm(model, batches)?;
    for (name, p) in &updated {
        p.store(model, name)?;
    }
    Ok(updated)
}
