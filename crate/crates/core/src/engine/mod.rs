//! Graph execution in three modes:
//!
//! * `Float`: full-precision kernels over the stored weights (quantized
//!   weights are dequantized first).
//! * `QuantRef`: the same float kernels over dequantized weights and
//!   activations, with every formatted activation rounded onto its 8-bit grid.
//! * `Integer`: 8-bit activations, ternary/4-bit/8-bit integer kernels with
//!   i32 accumulators and shift-based requantization. Instrumented with
//!   operation counters.

pub mod batchnorm;
pub mod kernels;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fixed_point::{pow2, quantize_tensor, FixedPointFormat, QTensor};
use crate::model_io::{graph::scales_name, LayerKind, LayerShape, Model, WeightQuant};
use crate::perf::{LayerCounts, OpCountReport, OpCounts};
use crate::tensor::Tensor;
use crate::ternarizer::{Int4Layer, Int8Weights, TernaryLayer};

pub use batchnorm::{apply_recomputed_batchnorm, recompute_batchnorm, BatchNormParams, IntBatchNorm, RunningStats};
pub use kernels::{conv_float, conv_int4, conv_int8w, conv_ternary_int, ConvGeom, IntOutput, PoolKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Float,
    QuantRef,
    Integer,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Mode::Float),
            "quant" | "quant_ref" => Ok(Mode::QuantRef),
            "int" | "integer" => Ok(Mode::Integer),
            _ => Err(Error::Config(format!("unknown mode `{s}` (float|quant|int)"))),
        }
    }
}

/// Stored weights of a conv/fc layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Float(Tensor),
    Ternary(TernaryLayer),
    Int4(Int4Layer),
    Int8(Int8Weights),
}

impl LayerWeights {
    /// Decode a layer's weights from the model's container.
    pub fn load(model: &Model, layer: &str) -> Result<Self> {
        let spec = model.graph.layer(layer).ok_or_else(|| Error::InvalidGraph(format!("no layer `{layer}`")))?;
        let wname = spec.weight.as_deref().ok_or_else(|| Error::ModeIncompatible {
            layer: layer.to_string(),
            detail: "layer has no weights".into(),
        })?;
        let rec = model.tensors.require(layer, wname)?;
        let shape = rec.shape_usize();
        let mantissas = |q: &WeightQuant| -> Result<Vec<u8>> {
            let raw = model.tensors.require(layer, &scales_name(layer))?.to_i8()?;
            if let Some(i) = raw.iter().position(|&m| m < 0) {
                return Err(Error::InvalidRecord {
                    record: scales_name(layer),
                    detail: format!("negative scale at cluster {i}"),
                });
            }
            debug_assert!(q.bits != 8);
            Ok(raw.into_iter().map(|m| m as u8).collect())
        };
        Ok(match spec.quant {
            None => LayerWeights::Float(rec.to_tensor()?),
            Some(q) if q.bits == 2 => LayerWeights::Ternary(TernaryLayer::from_parts(
                shape,
                q.cluster_size,
                q.exponent,
                &rec.to_ternary()?,
                &mantissas(&q)?,
            )?),
            Some(q) if q.bits == 4 => LayerWeights::Int4(Int4Layer::from_parts(
                shape,
                q.cluster_size,
                q.exponent,
                &rec.to_i8()?,
                &mantissas(&q)?,
            )?),
            Some(q) => LayerWeights::Int8(Int8Weights { shape, mantissas: rec.to_i8()?, exponent: q.exponent }),
        })
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        Ok(match self {
            LayerWeights::Float(t) => t.clone(),
            LayerWeights::Ternary(l) => l.dequantize()?,
            LayerWeights::Int4(l) => l.dequantize(),
            LayerWeights::Int8(w) => w.dequantize(),
        })
    }

    /// Exponent of the weight scale that multiplies the integer accumulator.
    fn scale_exponent(&self) -> Option<i32> {
        match self {
            LayerWeights::Float(_) => None,
            LayerWeights::Ternary(l) => Some(l.exponent),
            LayerWeights::Int4(l) => Some(l.exponent),
            LayerWeights::Int8(w) => Some(w.exponent),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Conv {
        geom: ConvGeom,
        weights: LayerWeights,
        /// dequantized (or float) weights for the float kernels
        dense: Vec<f32>,
        bias: Option<Vec<f32>>,
        bias_acc: Option<Vec<i32>>,
        shift: i32,
    },
    BatchNorm {
        params: BatchNormParams,
        int: Option<IntBatchNorm>,
    },
    Relu,
    Pool {
        kind: PoolKind,
        geom: ConvGeom,
    },
}

#[derive(Debug, Clone)]
struct Step {
    name: String,
    kind: LayerKind,
    /// index into the value list: 0 is the graph input, i + 1 is layer i
    input: usize,
    shape: LayerShape,
    op: Op,
    /// activation format of this step's output (None in float mode)
    format: Option<FixedPointFormat>,
}

/// An immutable, validated execution plan.
#[derive(Debug, Clone)]
pub struct Plan {
    mode: Mode,
    input_name: String,
    input_shape: Vec<usize>,
    input_format: Option<FixedPointFormat>,
    steps: Vec<Step>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep every layer's output (dequantized in integer mode).
    pub dump_activations: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub output: Tensor,
    /// Integer mode only: the raw output mantissas.
    pub output_q: Option<QTensor>,
    pub activations: Vec<(String, Tensor)>,
    /// Integer mode only: instrumented per-layer operation counts.
    pub counts: Option<OpCountReport>,
}

fn quant_bias(bias: &[f32], exponent: i32) -> Vec<i32> {
    bias.iter()
        .map(|&b| (b as f64 * pow2(-exponent)).round_ties_even().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect()
}

impl Plan {
    pub fn new(model: &Model, mode: Mode) -> Result<Self> {
        let graph = &model.graph;
        let shapes = graph.validate(&model.tensors)?;
        let needs_formats = mode != Mode::Float;
        let input_format = if needs_formats {
            Some(FixedPointFormat::new(
                graph.input.afmt.ok_or_else(|| Error::MissingFormat { layer: graph.input.name.clone() })?,
            ))
        } else {
            None
        };
        // value index -> format
        let mut formats: Vec<Option<FixedPointFormat>> = vec![input_format];
        let mut names: Vec<&str> = vec![graph.input.name.as_str()];
        let mut steps = Vec::with_capacity(graph.layers.len());
        for (l, shape) in graph.layers.iter().zip(shapes) {
            let input = names.iter().position(|n| *n == l.input).expect("validated input");
            let in_fmt = formats[input];
            let format = match l.kind {
                LayerKind::Relu | LayerKind::MaxPool | LayerKind::AvgPool => in_fmt,
                _ if needs_formats => {
                    Some(FixedPointFormat::new(l.afmt.ok_or_else(|| Error::MissingFormat { layer: l.name.clone() })?))
                }
                _ => None,
            };
            let op = match l.kind {
                LayerKind::Conv | LayerKind::Fc => {
                    let geom = if l.kind == LayerKind::Conv {
                        ConvGeom::new(
                            shape.input[0],
                            shape.input[1],
                            shape.input[2],
                            l.out_channels,
                            l.kernel,
                            l.stride,
                            l.padding,
                        )?
                    } else {
                        ConvGeom::fc(shape.in_features(l.kind), l.out_channels)?
                    };
                    let weights = LayerWeights::load(model, &l.name)?;
                    if mode == Mode::Integer {
                        match (&weights, l.first_conv) {
                            (LayerWeights::Float(_), _) => {
                                return Err(Error::ModeIncompatible {
                                    layer: l.name.clone(),
                                    detail: "integer mode needs quantized weights".into(),
                                })
                            }
                            (LayerWeights::Ternary(_) | LayerWeights::Int4(_), true) => {
                                return Err(Error::ModeIncompatible {
                                    layer: l.name.clone(),
                                    detail: "the first convolution must keep 8-bit weights".into(),
                                })
                            }
                            _ => {}
                        }
                    }
                    let bias = match &l.bias {
                        Some(b) => Some(model.tensors.require(&l.name, b)?.to_f32()?),
                        None => None,
                    };
                    let (mut bias_acc, mut shift) = (None, 0);
                    let mut dense = weights.dequantize()?.data;
                    let mut bias_f = bias;
                    if let (Some(fin), Some(fout), Some(we)) = (in_fmt, format, weights.scale_exponent()) {
                        let acc_exp = fin.exponent + we;
                        shift = acc_exp - fout.exponent;
                        bias_acc = bias_f.as_ref().map(|b| quant_bias(b, acc_exp));
                        if mode == Mode::QuantRef {
                            // the reference sees exactly what the integer path uses
                            bias_f = bias_acc
                                .as_ref()
                                .map(|b| b.iter().map(|&v| (v as f64 * pow2(acc_exp)) as f32).collect());
                        }
                    }
                    if mode == Mode::Integer {
                        dense.clear();
                    }
                    Op::Conv { geom, weights, dense, bias: bias_f, bias_acc, shift }
                }
                LayerKind::BatchNorm => {
                    let params = BatchNormParams::load(model, &l.name)?;
                    let int = match (in_fmt, format) {
                        (Some(i), Some(o)) => Some(IntBatchNorm::new(&params, i, o)),
                        _ => None,
                    };
                    Op::BatchNorm { params, int }
                }
                LayerKind::Relu => Op::Relu,
                LayerKind::MaxPool | LayerKind::AvgPool => {
                    let c = shape.input[0];
                    let geom = ConvGeom::new(c, shape.input[1], shape.input[2], c, l.kernel, l.stride, l.padding)?;
                    if l.padding >= l.kernel {
                        return Err(Error::ShapeMismatch {
                            layer: l.name.clone(),
                            detail: "pool padding must be smaller than the window".into(),
                        });
                    }
                    let kind = if l.kind == LayerKind::MaxPool { PoolKind::Max } else { PoolKind::Avg };
                    Op::Pool { kind, geom }
                }
            };
            formats.push(format);
            names.push(&l.name);
            steps.push(Step { name: l.name.clone(), kind: l.kind, input, shape, op, format });
        }
        Ok(Self {
            mode,
            input_name: graph.input.name.clone(),
            input_shape: graph.input.shape.clone(),
            input_format,
            steps,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape.len() != self.input_shape.len() + 1 || x.shape[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch {
                layer: self.input_name.clone(),
                detail: format!("input {:?} does not match [B, {:?}]", x.shape, self.input_shape),
            });
        }
        if let Some(index) = x.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    fn batched(shape: &[usize], batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend_from_slice(shape);
        s
    }

    /// Float / quant-ref evaluation of the first `end` steps.
    fn eval_float(&self, x: &Tensor, end: usize) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let batch = x.batch();
        let fq = |t: Vec<f64>, shape: Vec<usize>, fmt: Option<FixedPointFormat>| -> Tensor {
            match (self.mode, fmt) {
                (Mode::QuantRef, Some(f)) => {
                    let step = f.step();
                    let data = kernels::fake_quant(&t, f).into_iter().map(|m| (m as f64 * step) as f32).collect();
                    Tensor { shape, data }
                }
                _ => Tensor { shape, data: t.into_iter().map(|v| v as f32).collect() },
            }
        };
        let input = match (self.mode, self.input_format) {
            (Mode::QuantRef, Some(f)) => quantize_tensor(x, f)?.dequantize(),
            _ => x.clone(),
        };
        let mut values = vec![input];
        for step in &self.steps[..end] {
            let inp = &values[step.input];
            let shape = Self::batched(&step.shape.output, batch);
            let out = match &step.op {
                Op::Conv { geom, dense, bias, .. } => {
                    fq(kernels::conv_f64(&inp.data, dense, bias.as_deref(), geom)?, shape, step.format)
                }
                Op::BatchNorm { params, int } => {
                    let (s, b) = match (self.mode, int) {
                        (Mode::QuantRef, Some(q)) => q.dequantized(),
                        _ => params.affine(),
                    };
                    let channels = step.shape.input[0];
                    let plane = inp.item_len() / channels;
                    fq(kernels::affine_f64(&inp.data, channels, plane, &s, &b), shape, step.format)
                }
                Op::Relu => Tensor { shape, data: kernels::relu_f32(&inp.data) },
                Op::Pool { kind, geom } => fq(kernels::pool_f32(&inp.data, geom, *kind)?, shape, step.format),
            };
            if self.mode == Mode::Float && out.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanLoss { layer: step.name.clone() });
            }
            values.push(out);
        }
        Ok(values)
    }

    fn eval_int(&self, x: &Tensor) -> Result<(Vec<QTensor>, Vec<LayerCounts>)> {
        self.check_input(x)?;
        let batch = x.batch();
        let mut values = vec![quantize_tensor(x, self.input_format.expect("integer plan has formats"))?];
        let mut counts = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let inp = &values[step.input];
            let shape = Self::batched(&step.shape.output, batch);
            let fmt = step.format.expect("integer plan has formats");
            let (data, mut c) = match &step.op {
                Op::Conv { geom, weights, bias_acc, shift, .. } => {
                    let r = match weights {
                        LayerWeights::Ternary(l) => kernels::conv_ternary_int(
                            inp,
                            l,
                            bias_acc.as_deref(),
                            geom,
                            l.cluster_size,
                            *shift,
                            &step.name,
                        )?,
                        LayerWeights::Int8(w) => {
                            kernels::conv_int8w(inp, w, bias_acc.as_deref(), geom, *shift, &step.name)?
                        }
                        LayerWeights::Int4(l) => {
                            kernels::conv_int4(inp, l, bias_acc.as_deref(), geom, *shift, &step.name)?
                        }
                        LayerWeights::Float(_) => unreachable!("rejected at plan time"),
                    };
                    let mut c = r.counts;
                    c.macs_fp32 = geom.macs() * batch as u64;
                    (r.data, c)
                }
                Op::BatchNorm { int, .. } => {
                    let q = int.as_ref().expect("integer plan has formats");
                    let channels = step.shape.input[0];
                    let plane = inp.item_len() / channels;
                    kernels::affine_int(&inp.data, channels, plane, &q.mult, &q.bias_acc, &q.shifts())
                }
                Op::Relu => (kernels::relu_int(&inp.data), OpCounts::default()),
                Op::Pool { kind, geom } => (kernels::pool_int(&inp.data, geom, *kind)?, OpCounts::default()),
            };
            if step.kind == LayerKind::Relu || matches!(step.op, Op::Pool { .. }) {
                c = OpCounts::default();
            }
            counts.push(LayerCounts { name: step.name.clone(), kind: step.kind.keyword(), counts: c });
            values.push(QTensor { shape, data, format: fmt });
        }
        Ok((values, counts))
    }

    pub fn run(&self, x: &Tensor, opts: RunOptions) -> Result<RunOutput> {
        let names = || std::iter::once(self.input_name.clone()).chain(self.steps.iter().map(|s| s.name.clone()));
        match self.mode {
            Mode::Integer => {
                let (values, counts) = self.eval_int(x)?;
                let activations = if opts.dump_activations {
                    names().zip(values.iter().map(QTensor::dequantize)).skip(1).collect()
                } else {
                    Vec::new()
                };
                let last = values.into_iter().last().expect("input value");
                Ok(RunOutput {
                    output: last.dequantize(),
                    output_q: Some(last),
                    activations,
                    counts: Some(OpCountReport::from_layers(counts)),
                })
            }
            _ => {
                let values = self.eval_float(x, self.steps.len())?;
                let output = values.last().expect("input value").clone();
                let activations =
                    if opts.dump_activations { names().zip(values).skip(1).collect() } else { Vec::new() };
                Ok(RunOutput { output, output_q: None, activations, counts: None })
            }
        }
    }

    /// Every named tensor (graph input included), dequantized in integer mode.
    pub fn trace(&self, x: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let names = std::iter::once(self.input_name.clone()).chain(self.steps.iter().map(|s| s.name.clone()));
        Ok(match self.mode {
            Mode::Integer => names.zip(self.eval_int(x)?.0.iter().map(QTensor::dequantize)).collect(),
            _ => names.zip(self.eval_float(x, self.steps.len())?).collect(),
        })
    }

    /// Evaluate only as far as needed to produce tensor `name`.
    pub fn trace_until(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let idx = if name == self.input_name {
            0
        } else {
            1 + self
                .steps
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| Error::InvalidGraph(format!("no tensor `{name}`")))?
        };
        match self.mode {
            Mode::Integer => Ok(self.eval_int(x)?.0.swap_remove(idx).dequantize()),
            _ => Ok(self.eval_float(x, idx)?.swap_remove(idx)),
        }
    }

    pub fn step_names(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.name.clone()).collect()
    }
}

/// Convenience wrapper: build a plan and run one input.
pub fn run(model: &Model, input: &Tensor, mode: Mode, opts: RunOptions) -> Result<RunOutput> {
    Plan::new(model, mode)?.run(input, opts)
}

/// Top-1 accuracy of `mode` over labelled batches.
pub fn accuracy(plan: &Plan, batches: &[(Tensor, Vec<usize>)]) -> Result<f64> {
    let per = crate::par::map_slice(batches, |(x, y)| -> Result<(usize, usize)> {
        let out = plan.run(x, RunOptions::default())?;
        let pred = match &out.output_q {
            Some(q) => {
                let t = Tensor { shape: q.shape.clone(), data: q.data.iter().map(|&m| m as f32).collect() };
                t.argmax_rows()
            }
            None => out.output.argmax_rows(),
        };
        Ok((pred.iter().zip(y).filter(|(p, l)| p == l).count(), y.len()))
    });
    let (mut hit, mut total) = (0, 0);
    for r in per {
        let (h, t) = r?;
        hit += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(hit as f64 / total as f64)
}
