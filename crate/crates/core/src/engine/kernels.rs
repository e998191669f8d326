//! Convolution, batch-norm, activation and pooling kernels, NCHW layout.
//!
//! Float kernels accumulate in f64 in a fixed order (input channel, kernel
//! row, kernel column) so results do not depend on the thread count.
//! Integer kernels take 8-bit mantissas, accumulate in i32 with checked
//! arithmetic and finish with [`requantize`].

use crate::error::{Error, Result};
use crate::fixed_point::{requantize, FixedPointFormat, QTensor};
use crate::par;
use crate::perf::OpCounts;
use crate::tensor::Tensor;
use crate::ternarizer::{Int4Layer, Int8Weights, TernaryLayer};

/// Geometry of one convolution (fully connected layers are 1x1 convolutions
/// over a 1x1 map with `c_in` = flattened input features).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h_in: usize,
        w_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fits = |n: usize| n + 2 * pad >= k && k > 0 && stride > 0;
        if !fits(h_in) || !fits(w_in) || c_in == 0 || c_out == 0 {
            return Err(Error::ShapeMismatch {
                layer: "<conv>".into(),
                detail: format!("kernel {k} stride {stride} pad {pad} does not fit {c_in}x{h_in}x{w_in}"),
            });
        }
        Ok(Self {
            c_in,
            h_in,
            w_in,
            c_out,
            k,
            stride,
            pad,
            h_out: (h_in + 2 * pad - k) / stride + 1,
            w_out: (w_in + 2 * pad - k) / stride + 1,
        })
    }

    pub fn fc(features: usize, out: usize) -> Result<Self> {
        Self::new(features, 1, 1, out, 1, 1, 0)
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    pub fn plane(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.plane()
    }

    pub fn filter_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Baseline multiply-accumulates per batch item, padded taps included.
    pub fn macs(&self) -> u64 {
        (self.c_out * self.plane() * self.filter_len()) as u64
    }

    /// Input offset for tap (ci, ky, kx) at output (oy, ox), or None in padding.
    #[inline]
    pub(crate) fn tap(&self, ci: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        if y >= self.h_in || x >= self.w_in {
            return None;
        }
        Some((ci * self.h_in + y) * self.w_in + x)
    }
}

fn batch_of(len: usize, item: usize, layer: &str) -> Result<usize> {
    if item == 0 || !len.is_multiple_of(item) {
        return Err(Error::ShapeMismatch {
            layer: layer.to_string(),
            detail: format!("{len} values are not a whole number of {item}-value items"),
        });
    }
    Ok(len / item)
}

/// Cross-correlation in f64. `input` is `batch * c_in * h * w`, `weights` is
/// `c_out * c_in * k * k`.
pub fn conv_f64(input: &[f32], weights: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Result<Vec<f64>> {
    let batch = batch_of(input.len(), g.in_len(), "<conv>")?;
    if weights.len() != g.c_out * g.filter_len() {
        return Err(Error::ShapeMismatch {
            layer: "<conv>".into(),
            detail: format!("{} weights for {} filters of {}", weights.len(), g.c_out, g.filter_len()),
        });
    }
    let mut out = vec![0.0f64; batch * g.out_len()];
    par::for_each_chunk(&mut out, g.plane(), |idx, plane| {
        let (b, co) = (idx / g.c_out, idx % g.c_out);
        let x = &input[b * g.in_len()..(b + 1) * g.in_len()];
        let w = &weights[co * g.filter_len()..(co + 1) * g.filter_len()];
        let b0 = bias.map_or(0.0, |bs| bs[co] as f64);
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut acc = 0.0f64;
                for ci in 0..g.c_in {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            if let Some(i) = g.tap(ci, oy, ox, ky, kx) {
                                acc += x[i] as f64 * w[(ci * g.k + ky) * g.k + kx] as f64;
                            }
                        }
                    }
                }
                plane[oy * g.w_out + ox] = acc + b0;
            }
        }
    });
    Ok(out)
}

/// Full-precision reference convolution on NCHW tensors.
pub fn conv_float(input: &Tensor, weights: &Tensor, bias: Option<&[f32]>, stride: usize, pad: usize) -> Result<Tensor> {
    let mismatch = |detail: String| Error::ShapeMismatch { layer: "<conv>".into(), detail };
    if input.shape.len() != 4 || weights.shape.len() != 4 {
        return Err(mismatch(format!(
            "expected NCHW input and OIHW weights, got {:?} / {:?}",
            input.shape, weights.shape
        )));
    }
    let (b, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    if weights.shape[1] != c || weights.shape[2] != weights.shape[3] {
        return Err(mismatch(format!("weights {:?} do not match input channels {c}", weights.shape)));
    }
    let g = ConvGeom::new(c, h, w, weights.shape[0], weights.shape[2], stride, pad)?;
    if let Some(bs) = bias {
        if bs.len() != g.c_out {
            return Err(mismatch(format!("bias has {} values for {} filters", bs.len(), g.c_out)));
        }
    }
    let data = conv_f64(&input.data, &weights.data, bias, &g)?;
    Ok(Tensor { shape: vec![b, g.c_out, g.h_out, g.w_out], data: data.into_iter().map(|v| v as f32).collect() })
}

/// Per-channel affine `y = scale[c] * x + shift[c]` over `[B, C, plane]`.
pub fn affine_f64(input: &[f32], channels: usize, plane: usize, scale: &[f64], shift: &[f64]) -> Vec<f64> {
    input
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = (i / plane) % channels;
            scale[c] * x as f64 + shift[c]
        })
        .collect()
}

pub fn relu_f32(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_int(x: &[i8]) -> Vec<i8> {
    x.iter().map(|&v| v.max(0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Pooling window geometry; padded positions are skipped and averages divide
/// by the number of in-bounds elements.
pub type PoolGeom = ConvGeom;

fn pool_windows<T: Copy + Send + Sync, R: Send + Copy + Default>(
    input: &[T],
    g: &PoolGeom,
    reduce: impl Fn(&mut dyn Iterator<Item = T>) -> R + Sync + Send,
) -> Result<Vec<R>> {
    let batch = batch_of(input.len(), g.in_len(), "<pool>")?;
    let mut out = vec![R::default(); batch * g.c_in * g.plane()];
    par::for_each_chunk(&mut out, g.plane(), |idx, plane| {
        let (b, c) = (idx / g.c_in, idx % g.c_in);
        let x = &input[b * g.in_len()..(b + 1) * g.in_len()];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut it = (0..g.k * g.k).filter_map(|t| g.tap(c, oy, ox, t / g.k, t % g.k)).map(|i| x[i]);
                plane[oy * g.w_out + ox] = reduce(&mut it);
            }
        }
    });
    Ok(out)
}

pub fn pool_f32(input: &[f32], g: &PoolGeom, kind: PoolKind) -> Result<Vec<f64>> {
    pool_windows(input, g, |it| match kind {
        PoolKind::Max => it.fold(f64::NEG_INFINITY, |m, v| m.max(v as f64)),
        PoolKind::Avg => {
            let (s, n) = it.fold((0.0f64, 0usize), |(s, n), v| (s + v as f64, n + 1));
            s / n as f64
        }
    })
}

/// Integer pooling on mantissas: max is exact; the average rounds half away
/// from zero.
pub fn pool_int(input: &[i8], g: &PoolGeom, kind: PoolKind) -> Result<Vec<i8>> {
    pool_windows(input, g, |it| match kind {
        PoolKind::Max => it.fold(i8::MIN, |m, v| m.max(v)),
        PoolKind::Avg => {
            let (s, n) = it.fold((0i32, 0i32), |(s, n), v| (s + v as i32, n + 1));
            let r = (2 * s.abs() + n) / (2 * n);
            (s.signum() * r) as i8
        }
    })
}

/// Result of an integer kernel: output mantissas plus instrumented counts.
#[derive(Debug, Clone, PartialEq)]
pub struct IntOutput {
    pub data: Vec<i8>,
    pub counts: OpCounts,
}

fn check_input(input: &QTensor, g: &ConvGeom, layer: &str) -> Result<usize> {
    batch_of(input.data.len(), g.in_len(), layer)
}

fn overflow(layer: &str) -> Error {
    Error::AccumulatorOverflow { layer: layer.to_string() }
}

/// Ternary convolution with 8-bit activations.
///
/// Per output value the taps are walked in blocks of `block` input channels
/// (`block * K^2` taps). Inside a block the input mantissas are added or
/// subtracted according to the ternary code; each block's partial sum is then
/// multiplied once by the filter's cluster-scale mantissa. Because the scale
/// is shared by every input channel of a filter, the blocked sum equals a
/// single multiply of the full accumulator, bit for bit. The i32 total (plus
/// `bias_acc` at the accumulator exponent) is requantized with `shift`.
#[allow(clippy::too_many_arguments)]
pub fn conv_ternary_int(
    input: &QTensor,
    layer: &TernaryLayer,
    bias_acc: Option<&[i32]>,
    g: &ConvGeom,
    block: usize,
    shift: i32,
    name: &str,
) -> Result<IntOutput> {
    let batch = check_input(input, g, name)?;
    let codes = layer.codes()?;
    if codes.len() != g.c_out * g.filter_len() {
        return Err(Error::ShapeMismatch { layer: name.into(), detail: "ternary codes do not match geometry".into() });
    }
    let mut scale = vec![0i32; g.c_out];
    for c in &layer.clusters {
        for &f in &c.filter_indices {
            scale[f] = c.alpha_q.mantissa as i32;
        }
    }
    let block = block.max(1);
    let x_all = &input.data;
    let mut out = vec![0i8; batch * g.out_len()];
    let counts = std::sync::Mutex::new(Vec::new());
    let failed = std::sync::atomic::AtomicBool::new(false);
    par::for_each_chunk(&mut out, g.plane(), |idx, plane| {
        let (b, co) = (idx / g.c_out, idx % g.c_out);
        let x = &x_all[b * g.in_len()..(b + 1) * g.in_len()];
        let w = &codes[co * g.filter_len()..(co + 1) * g.filter_len()];
        let m = scale[co];
        let bias = bias_acc.map_or(0, |bs| bs[co]);
        let mut local = OpCounts::default();
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut total: i32 = 0;
                let mut ok = true;
                for c0 in (0..g.c_in).step_by(block) {
                    let mut partial: i32 = 0;
                    for ci in c0..(c0 + block).min(g.c_in) {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                local.accs_ternary += 1;
                                if let Some(i) = g.tap(ci, oy, ox, ky, kx) {
                                    match w[(ci * g.k + ky) * g.k + kx] {
                                        1 => partial += x[i] as i32,
                                        -1 => partial -= x[i] as i32,
                                        _ => {}
                                    }
                                }
                            }
                        }
                    }
                    local.mults_8bit += 1;
                    match partial.checked_mul(m).and_then(|p| total.checked_add(p)) {
                        Some(t) => total = t,
                        None => ok = false,
                    }
                }
                match total.checked_add(bias) {
                    Some(t) if ok => {
                        local.requant_ops += 1;
                        plane[oy * g.w_out + ox] = requantize(t, 1, shift);
                    }
                    _ => failed.store(true, std::sync::atomic::Ordering::Relaxed),
                }
            }
        }
        counts.lock().unwrap().push(local);
    });
    if failed.into_inner() {
        return Err(overflow(name));
    }
    let counts = counts.into_inner().unwrap().into_iter().fold(OpCounts::default(), |a, c| a + c);
    Ok(IntOutput { data: out, counts })
}

/// Shared i8 x i8 -> i32 multiply-accumulate loop. `post_scale`, when given,
/// multiplies each filter's accumulator once (int4 cluster scales).
fn conv_mac_int(
    input: &QTensor,
    weights: &[i8],
    post_scale: Option<&[i32]>,
    bias_acc: Option<&[i32]>,
    g: &ConvGeom,
    shift: i32,
    name: &str,
) -> Result<IntOutput> {
    let batch = check_input(input, g, name)?;
    if weights.len() != g.c_out * g.filter_len() {
        return Err(Error::ShapeMismatch { layer: name.into(), detail: "weights do not match geometry".into() });
    }
    let x_all = &input.data;
    let mut out = vec![0i8; batch * g.out_len()];
    let counts = std::sync::Mutex::new(Vec::new());
    let failed = std::sync::atomic::AtomicBool::new(false);
    par::for_each_chunk(&mut out, g.plane(), |idx, plane| {
        let (b, co) = (idx / g.c_out, idx % g.c_out);
        let x = &x_all[b * g.in_len()..(b + 1) * g.in_len()];
        let w = &weights[co * g.filter_len()..(co + 1) * g.filter_len()];
        let bias = bias_acc.map_or(0, |bs| bs[co]);
        let mut local = OpCounts::default();
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut acc: i32 = 0;
                let mut ok = true;
                for ci in 0..g.c_in {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            local.mults_8bit += 1;
                            local.accs_8bit += 1;
                            if let Some(i) = g.tap(ci, oy, ox, ky, kx) {
                                let p = x[i] as i32 * w[(ci * g.k + ky) * g.k + kx] as i32;
                                match acc.checked_add(p) {
                                    Some(a) => acc = a,
                                    None => ok = false,
                                }
                            }
                        }
                    }
                }
                if let Some(s) = post_scale {
                    local.scale_mults += 1;
                    match acc.checked_mul(s[co]) {
                        Some(a) => acc = a,
                        None => ok = false,
                    }
                }
                match acc.checked_add(bias) {
                    Some(t) if ok => {
                        local.requant_ops += 1;
                        plane[oy * g.w_out + ox] = requantize(t, 1, shift);
                    }
                    _ => failed.store(true, std::sync::atomic::Ordering::Relaxed),
                }
            }
        }
        counts.lock().unwrap().push(local);
    });
    if failed.into_inner() {
        return Err(overflow(name));
    }
    let counts = counts.into_inner().unwrap().into_iter().fold(OpCounts::default(), |a, c| a + c);
    Ok(IntOutput { data: out, counts })
}

/// 8-bit weight convolution (first layer, or fc when configured).
pub fn conv_int8w(
    input: &QTensor,
    weights: &Int8Weights,
    bias_acc: Option<&[i32]>,
    g: &ConvGeom,
    shift: i32,
    name: &str,
) -> Result<IntOutput> {
    conv_mac_int(input, &weights.mantissas, None, bias_acc, g, shift, name)
}

/// 4-bit weight convolution: 8x4-bit products, one scale multiply per output.
pub fn conv_int4(
    input: &QTensor,
    layer: &Int4Layer,
    bias_acc: Option<&[i32]>,
    g: &ConvGeom,
    shift: i32,
    name: &str,
) -> Result<IntOutput> {
    let mut scale = vec![0i32; g.c_out];
    for c in &layer.clusters {
        for &f in &c.filter_indices {
            scale[f] = c.scale.mantissa as i32;
        }
    }
    conv_mac_int(input, &layer.codes(), Some(&scale), bias_acc, g, shift, name)
}

/// Integer per-channel affine: `requantize(x * mult[c] + bias[c], 1, shift)`.
pub fn affine_int(
    input: &[i8],
    channels: usize,
    plane: usize,
    mult: &[i8],
    bias_acc: &[i32],
    shifts: &[i32],
) -> (Vec<i8>, OpCounts) {
    let out: Vec<i8> = input
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = (i / plane) % channels;
            // |x * mult| <= 2^14 and bias fits i32 by construction
            let acc = (x as i64 * mult[c] as i64 + bias_acc[c] as i64).clamp(i32::MIN as i64, i32::MAX as i64) as i32;
            requantize(acc, 1, shifts[c])
        })
        .collect();
    let n = input.len() as u64;
    (out, OpCounts { bn_mults: n, requant_ops: n, ..OpCounts::default() })
}

/// Quantize f64 values onto `fmt` (nearest-even, saturating).
pub fn fake_quant(values: &[f64], fmt: FixedPointFormat) -> Vec<i8> {
    values.iter().map(|&v| crate::fixed_point::quantize_value(v, fmt.exponent)).collect()
}
