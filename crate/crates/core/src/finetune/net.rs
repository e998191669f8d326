//! The toy CNN in f64 with a hand-written backward pass:
//! `bn0 -> conv1 -> bn1 -> relu -> conv2 (stride 2) -> bn2 -> relu -> fc`.
//!
//! Batch norm uses batch statistics (training mode). In the low-precision
//! forward the first conv sees 8-bit weights, conv2 sees re-quantized
//! clustered weights and every activation point is rounded to its 8-bit
//! format. The backward pass treats each quantizer as the identity, except
//! that saturated activations pass no gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::engine::ConvGeom;
use crate::error::{Error, Result};
use crate::fixed_point::{FixedPointFormat, MANTISSA_MAX, MANTISSA_MIN};
use crate::par;
use crate::tensor::Tensor;
use crate::ternarizer::{quantize_layer, quantize_layer_int4, quantize_weights_int8, QuantConfig, WeightBits};

pub const BN_EPS: f64 = 1e-5;

/// Activation points that get their own 8-bit format, in forward order. The
/// names match the exported graph.
pub const ACT_POINTS: [&str; 6] = ["x", "bn0", "conv1", "bn1", "conv2", "bn2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ToyArch {
    pub size: usize,
    pub classes: usize,
    pub c1: usize,
    pub c2: usize,
}

impl ToyArch {
    pub const fn standard() -> Self {
        Self { size: 16, classes: 10, c1: 8, c2: 32 }
    }

    /// Roughly a thousand parameters; used for gradient checks.
    pub const fn small() -> Self {
        Self { size: 8, classes: 5, c1: 4, c2: 8 }
    }

    pub fn g1(&self) -> ConvGeom {
        ConvGeom::new(1, self.size, self.size, self.c1, 3, 1, 1).expect("valid toy geometry")
    }

    pub fn g2(&self) -> ConvGeom {
        ConvGeom::new(self.c1, self.size, self.size, self.c2, 3, 2, 1).expect("valid toy geometry")
    }

    pub fn features(&self) -> usize {
        self.g2().out_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub arch: ToyArch,
    pub bn0_gamma: Vec<f64>,
    pub bn0_beta: Vec<f64>,
    pub conv1: Vec<f64>,
    pub bn1_gamma: Vec<f64>,
    pub bn1_beta: Vec<f64>,
    pub conv2: Vec<f64>,
    pub bn2_gamma: Vec<f64>,
    pub bn2_beta: Vec<f64>,
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

pub const PARAM_NAMES: [&str; 10] =
    ["bn0.gamma", "bn0.beta", "conv1.w", "bn1.gamma", "bn1.beta", "conv2.w", "bn2.gamma", "bn2.beta", "fc.w", "fc.b"];

impl Params {
    /// He-normal conv/fc weights, unit gamma, zero beta and bias.
    pub fn init(arch: ToyArch, seed: u64) -> Self {
        Self::init_with_gains(arch, seed, 1, 1.0)
    }

    /// [`Params::init`], then every run of `group` consecutive conv2 filters
    /// is multiplied by a shared gain drawn log-uniformly from
    /// `[1/spread, spread]`. The following batch norm makes the float network
    /// indifferent to these gains; they give conv2 the locally correlated
    /// filter dynamic range that trained networks develop and that
    /// clustering is sensitive to.
    pub fn init_with_gains(arch: ToyArch, seed: u64, group: usize, spread: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |n: usize, fan_in: usize| -> Vec<f64> {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let conv1 = he(arch.c1 * 9, 9);
        let mut conv2 = he(arch.c2 * arch.c1 * 9, arch.c1 * 9);
        let fc_w = he(arch.classes * arch.features(), arch.features());
        for f in conv2.chunks_mut(arch.c1 * 9 * group.max(1)) {
            let gain = spread.powf(rng.random_range(-1.0..=1.0));
            f.iter_mut().for_each(|w| *w *= gain);
        }
        Self {
            arch,
            bn0_gamma: vec![1.0],
            bn0_beta: vec![0.0],
            conv1,
            bn1_gamma: vec![1.0; arch.c1],
            bn1_beta: vec![0.0; arch.c1],
            conv2,
            bn2_gamma: vec![1.0; arch.c2],
            bn2_beta: vec![0.0; arch.c2],
            fc_w,
            fc_b: vec![0.0; arch.classes],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Parameter tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Vec<f64>; 10] {
        [
            &self.bn0_gamma,
            &self.bn0_beta,
            &self.conv1,
            &self.bn1_gamma,
            &self.bn1_beta,
            &self.conv2,
            &self.bn2_gamma,
            &self.bn2_beta,
            &self.fc_w,
            &self.fc_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.bn0_gamma,
            &mut self.bn0_beta,
            &mut self.conv1,
            &mut self.bn1_gamma,
            &mut self.bn1_beta,
            &mut self.conv2,
            &mut self.bn2_gamma,
            &mut self.bn2_beta,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which quantizers the forward pass applies.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quantizers {
    /// Weight quantization of conv2 (the first conv then uses 8-bit weights);
    /// `None` keeps full-precision weights everywhere.
    pub weights: Option<QuantConfig>,
    /// Formats of [`ACT_POINTS`]; `None` leaves activations unquantized.
    pub activations: Option<[FixedPointFormat; 6]>,
}

impl Quantizers {
    pub const IDENTITY: Self = Self { weights: None, activations: None };
}

fn to_f32(v: &[f64], shape: Vec<usize>) -> Tensor {
    Tensor { shape, data: v.iter().map(|&x| x as f32).collect() }
}

/// The weights conv1 and conv2 actually use under `q`.
pub fn effective_weights(p: &Params, q: &Quantizers) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = p.arch;
    let Some(cfg) = q.weights else {
        return Ok((p.conv1.clone(), p.conv2.clone()));
    };
    let back = |t: Tensor| t.data.into_iter().map(f64::from).collect::<Vec<f64>>();
    let w1 = quantize_weights_int8(&to_f32(&p.conv1, vec![a.c1, 1, 3, 3]))?.dequantize();
    let w2 = to_f32(&p.conv2, vec![a.c2, a.c1, 3, 3]);
    let w2 = match cfg.weight_bits {
        WeightBits::Ternary => quantize_layer(&w2, &cfg)?.dequantize()?,
        WeightBits::Int4 => quantize_layer_int4(&w2, &cfg)?.dequantize(),
    };
    Ok((back(w1), back(w2)))
}

fn conv_fwd(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.out_len()];
    let fl = g.filter_len();
    for co in 0..g.c_out {
        let o = &mut out[co * g.plane()..(co + 1) * g.plane()];
        for ci in 0..g.c_in {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[co * fl + (ci * g.k + ky) * g.k + kx];
                    for oy in 0..g.h_out {
                        for ox in 0..g.w_out {
                            if let Some(i) = g.tap(ci, oy, ox, ky, kx) {
                                o[oy * g.w_out + ox] += wv * x[i];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of one sample's conv w.r.t. its input and the weights.
fn conv_bwd(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom, need_dx: bool) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; if need_dx { g.in_len() } else { 0 }];
    let mut dw = vec![0.0; w.len()];
    let fl = g.filter_len();
    for co in 0..g.c_out {
        let d = &dy[co * g.plane()..(co + 1) * g.plane()];
        for ci in 0..g.c_in {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wi = co * fl + (ci * g.k + ky) * g.k + kx;
                    let mut acc = 0.0;
                    for oy in 0..g.h_out {
                        for ox in 0..g.w_out {
                            if let Some(i) = g.tap(ci, oy, ox, ky, kx) {
                                let gy = d[oy * g.w_out + ox];
                                acc += gy * x[i];
                                if need_dx {
                                    dx[i] += gy * w[wi];
                                }
                            }
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
    (dx, dw)
}

fn conv_batch(x: &[f64], w: &[f64], g: &ConvGeom, batch: usize) -> Vec<f64> {
    par::map_range(batch, |b| conv_fwd(&x[b * g.in_len()..(b + 1) * g.in_len()], w, g)).concat()
}

/// Summed weight gradient (in sample order) and per-sample input gradients.
fn conv_batch_bwd(x: &[f64], w: &[f64], dy: &[f64], g: &ConvGeom, batch: usize, need_dx: bool) -> (Vec<f64>, Vec<f64>) {
    let per = par::map_range(batch, |b| {
        conv_bwd(&x[b * g.in_len()..(b + 1) * g.in_len()], w, &dy[b * g.out_len()..(b + 1) * g.out_len()], g, need_dx)
    });
    let mut dw = vec![0.0; w.len()];
    let mut dx = Vec::with_capacity(if need_dx { batch * g.in_len() } else { 0 });
    for (dxb, dwb) in per {
        dx.extend(dxb);
        dw.iter_mut().zip(dwb).for_each(|(a, b)| *a += b);
    }
    (dx, dw)
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    plane: usize,
}

fn bn_fwd(x: &[f64], channels: usize, plane: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, BnCache) {
    let batch = x.len() / (channels * plane);
    let m = (batch * plane) as f64;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let idx = |b: usize| (b * channels + c) * plane;
        let mut sum = 0.0;
        for b in 0..batch {
            sum += x[idx(b)..idx(b) + plane].iter().sum::<f64>();
        }
        let mean = sum / m;
        let mut ss = 0.0;
        for b in 0..batch {
            ss += x[idx(b)..idx(b) + plane].iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        }
        let inv = 1.0 / (ss / m + BN_EPS).sqrt();
        inv_std[c] = inv;
        for b in 0..batch {
            for i in idx(b)..idx(b) + plane {
                xhat[i] = (x[i] - mean) * inv;
                y[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    (y, BnCache { xhat, inv_std, channels, plane })
}

/// Returns (dx, dgamma, dbeta).
fn bn_bwd(dy: &[f64], cache: &BnCache, gamma: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (channels, plane) = (cache.channels, cache.plane);
    let batch = dy.len() / (channels * plane);
    let m = (batch * plane) as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let idx = |b: usize| (b * channels + c) * plane;
        let (mut sdy, mut sdyx) = (0.0, 0.0);
        for b in 0..batch {
            for i in idx(b)..idx(b) + plane {
                sdy += dy[i];
                sdyx += dy[i] * cache.xhat[i];
            }
        }
        dgamma[c] = sdyx;
        dbeta[c] = sdy;
        let k = gamma[c] * cache.inv_std[c] / m;
        for b in 0..batch {
            for i in idx(b)..idx(b) + plane {
                dx[i] = k * (m * dy[i] - sdy - cache.xhat[i] * sdyx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Round onto the format's grid in place; returns the pass-through mask
/// (false where the value saturated).
fn fake_quant(v: &mut [f64], fmt: Option<FixedPointFormat>) -> Vec<bool> {
    let Some(f) = fmt else { return Vec::new() };
    let step = f.step();
    v.iter_mut()
        .map(|x| {
            let inside = f.in_range(*x);
            *x = (*x / step).round_ties_even().clamp(MANTISSA_MIN as f64, MANTISSA_MAX as f64) * step;
            inside
        })
        .collect()
}

fn apply_mask(d: &mut [f64], mask: &[bool]) {
    if !mask.is_empty() {
        d.iter_mut().zip(mask).for_each(|(g, &keep)| {
            if !keep {
                *g = 0.0
            }
        });
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn check_finite(v: &[f64], layer: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NanLoss { layer: layer.to_string() })
    }
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub loss: f64,
    pub logits: Vec<f64>,
    /// Max |value| at each of [`ACT_POINTS`] before rounding.
    pub point_max: [f64; 6],
    batch: usize,
    labels: Vec<usize>,
    probs: Vec<f64>,
    masks: [Vec<bool>; 6],
    bn: [BnCache; 3],
    a1: Vec<f64>,
    w1: Vec<f64>,
    r1: Vec<f64>,
    relu1: Vec<bool>,
    w2: Vec<f64>,
    r2: Vec<f64>,
    relu2: Vec<bool>,
}

/// Low-precision forward pass with mean cross-entropy loss.
pub fn forward(p: &Params, x: &Tensor, labels: &[usize], q: &Quantizers) -> Result<Forward> {
    let a = p.arch;
    let batch = x.batch();
    if x.shape != [batch, 1, a.size, a.size] || labels.len() != batch || batch == 0 {
        return Err(Error::ShapeMismatch {
            layer: "x".into(),
            detail: format!("batch {:?} with {} labels for a {}x{} toy net", x.shape, labels.len(), a.size, a.size),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= a.classes) {
        return Err(Error::Config(format!("label {l} out of range for {} classes", a.classes)));
    }
    let fmt = |i: usize| q.activations.map(|f| f[i]);
    let (g1, g2) = (a.g1(), a.g2());
    let (w1, w2) = effective_weights(p, q)?;
    let mut point_max = [0.0; 6];

    let mut a0: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
    point_max[0] = max_abs(&a0);
    let m0 = fake_quant(&mut a0, fmt(0));
    let (mut a1, bn0) = bn_fwd(&a0, 1, a.size * a.size, &p.bn0_gamma, &p.bn0_beta);
    check_finite(&a1, "bn0")?;
    point_max[1] = max_abs(&a1);
    let m1 = fake_quant(&mut a1, fmt(1));

    let mut c1 = conv_batch(&a1, &w1, &g1, batch);
    check_finite(&c1, "conv1")?;
    point_max[2] = max_abs(&c1);
    let m2 = fake_quant(&mut c1, fmt(2));
    let (mut z1, bn1) = bn_fwd(&c1, a.c1, g1.plane(), &p.bn1_gamma, &p.bn1_beta);
    check_finite(&z1, "bn1")?;
    point_max[3] = max_abs(&z1);
    let m3 = fake_quant(&mut z1, fmt(3));
    let relu1: Vec<bool> = z1.iter().map(|&v| v > 0.0).collect();
    let r1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();

    let mut c2 = conv_batch(&r1, &w2, &g2, batch);
    check_finite(&c2, "conv2")?;
    point_max[4] = max_abs(&c2);
    let m4 = fake_quant(&mut c2, fmt(4));
    let (mut z2, bn2) = bn_fwd(&c2, a.c2, g2.plane(), &p.bn2_gamma, &p.bn2_beta);
    check_finite(&z2, "bn2")?;
    point_max[5] = max_abs(&z2);
    let m5 = fake_quant(&mut z2, fmt(5));
    let relu2: Vec<bool> = z2.iter().map(|&v| v > 0.0).collect();
    let r2: Vec<f64> = z2.iter().map(|&v| v.max(0.0)).collect();

    let (f, k) = (a.features(), a.classes);
    let mut logits = vec![0.0; batch * k];
    for b in 0..batch {
        let r = &r2[b * f..(b + 1) * f];
        for c in 0..k {
            let w = &p.fc_w[c * f..(c + 1) * f];
            logits[b * k + c] = p.fc_b[c] + w.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    check_finite(&logits, "fc")?;
    let mut probs = vec![0.0; batch * k];
    let mut loss = 0.0;
    for b in 0..batch {
        let l = &logits[b * k..(b + 1) * k];
        let mx = l.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = l.iter().map(|v| (v - mx).exp()).sum();
        for c in 0..k {
            probs[b * k + c] = (l[c] - mx).exp() / z;
        }
        loss += z.ln() + mx - l[labels[b]];
    }
    loss /= batch as f64;
    if !loss.is_finite() {
        return Err(Error::NanLoss { layer: "loss".into() });
    }
    Ok(Forward {
        loss,
        logits,
        point_max,
        batch,
        labels: labels.to_vec(),
        probs,
        masks: [m0, m1, m2, m3, m4, m5],
        bn: [bn0, bn1, bn2],
        a1,
        w1,
        r1,
        relu1,
        w2,
        r2,
        relu2,
    })
}

/// Gradients of the mean loss w.r.t. the full-precision parameters.
pub fn backward(p: &Params, fw: &Forward) -> Result<Params> {
    let a = p.arch;
    let (f, k, batch) = (a.features(), a.classes, fw.batch);
    if fw.probs.len() != batch * k || fw.r2.len() != batch * f || fw.w2.len() != p.conv2.len() {
        return Err(Error::ShapeMismatch {
            layer: "backward".into(),
            detail: "forward cache does not match parameters".into(),
        });
    }
    let (g1, g2) = (a.g1(), a.g2());
    let mut grad = p.zeros_like();

    let mut dlogits = fw.probs.clone();
    for b in 0..batch {
        dlogits[b * k + fw.labels[b]] -= 1.0;
    }
    dlogits.iter_mut().for_each(|v| *v /= batch as f64);
    let mut dr2 = vec![0.0; batch * f];
    for b in 0..batch {
        let r = &fw.r2[b * f..(b + 1) * f];
        for c in 0..k {
            let g = dlogits[b * k + c];
            grad.fc_b[c] += g;
            let gw = &mut grad.fc_w[c * f..(c + 1) * f];
            gw.iter_mut().zip(r).for_each(|(w, x)| *w += g * x);
            let w = &p.fc_w[c * f..(c + 1) * f];
            dr2[b * f..(b + 1) * f].iter_mut().zip(w).for_each(|(d, w)| *d += g * w);
        }
    }
    apply_mask(&mut dr2, &fw.relu2);
    apply_mask(&mut dr2, &fw.masks[5]);
    let (mut dc2, dg, db) = bn_bwd(&dr2, &fw.bn[2], &p.bn2_gamma);
    (grad.bn2_gamma, grad.bn2_beta) = (dg, db);
    apply_mask(&mut dc2, &fw.masks[4]);
    let (mut dr1, dw2) = conv_batch_bwd(&fw.r1, &fw.w2, &dc2, &g2, batch, true);
    grad.conv2 = dw2;

    apply_mask(&mut dr1, &fw.relu1);
    apply_mask(&mut dr1, &fw.masks[3]);
    let (mut dc1, dg, db) = bn_bwd(&dr1, &fw.bn[1], &p.bn1_gamma);
    (grad.bn1_gamma, grad.bn1_beta) = (dg, db);
    apply_mask(&mut dc1, &fw.masks[2]);
    let (mut da1, dw1) = conv_batch_bwd(&fw.a1, &fw.w1, &dc1, &g1, batch, true);
    grad.conv1 = dw1;

    apply_mask(&mut da1, &fw.masks[1]);
    let (_, dg, db) = bn_bwd(&da1, &fw.bn[0], &p.bn0_gamma);
    (grad.bn0_gamma, grad.bn0_beta) = (dg, db);
    Ok(grad)
}

/// Predicted classes from a forward pass.
pub fn predictions(fw: &Forward, classes: usize) -> Vec<usize> {
    let t = Tensor { shape: vec![fw.batch, classes], data: fw.logits.iter().map(|&v| v as f32).collect() };
    t.argmax_rows()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(arch: ToyArch, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * arch.size * arch.size).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let labels = (0..n).map(|i| i % arch.classes).collect();
        (Tensor { shape: vec![n, 1, arch.size, arch.size], data }, labels)
    }

    #[test]
    fn small_arch_is_about_a_thousand_parameters() {
        let p = Params::init(ToyArch::small(), 0);
        assert!((900..1100).contains(&p.len()), "{}", p.len());
    }

    #[test]
    fn zero_input_gives_bias_only_logits() {
        let arch = ToyArch::small();
        let mut p = Params::init(arch, 1);
        p.fc_b = (0..arch.classes).map(|c| c as f64 * 0.1).collect();
        let x = Tensor::zeros(vec![3, 1, arch.size, arch.size]);
        let fw = forward(&p, &x, &[0, 1, 2], &Quantizers::IDENTITY).unwrap();
        // every BN sees a constant, so each relu output is max(beta, 0) = 0
        for b in 0..3 {
            assert_eq!(&fw.logits[b * arch.classes..(b + 1) * arch.classes], &p.fc_b[..]);
        }
    }

    #[test]
    fn saturated_points_pass_no_gradient() {
        let mut d = vec![1.0, 2.0, 3.0];
        apply_mask(&mut d, &[true, false, true]);
        assert_eq!(d, vec![1.0, 0.0, 3.0]);
        let mut v = vec![0.5, 100.0];
        let m = fake_quant(&mut v, Some(FixedPointFormat::new(-4)));
        assert_eq!(m, vec![true, false]);
        assert_eq!(v, vec![0.5, 127.0 / 16.0]);
    }

    #[test]
    fn forward_is_reproducible() {
        let arch = ToyArch::small();
        let p = Params::init(arch, 2);
        let (x, y) = batch(arch, 6, 3);
        let q =
            Quantizers { weights: Some(QuantConfig::ternary(2)), activations: Some([FixedPointFormat::new(-4); 6]) };
        let a = forward(&p, &x, &y, &q).unwrap();
        let b = forward(&p, &x, &y, &q).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
}
